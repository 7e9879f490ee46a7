import time
from decimal import Decimal

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import fixture_bytes, make_config, make_page, make_record
from greendb.extraction import (
    LabelSelectorRule,
    NoProductFound,
    NotHtml,
    SelectorError,
    SourceSyntax,
    build_product,
    decode_html,
    extract_labels,
    extract_structured_data,
    parse_price,
)
from greendb.labels import OTHER, LabelMapping, LabelMappings
from greendb.mock import JSONLD, MICRODATA, merchant_config, product_from_record, render_product, CatalogSpec
from greendb.model import gtin_check_digit

JSONLD_BLOCK = '<script type="application/ld+json">{{"@type": "Product", "name": "{name}"}}</script>'
MICRO_BLOCK = '<div itemscope itemtype="https://schema.org/Product"><span itemprop="name">{name}</span></div>'


def test_raikou_node_attributes():
    nodes = extract_structured_data(fixture_bytes("raikou.html"))
    assert len(nodes) == 1
    node = nodes[0]
    assert node.source_syntax is SourceSyntax.JSON_LD
    assert node.get("name") == "RAIKOU Sweatjacke (...)"
    assert node.get("gtin13") == "4250805445834"
    assert node.get("brand") == "RAIKOU"
    assert node.get("offers.price") == "39.99"
    assert node.get("offers.priceCurrency") == "EUR"
    assert node.get("image") == ("/images/raikou-front.jpg",)


def test_page_without_structured_data():
    assert extract_structured_data(fixture_bytes("empty.html")) == []


def test_empty_input_is_not_html():
    with pytest.raises(NotHtml):
        extract_structured_data(b"")


def test_document_order_across_syntaxes():
    html = "<html><body>" + JSONLD_BLOCK.format(name="First") + MICRO_BLOCK.format(name="Second") + "</body></html>"
    nodes = extract_structured_data(html)
    assert [n.get("name") for n in nodes] == ["First", "Second"]
    assert [n.source_syntax for n in nodes] == [SourceSyntax.JSON_LD, SourceSyntax.MICRODATA]
    html = "<html><body>" + MICRO_BLOCK.format(name="Second") + JSONLD_BLOCK.format(name="First") + "</body></html>"
    assert [n.get("name") for n in extract_structured_data(html)] == ["Second", "First"]


def test_json_ld_graph_and_type_list():
    html = ('<script type="application/ld+json">{"@graph": [{"@type": "Organization", "name": "x"},'
            '{"@type": ["Thing", "Product"], "name": "Inner", "gtin13": 4250805445834}]}</script>')
    nodes = extract_structured_data(html)
    assert [n.get("name") for n in nodes] == ["Inner"]
    assert nodes[0].get("gtin13") == "4250805445834"


def test_broken_json_ld_is_skipped():
    html = '<script type="application/ld+json">{"@type": "Product", "name": </script>' + MICRO_BLOCK.format(name="Ok")
    assert [n.get("name") for n in extract_structured_data(html)] == ["Ok"]


def test_nameless_and_duplicate_nodes_dropped():
    html = (JSONLD_BLOCK.format(name="") + JSONLD_BLOCK.format(name="A") + JSONLD_BLOCK.format(name="A"))
    assert [n.get("name") for n in extract_structured_data(html)] == ["A"]


def test_labels_dedup_and_normalized():
    html = '<li class="b"> Blauer  Engel </li><li class="b">Blauer Engel</li><li class="b">  </li><li class="b">Fair</li>'
    assert extract_labels(html, LabelSelectorRule("otto", "li.b")) == ["Blauer Engel", "Fair"]


def test_labels_attribute_rule():
    html = '<img class="i" data-l="A"><img class="i" data-l="B"><img class="i">'
    assert extract_labels(html, LabelSelectorRule("otto", "img.i", "data-l")) == ["A", "B"]


def test_labels_zero_matches():
    assert extract_labels(fixture_bytes("empty.html"), LabelSelectorRule("otto", "li.sustainability-badge")) == []


def test_bad_selector():
    with pytest.raises(SelectorError):
        LabelSelectorRule("otto", "li[[")


@pytest.mark.parametrize(
    "text, expected",
    [
        ("39.99", Decimal("39.99")),
        ("449,00 €", Decimal("449.00")),
        ("1.234,50 €", Decimal("1234.50")),
        ("1,234.50", Decimal("1234.50")),
        ("EUR 12", Decimal("12")),
        ("gratis", None),
        ("", None),
    ],
)
def test_parse_price(text, expected):
    assert parse_price(text) == expected


def test_decode_html_meta_charset():
    raw = '<html><head><meta charset="iso-8859-1"></head><body>Grüner Knopf</body></html>'.encode("latin-1")
    assert "Grüner Knopf" in decode_html(raw)


def test_build_product_raikou(registry, mappings):
    records, report = build_product(make_page(fixture_bytes("raikou.html")), make_config(), registry, mappings)
    assert records == [make_record()]
    assert report.label_ids == ["MIG_OEKO_TEX"]
    assert report.warnings == []


def test_build_product_microdata_washer(registry, mappings):
    page = make_page(fixture_bytes("washer.html"), url="https://www.otto.example/p/wm8", categories=("WASHER",))
    (rec,), report = build_product(page, make_config(), registry, mappings)
    assert rec.name == "Nordhof Waschmaschine WM 8"
    assert rec.manufacturer == "Nordhof"
    assert rec.price == Decimal("449.00") and rec.currency == "EUR"
    assert rec.image_urls == ("https://cdn.otto.example/wm8.jpg",)
    assert rec.sustainability_label_ids == frozenset({OTHER})


def test_build_product_one_record_per_category(registry, mappings):
    page = make_page(fixture_bytes("raikou.html"), categories=("JACKET", "SWEATER"))
    records, _ = build_product(page, make_config(), registry, mappings)
    assert [r.category for r in records] == ["JACKET", "SWEATER"]
    assert len({r.gtin for r in records}) == 1


def test_build_product_no_product(registry, mappings):
    with pytest.raises(NoProductFound):
        build_product(make_page(fixture_bytes("empty.html")), make_config(), registry, mappings)


def test_invalid_gtin_is_demoted(registry, mappings):
    html = fixture_bytes("raikou.html").replace(b"4250805445834", b"4250805445835")
    (rec,), report = build_product(make_page(html), make_config(), registry, mappings)
    assert rec.gtin is None
    assert any("GTIN" in w for w in report.warnings)


def test_unknown_badge_becomes_provisional(registry, mappings):
    html = fixture_bytes("raikou.html").replace(b"Made in Green", b"Fair Stone").replace(b"OEKO-TEX", b"")
    (rec,), report = build_product(make_page(html), make_config(), registry, mappings)
    assert rec.sustainability_label_ids == frozenset({"UNKNOWN_FAIR_STONE"})
    assert report.provisional == [("UNKNOWN_FAIR_STONE", "Fair Stone")]


def test_build_product_deterministic(registry, mappings):
    page = make_page(fixture_bytes("raikou.html"))
    assert build_product(page, make_config(), registry, mappings) == build_product(page, make_config(), registry, mappings)


def test_raikou_speed(registry, mappings):
    start = time.perf_counter()
    build_product(make_page(fixture_bytes("raikou.html")), make_config(), registry, mappings)
    assert time.perf_counter() - start < 1.0


@settings(max_examples=200, suppress_health_check=[HealthCheck.too_slow])
@given(st.binary(max_size=2000) | st.text(max_size=2000).map(lambda s: "<html>" + s))
def test_fuzz_never_crashes(data):
    try:
        extract_structured_data(data)
        extract_labels(data, LabelSelectorRule("otto", "li.sustainability-badge"))
    except NotHtml:
        pass


words = st.text(alphabet="abcdefghijklmnopqrstuvwxyzÄÖÜäöüß0123456789&<>'\"", min_size=1, max_size=10)
phrase = st.lists(words, min_size=1, max_size=5).map(" ".join)


@st.composite
def records(draw):
    gtin = None
    if draw(st.booleans()):
        body = draw(st.text(alphabet="0123456789", min_size=12, max_size=12))
        gtin = body + str(gtin_check_digit(body))
    price = None
    if draw(st.booleans()):
        price = Decimal(draw(st.integers(0, 10**7))) / 100
    slug = draw(st.text(alphabet="abcdefghij-", min_size=1, max_size=12))
    images = draw(st.lists(st.text(alphabet="abcdef", min_size=1, max_size=6), max_size=3, unique=True))
    labels = draw(st.sets(st.sampled_from(["MIG_OEKO_TEX", "SYNTHETIC_001", "SYNTHETIC_077", OTHER]), max_size=3))
    return make_record(
        name=draw(phrase),
        url=f"http://127.0.0.1:8000/p/{slug}",
        merchant="mock",
        gtin=gtin,
        description=draw(phrase | st.just("")),
        manufacturer=draw(phrase | st.just("")),
        price=price,
        currency="EUR" if price is not None else None,
        image_urls=tuple(f"http://127.0.0.1:8000/img/{i}.jpg" for i in images),
        sustainability_label_ids=frozenset(labels),
    )


@pytest.mark.parametrize("template", [JSONLD, MICRODATA])
@settings(max_examples=100, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
@given(rec=records())
def test_render_extract_round_trip(registry, template, rec):
    texts = {lb.label_id: lb.name for lb in registry if lb.label_id != OTHER}
    product = product_from_record(rec, texts)
    maps = LabelMappings([LabelMapping("mock", "made with recycled materials", OTHER)])
    for lid in rec.sustainability_label_ids - {OTHER}:
        maps.add(LabelMapping("mock", texts[lid], lid))
    spec = CatalogSpec.from_dict({"seed": 1, "merchant": "mock", "template": template,
                                  "categories": [{"code": "JACKET", "count": 1}]})
    config = merchant_config(spec, "http://127.0.0.1:8000")
    page = make_page(render_product(product, template).encode(), url=rec.url, merchant="mock")
    (got,), _ = build_product(page, config, registry, maps)
    assert got == rec
