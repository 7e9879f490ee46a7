import json
import urllib.error
import urllib.request

import pytest

from conftest import make_record
from greendb.labels import OTHER
from greendb.mock import (
    CatalogSpec,
    InvalidSpec,
    MockMerchantServer,
    generate_catalog,
    load_catalog_spec,
    product_from_record,
    render_listing,
    render_product,
)
from greendb.model import validate_gtin

SMALL = {"seed": 5, "categories": [{"code": "JACKET", "count": 4}], "page_size": 2}


def _get(url):
    try:
        with urllib.request.urlopen(url, timeout=5) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()


def test_generation_is_deterministic():
    spec = load_catalog_spec("configs/small.spec")
    assert generate_catalog(spec).to_json() == generate_catalog(spec).to_json()
    other = CatalogSpec.from_dict({**SMALL, "seed": 6})
    assert generate_catalog(other).to_json() != generate_catalog(CatalogSpec.from_dict(SMALL)).to_json()


def test_frozen_small_catalog():
    # frozen from the first generation; changing generation breaks every stored manifest
    man = generate_catalog(CatalogSpec.from_dict(SMALL))
    assert [p.slug for p in man.products] == ["jacket-0001", "jacket-0002", "jacket-0003", "jacket-0004"]
    assert man.listings == {"JACKET": (("jacket-0001", "jacket-0002"), ("jacket-0003", "jacket-0004"))}


def test_listing_pagination():
    man = generate_catalog(CatalogSpec.from_dict(SMALL))
    page1, page2 = render_listing(man, "JACKET", 1), render_listing(man, "JACKET", 2)
    assert 'rel="next"' in page1 and "?page=2" in page1
    assert 'rel="next"' not in page2
    assert render_listing(man, "JACKET", 3) is None


def test_gtins_valid_and_unique():
    man = generate_catalog(CatalogSpec.from_dict({"seed": 9, "categories": [{"code": "JACKET", "count": 200}]}))
    gtins = [p.gtin for p in man.products]
    assert all(validate_gtin(g) for g in gtins)
    assert len(set(gtins)) == len(gtins)


def test_missing_gtin_fraction():
    man = generate_catalog(CatalogSpec.from_dict({"seed": 9, "missing_gtin_fraction": 1.0,
                                                  "categories": [{"code": "JACKET", "count": 5}]}))
    assert all(p.gtin is None for p in man.products)


def test_overlap_count():
    spec = CatalogSpec.from_dict({"seed": 1, "multi_category_overlap": 0.25,
                                  "categories": [{"code": "JACKET", "count": 8}, {"code": "SWEATER", "count": 8}]})
    man = generate_catalog(spec)
    assert sum(len(p.categories) == 2 for p in man.products) == 4
    assert sum(len(pages) for pages in man.listings.values()) == 6  # frozen


@pytest.mark.parametrize("bad", [
    {"seed": 1, "categories": []},
    {"seed": 1, "categories": [{"code": "JACKET", "count": 1}], "page_size": 0},
    {"seed": 1, "categories": [{"code": "JACKET", "count": 1}], "label_distribution": {"OTHER": 1.5}},
    {"seed": 1, "categories": [{"code": "JACKET", "count": 1}], "multi_category_overlap": 0.5},
    {"seed": 1, "categories": [{"code": "jacket", "count": 1}]},
    {"categories": [{"code": "JACKET", "count": 1}]},
])
def test_invalid_specs(bad):
    with pytest.raises(InvalidSpec):
        CatalogSpec.from_dict(bad)


def test_server_routes_and_faults():
    spec = CatalogSpec.from_dict({**SMALL, "robots_rules": "User-agent: *\nDisallow: /private\n",
                                  "fault_plan": [{"pattern": "/p/jacket-0001", "mode": "Http500Once"},
                                                 {"pattern": "/p/jacket-0002", "mode": "MalformedHtml"}]})
    with MockMerchantServer(spec) as server:
        assert _get(server.url + "/robots.txt") == (200, b"User-agent: *\nDisallow: /private\n")
        assert _get(server.url + "/c/jacket")[0] == 200
        assert _get(server.url + "/c/jacket?page=9")[0] == 404
        assert _get(server.url + "/p/jacket-0001")[0] == 500
        assert _get(server.url + "/p/jacket-0001")[0] == 200
        status, body = _get(server.url + "/p/jacket-0002")
        assert status == 200 and b"application/ld+json" in body and b"</script>" not in body
        assert _get(server.url + "/p/nope")[0] == 404
        _, log = _get(server.url + "/__log")
    entries = [json.loads(line) for line in log.decode().splitlines()]
    assert [e["path"] for e in entries] == ["/robots.txt", "/c/jacket", "/c/jacket", "/p/jacket-0001",
                                            "/p/jacket-0001", "/p/jacket-0002", "/p/nope"]
    assert [e["seq"] for e in entries] == list(range(7))
    assert entries[2]["query"] == "page=9"


def test_reference_clone_page_contains_record():
    rec = make_record()
    product = product_from_record(rec, {"MIG_OEKO_TEX": "OEKO-TEX Made in Green"})
    body = render_product(product)
    assert "4250805445834" in body and "OEKO-TEX Made in Green" in body
    assert product.slug == "raikou-sweatjacke"


def test_other_badges_use_private_phrases():
    spec = CatalogSpec.from_dict({"seed": 2, "categories": [{"code": "JACKET", "count": 20}],
                                  "label_distribution": {"OTHER": 1.0}})
    man = generate_catalog(spec)
    assert all(p.label_ids == (OTHER,) for p in man.products)
    assert len({p.badges for p in man.products}) > 1


def test_unrecoverable_and_expected_rows():
    spec = CatalogSpec.from_dict({
        "seed": 3,
        "categories": [{"code": "JACKET", "count": 4}, {"code": "BAG", "count": 2, "path": "/private/bags"}],
        "robots_rules": "User-agent: *\nDisallow: /private\n",
        "fault_plan": [{"pattern": "/p/jacket-0003", "mode": "Timeout"}],
    })
    man = generate_catalog(spec)
    assert man.unrecoverable() == {"jacket-0003", "bag-0001", "bag-0002"}
    assert len(man.expected_rows("http://127.0.0.1:1")) == 3
