from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path

import pytest

from greendb.crawler import MerchantConfig, NextLinkSelector
from greendb.extraction import LabelSelectorRule
from greendb.labels import load_label_seed, load_mappings
from greendb.model import ProductRecord
from greendb.persistence import CachedPage, GreenStore, RunManifest

FIXTURES = Path(__file__).parent / "fixtures"
T0 = datetime(2022, 2, 17, 9, 0, tzinfo=timezone.utc)


def fixture_bytes(name: str) -> bytes:
    return (FIXTURES / name).read_bytes()


def make_config(merchant="otto", **kw) -> MerchantConfig:
    base = f"https://www.{merchant}.example"
    fields = dict(
        merchant=merchant,
        base_url=base,
        currency="EUR",
        category_seeds=(("JACKET", base + "/jacken"),),
        pagination=NextLinkSelector("a[rel=next]"),
        product_link_selector="a.product-link",
        label_rules=LabelSelectorRule(merchant, "li.sustainability-badge"),
        url_strip_params=("utm_source",),
    )
    fields.update(kw)
    return MerchantConfig(**fields)


def make_page(html: bytes, url="https://www.otto.example/p/raikou-sweatjacke", merchant="otto",
              categories=("JACKET",), run_id="run1", page_id="page-1") -> CachedPage:
    return CachedPage(page_id, url, merchant, categories, run_id, html, T0)


def make_record(**kw) -> ProductRecord:
    fields = dict(
        name="RAIKOU Sweatjacke (...)",
        url="https://www.otto.example/p/raikou-sweatjacke",
        merchant="otto",
        category="JACKET",
        run_id="run1",
        fetched_at=T0,
        gtin="4250805445834",
        description="Sweatjacke Unisex (...)",
        manufacturer="RAIKOU",
        price=Decimal("39.99"),
        currency="EUR",
        image_urls=("https://www.otto.example/images/raikou-front.jpg",),
        sustainability_label_ids=frozenset({"MIG_OEKO_TEX"}),
    )
    fields.update(kw)
    return ProductRecord(**fields)


@pytest.fixture(scope="session")
def registry():
    return load_label_seed()


@pytest.fixture(scope="session")
def mappings(registry):
    return load_mappings(None, registry)


@pytest.fixture
def otto_config():
    return make_config()


@pytest.fixture
def store(registry):
    s = GreenStore(":memory:")
    s.save_registry(registry)
    yield s
    s.close()


def add_run(store, run_id, started_at=T0):
    store.start_run(RunManifest(run_id, started_at))


def crawl_spec(spec_dict):
    """Crawl a mock catalog once; return (manifest, config, scraped pages, base url)."""
    from greendb.crawler import crawl_merchant
    from greendb.mock import CatalogSpec, MockMerchantServer, generate_catalog, merchant_config

    spec = CatalogSpec.from_dict(spec_dict)
    manifest = generate_catalog(spec)
    pages = []
    with MockMerchantServer(manifest) as server:
        config = merchant_config(spec, server.url)
        crawl_merchant(config, "run1", pages.append)
        base = server.url
    return manifest, config, pages, base


MOCK24 = {
    "seed": 11,
    "categories": [{"code": "JACKET", "count": 12}, {"code": "SWEATER", "count": 12}],
    "page_size": 4,
    "label_distribution": {"MIG_OEKO_TEX": 0.3, "SYNTHETIC_001": 0.1, "OTHER": 0.4},
}


@pytest.fixture(scope="session")
def crawled24():
    return crawl_spec(MOCK24)


def dedup_store(store):
    """17 unique products, 4 of them listed in two categories: 21 rows."""
    from greendb.persistence import ProductRow

    add_run(store, "run1")
    cats = ["JACKET", "SWEATER", "T_SHIRT"]
    for i in range(17):
        body = f"4000000{i:05d}"
        from greendb.model import gtin_check_digit

        gtin = None if i % 5 == 0 else body + str(gtin_check_digit(body))
        url = f"https://www.otto.example/p/item-{i}"
        first = cats[i % 3]
        categories = [first] + ([cats[(i + 1) % 3]] if i < 4 else [])
        for cat in categories:
            rec = make_record(name=f"Item {i}", url=url, gtin=gtin, category=cat,
                              sustainability_label_ids=frozenset())
            store.upsert_product(ProductRow.from_record(rec))


def distribution_rows():
    """100 unique products: 48 otto / 52 zalando, 67 private-only, 21 third-party, 12 unlabeled.

    Twelve otto products also appear in a second category (112 rows).
    """
    from greendb.persistence import ProductRow

    groups = ["OTHER"] * 67 + ["MIG_OEKO_TEX"] * 21 + [None] * 12
    rows = []
    for i, label in enumerate(groups):
        merchant = "otto" if i % 25 < 12 else "zalando"
        labels = frozenset() if label is None else frozenset({label})
        cats = ["JACKET", "SWEATER"] if merchant == "otto" and i < 25 else ["JACKET"]
        for cat in cats:
            rec = make_record(name=f"p{i}", merchant=merchant, url=f"https://www.{merchant}.example/p/{i}",
                              gtin=None, category=cat, sustainability_label_ids=labels)
            rows.append(ProductRow.from_record(rec))
    return rows


def brute_distribution(rows, registry):
    """Independent recount with exact fractions and round-half-even."""
    from fractions import Fraction

    labels, merchant_of = {}, {}
    for r in rows:
        labels.setdefault(r.key, set()).update(r.record.sustainability_label_ids)
        merchant_of[r.key] = r.key.merchant

    def group(ids):
        if not ids:
            return "unlabeled"
        if any(registry.get(x).kind.value == "ThirdParty" for x in ids):
            return "third_party"
        return "private"

    def frac(a, b):
        return 0.0 if b == 0 else float(round(Fraction(a, b), 4))

    total = len(labels)
    out = {"total_unique": total, "total_rows": len(rows), "label_groups": {}, "merchants": {}}
    for g in ("third_party", "private", "unlabeled"):
        n = sum(1 for ids in labels.values() if group(ids) == g)
        out["label_groups"][g] = {"count": n, "fraction": frac(n, total)}
    for m in sorted(set(merchant_of.values())):
        keys = [k for k in labels if merchant_of[k] == m]
        groups = {}
        for g in ("third_party", "private", "unlabeled"):
            n = sum(1 for k in keys if group(labels[k]) == g)
            groups[g] = {"count": n, "fraction": frac(n, len(keys))}
        out["merchants"][m] = {"unique": len(keys), "fraction": frac(len(keys), total), "label_groups": groups}
    return out


_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.failed or (report.when == "call" and number not in _ACCEPTANCE):
        _ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", title)
    elif report.skipped and number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = ("SKIP", title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
