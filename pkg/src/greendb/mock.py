"""Deterministic mock merchant for end-to-end tests.

A :class:`CatalogSpec` describes a synthetic catalog; :func:`generate_catalog`
expands it into a :class:`CatalogManifest`, the ground truth the pipeline
is checked against, and :class:`MockMerchantServer` serves it over HTTP:
robots.txt, paginated category listings and product detail pages.

Generation uses ``random.Random(seed).random()`` only, i.e. MT19937 floats,
which are identical on every platform and Python version this package
supports. Integers are derived as ``int(u * n)``.
"""

from __future__ import annotations

import enum
import fnmatch
import html
import json
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional, Union
from urllib.parse import parse_qs, urljoin, urlsplit

import yaml

from .crawler import MerchantConfig, NextLinkSelector
from .extraction import LabelSelectorRule
from .labels import OTHER, PROVISIONAL_PREFIX, LabelMapping, LabelMappings, LabelRegistry, load_label_seed
from .model import (
    CATEGORY_CODE_RE,
    KeyType,
    ProductKey,
    ProductRecord,
    gtin_check_digit,
    normalize_url,
)

logger = logging.getLogger(__name__)

JSONLD = "jsonld"
MICRODATA = "microdata"
STRIP_PARAMS = ("utm_source",)
PRIVATE_PHRASES = ("made with recycled materials", "energy-saving device", "organic cotton", "water-saving production")

_BRANDS = ("RAIKOU", "Nordhof", "Kestrel", "Alvar", "Lumen", "Okapi", "Tessin", "Vireo")
_ADJECTIVES = ("Classic", "Organic", "Light", "Urban", "Recycled", "Warm", "Slim", "Relaxed")
_NOUNS = {
    "JACKET": "Sweatjacke", "COAT": "Mantel", "SWEATER": "Pullover", "T_SHIRT": "T-Shirt",
    "SHIRT": "Hemd", "TROUSERS": "Hose", "JEANS": "Jeans", "DRESS": "Kleid",
}


class InvalidSpec(ValueError):
    pass


class BindError(OSError):
    pass


class FaultMode(enum.Enum):
    TIMEOUT = "Timeout"
    HTTP_500_ONCE = "Http500Once"
    MALFORMED_HTML = "MalformedHtml"


@dataclass(frozen=True)
class Fault:
    pattern: str
    mode: FaultMode

    def matches(self, path: str) -> bool:
        return fnmatch.fnmatchcase(path, self.pattern)


@dataclass(frozen=True)
class CategorySpec:
    code: str
    count: int
    path: str = ""

    @property
    def listing_path(self) -> str:
        return self.path or "/c/" + self.code.lower().replace("_", "-")


@dataclass(frozen=True)
class CatalogSpec:
    seed: int
    categories: tuple[CategorySpec, ...]
    page_size: int = 4
    label_distribution: tuple[tuple[str, float], ...] = ()
    multi_category_overlap: float = 0.0
    fault_plan: tuple[Fault, ...] = ()
    robots_rules: str = "User-agent: *\nAllow: /\n"
    merchant: str = "mock"
    template: str = JSONLD
    currency: str = "EUR"
    missing_gtin_fraction: float = 0.0
    timeout_delay: float = 1.5
    badges: tuple[tuple[str, str], ...] = ()
    fixed_products: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.page_size < 1:
            raise InvalidSpec("page_size must be >= 1")
        if not 0.0 <= self.multi_category_overlap <= 1.0:
            raise InvalidSpec("multi_category_overlap must lie in [0, 1]")
        if not 0.0 <= self.missing_gtin_fraction <= 1.0:
            raise InvalidSpec("missing_gtin_fraction must lie in [0, 1]")
        probs = [p for _, p in self.label_distribution]
        if any(p < 0 for p in probs) or sum(probs) > 1.0 + 1e-9:
            raise InvalidSpec("label probabilities must be >= 0 and sum to <= 1")
        if self.template not in (JSONLD, MICRODATA):
            raise InvalidSpec(f"unknown template {self.template!r}")
        if not self.categories:
            raise InvalidSpec("at least one category is required")
        codes = [c.code for c in self.categories]
        if len(set(codes)) != len(codes):
            raise InvalidSpec("duplicate category code")
        for c in self.categories:
            if not CATEGORY_CODE_RE.match(c.code) or c.count < 0:
                raise InvalidSpec(f"bad category entry {c}")
        if self.multi_category_overlap > 0 and len(self.categories) < 2:
            raise InvalidSpec("multi-category overlap needs at least two categories")

    @classmethod
    def from_dict(cls, data: dict) -> "CatalogSpec":
        try:
            cats = []
            for c in data["categories"]:
                if isinstance(c, dict):
                    cats.append(CategorySpec(str(c["code"]), int(c["count"]), str(c.get("path", ""))))
                else:
                    code, count = c
                    cats.append(CategorySpec(str(code), int(count)))
            faults = tuple(Fault(str(f["pattern"]), FaultMode(f["mode"])) for f in data.get("fault_plan") or ())
            dist = data.get("label_distribution") or {}
            kwargs = {}
            for key, conv in (
                ("page_size", int), ("multi_category_overlap", float), ("robots_rules", str), ("merchant", str),
                ("template", str), ("currency", str), ("missing_gtin_fraction", float), ("timeout_delay", float),
            ):
                if data.get(key) is not None:
                    kwargs[key] = conv(data[key])
            return cls(
                seed=int(data["seed"]),
                categories=tuple(cats),
                label_distribution=tuple((str(k), float(v)) for k, v in dist.items()),
                fault_plan=faults,
                badges=tuple((str(k), str(v)) for k, v in (data.get("badges") or {}).items()),
                fixed_products=tuple(data.get("fixed_products") or ()),
                **kwargs,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSpec):
                raise
            raise InvalidSpec(f"bad catalog spec: {exc}") from None


def load_catalog_spec(path: Union[str, Path]) -> CatalogSpec:
    data = yaml.safe_load(Path(path).read_text("utf-8"))
    if not isinstance(data, dict):
        raise InvalidSpec(f"{path}: catalog spec must be a mapping")
    return CatalogSpec.from_dict(data)


@dataclass(frozen=True)
class MockProduct:
    slug: str
    name: str
    description: str
    brand: str
    gtin: Optional[str]
    price: Optional[Decimal]
    currency: Optional[str]
    image_paths: tuple[str, ...]
    categories: tuple[str, ...]
    label_ids: tuple[str, ...]
    badges: tuple[str, ...]

    @property
    def path(self) -> str:
        return f"/p/{self.slug}"

    def as_dict(self) -> dict:
        return {
            "slug": self.slug,
            "name": self.name,
            "description": self.description,
            "brand": self.brand,
            "gtin": self.gtin,
            "price": None if self.price is None else str(self.price),
            "currency": self.currency,
            "image_paths": list(self.image_paths),
            "categories": list(self.categories),
            "label_ids": list(self.label_ids),
            "badges": list(self.badges),
        }


@dataclass(frozen=True)
class CatalogManifest:
    """Ground truth for one generated catalog."""

    spec: CatalogSpec
    products: tuple[MockProduct, ...]
    # category code -> pages -> product slugs
    listings: dict[str, tuple[tuple[str, ...], ...]] = field(default_factory=dict)

    def product(self, slug: str) -> MockProduct:
        for p in self.products:
            if p.slug == slug:
                return p
        raise KeyError(slug)

    def fault_for(self, path: str) -> Optional[Fault]:
        for fault in self.spec.fault_plan:
            if fault.matches(path):
                return fault
        return None

    def disallowed(self, path: str) -> bool:
        from .crawler import parse_robots

        return not parse_robots(self.spec.robots_rules).allowed("http://mock" + path, "greendb")

    def unrecoverable(self) -> set[str]:
        """Slugs whose product page can never yield a row.

        Covers product pages with a Timeout or MalformedHtml fault and
        products reachable only through robots-disallowed listings or paths.
        """
        lost = set()
        for p in self.products:
            fault = self.fault_for(p.path)
            if fault is not None and fault.mode in (FaultMode.TIMEOUT, FaultMode.MALFORMED_HTML):
                lost.add(p.slug)
            elif self.disallowed(p.path) or all(self.disallowed(self._listing_path(c)) for c in p.categories):
                lost.add(p.slug)
        return lost

    def reachable_categories(self, product: MockProduct) -> tuple[str, ...]:
        return tuple(c for c in product.categories if not self.disallowed(self._listing_path(c)))

    def _listing_path(self, code: str) -> str:
        for c in self.spec.categories:
            if c.code == code:
                return c.listing_path
        raise KeyError(code)

    def listing_page_count(self) -> int:
        return sum(len(pages) for pages in self.listings.values())

    def expected_rows(self, base_url: str) -> dict[tuple[ProductKey, str], frozenset[str]]:
        """(product key, category) -> label ids for every recoverable row."""
        lost = self.unrecoverable()
        rows = {}
        for p in self.products:
            if p.slug in lost:
                continue
            if p.gtin is not None:
                key = ProductKey(self.spec.merchant, KeyType.GTIN, p.gtin)
            else:
                key = ProductKey(self.spec.merchant, KeyType.URL, normalize_url(urljoin(base_url, p.path)))
            for cat in self.reachable_categories(p):
                rows[(key, cat)] = frozenset(p.label_ids)
        return rows

    def to_json(self) -> str:
        return json.dumps(
            {
                "merchant": self.spec.merchant,
                "seed": self.spec.seed,
                "products": [p.as_dict() for p in self.products],
                "listings": {k: [list(page) for page in v] for k, v in self.listings.items()},
            },
            sort_keys=True,
            indent=1,
        )


def default_badge_texts(registry: Optional[LabelRegistry] = None) -> dict[str, str]:
    registry = registry or load_label_seed()
    return {lb.label_id: lb.name for lb in registry if lb.label_id != OTHER}


def _gtin(rng: random.Random) -> str:
    body = "20" + "".join(str(int(rng.random() * 10)) for _ in range(10))
    return body + str(gtin_check_digit(body))


def _pick_label(rng: random.Random, distribution: tuple[tuple[str, float], ...]) -> Optional[str]:
    u = rng.random()
    acc = 0.0
    for label_id, p in distribution:
        acc += p
        if u < acc:
            return label_id
    return None


def generate_catalog(spec: CatalogSpec, registry: Optional[LabelRegistry] = None) -> CatalogManifest:
    """Expand ``spec`` into a manifest; the same spec always gives the same manifest."""
    rng = random.Random(spec.seed)
    texts = default_badge_texts(registry)
    texts.update(dict(spec.badges))
    products: list[MockProduct] = []
    other_counter = 0

    def badge_for(label_id: str) -> str:
        nonlocal other_counter
        if label_id == OTHER:
            other_counter += 1
            return PRIVATE_PHRASES[(other_counter - 1) % len(PRIVATE_PHRASES)]
        if label_id in texts:
            return texts[label_id]
        if label_id.startswith(PROVISIONAL_PREFIX):
            return label_id[len(PROVISIONAL_PREFIX):].replace("_", " ").title()
        raise InvalidSpec(f"no badge text for label {label_id}")

    for cat in spec.categories:
        noun = _NOUNS.get(cat.code, cat.code.replace("_", " ").title())
        for i in range(cat.count):
            brand = _BRANDS[int(rng.random() * len(_BRANDS))]
            adjective = _ADJECTIVES[int(rng.random() * len(_ADJECTIVES))]
            gtin = _gtin(rng)
            if rng.random() < spec.missing_gtin_fraction:
                gtin = None
            price = Decimal(int(rng.random() * 20000) + 99) / Decimal(100)
            label = _pick_label(rng, spec.label_distribution)
            slug = f"{cat.code.lower().replace('_', '-')}-{i + 1:04d}"
            labels = () if label is None else (label,)
            products.append(
                MockProduct(
                    slug=slug,
                    name=f"{brand} {noun} {adjective} {i + 1}",
                    description=f"{noun} {adjective.lower()} by {brand}, item {i + 1}.",
                    brand=brand,
                    gtin=gtin,
                    price=price,
                    currency=spec.currency,
                    image_paths=(f"/img/{slug}.jpg",),
                    categories=(cat.code,),
                    label_ids=labels,
                    badges=tuple(badge_for(lb) for lb in labels),
                )
            )

    # deterministic Fisher-Yates pick of products that get a second category
    overlap = round(spec.multi_category_overlap * len(products))
    if overlap:
        order = list(range(len(products)))
        for i in range(len(order) - 1, 0, -1):
            j = int(rng.random() * (i + 1))
            order[i], order[j] = order[j], order[i]
        codes = [c.code for c in spec.categories]
        for idx in sorted(order[:overlap]):
            p = products[idx]
            second = codes[(codes.index(p.categories[0]) + 1) % len(codes)]
            products[idx] = MockProduct(**{**p.__dict__, "categories": (p.categories[0], second)})

    for fixed in spec.fixed_products:
        labels = tuple(fixed.get("labels") or ())
        badges = tuple(fixed.get("badges") or (badge_for(lb) for lb in labels))
        cats = tuple(fixed.get("categories") or (fixed["category"],))
        products.append(
            MockProduct(
                slug=str(fixed["slug"]),
                name=str(fixed["name"]),
                description=str(fixed.get("description", "")),
                brand=str(fixed.get("brand", "")),
                gtin=None if fixed.get("gtin") is None else str(fixed["gtin"]),
                price=None if fixed.get("price") is None else Decimal(str(fixed["price"])),
                currency=spec.currency if fixed.get("price") is not None else None,
                image_paths=tuple(fixed.get("images") or ()),
                categories=cats,
                label_ids=labels,
                badges=badges,
            )
        )

    slugs = [p.slug for p in products]
    if len(set(slugs)) != len(slugs):
        raise InvalidSpec("duplicate product slug")
    listings = {}
    for cat in spec.categories:
        members = [p.slug for p in products if cat.code in p.categories]
        pages = max(1, math.ceil(len(members) / spec.page_size))
        listings[cat.code] = tuple(
            tuple(members[n * spec.page_size:(n + 1) * spec.page_size]) for n in range(pages)
        )
    return CatalogManifest(spec, tuple(products), listings)


def mock_mappings(manifest: CatalogManifest) -> LabelMappings:
    """Badge text -> label id mappings for the mock merchant."""
    mappings = LabelMappings()
    for p in manifest.products:
        for label_id, text in zip(p.label_ids, p.badges):
            if not label_id.startswith(PROVISIONAL_PREFIX):
                mappings.add(LabelMapping(manifest.spec.merchant, text, label_id))
    for phrase in PRIVATE_PHRASES:
        mappings.add(LabelMapping(manifest.spec.merchant, phrase, OTHER))
    return mappings


def merchant_config(spec: CatalogSpec, base_url: str, **overrides) -> MerchantConfig:
    """A MerchantConfig that crawls the mock merchant served at ``base_url``."""
    if spec.template == JSONLD:
        rules = LabelSelectorRule(spec.merchant, "ul.sustainability-labels li.sustainability-badge")
    else:
        rules = LabelSelectorRule(spec.merchant, "img.label-icon", "data-sustainability-label")
    fields = dict(
        merchant=spec.merchant,
        base_url=base_url,
        currency=spec.currency,
        category_seeds=tuple((c.code, urljoin(base_url, c.listing_path)) for c in spec.categories),
        pagination=NextLinkSelector("a[rel=next]"),
        product_link_selector="a.product-link",
        label_rules=rules,
        url_strip_params=STRIP_PARAMS,
        rate=50.0,
        timeout=spec.timeout_delay / 3,
        retry_backoff=0.05,
    )
    fields.update(overrides)
    return MerchantConfig(**fields)


# -- rendering ---------------------------------------------------------------


def _esc(text: str) -> str:
    return html.escape(text, quote=True)


def render_listing(manifest: CatalogManifest, code: str, page: int) -> Optional[str]:
    pages = manifest.listings.get(code)
    if pages is None or not 1 <= page <= len(pages):
        return None
    path = manifest._listing_path(code)
    items = []
    for slug in pages[page - 1]:
        p = manifest.product(slug)
        items.append(
            f'<li class="tile"><a class="product-link" href="{p.path}?utm_source=listing">{_esc(p.name)}</a></li>'
        )
    nav = ""
    if page < len(pages):
        nav = f'<a rel="next" class="next" href="{path}?page={page + 1}">next</a>'
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{code} page {page}</title></head><body>\n"
        f"<h1>{code}</h1>\n<ul class=\"grid\">\n" + "\n".join(items) + f"\n</ul>\n<nav>{nav}</nav>\n</body></html>\n"
    )


def render_product(product: MockProduct, template: str = JSONLD) -> str:
    """Product detail page carrying structured data and label badges."""
    if template == JSONLD:
        return _render_jsonld(product)
    if template == MICRODATA:
        return _render_microdata(product)
    raise InvalidSpec(f"unknown template {template!r}")


def _render_jsonld(p: MockProduct) -> str:
    data: dict = {"@context": "https://schema.org", "@type": "Product", "name": p.name}
    if p.description:
        data["description"] = p.description
    if p.gtin is not None:
        data["gtin13"] = p.gtin
    if p.brand:
        data["brand"] = {"@type": "Brand", "name": p.brand}
    if p.image_paths:
        data["image"] = list(p.image_paths)
    if p.price is not None:
        data["offers"] = {"@type": "Offer", "price": str(p.price), "priceCurrency": p.currency,
                          "availability": "https://schema.org/InStock"}
    crumbs = {
        "@context": "https://schema.org",
        "@type": "BreadcrumbList",
        "itemListElement": [{"@type": "ListItem", "position": 1, "name": p.categories[0]}],
    }
    blob = json.dumps(data, ensure_ascii=False).replace("</", "<\\/")
    crumb_blob = json.dumps(crumbs).replace("</", "<\\/")
    badges = "\n".join(f'  <li class="sustainability-badge">{_esc(b)}</li>' for b in p.badges)
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{_esc(p.name)}</title>\n"
        f'<script type="application/ld+json">{crumb_blob}</script>\n'
        f'<script type="application/ld+json">{blob}</script>\n'
        "</head><body>\n"
        f"<h1>{_esc(p.name)}</h1>\n"
        f'<ul class="sustainability-labels">\n{badges}\n</ul>\n'
        "</body></html>\n"
    )


def _render_microdata(p: MockProduct) -> str:
    parts = ['<div itemscope itemtype="https://schema.org/Product">', f'<h1 itemprop="name">{_esc(p.name)}</h1>']
    if p.gtin is not None:
        parts.append(f'<meta itemprop="gtin13" content="{p.gtin}">')
    if p.brand:
        parts.append(
            '<div itemprop="brand" itemscope itemtype="https://schema.org/Brand">'
            f'<span itemprop="name">{_esc(p.brand)}</span></div>'
        )
    for img in p.image_paths:
        parts.append(f'<img itemprop="image" src="{_esc(img)}" alt="">')
    if p.description:
        parts.append(f'<div itemprop="description">{_esc(p.description)}</div>')
    if p.price is not None:
        shown = str(p.price).replace(".", ",")
        parts.append(
            '<div itemprop="offers" itemscope itemtype="https://schema.org/Offer">'
            f'<span itemprop="price" content="{p.price}">{shown} €</span>'
            f'<meta itemprop="priceCurrency" content="{p.currency}"></div>'
        )
    parts.append("</div>")
    for b in p.badges:
        parts.append(f'<img class="label-icon" src="/img/label.png" data-sustainability-label="{_esc(b)}" alt="">')
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{_esc(p.name)}</title></head><body>\n" + "\n".join(parts) + "\n</body></html>\n"
    )


def render_malformed(p: MockProduct) -> str:
    """A product page whose structured data is broken beyond recovery."""
    return (
        "<html><head><title>" + _esc(p.name) + "<script type=\"application/ld+json\">"
        '{"@context": "https://schema.org", "@type": "Product", "name": "' + _esc(p.name)[:8]
        + "</scr<div class=<<>\x00<p><p></table></td></body"
    )


def product_from_record(record: ProductRecord, badge_texts: dict[str, str]) -> MockProduct:
    """Inverse view used to re-render a stored record as a merchant page."""
    labels = tuple(sorted(record.sustainability_label_ids))
    badges = []
    for lb in labels:
        if lb == OTHER:
            badges.append(PRIVATE_PHRASES[0])
        else:
            badges.append(badge_texts[lb])
    return MockProduct(
        slug=urlsplit(record.url).path.rsplit("/", 1)[-1],
        name=record.name,
        description=record.description,
        brand=record.manufacturer,
        gtin=record.gtin,
        price=record.price,
        currency=record.currency,
        image_paths=record.image_urls,
        categories=(record.category,),
        label_ids=labels,
        badges=tuple(badges),
    )


# -- server ------------------------------------------------------------------


class MockMerchantServer:
    """Threaded HTTP server for one catalog, bound to loopback by default.

    Routes: ``/robots.txt``, each category's listing path (``?page=N``),
    ``/p/<slug>``, and ``/__log`` which dumps the request log as JSONL.
    """

    def __init__(self, spec_or_manifest: Union[CatalogSpec, CatalogManifest], host: str = "127.0.0.1",
                 port: int = 0):
        if isinstance(spec_or_manifest, CatalogSpec):
            spec_or_manifest = generate_catalog(spec_or_manifest)
        self.manifest = spec_or_manifest
        self._log: list[dict] = []
        self._log_lock = threading.Lock()
        self._fault_hits: dict[str, int] = {}
        self._listing_by_path = {c.listing_path: c.code for c in self.manifest.spec.categories}
        handler = self._make_handler()
        try:
            self._httpd = ThreadingHTTPServer((host, port), handler)
        except OSError as exc:
            raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockMerchantServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="mock-merchant", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def request_log(self) -> list[dict]:
        with self._log_lock:
            return [dict(e) for e in self._log]

    def _record(self, entry: dict) -> None:
        with self._log_lock:
            entry["seq"] = len(self._log)
            self._log.append(entry)

    def _respond(self, path: str, query: dict) -> tuple[int, str, bytes, float]:
        """(status, content type, body, delay before answering)."""
        man = self.manifest
        fault = man.fault_for(path)
        delay = 0.0
        if fault is not None:
            if fault.mode is FaultMode.TIMEOUT:
                delay = man.spec.timeout_delay
            elif fault.mode is FaultMode.HTTP_500_ONCE:
                with self._log_lock:
                    hits = self._fault_hits.get(path, 0)
                    self._fault_hits[path] = hits + 1
                if hits == 0:
                    return 500, "text/plain", b"injected failure", 0.0
        if path == "/robots.txt":
            return 200, "text/plain", man.spec.robots_rules.encode("utf-8"), delay
        if path in self._listing_by_path:
            try:
                page = int(query.get("page", ["1"])[0])
            except ValueError:
                page = 0
            body = render_listing(man, self._listing_by_path[path], page)
            if body is None:
                return 404, "text/plain", b"no such page", delay
            return 200, "text/html; charset=utf-8", body.encode("utf-8"), delay
        if path.startswith("/p/"):
            try:
                product = man.product(path[3:])
            except KeyError:
                return 404, "text/plain", b"no such product", delay
            if fault is not None and fault.mode is FaultMode.MALFORMED_HTML:
                body = render_malformed(product)
            else:
                body = render_product(product, man.spec.template)
            return 200, "text/html; charset=utf-8", body.encode("utf-8"), delay
        return 404, "text/plain", b"not found", delay

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                logger.debug("mock: " + fmt, *args)

            def do_GET(self):
                received = time.monotonic()
                parts = urlsplit(self.path)
                if parts.path == "/__log":
                    body = "".join(json.dumps(e) + "\n" for e in server.request_log()).encode("utf-8")
                    self._send(200, "application/x-ndjson", body)
                    return
                status, ctype, body, delay = server._respond(parts.path, parse_qs(parts.query))
                server._record({
                    "time": received,
                    "method": "GET",
                    "path": parts.path,
                    "query": parts.query,
                    "status": status,
                    "user_agent": self.headers.get("User-Agent", ""),
                })
                if delay:
                    time.sleep(delay)
                try:
                    self._send(status, ctype, body)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def _send(self, status, ctype, body):
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        return Handler
