"""Product extraction from cached HTML.

General product attributes come from embedded schema.org data (JSON-LD
script blocks and microdata annotations). Sustainability labels are not
part of schema.org, so they are read from merchant-specific badge elements
located by a CSS selector.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import TYPE_CHECKING, Any, Iterator, Optional, Union
from urllib.parse import urljoin

import soupsieve
from bs4 import BeautifulSoup, Tag

from .labels import (
    OTHER,
    EmptyLabelString,
    LabelMappings,
    LabelRegistry,
    PrivateOther,
    UnknownThirdParty,
    resolve_label,
)
from .model import GtinVerdict, InvariantViolation, ProductRecord, is_absolute_url, validate_gtin

if TYPE_CHECKING:
    from .crawler import MerchantConfig
    from .persistence import CachedPage

logger = logging.getLogger(__name__)

CANONICAL_ATTRIBUTES = (
    "name",
    "description",
    "gtin13",
    "brand",
    "manufacturer",
    "offers.price",
    "offers.priceCurrency",
    "image",
    "url",
)

_CHARSET_RE = re.compile(rb"""<meta[^>]+charset=["']?([A-Za-z0-9_-]+)""", re.I)


class ExtractionError(Exception):
    pass


class NotHtml(ExtractionError):
    pass


class SelectorError(ExtractionError):
    pass


class NoProductFound(ExtractionError):
    pass


class SourceSyntax(enum.Enum):
    JSON_LD = "JsonLdEmbedded"
    MICRODATA = "Microdata"


@dataclass(frozen=True)
class ProductNode:
    """A schema.org Product found in a page.

    ``attributes`` maps canonical property names (see
    ``CANONICAL_ATTRIBUTES``) to text; ``image`` maps to a tuple of texts.
    """

    attributes: dict[str, Union[str, tuple[str, ...]]]
    source_syntax: SourceSyntax

    def get(self, name: str, default=None):
        return self.attributes.get(name, default)


@dataclass(frozen=True)
class LabelSelectorRule:
    """Where a merchant puts its sustainability badges.

    ``attribute`` names the attribute holding the label text; ``None``
    means the element's own text.
    """

    merchant: str
    selector: str
    attribute: Optional[str] = None

    def __post_init__(self):
        try:
            soupsieve.compile(self.selector)
        except Exception as exc:
            raise SelectorError(f"bad label selector {self.selector!r}: {exc}") from None


def decode_html(data: Union[bytes, str]) -> str:
    if isinstance(data, str):
        text = data
    else:
        if not data:
            raise NotHtml("empty document")
        try:
            text = data.decode("utf-8-sig")
        except UnicodeDecodeError:
            m = _CHARSET_RE.search(data[:2048])
            if m is None:
                raise NotHtml("document is not valid UTF-8 and declares no charset") from None
            try:
                text = data.decode(m.group(1).decode("ascii"))
            except (LookupError, UnicodeDecodeError):
                raise NotHtml(f"cannot decode document as {m.group(1)!r}") from None
    if not text.strip():
        raise NotHtml("empty document")
    return text


def _soup(text: str) -> BeautifulSoup:
    try:
        return BeautifulSoup(text, "html.parser")
    except Exception:
        # html.parser gives up on some pathological markup; drop tags we cannot trust
        logger.debug("html.parser failed, retrying on escaped input", exc_info=True)
        return BeautifulSoup(text.replace("<!", "&lt;!"), "html.parser")


def _ws(text: str) -> str:
    return " ".join(text.split())


# -- JSON-LD -----------------------------------------------------------------


def _is_product_type(value: Any) -> bool:
    types = value if isinstance(value, list) else [value]
    for t in types:
        if isinstance(t, str) and (t == "Product" or t.endswith("/Product") or t.endswith(":Product")):
            return True
    return False


def _walk_json(obj: Any) -> Iterator[dict]:
    if isinstance(obj, dict):
        if _is_product_type(obj.get("@type")):
            yield obj
            return
        for value in obj.values():
            yield from _walk_json(value)
    elif isinstance(obj, list):
        for item in obj:
            yield from _walk_json(item)


def _json_text(value: Any) -> Optional[str]:
    if value is None or isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return str(value)
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        for item in value:
            text = _json_text(item)
            if text is not None:
                return text
        return None
    if isinstance(value, dict):
        for key in ("@value", "name"):
            if key in value:
                return _json_text(value[key])
    return None


def _json_images(value: Any) -> tuple[str, ...]:
    out = []
    items = value if isinstance(value, list) else [value]
    for item in items:
        if isinstance(item, str):
            out.append(item)
        elif isinstance(item, dict):
            url = _json_text(item.get("url")) or _json_text(item.get("contentUrl"))
            if url:
                out.append(url)
    return tuple(u.strip() for u in out if u and u.strip())


def _json_offer(value: Any) -> tuple[Optional[str], Optional[str]]:
    offers = value if isinstance(value, list) else [value]
    for offer in offers:
        if not isinstance(offer, dict):
            continue
        price = _json_text(offer.get("price"))
        if price is None:
            price = _json_text(offer.get("lowPrice"))
        spec = offer.get("priceSpecification")
        if price is None and isinstance(spec, dict):
            price = _json_text(spec.get("price"))
        currency = _json_text(offer.get("priceCurrency"))
        if currency is None and isinstance(spec, dict):
            currency = _json_text(spec.get("priceCurrency"))
        if price is not None or currency is not None:
            return price, currency
    return None, None


def _gtin_text(value: Any) -> Optional[str]:
    if isinstance(value, int) and not isinstance(value, bool):
        # numeric GTINs lose their leading zeros
        return str(value).zfill(13)
    return _json_text(value)


def _node_from_json(obj: dict) -> dict:
    attrs: dict[str, Any] = {}
    for key in ("name", "description", "url"):
        text = _json_text(obj.get(key))
        if text is not None:
            attrs[key] = text
    gtin = _gtin_text(obj.get("gtin13"))
    if gtin is None:
        gtin = _gtin_text(obj.get("gtin"))
    if gtin is not None:
        attrs["gtin13"] = gtin
    for key in ("brand", "manufacturer"):
        text = _json_text(obj.get(key))
        if text is not None:
            attrs[key] = text
    price, currency = _json_offer(obj.get("offers"))
    if price is not None:
        attrs["offers.price"] = price
    if currency is not None:
        attrs["offers.priceCurrency"] = currency
    images = _json_images(obj.get("image"))
    if images:
        attrs["image"] = images
    return attrs


def _json_ld_nodes(script: Tag) -> list[dict]:
    text = script.string if script.string is not None else script.get_text()
    text = text.strip()
    for wrapper in (("<!--", "-->"), ("<![CDATA[", "]]>")):
        if text.startswith(wrapper[0]) and text.endswith(wrapper[1]):
            text = text[len(wrapper[0]) : -len(wrapper[1])].strip()
    if not text:
        return []
    try:
        data = json.loads(text, strict=False)
    except (ValueError, RecursionError):
        logger.debug("skipping unparseable JSON-LD block")
        return []
    try:
        return [_node_from_json(obj) for obj in _walk_json(data)]
    except RecursionError:
        return []


# -- microdata ---------------------------------------------------------------

_SRC_TAGS = {"audio", "embed", "iframe", "img", "source", "track", "video"}
_HREF_TAGS = {"a", "area", "link"}


def _attr_text(tag: Tag, name: str) -> Optional[str]:
    value = tag.get(name)
    if isinstance(value, list):
        value = " ".join(value)
    return value


def _microdata_value(tag: Tag) -> str:
    content = _attr_text(tag, "content")
    if content is not None:
        return content
    name = tag.name
    if name in _SRC_TAGS:
        return _attr_text(tag, "src") or ""
    if name in _HREF_TAGS:
        return _attr_text(tag, "href") or ""
    if name == "object":
        return _attr_text(tag, "data") or ""
    if name in ("data", "meter"):
        return _attr_text(tag, "value") or ""
    if name == "time" and tag.get("datetime") is not None:
        return _attr_text(tag, "datetime") or ""
    return tag.get_text()


def _microdata_props(scope: Tag, depth: int = 0) -> dict[str, list[Any]]:
    props: dict[str, list[Any]] = {}

    def visit(el: Tag):
        for child in el.children:
            if not isinstance(child, Tag):
                continue
            names = _attr_text(child, "itemprop")
            nested = child.has_attr("itemscope")
            if names:
                if nested:
                    value: Any = _microdata_props(child, depth + 1) if depth < 20 else {}
                else:
                    value = _microdata_value(child)
                for prop in names.split():
                    props.setdefault(prop, []).append(value)
            if not nested:
                visit(child)

    visit(scope)
    return props


def _first_text(values: list[Any], key: str = "name") -> Optional[str]:
    for v in values:
        if isinstance(v, dict):
            inner = _first_text(v.get(key, []))
            if inner is not None:
                return inner
        elif isinstance(v, str):
            return v
    return None


def _node_from_microdata(scope: Tag) -> dict:
    props = _microdata_props(scope)
    attrs: dict[str, Any] = {}
    for key in ("name", "description", "url", "brand", "manufacturer"):
        text = _first_text(props.get(key, []))
        if text is not None:
            attrs[key] = text.strip()
    gtin = _first_text(props.get("gtin13", [])) or _first_text(props.get("gtin", []))
    if gtin is not None:
        attrs["gtin13"] = gtin.strip()
    for offer in props.get("offers", []):
        if isinstance(offer, dict):
            price = _first_text(offer.get("price", [])) or _first_text(offer.get("lowPrice", []))
            currency = _first_text(offer.get("priceCurrency", []))
        else:
            price, currency = offer, None
        if price is not None:
            attrs["offers.price"] = price.strip()
        if currency is not None:
            attrs["offers.priceCurrency"] = currency.strip()
        if price is not None or currency is not None:
            break
    images = []
    for img in props.get("image", []):
        url = _first_text([img], "url") if isinstance(img, dict) else img
        if url and url.strip():
            images.append(url.strip())
    if images:
        attrs["image"] = tuple(images)
    return attrs


# -- public API --------------------------------------------------------------


def extract_structured_data(html: Union[bytes, str]) -> list[ProductNode]:
    """All schema.org Product nodes in ``html``, in document order.

    Both JSON-LD blocks and microdata scopes are read. Nodes without a name
    are dropped, and identical nodes are reported once.

    Raises:
        NotHtml: ``html`` is empty or cannot be decoded.
    """
    soup = _soup(decode_html(html))
    nodes: list[ProductNode] = []
    for el in soup.find_all(True):
        if el.name == "script":
            kind = (_attr_text(el, "type") or "").split(";")[0].strip().lower()
            if kind == "application/ld+json":
                for attrs in _json_ld_nodes(el):
                    nodes.append(ProductNode(attrs, SourceSyntax.JSON_LD))
        elif el.has_attr("itemscope") and _is_product_type((_attr_text(el, "itemtype") or "").split()):
            nodes.append(ProductNode(_node_from_microdata(el), SourceSyntax.MICRODATA))

    result: list[ProductNode] = []
    seen: list[dict] = []
    for node in nodes:
        name = node.get("name")
        if not isinstance(name, str) or not _ws(name):
            continue
        if node.attributes in seen:
            continue
        seen.append(node.attributes)
        result.append(node)
    return result


def extract_labels(html: Union[bytes, str], rule: LabelSelectorRule) -> list[str]:
    """Badge texts matched by ``rule``, whitespace-normalized and deduplicated."""
    soup = _soup(decode_html(html))
    try:
        matches = soup.select(rule.selector)
    except Exception as exc:
        raise SelectorError(f"bad label selector {rule.selector!r}: {exc}") from None
    out: list[str] = []
    for el in matches:
        raw = el.get_text(" ") if rule.attribute is None else (_attr_text(el, rule.attribute) or "")
        text = _ws(raw)
        if text and text not in out:
            out.append(text)
    return out


def parse_price(text: str) -> Optional[Decimal]:
    """Parse a displayed price, accepting decimal comma or decimal point.

    When both separators occur, the last one is the decimal separator. A
    lone comma is always a decimal comma.

    >>> parse_price("1.234,50 €")
    Decimal('1234.50')
    >>> parse_price("49.95")
    Decimal('49.95')
    """
    cleaned = re.sub(r"[^0-9,.\-]", "", text)
    if not cleaned or not re.search(r"\d", cleaned):
        return None
    comma, dot = cleaned.rfind(","), cleaned.rfind(".")
    if comma > dot:
        cleaned = cleaned.replace(".", "").replace(",", ".")
    else:
        cleaned = cleaned.replace(",", "")
    if cleaned.count(".") > 1:
        head, _, tail = cleaned.rpartition(".")
        cleaned = head.replace(".", "") + "." + tail
    try:
        value = Decimal(cleaned)
    except InvalidOperation:
        return None
    if not value.is_finite() or value < 0:
        return None
    return value


@dataclass
class ExtractionReport:
    url: str
    warnings: list[str] = field(default_factory=list)
    extra_nodes: int = 0
    raw_labels: list[str] = field(default_factory=list)
    label_ids: list[str] = field(default_factory=list)
    # (provisional label id, display text) pairs awaiting curation
    provisional: list[tuple[str, str]] = field(default_factory=list)


def build_product(
    page: "CachedPage",
    config: "MerchantConfig",
    registry: LabelRegistry,
    mappings: LabelMappings,
) -> tuple[list[ProductRecord], ExtractionReport]:
    """Turn a cached page into one ProductRecord per crawl category.

    Raises:
        NoProductFound: the page holds no usable Product node.
        NotHtml: the page body cannot be decoded.
    """
    report = ExtractionReport(page.url)
    nodes = extract_structured_data(page.html)
    if not nodes:
        raise NoProductFound(page.url)
    node = nodes[0]
    if len(nodes) > 1:
        report.extra_nodes = len(nodes) - 1
        report.warnings.append(f"{len(nodes) - 1} additional product node(s) ignored")

    gtin = node.get("gtin13")
    if gtin is not None:
        gtin = gtin.strip()
        verdict = validate_gtin(gtin)
        if verdict is not GtinVerdict.VALID:
            report.warnings.append(f"GTIN {gtin!r} dropped: {verdict.value}")
            gtin = None

    price = currency = None
    raw_price = node.get("offers.price")
    if raw_price is not None:
        price = parse_price(raw_price)
        if price is None:
            report.warnings.append(f"unparseable price {raw_price!r}")
        else:
            currency = (node.get("offers.priceCurrency") or config.currency).strip().upper()
            if not re.fullmatch(r"[A-Z]{3}", currency):
                report.warnings.append(f"bad currency {currency!r}, using {config.currency}")
                currency = config.currency

    images = []
    for img in node.get("image", ()):
        absolute = urljoin(page.url, img)
        if is_absolute_url(absolute) and absolute not in images:
            images.append(absolute)
        elif not is_absolute_url(absolute):
            report.warnings.append(f"image url {img!r} dropped")

    label_ids: list[str] = []
    for raw in extract_labels(page.html, config.label_rules):
        report.raw_labels.append(raw)
        try:
            res = resolve_label(page.merchant, raw, mappings, registry)
        except EmptyLabelString:
            continue
        if isinstance(res, PrivateOther):
            label_id = OTHER
        elif isinstance(res, UnknownThirdParty):
            label_id = res.provisional_id
            if label_id not in registry and (label_id, res.raw) not in report.provisional:
                report.provisional.append((label_id, res.raw))
        else:
            label_id = res.label_id
        if label_id not in label_ids:
            label_ids.append(label_id)
    report.label_ids = label_ids

    manufacturer = node.get("manufacturer") or node.get("brand") or ""
    records = []
    for category in page.categories:
        try:
            records.append(
                ProductRecord(
                    name=_ws(node.get("name")),
                    url=page.url,
                    merchant=page.merchant,
                    category=category,
                    run_id=page.run_id,
                    fetched_at=page.fetched_at,
                    gtin=gtin,
                    description=(node.get("description") or "").strip(),
                    manufacturer=_ws(manufacturer),
                    price=price,
                    currency=currency,
                    image_urls=tuple(images),
                    sustainability_label_ids=frozenset(label_ids),
                )
            )
        except InvariantViolation as exc:
            raise NoProductFound(f"{page.url}: {exc}") from None
    return records, report
