"""GreenDB domain types, GTIN validation and product identity."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

RUN_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")
CATEGORY_CODE_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")
CURRENCY_RE = re.compile(r"^[A-Z]{3}$")


class InvariantViolation(ValueError):
    """A domain value breaks one of its invariants."""


class GtinVerdict(enum.Enum):
    VALID = "Valid"
    WRONG_LENGTH = "WrongLength"
    NON_NUMERIC = "NonNumeric"
    BAD_CHECK_DIGIT = "BadCheckDigit"

    def __bool__(self) -> bool:
        return self is GtinVerdict.VALID


def gtin_check_digit(body: str) -> int:
    """Return the GS1 check digit for the first 12 digits of a GTIN-13.

    Weights alternate 1, 3 starting from the leftmost digit; the check digit
    brings the weighted total to a multiple of 10.
    """
    total = sum(int(d) * (3 if i % 2 else 1) for i, d in enumerate(body))
    return (10 - total % 10) % 10


def validate_gtin(candidate: str) -> GtinVerdict:
    """Classify ``candidate`` as a GTIN-13.

    Only 13-digit codes are accepted: GTIN-8/12/14 come back as WRONG_LENGTH.

    >>> validate_gtin("4250805445834")
    <GtinVerdict.VALID: 'Valid'>
    >>> validate_gtin("4250805445835")
    <GtinVerdict.BAD_CHECK_DIGIT: 'BadCheckDigit'>
    """
    if len(candidate) != 13:
        return GtinVerdict.WRONG_LENGTH
    # str.isdigit accepts superscripts and other unicode digits
    if not all("0" <= c <= "9" for c in candidate):
        return GtinVerdict.NON_NUMERIC
    if gtin_check_digit(candidate[:12]) != int(candidate[12]):
        return GtinVerdict.BAD_CHECK_DIGIT
    return GtinVerdict.VALID


class Vertical(enum.Enum):
    FASHION = "FASHION"
    ELECTRONICS = "ELECTRONICS"


@dataclass(frozen=True)
class CategoryCode:
    code: str
    vertical: Vertical

    def __post_init__(self):
        if not CATEGORY_CODE_RE.match(self.code):
            raise InvariantViolation(f"category code must be an uppercase token: {self.code!r}")


class CategoryVocabulary:
    """The configured set of category codes, keyed by code."""

    def __init__(self, categories: Iterable[CategoryCode] = ()):
        self._by_code: dict[str, CategoryCode] = {}
        for cat in categories:
            if cat.code in self._by_code:
                raise InvariantViolation(f"duplicate category code {cat.code}")
            self._by_code[cat.code] = cat

    def __contains__(self, code: str) -> bool:
        return code in self._by_code

    def __len__(self) -> int:
        return len(self._by_code)

    def __iter__(self):
        return iter(self._by_code.values())

    def get(self, code: str) -> CategoryCode:
        try:
            return self._by_code[code]
        except KeyError:
            raise InvariantViolation(f"category {code!r} is not in the vocabulary") from None

    def by_vertical(self, vertical: Vertical) -> list[CategoryCode]:
        return [c for c in self._by_code.values() if c.vertical is vertical]

    @classmethod
    def parse(cls, text: str) -> "CategoryVocabulary":
        """Parse ``CODE<TAB>VERTICAL`` lines; ``#`` starts a comment."""
        cats = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InvariantViolation(f"line {lineno}: expected CODE<TAB>VERTICAL, got {raw!r}")
            code, vertical = parts[0].strip(), parts[1].strip().upper()
            try:
                cats.append(CategoryCode(code, Vertical(vertical)))
            except ValueError as exc:
                raise InvariantViolation(f"line {lineno}: {exc}") from None
        return cls(cats)

    @classmethod
    def load(cls, path: Optional[Path | str] = None) -> "CategoryVocabulary":
        if path is None:
            text = resources.files("greendb.data").joinpath("categories.tsv").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.parse(text)


def is_absolute_url(url: str) -> bool:
    try:
        parts = urlsplit(url)
    except ValueError:
        return False
    return parts.scheme in ("http", "https") and bool(parts.netloc) and not any(c.isspace() for c in url)


def normalize_url(url: str, strip_params: Iterable[str] = ()) -> str:
    """Canonical form of a product URL used for identity and crawl dedup.

    Lowercases scheme and host, drops the fragment and any query parameter
    named in ``strip_params``, and removes a trailing slash from the path.
    """
    parts = urlsplit(url)
    strip = set(strip_params)
    query = [(k, v) for k, v in parse_qsl(parts.query, keep_blank_values=True) if k not in strip]
    path = parts.path.rstrip("/")
    netloc = parts.netloc.lower()
    return urlunsplit((parts.scheme.lower(), netloc, path, urlencode(query), ""))


def utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        raise InvariantViolation("timestamps must be timezone-aware")
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return utc(ts).isoformat().replace("+00:00", "Z")


def parse_timestamp(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return utc(datetime.fromisoformat(text))


@dataclass(frozen=True)
class ProductRecord:
    """One GreenDB product row, a schema.org Product plus label references."""

    name: str
    url: str
    merchant: str
    category: str
    run_id: str
    fetched_at: datetime
    gtin: Optional[str] = None
    description: str = ""
    manufacturer: str = ""
    price: Optional[Decimal] = None
    currency: Optional[str] = None
    image_urls: tuple[str, ...] = ()
    sustainability_label_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        # normalize container types so equality does not depend on the caller
        object.__setattr__(self, "image_urls", tuple(self.image_urls))
        object.__setattr__(self, "sustainability_label_ids", frozenset(self.sustainability_label_ids))
        object.__setattr__(self, "fetched_at", utc(self.fetched_at))
        self.validate()

    def validate(self) -> None:
        if not self.name or not self.name.strip():
            raise InvariantViolation("product name must be non-empty")
        if not is_absolute_url(self.url):
            raise InvariantViolation(f"product url is not absolute: {self.url!r}")
        if self.gtin is not None and validate_gtin(self.gtin) is not GtinVerdict.VALID:
            raise InvariantViolation(f"invalid GTIN {self.gtin!r}: {validate_gtin(self.gtin).value}")
        if not self.merchant:
            raise InvariantViolation("merchant must be set")
        if not CATEGORY_CODE_RE.match(self.category):
            raise InvariantViolation(f"bad category code {self.category!r}")
        if not RUN_ID_RE.match(self.run_id):
            raise InvariantViolation(f"bad run id {self.run_id!r}")
        if self.price is not None:
            if not isinstance(self.price, Decimal) or not self.price.is_finite() or self.price < 0:
                raise InvariantViolation(f"price must be a non-negative decimal, got {self.price!r}")
            if self.currency is None or not CURRENCY_RE.match(self.currency):
                raise InvariantViolation(f"price needs an ISO-4217 currency, got {self.currency!r}")
        elif self.currency is not None and not CURRENCY_RE.match(self.currency):
            raise InvariantViolation(f"bad currency code {self.currency!r}")
        for img in self.image_urls:
            if not is_absolute_url(img):
                raise InvariantViolation(f"image url is not absolute: {img!r}")
        for label_id in self.sustainability_label_ids:
            if not label_id:
                raise InvariantViolation("empty label id")


class KeyType(str, enum.Enum):
    GTIN = "gtin"
    URL = "url"


@dataclass(frozen=True, order=True)
class ProductKey:
    """Identity of a unique product, scoped to its merchant."""

    merchant: str
    kind: KeyType
    value: str

    def __str__(self) -> str:
        return f"{self.merchant}:{self.kind.value}:{self.value}"


def product_key(record: ProductRecord, strip_params: Iterable[str] = ()) -> ProductKey:
    """GTIN key when the record has a valid GTIN, else its normalized URL.

    ``strip_params`` is normally ``MerchantConfig.url_strip_params``. A
    MerchantConfig instance is accepted as well.
    """
    strip = getattr(strip_params, "url_strip_params", strip_params)
    if record.gtin is not None and validate_gtin(record.gtin) is GtinVerdict.VALID:
        return ProductKey(record.merchant, KeyType.GTIN, record.gtin)
    return ProductKey(record.merchant, KeyType.URL, normalize_url(record.url, strip))
