"""Sustainability label registry and merchant label resolution.

Labels carry the three SSCT scores (credibility, environment,
socio-economic) as published data. Merchants display labels as free text;
a per-merchant mapping table turns that text into canonical label ids.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
import re
import threading
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

logger = logging.getLogger(__name__)

OTHER = "OTHER"
PROVISIONAL_PREFIX = "UNKNOWN_"
SEED_HEADER = ["label_id", "name", "description", "kind", "credibility", "environment", "socio_economic"]
MAPPING_HEADER = ["merchant", "raw_pattern", "target"]
SCORE_FIELDS = ("credibility", "environment", "socio_economic")


class LabelError(ValueError):
    pass


class MalformedSeed(LabelError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"seed row {row}: {reason}")
        self.row = row
        self.reason = reason


class DuplicateLabelId(LabelError):
    def __init__(self, label_id: str):
        super().__init__(f"duplicate label id {label_id!r}")
        self.label_id = label_id


class EmptyLabelString(LabelError):
    pass


class UnknownLabelId(LookupError):
    pass


class LabelKind(enum.Enum):
    THIRD_PARTY = "ThirdParty"
    PRIVATE = "Private"


class LabelClass(enum.Enum):
    THIRD_PARTY_EVALUATED = "ThirdPartyEvaluated"
    THIRD_PARTY_UNEVALUATED = "ThirdPartyUnevaluated"
    PRIVATE = "Private"


@dataclass(frozen=True)
class SustainabilityLabel:
    label_id: str
    name: str
    kind: LabelKind
    description: str = ""
    credibility: Optional[int] = None
    environment: Optional[int] = None
    socio_economic: Optional[int] = None

    def __post_init__(self):
        if not self.label_id:
            raise LabelError("label id must be non-empty")
        scores = self.scores
        present = [s for s in scores if s is not None]
        if present and len(present) != 3:
            raise LabelError(f"{self.label_id}: a label carries zero or three scores, not {len(present)}")
        for s in present:
            if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s <= 100:
                raise LabelError(f"{self.label_id}: score {s!r} outside [0, 100]")
        if self.kind is LabelKind.PRIVATE and present:
            raise LabelError(f"{self.label_id}: private labels are never scored")

    @property
    def scores(self) -> tuple[Optional[int], Optional[int], Optional[int]]:
        return (self.credibility, self.environment, self.socio_economic)

    @property
    def evaluated(self) -> bool:
        return self.credibility is not None


OTHER_LABEL = SustainabilityLabel(
    OTHER,
    "Other",
    LabelKind.PRIVATE,
    "Advertised as sustainable without a recognized third-party certificate",
)


class LabelRegistry:
    """Label id -> SustainabilityLabel, always containing OTHER.

    Built once from the seed, then read concurrently. The only mutation
    after loading is :meth:`add_provisional`, an append guarded by a lock.
    """

    def __init__(self, labels: Iterable[SustainabilityLabel] = ()):
        self._labels: dict[str, SustainabilityLabel] = {}
        self._lock = threading.Lock()
        self.provisional: list[str] = []
        for label in labels:
            self.add(label)
        if OTHER not in self._labels:
            self._labels[OTHER] = OTHER_LABEL
        elif self._labels[OTHER].kind is not LabelKind.PRIVATE:
            raise LabelError("the reserved OTHER label must be private")

    def add(self, label: SustainabilityLabel) -> None:
        if label.label_id in self._labels:
            raise DuplicateLabelId(label.label_id)
        self._labels[label.label_id] = label

    def add_provisional(self, label_id: str, raw: str) -> SustainabilityLabel:
        """Record an unrecognised third-party label for later curation."""
        with self._lock:
            existing = self._labels.get(label_id)
            if existing is not None:
                return existing
            label = SustainabilityLabel(label_id, raw, LabelKind.THIRD_PARTY, "provisional; pending curation")
            self._labels[label_id] = label
            self.provisional.append(label_id)
            return label

    def get(self, label_id: str) -> SustainabilityLabel:
        try:
            return self._labels[label_id]
        except KeyError:
            raise UnknownLabelId(label_id) from None

    def __contains__(self, label_id: object) -> bool:
        return label_id in self._labels

    def __iter__(self) -> Iterator[SustainabilityLabel]:
        return iter(list(self._labels.values()))

    def __len__(self) -> int:
        return len(self._labels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelRegistry):
            return NotImplemented
        return self._labels == other._labels

    @property
    def third_party_count(self) -> int:
        return sum(1 for lb in self._labels.values() if lb.kind is LabelKind.THIRD_PARTY)

    @property
    def evaluated_count(self) -> int:
        return sum(1 for lb in self._labels.values() if lb.evaluated)

    def is_private(self, label_id: str) -> bool:
        return self.get(label_id).kind is LabelKind.PRIVATE


def _parse_score(value: str, row: int, name: str) -> Optional[int]:
    value = value.strip()
    if value == "":
        return None
    try:
        score = int(value)
    except ValueError:
        raise MalformedSeed(row, f"{name} is not an integer: {value!r}") from None
    if not 0 <= score <= 100:
        raise MalformedSeed(row, f"{name}={score} outside [0, 100]")
    return score


def _read_text(source: Union[str, Path, io.TextIOBase, None], default: str) -> str:
    if source is None:
        return resources.files("greendb.data").joinpath(default).read_text("utf-8")
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_text("utf-8")


def parse_label_seed(text: str) -> LabelRegistry:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    registry = LabelRegistry()
    if header is None:
        return registry
    if [h.strip() for h in header] != SEED_HEADER:
        raise MalformedSeed(1, f"expected header {','.join(SEED_HEADER)}")
    seen_other = False
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(SEED_HEADER):
            raise MalformedSeed(rowno, f"expected {len(SEED_HEADER)} columns, got {len(row)}")
        label_id, name, description, kind = (c.strip() for c in row[:4])
        try:
            kind_enum = LabelKind(kind)
        except ValueError:
            raise MalformedSeed(rowno, f"unknown kind {kind!r}") from None
        scores = [_parse_score(v, rowno, n) for v, n in zip(row[4:], SCORE_FIELDS)]
        try:
            label = SustainabilityLabel(label_id, name, kind_enum, description, *scores)
        except LabelError as exc:
            raise MalformedSeed(rowno, str(exc)) from None
        if label_id == OTHER:
            # replaces the auto-inserted default
            if seen_other:
                raise DuplicateLabelId(OTHER)
            if kind_enum is not LabelKind.PRIVATE:
                raise MalformedSeed(rowno, "OTHER must be a private label")
            registry._labels[OTHER] = label
            seen_other = True
            continue
        registry.add(label)
    return registry


def load_label_seed(source: Union[str, Path, io.TextIOBase, None] = None) -> LabelRegistry:
    """Load a label seed CSV; ``None`` loads the seed shipped with the package.

    Raises:
        MalformedSeed: a row is unparseable or carries a partial evaluation.
        DuplicateLabelId: a label id appears twice.
    """
    registry = parse_label_seed(_read_text(source, "labels_seed.csv"))
    logger.info(
        "loaded %d labels: %d third-party, %d evaluated",
        len(registry), registry.third_party_count, registry.evaluated_count,
    )
    return registry


def dump_label_seed(registry: LabelRegistry) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SEED_HEADER)
    for lb in registry:
        scores = ["" if s is None else str(s) for s in lb.scores]
        writer.writerow([lb.label_id, lb.name, lb.description, lb.kind.value, *scores])
    return out.getvalue()


def normalize_label_text(raw: str) -> str:
    return " ".join(raw.split()).casefold()


def provisional_id(raw: str) -> str:
    """Deterministic placeholder id for a label text nobody has mapped yet.

    >>> provisional_id("  Fair   Stone ")
    'UNKNOWN_FAIR_STONE'
    """
    text = unicodedata.normalize("NFKD", normalize_label_text(raw))
    text = "".join(c for c in text if not unicodedata.combining(c))
    token = re.sub(r"[^0-9a-z]+", "_", text).strip("_").upper()
    if not token:
        token = hashlib.sha1(normalize_label_text(raw).encode("utf-8")).hexdigest()[:10].upper()
    return PROVISIONAL_PREFIX + token


@dataclass(frozen=True)
class LabelMapping:
    merchant: str
    raw_pattern: str
    target: str


class LabelMappings:
    """Lookup of (merchant, normalized raw text) -> LabelMapping."""

    def __init__(self, mappings: Iterable[LabelMapping] = ()):
        self._index: dict[tuple[str, str], LabelMapping] = {}
        for m in mappings:
            self.add(m)

    def add(self, mapping: LabelMapping) -> None:
        key = (mapping.merchant, normalize_label_text(mapping.raw_pattern))
        if not key[1]:
            raise LabelError(f"empty raw_pattern for merchant {mapping.merchant!r}")
        existing = self._index.get(key)
        if existing is not None:
            if existing == mapping or existing.target == mapping.target:
                return
            raise LabelError(f"conflicting mappings for {key}: {existing.target} vs {mapping.target}")
        self._index[key] = mapping

    def lookup(self, merchant: str, raw: str) -> Optional[LabelMapping]:
        return self._index.get((merchant, normalize_label_text(raw)))

    def __iter__(self) -> Iterator[LabelMapping]:
        return iter(list(self._index.values()))

    def __len__(self) -> int:
        return len(self._index)

    def check_targets(self, registry: LabelRegistry) -> None:
        for m in self._index.values():
            if m.target not in registry:
                raise UnknownLabelId(f"mapping {m.merchant}/{m.raw_pattern!r} targets unknown label {m.target}")


def parse_mappings(text: str) -> LabelMappings:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return LabelMappings()
    if [f.strip() for f in reader.fieldnames] != MAPPING_HEADER:
        raise LabelError(f"mapping file needs header {','.join(MAPPING_HEADER)}")
    mappings = LabelMappings()
    for row in reader:
        if not any((v or "").strip() for v in row.values()):
            continue
        mappings.add(LabelMapping(row["merchant"].strip(), row["raw_pattern"].strip(), row["target"].strip()))
    return mappings


def load_mappings(source=None, registry: Optional[LabelRegistry] = None) -> LabelMappings:
    mappings = parse_mappings(_read_text(source, "label_mappings.csv"))
    if registry is not None:
        mappings.check_targets(registry)
    return mappings


def dump_mappings(mappings: LabelMappings) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MAPPING_HEADER)
    for m in mappings:
        writer.writerow([m.merchant, m.raw_pattern, m.target])
    return out.getvalue()


@dataclass(frozen=True)
class Known:
    label_id: str


@dataclass(frozen=True)
class PrivateOther:
    label_id: str = OTHER


@dataclass(frozen=True)
class UnknownThirdParty:
    provisional_id: str
    raw: str

    @property
    def label_id(self) -> str:
        return self.provisional_id


Resolution = Union[Known, PrivateOther, UnknownThirdParty]


def resolve_label(
    merchant: str,
    raw: str,
    mappings: LabelMappings,
    registry: Optional[LabelRegistry] = None,
) -> Resolution:
    """Resolve a badge text shown by ``merchant`` to a label.

    Mappings whose target is a private label (normally OTHER) resolve to
    :class:`PrivateOther`. Text without a mapping, or whose mapping points
    at an id missing from ``registry``, becomes :class:`UnknownThirdParty`.
    """
    if not normalize_label_text(raw):
        raise EmptyLabelString(f"empty label text from {merchant!r}")
    hit = mappings.lookup(merchant, raw)
    if hit is not None:
        if hit.target == OTHER:
            return PrivateOther()
        if registry is None:
            return Known(hit.target)
        if hit.target in registry:
            if registry.is_private(hit.target):
                return PrivateOther()
            return Known(hit.target)
        logger.warning("mapping for %r targets unknown label %s", raw, hit.target)
    text = " ".join(raw.split())
    return UnknownThirdParty(provisional_id(text), text)


def classify(label_id: str, registry: LabelRegistry) -> LabelClass:
    label = registry.get(label_id)
    if label.kind is LabelKind.PRIVATE:
        return LabelClass.PRIVATE
    if label.evaluated:
        return LabelClass.THIRD_PARTY_EVALUATED
    return LabelClass.THIRD_PARTY_UNEVALUATED
