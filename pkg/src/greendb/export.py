"""Dataset export/import and the product distribution report."""

from __future__ import annotations

import csv
import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable, Union

from .labels import LabelKind, LabelRegistry, UnknownLabelId
from .model import KeyType, ProductKey, ProductRecord, format_timestamp, parse_timestamp
from .persistence import ProductRow, UnknownLabelReference

FIELDS = [
    "gtin",
    "name",
    "description",
    "manufacturer",
    "category",
    "merchant",
    "url",
    "price",
    "currency",
    "image_urls",
    "sustainability_label_ids",
    "run_id",
    "fetched_at",
    "key_type",
    "key_value",
]

THIRD_PARTY = "third_party"
PRIVATE = "private"
UNLABELED = "unlabeled"
LABEL_GROUPS = (THIRD_PARTY, PRIVATE, UNLABELED)


def _row_to_dict(row: ProductRow) -> dict[str, str]:
    rec = row.record
    return {
        "gtin": rec.gtin or "",
        "name": rec.name,
        "description": rec.description,
        "manufacturer": rec.manufacturer,
        "category": rec.category,
        "merchant": rec.merchant,
        "url": rec.url,
        "price": "" if rec.price is None else str(rec.price),
        "currency": rec.currency or "",
        "image_urls": json.dumps(list(rec.image_urls)),
        "sustainability_label_ids": ",".join(sorted(rec.sustainability_label_ids)),
        "run_id": rec.run_id,
        "fetched_at": format_timestamp(rec.fetched_at),
        "key_type": row.key.kind.value,
        "key_value": row.key.value,
    }


def _row_from_dict(d: dict) -> ProductRow:
    labels = d["sustainability_label_ids"]
    if isinstance(labels, str):
        labels = [x for x in labels.split(",") if x]
    images = d["image_urls"]
    if isinstance(images, str):
        images = json.loads(images) if images else []
    record = ProductRecord(
        name=d["name"],
        url=d["url"],
        merchant=d["merchant"],
        category=d["category"],
        run_id=d["run_id"],
        fetched_at=parse_timestamp(d["fetched_at"]),
        gtin=d["gtin"] or None,
        description=d["description"],
        manufacturer=d["manufacturer"],
        price=Decimal(d["price"]) if d["price"] not in ("", None) else None,
        currency=d["currency"] or None,
        image_urls=tuple(images),
        sustainability_label_ids=frozenset(labels),
    )
    return ProductRow(record, ProductKey(record.merchant, KeyType(d["key_type"]), d["key_value"]))


def _sorted(view: Iterable[ProductRow]) -> list[ProductRow]:
    return sorted(view, key=lambda r: (r.key, r.record.category, r.record.run_id))


def export_dataset(view: Iterable[ProductRow], fmt: str, destination: Union[str, Path, io.TextIOBase]) -> int:
    """Write ``view`` as CSV or JSONL; return the number of rows written.

    Rows are sorted by product key and category, so equal views produce
    byte-identical files.
    """
    rows = _sorted(view)
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unsupported export format {fmt!r}")
    if hasattr(destination, "write"):
        _write(rows, fmt, destination)
    else:
        tmp = f"{destination}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            _write(rows, fmt, fh)
        os.replace(tmp, destination)
    return len(rows)


def _write(rows: list[ProductRow], fmt: str, fh) -> None:
    if fmt == "csv":
        writer = csv.DictWriter(fh, fieldnames=FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(_row_to_dict(row))
    else:
        for row in rows:
            d = _row_to_dict(row)
            d["image_urls"] = list(row.record.image_urls)
            d["sustainability_label_ids"] = sorted(row.record.sustainability_label_ids)
            fh.write(json.dumps(d, ensure_ascii=False, sort_keys=False) + "\n")


def import_dataset(source: Union[str, Path], fmt: str) -> list[ProductRow]:
    with open(source, encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            return [_row_from_dict(d) for d in csv.DictReader(fh)]
        if fmt == "jsonl":
            return [_row_from_dict(json.loads(line)) for line in fh if line.strip()]
    raise ValueError(f"unsupported import format {fmt!r}")


# -- distribution ------------------------------------------------------------


def fraction(count: int, total: int) -> float:
    """``count/total`` to 4 places, rounding half to even; 0 when total is 0."""
    if total == 0:
        return 0.0
    q = (Decimal(count) / Decimal(total)).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN)
    return float(q)


@dataclass
class GroupShare:
    count: int
    fraction: float


@dataclass
class MerchantShare:
    unique: int
    fraction: float
    label_groups: dict[str, GroupShare] = field(default_factory=dict)


@dataclass
class DistributionReport:
    total_rows: int
    total_unique: int
    merchants: dict[str, MerchantShare]
    label_groups: dict[str, GroupShare]

    def as_dict(self) -> dict:
        return {
            "total_rows": self.total_rows,
            "total_unique": self.total_unique,
            "label_groups": {k: vars(v) for k, v in self.label_groups.items()},
            "merchants": {
                m: {
                    "unique": s.unique,
                    "fraction": s.fraction,
                    "label_groups": {k: vars(v) for k, v in s.label_groups.items()},
                }
                for m, s in sorted(self.merchants.items())
            },
        }

    def to_text(self) -> str:
        lines = [
            f"total_rows: {self.total_rows}",
            f"total_unique: {self.total_unique}",
            "label_groups:",
        ]
        for g in LABEL_GROUPS:
            s = self.label_groups[g]
            lines.append(f"  {g}: {s.count} ({s.fraction:.4f})")
        lines.append("merchants:")
        for m, share in sorted(self.merchants.items()):
            lines.append(f"  {m}: {share.unique} ({share.fraction:.4f})")
            for g in LABEL_GROUPS:
                s = share.label_groups[g]
                lines.append(f"    {g}: {s.count} ({s.fraction:.4f})")
        return "\n".join(lines) + "\n"


def label_group(label_ids: Iterable[str], registry: LabelRegistry) -> str:
    """Third-party if any label is third-party, private if all are private."""
    ids = list(label_ids)
    if not ids:
        return UNLABELED
    kinds = set()
    for label_id in ids:
        try:
            kinds.add(registry.get(label_id).kind)
        except UnknownLabelId:
            raise UnknownLabelReference(label_id) from None
    return THIRD_PARTY if LabelKind.THIRD_PARTY in kinds else PRIVATE


def compute_distribution(view: Iterable[ProductRow], registry: LabelRegistry) -> DistributionReport:
    """Unique-product shares per merchant and per label group.

    A product's label set is the union over its rows (one per category).
    """
    labels_by_key: dict[ProductKey, set[str]] = defaultdict(set)
    rows = 0
    for row in view:
        rows += 1
        labels_by_key[row.key].update(row.record.sustainability_label_ids)

    total = len(labels_by_key)
    overall = dict.fromkeys(LABEL_GROUPS, 0)
    per_merchant: dict[str, dict[str, int]] = defaultdict(lambda: dict.fromkeys(LABEL_GROUPS, 0))
    for key, labels in labels_by_key.items():
        group = label_group(labels, registry)
        overall[group] += 1
        per_merchant[key.merchant][group] += 1

    merchants = {}
    for merchant, groups in per_merchant.items():
        unique = sum(groups.values())
        merchants[merchant] = MerchantShare(
            unique,
            fraction(unique, total),
            {g: GroupShare(groups[g], fraction(groups[g], unique)) for g in LABEL_GROUPS},
        )
    return DistributionReport(
        total_rows=rows,
        total_unique=total,
        merchants=merchants,
        label_groups={g: GroupShare(overall[g], fraction(overall[g], total)) for g in LABEL_GROUPS},
    )
