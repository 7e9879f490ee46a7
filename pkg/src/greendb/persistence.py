"""Single-file SQLite store for pages, products, labels and runs.

Product rows are versioned per run: the same (product key, category) may be
stored once per run, and :meth:`GreenStore.latest_view` picks the row from
the most recent run.
"""

from __future__ import annotations

import gzip
import json
import logging
import os
import sqlite3
import threading
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from .labels import LabelKind, LabelMappings, LabelMapping, LabelRegistry, SustainabilityLabel
from .model import (
    InvariantViolation,
    KeyType,
    ProductKey,
    ProductRecord,
    RUN_ID_RE,
    format_timestamp,
    parse_timestamp,
    product_key,
)

logger = logging.getLogger(__name__)

DB_ENV = "GREENDB_DB"

SCHEMA = """
CREATE TABLE IF NOT EXISTS labels (
    label_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    description TEXT NOT NULL DEFAULT '',
    kind TEXT NOT NULL CHECK (kind IN ('ThirdParty', 'Private')),
    credibility INTEGER,
    environment INTEGER,
    socio_economic INTEGER
);
CREATE TABLE IF NOT EXISTS label_mappings (
    merchant TEXT NOT NULL,
    raw_pattern TEXT NOT NULL,
    target TEXT NOT NULL,
    PRIMARY KEY (merchant, raw_pattern)
);
CREATE TABLE IF NOT EXISTS provisional_labels (
    label_id TEXT NOT NULL,
    merchant TEXT NOT NULL,
    raw TEXT NOT NULL,
    run_id TEXT NOT NULL,
    PRIMARY KEY (label_id, merchant)
);
CREATE TABLE IF NOT EXISTS merchants (
    merchant TEXT PRIMARY KEY,
    config TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS runs (
    run_id TEXT PRIMARY KEY,
    started_at TEXT NOT NULL,
    finished_at TEXT,
    merchants TEXT NOT NULL DEFAULT '[]',
    counters TEXT NOT NULL DEFAULT '{}'
);
CREATE TABLE IF NOT EXISTS pages (
    page_id TEXT PRIMARY KEY,
    url TEXT NOT NULL,
    merchant TEXT NOT NULL,
    categories TEXT NOT NULL,
    run_id TEXT NOT NULL,
    html BLOB NOT NULL,
    fetched_at TEXT NOT NULL,
    UNIQUE (url, run_id)
);
CREATE TABLE IF NOT EXISTS extractions (
    page_id TEXT PRIMARY KEY,
    status TEXT NOT NULL,
    records INTEGER NOT NULL,
    detail TEXT NOT NULL DEFAULT ''
);
CREATE TABLE IF NOT EXISTS products (
    row_id INTEGER PRIMARY KEY AUTOINCREMENT,
    merchant TEXT NOT NULL,
    key_type TEXT NOT NULL,
    key_value TEXT NOT NULL,
    category TEXT NOT NULL,
    run_id TEXT NOT NULL REFERENCES runs(run_id),
    gtin TEXT,
    name TEXT NOT NULL,
    description TEXT NOT NULL,
    manufacturer TEXT NOT NULL,
    url TEXT NOT NULL,
    price TEXT,
    currency TEXT,
    image_urls TEXT NOT NULL,
    label_ids TEXT NOT NULL,
    fetched_at TEXT NOT NULL,
    UNIQUE (merchant, key_type, key_value, category, run_id)
);
CREATE TABLE IF NOT EXISTS product_labels (
    row_id INTEGER NOT NULL REFERENCES products(row_id) ON DELETE CASCADE,
    label_id TEXT NOT NULL REFERENCES labels(label_id),
    PRIMARY KEY (row_id, label_id)
);
"""


class StorageError(Exception):
    pass


class UnknownLabelReference(StorageError):
    def __init__(self, label_id: str):
        super().__init__(f"unknown label id {label_id!r}")
        self.label_id = label_id


@dataclass(frozen=True)
class CachedPage:
    """A fetched product page as stored in the page cache.

    A page discovered under several category listings is fetched once and
    carries all of them in ``categories``.
    """

    page_id: str
    url: str
    merchant: str
    categories: tuple[str, ...]
    run_id: str
    html: bytes
    fetched_at: datetime

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.html:
            raise InvariantViolation(f"cached page {self.url} has no body")
        if not self.categories:
            raise InvariantViolation(f"cached page {self.url} has no category")

    @property
    def category(self) -> str:
        return self.categories[0]


@dataclass
class RunManifest:
    run_id: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    merchants: list[str] = field(default_factory=list)
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        if not RUN_ID_RE.match(self.run_id):
            raise InvariantViolation(f"bad run id {self.run_id!r}")
        if self.finished_at is not None and self.finished_at < self.started_at:
            raise InvariantViolation("run finished before it started")


@dataclass(frozen=True)
class ProductRow:
    record: ProductRecord
    key: ProductKey

    @classmethod
    def from_record(cls, record: ProductRecord, strip_params: Iterable[str] = ()) -> "ProductRow":
        return cls(record, product_key(record, strip_params))

    @property
    def identity(self) -> tuple[ProductKey, str, str]:
        return (self.key, self.record.category, self.record.run_id)

    @property
    def view_key(self) -> tuple[ProductKey, str]:
        return (self.key, self.record.category)


@dataclass
class AuditReport:
    ok: bool
    problems: list[str]
    rows: int
    unique: int
    pages: int
    labels: int
    runs: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def default_db_path() -> str:
    return os.environ.get(DB_ENV, "greendb.sqlite")


def _record_from_sql(r: sqlite3.Row) -> ProductRow:
    record = ProductRecord(
        name=r["name"],
        url=r["url"],
        merchant=r["merchant"],
        category=r["category"],
        run_id=r["run_id"],
        fetched_at=parse_timestamp(r["fetched_at"]),
        gtin=r["gtin"],
        description=r["description"],
        manufacturer=r["manufacturer"],
        price=None if r["price"] is None else Decimal(r["price"]),
        currency=r["currency"],
        image_urls=tuple(json.loads(r["image_urls"])),
        sustainability_label_ids=frozenset(json.loads(r["label_ids"])),
    )
    return ProductRow(record, ProductKey(r["merchant"], KeyType(r["key_type"]), r["key_value"]))


class GreenStore:
    """GreenDB storage on one SQLite file (or ``":memory:"``).

    Writes are serialized by a lock around a single connection; reads share
    the same connection.
    """

    def __init__(self, path: Union[str, Path, None] = None):
        self.path = str(path if path is not None else default_db_path())
        if self.path != ":memory:":
            parent = os.path.dirname(os.path.abspath(self.path))
            os.makedirs(parent, exist_ok=True)
        try:
            self._conn = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None, timeout=30)
        except sqlite3.Error as exc:
            raise StorageError(f"cannot open store {self.path}: {exc}") from exc
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA foreign_keys=ON")
        if self.path != ":memory:":
            self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=FULL")
        self._lock = threading.RLock()
        self._conn.executescript(SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @contextmanager
    def _tx(self) -> Iterator[sqlite3.Connection]:
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                yield self._conn
            except BaseException:
                self._conn.execute("ROLLBACK")
                raise
            else:
                self._conn.execute("COMMIT")

    def _query(self, sql: str, params=()) -> list[sqlite3.Row]:
        with self._lock:
            return self._conn.execute(sql, params).fetchall()

    # -- labels -----------------------------------------------------------

    def save_registry(self, registry: LabelRegistry) -> int:
        with self._tx() as conn:
            for lb in registry:
                conn.execute(
                    "INSERT INTO labels VALUES (?, ?, ?, ?, ?, ?, ?) ON CONFLICT(label_id) DO UPDATE SET "
                    "name=excluded.name, description=excluded.description, kind=excluded.kind, "
                    "credibility=excluded.credibility, environment=excluded.environment, "
                    "socio_economic=excluded.socio_economic",
                    (lb.label_id, lb.name, lb.description, lb.kind.value, *lb.scores),
                )
        return len(registry)

    def load_registry(self) -> LabelRegistry:
        rows = self._query("SELECT * FROM labels ORDER BY label_id")
        provisional = {r["label_id"] for r in self._query("SELECT label_id FROM provisional_labels")}
        registry = LabelRegistry(
            SustainabilityLabel(
                r["label_id"], r["name"], LabelKind(r["kind"]), r["description"],
                r["credibility"], r["environment"], r["socio_economic"],
            )
            for r in rows
        )
        registry.provisional = sorted(provisional & {r["label_id"] for r in rows})
        return registry

    def label_ids(self) -> set[str]:
        return {r[0] for r in self._query("SELECT label_id FROM labels")}

    def record_provisional(self, label_id: str, merchant: str, raw: str, run_id: str) -> None:
        """Append an unrecognised label to the curation log and the labels table."""
        with self._tx() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO labels (label_id, name, description, kind) VALUES (?, ?, ?, 'ThirdParty')",
                (label_id, raw, "provisional; pending curation"),
            )
            conn.execute(
                "INSERT OR IGNORE INTO provisional_labels VALUES (?, ?, ?, ?)", (label_id, merchant, raw, run_id)
            )

    def provisional_log(self) -> list[tuple[str, str, str, str]]:
        return [tuple(r) for r in self._query("SELECT * FROM provisional_labels ORDER BY label_id, merchant")]

    def save_mappings(self, mappings: LabelMappings) -> int:
        with self._tx() as conn:
            for m in mappings:
                conn.execute(
                    "INSERT INTO label_mappings VALUES (?, ?, ?) "
                    "ON CONFLICT(merchant, raw_pattern) DO UPDATE SET target=excluded.target",
                    (m.merchant, m.raw_pattern, m.target),
                )
        return len(mappings)

    def load_mappings(self) -> LabelMappings:
        rows = self._query("SELECT * FROM label_mappings ORDER BY merchant, raw_pattern")
        return LabelMappings(LabelMapping(r["merchant"], r["raw_pattern"], r["target"]) for r in rows)

    # -- merchants and runs -----------------------------------------------

    def save_merchant_config(self, merchant: str, config: dict) -> None:
        with self._tx() as conn:
            conn.execute(
                "INSERT INTO merchants VALUES (?, ?) ON CONFLICT(merchant) DO UPDATE SET config=excluded.config",
                (merchant, json.dumps(config, sort_keys=True)),
            )

    def merchant_configs(self) -> dict[str, dict]:
        return {r["merchant"]: json.loads(r["config"]) for r in self._query("SELECT * FROM merchants")}

    def start_run(self, run: RunManifest) -> RunManifest:
        """Register ``run``; an existing run keeps its original start time."""
        with self._tx() as conn:
            existing = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run.run_id,)).fetchone()
            if existing is None:
                conn.execute(
                    "INSERT INTO runs (run_id, started_at, merchants, counters) VALUES (?, ?, ?, ?)",
                    (run.run_id, format_timestamp(run.started_at), json.dumps(sorted(set(run.merchants))),
                     json.dumps(run.counters, sort_keys=True)),
                )
            else:
                merchants = sorted(set(json.loads(existing["merchants"])) | set(run.merchants))
                conn.execute("UPDATE runs SET merchants = ? WHERE run_id = ?", (json.dumps(merchants), run.run_id))
        return self.get_run(run.run_id)

    def update_run_counters(self, run_id: str, counters: dict) -> None:
        with self._tx() as conn:
            row = conn.execute("SELECT counters FROM runs WHERE run_id = ?", (run_id,)).fetchone()
            if row is None:
                raise StorageError(f"unknown run {run_id}")
            merged = json.loads(row["counters"])
            merged.update(counters)
            conn.execute("UPDATE runs SET counters = ? WHERE run_id = ?", (json.dumps(merged, sort_keys=True), run_id))

    def finish_run(self, run_id: str, finished_at: Optional[datetime] = None) -> None:
        finished_at = finished_at or datetime.now(timezone.utc)
        run = self.get_run(run_id)
        if finished_at < run.started_at:
            raise InvariantViolation("run finished before it started")
        with self._tx() as conn:
            conn.execute("UPDATE runs SET finished_at = ? WHERE run_id = ?", (format_timestamp(finished_at), run_id))

    def get_run(self, run_id: str) -> RunManifest:
        rows = self._query("SELECT * FROM runs WHERE run_id = ?", (run_id,))
        if not rows:
            raise StorageError(f"unknown run {run_id}")
        return self._run_from_sql(rows[0])

    def runs(self) -> list[RunManifest]:
        return [self._run_from_sql(r) for r in self._query("SELECT * FROM runs ORDER BY started_at, run_id")]

    @staticmethod
    def _run_from_sql(r: sqlite3.Row) -> RunManifest:
        return RunManifest(
            r["run_id"],
            parse_timestamp(r["started_at"]),
            None if r["finished_at"] is None else parse_timestamp(r["finished_at"]),
            json.loads(r["merchants"]),
            json.loads(r["counters"]),
        )

    # -- page cache -------------------------------------------------------

    def cache_page(self, url: str, merchant: str, categories: Iterable[str], run_id: str,
                   html: bytes, fetched_at: datetime) -> str:
        """Store a fetched page and return its id.

        The cache is write-once: caching the same (url, run_id) again
        returns the existing id and leaves the stored page untouched.
        """
        if not html:
            raise InvariantViolation(f"refusing to cache empty page {url}")
        cats = list(categories)
        if not cats:
            raise InvariantViolation(f"page {url} has no category")
        with self._tx() as conn:
            existing = conn.execute("SELECT page_id FROM pages WHERE url = ? AND run_id = ?", (url, run_id)).fetchone()
            if existing is not None:
                return existing["page_id"]
            page_id = uuid.uuid4().hex
            conn.execute(
                "INSERT INTO pages VALUES (?, ?, ?, ?, ?, ?, ?)",
                (page_id, url, merchant, json.dumps(cats), run_id, gzip.compress(html, mtime=0),
                 format_timestamp(fetched_at)),
            )
            return page_id

    def get_page(self, page_id: str) -> CachedPage:
        rows = self._query("SELECT * FROM pages WHERE page_id = ?", (page_id,))
        if not rows:
            raise StorageError(f"unknown page {page_id}")
        r = rows[0]
        return CachedPage(
            r["page_id"], r["url"], r["merchant"], tuple(json.loads(r["categories"])), r["run_id"],
            gzip.decompress(r["html"]), parse_timestamp(r["fetched_at"]),
        )

    def page_ids(self, run_id: Optional[str] = None) -> list[str]:
        if run_id is None:
            return [r[0] for r in self._query("SELECT page_id FROM pages ORDER BY url, run_id")]
        return [r[0] for r in self._query("SELECT page_id FROM pages WHERE run_id = ? ORDER BY url", (run_id,))]

    def count_pages(self, run_id: Optional[str] = None, url_prefix: Optional[str] = None) -> int:
        sql, params = "SELECT COUNT(*) FROM pages WHERE 1", []
        if run_id is not None:
            sql += " AND run_id = ?"
            params.append(run_id)
        if url_prefix is not None:
            sql += " AND substr(url, 1, ?) = ?"
            params += [len(url_prefix), url_prefix]
        return self._query(sql, tuple(params))[0][0]

    def record_extraction(self, page_id: str, status: str, records: int, detail: str = "") -> None:
        with self._tx() as conn:
            conn.execute(
                "INSERT INTO extractions VALUES (?, ?, ?, ?) ON CONFLICT(page_id) DO UPDATE SET "
                "status=excluded.status, records=excluded.records, detail=excluded.detail",
                (page_id, status, records, detail),
            )

    def extraction_outcomes(self, run_id: Optional[str] = None) -> dict[str, int]:
        sql = "SELECT e.status, COUNT(*) FROM extractions e JOIN pages p ON p.page_id = e.page_id"
        params: tuple = ()
        if run_id is not None:
            sql += " WHERE p.run_id = ?"
            params = (run_id,)
        return {r[0]: r[1] for r in self._query(sql + " GROUP BY e.status", params)}

    # -- products ---------------------------------------------------------

    def upsert_product(self, row: ProductRow) -> int:
        """Insert or replace the row for (product key, category, run).

        Raises:
            UnknownLabelReference: a label id is not in the labels table.
            InvariantViolation: the row is inconsistent or its run is unknown.
        """
        rec, key = row.record, row.key
        if key.merchant != rec.merchant:
            raise InvariantViolation("product key merchant differs from record merchant")
        if key.kind is KeyType.GTIN and key.value != rec.gtin:
            raise InvariantViolation("GTIN key does not match the record GTIN")
        labels = sorted(rec.sustainability_label_ids)
        values = (
            rec.merchant, key.kind.value, key.value, rec.category, rec.run_id, rec.gtin, rec.name,
            rec.description, rec.manufacturer, None if rec.price is None else str(rec.price), rec.currency,
            json.dumps(list(rec.image_urls)), json.dumps(labels), format_timestamp(rec.fetched_at),
        )
        with self._tx() as conn:
            if conn.execute("SELECT 1 FROM runs WHERE run_id = ?", (rec.run_id,)).fetchone() is None:
                raise InvariantViolation(f"unknown run {rec.run_id}")
            for label_id in labels:
                if conn.execute("SELECT 1 FROM labels WHERE label_id = ?", (label_id,)).fetchone() is None:
                    raise UnknownLabelReference(label_id)
            conn.execute(
                "INSERT INTO products (merchant, key_type, key_value, category, run_id, gtin, name, description, "
                "manufacturer, url, price, currency, image_urls, label_ids, fetched_at) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?) "
                "ON CONFLICT(merchant, key_type, key_value, category, run_id) DO UPDATE SET "
                "gtin=excluded.gtin, name=excluded.name, description=excluded.description, "
                "manufacturer=excluded.manufacturer, url=excluded.url, price=excluded.price, "
                "currency=excluded.currency, image_urls=excluded.image_urls, label_ids=excluded.label_ids, "
                "fetched_at=excluded.fetched_at",
                values[:9] + (rec.url,) + values[9:],
            )
            row_id = conn.execute(
                "SELECT row_id FROM products WHERE merchant=? AND key_type=? AND key_value=? AND category=? "
                "AND run_id=?",
                values[:5],
            ).fetchone()[0]
            conn.execute("DELETE FROM product_labels WHERE row_id = ?", (row_id,))
            conn.executemany("INSERT INTO product_labels VALUES (?, ?)", [(row_id, lb) for lb in labels])
        return row_id

    def all_rows(self) -> list[ProductRow]:
        rows = self._query(
            "SELECT * FROM products ORDER BY merchant, key_type, key_value, category, run_id"
        )
        return [_record_from_sql(r) for r in rows]

    def latest_view(self) -> list[ProductRow]:
        """One row per (product key, category), taken from its most recent run.

        Recency is the run's ``started_at``, ties broken by run id.
        """
        rows = self._query(
            """
            SELECT * FROM (
                SELECT p.*, ROW_NUMBER() OVER (
                    PARTITION BY p.merchant, p.key_type, p.key_value, p.category
                    ORDER BY r.started_at DESC, r.run_id DESC
                ) AS rn
                FROM products p JOIN runs r ON r.run_id = p.run_id
            ) WHERE rn = 1
            ORDER BY merchant, key_type, key_value, category
            """
        )
        return [_record_from_sql(r) for r in rows]

    def count_rows(self) -> int:
        return self._query(
            "SELECT COUNT(*) FROM (SELECT DISTINCT merchant, key_type, key_value, category FROM products)"
        )[0][0]

    def count_unique_products(self) -> int:
        return self._query("SELECT COUNT(*) FROM (SELECT DISTINCT merchant, key_type, key_value FROM products)")[0][0]

    # -- audit ------------------------------------------------------------

    def audit(self) -> AuditReport:
        """Full-scan integrity check of the store."""
        problems: list[str] = []
        known = self.label_ids()
        for r in self._query("SELECT row_id, label_ids FROM products"):
            for label_id in json.loads(r["label_ids"]):
                if label_id not in known:
                    problems.append(f"product row {r['row_id']} references missing label {label_id}")
        for r in self._query(
            "SELECT pl.row_id, pl.label_id FROM product_labels pl LEFT JOIN labels l ON l.label_id = pl.label_id "
            "WHERE l.label_id IS NULL"
        ):
            problems.append(f"label link {r['row_id']}->{r['label_id']} is dangling")
        for r in self._query("SELECT p.row_id FROM products p LEFT JOIN runs r ON r.run_id = p.run_id "
                             "WHERE r.run_id IS NULL"):
            problems.append(f"product row {r['row_id']} belongs to an unknown run")
        for r in self._query("SELECT page_id, url, html FROM pages"):
            try:
                if not gzip.decompress(r["html"]):
                    problems.append(f"page {r['page_id']} ({r['url']}) is empty")
            except (OSError, EOFError):
                problems.append(f"page {r['page_id']} ({r['url']}) is corrupt")
        for run in self.runs():
            if run.finished_at is not None and run.finished_at < run.started_at:
                problems.append(f"run {run.run_id} finished before it started")
        for row in self.all_rows():
            try:
                row.record.validate()
            except InvariantViolation as exc:
                problems.append(f"product {row.key}: {exc}")
        rows, unique = self.count_rows(), self.count_unique_products()
        if unique > rows:
            problems.append(f"unique products ({unique}) exceed rows ({rows})")
        return AuditReport(
            ok=not problems, problems=problems, rows=rows, unique=unique, pages=self.count_pages(),
            labels=len(known), runs=len(self.runs()),
        )
