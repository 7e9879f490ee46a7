"""Durable message queues, the fail-safe worker loop and the default topology.

Delivery is at-least-once: a message is removed only after its handler
returns. A handler that raises gets its message back with ``attempt + 1``;
after ``retry_budget`` failed attempts the message moves to
``<queue>.dead``. Handlers therefore have to be idempotent.

The default topology::

    crawler -> "scraped" -> cache worker -> "extract" -> extraction worker -> products
"""

from __future__ import annotations

import base64
import collections
import json
import logging
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

from .crawler import MerchantConfig, ScrapedPage
from .extraction import NoProductFound, build_product
from .labels import LabelMappings, LabelRegistry
from .model import format_timestamp, parse_timestamp
from .persistence import GreenStore, ProductRow

logger = logging.getLogger(__name__)

SCRAPED = "scraped"
EXTRACT = "extract"
DEAD_SUFFIX = ".dead"
DEFAULT_VISIBILITY_TIMEOUT = 60.0


class StorageUnavailable(Exception):
    pass


def dead_letter_queue(queue_name: str) -> str:
    return queue_name + DEAD_SUFFIX


@dataclass(frozen=True)
class QueueMessage:
    message_id: str
    queue_name: str
    payload: dict
    attempt: int
    enqueued_at: datetime
    last_error: Optional[str] = None


class Broker(Protocol):
    def enqueue(self, queue_name: str, payload: dict) -> str: ...
    def dequeue(self, queue_name: str, visibility_timeout: float = ...) -> Optional[QueueMessage]: ...
    def ack(self, message: QueueMessage) -> None: ...
    def nack(self, message: QueueMessage, error: str = "") -> None: ...
    def dead_letter(self, message: QueueMessage, error: str = "") -> None: ...
    def size(self, queue_name: str) -> int: ...
    def recover(self) -> int: ...


class InMemoryBroker:
    """Broker for tests; same semantics as :class:`SqliteBroker`, no durability."""

    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self._clock = clock
        self._lock = threading.Lock()
        self._ready: dict[str, collections.deque] = collections.defaultdict(collections.deque)
        # message_id -> (message, visible_again_at)
        self._inflight: dict[str, tuple[QueueMessage, float]] = {}
        self.enqueued: collections.Counter = collections.Counter()

    def enqueue(self, queue_name: str, payload: dict) -> str:
        json.dumps(payload)  # same payload restrictions as the durable broker
        msg = QueueMessage(uuid.uuid4().hex, queue_name, payload, 0, datetime.now(timezone.utc))
        with self._lock:
            self._ready[queue_name].append(msg)
            self.enqueued[queue_name] += 1
        return msg.message_id

    def _expire(self, now: float) -> None:
        for mid, (msg, until) in list(self._inflight.items()):
            if until <= now:
                del self._inflight[mid]
                self._ready[msg.queue_name].append(msg)

    def dequeue(self, queue_name: str, visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT) -> Optional[QueueMessage]:
        with self._lock:
            now = self._clock()
            self._expire(now)
            queue = self._ready[queue_name]
            if not queue:
                return None
            stored = queue.popleft()
            msg = QueueMessage(stored.message_id, queue_name, stored.payload, stored.attempt + 1,
                               stored.enqueued_at, stored.last_error)
            self._inflight[msg.message_id] = (msg, now + visibility_timeout)
            return msg

    def ack(self, message: QueueMessage) -> None:
        with self._lock:
            self._inflight.pop(message.message_id, None)

    def nack(self, message: QueueMessage, error: str = "") -> None:
        with self._lock:
            if self._inflight.pop(message.message_id, None) is None:
                return
            self._ready[message.queue_name].append(
                QueueMessage(message.message_id, message.queue_name, message.payload, message.attempt,
                             message.enqueued_at, error or None)
            )

    def dead_letter(self, message: QueueMessage, error: str = "") -> None:
        with self._lock:
            if self._inflight.pop(message.message_id, None) is None:
                return
            dead = dead_letter_queue(message.queue_name)
            self._ready[dead].append(
                QueueMessage(message.message_id, dead, message.payload, 0, message.enqueued_at, error or None)
            )
            self.enqueued[dead] += 1

    def size(self, queue_name: str) -> int:
        with self._lock:
            return len(self._ready[queue_name]) + sum(
                1 for msg, _ in self._inflight.values() if msg.queue_name == queue_name
            )

    def peek(self, queue_name: str) -> list[QueueMessage]:
        with self._lock:
            return list(self._ready[queue_name])

    def recover(self) -> int:
        """Return every in-flight message to its queue (consumer restart)."""
        with self._lock:
            n = len(self._inflight)
            self._expire(float("inf"))
            return n

    def close(self) -> None:
        pass


class SqliteBroker:
    """Durable broker on an SQLite file, usually the GreenDB store file.

    A message is committed before :meth:`enqueue` returns. Ready messages
    are served in ``seq`` order; a nacked message gets a new ``seq`` and so
    goes to the back of its queue.
    """

    def __init__(self, path: Union[str, Path], clock: Callable[[], float] = time.time):
        self.path = str(path)
        self._clock = clock
        self._lock = threading.RLock()
        try:
            self._conn = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None, timeout=30)
            if self.path != ":memory:":
                self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA synchronous=FULL")
            self._conn.executescript(
                """
                CREATE TABLE IF NOT EXISTS queue_messages (
                    seq INTEGER PRIMARY KEY AUTOINCREMENT,
                    message_id TEXT NOT NULL,
                    queue_name TEXT NOT NULL,
                    payload TEXT NOT NULL,
                    attempt INTEGER NOT NULL DEFAULT 0,
                    enqueued_at TEXT NOT NULL,
                    visible_at REAL NOT NULL DEFAULT 0,
                    inflight INTEGER NOT NULL DEFAULT 0,
                    last_error TEXT,
                    UNIQUE (queue_name, message_id)
                );
                CREATE INDEX IF NOT EXISTS queue_ready ON queue_messages (queue_name, visible_at, seq);
                CREATE TABLE IF NOT EXISTS queue_counters (
                    queue_name TEXT PRIMARY KEY,
                    enqueued INTEGER NOT NULL DEFAULT 0
                );
                """
            )
        except sqlite3.Error as exc:
            raise StorageUnavailable(f"cannot open queue store {self.path}: {exc}") from exc

    def _execute(self, fn):
        with self._lock:
            try:
                self._conn.execute("BEGIN IMMEDIATE")
                try:
                    result = fn(self._conn)
                except BaseException:
                    self._conn.execute("ROLLBACK")
                    raise
                self._conn.execute("COMMIT")
                return result
            except sqlite3.Error as exc:
                raise StorageUnavailable(str(exc)) from exc

    def _count(self, conn, queue_name: str) -> None:
        conn.execute(
            "INSERT INTO queue_counters VALUES (?, 1) ON CONFLICT(queue_name) DO UPDATE SET enqueued = enqueued + 1",
            (queue_name,),
        )

    def enqueue(self, queue_name: str, payload: dict) -> str:
        message_id = uuid.uuid4().hex
        body = json.dumps(payload, sort_keys=True)

        def op(conn):
            conn.execute(
                "INSERT INTO queue_messages (message_id, queue_name, payload, enqueued_at) VALUES (?, ?, ?, ?)",
                (message_id, queue_name, body, format_timestamp(datetime.now(timezone.utc))),
            )
            self._count(conn, queue_name)

        self._execute(op)
        return message_id

    def dequeue(self, queue_name: str, visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT) -> Optional[QueueMessage]:
        now = self._clock()

        def op(conn):
            row = conn.execute(
                "SELECT seq, message_id, payload, attempt, enqueued_at, last_error FROM queue_messages "
                "WHERE queue_name = ? AND visible_at <= ? ORDER BY seq LIMIT 1",
                (queue_name, now),
            ).fetchone()
            if row is None:
                return None
            seq, message_id, payload, attempt, enqueued_at, last_error = row
            conn.execute(
                "UPDATE queue_messages SET attempt = ?, visible_at = ?, inflight = 1 WHERE seq = ?",
                (attempt + 1, now + visibility_timeout, seq),
            )
            return QueueMessage(message_id, queue_name, json.loads(payload), attempt + 1,
                                parse_timestamp(enqueued_at), last_error)

        return self._execute(op)

    def ack(self, message: QueueMessage) -> None:
        self._execute(lambda conn: conn.execute(
            "DELETE FROM queue_messages WHERE queue_name = ? AND message_id = ? AND inflight = 1",
            (message.queue_name, message.message_id),
        ))

    def nack(self, message: QueueMessage, error: str = "") -> None:
        def op(conn):
            row = conn.execute(
                "SELECT seq FROM queue_messages WHERE queue_name = ? AND message_id = ? AND inflight = 1",
                (message.queue_name, message.message_id),
            ).fetchone()
            if row is None:
                return
            # re-insert to move the message to the back of the queue
            conn.execute("DELETE FROM queue_messages WHERE seq = ?", (row[0],))
            conn.execute(
                "INSERT INTO queue_messages (message_id, queue_name, payload, attempt, enqueued_at, last_error) "
                "VALUES (?, ?, ?, ?, ?, ?)",
                (message.message_id, message.queue_name, json.dumps(message.payload, sort_keys=True),
                 message.attempt, format_timestamp(message.enqueued_at), error or None),
            )

        self._execute(op)

    def dead_letter(self, message: QueueMessage, error: str = "") -> None:
        dead = dead_letter_queue(message.queue_name)

        def op(conn):
            cur = conn.execute(
                "DELETE FROM queue_messages WHERE queue_name = ? AND message_id = ? AND inflight = 1",
                (message.queue_name, message.message_id),
            )
            if cur.rowcount == 0:
                return
            conn.execute(
                "INSERT INTO queue_messages (message_id, queue_name, payload, attempt, enqueued_at, last_error) "
                "VALUES (?, ?, ?, 0, ?, ?)",
                (message.message_id, dead, json.dumps(message.payload, sort_keys=True),
                 format_timestamp(message.enqueued_at), error or None),
            )
            self._count(conn, dead)

        self._execute(op)

    def size(self, queue_name: str) -> int:
        with self._lock:
            return self._conn.execute(
                "SELECT COUNT(*) FROM queue_messages WHERE queue_name = ?", (queue_name,)
            ).fetchone()[0]

    def peek(self, queue_name: str) -> list[QueueMessage]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT message_id, payload, attempt, enqueued_at, last_error FROM queue_messages "
                "WHERE queue_name = ? ORDER BY seq",
                (queue_name,),
            ).fetchall()
        return [QueueMessage(r[0], queue_name, json.loads(r[1]), r[2], parse_timestamp(r[3]), r[4]) for r in rows]

    @property
    def enqueued(self) -> collections.Counter:
        with self._lock:
            rows = self._conn.execute("SELECT queue_name, enqueued FROM queue_counters").fetchall()
        return collections.Counter(dict(rows))

    def recover(self) -> int:
        """Make every in-flight message visible again (single-consumer restart)."""
        return self._execute(lambda conn: conn.execute(
            "UPDATE queue_messages SET visible_at = 0, inflight = 0 WHERE inflight = 1"
        ).rowcount)

    def close(self) -> None:
        with self._lock:
            self._conn.close()


@dataclass
class WorkerReport:
    processed: int = 0
    succeeded: int = 0
    failed: int = 0
    dead_lettered: int = 0

    def __add__(self, other: "WorkerReport") -> "WorkerReport":
        return WorkerReport(
            self.processed + other.processed,
            self.succeeded + other.succeeded,
            self.failed + other.failed,
            self.dead_lettered + other.dead_lettered,
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.processed, self.succeeded, self.failed, self.dead_lettered)


Handler = Callable[[QueueMessage], None]


def run_worker(
    broker: Broker,
    queue_name: str,
    handler: Handler,
    retry_budget: int = 3,
    stop: Optional[threading.Event] = None,
    visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT,
) -> WorkerReport:
    """Consume ``queue_name`` until it is drained or ``stop`` is set.

    ``processed`` counts deliveries, so a message that fails once and then
    succeeds contributes two. Exceptions derived from ``Exception`` are
    counted as failures; anything else (KeyboardInterrupt, a simulated
    crash) propagates and leaves the message in flight.
    """
    if retry_budget < 1:
        raise ValueError("retry_budget must be at least 1")
    report = WorkerReport()
    while stop is None or not stop.is_set():
        msg = broker.dequeue(queue_name, visibility_timeout)
        if msg is None:
            break
        report.processed += 1
        try:
            handler(msg)
        except Exception as exc:
            report.failed += 1
            error = f"{type(exc).__name__}: {exc}"
            if msg.attempt >= retry_budget:
                logger.error("message %s on %s dead-lettered after %d attempts: %s",
                             msg.message_id, queue_name, msg.attempt, error)
                broker.dead_letter(msg, error)
                report.dead_lettered += 1
            else:
                logger.warning("message %s on %s failed (attempt %d): %s", msg.message_id, queue_name,
                               msg.attempt, error)
                broker.nack(msg, error)
        else:
            broker.ack(msg)
            report.succeeded += 1
    return report


def run_workers(
    broker: Broker,
    queue_name: str,
    handler: Handler,
    concurrency: int = 1,
    retry_budget: int = 3,
    stop: Optional[threading.Event] = None,
    visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT,
) -> WorkerReport:
    """Run ``concurrency`` worker threads on one queue and merge their reports."""
    if concurrency <= 1:
        return run_worker(broker, queue_name, handler, retry_budget, stop, visibility_timeout)
    reports: list[WorkerReport] = []
    errors: list[BaseException] = []

    def target():
        try:
            reports.append(run_worker(broker, queue_name, handler, retry_budget, stop, visibility_timeout))
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=target, name=f"{queue_name}-worker-{i}") for i in range(concurrency)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    total = WorkerReport()
    for r in reports:
        total = total + r
    return total


# -- payloads ----------------------------------------------------------------


def page_to_payload(page: ScrapedPage) -> dict:
    return {
        "url": page.url,
        "merchant": page.merchant,
        "categories": list(page.categories),
        "run_id": page.run_id,
        "fetched_at": format_timestamp(page.fetched_at),
        "html": base64.b64encode(page.html).decode("ascii"),
    }


def payload_to_page(payload: dict) -> ScrapedPage:
    return ScrapedPage(
        url=payload["url"],
        merchant=payload["merchant"],
        categories=tuple(payload["categories"]),
        run_id=payload["run_id"],
        html=base64.b64decode(payload["html"], validate=True),
        fetched_at=parse_timestamp(payload["fetched_at"]),
    )


def queue_sink(broker: Broker, queue_name: str = SCRAPED) -> Callable[[ScrapedPage], None]:
    def sink(page: ScrapedPage) -> None:
        broker.enqueue(queue_name, page_to_payload(page))
    return sink


# -- default topology --------------------------------------------------------


@dataclass
class PipelineReport:
    cache: WorkerReport = field(default_factory=WorkerReport)
    extract: WorkerReport = field(default_factory=WorkerReport)

    def as_dict(self) -> dict:
        return {"cache": self.cache.__dict__.copy(), "extract": self.extract.__dict__.copy()}


class Pipeline:
    """The cache worker and the extraction worker wired to a store.

    The cache worker writes page bytes to the store and enqueues only the
    page id; the extraction worker re-reads the HTML from the cache.
    """

    def __init__(
        self,
        store: GreenStore,
        broker: Broker,
        registry: LabelRegistry,
        mappings: LabelMappings,
        configs: dict[str, MerchantConfig],
        retry_budget: int = 3,
        visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT,
    ):
        self.store = store
        self.broker = broker
        self.registry = registry
        self.mappings = mappings
        self.configs = configs
        self.retry_budget = retry_budget
        self.visibility_timeout = visibility_timeout

    def cache_handler(self, msg: QueueMessage) -> None:
        page = payload_to_page(msg.payload)
        page_id = self.store.cache_page(page.url, page.merchant, page.categories, page.run_id, page.html,
                                        page.fetched_at)
        self.broker.enqueue(EXTRACT, {"page_id": page_id})

    def extract_handler(self, msg: QueueMessage) -> None:
        page = self.store.get_page(msg.payload["page_id"])
        config = self.configs.get(page.merchant)
        if config is None:
            raise KeyError(f"no merchant config for {page.merchant!r}")
        try:
            records, report = build_product(page, config, self.registry, self.mappings)
        except NoProductFound as exc:
            logger.info("no product on %s: %s", page.url, exc)
            self.store.record_extraction(page.page_id, "no_product", 0, str(exc))
            return
        for label_id, raw in report.provisional:
            self.store.record_provisional(label_id, page.merchant, raw, page.run_id)
            self.registry.add_provisional(label_id, raw)
        for record in records:
            self.store.upsert_product(ProductRow.from_record(record, config.url_strip_params))
        self.store.record_extraction(page.page_id, "ok", len(records), "; ".join(report.warnings))

    def run_cache_worker(self, concurrency: int = 1, stop: Optional[threading.Event] = None) -> WorkerReport:
        return run_workers(self.broker, SCRAPED, self.cache_handler, concurrency, self.retry_budget, stop,
                           self.visibility_timeout)

    def run_extraction_worker(self, concurrency: int = 1, stop: Optional[threading.Event] = None) -> WorkerReport:
        return run_workers(self.broker, EXTRACT, self.extract_handler, concurrency, self.retry_budget, stop,
                           self.visibility_timeout)

    def run_until_drained(self, concurrency: int = 1) -> PipelineReport:
        report = PipelineReport()
        while True:
            cache = self.run_cache_worker(concurrency)
            extract = self.run_extraction_worker(concurrency)
            report.cache = report.cache + cache
            report.extract = report.extract + extract
            if cache.processed == 0 and extract.processed == 0:
                return report


def wire_default_topology(
    store: GreenStore,
    broker: Broker,
    registry: LabelRegistry,
    mappings: LabelMappings,
    configs: Union[dict[str, MerchantConfig], list[MerchantConfig]],
    retry_budget: int = 3,
    visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT,
) -> Pipeline:
    if not isinstance(configs, dict):
        configs = {c.merchant: c for c in configs}
    return Pipeline(store, broker, registry, mappings, configs, retry_budget, visibility_timeout)
