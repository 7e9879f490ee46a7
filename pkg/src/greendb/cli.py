"""Command line entry point: ``greendb <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .crawler import MerchantConfig, crawl_merchant, load_merchant_config
from .export import compute_distribution, export_dataset
from .labels import load_label_seed, load_mappings
from .mock import MockMerchantServer, generate_catalog, load_catalog_spec, merchant_config, mock_mappings
from .model import RUN_ID_RE, CategoryVocabulary
from .persistence import DB_ENV, GreenStore, RunManifest, default_db_path
from .pipeline import EXTRACT, SCRAPED, SqliteBroker, queue_sink, run_workers, wire_default_topology

logger = logging.getLogger("greendb")

QUEUES = (SCRAPED, EXTRACT)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _run_id(value: str) -> str:
    if not RUN_ID_RE.match(value):
        raise argparse.ArgumentTypeError(f"run id must match [A-Za-z0-9_-]+: {value!r}")
    return value


def default_run_id() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--db", default=None, help=f"store path (default: ${DB_ENV} or greendb.sqlite)")
    common.add_argument("--verbose", "-v", action="count", default=0)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--run-id", type=_run_id, default=None)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    parser = _Parser(prog="greendb", description="Product-by-product sustainability database pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("labels-import", parents=[common], help="load a label seed and label mappings")
    p.add_argument("seed", nargs="?", help="label seed CSV (default: shipped seed)")
    p.add_argument("--mappings", help="label mapping CSV (default: shipped mappings)")

    p = sub.add_parser("crawl", parents=[common], help="crawl one merchant into the scraped queue")
    p.add_argument("--merchant-config", required=True)
    p.add_argument("--categories", help="category vocabulary file")

    p = sub.add_parser("work", parents=[common], help="run a worker until its queue is drained")
    p.add_argument("--queue", required=True, choices=QUEUES)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--retry-budget", type=int, default=3)

    p = sub.add_parser("export", parents=[common], help="export the latest view")
    p.add_argument("--format", required=True, choices=("csv", "jsonl"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", parents=[common], help="distribution report over the latest view")
    p.add_argument("--out")

    sub.add_parser("audit", parents=[common], help="integrity check of the store")

    p = sub.add_parser("serve-mock", parents=[common], help="serve a mock merchant catalog")
    p.add_argument("--spec", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")

    p = sub.add_parser("e2e", parents=[common], help="crawl a mock catalog through the full pipeline")
    p.add_argument("--spec", required=True)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--port", type=int, default=0, help="mock server port (default: ephemeral)")
    return parser


def _emit(args, data: dict, text: Optional[str] = None, out: Optional[str] = None) -> None:
    body = json.dumps(data, indent=2, sort_keys=True) + "\n" if args.json or text is None else text
    if out:
        Path(out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)


def _store(args) -> GreenStore:
    return GreenStore(args.db or default_db_path())


def _configs_from_store(store: GreenStore) -> dict[str, MerchantConfig]:
    return {m: MerchantConfig.from_dict(d) for m, d in store.merchant_configs().items()}


def cmd_labels_import(args) -> int:
    registry = load_label_seed(args.seed)
    mappings = load_mappings(args.mappings, registry)
    with _store(args) as store:
        store.save_registry(registry)
        store.save_mappings(mappings)
        loaded = store.load_registry()
    data = {
        "labels": len(loaded),
        "third_party": loaded.third_party_count,
        "evaluated": loaded.evaluated_count,
        "mappings": len(mappings),
    }
    _emit(args, data, "".join(f"{k}: {v}\n" for k, v in data.items()))
    return 0


def cmd_crawl(args) -> int:
    vocabulary = CategoryVocabulary.load(args.categories)
    config = load_merchant_config(args.merchant_config, vocabulary)
    run_id = args.run_id or default_run_id()
    with _store(args) as store:
        store.save_merchant_config(config.merchant, config.to_dict())
        store.start_run(RunManifest(run_id, datetime.now(timezone.utc), merchants=[config.merchant]))
        broker = SqliteBroker(store.path)
        try:
            summary = crawl_merchant(config, run_id, queue_sink(broker))
        finally:
            broker.close()
        store.update_run_counters(run_id, {f"crawl.{config.merchant}": summary.as_dict()})
    data = {"run_id": run_id, **summary.as_dict()}
    _emit(args, data, "".join(f"{k}: {v}\n" for k, v in data.items()))
    return 0


def cmd_work(args) -> int:
    if args.concurrency < 1:
        raise UsageError("--concurrency must be >= 1")
    with _store(args) as store:
        registry = store.load_registry()
        if len(registry) <= 1:
            logger.warning("label registry is empty; run labels-import first")
        broker = SqliteBroker(store.path)
        try:
            broker.recover()
            pipeline = wire_default_topology(store, broker, registry, store.load_mappings(),
                                             _configs_from_store(store), retry_budget=args.retry_budget)
            handler = pipeline.cache_handler if args.queue == SCRAPED else pipeline.extract_handler
            report = run_workers(broker, args.queue, handler, args.concurrency, args.retry_budget)
        finally:
            broker.close()
    data = {"queue": args.queue, **report.__dict__}
    _emit(args, data, "".join(f"{k}: {v}\n" for k, v in data.items()))
    return 0


def cmd_export(args) -> int:
    with _store(args) as store:
        n = export_dataset(store.latest_view(), args.format, args.out)
    logger.info("exported %d rows to %s", n, args.out)
    _emit(args, {"rows": n, "out": args.out}, f"rows: {n}\n")
    return 0


def cmd_stats(args) -> int:
    with _store(args) as store:
        report = compute_distribution(store.latest_view(), store.load_registry())
        registry = store.load_registry()
    data = report.as_dict()
    data["registry"] = {"labels": len(registry), "third_party": registry.third_party_count,
                        "evaluated": registry.evaluated_count}
    text = report.to_text() + f"registry: {len(registry)} labels ({registry.evaluated_count} evaluated)\n"
    _emit(args, data, text, args.out)
    return 0


def cmd_audit(args) -> int:
    with _store(args) as store:
        report = store.audit()
    text = f"ok: {report.ok}\nrows: {report.rows}\nunique: {report.unique}\npages: {report.pages}\n"
    text += "".join(f"problem: {p}\n" for p in report.problems)
    _emit(args, report.as_dict(), text)
    return 0 if report.ok else 2


def cmd_serve_mock(args) -> int:
    spec = load_catalog_spec(args.spec)
    server = MockMerchantServer(spec, args.host, args.port)
    print(f"serving {spec.merchant} on {server.url}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def run_e2e(store: GreenStore, spec_path: str, run_id: str, concurrency: int = 1, port: int = 0) -> dict:
    """Crawl a mock catalog through the full topology and compare against its manifest.

    Counts are restricted to pages and rows served by this invocation's mock
    server. Re-running with the same run id is idempotent only when ``port``
    is pinned, since page URLs include the port.
    """
    spec = load_catalog_spec(spec_path)
    manifest = generate_catalog(spec)
    if len(store.load_registry()) <= 1:
        registry = load_label_seed()
        store.save_registry(registry)
        store.save_mappings(load_mappings(None, registry))
    store.save_mappings(mock_mappings(manifest))
    broker = SqliteBroker(store.path)
    try:
        with MockMerchantServer(manifest, port=port) as server:
            config = merchant_config(spec, server.url)
            store.save_merchant_config(config.merchant, config.to_dict())
            store.start_run(RunManifest(run_id, datetime.now(timezone.utc), merchants=[config.merchant]))
            before = broker.enqueued
            summary = crawl_merchant(config, run_id, queue_sink(broker))
            pipeline = wire_default_topology(store, broker, store.load_registry(), store.load_mappings(),
                                             {config.merchant: config})
            report = pipeline.run_until_drained(concurrency)
            after = broker.enqueued
            expected = manifest.expected_rows(server.url)
            base = server.url + "/"
    finally:
        broker.close()
    store.update_run_counters(run_id, {"crawl": summary.as_dict(), "workers": report.as_dict()})
    store.finish_run(run_id)

    rows = {(r.key, r.record.category): r.record.sustainability_label_ids
            for r in store.all_rows() if r.record.run_id == run_id and r.record.url.startswith(base)}
    enqueued = after[SCRAPED] - before[SCRAPED]
    dead = after[SCRAPED + ".dead"] - before[SCRAPED + ".dead"]
    cached = store.count_pages(run_id, base)
    return {
        "run_id": run_id,
        "crawl": summary.as_dict(),
        "workers": report.as_dict(),
        "enqueued": enqueued,
        "cached": cached,
        "dead_lettered": dead,
        "rows": len(rows),
        "expected_rows": len(expected),
        "unrecoverable": sorted(manifest.unrecoverable()),
        "conservation_ok": enqueued == cached + dead,
        "manifest_ok": rows == expected,
    }


def cmd_e2e(args) -> int:
    run_id = args.run_id or default_run_id()
    with _store(args) as store:
        result = run_e2e(store, args.spec, run_id, args.concurrency, args.port)
        stats = compute_distribution(store.latest_view(), store.load_registry())
    result["stats"] = stats.as_dict()
    text = (
        f"run_id: {run_id}\nenqueued: {result['enqueued']}\ncached: {result['cached']}\n"
        f"dead_lettered: {result['dead_lettered']}\nrows: {result['rows']} (expected {result['expected_rows']})\n"
        f"conservation_ok: {result['conservation_ok']}\nmanifest_ok: {result['manifest_ok']}\n"
    ) + stats.to_text()
    _emit(args, result, text)
    return 0 if result["conservation_ok"] and result["manifest_ok"] else 2


COMMANDS = {
    "labels-import": cmd_labels_import,
    "crawl": cmd_crawl,
    "work": cmd_work,
    "export": cmd_export,
    "stats": cmd_stats,
    "audit": cmd_audit,
    "serve-mock": cmd_serve_mock,
    "e2e": cmd_e2e,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"greendb: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"greendb: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
