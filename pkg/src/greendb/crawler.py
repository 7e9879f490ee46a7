"""Polite catalog crawler.

Fetches category listings and product detail pages while honouring
robots.txt and a per-host request rate, and hands every fetched product
page to a sink (normally the "scraped" queue).
"""

from __future__ import annotations

import logging
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Protocol, Union
from urllib.parse import parse_qsl, urlencode, urljoin, urlsplit, urlunsplit

import yaml
from bs4 import BeautifulSoup

from .extraction import LabelSelectorRule, SelectorError
from .model import CategoryVocabulary, InvariantViolation, RUN_ID_RE, normalize_url

logger = logging.getLogger(__name__)

DEFAULT_USER_AGENT = "greendb/0.1 (+https://example.invalid/greendb)"


# -- robots.txt --------------------------------------------------------------


def _compile_path_pattern(pattern: str) -> re.Pattern:
    anchored = pattern.endswith("$")
    if anchored:
        pattern = pattern[:-1]
    regex = ".*".join(re.escape(part) for part in pattern.split("*"))
    return re.compile(regex + ("$" if anchored else ""))


@dataclass
class _Group:
    agents: list[str] = field(default_factory=list)
    rules: list[tuple[bool, str]] = field(default_factory=list)


class RobotRules:
    """Parsed robots.txt.

    The group whose user-agent token is the longest one contained in the
    crawler's user agent applies, falling back to ``*``. Within a group the
    longest matching Allow/Disallow pattern wins; on a tie Allow wins.
    """

    def __init__(self, groups: list[_Group]):
        self._groups = groups

    @classmethod
    def allow_all(cls) -> "RobotRules":
        return cls([])

    @classmethod
    def disallow_all(cls) -> "RobotRules":
        return cls([_Group(["*"], [(False, "/")])])

    def _rules_for(self, user_agent: str) -> list[tuple[bool, str]]:
        agent = user_agent.lower()
        best_token: Optional[str] = None
        for group in self._groups:
            for token in group.agents:
                if token != "*" and token in agent and (best_token is None or len(token) > len(best_token)):
                    best_token = token
        chosen = best_token if best_token is not None else "*"
        rules: list[tuple[bool, str]] = []
        for group in self._groups:
            if chosen in group.agents:
                rules.extend(group.rules)
        return rules

    def allowed(self, url: str, user_agent: str) -> bool:
        parts = urlsplit(url)
        path = parts.path or "/"
        if parts.query:
            path += "?" + parts.query
        if path == "/robots.txt":
            return True
        best_len = -1
        verdict = True
        for allow, pattern in self._rules_for(user_agent):
            if _compile_path_pattern(pattern).match(path) is None:
                continue
            if len(pattern) > best_len or (len(pattern) == best_len and allow):
                best_len = len(pattern)
                verdict = allow
        return verdict


def parse_robots(robots_txt: str) -> RobotRules:
    """Parse robots.txt text. Unknown or malformed lines are ignored."""
    groups: list[_Group] = []
    current: Optional[_Group] = None
    in_agents = False
    for raw in robots_txt.splitlines():
        line = raw.split("#", 1)[0].strip()
        if ":" not in line:
            continue
        key, _, value = line.partition(":")
        key, value = key.strip().lower(), value.strip()
        if key == "user-agent":
            if current is None or not in_agents:
                current = _Group()
                groups.append(current)
            current.agents.append(value.lower())
            in_agents = True
        elif key in ("allow", "disallow"):
            in_agents = False
            if current is None:
                continue
            # an empty Disallow allows everything and adds no rule
            if value:
                current.rules.append((key == "allow", value))
        else:
            in_agents = False
    return RobotRules(groups)


# -- rate limiting -----------------------------------------------------------


class RateLimiter:
    """Per-host token bucket with capacity 1.

    Grants for one host are spaced at least ``1/rate`` seconds apart;
    hosts never delay each other. Slots are reserved under a lock and the
    wait happens outside it, so concurrent callers queue up in order.
    """

    def __init__(self, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self._clock = clock
        self._sleep = sleep
        self._next: dict[str, float] = {}
        self._lock = threading.Lock()

    def acquire(self, host: str, rate: float) -> float:
        """Block until ``host`` may be contacted; return the delay applied."""
        if rate <= 0:
            raise ValueError("rate must be positive")
        with self._lock:
            now = self._clock()
            slot = max(now, self._next.get(host, now))
            self._next[host] = slot + 1.0 / rate
        delay = slot - now
        if delay > 0:
            self._sleep(delay)
        return delay


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class NextLinkSelector:
    selector: str


@dataclass(frozen=True)
class PageParam:
    name: str
    max_pages: int = 100


Pagination = Union[NextLinkSelector, PageParam]


@dataclass(frozen=True)
class MerchantConfig:
    merchant: str
    base_url: str
    currency: str
    category_seeds: tuple[tuple[str, str], ...]
    pagination: Pagination
    product_link_selector: str
    label_rules: LabelSelectorRule
    url_strip_params: tuple[str, ...] = ()
    rate: float = 1.0
    user_agent: str = DEFAULT_USER_AGENT
    timeout: float = 30.0
    retry_budget: int = 3
    retry_backoff: float = 1.0
    backoff_factor: float = 2.0
    max_pages: int = 100

    def __post_init__(self):
        if not self.category_seeds:
            raise InvariantViolation(f"{self.merchant}: category_seeds must not be empty")
        if not self.rate > 0:
            raise InvariantViolation(f"{self.merchant}: rate must be > 0")
        if not re.fullmatch(r"[A-Z]{3}", self.currency):
            raise InvariantViolation(f"{self.merchant}: bad currency {self.currency!r}")
        host = urlsplit(self.base_url).netloc.lower()
        if not host:
            raise InvariantViolation(f"{self.merchant}: base_url must be absolute")
        for code, url in self.category_seeds:
            if urlsplit(url).netloc.lower() != host:
                raise InvariantViolation(f"{self.merchant}: seed {url} is not on {host}")
        if self.retry_budget < 0 or self.max_pages < 1:
            raise InvariantViolation(f"{self.merchant}: retry_budget >= 0 and max_pages >= 1 required")
        try:
            BeautifulSoup("", "html.parser").select(self.product_link_selector)
            if isinstance(self.pagination, NextLinkSelector):
                BeautifulSoup("", "html.parser").select(self.pagination.selector)
        except Exception as exc:
            raise SelectorError(f"{self.merchant}: bad selector: {exc}") from None

    @property
    def host(self) -> str:
        return urlsplit(self.base_url).netloc.lower()

    @classmethod
    def from_dict(cls, data: dict, vocabulary: Optional[CategoryVocabulary] = None) -> "MerchantConfig":
        try:
            merchant = str(data["merchant"])
            base_url = str(data["base_url"])
            seeds = []
            for seed in data["category_seeds"]:
                code = str(seed["category"])
                if vocabulary is not None:
                    vocabulary.get(code)
                seeds.append((code, urljoin(base_url, str(seed["url"]))))
            pag = data.get("pagination") or {}
            if "next_link" in pag:
                pagination: Pagination = NextLinkSelector(str(pag["next_link"]))
            elif "page_param" in pag:
                pagination = PageParam(str(pag["page_param"]), int(pag.get("max_pages", 100)))
            else:
                raise InvariantViolation(f"{merchant}: pagination needs next_link or page_param")
            rules = data["label_rules"]
            label_rules = LabelSelectorRule(merchant, str(rules["selector"]), rules.get("attribute"))
            optional = {}
            for key, conv in (
                ("rate", float), ("timeout", float), ("retry_budget", int), ("retry_backoff", float),
                ("backoff_factor", float), ("max_pages", int), ("user_agent", str),
            ):
                if data.get(key) is not None:
                    optional[key] = conv(data[key])
            return cls(
                merchant=merchant,
                base_url=base_url,
                currency=str(data.get("currency", "EUR")).upper(),
                category_seeds=tuple(seeds),
                pagination=pagination,
                product_link_selector=str(data["product_link_selector"]),
                label_rules=label_rules,
                url_strip_params=tuple(str(p) for p in data.get("url_strip_params") or ()),
                **optional,
            )
        except KeyError as exc:
            raise InvariantViolation(f"merchant config is missing {exc}") from None

    def to_dict(self) -> dict:
        if isinstance(self.pagination, NextLinkSelector):
            pag = {"next_link": self.pagination.selector}
        else:
            pag = {"page_param": self.pagination.name, "max_pages": self.pagination.max_pages}
        return {
            "merchant": self.merchant,
            "base_url": self.base_url,
            "currency": self.currency,
            "category_seeds": [{"category": c, "url": u} for c, u in self.category_seeds],
            "pagination": pag,
            "product_link_selector": self.product_link_selector,
            "label_rules": {"selector": self.label_rules.selector, "attribute": self.label_rules.attribute},
            "url_strip_params": list(self.url_strip_params),
            "rate": self.rate,
            "user_agent": self.user_agent,
            "timeout": self.timeout,
            "retry_budget": self.retry_budget,
            "retry_backoff": self.retry_backoff,
            "backoff_factor": self.backoff_factor,
            "max_pages": self.max_pages,
        }


def load_merchant_config(path: Union[str, Path], vocabulary: Optional[CategoryVocabulary] = None) -> MerchantConfig:
    data = yaml.safe_load(Path(path).read_text("utf-8"))
    if not isinstance(data, dict):
        raise InvariantViolation(f"{path}: merchant config must be a mapping")
    return MerchantConfig.from_dict(data, vocabulary)


# -- fetching ----------------------------------------------------------------


class FetchError(Exception):
    """The request produced no HTTP response (timeout, refused, reset)."""


@dataclass(frozen=True)
class FetchResult:
    url: str
    status: int
    body: bytes
    fetched_at: datetime
    duration_ms: float

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300


class Fetcher(Protocol):
    def fetch(self, url: str) -> FetchResult: ...


class UrllibFetcher:
    """Static-HTML fetcher; a rendering backend can replace it."""

    def __init__(self, user_agent: str = DEFAULT_USER_AGENT, timeout: float = 30.0):
        self.user_agent = user_agent
        self.timeout = timeout

    def fetch(self, url: str) -> FetchResult:
        req = urllib.request.Request(url, headers={"User-Agent": self.user_agent})
        started = time.monotonic()
        fetched_at = datetime.now(timezone.utc)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
                status = resp.status
        except urllib.error.HTTPError as exc:
            exc.close()
            return FetchResult(url, exc.code, b"", fetched_at, (time.monotonic() - started) * 1000)
        except (urllib.error.URLError, OSError) as exc:
            raise FetchError(f"{url}: {exc}") from exc
        if not 200 <= status < 300:
            body = b""
        return FetchResult(url, status, body, fetched_at, (time.monotonic() - started) * 1000)


# -- crawling ----------------------------------------------------------------


@dataclass(frozen=True)
class ScrapedPage:
    """A fetched product page on its way to the page cache."""

    url: str
    merchant: str
    categories: tuple[str, ...]
    run_id: str
    html: bytes
    fetched_at: datetime


@dataclass
class CrawlSummary:
    merchant: str
    discovered: int = 0
    fetched: int = 0
    skipped: int = 0
    failed: int = 0
    retries: int = 0
    listing_fetches: int = 0
    enqueued: int = 0
    skipped_seeds: list[str] = field(default_factory=list)
    failed_urls: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _with_query_param(url: str, name: str, value: str) -> str:
    parts = urlsplit(url)
    query = [(k, v) for k, v in parse_qsl(parts.query, keep_blank_values=True) if k != name]
    query.append((name, value))
    return urlunsplit((parts.scheme, parts.netloc, parts.path, urlencode(query), ""))


class Crawler:
    """Crawls one merchant for one run.

    robots.txt is fetched once per host and cached for the lifetime of the
    instance, which is one run.
    """

    def __init__(
        self,
        config: MerchantConfig,
        fetcher: Optional[Fetcher] = None,
        limiter: Optional[RateLimiter] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.fetcher = fetcher or UrllibFetcher(config.user_agent, config.timeout)
        self.limiter = limiter or RateLimiter()
        self._sleep = sleep
        self._robots: dict[str, RobotRules] = {}

    def robots_for(self, url: str) -> RobotRules:
        parts = urlsplit(url)
        host = parts.netloc.lower()
        rules = self._robots.get(host)
        if rules is None:
            robots_url = urlunsplit((parts.scheme, parts.netloc, "/robots.txt", "", ""))
            result, _ = self._fetch(robots_url, count_retries=False)
            if result is not None and result.ok:
                rules = parse_robots(result.body.decode("utf-8", errors="replace"))
            elif result is not None and 400 <= result.status < 500:
                rules = RobotRules.allow_all()
            else:
                logger.warning("robots.txt for %s unavailable; treating host as disallowed", host)
                rules = RobotRules.disallow_all()
            self._robots[host] = rules
        return rules

    def allowed(self, url: str) -> bool:
        return self.robots_for(url).allowed(url, self.config.user_agent)

    def _fetch(self, url: str, count_retries: bool = True) -> tuple[Optional[FetchResult], int]:
        cfg = self.config
        host = urlsplit(url).netloc.lower()
        retries = 0
        last: Optional[FetchResult] = None
        while True:
            self.limiter.acquire(host, cfg.rate)
            try:
                last = self.fetcher.fetch(url)
            except FetchError as exc:
                logger.info("fetch failed: %s", exc)
                last = None
            if last is not None and last.ok:
                return last, retries
            status = None if last is None else last.status
            retryable = status is None or status >= 500 or status in (408, 429)
            if not retryable or retries >= cfg.retry_budget:
                return last, retries
            retries += 1
            self._sleep(cfg.retry_backoff * cfg.backoff_factor ** (retries - 1))

    def crawl(self, run_id: str, sink: Callable[[ScrapedPage], None]) -> CrawlSummary:
        cfg = self.config
        if not RUN_ID_RE.match(run_id):
            raise InvariantViolation(f"bad run id {run_id!r}")
        summary = CrawlSummary(cfg.merchant)
        seen: set[str] = set()

        def discover(url: str) -> bool:
            if url in seen:
                return False
            seen.add(url)
            summary.discovered += 1
            return True

        def fetch(url: str) -> Optional[FetchResult]:
            result, retries = self._fetch(url)
            summary.retries += retries
            if result is None or not result.ok:
                summary.failed += 1
                summary.failed_urls.append(url)
                return None
            summary.fetched += 1
            return result

        # phase 1: walk every category listing, collecting product links
        product_categories: dict[str, list[str]] = {}
        listing_links: dict[str, tuple[list[str], Optional[str]]] = {}
        for code, seed_url in cfg.category_seeds:
            if not self.allowed(seed_url):
                logger.info("seed %s for %s disallowed by robots.txt", seed_url, code)
                summary.skipped_seeds.append(code)
                if discover(seed_url):
                    summary.skipped += 1
                continue
            url: Optional[str] = seed_url
            page_no = 1
            max_pages = cfg.pagination.max_pages if isinstance(cfg.pagination, PageParam) else cfg.max_pages
            visited: set[str] = set()
            while url is not None and page_no <= max_pages and url not in visited:
                visited.add(url)
                if url not in listing_links:
                    if not discover(url):
                        break  # seen as a product link or failed earlier
                    if not self.allowed(url):
                        summary.skipped += 1
                        break
                    result = fetch(url)
                    if result is None:
                        break
                    summary.listing_fetches += 1
                    listing_links[url] = self._parse_listing(url, result.body, page_no)
                links, next_url = listing_links[url]
                for link in links:
                    cats = product_categories.setdefault(link, [])
                    if code not in cats:
                        cats.append(code)
                if isinstance(cfg.pagination, PageParam):
                    next_url = None if not links else _with_query_param(seed_url, cfg.pagination.name, str(page_no + 1))
                url = next_url
                page_no += 1

        # phase 2: fetch each distinct product page once
        for link, cats in product_categories.items():
            if not discover(link):
                continue
            if urlsplit(link).netloc.lower() != cfg.host or not self.allowed(link):
                summary.skipped += 1
                continue
            result = fetch(link)
            if result is None:
                continue
            sink(ScrapedPage(link, cfg.merchant, tuple(cats), run_id, result.body, result.fetched_at))
            summary.enqueued += 1
        logger.info(
            "crawl %s/%s: %d discovered, %d fetched, %d skipped, %d failed, %d enqueued",
            cfg.merchant, run_id, summary.discovered, summary.fetched, summary.skipped,
            summary.failed, summary.enqueued,
        )
        return summary

    def _parse_listing(self, url: str, body: bytes, page_no: int) -> tuple[list[str], Optional[str]]:
        cfg = self.config
        soup = BeautifulSoup(body.decode("utf-8", errors="replace"), "html.parser")
        links: list[str] = []
        for a in soup.select(cfg.product_link_selector):
            href = a.get("href")
            if not href:
                continue
            link = normalize_url(urljoin(url, href), cfg.url_strip_params)
            if link not in links:
                links.append(link)
        next_url = None
        if isinstance(cfg.pagination, NextLinkSelector):
            nxt = soup.select_one(cfg.pagination.selector)
            if nxt is not None and nxt.get("href"):
                next_url = urljoin(url, nxt["href"])
        return links, next_url


def crawl_merchant(
    config: MerchantConfig,
    run,
    sink: Callable[[ScrapedPage], None],
    fetcher: Optional[Fetcher] = None,
    limiter: Optional[RateLimiter] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> CrawlSummary:
    """Crawl ``config``'s merchant for ``run`` (a RunManifest or run id)."""
    run_id = run if isinstance(run, str) else run.run_id
    return Crawler(config, fetcher, limiter, sleep).crawl(run_id, sink)
