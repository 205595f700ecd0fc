"""Agent sitemaps: the mapping from HTTP request shapes to semantic actions.

A sitemap document declares, per web domain, every security-relevant action
as an HTTP matcher (method, URL pattern, optional body fields) plus a unique
semantic action name. URL patterns use ``*`` as a wildcard that is either a
full path segment or a trailing suffix; a wildcard never crosses ``?`` or
``#``, so patterns without an explicit query part ignore the query string.

Parsing is strict: schema violations, patterns whose host escapes the
domain, and any pair of entries that could both match one concrete request
are all hard errors. Matching a request against a parsed sitemap therefore
yields at most one semantic action.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from urllib.parse import urlsplit

from .errors import HostError, OverlapError, PatternSyntaxError, SchemaError
from .request import HttpRequestView, coerce_value, walk_body_path

HTTP_METHODS = ("GET", "POST", "PUT", "PATCH", "DELETE")
VALUE_TYPES = ("number", "string", "boolean", "string_list")
ARG_SOURCES = ("request_body", "request_query", "dom")

_ACTION_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")
_DOMAIN_RE = re.compile(r"^[a-z0-9]([a-z0-9-]*[a-z0-9])?(\.[a-z0-9]([a-z0-9-]*[a-z0-9])?)*$")

# Characters a wildcard never consumes.
_STAR_STOPS = "?#"


# ---------------------------------------------------------------------------
# URL pattern grammar
# ---------------------------------------------------------------------------

def split_pattern(pattern: str) -> tuple[str, str, str]:
    """Split ``scheme://host/rest`` and validate the wildcard grammar.

    Returns (scheme, host, rest) with scheme/host lowercased and rest
    defaulting to ``/``. Raises PatternSyntaxError on malformed input.
    """
    if not isinstance(pattern, str) or "://" not in pattern:
        raise PatternSyntaxError(f"pattern must be scheme://host/...: {pattern!r}")
    scheme, _, remainder = pattern.partition("://")
    scheme = scheme.lower()
    if scheme not in ("http", "https"):
        raise PatternSyntaxError(f"unsupported scheme {scheme!r} in {pattern!r}")
    host, slash, rest = remainder.partition("/")
    if not host or "*" in host or "?" in host or "#" in host:
        raise PatternSyntaxError(f"bad host in pattern {pattern!r}")
    rest = "/" + rest if slash else "/"
    for i, ch in enumerate(rest):
        if ch != "*":
            continue
        if i == len(rest) - 1:
            continue  # trailing suffix wildcard
        before = rest[i - 1]
        after = rest[i + 1]
        if after == "?":
            continue  # suffix wildcard on the path, query part follows
        if before == "/" and after == "/":
            continue  # full path segment wildcard
        raise PatternSyntaxError(
            f"'*' must be a full path segment or trailing suffix in {pattern!r}"
        )
    return scheme, host.lower(), rest


def _glob_match(pat: str, text: str) -> bool:
    """Iterative wildcard match; ``*`` absorbs any run of chars except ?#."""
    p = t = 0
    star = -1
    mark = 0
    lp, lt = len(pat), len(text)
    while t < lt:
        if p < lp and pat[p] == "*":
            star = p
            mark = t
            p += 1
        elif p < lp and pat[p] == text[t]:
            p += 1
            t += 1
        elif star != -1 and text[mark] not in _STAR_STOPS:
            mark += 1
            t = mark
            p = star + 1
        else:
            return False
    while p < lp and pat[p] == "*":
        p += 1
    return p == lp


def pattern_matches(url_pattern: str, url: str) -> bool:
    """True iff the URL is covered by the pattern.

    Scheme and host compare case-insensitively; the path is case-sensitive.
    The query string is ignored unless the pattern itself contains ``?``.
    """
    scheme, host, rest = split_pattern(url_pattern)
    parts = urlsplit(url)
    if (parts.scheme or "").lower() != scheme:
        return False
    if (parts.hostname or "").lower() != host:
        return False
    target = parts.path or "/"
    if "?" in rest:
        if parts.query:
            target = f"{target}?{parts.query}"
    return _glob_match(rest, target)


def _globs_intersect(a: str, b: str) -> bool:
    """Whether some concrete string is matched by both glob patterns."""
    la, lb = len(a), len(b)
    seen: dict[tuple[int, int], bool] = {}

    def rec(i: int, j: int) -> bool:
        key = (i, j)
        if key in seen:
            return seen[key]
        seen[key] = False  # guards against re-entry while computing
        if i == la and j == lb:
            result = True
        else:
            result = False
            if i < la and a[i] == "*" and rec(i + 1, j):
                result = True
            elif j < lb and b[j] == "*" and rec(i, j + 1):
                result = True
            elif i < la and j < lb:
                ca, cb = a[i], b[j]
                if ca == "*" and cb not in _STAR_STOPS:
                    result = rec(i, j + 1)
                elif cb == "*" and ca not in _STAR_STOPS:
                    result = rec(i + 1, j)
                elif ca == cb and ca != "*":
                    result = rec(i + 1, j + 1)
        seen[key] = result
        return result

    return rec(0, 0)


def patterns_overlap(first: str, second: str) -> bool:
    """Whether two URL patterns can cover the same concrete URL."""
    s1, h1, r1 = split_pattern(first)
    s2, h2, r2 = split_pattern(second)
    if s1 != s2 or h1 != h2:
        return False
    p1 = r1.split("?", 1)[0]
    p2 = r2.split("?", 1)[0]
    if "?" in r1 and "?" in r2:
        return _globs_intersect(r1, r2)
    # A query-insensitive pattern matches regardless of query, so only the
    # path parts need a common witness.
    return _globs_intersect(p1, p2)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BodyMatcher:
    """One required body field: exact value or mere presence."""

    path: str
    equals: object = None
    present: bool = False

    def to_dict(self) -> dict:
        if self.present:
            return {"path": self.path, "present": True}
        return {"path": self.path, "equals": self.equals}


@dataclass(frozen=True)
class HttpMatcher:
    method: str
    url_pattern: str
    body_matchers: tuple[BodyMatcher, ...] = ()

    def to_dict(self) -> dict:
        out: dict = {"method": self.method, "url_pattern": self.url_pattern}
        if self.body_matchers:
            out["body"] = [m.to_dict() for m in self.body_matchers]
        return out


@dataclass(frozen=True)
class ArgSpec:
    """How to obtain one named argument for permission decisions."""

    name: str
    source: str  # request_body | request_query | dom
    value_type: str
    path: str = ""       # request_body
    key: str = ""        # request_query
    url: str = ""        # dom: page whose DOM carries the value
    selector: str = ""   # dom: element selector on that page

    def to_dict(self) -> dict:
        out: dict = {"name": self.name, "source": self.source, "value_type": self.value_type}
        if self.source == "request_body":
            out["path"] = self.path
        elif self.source == "request_query":
            out["key"] = self.key
        else:
            out["url"] = self.url
            out["selector"] = self.selector
        return out


@dataclass(frozen=True)
class SitemapEntry:
    matcher: HttpMatcher
    semantic_action: str
    description: str
    args: tuple[ArgSpec, ...] = ()

    def arg(self, name: str) -> ArgSpec | None:
        for spec in self.args:
            if spec.name == name:
                return spec
        return None

    def to_dict(self) -> dict:
        out = self.matcher.to_dict()
        out["semantic_action"] = self.semantic_action
        out["description"] = self.description
        if self.args:
            out["args"] = [a.to_dict() for a in self.args]
        return out


@dataclass(frozen=True)
class SemanticHit:
    """The unique entry matched by a request, plus request-sourced args."""

    semantic_action: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MatchOutcome:
    """Detailed match result used by the enforcement path.

    ``blocked`` lists actions whose method+URL matched but whose body
    matchers could not be evaluated because a non-empty body failed to
    parse; enforcement must deny those rather than pass them through.
    """

    hit: SemanticHit | None
    blocked: tuple[str, ...] = ()


@dataclass(frozen=True)
class Sitemap:
    domain: str
    version: int
    entries: tuple[SitemapEntry, ...] = ()

    def entry_for(self, action: str) -> SitemapEntry | None:
        for entry in self.entries:
            if entry.semantic_action == action:
                return entry
        return None

    def actions(self) -> list[str]:
        return [e.semantic_action for e in self.entries]

    def dom_args(self) -> dict[str, ArgSpec]:
        """All DOM-sourced argument specs declared anywhere in the sitemap."""
        out: dict[str, ArgSpec] = {}
        for entry in self.entries:
            for spec in entry.args:
                if spec.source == "dom":
                    out[spec.name] = spec
        return out

    def covers_host(self, host: str) -> bool:
        host = host.lower()
        return host == self.domain or host.endswith("." + self.domain)

    def match(self, req: HttpRequestView) -> MatchOutcome:
        hit = None
        blocked = []
        for entry in self.entries:
            state = _entry_match_state(entry, req)
            if state == "match":
                hit = _build_hit(entry, req)
            elif state == "blocked":
                blocked.append(entry.semantic_action)
        return MatchOutcome(hit=hit, blocked=tuple(blocked))

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "version": self.version,
            "sitemap": [e.to_dict() for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _entry_match_state(entry: SitemapEntry, req: HttpRequestView) -> str:
    """'match', 'no', or 'blocked' (body needed but unparseable)."""
    m = entry.matcher
    if m.method != req.method:
        return "no"
    if not pattern_matches(m.url_pattern, req.url):
        return "no"
    if not m.body_matchers:
        return "match"
    body = req.parsed_body
    if body is None:
        return "blocked" if req.has_body else "no"
    for bm in m.body_matchers:
        found, value = walk_body_path(body, bm.path)
        if not found:
            return "no"
        if not bm.present and value != bm.equals:
            return "no"
    return "match"


def _build_hit(entry: SitemapEntry, req: HttpRequestView) -> SemanticHit:
    args: dict = {}
    for spec in entry.args:
        raw = None
        found = False
        if spec.source == "request_query":
            values = req.query_params().get(spec.key)
            if values:
                raw = values if spec.value_type == "string_list" and len(values) > 1 else values[0]
                found = True
        elif spec.source == "request_body":
            body = req.parsed_body
            if body is not None:
                found, raw = walk_body_path(body, spec.path)
        if not found:
            continue
        try:
            args[spec.name] = coerce_value(raw, spec.value_type)
        except ValueError:
            continue  # uncoercible values stay unresolved; downstream denies
    return SemanticHit(semantic_action=entry.semantic_action, args=args)


def match_request(sitemap: Sitemap, req: HttpRequestView) -> SemanticHit | None:
    """Return the unique matching entry's action and request-sourced args."""
    return sitemap.match(req).hit


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = doc[key]
    if kind is int and isinstance(value, bool):
        raise SchemaError(f"{where}: field {key!r} must be an integer")
    if not isinstance(value, kind):
        raise SchemaError(f"{where}: field {key!r} has wrong type")
    return value


def _reject_extras(doc: dict, allowed: set[str], where: str):
    extras = set(doc) - allowed
    if extras:
        raise SchemaError(f"{where}: unknown fields {sorted(extras)}")


def _parse_body_matcher(doc, where: str) -> BodyMatcher:
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: body matcher must be an object")
    _reject_extras(doc, {"path", "equals", "present"}, where)
    path = _require(doc, "path", str, where)
    if not path or any(not seg for seg in path.split(".")):
        raise SchemaError(f"{where}: body matcher path must be a non-empty dotted path")
    has_equals = "equals" in doc
    has_present = "present" in doc
    if has_equals == has_present:
        raise SchemaError(f"{where}: body matcher needs exactly one of equals/present")
    if has_present:
        if doc["present"] is not True:
            raise SchemaError(f"{where}: present must be true")
        return BodyMatcher(path=path, present=True)
    return BodyMatcher(path=path, equals=doc["equals"])


def _parse_arg_spec(doc, where: str, seen: set[str]) -> ArgSpec:
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: arg spec must be an object")
    name = _require(doc, "name", str, where)
    if not _ACTION_RE.match(name):
        raise SchemaError(f"{where}: bad arg name {name!r}")
    if name in seen:
        raise SchemaError(f"{where}: duplicate arg name {name!r}")
    seen.add(name)
    source = _require(doc, "source", str, where)
    if source not in ARG_SOURCES:
        raise SchemaError(f"{where}: unknown arg source {source!r}")
    value_type = _require(doc, "value_type", str, where)
    if value_type not in VALUE_TYPES:
        raise SchemaError(f"{where}: unknown value_type {value_type!r}")
    allowed = {"name", "source", "value_type"}
    if source == "request_body":
        allowed.add("path")
        path = _require(doc, "path", str, where)
        if not path or any(not seg for seg in path.split(".")):
            raise SchemaError(f"{where}: arg path must be a non-empty dotted path")
        _reject_extras(doc, allowed, where)
        return ArgSpec(name=name, source=source, value_type=value_type, path=path)
    if source == "request_query":
        allowed.add("key")
        key = _require(doc, "key", str, where)
        if not key:
            raise SchemaError(f"{where}: arg key must be non-empty")
        _reject_extras(doc, allowed, where)
        return ArgSpec(name=name, source=source, value_type=value_type, key=key)
    allowed.update({"url", "selector"})
    url = _require(doc, "url", str, where)
    selector = _require(doc, "selector", str, where)
    if not selector:
        raise SchemaError(f"{where}: dom arg needs a non-empty selector")
    split_pattern(url)  # validates the trigger pattern
    _reject_extras(doc, allowed, where)
    return ArgSpec(name=name, source=source, value_type=value_type, url=url, selector=selector)


def _parse_entry(doc, index: int, domain: str) -> SitemapEntry:
    where = f"sitemap[{index}]"
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: entry must be an object")
    _reject_extras(doc, {"method", "url_pattern", "body", "semantic_action", "description", "args"}, where)
    method = _require(doc, "method", str, where).upper()
    if method not in HTTP_METHODS:
        raise SchemaError(f"{where}: unsupported method {doc['method']!r}")
    url_pattern = _require(doc, "url_pattern", str, where)
    _, host, _ = split_pattern(url_pattern)
    if host != domain and not host.endswith("." + domain):
        raise HostError(f"{where}: host {host!r} is outside domain {domain!r}")
    action = _require(doc, "semantic_action", str, where)
    if not _ACTION_RE.match(action):
        raise SchemaError(f"{where}: bad semantic_action {action!r}")
    description = _require(doc, "description", str, where)
    if not description.strip():
        raise SchemaError(f"{where}: description must be non-empty")
    body_matchers = []
    if "body" in doc:
        if not isinstance(doc["body"], list):
            raise SchemaError(f"{where}: body must be a list of matchers")
        body_matchers = [_parse_body_matcher(m, where) for m in doc["body"]]
    args = []
    if "args" in doc:
        if not isinstance(doc["args"], list):
            raise SchemaError(f"{where}: args must be a list")
        seen: set[str] = set()
        args = [_parse_arg_spec(a, where, seen) for a in doc["args"]]
    matcher = HttpMatcher(method=method, url_pattern=url_pattern, body_matchers=tuple(body_matchers))
    return SitemapEntry(matcher=matcher, semantic_action=action, description=description, args=tuple(args))


def _body_matchers_contradict(first: HttpMatcher, second: HttpMatcher) -> bool:
    required = {m.path: m.equals for m in first.body_matchers if not m.present}
    for m in second.body_matchers:
        if not m.present and m.path in required and required[m.path] != m.equals:
            return True
    return False


def entries_may_overlap(first: SitemapEntry, second: SitemapEntry) -> bool:
    """Whether one concrete (method, URL, body) can match both entries."""
    if first.matcher.method != second.matcher.method:
        return False
    if not patterns_overlap(first.matcher.url_pattern, second.matcher.url_pattern):
        return False
    return not _body_matchers_contradict(first.matcher, second.matcher)


def parse_sitemap(data) -> Sitemap:
    """Parse and validate a sitemap document (bytes, str, or dict)."""
    if isinstance(data, (bytes, str)):
        try:
            doc = json.loads(data)
        except ValueError as exc:
            raise SchemaError(f"sitemap document is not valid JSON: {exc}") from exc
    else:
        doc = data
    if not isinstance(doc, dict):
        raise SchemaError("sitemap document must be a JSON object")
    _reject_extras(doc, {"domain", "version", "sitemap"}, "sitemap")
    domain = _require(doc, "domain", str, "sitemap").lower()
    if not _DOMAIN_RE.match(domain):
        raise SchemaError(f"bad domain {doc['domain']!r}")
    version = _require(doc, "version", int, "sitemap")
    if version < 0:
        raise SchemaError("version must be non-negative")
    raw_entries = _require(doc, "sitemap", list, "sitemap")
    entries = [_parse_entry(e, i, domain) for i, e in enumerate(raw_entries)]
    seen_actions: set[str] = set()
    for entry in entries:
        if entry.semantic_action in seen_actions:
            raise SchemaError(f"duplicate semantic_action {entry.semantic_action!r}")
        seen_actions.add(entry.semantic_action)
    for i, first in enumerate(entries):
        for second in entries[i + 1:]:
            if entries_may_overlap(first, second):
                raise OverlapError(first.semantic_action, second.semantic_action)
    return Sitemap(domain=domain, version=version, entries=tuple(entries))
