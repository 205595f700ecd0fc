"""Lowering a composite policy onto a sitemap: the per-request lookup table.

Compilation resolves, once per session load, the decision for every
semantic action (deny beats condition beats allow; actions no selected
policy covers default to deny) and ties it to the entry's HTTP matcher.
Per request, the table is consulted instead of rescanning policies.

Rules are indexed by (method, host, first literal path segment); entries
whose first segment is a wildcard land in a per-(method, host) bucket that
is always scanned. The developer allowlist of external URL patterns is
checked before sitemap rules; its hosts are external by construction, so
the ordering cannot shadow a sitemap action.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from decimal import Decimal
from urllib.parse import urlsplit

from .conditions import ConditionProgram
from .policy import CompositePolicy, PolicySet, bind_composite, cross_validate
from .request import HttpRequestView, walk_body_path
from .sitemap import Sitemap, SitemapEntry, split_pattern


@dataclass(frozen=True)
class ConditionBinding:
    """One condition grant attached to an action: program + frozen params."""

    program: ConditionProgram
    params: dict
    required_args: tuple[str, ...]
    policy_name: str


@dataclass(frozen=True)
class Decision:
    kind: str  # allow | deny | evaluate
    source_policy: str = ""
    conditions: tuple[ConditionBinding, ...] = ()

    def required_args(self) -> list[str]:
        names: list[str] = []
        for binding in self.conditions:
            for arg in binding.required_args:
                if arg not in names:
                    names.append(arg)
        return names

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "source_policy": self.source_policy}
        if self.kind == "evaluate":
            out["conditions"] = [
                {
                    "function": b.program.name,
                    "params": {k: _jsonable(v) for k, v in b.params.items()},
                    "args": list(b.required_args),
                    "policy": b.policy_name,
                }
                for b in self.conditions
            ]
        return out


ALLOW = "allow"
DENY = "deny"
EVALUATE = "evaluate"


@dataclass(frozen=True)
class RouteDecision:
    route: str  # allowlisted | pass_through | matched
    semantic_action: str | None = None
    decision: Decision | None = None
    entry: SitemapEntry | None = None
    note: str = ""


ALLOWLISTED = RouteDecision(route="allowlisted")
PASS_THROUGH = RouteDecision(route="pass_through")


def _jsonable(value):
    if isinstance(value, Decimal):
        as_int = int(value)
        return as_int if value == as_int else float(value)
    return value


def _rest_regex(rest: str) -> re.Pattern:
    body = "[^?#]*".join(re.escape(part) for part in rest.split("*"))
    return re.compile(f"^{body}$")


def _first_segment(path: str) -> str:
    segments = path.split("/")
    return segments[1] if len(segments) > 1 else ""


@dataclass(frozen=True)
class _CompiledPattern:
    scheme: str
    host: str
    rest: str
    prefix: str  # literal text before the first wildcard, for fast rejection
    regex: re.Pattern
    wants_query: bool

    def matches(self, parts) -> bool:
        if (parts.scheme or "").lower() != self.scheme:
            return False
        if (parts.hostname or "").lower() != self.host:
            return False
        target = parts.path or "/"
        if self.wants_query and parts.query:
            target = f"{target}?{parts.query}"
        if not target.startswith(self.prefix):
            return False
        return self.regex.match(target) is not None


def _compile_pattern(pattern: str) -> _CompiledPattern:
    scheme, host, rest = split_pattern(pattern)
    return _CompiledPattern(
        scheme=scheme,
        host=host,
        rest=rest,
        prefix=rest.split("*", 1)[0],
        regex=_rest_regex(rest),
        wants_query="?" in rest,
    )


@dataclass(frozen=True)
class Rule:
    entry: SitemapEntry
    decision: Decision
    pattern: _CompiledPattern
    position: int

    @property
    def semantic_action(self) -> str:
        return self.entry.semantic_action


class AuthTable:
    """Immutable per-domain authorization table; lookups need no locking."""

    def __init__(self, domain: str, rules: list[Rule], allowlist: list[str]):
        self.domain = domain
        self.rules = tuple(rules)
        self.allowlist = tuple(allowlist)
        self._allow_patterns: dict[str, list[_CompiledPattern]] = {}
        for pattern in allowlist:
            compiled = _compile_pattern(pattern)
            self._allow_patterns.setdefault(compiled.host, []).append(compiled)
        self._literal: dict[tuple[str, str, str], list[Rule]] = {}
        self._wild: dict[tuple[str, str], list[Rule]] = {}
        for rule in self.rules:
            method = rule.entry.matcher.method
            path_part = rule.pattern.rest.split("?", 1)[0]
            seg = _first_segment(path_part)
            if "*" in seg:
                self._wild.setdefault((method, rule.pattern.host), []).append(rule)
            else:
                self._literal.setdefault((method, rule.pattern.host, seg), []).append(rule)

    def allowlist_covers(self, parts) -> bool:
        host = (parts.hostname or "").lower()
        for compiled in self._allow_patterns.get(host, ()):
            if compiled.matches(parts):
                return True
        return False

    def allowlist_hosts(self) -> set[str]:
        return set(self._allow_patterns)

    def lookup(self, req: HttpRequestView) -> RouteDecision:
        parts = urlsplit(req.url)
        if self.allowlist_covers(parts):
            return ALLOWLISTED
        host = (parts.hostname or "").lower()
        path = parts.path or "/"
        literal = self._literal.get((req.method, host, _first_segment(path)))
        wild = self._wild.get((req.method, host))
        if literal and wild:
            candidates = sorted(literal + wild, key=lambda r: r.position)
        else:
            candidates = literal or wild or ()
        blocked: Rule | None = None
        for rule in candidates:
            if not rule.pattern.matches(parts):
                continue
            matchers = rule.entry.matcher.body_matchers
            if not matchers:
                return RouteDecision(
                    route="matched",
                    semantic_action=rule.semantic_action,
                    decision=rule.decision,
                    entry=rule.entry,
                )
            body = req.parsed_body
            if body is None:
                if req.has_body and blocked is None:
                    blocked = rule  # cannot evaluate required fields: fail closed
                continue
            if all(_body_matcher_holds(body, m) for m in matchers):
                return RouteDecision(
                    route="matched",
                    semantic_action=rule.semantic_action,
                    decision=rule.decision,
                    entry=rule.entry,
                )
        if blocked is not None:
            return RouteDecision(
                route="matched",
                semantic_action=blocked.semantic_action,
                decision=Decision(kind=DENY, source_policy="body-unparseable"),
                entry=blocked.entry,
                note="request body could not be parsed for a body-matched entry",
            )
        return PASS_THROUGH

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "default": "deny",
            "rules": [
                {
                    "method": rule.entry.matcher.method,
                    "url_pattern": rule.entry.matcher.url_pattern,
                    **(
                        {"body": [m.to_dict() for m in rule.entry.matcher.body_matchers]}
                        if rule.entry.matcher.body_matchers
                        else {}
                    ),
                    "semantic_action": rule.semantic_action,
                    "decision": rule.decision.to_dict(),
                }
                for rule in self.rules
            ],
            "allowlist": list(self.allowlist),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _body_matcher_holds(body, matcher) -> bool:
    found, value = walk_body_path(body, matcher.path)
    if not found:
        return False
    return matcher.present or value == matcher.equals


def compile_table(sitemap: Sitemap, policy_set: PolicySet, composite: CompositePolicy) -> AuthTable:
    """Resolve every sitemap action's decision and build the lookup table."""
    cross_validate(policy_set, sitemap)
    bound = bind_composite(composite, policy_set)
    selected = [(policy_set.get(s.name), s.params) for s in bound.selected]
    rules: list[Rule] = []
    for position, entry in enumerate(sitemap.entries):
        action = entry.semantic_action
        deny_from = None
        condition_bindings: list[ConditionBinding] = []
        allow_from = None
        for policy, params in selected:
            if action not in policy.actions:
                continue
            if policy.effect == "deny":
                deny_from = policy.name
                break
            if policy.effect == "condition":
                condition_bindings.append(ConditionBinding(
                    program=policy.condition.program,
                    params=dict(params or {}),
                    required_args=policy.condition.args,
                    policy_name=policy.name,
                ))
            elif allow_from is None:
                allow_from = policy.name
        if deny_from is not None:
            decision = Decision(kind=DENY, source_policy=deny_from)
        elif condition_bindings:
            decision = Decision(
                kind=EVALUATE,
                source_policy=condition_bindings[0].policy_name,
                conditions=tuple(condition_bindings),
            )
        elif allow_from is not None:
            decision = Decision(kind=ALLOW, source_policy=allow_from)
        else:
            decision = Decision(kind=DENY, source_policy="default")
        rules.append(Rule(
            entry=entry,
            decision=decision,
            pattern=_compile_pattern(entry.matcher.url_pattern),
            position=position,
        ))
    return AuthTable(domain=sitemap.domain, rules=rules, allowlist=list(bound.allowlist))


def lookup(table: AuthTable, req: HttpRequestView) -> RouteDecision:
    """Route one request: allowlisted, matched (with decision), or pass-through."""
    return table.lookup(req)
