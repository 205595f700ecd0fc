"""Developer-authored policies over semantic actions, and their composition.

A policy grants (allow), forbids (deny), or conditionally grants
(condition) a set of semantic actions. The allow/condition policies of a
set must be comparable: any two action sets are either disjoint or nested,
so "least privilege" is well defined for automated selection. Deny
policies only ever shrink privilege and stay outside that requirement.

A composite policy binds a user session to a chosen subset of policies,
freezing condition parameters at instantiation, plus a developer allowlist
of trusted external URL patterns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal

from .conditions import ConditionProgram, parse_condition
from .errors import (
    MissingParamsError,
    ParamTypeError,
    ParseError,
    PartialOrderViolation,
    SchemaError,
    UnknownActionError,
    UnknownPolicyError,
)
from .sitemap import _ACTION_RE, _DOMAIN_RE, Sitemap, split_pattern

EFFECTS = ("allow", "deny", "condition")
PARAM_TYPES = ("number", "string", "boolean", "string_list")


@dataclass(frozen=True)
class ParamField:
    name: str
    value_type: str


@dataclass(frozen=True)
class ConditionSpec:
    """A condition grant: named program plus its parameter/argument contract."""

    function: str
    program: ConditionProgram
    params_schema: tuple[ParamField, ...]
    args: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "function": self.function,
            "function_src": self.program.source,
            "params": [{"name": p.name, "type": p.value_type} for p in self.params_schema],
            "args": list(self.args),
        }


@dataclass(frozen=True)
class Policy:
    name: str
    effect: str
    actions: tuple[str, ...]
    description: str
    condition: ConditionSpec | None = None

    def to_dict(self) -> dict:
        out: dict = {
            "name": self.name,
            "effect": self.effect,
            "actions": list(self.actions),
            "description": self.description,
        }
        if self.condition is not None:
            out["condition"] = self.condition.to_dict()
        return out


@dataclass(frozen=True)
class PolicySet:
    domain: str
    policies: tuple[Policy, ...] = ()

    def get(self, name: str) -> Policy | None:
        for policy in self.policies:
            if policy.name == name:
                return policy
        return None

    def to_dict(self) -> dict:
        return {"domain": self.domain, "policies": [p.to_dict() for p in self.policies]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class Selection:
    """One selected policy with its frozen instantiation parameters."""

    name: str
    params: dict | None = None

    def to_dict(self) -> dict:
        out: dict = {"name": self.name}
        if self.params is not None:
            out["params"] = {k: _param_to_json(v) for k, v in self.params.items()}
        return out


@dataclass(frozen=True)
class CompositePolicy:
    domain: str
    selected: tuple[Selection, ...] = ()
    allowlist: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "policies": [s.to_dict() for s in self.selected],
            "allowlist": list(self.allowlist),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class OrderViolation:
    """Witness that two policies overlap without either containing the other."""

    first: str
    second: str
    shared: str
    only_first: str
    only_second: str


def _param_to_json(value):
    if isinstance(value, Decimal):
        as_int = int(value)
        return as_int if value == as_int else float(value)
    return value


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kind) or (kind is not bool and isinstance(value, bool)):
        raise SchemaError(f"{where}: field {key!r} has wrong type")
    return value


def _reject_extras(doc: dict, allowed: set[str], where: str):
    extras = set(doc) - allowed
    if extras:
        raise SchemaError(f"{where}: unknown fields {sorted(extras)}")


def _collect_vars(node: tuple, out: dict[str, set[str]]):
    kind = node[0]
    if kind == "var":
        out[node[1]].add(node[2])
    elif kind in ("and", "or"):
        _collect_vars(node[1], out)
        _collect_vars(node[2], out)
    elif kind == "not":
        _collect_vars(node[1], out)
    elif kind == "cmp":
        _collect_vars(node[2], out)
        _collect_vars(node[3], out)


def _parse_condition_spec(doc, where: str) -> ConditionSpec:
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: condition must be an object")
    _reject_extras(doc, {"function", "function_src", "params", "args"}, where)
    function = _require(doc, "function", str, where)
    if not _ACTION_RE.match(function):
        raise SchemaError(f"{where}: bad condition function name {function!r}")
    source = _require(doc, "function_src", str, where)
    try:
        program = parse_condition(source, name=function)
    except ParseError as exc:
        raise SchemaError(f"{where}: condition source does not parse: {exc}") from exc
    raw_params = _require(doc, "params", list, where)
    schema: list[ParamField] = []
    seen: set[str] = set()
    for p in raw_params:
        if not isinstance(p, dict):
            raise SchemaError(f"{where}: param schema entries must be objects")
        _reject_extras(p, {"name", "type"}, where)
        pname = _require(p, "name", str, where)
        ptype = _require(p, "type", str, where)
        if ptype not in PARAM_TYPES:
            raise SchemaError(f"{where}: unknown param type {ptype!r}")
        if pname in seen:
            raise SchemaError(f"{where}: duplicate param {pname!r}")
        seen.add(pname)
        schema.append(ParamField(name=pname, value_type=ptype))
    raw_args = _require(doc, "args", list, where)
    args: list[str] = []
    for a in raw_args:
        if not isinstance(a, str) or not _ACTION_RE.match(a):
            raise SchemaError(f"{where}: bad condition arg {a!r}")
        if a in args:
            raise SchemaError(f"{where}: duplicate condition arg {a!r}")
        args.append(a)
    used: dict[str, set[str]] = {"params": set(), "args": set()}
    _collect_vars(program.ast, used)
    unknown_params = used["params"] - seen
    if unknown_params:
        raise SchemaError(f"{where}: condition references undeclared params {sorted(unknown_params)}")
    unknown_args = used["args"] - set(args)
    if unknown_args:
        raise SchemaError(f"{where}: condition references undeclared args {sorted(unknown_args)}")
    return ConditionSpec(function=function, program=program, params_schema=tuple(schema), args=tuple(args))


def _parse_policy(doc, index: int) -> Policy:
    where = f"policies[{index}]"
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: policy must be an object")
    _reject_extras(doc, {"name", "effect", "actions", "description", "condition"}, where)
    name = _require(doc, "name", str, where)
    if not _ACTION_RE.match(name):
        raise SchemaError(f"{where}: bad policy name {name!r}")
    effect = _require(doc, "effect", str, where)
    if effect not in EFFECTS:
        raise SchemaError(f"{where}: unknown effect {effect!r}")
    actions = _require(doc, "actions", list, where)
    if not actions:
        raise SchemaError(f"{where}: actions must be non-empty")
    for a in actions:
        if not isinstance(a, str) or not _ACTION_RE.match(a):
            raise SchemaError(f"{where}: bad action reference {a!r}")
    if len(set(actions)) != len(actions):
        raise SchemaError(f"{where}: duplicate actions")
    description = _require(doc, "description", str, where)
    if not description.strip():
        raise SchemaError(f"{where}: description must be non-empty")
    condition = None
    if effect == "condition":
        if "condition" not in doc:
            raise SchemaError(f"{where}: condition effect requires a condition field")
        condition = _parse_condition_spec(doc["condition"], where)
    elif "condition" in doc:
        raise SchemaError(f"{where}: only condition-effect policies carry a condition")
    return Policy(
        name=name,
        effect=effect,
        actions=tuple(actions),
        description=description,
        condition=condition,
    )


def validate_partial_order(policy_set: PolicySet) -> list[OrderViolation]:
    """Return every pair of allow/condition policies that breaks comparability."""
    violations: list[OrderViolation] = []
    granting = [p for p in policy_set.policies if p.effect in ("allow", "condition")]
    for i, first in enumerate(granting):
        a = set(first.actions)
        for second in granting[i + 1:]:
            b = set(second.actions)
            shared = a & b
            if not shared or a <= b or b <= a:
                continue
            violations.append(OrderViolation(
                first=first.name,
                second=second.name,
                shared=sorted(shared)[0],
                only_first=sorted(a - b)[0],
                only_second=sorted(b - a)[0],
            ))
    return violations


def cross_validate(policy_set: PolicySet, sitemap: Sitemap) -> None:
    """Check that every policy reference resolves in the sitemap."""
    if policy_set.domain != sitemap.domain:
        raise SchemaError(
            f"policy set domain {policy_set.domain!r} does not match sitemap domain {sitemap.domain!r}"
        )
    known = set(sitemap.actions())
    for policy in policy_set.policies:
        for action in policy.actions:
            if action not in known:
                raise UnknownActionError(
                    f"policy {policy.name!r} references unknown action {action!r}"
                )
        if policy.condition is None:
            continue
        declared: set[str] = set()
        for action in policy.actions:
            entry = sitemap.entry_for(action)
            if entry is not None:
                declared.update(spec.name for spec in entry.args)
        for arg in policy.condition.args:
            if arg not in declared:
                raise UnknownActionError(
                    f"policy {policy.name!r} condition arg {arg!r} is not declared "
                    f"by any governed action"
                )


def parse_policy_set(data, sitemap: Sitemap | None = None) -> PolicySet:
    """Parse and validate a policy-set document.

    When a sitemap is supplied, action references and condition args are
    cross-validated against it.
    """
    if isinstance(data, (bytes, str)):
        try:
            doc = json.loads(data)
        except ValueError as exc:
            raise SchemaError(f"policy document is not valid JSON: {exc}") from exc
    else:
        doc = data
    if not isinstance(doc, dict):
        raise SchemaError("policy document must be a JSON object")
    _reject_extras(doc, {"domain", "policies"}, "policy set")
    domain = _require(doc, "domain", str, "policy set").lower()
    if not _DOMAIN_RE.match(domain):
        raise SchemaError(f"bad domain {doc['domain']!r}")
    raw = _require(doc, "policies", list, "policy set")
    policies = [_parse_policy(p, i) for i, p in enumerate(raw)]
    seen: set[str] = set()
    for policy in policies:
        if policy.name in seen:
            raise SchemaError(f"duplicate policy name {policy.name!r}")
        seen.add(policy.name)
    result = PolicySet(domain=domain, policies=tuple(policies))
    violations = validate_partial_order(result)
    if violations:
        raise PartialOrderViolation(violations)
    if sitemap is not None:
        cross_validate(result, sitemap)
    return result


# ---------------------------------------------------------------------------
# Composite assembly
# ---------------------------------------------------------------------------

def _check_param(policy: str, name: str, value, value_type: str):
    if value_type == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float, Decimal)):
            raise ParamTypeError(f"{policy}.{name} must be a number, got {value!r}")
        return Decimal(str(value)) if not isinstance(value, Decimal) else value
    if value_type == "string":
        if not isinstance(value, str):
            raise ParamTypeError(f"{policy}.{name} must be a string, got {value!r}")
        return value
    if value_type == "boolean":
        if not isinstance(value, bool):
            raise ParamTypeError(f"{policy}.{name} must be a boolean, got {value!r}")
        return value
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParamTypeError(f"{policy}.{name} must be a list of strings, got {value!r}")
    return list(value)


def assemble_composite(policy_set: PolicySet, selections, allowlist=()) -> CompositePolicy:
    """Bind selected policies (with instantiated params) into one unit.

    ``selections`` is an iterable of (policy name, params-or-None) pairs.
    Params are required exactly for condition policies and must conform to
    the policy's parameter schema.
    """
    resolved: list[Selection] = []
    seen: set[str] = set()
    for name, params in selections:
        policy = policy_set.get(name)
        if policy is None:
            raise UnknownPolicyError(f"no policy named {name!r} in {policy_set.domain}")
        if name in seen:
            raise SchemaError(f"policy {name!r} selected twice")
        seen.add(name)
        if policy.effect == "condition":
            if params is None:
                raise MissingParamsError(f"condition policy {name!r} selected without params")
            schema = {p.name: p.value_type for p in policy.condition.params_schema}
            extra = set(params) - set(schema)
            if extra:
                raise ParamTypeError(f"{name}: unexpected params {sorted(extra)}")
            missing = set(schema) - set(params)
            if missing:
                raise MissingParamsError(f"{name}: missing params {sorted(missing)}")
            checked = {
                pname: _check_param(name, pname, params[pname], schema[pname])
                for pname in schema
            }
            resolved.append(Selection(name=name, params=checked))
        else:
            if params is not None:
                raise ParamTypeError(f"policy {name!r} ({policy.effect}) takes no params")
            resolved.append(Selection(name=name))
    patterns: list[str] = []
    for pattern in allowlist:
        _, host, _ = split_pattern(pattern)
        if host == policy_set.domain or host.endswith("." + policy_set.domain):
            raise SchemaError(
                f"allowlist pattern {pattern!r} targets the sitemap domain; "
                f"same-domain requests are governed by the sitemap"
            )
        patterns.append(pattern)
    return CompositePolicy(
        domain=policy_set.domain,
        selected=tuple(resolved),
        allowlist=tuple(patterns),
    )


def parse_composite(data) -> CompositePolicy:
    """Parse a composite-policy document without binding it to a set yet."""
    if isinstance(data, (bytes, str)):
        try:
            doc = json.loads(data, parse_float=Decimal)
        except ValueError as exc:
            raise SchemaError(f"composite document is not valid JSON: {exc}") from exc
    else:
        doc = data
    if not isinstance(doc, dict):
        raise SchemaError("composite document must be a JSON object")
    _reject_extras(doc, {"domain", "policies", "allowlist"}, "composite")
    domain = _require(doc, "domain", str, "composite").lower()
    if not _DOMAIN_RE.match(domain):
        raise SchemaError(f"bad domain {doc['domain']!r}")
    raw = _require(doc, "policies", list, "composite")
    selected: list[Selection] = []
    for i, entry in enumerate(raw):
        where = f"composite.policies[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{where}: must be an object")
        _reject_extras(entry, {"name", "params"}, where)
        name = _require(entry, "name", str, where)
        params = None
        if "params" in entry:
            if not isinstance(entry["params"], dict):
                raise SchemaError(f"{where}: params must be an object")
            params = dict(entry["params"])
        selected.append(Selection(name=name, params=params))
    allowlist: list[str] = []
    if "allowlist" in doc:
        if not isinstance(doc["allowlist"], list):
            raise SchemaError("composite allowlist must be a list")
        for pattern in doc["allowlist"]:
            if not isinstance(pattern, str):
                raise SchemaError("allowlist entries must be strings")
            split_pattern(pattern)
            allowlist.append(pattern)
    return CompositePolicy(domain=domain, selected=tuple(selected), allowlist=tuple(allowlist))


def bind_composite(composite: CompositePolicy, policy_set: PolicySet) -> CompositePolicy:
    """Re-validate a parsed composite against its policy set."""
    if composite.domain != policy_set.domain:
        raise SchemaError(
            f"composite domain {composite.domain!r} does not match policy set "
            f"domain {policy_set.domain!r}"
        )
    return assemble_composite(
        policy_set,
        [(s.name, s.params) for s in composite.selected],
        composite.allowlist,
    )
