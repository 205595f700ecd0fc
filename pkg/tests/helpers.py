"""Shared test machinery: naive decision oracle and random instance generator.

The naive interpreter deliberately avoids the compiled table: it rescans
the policy list per request over the sitemap's own matcher walk, so the
compiler's fast path has an independent reference to agree with.
"""

import json
import random
from decimal import Decimal

from cellgate.compiler import AuthTable, compile_table
from cellgate.errors import OverlapError
from cellgate.policy import assemble_composite, parse_policy_set
from cellgate.request import HttpRequestView
from cellgate.sitemap import parse_sitemap, pattern_matches


def normalize_route(route) -> tuple:
    """Project a RouteDecision onto comparable structure."""
    if route.route != "matched":
        return (route.route,)
    decision = route.decision
    if decision.kind == "evaluate":
        bindings = tuple(
            (b.program.name, tuple(sorted((k, str(v)) for k, v in b.params.items())),
             tuple(b.required_args), b.policy_name)
            for b in decision.conditions
        )
        return ("matched", route.semantic_action, "evaluate", bindings)
    return ("matched", route.semantic_action, decision.kind, decision.source_policy)


def naive_route(sitemap, policy_set, composite, req: HttpRequestView) -> tuple:
    """Per-request policy rescan; no compiled table involved."""
    for pattern in composite.allowlist:
        if pattern_matches(pattern, req.url):
            return ("allowlisted",)
    outcome = sitemap.match(req)
    if outcome.hit is None:
        if outcome.blocked:
            return ("matched", outcome.blocked[0], "deny", "body-unparseable")
        return ("pass_through",)
    action = outcome.hit.semantic_action
    selected = [(policy_set.get(s.name), s.params) for s in composite.selected]
    for policy, _ in selected:
        if policy.effect == "deny" and action in policy.actions:
            return ("matched", action, "deny", policy.name)
    bindings = tuple(
        (policy.condition.program.name,
         tuple(sorted((k, str(v)) for k, v in (params or {}).items())),
         tuple(policy.condition.args), policy.name)
        for policy, params in selected
        if policy.effect == "condition" and action in policy.actions
    )
    if bindings:
        return ("matched", action, "evaluate", bindings)
    for policy, _ in selected:
        if policy.effect == "allow" and action in policy.actions:
            return ("matched", action, "allow", policy.name)
    return ("matched", action, "deny", "default")


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

METHODS = ("GET", "POST", "PUT", "PATCH", "DELETE")


def gen_sitemap(rng: random.Random, max_entries: int = 20):
    domain = f"gen{rng.randint(0, 999)}.test"
    host = rng.choice([domain, f"www.{domain}"])
    for _ in range(40):  # retry until the entry set is overlap-free
        n = rng.randint(1, max_entries)
        entries = []
        for i in range(n):
            method = rng.choice(METHODS)
            shape = rng.random()
            if shape < 0.45:
                pattern = f"https://{host}/e{i}/{rng.choice(['list', 'view.html', 'go'])}*"
            elif shape < 0.7:
                pattern = f"https://{host}/api/*/op{i}"
            elif shape < 0.85:
                pattern = f"https://{host}/api/e{i}"
            else:
                pattern = f"https://{host}/form/submit"
            entry = {
                "method": method,
                "url_pattern": pattern,
                "semantic_action": f"Act{i}",
                "description": f"generated action {i}",
            }
            if pattern.endswith("/form/submit"):
                entry["body"] = [{"path": "op", "equals": f"op-{i}"}]
            args = []
            if rng.random() < 0.4:
                args.append({"name": f"q{i}", "source": "request_query",
                             "key": f"q{i}", "value_type": "number"})
            if rng.random() < 0.3 and method != "GET":
                args.append({"name": f"b{i}", "source": "request_body",
                             "path": f"data.b{i}", "value_type": "number"})
            if rng.random() < 0.25:
                args.append({"name": f"d{i}", "source": "dom",
                             "url": f"https://{host}/page/*",
                             "selector": f"#slot-{i}", "value_type": "number"})
            if args:
                entry["args"] = args
            entries.append(entry)
        doc = {"domain": domain, "version": 1, "sitemap": entries}
        try:
            return parse_sitemap(doc)
        except OverlapError:
            continue
    raise AssertionError("could not generate an overlap-free sitemap")


def gen_policy_set(rng: random.Random, sitemap, max_policies: int = 8):
    actions = sitemap.actions()
    rng.shuffle(actions)
    # laminar families keep allow/condition sets nested or disjoint
    blocks = []
    index = 0
    while index < len(actions):
        size = rng.randint(1, max(1, min(4, len(actions) - index)))
        blocks.append(actions[index:index + size])
        index += size
    policies = []
    count = rng.randint(0, max_policies)
    for i in range(count):
        block = rng.choice(blocks)
        if len(block) > 1 and rng.random() < 0.4:
            chosen = block[:rng.randint(1, len(block))]
        else:
            chosen = block
        effect = rng.choice(["allow", "allow", "allow", "condition", "deny"])
        doc = {
            "name": f"pol{i}",
            "effect": effect,
            "actions": list(chosen),
            "description": f"generated policy {i}",
        }
        if effect == "deny":
            # deny sets may cross freely
            pool = sitemap.actions()
            doc["actions"] = rng.sample(pool, k=rng.randint(1, min(3, len(pool))))
        if effect == "condition":
            declared = []
            for action in chosen:
                entry = sitemap.entry_for(action)
                declared.extend(spec.name for spec in entry.args)
            if declared:
                arg = rng.choice(declared)
                doc["condition"] = {
                    "function": f"check{i}",
                    "function_src": f"args.{arg} <= params.cap",
                    "params": [{"name": "cap", "type": "number"}],
                    "args": [arg],
                }
            else:
                doc["condition"] = {
                    "function": f"check{i}",
                    "function_src": "params.flag == true",
                    "params": [{"name": "flag", "type": "boolean"}],
                    "args": [],
                }
        policies.append(doc)
    return parse_policy_set({"domain": sitemap.domain, "policies": policies}, sitemap)


def gen_composite(rng: random.Random, policy_set):
    selections = []
    for policy in policy_set.policies:
        if rng.random() < 0.55:
            continue
        if policy.effect == "condition":
            params = {}
            for field in policy.condition.params_schema:
                params[field.name] = (
                    rng.choice([True, False]) if field.value_type == "boolean"
                    else rng.randint(0, 100)
                )
            selections.append((policy.name, params))
        else:
            selections.append((policy.name, None))
    allowlist = []
    if rng.random() < 0.5:
        allowlist.append(f"https://cdn{rng.randint(0, 3)}.ext/*")
    return assemble_composite(policy_set, selections, allowlist)


def gen_probes(rng: random.Random, sitemap, composite, count: int = 50):
    probes = []
    host_pool = [f"www.{sitemap.domain}", sitemap.domain, "elsewhere.example",
                 "cdn0.ext", "cdn1.ext"]
    entries = list(sitemap.entries)
    for _ in range(count):
        roll = rng.random()
        if entries and roll < 0.6:
            entry = rng.choice(entries)
            url = entry.matcher.url_pattern.replace("*", rng.choice(["", "x", "42/y"]))
            method = entry.matcher.method if rng.random() < 0.8 else rng.choice(METHODS)
            if rng.random() < 0.3:
                url += "?ref=nav"
            body = b""
            headers = {}
            if entry.matcher.body_matchers and rng.random() < 0.9:
                matcher = entry.matcher.body_matchers[0]
                case = rng.random()
                if case < 0.5:
                    body = json.dumps({"op": matcher.equals}).encode()
                    headers["Content-Type"] = "application/json"
                elif case < 0.75:
                    body = json.dumps({"op": "nope"}).encode()
                    headers["Content-Type"] = "application/json"
                else:
                    body = b"\x00{garbled"
                    headers["Content-Type"] = "application/json"
            probes.append(HttpRequestView(method=method, url=url,
                                          headers=headers, body=body))
        elif roll < 0.85:
            host = rng.choice(host_pool)
            url = f"https://{host}/{rng.choice(['', 'unmapped/page', 'api/zz'])}"
            probes.append(HttpRequestView(method=rng.choice(METHODS), url=url))
        else:
            url = f"https://{rng.choice(host_pool)}/form/submit"
            probes.append(HttpRequestView(
                method="POST", url=url, body=b"not json at all",
                headers={"Content-Type": "application/json"},
            ))
    return probes


def gen_instance(rng: random.Random):
    sitemap = gen_sitemap(rng)
    policy_set = gen_policy_set(rng, sitemap)
    composite = gen_composite(rng, policy_set)
    table = compile_table(sitemap, policy_set, composite)
    return sitemap, policy_set, composite, table


def assert_instance_agrees(rng: random.Random, probes_per_instance: int = 50) -> int:
    sitemap, policy_set, composite, table = gen_instance(rng)
    probes = gen_probes(rng, sitemap, composite, probes_per_instance)
    mismatches = 0
    for req in probes:
        fresh = HttpRequestView(method=req.method, url=req.url,
                                headers=dict(req.headers), body=req.body)
        want = naive_route(sitemap, policy_set, composite, fresh)
        got = normalize_route(table.lookup(req))
        if want != got:
            mismatches += 1
            raise AssertionError(
                f"divergence on {req.method} {req.url}: table={got} naive={want}",
            )
    return len(probes)
