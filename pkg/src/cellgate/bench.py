"""Benchmark harness for the selection pipeline.

Measures three metric families over a labeled task dataset: domain
prediction accuracy (bucketed by how many domains a task truly needs),
policy selection accuracy with overpermissive/restrictive rates per task
category, and argument extraction accuracy over the tasks that require
arguments. The two prediction stages are scored independently: policy
selection always runs against the ground-truth domain's policy set, so a
domain miss does not contaminate the selection metrics.

Reports are deterministic given a stub provider (no timestamps), which
makes CI comparisons byte-for-byte.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal

from .errors import ProviderError, SchemaError, SelectionError
from .policy import PolicySet
from .selector import TaskSpec, predict_domains, select_policies

CATEGORIES = ("retail", "travel", "version_control", "multi_domain", "zero_domain")


@dataclass(frozen=True)
class BenchTask:
    id: str
    text: str
    domains: tuple[str, ...]
    policies: dict[str, tuple[str, ...]]   # domain -> required policy names
    args: dict[str, dict]                  # policy name -> required params
    category: str

    def requires_args(self) -> bool:
        return bool(self.args)


def parse_dataset(data) -> list[BenchTask]:
    """Parse a JSON-lines dataset of labeled tasks."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if isinstance(data, str):
        lines = [line for line in data.splitlines() if line.strip()]
    else:
        lines = list(data)
    tasks: list[BenchTask] = []
    seen: set[str] = set()
    for i, line in enumerate(lines):
        doc = json.loads(line, parse_float=Decimal) if isinstance(line, str) else line
        where = f"task line {i + 1}"
        for key in ("id", "text", "domains", "policies", "args", "category"):
            if key not in doc:
                raise SchemaError(f"{where}: missing field {key!r}")
        if doc["category"] not in CATEGORIES:
            raise SchemaError(f"{where}: unknown category {doc['category']!r}")
        if doc["id"] in seen:
            raise SchemaError(f"{where}: duplicate id {doc['id']!r}")
        seen.add(doc["id"])
        domains = tuple(doc["domains"])
        if doc["category"] == "zero_domain" and domains:
            raise SchemaError(f"{where}: zero_domain tasks must have no domains")
        policies = {d: tuple(names) for d, names in doc["policies"].items()}
        extra_domains = set(policies) - set(domains)
        if extra_domains:
            raise SchemaError(f"{where}: policies listed for unlabeled domains {sorted(extra_domains)}")
        tasks.append(BenchTask(
            id=doc["id"], text=doc["text"], domains=domains,
            policies=policies, args=dict(doc["args"]), category=doc["category"],
        ))
    return tasks


def load_dataset(path: str) -> list[BenchTask]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dataset(fh.read())


def echo_fixtures(tasks: list[BenchTask]) -> dict:
    """Stub fixture document that reproduces the ground truth exactly."""
    out: dict = {"tasks": {}}
    for task in tasks:
        policies = {}
        for domain, names in task.policies.items():
            entries = []
            for name in names:
                entry: dict = {"name": name}
                if name in task.args:
                    entry["params"] = {
                        k: (float(v) if isinstance(v, Decimal) and v != int(v)
                            else int(v) if isinstance(v, Decimal) else v)
                        for k, v in task.args[name].items()
                    }
                entries.append(entry)
            policies[domain] = entries
        out["tasks"][task.id] = {"domains": list(task.domains), "policies": policies}
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class TaskResult:
    task: BenchTask
    predicted_domains: list[str] | None = None
    selected: dict[str, list] = field(default_factory=dict)   # domain -> selections
    extra: dict[str, list[str]] = field(default_factory=dict)
    missing: dict[str, list[str]] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    @property
    def domain_correct(self) -> bool:
        if self.predicted_domains is None:
            return False
        return set(self.predicted_domains) == set(self.task.domains)

    @property
    def policy_evaluated(self) -> bool:
        return bool(self.task.domains)

    @property
    def overpermissive(self) -> bool:
        return any(self.extra.values())

    @property
    def restrictive(self) -> bool:
        return any(self.missing.values())

    @property
    def policy_correct(self) -> bool:
        if not self.policy_evaluated:
            return True
        if self.errors and not self.selected:
            return False
        if set(self.selected) != set(self.task.policies):
            return False
        return not self.overpermissive and not self.restrictive

    @property
    def args_correct(self) -> bool:
        if not self.task.requires_args():
            return True
        chosen = {
            sel.name: sel.params or {}
            for selections in self.selected.values()
            for sel in selections
        }
        for policy_name, truth in self.task.args.items():
            got = chosen.get(policy_name)
            if got is None:
                return False
            if _canonical_params(got) != _canonical_params(truth):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "id": self.task.id,
            "category": self.task.category,
            "truth_domains": sorted(self.task.domains),
            "predicted_domains": sorted(self.predicted_domains) if self.predicted_domains is not None else None,
            "domain_correct": self.domain_correct,
            "selected": {
                d: [s.to_dict() for s in sels] for d, sels in sorted(self.selected.items())
            },
            "extra": {d: sorted(v) for d, v in sorted(self.extra.items()) if v},
            "missing": {d: sorted(v) for d, v in sorted(self.missing.items()) if v},
            "policy_correct": self.policy_correct,
            "overpermissive": self.overpermissive,
            "restrictive": self.restrictive,
            "args_required": self.task.requires_args(),
            "args_correct": self.args_correct if self.task.requires_args() else None,
            "errors": list(self.errors),
        }


def _canonical_params(params: dict) -> dict:
    out = {}
    for key, value in params.items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = Decimal(str(value))
        if isinstance(value, Decimal):
            value = value.quantize(Decimal("0.01"))
        out[key] = value
    return out


def _evaluate_task(task: BenchTask, provider, policy_sets: dict[str, PolicySet],
                   knowledge: dict[str, str]) -> TaskResult:
    result = TaskResult(task=task)
    spec = TaskSpec(text=task.text, id=task.id)
    try:
        result.predicted_domains = predict_domains(spec, provider)
    except (ProviderError, SelectionError) as exc:
        result.errors.append(f"domain prediction: {exc}")
    for domain in task.domains:
        policy_set = policy_sets.get(domain)
        if policy_set is None:
            result.errors.append(f"{domain}: no policy set supplied")
            result.missing[domain] = list(task.policies.get(domain, ()))
            continue
        try:
            selections = select_policies(
                spec, domain, policy_set, knowledge.get(domain, ""), provider,
            )
        except (ProviderError, SelectionError) as exc:
            result.errors.append(f"{domain}: {exc}")
            result.missing[domain] = list(task.policies.get(domain, ()))
            continue
        result.selected[domain] = selections
        predicted_names = {sel.name for sel in selections}
        truth_names = set(task.policies.get(domain, ()))
        result.extra[domain] = sorted(predicted_names - truth_names)
        result.missing[domain] = sorted(truth_names - predicted_names)
    return result


@dataclass
class BenchReport:
    results: list[TaskResult]

    def domain_buckets(self) -> dict[str, dict]:
        buckets: dict[str, dict] = {}
        for result in self.results:
            bucket = str(min(len(result.task.domains), 3))
            slot = buckets.setdefault(bucket, {"correct": 0, "total": 0})
            slot["total"] += 1
            slot["correct"] += int(result.domain_correct)
        for slot in buckets.values():
            slot["accuracy"] = slot["correct"] / slot["total"]
        return dict(sorted(buckets.items()))

    def policy_metrics(self) -> dict[str, dict]:
        metrics: dict[str, dict] = {}
        evaluated = [r for r in self.results if r.policy_evaluated]
        for scope, rows in [("overall", evaluated)] + [
            (cat, [r for r in evaluated if r.task.category == cat])
            for cat in CATEGORIES
        ]:
            if not rows:
                continue
            total = len(rows)
            metrics[scope] = {
                "total": total,
                "correct": sum(r.policy_correct for r in rows),
                "accuracy": sum(r.policy_correct for r in rows) / total,
                "overpermissive_rate": sum(r.overpermissive for r in rows) / total,
                "restrictive_rate": sum(r.restrictive for r in rows) / total,
            }
        return metrics

    def args_metrics(self) -> dict:
        rows = [r for r in self.results if r.task.requires_args()]
        if not rows:
            return {"total": 0, "correct": 0, "accuracy": None}
        correct = sum(r.args_correct for r in rows)
        return {"total": len(rows), "correct": correct, "accuracy": correct / len(rows)}

    def to_dict(self) -> dict:
        return {
            "tasks": len(self.results),
            "domain_accuracy": self.domain_buckets(),
            "policy_selection": self.policy_metrics(),
            "argument_extraction": self.args_metrics(),
            "per_task": [r.to_dict() for r in sorted(self.results, key=lambda r: r.task.id)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)


def _json_default(value):
    if isinstance(value, Decimal):
        return int(value) if value == int(value) else float(value)
    raise TypeError(f"not JSON serializable: {value!r}")


def run_bench(tasks: list[BenchTask], provider, policy_sets: dict[str, PolicySet],
              knowledge: dict[str, str] | None = None, parallelism: int = 1) -> BenchReport:
    """Evaluate every task; per-task provider failures score as incorrect."""
    knowledge = knowledge or {}
    if parallelism <= 1:
        results = [_evaluate_task(t, provider, policy_sets, knowledge) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(
                lambda t: _evaluate_task(t, provider, policy_sets, knowledge), tasks,
            ))
    return BenchReport(results=results)


def classify_failures(report: BenchReport) -> list[dict]:
    """Tag each imperfect selection mechanically.

    Extra-only selections are over-permissive, missing-only are
    over-restrictive. Tasks with both at once are flagged as candidates for
    manual object-confusion review; that label is never auto-asserted.
    """
    tagged: list[dict] = []
    for result in report.results:
        if not result.policy_evaluated or result.policy_correct:
            continue
        tags: list[str] = []
        if result.overpermissive:
            tags.append("over_permissive")
        if result.restrictive:
            tags.append("over_restrictive")
        tagged.append({
            "id": result.task.id,
            "tags": tags,
            "extra": {d: v for d, v in result.extra.items() if v},
            "missing": {d: v for d, v in result.missing.items() if v},
            "object_confusion_candidate": result.overpermissive and result.restrictive,
            "errors": list(result.errors),
        })
    return tagged


def format_report(report: BenchReport) -> str:
    """Human-readable summary table."""
    lines = ["== domain prediction =="]
    for bucket, slot in report.domain_buckets().items():
        label = f"{bucket}+" if bucket == "3" else bucket
        lines.append(
            f"  {label} domains: {slot['accuracy']:6.1%} ({slot['correct']}/{slot['total']})"
        )
    lines.append("== policy selection ==")
    for scope, m in report.policy_metrics().items():
        lines.append(
            f"  {scope:16s} acc {m['accuracy']:6.1%} ({m['correct']}/{m['total']})"
            f"  overpermissive {m['overpermissive_rate']:6.1%}"
            f"  restrictive {m['restrictive_rate']:6.1%}"
        )
    args = report.args_metrics()
    lines.append("== argument extraction ==")
    if args["total"]:
        lines.append(f"  acc {args['accuracy']:6.1%} ({args['correct']}/{args['total']})")
    else:
        lines.append("  (no tasks require arguments)")
    return "\n".join(lines)
