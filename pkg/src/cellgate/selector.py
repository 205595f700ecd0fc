"""Task-driven policy selection: domains, least-privileged policies, params.

Selection runs over trusted context only. Prompts are built exclusively
from the user's task text, policy names, effects, descriptions, parameter
schemas, and optional developer-shipped domain knowledge. Sitemap matchers,
condition program sources, and anything retrieved from web pages never
enter a prompt, so prompt injection in page content cannot steer the
selection.

Providers are pluggable: a remote chat-completions endpoint for real runs,
or a deterministic fixture stub for hermetic tests and benchmarks. Either
way the provider's raw output passes the same strict schema validation,
with one error-corrected retry before the task fails closed.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal

import requests

from .errors import (
    FetchError,
    ProviderError,
    SelectionError,
    ValidationError,
)
from .policy import CompositePolicy, PolicySet, Selection, assemble_composite, parse_policy_set
from .sitemap import _DOMAIN_RE, Sitemap, parse_sitemap

PROMPT_TEMPLATE_VERSION = "v1"

_DOMAIN_PROMPT = """\
You assign web domains for a browser-agent task. [template {version}]

Task: {task}

Reply with JSON only, shaped exactly like {{"domains": ["example.com"]}}.
List the registrable domain of every web application the task explicitly
names or unambiguously implies. Do not guess domains from product names or
brands. If the task never indicates which web application to use, reply
{{"domains": []}}.
"""

_SELECT_PROMPT = """\
You select the least-privileged set of pre-defined policies a browser agent
needs to complete a task on one web application. [template {version}]

Domain: {domain}
Task: {task}

Available policies:
{digest}
{knowledge}
Reply with JSON only, shaped exactly like
{{"policies": [{{"name": "policy_name", "params": {{"paramName": 1}}}}]}}.
Select every policy the task requires and nothing more. Policies whose
entry above lists params require a "params" object with a value for each
parameter, extracted from the task; all other policies must omit "params".
"""

_RETRY_SUFFIX = """

Your previous reply was invalid: {error}
Reply again with JSON only, following the required shape exactly.
"""


@dataclass(frozen=True)
class TaskSpec:
    """A user task. Per the threat model the prompt itself is trusted."""

    text: str
    trusted: bool = True
    id: str | None = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("task text must be non-empty")

    def key(self) -> str:
        return self.id if self.id is not None else self.text


@dataclass
class Transcript:
    purpose: str  # domains | policies
    domain: str | None
    prompt: str
    response: str


@dataclass
class SelectionResult:
    task: TaskSpec
    domains: list[str] = field(default_factory=list)
    per_domain: dict[str, list[Selection]] = field(default_factory=dict)
    transcripts: list[Transcript] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def rejected(self) -> bool:
        return not self.domains


@dataclass(frozen=True)
class Bundle:
    """Everything a domain publishes for agent sandboxing."""

    sitemap: Sitemap
    policy_set: PolicySet
    knowledge: str = ""
    allowlist: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class RemoteProvider:
    """Chat-completions style JSON-over-HTTP endpoint.

    Configured via CELLGATE_PROVIDER_URL / _KEY / _MODEL unless explicit
    values are given.
    """

    def __init__(self, url: str | None = None, key: str | None = None,
                 model: str | None = None, timeout: float = 60.0):
        self.url = url or os.environ.get("CELLGATE_PROVIDER_URL", "")
        self.key = key or os.environ.get("CELLGATE_PROVIDER_KEY", "")
        self.model = model or os.environ.get("CELLGATE_PROVIDER_MODEL", "")
        self.timeout = timeout
        if not self.url:
            raise ProviderError("no provider endpoint configured (CELLGATE_PROVIDER_URL)")

    def complete(self, prompt: str, *, purpose: str, task: TaskSpec,
                 domain: str | None = None) -> str:
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        try:
            resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderError(f"provider request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"provider returned HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"provider response envelope malformed: {exc}") from exc


class StubProvider:
    """Deterministic provider backed by a fixture file.

    Fixture shape:
        {"tasks": {"<task id or text>": {
            "domains": [...],
            "policies": {"<domain>": [{"name": ..., "params": {...}}, ...]}}}}
    """

    def __init__(self, fixtures):
        if isinstance(fixtures, (str, bytes)):
            with open(fixtures, "r", encoding="utf-8") as fh:
                fixtures = json.load(fh)
        self.tasks = fixtures.get("tasks", {})

    def _entry(self, task: TaskSpec) -> dict:
        for key in (task.id, task.text):
            if key is not None and key in self.tasks:
                return self.tasks[key]
        raise ProviderError(f"no fixture for task {task.key()!r}")

    def complete(self, prompt: str, *, purpose: str, task: TaskSpec,
                 domain: str | None = None) -> str:
        entry = self._entry(task)
        if purpose == "domains":
            return json.dumps({"domains": entry.get("domains", [])})
        policies = entry.get("policies", {}).get(domain, [])
        return json.dumps({"policies": policies})


def provider_from_env() -> RemoteProvider:
    return RemoteProvider()


# ---------------------------------------------------------------------------
# Prompt construction (trusted context only)
# ---------------------------------------------------------------------------

def build_domain_prompt(task: TaskSpec) -> str:
    return _DOMAIN_PROMPT.format(version=PROMPT_TEMPLATE_VERSION, task=task.text)


def policy_digest(policy_set: PolicySet) -> str:
    """Render the selectable surface of a policy set.

    Only names, effects, descriptions, and parameter schemas appear here;
    HTTP matchers and condition sources are deliberately excluded so that
    nothing attacker-reachable can flow into a prompt.
    """
    lines = []
    for policy in policy_set.policies:
        line = f"- {policy.name} ({policy.effect}): {policy.description}"
        if policy.condition is not None and policy.condition.params_schema:
            schema = ", ".join(
                f"{p.name}: {p.value_type}" for p in policy.condition.params_schema
            )
            line += f" [params: {schema}]"
        lines.append(line)
    return "\n".join(lines) if lines else "(none)"


def build_select_prompt(task: TaskSpec, domain: str, policy_set: PolicySet,
                        knowledge: str = "") -> str:
    knowledge_block = ""
    if knowledge.strip():
        knowledge_block = f"\nDomain knowledge:\n{knowledge.strip()}\n"
    return _SELECT_PROMPT.format(
        version=PROMPT_TEMPLATE_VERSION,
        domain=domain,
        task=task.text,
        digest=policy_digest(policy_set),
        knowledge=knowledge_block,
    )


def _extract_json(text: str) -> dict:
    text = text.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\n?", "", text)
        text = re.sub(r"\n?```$", "", text.strip())
    try:
        doc = json.loads(text, parse_float=Decimal)
    except ValueError:
        start, end = text.find("{"), text.rfind("}")
        if start < 0 or end <= start:
            raise ValueError("no JSON object in provider output")
        doc = json.loads(text[start:end + 1], parse_float=Decimal)
    if not isinstance(doc, dict):
        raise ValueError("provider output is not a JSON object")
    return doc


# ---------------------------------------------------------------------------
# Prediction steps
# ---------------------------------------------------------------------------

def _ask(provider, prompt: str, *, purpose: str, task: TaskSpec,
         domain: str | None, validate, transcripts: list[Transcript] | None):
    """One provider call with a single error-corrected retry."""
    attempt_prompt = prompt
    last_error = None
    for _ in range(2):
        response = provider.complete(attempt_prompt, purpose=purpose, task=task, domain=domain)
        if transcripts is not None:
            transcripts.append(Transcript(purpose=purpose, domain=domain,
                                          prompt=attempt_prompt, response=response))
        try:
            return validate(response)
        except (ValueError, ValidationError) as exc:
            last_error = exc
            attempt_prompt = prompt + _RETRY_SUFFIX.format(error=exc)
    raise SelectionError(f"provider output failed validation: {last_error}")


def predict_domains(task: TaskSpec, provider, transcripts: list[Transcript] | None = None) -> list[str]:
    """Predict the web applications a task needs; empty means reject."""

    def validate(response: str) -> list[str]:
        doc = _extract_json(response)
        if set(doc) != {"domains"} or not isinstance(doc["domains"], list):
            raise ValueError('expected exactly {"domains": [...]}')
        domains: list[str] = []
        for item in doc["domains"]:
            if not isinstance(item, str):
                raise ValueError("domains must be strings")
            name = item.strip().lower()
            if name.startswith("www."):
                name = name[4:]
            if not _DOMAIN_RE.match(name):
                raise ValueError(f"not a registrable domain: {item!r}")
            if name not in domains:
                domains.append(name)
        return domains

    prompt = build_domain_prompt(task)
    return _ask(provider, prompt, purpose="domains", task=task, domain=None,
                validate=validate, transcripts=transcripts)


def select_policies(task: TaskSpec, domain: str, policy_set: PolicySet,
                    domain_knowledge: str = "", provider=None,
                    transcripts: list[Transcript] | None = None) -> list[Selection]:
    """Select the least-privileged policy subset, extracting params jointly."""

    def validate(response: str) -> list[Selection]:
        doc = _extract_json(response)
        if set(doc) != {"policies"} or not isinstance(doc["policies"], list):
            raise ValueError('expected exactly {"policies": [...]}')
        pairs = []
        for item in doc["policies"]:
            if not isinstance(item, dict) or "name" not in item:
                raise ValueError("each policy needs a name")
            extras = set(item) - {"name", "params"}
            if extras:
                raise ValueError(f"unknown selection fields {sorted(extras)}")
            params = item.get("params")
            if params is not None and not isinstance(params, dict):
                raise ValueError("params must be an object")
            pairs.append((item["name"], params))
        # Dry-run assembly performs name resolution and param type checks.
        composite = assemble_composite(policy_set, pairs, allowlist=())
        return list(composite.selected)

    prompt = build_select_prompt(task, domain, policy_set, domain_knowledge)
    return _ask(provider, prompt, purpose="policies", task=task, domain=domain,
                validate=validate, transcripts=transcripts)


# ---------------------------------------------------------------------------
# Bundle retrieval
# ---------------------------------------------------------------------------

WELL_KNOWN_SITEMAP = "/.well-known/agent-sitemap.json"
WELL_KNOWN_POLICIES = "/.well-known/agent-policies.json"
WELL_KNOWN_ALLOWLIST = "/.well-known/agent-allowlist.json"


def _read_local(bundle_dir: str, domain: str):
    base = os.path.join(bundle_dir, domain)
    sitemap_path = os.path.join(base, "sitemap.json")
    policies_path = os.path.join(base, "policies.json")
    if not os.path.exists(sitemap_path) or not os.path.exists(policies_path):
        raise FetchError(f"no bundle for {domain!r} under {bundle_dir!r}")
    with open(sitemap_path, "rb") as fh:
        sitemap_doc = fh.read()
    with open(policies_path, "rb") as fh:
        policies_doc = fh.read()
    knowledge = ""
    knowledge_path = os.path.join(base, "knowledge.txt")
    if os.path.exists(knowledge_path):
        with open(knowledge_path, "r", encoding="utf-8") as fh:
            knowledge = fh.read()
    allowlist: list[str] = []
    allowlist_path = os.path.join(base, "allowlist.json")
    if os.path.exists(allowlist_path):
        with open(allowlist_path, "r", encoding="utf-8") as fh:
            allowlist = json.load(fh)
    return sitemap_doc, policies_doc, knowledge, allowlist


def _read_hosted(domain: str, timeout: float):
    def get(path: str, required: bool):
        url = f"https://{domain}{path}"
        try:
            resp = requests.get(url, timeout=timeout)
        except requests.RequestException as exc:
            raise FetchError(f"fetching {url} failed: {exc}") from exc
        if resp.status_code != 200:
            if required:
                raise FetchError(f"{url} returned HTTP {resp.status_code}")
            return None
        return resp.content

    sitemap_doc = get(WELL_KNOWN_SITEMAP, required=True)
    policies_doc = get(WELL_KNOWN_POLICIES, required=True)
    allowlist_doc = get(WELL_KNOWN_ALLOWLIST, required=False)
    allowlist = json.loads(allowlist_doc) if allowlist_doc else []
    return sitemap_doc, policies_doc, "", allowlist


def fetch_bundle(domain: str, bundle_dir: str | None = None,
                 timeout: float = 30.0) -> Bundle:
    """Load and validate a domain's sitemap and policy set.

    A bundle directory overrides network fetch for hermetic runs; otherwise
    the documents come from the domain's well-known URLs.
    """
    if bundle_dir:
        sitemap_doc, policies_doc, knowledge, allowlist = _read_local(bundle_dir, domain)
    else:
        sitemap_doc, policies_doc, knowledge, allowlist = _read_hosted(domain, timeout)
    sitemap = parse_sitemap(sitemap_doc)
    policy_set = parse_policy_set(policies_doc, sitemap)
    if sitemap.domain != domain:
        raise FetchError(f"bundle for {domain!r} declares domain {sitemap.domain!r}")
    if not isinstance(allowlist, list) or not all(isinstance(p, str) for p in allowlist):
        raise FetchError(f"allowlist for {domain!r} must be a list of patterns")
    return Bundle(sitemap=sitemap, policy_set=policy_set, knowledge=knowledge,
                  allowlist=tuple(allowlist))


# ---------------------------------------------------------------------------
# Orchestration and confirmation
# ---------------------------------------------------------------------------

def run_selection(task: TaskSpec, provider,
                  fetch=fetch_bundle) -> tuple[SelectionResult, dict[str, Bundle]]:
    """Full two-stage selection. Returns the result plus fetched bundles.

    ``fetch`` maps a domain to its Bundle (bind a bundle directory with
    functools.partial for hermetic runs). Domains whose bundle cannot be
    fetched are excluded and noted; a task with no predicted domains is
    rejected outright (nothing gets loaded).
    """
    result = SelectionResult(task=task)
    try:
        result.domains = predict_domains(task, provider, result.transcripts)
    except ProviderError as exc:
        result.notes.append(f"domain prediction failed: {exc}; task rejected")
        return result, {}
    if not result.domains:
        result.notes.append("task names no web application; rejected without permissions")
        return result, {}
    bundles: dict[str, Bundle] = {}
    kept: list[str] = []
    for domain in result.domains:
        try:
            bundle = fetch(domain)
        except (FetchError, ValidationError) as exc:
            result.notes.append(f"{domain}: bundle unavailable ({exc}); domain excluded")
            continue
        try:
            result.per_domain[domain] = select_policies(
                task, domain, bundle.policy_set, bundle.knowledge,
                provider, result.transcripts,
            )
        except (SelectionError, ProviderError) as exc:
            result.notes.append(f"{domain}: policy selection failed ({exc}); domain excluded")
            continue
        bundles[domain] = bundle
        kept.append(domain)
    result.domains = kept
    return result, bundles


def confirm(result: SelectionResult, bundles: dict[str, Bundle], *,
            assume_yes: bool = False, input_fn=input, print_fn=print) -> dict[str, CompositePolicy]:
    """Interactive review of the proposed selection.

    The user can toggle policies and edit params before approval; the
    approved selections are assembled with the developer allowlist. Returns
    {} on abort (nothing is loaded).
    """
    working: dict[str, list[Selection]] = {
        domain: list(selections) for domain, selections in result.per_domain.items()
    }
    enabled: dict[str, list[bool]] = {
        domain: [True] * len(sel) for domain, sel in working.items()
    }

    def render():
        print_fn(f"Task: {result.task.text}")
        for note in result.notes:
            print_fn(f"  note: {note}")
        index = 1
        for domain in result.domains:
            print_fn(f"\n{domain}:")
            for i, sel in enumerate(working[domain]):
                policy = bundles[domain].policy_set.get(sel.name)
                mark = "x" if enabled[domain][i] else " "
                line = f"  [{mark}] {index}. {sel.name}: {policy.description}"
                if sel.params:
                    rendered = ", ".join(f"{k}={v}" for k, v in sel.params.items())
                    line += f" ({rendered})"
                print_fn(line)
                index += 1

    def locate(number: int):
        index = 1
        for domain in result.domains:
            for i in range(len(working[domain])):
                if index == number:
                    return domain, i
                index += 1
        return None, None

    if not assume_yes:
        render()
        print_fn("\ncommands: approve | abort | toggle N | set N param=value")
        while True:
            try:
                command = input_fn("> ").strip()
            except EOFError:
                return {}
            if command == "approve":
                break
            if command == "abort":
                return {}
            if command.startswith("toggle "):
                try:
                    domain, i = locate(int(command.split()[1]))
                except ValueError:
                    print_fn("usage: toggle N")
                    continue
                if domain is None:
                    print_fn("no such policy number")
                    continue
                enabled[domain][i] = not enabled[domain][i]
                render()
            elif command.startswith("set "):
                try:
                    _, number, assignment = command.split(None, 2)
                    key, value = assignment.split("=", 1)
                    domain, i = locate(int(number))
                except ValueError:
                    print_fn("usage: set N param=value")
                    continue
                if domain is None:
                    print_fn("no such policy number")
                    continue
                sel = working[domain][i]
                if sel.params is None or key not in sel.params:
                    print_fn(f"{sel.name} has no param {key!r}")
                    continue
                new_params = dict(sel.params)
                new_params[key] = _parse_param_value(value)
                working[domain][i] = Selection(name=sel.name, params=new_params)
                render()
            else:
                print_fn("commands: approve | abort | toggle N | set N param=value")

    composites: dict[str, CompositePolicy] = {}
    for domain in result.domains:
        pairs = [
            (sel.name, sel.params)
            for i, sel in enumerate(working[domain])
            if enabled[domain][i]
        ]
        composites[domain] = assemble_composite(
            bundles[domain].policy_set, pairs, bundles[domain].allowlist,
        )
    return composites


def _parse_param_value(text: str):
    text = text.strip()
    try:
        return json.loads(text, parse_float=Decimal)
    except ValueError:
        return text
