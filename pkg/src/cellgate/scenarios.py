"""Attack-replay harness: scripted HTTP traces driven through a live proxy.

A scenario file bundles the domain documents to load, the enforcement
mode, and an ordered list of steps: HTTP requests with expected verdicts,
interleaved with context-feed reports that simulate the in-page producer.
Steps are replayed sequentially (the agent model is single-threaded) and
each observation is compared against the step's expectation.

The hermetic runner spins up a recording mock upstream plus a proxy with
TLS interception and host overrides, so attack case studies run without
touching real sites.
"""

from __future__ import annotations

import json
import os
import ssl
import threading
from dataclasses import dataclass, field
from http.client import HTTPConnection, HTTPSConnection
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from .errors import SchemaError
from .proxy import ProxyConfig, ProxyServer
from .tls import CertificateAuthority


# ---------------------------------------------------------------------------
# Mock upstream
# ---------------------------------------------------------------------------

class _UpstreamHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    def _serve(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        arrival = {
            "method": self.command,
            "host": self.headers.get("Host", ""),
            "path": self.path,
            "body": body.decode("utf-8", "replace"),
        }
        self.server.arrivals.append(arrival)
        payload = json.dumps({"echo": arrival}).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    do_GET = do_POST = do_PUT = do_PATCH = do_DELETE = _serve


class MockUpstream:
    """Recording echo server; optionally speaks TLS for opaque tunnels."""

    def __init__(self, tls_ca: CertificateAuthority | None = None):
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), _UpstreamHandler)
        self._httpd.daemon_threads = True
        self._httpd.arrivals = []
        self.tls = tls_ca is not None
        if tls_ca is not None:
            base = tls_ca.server_context("localhost")

            def pick_cert(sock, server_name, _ctx):
                if server_name:
                    sock.context = tls_ca.server_context(server_name)

            base.sni_callback = pick_cert
            self._httpd.socket = base.wrap_socket(self._httpd.socket, server_side=True)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    def start(self) -> "MockUpstream":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def address(self) -> str:
        scheme = "https" if self.tls else "http"
        return f"{scheme}://127.0.0.1:{self.port}"

    @property
    def arrivals(self) -> list[dict]:
        return list(self._httpd.arrivals)


# ---------------------------------------------------------------------------
# Scenario documents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Step:
    kind: str  # request | ctx_report
    payload: dict
    expect: dict


@dataclass(frozen=True)
class Scenario:
    name: str
    mode: str
    domains: tuple[tuple[dict, dict, dict], ...]
    steps: tuple[Step, ...]
    session_id: str = "default"


def _load_ref(doc: dict, key: str, base_dir: str):
    if key in doc:
        return doc[key]
    ref = doc.get(f"{key}_file")
    if ref is None:
        raise SchemaError(f"scenario domain needs {key!r} or {key}_file")
    with open(os.path.join(base_dir, ref), "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_scenario(source) -> Scenario:
    """Load a scenario from a path or an already-parsed document."""
    base_dir = "."
    if isinstance(source, (str, os.PathLike)):
        base_dir = os.path.dirname(os.path.abspath(source))
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = source
    if not isinstance(doc, dict):
        raise SchemaError("scenario must be a JSON object")
    name = doc.get("name", "unnamed")
    mode = doc.get("mode", "strict")
    if mode not in ("strict", "observe"):
        raise SchemaError(f"bad scenario mode {mode!r}")
    domains = []
    for entry in doc.get("domains", []):
        domains.append((
            _load_ref(entry, "sitemap", base_dir),
            _load_ref(entry, "policies", base_dir),
            _load_ref(entry, "composite", base_dir),
        ))
    steps = []
    for i, raw in enumerate(doc.get("steps", [])):
        kind = raw.get("kind")
        if kind not in ("request", "ctx_report"):
            raise SchemaError(f"steps[{i}]: unknown kind {kind!r}")
        expect = raw.get("expect", {})
        payload = {k: v for k, v in raw.items() if k not in ("kind", "expect")}
        if kind == "request":
            for required in ("method", "url"):
                if required not in payload:
                    raise SchemaError(f"steps[{i}]: request step needs {required!r}")
        else:
            for required in ("arg_name", "value", "seq"):
                if required not in payload:
                    raise SchemaError(f"steps[{i}]: ctx_report step needs {required!r}")
        steps.append(Step(kind=kind, payload=payload, expect=expect))
    return Scenario(
        name=name, mode=mode, domains=tuple(domains), steps=tuple(steps),
        session_id=doc.get("session_id", "default"),
    )


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    index: int
    kind: str
    ok: bool
    expected: dict
    observed: dict
    detail: str = ""


@dataclass
class ReplayRun:
    scenario: str
    results: list[StepResult] = field(default_factory=list)
    arrivals: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)


class _ReplayClient:
    def __init__(self, proxy_host: str, proxy_port: int, *, ca_pem: bytes | None = None,
                 token: str | None = None, session_id: str = "default", timeout: float = 10.0):
        self.proxy_host = proxy_host
        self.proxy_port = proxy_port
        self.token = token
        self.session_id = session_id
        self.timeout = timeout
        self.tls_context = None
        if ca_pem is not None:
            self.tls_context = ssl.create_default_context(
                cadata=ca_pem.decode("utf-8") if isinstance(ca_pem, bytes) else ca_pem
            )

    def _control(self, method: str, path: str, payload=None) -> tuple[int, object]:
        conn = HTTPConnection(self.proxy_host, self.proxy_port, timeout=self.timeout)
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["X-Cellgate-Token"] = self.token
        body = json.dumps(payload).encode("utf-8") if payload is not None else None
        conn.request(method, path, body=body, headers=headers)
        resp = conn.getresponse()
        data = resp.read()
        conn.close()
        try:
            return resp.status, json.loads(data)
        except ValueError:
            return resp.status, None

    def load_session(self, scenario: Scenario) -> tuple[int, object]:
        return self._control("POST", "/ctl/session", {
            "session_id": scenario.session_id,
            "domains": [
                {"sitemap": s, "policies": p, "composite": c}
                for s, p, c in scenario.domains
            ],
        })

    def records(self, session_id: str) -> list[dict]:
        _, doc = self._control("GET", f"/ctl/records?session_id={session_id}")
        return doc if isinstance(doc, list) else []

    def ctx_report(self, payload: dict) -> tuple[int, object]:
        payload = dict(payload)
        payload.setdefault("session_id", self.session_id)
        return self._control("POST", "/ctx/report", payload)

    def request(self, method: str, url: str, headers: dict | None = None,
                body: bytes | None = None) -> tuple[int | None, bytes, str]:
        """Send one request through the proxy.

        Returns (status, body, transport_note); status None means the
        CONNECT tunnel was refused.
        """
        parts = urlsplit(url)
        headers = dict(headers or {})
        if body is not None:
            headers.setdefault("Content-Length", str(len(body)))
        if parts.scheme == "https":
            if self.tls_context is None:
                raise RuntimeError("replaying https steps requires the proxy CA certificate")
            conn = HTTPSConnection(self.proxy_host, self.proxy_port,
                                   timeout=self.timeout, context=self.tls_context)
            conn.set_tunnel(parts.hostname, parts.port or 443)
            target = parts.path or "/"
            if parts.query:
                target += f"?{parts.query}"
        else:
            conn = HTTPConnection(self.proxy_host, self.proxy_port, timeout=self.timeout)
            target = url
        headers.setdefault("Host", parts.netloc)
        try:
            conn.request(method, target, body=body, headers=headers)
            resp = conn.getresponse()
            data = resp.read()
            status = resp.status
            note = ""
        except OSError as exc:
            status, data, note = None, b"", f"tunnel refused: {exc}"
        finally:
            conn.close()
        return status, data, note


def _step_body(payload: dict) -> tuple[bytes | None, dict]:
    headers = dict(payload.get("headers", {}))
    if "json" in payload:
        headers.setdefault("Content-Type", "application/json")
        return json.dumps(payload["json"]).encode("utf-8"), headers
    if "form" in payload:
        headers.setdefault("Content-Type", "application/x-www-form-urlencoded")
        from urllib.parse import urlencode
        return urlencode(payload["form"], doseq=True).encode("utf-8"), headers
    if "body" in payload:
        return payload["body"].encode("utf-8"), headers
    return None, headers


def replay(scenario: Scenario, proxy_host: str, proxy_port: int, *,
           ca_pem: bytes | None = None, token: str | None = None,
           load: bool = True) -> ReplayRun:
    """Replay every step against a running proxy; compare observations."""
    client = _ReplayClient(proxy_host, proxy_port, ca_pem=ca_pem, token=token,
                           session_id=scenario.session_id)
    run = ReplayRun(scenario=scenario.name)
    if load and scenario.domains:
        status, doc = client.load_session(scenario)
        if status != 200:
            run.results.append(StepResult(
                index=-1, kind="load", ok=False, expected={"status": 200},
                observed={"status": status, "response": doc}, detail="session load failed",
            ))
            return run
    seen_records = len(client.records(scenario.session_id))
    for index, step in enumerate(scenario.steps):
        if step.kind == "ctx_report":
            status, doc = client.ctx_report(step.payload)
            accepted = doc.get("accepted") if isinstance(doc, dict) else None
            observed = {"accepted": accepted, "status": status}
            expected = {"accepted": True, "status": 200, **step.expect}
            ok = all(observed.get(k) == v for k, v in expected.items())
            run.results.append(StepResult(index=index, kind=step.kind, ok=ok,
                                          expected=expected, observed=observed))
            continue
        body, headers = _step_body(step.payload)
        status, data, note = client.request(
            step.payload["method"], step.payload["url"], headers, body,
        )
        records = client.records(scenario.session_id)
        new_records = records[seen_records:]
        seen_records = len(records)
        observed: dict = {"status": status}
        if note:
            observed["transport"] = note
        if new_records:
            last = new_records[-1]
            observed["route"] = last.get("route")
            observed["verdict"] = last.get("verdict")
            observed["semantic_action"] = last.get("semantic_action")
            observed["reason"] = last.get("reason")
        elif status is None:
            observed["route"] = "refused"
            observed["verdict"] = "deny"
        ok = True
        detail = ""
        for key, wanted in step.expect.items():
            if observed.get(key) != wanted:
                ok = False
                detail = f"{key}: expected {wanted!r}, observed {observed.get(key)!r}"
                break
        run.results.append(StepResult(
            index=index, kind=step.kind, ok=ok,
            expected=dict(step.expect), observed=observed, detail=detail,
        ))
    return run


def run_hermetic(scenario: Scenario, *, lockout: bool = False) -> ReplayRun:
    """Run a scenario end to end against a local mock upstream.

    Every host mentioned by the scenario resolves to the mock upstream; the
    proxy intercepts TLS with a freshly generated CA that the replay client
    trusts. Arrivals at the upstream are returned for blast-radius checks.
    """
    ca = CertificateAuthority.generate()
    upstream_tls = MockUpstream(tls_ca=ca).start()
    upstream_plain = MockUpstream().start()
    hosts: set[str] = set()
    for step in scenario.steps:
        if step.kind == "request":
            host = (urlsplit(step.payload["url"]).hostname or "").lower()
            if host:
                hosts.add(host)
    upstream_map: dict[str, str] = {}
    for host in hosts:
        # Affiliated hosts are MITM'd and re-originated in plaintext;
        # unaffiliated hosts in observe mode get an opaque tunnel, which the
        # client speaks TLS through, so those need the TLS upstream.
        upstream_map[host] = f"https://127.0.0.1:{upstream_tls.port}"
    affiliated = set()
    for sitemap_doc, _, composite_doc in scenario.domains:
        domain = sitemap_doc.get("domain", "")
        for host in hosts:
            if host == domain or host.endswith("." + domain):
                affiliated.add(host)
        for pattern in composite_doc.get("allowlist", []):
            host = urlsplit(pattern.replace("*", "x")).hostname
            if host:
                affiliated.add(host.lower())
    for host in affiliated & hosts:
        upstream_map[host] = f"http://127.0.0.1:{upstream_plain.port}"
    token = "scenario-token"
    config = ProxyConfig(
        mode=scenario.mode, ca=ca, token=token,
        upstream_map=upstream_map, lockout=lockout,
        default_session=scenario.session_id,
    )
    proxy = ProxyServer(config).start()
    try:
        run = replay(scenario, "127.0.0.1", proxy.port, ca_pem=ca.cert_pem(), token=token)
        run.arrivals = upstream_plain.arrivals + upstream_tls.arrivals
        return run
    finally:
        proxy.stop()
        upstream_tls.stop()
        upstream_plain.stop()


def format_run(run: ReplayRun) -> str:
    lines = [f"scenario {run.scenario}: {'PASS' if run.ok else 'FAIL'}"]
    for result in run.results:
        mark = "ok " if result.ok else "FAIL"
        summary = ", ".join(f"{k}={v}" for k, v in result.observed.items() if v is not None)
        lines.append(f"  [{mark}] step {result.index} ({result.kind}): {summary}")
        if result.detail:
            lines.append(f"         {result.detail}")
    return "\n".join(lines)
