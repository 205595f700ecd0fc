"""Enforcing forward proxy: every agent request crosses the decision path.

The proxy terminates plaintext proxy requests directly and handles HTTPS
via CONNECT. With an interception CA loaded, tunnels to hosts that have a
loaded sitemap (or appear on an allowlist) are man-in-the-middled so each
inner request is decided individually; without a CA, such hosts cannot be
mediated and strict mode refuses them. Hosts affiliated with no loaded
session are refused in strict mode and tunneled opaquely in observe mode.

Decision outcomes are fail-closed: any error on a sitemap-matched request
(missing or ill-typed arguments, unparseable body, stale context) denies.
Upstream failures surface as 502, never as silent allows. One enforcement
record is appended per intercepted request.
"""

from __future__ import annotations

import base64
import http.client
import json
import logging
import select
import socket
import ssl
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from . import compiler
from .compiler import AuthTable, Decision, compile_table
from .conditions import Verdict, evaluate
from .context import ContextCache, ContextValue
from .errors import (
    MissingArgsError,
    SettleTimeout,
    StaleArgsError,
    UnknownArgError,
    ValidationError,
)
from .policy import CompositePolicy, PolicySet, parse_composite, parse_policy_set
from .request import HttpRequestView, coerce_value, walk_body_path
from .sitemap import Sitemap, SitemapEntry, parse_sitemap

log = logging.getLogger("cellgate.proxy")

_HOP_BY_HOP = {
    "connection", "proxy-connection", "keep-alive", "te", "trailers",
    "transfer-encoding", "upgrade", "proxy-authorization", "proxy-authenticate",
}

DEFAULT_UPSTREAM_TIMEOUT = 30.0


# ---------------------------------------------------------------------------
# Decision core
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Outcome:
    """What the decision path concluded for one request."""

    route: str                  # allowlisted | pass_through | matched | refused
    verdict: str                # allow | deny | deny_by_error
    semantic_action: str | None = None
    blocked_by: str = ""
    reason: str = ""

    @property
    def forward(self) -> bool:
        return self.verdict == "allow"


def extract_request_args(entry: SitemapEntry, req: HttpRequestView) -> dict:
    """Pull request-sourced argument values for a matched entry."""
    out: dict = {}
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
            out[spec.name] = coerce_value(raw, spec.value_type)
        except ValueError:
            continue
    return out


def decide(table: AuthTable, cache: ContextCache, req: HttpRequestView) -> Outcome:
    """Route a request through the table and run any condition programs."""
    rd = table.lookup(req)
    if rd.route == "allowlisted":
        return Outcome(route="allowlisted", verdict="allow")
    if rd.route == "pass_through":
        return Outcome(route="pass_through", verdict="allow")
    decision: Decision = rd.decision
    if decision.kind == compiler.ALLOW:
        return Outcome(
            route="matched", verdict="allow",
            semantic_action=rd.semantic_action, blocked_by=decision.source_policy,
        )
    if decision.kind == compiler.DENY:
        return Outcome(
            route="matched", verdict="deny",
            semantic_action=rd.semantic_action, blocked_by=decision.source_policy,
            reason=rd.note or f"denied by {decision.source_policy}",
        )
    required = decision.required_args()
    request_args = extract_request_args(rd.entry, req)
    dom_needed = [
        name for name in required
        if name not in request_args and name in cache.known_args()
    ]
    try:
        cache.check_freshness(req.session_id, dom_needed)
        resolved = cache.resolve_args(req.session_id, required, request_args)
    except (MissingArgsError, StaleArgsError, SettleTimeout) as exc:
        return Outcome(
            route="matched", verdict="deny_by_error",
            semantic_action=rd.semantic_action, blocked_by=decision.source_policy,
            reason=str(exc),
        )
    for binding in decision.conditions:
        verdict: Verdict = evaluate(binding.program, binding.params, resolved)
        if verdict.kind == "allow":
            continue
        return Outcome(
            route="matched",
            verdict=verdict.kind,
            semantic_action=rd.semantic_action,
            blocked_by=binding.policy_name,
            reason=verdict.reason or f"condition {binding.program.name} returned false",
        )
    return Outcome(
        route="matched", verdict="allow",
        semantic_action=rd.semantic_action, blocked_by=decision.source_policy,
    )


# ---------------------------------------------------------------------------
# Session state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainBundle:
    sitemap: Sitemap
    policy_set: PolicySet
    composite: CompositePolicy
    table: AuthTable


@dataclass(frozen=True)
class SessionTables:
    generation: int
    domains: tuple[DomainBundle, ...] = ()

    def bundle_for_host(self, host: str) -> DomainBundle | None:
        for bundle in self.domains:
            if bundle.sitemap.covers_host(host):
                return bundle
        return None

    def allowlisted(self, parts) -> bool:
        return any(b.table.allowlist_covers(parts) for b in self.domains)

    def allowlist_hosts(self) -> set[str]:
        hosts: set[str] = set()
        for bundle in self.domains:
            hosts |= bundle.table.allowlist_hosts()
        return hosts


def build_bundle(sitemap_doc, policy_doc, composite_doc) -> DomainBundle:
    """Validate one (sitemap, policy set, composite) triple and compile it."""
    sitemap = sitemap_doc if isinstance(sitemap_doc, Sitemap) else parse_sitemap(sitemap_doc)
    policy_set = (
        policy_doc if isinstance(policy_doc, PolicySet)
        else parse_policy_set(policy_doc, sitemap)
    )
    composite = (
        composite_doc if isinstance(composite_doc, CompositePolicy)
        else parse_composite(composite_doc)
    )
    table = compile_table(sitemap, policy_set, composite)
    return DomainBundle(sitemap=sitemap, policy_set=policy_set, composite=composite, table=table)


@dataclass(frozen=True)
class EnforcementRecord:
    timestamp: float
    session_id: str
    method: str
    url: str
    route: str
    semantic_action: str | None
    verdict: str
    reason: str
    latency_us: int

    def to_dict(self) -> dict:
        return {
            "ts": round(self.timestamp, 6),
            "session_id": self.session_id,
            "request": f"{self.method} {self.url[:256]}",
            "route": self.route,
            "semantic_action": self.semantic_action,
            "verdict": self.verdict,
            "reason": self.reason,
            "latency_us": self.latency_us,
        }


# ---------------------------------------------------------------------------
# Proxy server
# ---------------------------------------------------------------------------

@dataclass
class ProxyConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 0  # 0 picks a free port
    mode: str = "strict"  # strict | observe
    ca: object | None = None  # CertificateAuthority, or None for no interception
    token: str | None = None  # shared secret for /ctl and /ctx
    default_session: str = "default"
    upstream_map: dict[str, str] = field(default_factory=dict)  # host -> scheme://addr:port
    upstream_timeout: float = DEFAULT_UPSTREAM_TIMEOUT
    audit_log: str | None = None
    lockout: bool = False
    settle_timeout: float = 10.0
    max_records: int = 10000


class _ProxyHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class ProxyServer:
    def __init__(self, config: ProxyConfig):
        self.config = config
        self.cache = ContextCache(lockout=config.lockout, settle_timeout=config.settle_timeout)
        self._sessions: dict[str, SessionTables] = {}
        self._session_lock = threading.Lock()
        self._records: dict[str, deque] = {}
        self._records_lock = threading.Lock()
        self._audit_lock = threading.Lock()
        self._generation = 0
        self._httpd = _ProxyHTTPServer(
            (config.listen_host, config.listen_port), _Handler
        )
        self._httpd.proxy = self
        self._thread: threading.Thread | None = None

    # -- lifecycle -----------------------------------------------------------

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "ProxyServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        log.info("proxy listening on %s:%d (mode=%s, tls=%s)",
                 self.address[0], self.port, self.config.mode,
                 "intercept" if self.config.ca else "tunnel-only")
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def run_forever(self) -> None:
        try:
            self._httpd.serve_forever()
        finally:
            self._httpd.server_close()

    # -- sessions ------------------------------------------------------------

    def load_session(self, session_id: str, triples) -> SessionTables:
        """Validate and compile bundles, then swap them in atomically.

        A validation failure leaves the session's previous tables in place.
        """
        bundles = [
            triple if isinstance(triple, DomainBundle) else build_bundle(*triple)
            for triple in triples
        ]
        with self._session_lock:
            self._generation += 1
            tables = SessionTables(generation=self._generation, domains=tuple(bundles))
            self._sessions[session_id] = tables
        for bundle in bundles:
            self.cache.register_sitemap(bundle.sitemap)
        log.info("session %r loaded: %s", session_id,
                 ", ".join(b.sitemap.domain for b in bundles) or "(empty)")
        return tables

    def session_tables(self, session_id: str) -> SessionTables | None:
        with self._session_lock:
            return self._sessions.get(session_id)

    # -- records ---------------------------------------------------------------

    def record(self, rec: EnforcementRecord) -> None:
        with self._records_lock:
            q = self._records.get(rec.session_id)
            if q is None:
                q = deque(maxlen=self.config.max_records)
                self._records[rec.session_id] = q
            q.append(rec)
        if self.config.audit_log:
            line = json.dumps(rec.to_dict(), separators=(",", ":"))
            with self._audit_lock:
                with open(self.config.audit_log, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
        if rec.route == "allowlisted":
            log.debug("allowlisted %s %s", rec.method, rec.url[:128])
        elif rec.verdict != "allow":
            log.info("%s %s %s -> %s (%s)", rec.session_id, rec.method,
                     rec.url[:128], rec.verdict, rec.reason)

    def records(self, session_id: str) -> list[EnforcementRecord]:
        with self._records_lock:
            return list(self._records.get(session_id, ()))


def serve(config: ProxyConfig) -> ProxyServer:
    """Start a proxy in the background; caller owns stop()."""
    return ProxyServer(config).start()


# ---------------------------------------------------------------------------
# Request handler
# ---------------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    # written by CONNECT interception
    _mitm_host: str | None = None
    _mitm_session: str | None = None

    @property
    def proxy(self) -> ProxyServer:
        return self.server.proxy

    def log_message(self, fmt, *args):  # route through package logging
        log.debug("%s %s", self.client_address[0], fmt % args)

    # -- dispatch ------------------------------------------------------------

    def do_GET(self):
        self._dispatch()

    do_POST = do_PUT = do_PATCH = do_DELETE = do_HEAD = do_OPTIONS = do_GET

    def _dispatch(self):
        try:
            if self.path.startswith("http://") or self.path.startswith("https://"):
                self._handle_proxied(self.path)
            elif self._mitm_host:
                self._handle_proxied(f"https://{self._mitm_host}{self.path}")
            else:
                self._handle_local()
        except (BrokenPipeError, ConnectionResetError):
            self.close_connection = True
        except Exception:
            log.exception("request handling failed")
            try:
                self._send_json(500, {"error": "internal proxy error"})
            except OSError:
                self.close_connection = True

    # -- local control surface -------------------------------------------------

    def _authorized(self) -> bool:
        if self.client_address[0] not in ("127.0.0.1", "::1"):
            return False
        token = self.proxy.config.token
        if token is None:
            return True
        return self.headers.get("X-Cellgate-Token", "") == token

    def _handle_local(self):
        parts = urlsplit(self.path)
        path = parts.path
        if path == "/healthz":
            self._send_json(200, {"ok": True})
            return
        if not self._authorized():
            self._send_json(403, {"error": "forbidden"})
            return
        if path == "/ctl/session" and self.command == "POST":
            self._ctl_session()
        elif path == "/ctl/records" and self.command == "GET":
            params = dict(p.split("=", 1) for p in parts.query.split("&") if "=" in p)
            session = params.get("session_id", self.proxy.config.default_session)
            self._send_json(200, [r.to_dict() for r in self.proxy.records(session)])
        elif path == "/ctx/report" and self.command == "POST":
            self._ctx_report()
        elif path == "/ctx/settled" and self.command == "GET":
            params = dict(p.split("=", 1) for p in parts.query.split("&") if "=" in p)
            session = params.get("session_id", self.proxy.config.default_session)
            try:
                settled = self.proxy.cache.is_settled(session)
                self._send_json(200, {"settled": settled})
            except SettleTimeout as exc:
                self._send_json(200, {"settled": False, "timeout": True, "detail": str(exc)})
        else:
            self._send_json(404, {"error": "unknown endpoint"})

    def _ctl_session(self):
        try:
            doc = json.loads(self._read_body().decode("utf-8"))
            session_id = doc.get("session_id", self.proxy.config.default_session)
            triples = [
                (d["sitemap"], d["policies"], d["composite"])
                for d in doc.get("domains", [])
            ]
            tables = self.proxy.load_session(session_id, triples)
        except (ValidationError, ValueError, KeyError, TypeError) as exc:
            self._send_json(400, {"error": str(exc)})
            return
        self._send_json(200, {
            "loaded": [b.sitemap.domain for b in tables.domains],
            "generation": tables.generation,
        })

    def _ctx_report(self):
        try:
            doc = json.loads(self._read_body().decode("utf-8"), parse_float=Decimal)
            report = ContextValue(
                session_id=doc.get("session_id", self.proxy.config.default_session),
                arg_name=doc["arg_name"],
                value=doc["value"],
                source_url=doc.get("source_url", ""),
                seq=int(doc["seq"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            self._send_json(400, {"accepted": False, "error": f"bad report: {exc}"})
            return
        try:
            accepted = self.proxy.cache.ingest(report)
        except UnknownArgError as exc:
            self._send_json(400, {"accepted": False, "error": str(exc)})
            return
        self._send_json(200, {"accepted": accepted})

    # -- proxied traffic ---------------------------------------------------------

    def _session_id(self) -> str:
        if self._mitm_session:
            return self._mitm_session
        return _session_from_headers(self.headers) or self.proxy.config.default_session

    def _handle_proxied(self, url: str):
        started = time.perf_counter()
        body = self._read_body()
        view = HttpRequestView(
            method=self.command,
            url=url,
            headers={k: v for k, v in self.headers.items()},
            body=body,
            session_id=self._session_id(),
        )
        proxy = self.proxy
        tables = proxy.session_tables(view.session_id)
        parts = urlsplit(url)
        host = (parts.hostname or "").lower()
        bundle = tables.bundle_for_host(host) if tables else None
        if bundle is not None:
            outcome = decide(bundle.table, proxy.cache, view)
        elif tables is not None and tables.allowlisted(parts):
            outcome = Outcome(route="allowlisted", verdict="allow")
        elif proxy.config.mode == "observe":
            outcome = Outcome(route="pass_through", verdict="allow", reason="unaffiliated host")
        else:
            outcome = Outcome(
                route="refused", verdict="deny",
                blocked_by="domain-confinement",
                reason=f"host {host!r} has no loaded sitemap and is not allowlisted",
            )
        upstream_error = None
        if outcome.forward:
            response = self._fetch_upstream(view, parts)
            if isinstance(response, Exception):
                upstream_error = response
        latency_us = int((time.perf_counter() - started) * 1e6)
        # record before any response bytes reach the client, so the audit
        # trail is complete the moment the caller observes the outcome
        proxy.record(EnforcementRecord(
            timestamp=time.time(),
            session_id=view.session_id,
            method=view.method,
            url=url,
            route=outcome.route,
            semantic_action=outcome.semantic_action,
            verdict="deny_by_error" if upstream_error else outcome.verdict,
            reason=f"upstream connection failed: {upstream_error}" if upstream_error
                   else outcome.reason,
            latency_us=latency_us,
        ))
        if not outcome.forward:
            domain = bundle.sitemap.domain if bundle else None
            self._send_json(403, {
                "blocked_by": outcome.blocked_by,
                "policy_domain": domain,
                "semantic_action": outcome.semantic_action,
                "reason": outcome.reason,
            })
            return
        if upstream_error is not None:
            self._send_json(502, {"error": "upstream connection failed",
                                  "detail": str(upstream_error)})
            return
        status, resp_headers, payload = response
        self.send_response(status)
        for k, v in resp_headers:
            self.send_header(k, v)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        if self.command != "HEAD" and payload:
            self.wfile.write(payload)

    def _fetch_upstream(self, view: HttpRequestView, parts):
        proxy = self.proxy
        host = (parts.hostname or "").lower()
        scheme = (parts.scheme or "http").lower()
        port = parts.port or (443 if scheme == "https" else 80)
        override = proxy.config.upstream_map.get(host)
        if override:
            o = urlsplit(override)
            scheme = o.scheme or "http"
            host_addr = o.hostname
            port = o.port or (443 if scheme == "https" else 80)
        else:
            host_addr = host
        path = parts.path or "/"
        if parts.query:
            path = f"{path}?{parts.query}"
        headers = {
            k: v for k, v in view.headers.items() if k.lower() not in _HOP_BY_HOP
        }
        headers["Connection"] = "close"
        headers.setdefault("Host", parts.netloc)
        if view.body and "Content-Length" not in headers:
            headers["Content-Length"] = str(len(view.body))
        conn_cls = http.client.HTTPSConnection if scheme == "https" else http.client.HTTPConnection
        try:
            conn = conn_cls(host_addr, port, timeout=proxy.config.upstream_timeout)
            conn.request(view.method, path, body=view.body or None, headers=headers)
            resp = conn.getresponse()
            payload = resp.read()
            resp_headers = [
                (k, v) for k, v in resp.getheaders()
                if k.lower() not in _HOP_BY_HOP and k.lower() != "content-length"
            ]
            conn.close()
        except OSError as exc:
            return exc
        return resp.status, resp_headers, payload

    # -- CONNECT -------------------------------------------------------------

    def do_CONNECT(self):
        host, _, port_text = self.path.partition(":")
        host = host.lower()
        port = int(port_text or "443")
        session_id = _session_from_headers(self.headers) or self.proxy.config.default_session
        proxy = self.proxy
        tables = proxy.session_tables(session_id)
        has_sitemap = tables is not None and tables.bundle_for_host(host) is not None
        allowlisted = tables is not None and host in tables.allowlist_hosts()
        strict = proxy.config.mode == "strict"

        if not has_sitemap and not allowlisted:
            if strict:
                self._refuse_connect(session_id, host, "no loaded sitemap and not allowlisted")
            else:
                self._opaque_tunnel(session_id, host, port, route="pass_through")
            return
        if proxy.config.ca is not None:
            self._intercept_tls(session_id, host)
            return
        if has_sitemap and strict:
            # Without interception the per-action policy cannot be enforced.
            self._refuse_connect(
                session_id, host,
                "host has a loaded sitemap but TLS interception is disabled",
            )
            return
        self._opaque_tunnel(
            session_id, host, port,
            route="allowlisted" if allowlisted and not has_sitemap else "pass_through",
        )

    def _refuse_connect(self, session_id: str, host: str, reason: str):
        self.proxy.record(EnforcementRecord(
            timestamp=time.time(), session_id=session_id, method="CONNECT",
            url=self.path, route="refused", semantic_action=None,
            verdict="deny", reason=reason, latency_us=0,
        ))
        self.send_response(403)
        self.send_header("Content-Length", "0")
        self.end_headers()
        self.close_connection = True

    def _established(self):
        self.wfile.write(b"HTTP/1.1 200 Connection Established\r\n\r\n")
        self.wfile.flush()

    def _intercept_tls(self, session_id: str, host: str):
        self._established()
        ctx = self.proxy.config.ca.server_context(host)
        try:
            tls_sock = ctx.wrap_socket(self.connection, server_side=True)
        except (ssl.SSLError, OSError) as exc:
            log.debug("TLS handshake with client failed for %s: %s", host, exc)
            self.close_connection = True
            return
        self.connection = tls_sock
        self.rfile = tls_sock.makefile("rb", buffering=-1)
        self.wfile = tls_sock.makefile("wb", buffering=0)
        self._mitm_host = host
        self._mitm_session = session_id
        self.close_connection = False
        while not self.close_connection:
            self.handle_one_request()

    def _opaque_tunnel(self, session_id: str, host: str, port: int, route: str):
        proxy = self.proxy
        override = proxy.config.upstream_map.get(host)
        if override:
            o = urlsplit(override)
            target = (o.hostname, o.port or port)
        else:
            target = (host, port)
        try:
            upstream = socket.create_connection(target, timeout=proxy.config.upstream_timeout)
        except OSError:
            self.send_response(502)
            self.send_header("Content-Length", "0")
            self.end_headers()
            self.close_connection = True
            return
        proxy.record(EnforcementRecord(
            timestamp=time.time(), session_id=session_id, method="CONNECT",
            url=self.path, route=route, semantic_action=None,
            verdict="allow", reason="opaque tunnel", latency_us=0,
        ))
        self._established()
        _pipe(self.connection, upstream)
        upstream.close()
        self.close_connection = True

    # -- plumbing ------------------------------------------------------------

    def _read_body(self) -> bytes:
        length = self.headers.get("Content-Length")
        if length is not None:
            try:
                return self.rfile.read(int(length))
            except ValueError:
                return b""
        if (self.headers.get("Transfer-Encoding", "").lower()) == "chunked":
            chunks = []
            while True:
                size_line = self.rfile.readline().strip()
                try:
                    size = int(size_line.split(b";")[0], 16)
                except ValueError:
                    break
                if size == 0:
                    self.rfile.readline()
                    break
                chunks.append(self.rfile.read(size))
                self.rfile.readline()
            return b"".join(chunks)
        return b""

    def _send_json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)


def _session_from_headers(headers) -> str | None:
    auth = headers.get("Proxy-Authorization", "")
    if auth.lower().startswith("basic "):
        try:
            decoded = base64.b64decode(auth.split(None, 1)[1]).decode("utf-8")
            return decoded.split(":", 1)[0] or None
        except (ValueError, UnicodeDecodeError):
            return None
    return None


def _pipe(a: socket.socket, b: socket.socket) -> None:
    """Blind byte shuttle for opaque tunnels."""
    sockets = [a, b]
    try:
        while True:
            readable, _, _ = select.select(sockets, [], [], 60)
            if not readable:
                break
            for sock in readable:
                data = sock.recv(65536)
                if not data:
                    return
                (b if sock is a else a).sendall(data)
    except OSError:
        return
