"""Receiving side of the context feed: cached DOM-sourced argument values.

Pages produce values (cart totals, selected scopes) while they exist; the
permission decision that consumes them happens later, when the triggering
request is intercepted and the page may already be gone. This cache spans
that gap. Producers assign monotone sequence numbers per argument, so
replays and reordered deliveries are rejected deterministically:
last-writer-wins by sequence number, not arrival time.

Optional lockout mode tracks "pending effects": after a state-changing
action, the arguments it may have invalidated must report fresh values
before any condition is evaluated over them. A pending marker that misses
its deadline flags those arguments stale; evaluations over stale arguments
deny until a fresh report arrives.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from .errors import MissingArgsError, SettleTimeout, StaleArgsError, UnknownArgError
from .request import coerce_value
from .sitemap import ArgSpec, Sitemap

DEFAULT_SETTLE_TIMEOUT = 10.0


@dataclass(frozen=True)
class ContextValue:
    """One reported observation of a DOM-sourced argument."""

    session_id: str
    arg_name: str
    value: object
    source_url: str
    seq: int
    received_at: float = 0.0


@dataclass
class _Pending:
    action: str
    remaining: set[str]
    deadline: float


@dataclass
class _SessionState:
    values: dict[str, ContextValue] = field(default_factory=dict)
    pending: list[_Pending] = field(default_factory=list)
    stale_args: set[str] = field(default_factory=set)


class ContextCache:
    """Per-session store of the latest accepted value for each argument."""

    def __init__(self, clock=time.monotonic, settle_timeout: float = DEFAULT_SETTLE_TIMEOUT,
                 lockout: bool = False):
        self._clock = clock
        self._settle_timeout = settle_timeout
        self.lockout = lockout
        self._lock = threading.RLock()
        self._sessions: dict[str, _SessionState] = {}
        self._known_args: dict[str, ArgSpec] = {}

    def register_sitemap(self, sitemap: Sitemap) -> None:
        """Declare the DOM-sourced args a loaded sitemap may report."""
        with self._lock:
            self._known_args.update(sitemap.dom_args())

    def register_arg(self, spec: ArgSpec) -> None:
        with self._lock:
            self._known_args[spec.name] = spec

    def known_args(self) -> set[str]:
        with self._lock:
            return set(self._known_args)

    def _session(self, session_id: str) -> _SessionState:
        state = self._sessions.get(session_id)
        if state is None:
            state = _SessionState()
            self._sessions[session_id] = state
        return state

    # -- ingest ------------------------------------------------------------

    def ingest(self, report: ContextValue) -> bool:
        """Accept a report iff its seq exceeds the stored one for that arg."""
        with self._lock:
            spec = self._known_args.get(report.arg_name)
            if spec is None:
                raise UnknownArgError(f"no dom-sourced arg named {report.arg_name!r}")
            state = self._session(report.session_id)
            current = state.values.get(report.arg_name)
            if current is not None and report.seq <= current.seq:
                return False
            value = report.value
            try:
                value = coerce_value(value, spec.value_type)
            except ValueError:
                pass  # keep the raw value; condition evaluation denies on type
            state.values[report.arg_name] = ContextValue(
                session_id=report.session_id,
                arg_name=report.arg_name,
                value=value,
                source_url=report.source_url,
                seq=report.seq,
                received_at=self._clock(),
            )
            state.stale_args.discard(report.arg_name)
            for pending in state.pending:
                pending.remaining.discard(report.arg_name)
            state.pending = [p for p in state.pending if p.remaining]
            return True

    # -- reads -------------------------------------------------------------

    def resolve_args(self, session_id: str, required, request_sourced=None) -> dict:
        """Build the argument object for a condition evaluation.

        Request-sourced values win for the args the request itself carried;
        everything else reads the cached DOM value. Any absent argument
        raises MissingArgsError (the caller denies).
        """
        request_sourced = request_sourced or {}
        out: dict = {}
        missing: list[str] = []
        with self._lock:
            state = self._sessions.get(session_id)
            for name in required:
                if name in request_sourced:
                    out[name] = request_sourced[name]
                    continue
                cached = state.values.get(name) if state else None
                if cached is None:
                    missing.append(name)
                else:
                    out[name] = cached.value
        if missing:
            raise MissingArgsError(missing)
        return out

    def check_freshness(self, session_id: str, dom_args) -> None:
        """In lockout mode, refuse evaluation over unsettled or stale args."""
        if not self.lockout:
            return
        with self._lock:
            state = self._sessions.get(session_id)
            if state is None:
                return
            self._expire_pending(state)
            dom_args = set(dom_args)
            stale = dom_args & state.stale_args
            if stale:
                raise StaleArgsError(f"stale arguments (settle timeout): {sorted(stale)}")
            for pending in state.pending:
                held = dom_args & pending.remaining
                if held:
                    raise StaleArgsError(
                        f"arguments awaiting effects of {pending.action!r}: {sorted(held)}"
                    )

    # -- lockout bookkeeping -------------------------------------------------

    def mark_pending(self, session_id: str, action: str, affected_args) -> None:
        """Record that an action's effects must settle before reuse of args."""
        affected = {a for a in affected_args if a in self._known_args}
        if not affected:
            return
        with self._lock:
            state = self._session(session_id)
            state.pending.append(_Pending(
                action=action,
                remaining=affected,
                deadline=self._clock() + self._settle_timeout,
            ))

    def mark_settled(self, session_id: str, action: str) -> None:
        """Explicitly clear every pending marker for an action."""
        with self._lock:
            state = self._sessions.get(session_id)
            if state is None:
                return
            state.pending = [p for p in state.pending if p.action != action]

    def is_settled(self, session_id: str) -> bool:
        """True iff no action is awaiting its effects.

        Raises SettleTimeout the first time an expired marker is observed;
        the marker's arguments are flagged stale until fresh reports arrive.
        """
        with self._lock:
            state = self._sessions.get(session_id)
            if state is None:
                return True
            expired = self._expire_pending(state)
            if expired:
                raise SettleTimeout(
                    f"effects of {', '.join(sorted(expired))} did not settle in time"
                )
            return not state.pending

    def _expire_pending(self, state: _SessionState) -> set[str]:
        now = self._clock()
        expired_actions: set[str] = set()
        keep: list[_Pending] = []
        for pending in state.pending:
            if now >= pending.deadline:
                expired_actions.add(pending.action)
                state.stale_args.update(pending.remaining)
            else:
                keep.append(pending)
        state.pending = keep
        return expired_actions

    # -- maintenance ---------------------------------------------------------

    def drop_session(self, session_id: str) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def snapshot(self, session_id: str) -> dict[str, ContextValue]:
        with self._lock:
            state = self._sessions.get(session_id)
            return dict(state.values) if state else {}
