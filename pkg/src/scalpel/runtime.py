"""Entry/exit callback handlers: the session state machine.

One counter session exists process-wide at any instant, owned by the thread
that opened it.  The session is retained across recursive and immediately
successive calls to the same function; while it lives, nested monitored
functions are call-counted but never separately measured (parent wins).
Event groups rotate on call boundaries only, after every ``multiplex_period``
calls, so each call's counters belong to exactly one group.
"""

from __future__ import annotations

import atexit
import os
import signal
import sys
import threading

from .backend import CounterSession, ResourceError, StateError
from .registry import ContextRegistry, FunctionContext
from .report import ProfileReport, detect_rank_tag, emit_report


def multiplex_group_index(call_number: int, period: int, num_groups: int) -> int:
    """Group counting the ``call_number``-th call (1-based).

    Groups rotate in declared order after every ``period`` calls:
    ``floor((call_number - 1) / period) mod num_groups``.
    """
    return ((call_number - 1) // period) % num_groups


class SessionState:
    """The single live measurement window and its retention bookkeeping."""

    __slots__ = ("context", "session", "depth", "active_group", "pending_stop",
                 "owner_thread")

    def __init__(self, context: FunctionContext, session: CounterSession,
                 group: int, owner_thread: int):
        self.context = context
        self.session = session
        self.depth = 1
        self.active_group = group
        self.pending_stop = False
        self.owner_thread = owner_thread


class CallbackRuntime:
    """Implements the instrumentation callbacks over a registry and backend.

    ``retain`` keeps the session alive across a function's exit until the
    next non-retention callback, trading attribution of inter-call gaps to
    the function for far fewer counter start/stop cycles.
    """

    def __init__(self, registry: ContextRegistry, backend, retain: bool = True,
                 diagnostics=None, process_id: int | None = None,
                 rank_tag: str | None = None):
        self.registry = registry
        self.backend = backend
        self.retain = retain
        self.process_id = os.getpid() if process_id is None else process_id
        self.rank_tag = rank_tag
        self.unmatched_exits = 0
        self.report_sink = None  # None -> stdout; str path or file-like otherwise
        self._diag = diagnostics or (lambda msg: print(f"scalpel: {msg}", file=sys.stderr))
        self._session: SessionState | None = None
        self._lock = threading.Lock()
        self._finalized = False

    # -- callback handlers ----------------------------------------------------

    def on_function_entry(self, fn_address: int, call_site_address: int = 0) -> None:
        with self._lock:
            state = self._session
            if state is not None:
                if (state.owner_thread == threading.get_ident()
                        and state.context.address == fn_address):
                    if state.pending_stop:
                        self._continue_retained(state)
                    else:
                        # recursion: child work folds into the parent's counters
                        state.depth += 1
                        state.context.call_count += 1
                        state.context.calls_per_group[state.active_group] += 1
                    return
                if state.pending_stop:
                    # lazily stopped session hits a non-retention callback
                    self._close_session(state)
                else:
                    # parent wins: count the nested call, never measure it
                    context = self.registry.lookup_context(fn_address)
                    if context is not None:
                        context.call_count += 1
                    return
            self._apply_pending_reload()
            context = self.registry.lookup_context(fn_address)
            if context is None:
                return
            context.call_count += 1
            if context.disabled or not context.groups:
                return
            group = 0
            if context.spec.multiplex_period > 0:
                group = multiplex_group_index(context.call_count,
                                              context.spec.multiplex_period,
                                              len(context.groups))
            try:
                session = self.backend.open_session(context.groups)
                session.start_group(group)
            except (StateError, ResourceError) as exc:
                context.disabled = True
                self._diag(f"monitoring disabled for "
                           f"'{context.spec.function_name}': {exc}")
                return
            context.calls_per_group[group] += 1
            self._session = SessionState(context, session, group,
                                         threading.get_ident())

    def on_function_exit(self, fn_address: int, call_site_address: int = 0) -> None:
        with self._lock:
            state = self._session
            if state is None:
                if self._expects_session(fn_address):
                    self.unmatched_exits += 1
                return
            if (state.owner_thread == threading.get_ident()
                    and state.context.address == fn_address):
                if state.pending_stop:
                    # exit without a matching entry; depth stays floored at 0
                    self.unmatched_exits += 1
                    return
                state.depth -= 1
                if state.depth == 0:
                    if self.retain:
                        state.pending_stop = True
                    else:
                        self._close_session(state)
                        self._apply_pending_reload()
                return
            if state.pending_stop:
                # an enclosing function is unwinding past the retained session
                self._close_session(state)
                self._apply_pending_reload()
                if self._expects_session(fn_address):
                    self.unmatched_exits += 1
            # non-owner exits are no-ops for monitoring

    def on_process_exit(self) -> None:
        """Close any live session and emit the final report (best effort)."""
        if self._finalized:
            return
        self._finalized = True
        with self._lock:
            state = self._session
            if state is not None:
                self._close_session(state)
        emit_report(self.final_report(), self.report_sink)

    # -- internals -------------------------------------------------------------

    def _expects_session(self, fn_address: int) -> bool:
        # counting-only and disabled contexts legitimately exit sessionless
        context = self.registry.lookup_context(fn_address)
        return (context is not None and bool(context.groups)
                and not context.disabled)

    def _continue_retained(self, state: SessionState) -> None:
        # immediate successive call: cancel the stop, keep the session
        state.pending_stop = False
        state.depth = 1
        context = state.context
        context.call_count += 1
        if context.spec.multiplex_period > 0 and len(context.groups) > 1:
            group = multiplex_group_index(context.call_count,
                                          context.spec.multiplex_period,
                                          len(context.groups))
            if group != state.active_group:
                # switch groups on the call boundary without closing the session
                try:
                    state.session.stop_group(state.active_group)
                    state.session.start_group(group)
                except StateError as exc:
                    self._abort_session(state, exc)
                    return
                state.active_group = group
        context.calls_per_group[state.active_group] += 1

    def _close_session(self, state: SessionState) -> None:
        try:
            finals = state.session.close()
        except StateError as exc:
            self._abort_session(state, exc)
            return
        context = state.context
        for sample in finals:
            acc = context.accumulated[sample.group_index]
            for i, value in enumerate(sample.values):
                acc[i] += value
        self._session = None

    def _abort_session(self, state: SessionState, exc: Exception) -> None:
        state.context.disabled = True
        self._session = None
        self._diag(f"monitoring disabled for "
                   f"'{state.context.spec.function_name}': {exc}")

    def _apply_pending_reload(self) -> None:
        if not self.registry.has_pending_reload:
            return
        outcome = self.registry.apply_pending_reload(self.process_id, self.rank_tag)
        if outcome.kind == "applied" and outcome.flushed_report is not None:
            emit_report(outcome.flushed_report, self.report_sink)

    def final_report(self) -> ProfileReport:
        return self.registry.snapshot_report(self.process_id, self.rank_tag)

    # -- process wiring ----------------------------------------------------------

    def install_signal_handler(self) -> None:
        """Route user signal 1 to the deferred-reload request.

        The config path is re-read from SCALPEL_CONFIG at each signal so the
        operator can point the process at a different file between reloads.
        """

        def handler(_signum, _frame):
            path = os.environ.get("SCALPEL_CONFIG")
            if path:
                self.registry.request_reload(path)

        signal.signal(signal.SIGUSR1, handler)

    def install_exit_hook(self) -> None:
        atexit.register(self.on_process_exit)


def runtime_from_environment(registry: ContextRegistry, backend) -> CallbackRuntime:
    """Build a runtime honoring SCALPEL_OUT / SCALPEL_NO_RETAIN / rank vars."""
    runtime = CallbackRuntime(
        registry, backend,
        retain=os.environ.get("SCALPEL_NO_RETAIN") != "1",
        rank_tag=detect_rank_tag(),
    )
    out = os.environ.get("SCALPEL_OUT")
    if out:
        runtime.report_sink = out
    return runtime
