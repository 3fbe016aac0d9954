"""Live set of per-function monitoring contexts and the reload protocol.

A registry owns one epoch at a time.  Reloads requested from signal context
only record the pending config path; the swap itself happens at a quiescent
callback boundary (no counter session open), where the old epoch's totals are
flushed as a partial report and a fresh epoch starts from zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .backend import BackendDescriptor, EventGroup, ValidationError, validate_events
from .config import ContextConfig, FunctionContextSpec, ParseError, parse_config
from .report import FunctionReport, GroupReport, ProfileReport
from .symbols import AmbiguousNameError, SymbolMap


@dataclass
class FunctionContext:
    """Monitoring state for one resolved function within one epoch."""

    spec: FunctionContextSpec
    address: int
    groups: list[EventGroup]
    call_count: int = 0
    accumulated: list[list[int]] = field(default_factory=list)
    calls_per_group: list[int] = field(default_factory=list)
    disabled: bool = False

    def __post_init__(self):
        if not self.accumulated:
            self.accumulated = [[0] * len(g) for g in self.groups]
        if not self.calls_per_group:
            self.calls_per_group = [0] * len(self.groups)

    def to_report(self) -> FunctionReport:
        groups = tuple(GroupReport(g.units, tuple(acc), calls)
                       for g, acc, calls in zip(self.groups, self.accumulated,
                                                self.calls_per_group))
        return FunctionReport(self.spec.function_name, self.call_count, groups)


@dataclass(frozen=True)
class InstallWarning:
    kind: str  # unknown_function | ambiguous_function | duplicate_address
    function_name: str
    detail: str


@dataclass
class RegistryEpoch:
    epoch_id: int
    contexts: dict[int, FunctionContext]
    binary_name: str
    installed_at: float = field(default_factory=time.time)


@dataclass(frozen=True)
class ReloadOutcome:
    kind: str  # applied | none | failed
    epoch: RegistryEpoch | None = None
    flushed_report: ProfileReport | None = None
    reason: str | None = None


class ContextRegistry:
    """Installs configs against a symbol map and backend; swaps epochs."""

    def __init__(self, symbols: SymbolMap, backend_descriptor: BackendDescriptor,
                 diagnostics=None):
        self.symbols = symbols
        self.backend_descriptor = backend_descriptor
        self._diag = diagnostics or (lambda msg: None)
        self.epoch: RegistryEpoch | None = None
        self.warnings: list[InstallWarning] = []
        # single word read from signal context; None means no reload pending
        self._pending_path: str | None = None

    def install(self, config: ContextConfig) -> tuple[RegistryEpoch, list[InstallWarning]]:
        """Resolve and validate every configured function into a new epoch.

        Unresolvable names are inert (warning, skipped): a config may name
        functions outside the compile-time interception set.  Event
        validation failures on a resolved function are fatal.
        """
        next_id = self.epoch.epoch_id + 1 if self.epoch is not None else 0
        contexts: dict[int, FunctionContext] = {}
        warnings: list[InstallWarning] = []
        for spec in config.functions:
            try:
                address = self.symbols.lookup_by_name(spec.function_name)
            except AmbiguousNameError as exc:
                warnings.append(InstallWarning("ambiguous_function", spec.function_name, str(exc)))
                continue
            if address is None:
                warnings.append(InstallWarning(
                    "unknown_function", spec.function_name,
                    f"'{spec.function_name}' is not in the symbol map; not monitored"))
                continue
            if address in contexts:
                warnings.append(InstallWarning(
                    "duplicate_address", spec.function_name,
                    f"'{spec.function_name}' aliases '{contexts[address].spec.function_name}' "
                    f"at {hex(address)}; keeping the first"))
                continue
            groups = validate_events(self.backend_descriptor, spec)
            contexts[address] = FunctionContext(spec, address, groups)
        epoch = RegistryEpoch(next_id, contexts, config.binary_name)
        self.epoch = epoch
        self.warnings = warnings
        for warning in warnings:
            self._diag(f"install warning ({warning.kind}): {warning.detail}")
        return epoch, warnings

    def lookup_context(self, address: int) -> FunctionContext | None:
        epoch = self.epoch
        if epoch is None:
            return None
        return epoch.contexts.get(address)

    # -- reload protocol ----------------------------------------------------

    def request_reload(self, path: str) -> None:
        """Record a pending reload; safe to call from a signal handler."""
        self._pending_path = path

    @property
    def has_pending_reload(self) -> bool:
        return self._pending_path is not None

    def apply_pending_reload(self, process_id: int = 0,
                             rank_tag: str | None = None) -> ReloadOutcome:
        """Swap epochs if a reload is pending.  Caller must be quiescent.

        The old epoch's accumulators are flushed into a partial report
        (returned for emission); on parse or install failure the old epoch
        stays active and keeps monitoring.
        """
        path = self._pending_path
        if path is None:
            return ReloadOutcome("none")
        self._pending_path = None
        old_epoch = self.epoch
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
            config = parse_config(text)
        except (OSError, ParseError) as exc:
            self._diag(f"reload failed, keeping epoch "
                       f"{old_epoch.epoch_id if old_epoch else '-'}: {exc}")
            return ReloadOutcome("failed", reason=str(exc))
        flushed = self.snapshot_report(process_id, rank_tag) if old_epoch else None
        try:
            epoch, _ = self.install(config)
        except ValidationError as exc:
            # install mutates the registry only on success; the old epoch is intact
            self._diag(f"reload failed during install: {exc}")
            return ReloadOutcome("failed", reason=str(exc))
        return ReloadOutcome("applied", epoch=epoch, flushed_report=flushed)

    def snapshot_report(self, process_id: int = 0,
                        rank_tag: str | None = None) -> ProfileReport:
        epoch = self.epoch
        if epoch is None:
            return ProfileReport("-", 0, process_id, rank_tag, ())
        entries = tuple(ctx.to_report() for ctx in epoch.contexts.values())
        return ProfileReport(epoch.binary_name, epoch.epoch_id, process_id,
                             rank_tag, entries)
