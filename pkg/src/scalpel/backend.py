"""Counter backends: group packing/validation and two measurement sources.

``SimulatedBackend`` is deterministic and driven by explicit tick injection,
for tests and replay oracles.  ``PerfEventBackend`` counts real hardware and
software events for the current process through the Linux perf-events syscall
interface (user mode only, per-process scope, inherited by child threads but
aggregated).
"""

from __future__ import annotations

import ctypes
import os
import platform
import struct
from dataclasses import dataclass, field

from .config import FunctionContextSpec


class BackendError(Exception):
    pass


class ValidationError(BackendError):
    """Event list cannot be mapped onto this backend."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(message)


class StateError(BackendError):
    """Session protocol violation; signals a runtime bookkeeping bug."""


class ResourceError(BackendError):
    """The OS refused to allocate counters."""


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    group_width: int = 4
    known_events: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.group_width < 1:
            raise ValueError("group width must be >= 1")


@dataclass(frozen=True)
class EventGroup:
    """Measurement units counted simultaneously; at most group_width of them."""

    units: tuple[str, ...]

    def __post_init__(self):
        if not self.units:
            raise ValueError("event group must contain at least one unit")

    def __len__(self) -> int:
        return len(self.units)


@dataclass(frozen=True)
class CounterSample:
    group_index: int
    values: tuple[int, ...]


def validate_events(backend: BackendDescriptor, spec: FunctionContextSpec) -> list[EventGroup]:
    """Flatten ``spec.events`` into measurement units and pack them into groups.

    Units keep their declared order and are cut greedily at the backend's
    group width.  Raises :class:`ValidationError` for event ids the backend
    does not know (when it enumerates any) and when more than one group
    results while multiplexing is disabled.
    """
    if backend.known_events:
        for ev in spec.events:
            if ev.event_id not in backend.known_events:
                raise ValidationError("unknown_event",
                                      f"unknown event id for backend '{backend.name}': {ev.event_id}")
    units = spec.units()
    width = backend.group_width
    groups = [EventGroup(units[i:i + width]) for i in range(0, len(units), width)]
    if spec.multiplex_period == 0 and len(groups) > 1:
        raise ValidationError(
            "too_many_events_without_multiplexing",
            f"{len(units)} units need {len(groups)} groups of width {width} "
            f"but multiplexing is disabled for '{spec.function_name}'")
    return groups


class CounterSession:
    """Live measurement window over a fixed list of groups.

    At most one group counts at any instant.  Reads are cumulative since the
    session was opened and monotonically non-decreasing per unit.
    """

    def __init__(self, groups: list[EventGroup]):
        if not groups:
            raise ValueError("session needs at least one group")
        self.groups = list(groups)
        self.active_group: int | None = None
        self.closed = False

    def _check_open(self):
        if self.closed:
            raise StateError("session is closed")

    def _check_index(self, group_index: int):
        if not 0 <= group_index < len(self.groups):
            raise StateError(f"no such group: {group_index}")

    def start_group(self, group_index: int) -> None:
        self._check_open()
        self._check_index(group_index)
        if self.active_group is not None:
            raise StateError(f"group {self.active_group} is already active")
        self._do_start(group_index)
        self.active_group = group_index

    def stop_group(self, group_index: int) -> None:
        self._check_open()
        self._check_index(group_index)
        if self.active_group != group_index:
            raise StateError(f"group {group_index} is not active")
        self._do_stop(group_index)
        self.active_group = None

    def read_group(self, group_index: int) -> CounterSample:
        self._check_open()
        self._check_index(group_index)
        return CounterSample(group_index, self._do_read(group_index))

    def close(self) -> list[CounterSample]:
        """Stop any active group and return final samples; the handle dies."""
        self._check_open()
        if self.active_group is not None:
            self.stop_group(self.active_group)
        final = [self.read_group(i) for i in range(len(self.groups))]
        self._do_close()
        self.closed = True
        return final

    def _do_start(self, group_index: int) -> None:
        raise NotImplementedError

    def _do_stop(self, group_index: int) -> None:
        raise NotImplementedError

    def _do_read(self, group_index: int) -> tuple[int, ...]:
        raise NotImplementedError

    def _do_close(self) -> None:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# simulated backend


class _SimSession(CounterSession):
    def __init__(self, backend: "SimulatedBackend", session_id: int, groups: list[EventGroup]):
        super().__init__(groups)
        self._backend = backend
        self.session_id = session_id
        self._counts = [[0] * len(g) for g in groups]

    def _do_start(self, group_index: int) -> None:
        self._backend.op_log.append(("start", self.session_id, group_index))

    def _do_stop(self, group_index: int) -> None:
        self._backend.op_log.append(("stop", self.session_id, group_index))

    def _do_read(self, group_index: int) -> tuple[int, ...]:
        return tuple(self._counts[group_index])

    def _do_close(self) -> None:
        self._backend.op_log.append(("close", self.session_id))
        self._backend._sessions.remove(self)


class SimulatedBackend:
    """Deterministic in-memory backend driven by explicit tick injection.

    Injected ticks land only in currently counting groups, so read values
    replay exactly the injection script.  All session operations are recorded
    in ``op_log`` as ``(op, session_id, ...)`` tuples for trace oracles.
    """

    def __init__(self, group_width: int = 4, known_events: frozenset[str] = frozenset()):
        self.descriptor = BackendDescriptor("sim", group_width, known_events)
        self.op_log: list[tuple] = []
        self._sessions: list[_SimSession] = []
        self._next_id = 0

    def open_session(self, groups: list[EventGroup]) -> _SimSession:
        session = _SimSession(self, self._next_id, groups)
        self._next_id += 1
        self._sessions.append(session)
        self.op_log.append(("open", session.session_id, len(groups)))
        return session

    def inject(self, unit: str, ticks: int = 1) -> None:
        """Add ``ticks`` to ``unit`` in every session actively counting it."""
        if ticks < 0:
            raise ValueError("ticks must be non-negative")
        for session in self._sessions:
            g = session.active_group
            if g is None:
                continue
            try:
                idx = session.groups[g].units.index(unit)
            except ValueError:
                continue
            session._counts[g][idx] += ticks

    def inject_active(self, ticks: int = 1) -> None:
        """Add ``ticks`` to every unit of every actively counting group."""
        for session in self._sessions:
            g = session.active_group
            if g is not None:
                counts = session._counts[g]
                for i in range(len(counts)):
                    counts[i] += ticks

    @property
    def open_session_count(self) -> int:
        return len(self._sessions)


# ---------------------------------------------------------------------------
# Linux perf-events backend (ctypes, no external dependencies)

_PERF_TYPE_HARDWARE = 0
_PERF_TYPE_SOFTWARE = 1

# flag bit positions in perf_event_attr
_FLAG_DISABLED = 1 << 0
_FLAG_INHERIT = 1 << 1
_FLAG_EXCLUDE_KERNEL = 1 << 5
_FLAG_EXCLUDE_HV = 1 << 6

_PERF_EVENT_IOC_ENABLE = 0x2400
_PERF_EVENT_IOC_DISABLE = 0x2401
_PERF_IOC_FLAG_GROUP = 1

# Generic portable event names -> (perf type, config).  Counters are 64-bit
# and virtualized by the kernel, so they do not wrap at desk scale.
_GENERIC_EVENTS: dict[str, tuple[int, int]] = {
    "CYCLES": (_PERF_TYPE_HARDWARE, 0),
    "INSTRUCTIONS": (_PERF_TYPE_HARDWARE, 1),
    "CACHE_REFERENCES": (_PERF_TYPE_HARDWARE, 2),
    "CACHE_MISSES": (_PERF_TYPE_HARDWARE, 3),
    "BRANCH_INSTRUCTIONS": (_PERF_TYPE_HARDWARE, 4),
    "BRANCH_MISSES": (_PERF_TYPE_HARDWARE, 5),
    "BUS_CYCLES": (_PERF_TYPE_HARDWARE, 6),
    "STALLED_CYCLES_FRONTEND": (_PERF_TYPE_HARDWARE, 7),
    "STALLED_CYCLES_BACKEND": (_PERF_TYPE_HARDWARE, 8),
    "REF_CYCLES": (_PERF_TYPE_HARDWARE, 9),
    "CPU_CLOCK": (_PERF_TYPE_SOFTWARE, 0),
    "TASK_CLOCK": (_PERF_TYPE_SOFTWARE, 1),
    "PAGE_FAULTS": (_PERF_TYPE_SOFTWARE, 2),
    "CONTEXT_SWITCHES": (_PERF_TYPE_SOFTWARE, 3),
    "CPU_MIGRATIONS": (_PERF_TYPE_SOFTWARE, 4),
    "PAGE_FAULTS_MIN": (_PERF_TYPE_SOFTWARE, 5),
    "PAGE_FAULTS_MAJ": (_PERF_TYPE_SOFTWARE, 6),
}

_SYSCALL_NR = {"x86_64": 298, "aarch64": 241, "riscv64": 241}


class _PerfEventAttr(ctypes.Structure):
    # Leading fields of struct perf_event_attr; the size field tells the
    # kernel how much we filled in.
    _fields_ = [
        ("type", ctypes.c_uint),
        ("size", ctypes.c_uint),
        ("config", ctypes.c_ulonglong),
        ("sample_period", ctypes.c_ulonglong),
        ("sample_type", ctypes.c_ulonglong),
        ("read_format", ctypes.c_ulonglong),
        ("flags", ctypes.c_ulonglong),
        ("wakeup_events", ctypes.c_uint),
        ("bp_type", ctypes.c_uint),
        ("config1", ctypes.c_ulonglong),
        ("config2", ctypes.c_ulonglong),
    ]


def _perf_event_open(attr: _PerfEventAttr, pid: int, cpu: int, group_fd: int) -> int:
    nr = _SYSCALL_NR.get(platform.machine())
    if nr is None:
        raise ResourceError(f"perf events unsupported on {platform.machine()}")
    libc = ctypes.CDLL(None, use_errno=True)
    fd = libc.syscall(ctypes.c_long(nr), ctypes.byref(attr), ctypes.c_int(pid),
                      ctypes.c_int(cpu), ctypes.c_int(group_fd), ctypes.c_ulong(0))
    if fd < 0:
        err = ctypes.get_errno()
        raise ResourceError(f"perf_event_open failed: {os.strerror(err)}")
    return fd


def _resolve_unit(unit: str) -> tuple[int, int]:
    # Sub-event qualifiers have no generic perf mapping; count the base event.
    base = unit.split(":", 1)[0]
    if base not in _GENERIC_EVENTS:
        raise ResourceError(f"no perf mapping for event '{base}'")
    return _GENERIC_EVENTS[base]


class _PerfSession(CounterSession):
    def __init__(self, groups: list[EventGroup], pid: int):
        super().__init__(groups)
        self._fds: list[list[int]] = []
        try:
            for group in groups:
                fds: list[int] = []
                leader = -1
                for unit in group.units:
                    ptype, config = _resolve_unit(unit)
                    attr = _PerfEventAttr()
                    attr.type = ptype
                    attr.size = ctypes.sizeof(_PerfEventAttr)
                    attr.config = config
                    attr.flags = (_FLAG_DISABLED | _FLAG_INHERIT |
                                  _FLAG_EXCLUDE_KERNEL | _FLAG_EXCLUDE_HV)
                    fd = _perf_event_open(attr, pid, -1, leader)
                    if leader == -1:
                        leader = fd
                    fds.append(fd)
                self._fds.append(fds)
        except ResourceError:
            self._close_fds()
            raise

    def _close_fds(self):
        for fds in self._fds:
            for fd in fds:
                try:
                    os.close(fd)
                except OSError:
                    pass
        self._fds = []

    def _ioctl_group(self, group_index: int, req: int):
        libc = ctypes.CDLL(None, use_errno=True)
        leader = self._fds[group_index][0]
        if libc.ioctl(leader, req, _PERF_IOC_FLAG_GROUP) != 0:
            err = ctypes.get_errno()
            raise StateError(f"perf ioctl failed: {os.strerror(err)}")

    def _do_start(self, group_index: int) -> None:
        self._ioctl_group(group_index, _PERF_EVENT_IOC_ENABLE)

    def _do_stop(self, group_index: int) -> None:
        self._ioctl_group(group_index, _PERF_EVENT_IOC_DISABLE)

    def _do_read(self, group_index: int) -> tuple[int, ...]:
        # Siblings are read one fd at a time: PERF_FORMAT_GROUP cannot be
        # combined with inherited events.
        values = []
        for fd in self._fds[group_index]:
            values.append(struct.unpack("Q", os.read(fd, 8))[0])
        return tuple(values)

    def _do_close(self) -> None:
        self._close_fds()


class PerfEventBackend:
    """Hardware counters for one process via the perf-events syscall.

    Counts user mode only and is per-process ("pid" defaults to the calling
    process); sampling is never used.  Raises :class:`ResourceError` when the
    kernel refuses counter allocation.
    """

    def __init__(self, group_width: int = 4, pid: int = 0):
        self.descriptor = BackendDescriptor("perf", group_width,
                                            frozenset(_GENERIC_EVENTS))
        self.pid = pid

    def open_session(self, groups: list[EventGroup]) -> _PerfSession:
        return _PerfSession(groups, self.pid)

    @staticmethod
    def is_available() -> bool:
        """Probe whether the kernel grants us a trivial software counter."""
        try:
            attr = _PerfEventAttr()
            attr.type = _PERF_TYPE_SOFTWARE
            attr.size = ctypes.sizeof(_PerfEventAttr)
            attr.config = 0  # CPU_CLOCK
            attr.flags = _FLAG_DISABLED | _FLAG_EXCLUDE_KERNEL | _FLAG_EXCLUDE_HV
            fd = _perf_event_open(attr, 0, -1, -1)
        except ResourceError:
            return False
        os.close(fd)
        return True
