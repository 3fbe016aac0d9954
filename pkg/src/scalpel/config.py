"""Monitoring-context configuration model and its block-structured file format.

The on-disk format is line oriented.  ``//`` introduces a comment that runs to
the end of the line, blank lines are ignored, and keys are case-sensitive.
Blocks nest as ``[FUNCTION] > [EVENT] > [SUBEVENT]`` and every declared
``NO_*`` count must match the number of items actually present:

    BINARY=my_a.out
    NO_FUNCTIONS=1

    [FUNCTION]
    FUNC_NAME=foo
    NO_EVENTS=2
    [EVENT]
    ID=DATA_CACHE_MISSES
    NO_SUBEVENTS=0
    [/EVENT]
    [EVENT]
    ID=DISPATCHED_FPU
    NO_SUBEVENTS=3
    [SUBEVENT]
    ID=OPS_ADD
    ID=OPS_ADD_PIPE_LOAD_OPS
    ID=OPS_MULTIPLY_PIPE_LOAD_OPS
    [/SUBEVENT]
    [/EVENT]
    [/FUNCTION]

``MULTIPLEX_PERIOD=<n>`` may appear inside ``[FUNCTION]``: the monitored
event groups rotate after every ``n`` calls to the function (0 disables
multiplexing, which is the default).
"""

from __future__ import annotations

from dataclasses import dataclass


class ParseError(Exception):
    """Raised on malformed configuration text; carries the offending line."""

    def __init__(self, reason: str, line: int | None = None, function: str | None = None):
        self.reason = reason
        self.line = line
        self.function = function
        where = f"line {line}: " if line is not None else ""
        ctx = f" (function '{function}')" if function else ""
        super().__init__(f"{where}{reason}{ctx}")


def _check_value(label: str, value: str) -> None:
    if not value:
        raise ValueError(f"{label} must be non-empty")
    if "\n" in value or "//" in value:
        raise ValueError(f"{label} must not contain newlines or '//': {value!r}")


@dataclass(frozen=True)
class EventSpec:
    """One hardware event id plus its optional sub-event ids."""

    event_id: str
    subevents: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.event_id or any(c.isspace() for c in self.event_id):
            raise ValueError(f"event id must be non-empty without whitespace: {self.event_id!r}")
        for sub in self.subevents:
            if not sub or any(c.isspace() for c in sub):
                raise ValueError(f"subevent id must be non-empty without whitespace: {sub!r}")

    def units(self) -> tuple[str, ...]:
        """Measurement units this event contributes, one counter each.

        An event with N subevents is measured per subevent ("EVENT:SUBEVENT");
        an event without subevents is one bare unit.
        """
        if self.subevents:
            return tuple(f"{self.event_id}:{sub}" for sub in self.subevents)
        return (self.event_id,)


@dataclass(frozen=True)
class FunctionContextSpec:
    """Per-function monitoring request: events plus the multiplex period."""

    function_name: str
    events: tuple[EventSpec, ...] = ()
    multiplex_period: int = 0

    def __post_init__(self):
        _check_value("function name", self.function_name)
        if self.multiplex_period < 0:
            raise ValueError("multiplex period must be non-negative")

    def units(self) -> tuple[str, ...]:
        out: list[str] = []
        for ev in self.events:
            out.extend(ev.units())
        return tuple(out)


@dataclass(frozen=True)
class ContextConfig:
    binary_name: str
    functions: tuple[FunctionContextSpec, ...] = ()

    def __post_init__(self):
        _check_value("binary name", self.binary_name)
        seen: set[str] = set()
        for fn in self.functions:
            if fn.function_name in seen:
                raise ValueError(f"duplicate function name: {fn.function_name}")
            seen.add(fn.function_name)


_TAGS = {"[FUNCTION]", "[/FUNCTION]", "[EVENT]", "[/EVENT]", "[SUBEVENT]", "[/SUBEVENT]"}


class _Parser:
    """Recursive-descent parser over comment-stripped lines."""

    def __init__(self, text: str):
        self.lines: list[tuple[int, str]] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            cut = raw.find("//")
            if cut >= 0:
                raw = raw[:cut]
            stripped = raw.strip()
            if stripped:
                self.lines.append((lineno, stripped))
        self.pos = 0

    def peek(self) -> tuple[int, str] | None:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def next(self) -> tuple[int, str]:
        item = self.lines[self.pos]
        self.pos += 1
        return item

    @staticmethod
    def split_kv(line: str, lineno: int) -> tuple[str, str]:
        if "=" not in line:
            raise ParseError(f"expected KEY=VALUE or block tag, got {line!r}", lineno)
        key, _, value = line.partition("=")
        return key.strip(), value.strip()

    @staticmethod
    def parse_count(key: str, value: str, lineno: int) -> int:
        try:
            n = int(value)
        except ValueError:
            raise ParseError(f"non-integer count for {key}: {value!r}", lineno) from None
        if n < 0:
            raise ParseError(f"negative count for {key}: {n}", lineno)
        return n

    def parse_config(self) -> ContextConfig:
        binary: str | None = None
        declared: int | None = None
        functions: list[FunctionContextSpec] = []
        names: set[str] = set()
        last_line = 0
        while (item := self.peek()) is not None:
            lineno, line = item
            last_line = lineno
            if line == "[FUNCTION]":
                self.next()
                fn, fn_line = self.parse_function(lineno)
                if fn.function_name in names:
                    raise ParseError(f"duplicate function name: {fn.function_name}",
                                     fn_line, fn.function_name)
                names.add(fn.function_name)
                functions.append(fn)
            elif line in _TAGS:
                raise ParseError(f"unexpected block tag {line} at top level", lineno)
            else:
                self.next()
                key, value = self.split_kv(line, lineno)
                if key == "BINARY":
                    if binary is not None:
                        raise ParseError("duplicate BINARY key", lineno)
                    if not value:
                        raise ParseError("BINARY value must be non-empty", lineno)
                    binary = value
                elif key == "NO_FUNCTIONS":
                    if declared is not None:
                        raise ParseError("duplicate NO_FUNCTIONS key", lineno)
                    declared = self.parse_count(key, value, lineno)
                else:
                    raise ParseError(f"unknown key at top level: {key}", lineno)
        if binary is None:
            raise ParseError("missing BINARY key", last_line or None)
        if declared is None:
            raise ParseError("missing NO_FUNCTIONS key", last_line or None)
        if declared != len(functions):
            raise ParseError(
                f"function count mismatch: NO_FUNCTIONS={declared} but found {len(functions)}",
                last_line or None)
        return ContextConfig(binary_name=binary, functions=tuple(functions))

    def parse_function(self, open_line: int) -> tuple[FunctionContextSpec, int]:
        name: str | None = None
        declared: int | None = None
        period: int | None = None
        events: list[EventSpec] = []
        while True:
            item = self.peek()
            if item is None:
                raise ParseError("unclosed [FUNCTION] block", open_line)
            lineno, line = self.next()
            if line == "[/FUNCTION]":
                if name is None:
                    raise ParseError("missing FUNC_NAME key", lineno)
                if declared is None:
                    raise ParseError("missing NO_EVENTS key", lineno, name)
                if declared != len(events):
                    raise ParseError(
                        f"event count mismatch: NO_EVENTS={declared} but found {len(events)}",
                        lineno, name)
                return FunctionContextSpec(name, tuple(events), period or 0), lineno
            if line == "[EVENT]":
                events.append(self.parse_event(lineno, name))
            elif line in _TAGS:
                raise ParseError(f"unexpected block tag {line} inside [FUNCTION]", lineno, name)
            else:
                key, value = self.split_kv(line, lineno)
                if key == "FUNC_NAME":
                    if name is not None:
                        raise ParseError("duplicate FUNC_NAME key", lineno, name)
                    if not value:
                        raise ParseError("FUNC_NAME value must be non-empty", lineno)
                    name = value
                elif key == "NO_EVENTS":
                    if declared is not None:
                        raise ParseError("duplicate NO_EVENTS key", lineno, name)
                    declared = self.parse_count(key, value, lineno)
                elif key == "MULTIPLEX_PERIOD":
                    if period is not None:
                        raise ParseError("duplicate MULTIPLEX_PERIOD key", lineno, name)
                    period = self.parse_count(key, value, lineno)
                else:
                    raise ParseError(f"unknown key inside [FUNCTION]: {key}", lineno, name)

    def parse_event(self, open_line: int, function: str | None) -> EventSpec:
        event_id: str | None = None
        declared: int | None = None
        subevents: list[str] | None = None
        while True:
            item = self.peek()
            if item is None:
                raise ParseError("unclosed [EVENT] block", open_line, function)
            lineno, line = self.next()
            if line == "[/EVENT]":
                if event_id is None:
                    raise ParseError("missing ID key in [EVENT]", lineno, function)
                if declared is None:
                    raise ParseError("missing NO_SUBEVENTS key", lineno, function)
                found = subevents or []
                if declared != len(found):
                    raise ParseError(
                        f"subevent count mismatch: NO_SUBEVENTS={declared} but found {len(found)}",
                        lineno, function)
                try:
                    return EventSpec(event_id, tuple(found))
                except ValueError as exc:
                    raise ParseError(str(exc), lineno, function) from None
            if line == "[SUBEVENT]":
                if subevents is not None:
                    raise ParseError("duplicate [SUBEVENT] block", lineno, function)
                subevents = self.parse_subevents(lineno, function)
            elif line in _TAGS:
                raise ParseError(f"unexpected block tag {line} inside [EVENT]", lineno, function)
            else:
                key, value = self.split_kv(line, lineno)
                if key == "ID":
                    if event_id is not None:
                        raise ParseError("duplicate ID key in [EVENT]", lineno, function)
                    event_id = value
                elif key == "NO_SUBEVENTS":
                    if declared is not None:
                        raise ParseError("duplicate NO_SUBEVENTS key", lineno, function)
                    declared = self.parse_count(key, value, lineno)
                else:
                    raise ParseError(f"unknown key inside [EVENT]: {key}", lineno, function)

    def parse_subevents(self, open_line: int, function: str | None) -> list[str]:
        out: list[str] = []
        while True:
            item = self.peek()
            if item is None:
                raise ParseError("unclosed [SUBEVENT] block", open_line, function)
            lineno, line = self.next()
            if line == "[/SUBEVENT]":
                return out
            if line in _TAGS:
                raise ParseError(f"unexpected block tag {line} inside [SUBEVENT]", lineno, function)
            key, value = self.split_kv(line, lineno)
            if key != "ID":
                raise ParseError(f"unknown key inside [SUBEVENT]: {key}", lineno, function)
            if not value:
                raise ParseError("subevent ID must be non-empty", lineno, function)
            out.append(value)


def parse_config(text: str) -> ContextConfig:
    """Parse configuration text into a :class:`ContextConfig`.

    Raises :class:`ParseError` (with line number) on unknown keys, unclosed
    or misnested blocks, declared-count mismatches, duplicate function names
    and non-integer counts.
    """
    return _Parser(text).parse_config()


def serialize_config(cfg: ContextConfig) -> str:
    """Render ``cfg`` in the canonical file layout.

    ``parse_config(serialize_config(cfg))`` is structurally equal to ``cfg``.
    """
    out: list[str] = [f"BINARY={cfg.binary_name}", f"NO_FUNCTIONS={len(cfg.functions)}"]
    for fn in cfg.functions:
        out.append("")
        out.append("[FUNCTION]")
        out.append(f"FUNC_NAME={fn.function_name}")
        out.append(f"NO_EVENTS={len(fn.events)}")
        if fn.multiplex_period:
            out.append(f"MULTIPLEX_PERIOD={fn.multiplex_period}")
        for ev in fn.events:
            out.append("[EVENT]")
            out.append(f"ID={ev.event_id}")
            out.append(f"NO_SUBEVENTS={len(ev.subevents)}")
            if ev.subevents:
                out.append("[SUBEVENT]")
                out.extend(f"ID={sub}" for sub in ev.subevents)
                out.append("[/SUBEVENT]")
            out.append("[/EVENT]")
        out.append("[/FUNCTION]")
    out.append("")
    return "\n".join(out)
