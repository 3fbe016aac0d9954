"""Accumulated counter reports: formatting, CSV schema, and ratio analysis.

The machine-readable CSV block is the authoritative interchange format:

    function,epoch,group,event,value,calls

one record per function per group per event, values as decimal integers.
A pseudo-record with group ``-1`` and event ``CALLS`` carries the function's
total call count (monitored calls plus calls observed while another session
held the counters).  Human-readable lines are prefixed with ``#`` so a report
file remains a single parseable stream even after partial (reload-flushed)
reports are appended.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field

CSV_HEADER = "function,epoch,group,event,value,calls"

# pseudo-event used for the per-function total-call-count record (group -1)
CALLS_EVENT = "CALLS"

_RANK_ENV_VARS = ("OMPI_COMM_WORLD_RANK", "PMI_RANK", "PMIX_RANK", "SLURM_PROCID")


class SchemaError(Exception):
    """Input lacks the machine-readable header or has malformed records."""


class ComparisonError(Exception):
    """Reports share no (function, event) pair with a nonzero baseline."""


@dataclass(frozen=True)
class GroupReport:
    events: tuple[str, ...]
    values: tuple[int, ...]
    calls: int

    def __post_init__(self):
        if len(self.events) != len(self.values):
            raise ValueError("one value per event required")


@dataclass(frozen=True)
class FunctionReport:
    function_name: str
    call_count: int
    groups: tuple[GroupReport, ...] = ()


@dataclass(frozen=True)
class ProfileReport:
    binary_name: str
    epoch_id: int
    process_id: int
    rank_tag: str | None = None
    entries: tuple[FunctionReport, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.entries, key=lambda e: e.function_name))
        object.__setattr__(self, "entries", ordered)


@dataclass(frozen=True)
class Record:
    function: str
    epoch: int
    group: int
    event: str
    value: int
    calls: int

    def to_line(self) -> str:
        return f"{self.function},{self.epoch},{self.group},{self.event},{self.value},{self.calls}"


def detect_rank_tag(environ=None) -> str | None:
    env = os.environ if environ is None else environ
    for var in _RANK_ENV_VARS:
        if var in env:
            return env[var]
    return None


def output_path(base: str, process_id: int, rank_tag: str | None = None) -> str:
    """Per-process report path; concurrent processes never share a file."""
    path = f"{base}.pid{process_id}"
    if rank_tag is not None:
        path += f".rank{rank_tag}"
    return path


def report_records(report: ProfileReport) -> list[Record]:
    records = []
    for entry in report.entries:
        records.append(Record(entry.function_name, report.epoch_id, -1,
                              CALLS_EVENT, entry.call_count, entry.call_count))
        for gi, group in enumerate(entry.groups):
            for event, value in zip(group.events, group.values):
                records.append(Record(entry.function_name, report.epoch_id,
                                      gi, event, value, group.calls))
    return records


def render_report(report: ProfileReport) -> str:
    """Human-readable table (as ``#`` comments) followed by the CSV block."""
    rank = report.rank_tag if report.rank_tag is not None else "-"
    lines = [f"# counter report: binary={report.binary_name} epoch={report.epoch_id} "
             f"pid={report.process_id} rank={rank}"]
    if not report.entries:
        lines.append("# (no monitored functions)")
    header = f"# {'function':<24} {'calls':>12}  {'group':>5}  {'event':<32} {'value':>16} {'calls@group':>12}"
    lines.append(header)
    for entry in report.entries:
        if not entry.groups:
            lines.append(f"# {entry.function_name:<24} {entry.call_count:>12}  "
                         f"{'-':>5}  {'(calls only)':<32} {'-':>16} {'-':>12}")
        for gi, group in enumerate(entry.groups):
            for event, value in zip(group.events, group.values):
                lines.append(f"# {entry.function_name:<24} {entry.call_count:>12}  "
                             f"{gi:>5}  {event:<32} {value:>16} {group.calls:>12}")
    lines.append(CSV_HEADER)
    lines.extend(rec.to_line() for rec in report_records(report))
    lines.append("")
    return "\n".join(lines)


def emit_report(report: ProfileReport, destination=None) -> None:
    """Write the report to stdout, a file-like object, or a path.

    Paths get the per-process suffix and are opened in append mode so
    reload-flushed partial reports stack up in one file.  I/O failures are
    logged to stderr; they never propagate into the host application.
    """
    text = render_report(report)
    try:
        if destination is None:
            sys.stdout.write(text)
        elif hasattr(destination, "write"):
            destination.write(text)
        else:
            path = output_path(str(destination), report.process_id, report.rank_tag)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(text)
    except OSError as exc:
        print(f"scalpel: report emission failed: {exc}", file=sys.stderr)


def parse_report(text: str) -> list[Record]:
    """Parse every CSV record in ``text`` (all appended blocks).

    Raises :class:`SchemaError` if no ``function,epoch,group,event,value,calls``
    header is present or a record is malformed.
    """
    records: list[Record] = []
    saw_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == CSV_HEADER:
            saw_header = True
            continue
        if not saw_header:
            raise SchemaError(f"line {lineno}: record before the '{CSV_HEADER}' header")
        parts = line.split(",")
        if len(parts) != 6:
            raise SchemaError(f"line {lineno}: expected 6 comma-separated fields")
        try:
            records.append(Record(parts[0], int(parts[1]), int(parts[2]),
                                  parts[3], int(parts[4]), int(parts[5])))
        except ValueError:
            raise SchemaError(f"line {lineno}: non-integer numeric field") from None
    if not saw_header:
        raise SchemaError("input lacks the machine-readable header")
    return records


def entries_from_records(records: list[Record], epoch: int) -> tuple[FunctionReport, ...]:
    """Rebuild FunctionReport structures for one epoch from parsed records."""
    by_fn: dict[str, dict[int, tuple[list[str], list[int], int]]] = {}
    totals: dict[str, int] = {}
    for rec in records:
        if rec.epoch != epoch:
            continue
        if rec.group == -1:
            totals[rec.function] = rec.value
            by_fn.setdefault(rec.function, {})
            continue
        groups = by_fn.setdefault(rec.function, {})
        events, values, _ = groups.setdefault(rec.group, ([], [], rec.calls))
        events.append(rec.event)
        values.append(rec.value)
        groups[rec.group] = (events, values, rec.calls)
    entries = []
    for fn, groups in by_fn.items():
        reports = tuple(GroupReport(tuple(ev), tuple(vals), calls)
                        for _, (ev, vals, calls) in sorted(groups.items()))
        entries.append(FunctionReport(fn, totals.get(fn, 0), reports))
    return tuple(sorted(entries, key=lambda e: e.function_name))


# ---------------------------------------------------------------------------
# comparison (ratio analysis between runs)


@dataclass(frozen=True)
class RatioRow:
    function: str
    event: str
    baseline: int
    values: tuple[int | None, ...]
    ratios: tuple[float | None, ...]


@dataclass(frozen=True)
class RatioTable:
    labels: tuple[str, ...]
    rows: tuple[RatioRow, ...]

    def ratio(self, event: str, candidate: int = 0, function: str | None = None) -> float | None:
        for row in self.rows:
            if row.event == event and (function is None or row.function == function):
                return row.ratios[candidate]
        return None

    def render(self, percent: bool = False) -> str:
        lines = [f"{'function':<20} {'event':<28} {'baseline':>14} " +
                 " ".join(f"{lbl:>14} {'ratio':>8}" + (f" {'diff%':>8}" if percent else "")
                          for lbl in self.labels)]
        for row in self.rows:
            cells = []
            for value, ratio in zip(row.values, row.ratios):
                cells.append(f"{value if value is not None else '-':>14}")
                cells.append(f"{_sig4(ratio):>8}" if ratio is not None else f"{'n/a':>8}")
                if percent:
                    cells.append(f"{(ratio - 1.0) * 100:>8.2f}" if ratio is not None
                                 else f"{'n/a':>8}")
            lines.append(f"{row.function:<20} {row.event:<28} {row.baseline:>14} " + " ".join(cells))
        return "\n".join(lines)


def _sig4(x: float) -> str:
    return f"{x:.4g}"


def _aggregate(records: list[Record]) -> dict[tuple[str, str], int]:
    totals: dict[tuple[str, str], int] = {}
    for rec in records:
        if rec.group == -1:
            continue
        key = (rec.function, rec.event)
        totals[key] = totals.get(key, 0) + rec.value
    return totals


def compare_reports(baseline_text: str, candidate_texts: list[str],
                    labels: list[str] | None = None) -> RatioTable:
    """Ratio of each candidate's counter values against the baseline.

    Values are summed per (function, event) across groups and epochs.  Rows
    where every input counted zero are dropped; a zero baseline against a
    nonzero candidate yields an undefined ratio (rendered ``n/a``), never
    infinity.
    """
    base = _aggregate(parse_report(baseline_text))
    cands = [_aggregate(parse_report(text)) for text in candidate_texts]
    if labels is None:
        labels = [f"candidate{i}" for i in range(len(cands))]
    rows = []
    comparable = False
    for (fn, event), base_value in sorted(base.items()):
        values = [c.get((fn, event)) for c in cands]
        if base_value == 0 and all(not v for v in values):
            continue  # counters returned zeros everywhere: drop
        ratios: list[float | None] = []
        for v in values:
            if v is None or base_value == 0:
                ratios.append(None)
            else:
                ratios.append(v / base_value)
                comparable = True
        rows.append(RatioRow(fn, event, base_value, tuple(values), tuple(ratios)))
    if not comparable:
        raise ComparisonError("no (function, event) pair with a nonzero baseline is shared")
    return RatioTable(tuple(labels), tuple(rows))


# ---------------------------------------------------------------------------
# multiplexed-run normalization


@dataclass(frozen=True)
class EventRate:
    event: str
    per_call: float
    estimate: float


def average_multiplexed(entry: FunctionReport) -> tuple[list[EventRate], list[str]]:
    """Per-call rates and whole-run estimates for a (possibly multiplexed) entry.

    Each group saw only ``calls`` of the function's total calls; dividing by
    that count and scaling by the total call count makes multiplexed and
    exhaustive runs comparable.  Groups that never ran are skipped with a note.
    """
    rates: list[EventRate] = []
    notes: list[str] = []
    for gi, group in enumerate(entry.groups):
        if group.calls == 0:
            notes.append(f"group {gi} of {entry.function_name} skipped: zero monitored calls")
            continue
        for event, value in zip(group.events, group.values):
            per_call = value / group.calls
            rates.append(EventRate(event, per_call, per_call * entry.call_count))
    return rates, notes
