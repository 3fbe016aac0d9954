"""Operator command line: launch, reload, compare, benchmark, pretty-print.

Exit codes: 0 success, 1 usage error, 2 runtime error; ``run`` propagates
the child's exit status.
"""

from __future__ import annotations

import argparse
import glob
import os
import shutil
import signal
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

from .report import (ComparisonError, SchemaError, compare_reports,
                     entries_from_records, parse_report, render_report,
                     ProfileReport)

MODES = ("vanilla", "all", "selective")


class LaunchError(Exception):
    pass


class SignalError(Exception):
    pass


class BuildMissing(Exception):
    pass


def _child_env(config: str | None, out: str | None, map_file: str | None) -> dict:
    env = os.environ.copy()
    if config:
        env["SCALPEL_CONFIG"] = os.path.abspath(config)
    if out:
        env["SCALPEL_OUT"] = os.path.abspath(out)
    if map_file:
        env["SCALPEL_MAP"] = os.path.abspath(map_file)
    return env


def report_files_for(out: str) -> list[str]:
    """Report files produced for an SCALPEL_OUT base path (pid/rank suffixed)."""
    hits = sorted(glob.glob(glob.escape(out) + ".pid*"))
    if os.path.exists(out):
        hits.insert(0, out)
    return hits


def cmd_run(args) -> int:
    target = args.target
    if not os.path.isfile(target):
        raise LaunchError(f"target does not exist: {target}")
    if not os.access(target, os.X_OK):
        raise LaunchError(f"target is not executable: {target}")
    if not os.path.isfile(args.config):
        raise LaunchError(f"config file does not exist: {args.config}")
    env = _child_env(args.config, args.out, args.map)
    try:
        proc = subprocess.run([os.path.abspath(target), *args.args], env=env)
    except OSError as exc:
        raise LaunchError(f"failed to launch {target}: {exc}") from None
    if args.out and not report_files_for(args.out):
        print(f"scalpel: warning: no report produced at {args.out} "
              f"(target not instrumented, or it crashed before exit)",
              file=sys.stderr)
    rc = proc.returncode
    return rc if rc >= 0 else 128 - rc


def _target_config_path(pid: int) -> str | None:
    try:
        with open(f"/proc/{pid}/environ", "rb") as fh:
            env_blob = fh.read()
    except OSError:
        return None
    for chunk in env_blob.split(b"\x00"):
        if chunk.startswith(b"SCALPEL_CONFIG="):
            return chunk.split(b"=", 1)[1].decode()
    return None


def cmd_reload(args) -> int:
    dest = args.dest or _target_config_path(args.pid)
    if dest is None:
        raise SignalError(
            f"cannot determine SCALPEL_CONFIG of pid {args.pid}; pass --dest")
    if not os.path.isfile(args.config):
        raise LaunchError(f"config file does not exist: {args.config}")
    # write-temp-then-rename so the target never sees a half-written config
    dest_dir = os.path.dirname(os.path.abspath(dest)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".scalpel-cfg-", dir=dest_dir)
    try:
        with os.fdopen(fd, "wb") as out:
            with open(args.config, "rb") as src:
                shutil.copyfileobj(src, out)
        os.replace(tmp, dest)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    try:
        os.kill(args.pid, signal.SIGUSR1)
    except (ProcessLookupError, PermissionError) as exc:
        raise SignalError(f"cannot signal pid {args.pid}: {exc}") from None
    print(f"scalpel: sent SIGUSR1 to {args.pid}, config at {dest}")
    return 0


def cmd_compare(args) -> int:
    baseline = _read(args.baseline)
    candidates = [_read(p) for p in args.candidates]
    labels = [os.path.basename(p) for p in args.candidates]
    table = compare_reports(baseline, candidates, labels)
    print(f"baseline: {os.path.basename(args.baseline)}")
    print(table.render(percent=True))
    return 0


def cmd_report(args) -> int:
    records = parse_report(_read(args.csv))
    epochs = sorted({rec.epoch for rec in records})
    for epoch in epochs:
        entries = entries_from_records(records, epoch)
        report = ProfileReport(os.path.basename(args.csv), epoch, 0, None, entries)
        text = render_report(report)
        # human-readable part only; the records are already on disk
        print("\n".join(line[2:] if line.startswith("# ") else line
                        for line in text.splitlines()
                        if line.startswith("#")))
        print()
    return 0


@dataclass
class BenchRow:
    mode: str
    reps: int
    median: float
    minimum: float
    maximum: float
    times: tuple[float, ...]


def bench_fixture(bin_dir: str, fixture: str, reps: int, run_args: list[str],
                  config: str | None, modes=MODES) -> list[BenchRow]:
    """Time each instrumentation variant of a fixture, sequentially."""
    binaries = {}
    for mode in modes:
        path = os.path.join(bin_dir, f"{fixture}_{mode}")
        if not os.path.isfile(path):
            raise BuildMissing(f"variant binary missing: {path}")
        binaries[mode] = path
    rows = []
    with tempfile.TemporaryDirectory(prefix="scalpel-bench-") as tmp:
        for mode in modes:
            env = _child_env(config if mode != "vanilla" else None,
                             os.path.join(tmp, f"bench-{mode}.csv"), None)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                proc = subprocess.run([binaries[mode], *run_args], env=env,
                                      stdout=subprocess.DEVNULL)
                elapsed = time.perf_counter() - t0
                if proc.returncode != 0:
                    raise LaunchError(f"{binaries[mode]} exited with {proc.returncode}")
                times.append(elapsed)
            rows.append(BenchRow(mode, reps, statistics.median(times),
                                 min(times), max(times), tuple(times)))
    return rows


def render_bench(rows: list[BenchRow]) -> str:
    lines = [f"{'mode':<10} {'reps':>4} {'median(s)':>10} {'min(s)':>10} "
             f"{'max(s)':>10} {'spread(s)':>10}"]
    for row in rows:
        spread = f"{row.maximum - row.minimum:.4f}" if row.reps > 1 else "n/a"
        lines.append(f"{row.mode:<10} {row.reps:>4} {row.median:>10.4f} "
                     f"{row.minimum:>10.4f} {row.maximum:>10.4f} {spread:>10}")
    return "\n".join(lines)


def cmd_bench(args) -> int:
    modes = args.modes.split(",") if args.modes else list(MODES)
    for mode in modes:
        if mode not in MODES:
            raise LaunchError(f"unknown mode: {mode}")
    rows = bench_fixture(args.bin_dir, args.fixture, args.reps, args.args,
                         args.config, modes)
    print(render_bench(rows))
    return 0


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; runtime failures exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scalpel",
                     description="function-level performance counter tooling")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="launch an instrumented target")
    p_run.add_argument("target")
    p_run.add_argument("args", nargs="*")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--map", default=None)
    p_run.set_defaults(handler=cmd_run)

    p_reload = sub.add_parser("reload", help="swap a running target's config")
    p_reload.add_argument("pid", type=int)
    p_reload.add_argument("--config", required=True)
    p_reload.add_argument("--dest", default=None,
                          help="target's config path (default: read from /proc)")
    p_reload.set_defaults(handler=cmd_reload)

    p_cmp = sub.add_parser("compare", help="ratio table between report CSVs")
    p_cmp.add_argument("baseline")
    p_cmp.add_argument("candidates", nargs="+")
    p_cmp.set_defaults(handler=cmd_compare)

    p_rep = sub.add_parser("report", help="pretty-print a report CSV")
    p_rep.add_argument("csv")
    p_rep.set_defaults(handler=cmd_report)

    p_bench = sub.add_parser("bench", help="time instrumentation variants")
    p_bench.add_argument("--bin-dir", required=True)
    p_bench.add_argument("--fixture", required=True)
    p_bench.add_argument("--reps", type=int, default=5)
    p_bench.add_argument("--config", default=None)
    p_bench.add_argument("--mode", dest="modes", default=None,
                         help="comma-separated subset of vanilla,all,selective")
    p_bench.add_argument("args", nargs="*")
    p_bench.set_defaults(handler=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (LaunchError, SignalError, BuildMissing, SchemaError,
            ComparisonError, OSError) as exc:
        print(f"scalpel: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
