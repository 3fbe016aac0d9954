"""End-to-end checks of the instrumented fixture corpus.

Everything here exercises the externally visible contract: the callback ABI,
the SCALPEL_* environment variables, the config file format, and the report
CSV schema, with the fixtures running as real child processes (plus one
in-process ctypes hosting test driving the Python runtime directly).
"""

import ctypes
import glob
import io
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from scalpel.abi import function_address, install_into_bridge
from scalpel.backend import SimulatedBackend
from scalpel.cli import main as scalpel_main
from scalpel.config import (ContextConfig, EventSpec, FunctionContextSpec,
                            serialize_config)
from scalpel.registry import ContextRegistry
from scalpel.report import entries_from_records, parse_report
from scalpel.runtime import CallbackRuntime
from scalpel.symbols import load_symbol_map

FIXTURE_DIR = Path(__file__).resolve().parent.parent
BIN = FIXTURE_DIR / "bin"


@pytest.fixture(scope="session", autouse=True)
def build_fixtures():
    subprocess.run(["make", "-C", str(FIXTURE_DIR)], check=True,
                   stdout=subprocess.DEVNULL)


def write_config(path: Path, functions, binary="fixture") -> str:
    cfg = ContextConfig(binary, tuple(functions))
    path.write_text(serialize_config(cfg))
    return str(path)


def monitor(name, n_events=1, period=0):
    events = tuple(EventSpec(f"EV{i}") for i in range(n_events))
    return FunctionContextSpec(name, events, period)


def run_fixture(name, variant, args, config=None, out=None, extra_env=None):
    env = os.environ.copy()
    env.pop("SCALPEL_CONFIG", None)
    env.pop("SCALPEL_OUT", None)
    if config:
        env["SCALPEL_CONFIG"] = str(config)
    if out:
        env["SCALPEL_OUT"] = str(out)
    if extra_env:
        env.update(extra_env)
    proc = subprocess.run([str(BIN / f"{name}_{variant}"), *map(str, args)],
                          env=env, capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def read_report(out_base) -> list:
    paths = glob.glob(str(out_base) + ".pid*")
    assert paths, f"no report produced at {out_base}"
    text = "".join(open(p).read() for p in sorted(paths))
    return parse_report(text)


def entry_for(records, name, epoch=0):
    entries = {e.function_name: e for e in entries_from_records(records, epoch)}
    return entries.get(name)


# reference recursion counter: how many times fib() is invoked for n
def fib_invocations(n: int) -> int:
    return 1 if n < 2 else 1 + fib_invocations(n - 1) + fib_invocations(n - 2)


# -- program semantics are untouched by instrumentation -------------------------


@pytest.mark.parametrize("fixture,args", [("loops", [1000]), ("fib", [10]),
                                          ("phases", [30]), ("threads", [500])])
def test_variants_print_identical_checksums(fixture, args, tmp_path):
    config = write_config(tmp_path / "cfg", [monitor("leaf")])
    outputs = {variant: run_fixture(fixture, variant, args, config=config,
                                    out=tmp_path / f"r-{variant}.csv")
               for variant in ("vanilla", "all", "selective")}
    assert outputs["vanilla"] == outputs["all"] == outputs["selective"]
    assert "checksum" in outputs["vanilla"]


# -- call counting through the real callback ABI --------------------------------


def test_loops_leaf_count_exact(tmp_path):
    config = write_config(tmp_path / "cfg", [monitor("leaf")])
    out = tmp_path / "r.csv"
    run_fixture("loops", "selective", [1000], config=config, out=out)
    entry = entry_for(read_report(out), "leaf")
    assert entry.call_count == 1000


def test_loops_zero_iterations(tmp_path):
    config = write_config(tmp_path / "cfg", [monitor("leaf")])
    out = tmp_path / "r.csv"
    run_fixture("loops", "selective", [0], config=config, out=out)
    entry = entry_for(read_report(out), "leaf")
    assert entry.call_count == 0


def test_all_variant_resolves_every_fixture_function(tmp_path):
    # ABI conformance: callback addresses resolve back to the right names
    config = write_config(tmp_path / "cfg",
                          [monitor("leaf"), monitor("helper"), monitor("main")])
    out = tmp_path / "r.csv"
    run_fixture("loops", "all", [500], config=config, out=out)
    records = read_report(out)
    assert entry_for(records, "main").call_count == 1
    assert entry_for(records, "leaf").call_count == 500
    assert entry_for(records, "helper").call_count == 500


def test_fib_recursion_and_parent_wins(tmp_path):
    n = 10
    config = write_config(tmp_path / "cfg",
                          [monitor("fib"), monitor("fib_combine")])
    out = tmp_path / "r.csv"
    run_fixture("fib", "selective", [n], config=config, out=out)
    records = read_report(out)
    fib_entry = entry_for(records, "fib")
    assert fib_entry.call_count == fib_invocations(n) == 177
    # every nested combine call is counted but never separately measured
    combine = entry_for(records, "fib_combine")
    assert combine.call_count == (fib_invocations(n) - 1) // 2 == 88
    assert all(group.calls == 0 for group in combine.groups)


def test_threads_both_counted(tmp_path):
    n = 2000
    config = write_config(tmp_path / "cfg", [monitor("shared_work")])
    out = tmp_path / "r.csv"
    run_fixture("threads", "selective", [n], config=config, out=out)
    entry = entry_for(read_report(out), "shared_work")
    assert entry.call_count == 2 * n


def test_threads_contended_multiplexing(tmp_path):
    # heavy contention on the session slot with group rotation enabled
    n = 50_000
    config = write_config(tmp_path / "cfg",
                          [monitor("shared_work", n_events=8, period=1)])
    out = tmp_path / "r.csv"
    run_fixture("threads", "selective", [n], config=config, out=out)
    entry = entry_for(read_report(out), "shared_work")
    assert entry.call_count == 2 * n
    assert len(entry.groups) == 2
    # monitored calls cannot exceed observed calls; both groups saw work
    assert 0 < sum(g.calls for g in entry.groups) <= 2 * n


def test_fib_zero_still_counts_one_call(tmp_path):
    config = write_config(tmp_path / "cfg", [monitor("fib")])
    out = tmp_path / "r.csv"
    run_fixture("fib", "selective", [0], config=config, out=out)
    assert entry_for(read_report(out), "fib").call_count == 1


def test_rank_env_suffixes_report_path(tmp_path):
    config = write_config(tmp_path / "cfg", [monitor("leaf")])
    out = tmp_path / "r.csv"
    run_fixture("loops", "selective", [10], config=config, out=out,
                extra_env={"OMPI_COMM_WORLD_RANK": "3"})
    paths = glob.glob(str(out) + ".pid*")
    assert len(paths) == 1 and paths[0].endswith(".rank3")


def test_multiplex_rotation_end_to_end(tmp_path):
    # 20 units -> 5 groups of 4; 500 calls at period 100 -> 100 calls each
    config = write_config(tmp_path / "cfg",
                          [monitor("leaf", n_events=20, period=100)])
    out = tmp_path / "r.csv"
    run_fixture("loops", "selective", [500], config=config, out=out)
    entry = entry_for(read_report(out), "leaf")
    assert [group.calls for group in entry.groups] == [100] * 5


def test_unconfigured_run_emits_empty_report(tmp_path):
    out = tmp_path / "r.csv"
    run_fixture("phases", "selective", [5], config=None, out=out)
    assert read_report(out) == []


def test_counting_only_config_end_to_end(tmp_path):
    config = write_config(tmp_path / "cfg", [monitor("leaf", n_events=0)])
    out = tmp_path / "r.csv"
    env = os.environ.copy()
    env.update(SCALPEL_CONFIG=str(config), SCALPEL_OUT=str(out))
    proc = subprocess.run([str(BIN / "loops_selective"), "200"], env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "unmatched" not in proc.stderr
    entry = entry_for(read_report(out), "leaf")
    assert entry.call_count == 200
    assert entry.groups == ()


def test_rarely_called_function_costs_within_two_percent_of_vanilla(tmp_path):
    # Wall-clock medians at 10 calls cannot resolve the ~ns interception cost
    # against process-spawn jitter, so the relative property is derived: the
    # measured per-call overhead, scaled to 10 calls, must sit within 2% of
    # the vanilla baseline for the same tiny run.
    from scalpel.cli import bench_fixture

    config = write_config(tmp_path / "cfg", [monitor("leaf")])
    big_n = 2_000_000
    big = {row.mode: row.median for row in
           bench_fixture(str(BIN), "loops", 3, [str(big_n)], config,
                         modes=("vanilla", "selective"))}
    per_call = max(0.0, (big["selective"] - big["vanilla"]) / big_n)
    small = {row.mode: row.median for row in
             bench_fixture(str(BIN), "loops", 5, ["10"], config,
                           modes=("vanilla",))}
    assert per_call * 10 < 0.02 * small["vanilla"]


def test_map_file_override(tmp_path):
    map_path = tmp_path / "loops.map"
    subprocess.run(f"make -C {FIXTURE_DIR} bin/loops_selective.map >/dev/null "
                   f"&& cp {BIN}/loops_selective.map {map_path}",
                   shell=True, check=True)
    config = write_config(tmp_path / "cfg", [monitor("leaf")])
    out = tmp_path / "r.csv"
    run_fixture("loops", "selective", [123], config=config, out=out,
                extra_env={"SCALPEL_MAP": str(map_path)})
    assert entry_for(read_report(out), "leaf").call_count == 123


def test_unknown_function_is_inert(tmp_path):
    config = write_config(tmp_path / "cfg",
                          [monitor("leaf"), monitor("not_compiled_in")])
    out = tmp_path / "r.csv"
    run_fixture("loops", "selective", [50], config=config, out=out)
    records = read_report(out)
    assert entry_for(records, "leaf").call_count == 50
    assert entry_for(records, "not_compiled_in") is None


# -- reload protocol over a live process -----------------------------------------


def test_reload_between_phases(tmp_path):
    iters = 40
    live_cfg = tmp_path / "live.cfg"
    write_config(live_cfg, [monitor("phase_cache")], binary="phases")
    next_cfg = tmp_path / "next.cfg"
    write_config(next_cfg, [monitor("phase_math")], binary="phases")
    out = tmp_path / "r.csv"
    sync = tmp_path / "sync"

    env = os.environ.copy()
    env.update(SCALPEL_CONFIG=str(live_cfg), SCALPEL_OUT=str(out),
               SCALPEL_PHASES_SYNC=str(sync))
    child = subprocess.Popen([str(BIN / "phases_selective"), str(iters)],
                             env=env, stdout=subprocess.DEVNULL)
    try:
        deadline = time.time() + 20
        while not (tmp_path / "sync.ready").exists():
            assert time.time() < deadline, "fixture never reached the sync point"
            time.sleep(0.02)
        rc = scalpel_main(["reload", str(child.pid), "--config", str(next_cfg)])
        assert rc == 0
        (tmp_path / "sync.go").touch()
        assert child.wait(timeout=60) == 0
    finally:
        if child.poll() is None:
            child.kill()
            child.wait()

    records = read_report(out)
    flushed = entry_for(records, "phase_cache", epoch=0)
    assert flushed.call_count == iters
    added = entry_for(records, "phase_math", epoch=1)
    assert added.call_count == iters
    # the deleted function is never monitored after the swap
    assert entry_for(records, "phase_cache", epoch=1) is None


# -- acceptance: end-to-end ABI through the operator CLI --------------------------


def test_acceptance_fib_under_cmd_run(tmp_path, capsys):
    config = write_config(tmp_path / "cfg", [monitor("fib")], binary="fib")
    out = tmp_path / "r.csv"
    rc = scalpel_main(["run", str(BIN / "fib_selective"), "10",
                       "--config", str(config), "--out", str(out)])
    assert rc == 0
    entry = entry_for(read_report(out), "fib")
    assert entry.call_count == fib_invocations(10) == 177

    checksums = {variant: run_fixture("fib", variant, [10], config=config,
                                      out=tmp_path / f"c-{variant}.csv")
                 for variant in ("vanilla", "all", "selective")}
    assert len(set(checksums.values())) == 1
    print("ACCEPTANCE end-to-end-abi: PASS "
          "(fib call_count=177 via cmd_run; identical variant checksums)")


# -- in-process hosting: compiler callbacks drive the Python runtime --------------


def test_ctypes_hosting_python_runtime():
    lib = ctypes.CDLL(str(BIN / "fib_pic.so"))
    lib.fib.restype = ctypes.c_long
    lib.fib.argtypes = [ctypes.c_int]

    symbols = load_symbol_map(str(BIN / "fib_pic.so"))
    bias = symbols.load_bias("fib", function_address(lib, "fib"))
    symbols = symbols.rebase(bias)

    backend = SimulatedBackend()
    registry = ContextRegistry(symbols, backend.descriptor)
    registry.install(ContextConfig("fib_pic.so", (
        FunctionContextSpec("fib", (EventSpec("E"),)),
        FunctionContextSpec("fib_combine", (EventSpec("E"),)),
    )))
    runtime = CallbackRuntime(registry, backend, process_id=0)
    runtime.report_sink = io.StringIO()
    handlers = install_into_bridge(lib, runtime)
    try:
        assert lib.fib(10) == 55
    finally:
        lib.scalpel_set_handlers(None, None)
        del handlers
    runtime.on_process_exit()

    fib_ctx = registry.lookup_context(symbols.lookup_by_name("fib"))
    combine_ctx = registry.lookup_context(symbols.lookup_by_name("fib_combine"))
    assert fib_ctx.call_count == 177
    assert sum(fib_ctx.calls_per_group) == 177
    assert combine_ctx.call_count == 88
    assert sum(combine_ctx.calls_per_group) == 0  # parent wins
    assert sum(1 for op in backend.op_log if op[0] == "open") == 1
