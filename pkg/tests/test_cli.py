import os
import signal
import stat
import subprocess
import sys
import textwrap
import time

import pytest

from scalpel.cli import BuildMissing, bench_fixture, main, report_files_for

from test_report import case_study_csv


def _script(path, body):
    path.write_text("#!/bin/sh\n" + body)
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return str(path)


@pytest.fixture
def fake_target(tmp_path):
    # pretends to be an instrumented binary: writes a pid-suffixed report
    body = textwrap.dedent("""\
        [ -n "$SCALPEL_CONFIG" ] || exit 9
        cat > "$SCALPEL_OUT.pid$$" <<'EOF'
        function,epoch,group,event,value,calls
        leaf,0,-1,CALLS,10,10
        leaf,0,0,E,50,10
        EOF
        exit 0
        """)
    return _script(tmp_path / "target", body)


@pytest.fixture
def config_file(tmp_path):
    cfg = tmp_path / "cfg"
    cfg.write_text("BINARY=t\nNO_FUNCTIONS=1\n[FUNCTION]\nFUNC_NAME=leaf\n"
                   "NO_EVENTS=1\n[EVENT]\nID=E\nNO_SUBEVENTS=0\n[/EVENT]\n[/FUNCTION]\n")
    return str(cfg)


def test_run_produces_report(fake_target, config_file, tmp_path, capsys):
    out = str(tmp_path / "report.csv")
    rc = main(["run", fake_target, "--config", config_file, "--out", out])
    assert rc == 0
    assert report_files_for(out)
    assert "warning" not in capsys.readouterr().err


def test_run_warns_when_no_report(config_file, tmp_path, capsys):
    out = str(tmp_path / "nothing.csv")
    rc = main(["run", "/bin/true", "--config", config_file, "--out", out])
    assert rc == 0
    assert "no report produced" in capsys.readouterr().err


def test_run_nonexistent_target(config_file, capsys):
    rc = main(["run", "/no/such/binary", "--config", config_file])
    assert rc == 2
    assert "does not exist" in capsys.readouterr().err


def test_run_missing_config(fake_target, tmp_path, capsys):
    rc = main(["run", fake_target, "--config", str(tmp_path / "absent.cfg")])
    assert rc == 2


def test_run_propagates_child_status(tmp_path, config_file):
    failing = _script(tmp_path / "fail", "exit 7\n")
    rc = main(["run", failing, "--config", config_file])
    assert rc == 7


def test_run_does_not_mutate_parent_environment(fake_target, config_file, tmp_path):
    before = dict(os.environ)
    main(["run", fake_target, "--config", config_file,
          "--out", str(tmp_path / "o.csv")])
    assert dict(os.environ) == before


def test_usage_error_exits_1():
    with pytest.raises(SystemExit) as exit_info:
        main(["run"])  # missing required --config and target
    assert exit_info.value.code == 1


def test_compare_cli_prints_ratio_table(tmp_path, capsys):
    base = tmp_path / "base.csv"
    cand = tmp_path / "cand.csv"
    base.write_text(case_study_csv(0))
    cand.write_text(case_study_csv(2))
    rc = main(["compare", str(base), str(cand)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "DTLB_MISSES" in out
    assert "1.658" in out


def test_compare_schema_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,report\n")
    ok = tmp_path / "ok.csv"
    ok.write_text(case_study_csv(0))
    rc = main(["compare", str(bad), str(ok)])
    assert rc == 2


def test_report_pretty_print(tmp_path, capsys):
    csv = tmp_path / "r.csv"
    csv.write_text("function,epoch,group,event,value,calls\n"
                   "leaf,0,-1,CALLS,10,10\nleaf,0,0,E,50,10\n")
    rc = main(["report", str(csv)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "leaf" in out and "E" in out


def test_reload_replaces_config_and_signals(tmp_path):
    dest = tmp_path / "live.cfg"
    dest.write_text("BINARY=old\nNO_FUNCTIONS=0\n")
    new = tmp_path / "new.cfg"
    new.write_text("BINARY=new\nNO_FUNCTIONS=0\n")
    marker = tmp_path / "signaled"
    child_src = textwrap.dedent(f"""\
        import signal, sys, time
        signal.signal(signal.SIGUSR1,
                      lambda *_: open({str(marker)!r}, "w").write("yes"))
        open({str(tmp_path / "ready")!r}, "w").write("ok")
        time.sleep(20)
        """)
    env = dict(os.environ, SCALPEL_CONFIG=str(dest))
    child = subprocess.Popen([sys.executable, "-c", child_src], env=env)
    try:
        for _ in range(200):
            if (tmp_path / "ready").exists():
                break
            time.sleep(0.02)
        rc = main(["reload", str(child.pid), "--config", str(new)])
        assert rc == 0
        assert dest.read_text().startswith("BINARY=new")
        for _ in range(200):
            if marker.exists():
                break
            time.sleep(0.02)
        assert marker.exists()
    finally:
        child.kill()
        child.wait()


def test_reload_dead_pid_fails(tmp_path, capsys):
    child = subprocess.Popen([sys.executable, "-c", "pass"])
    child.wait()
    cfg = tmp_path / "c.cfg"
    cfg.write_text("BINARY=x\nNO_FUNCTIONS=0\n")
    rc = main(["reload", str(child.pid), "--config", str(cfg),
               "--dest", str(tmp_path / "dest.cfg")])
    assert rc == 2


def _bench_dir(tmp_path, sleepy=False):
    for mode, pause in (("vanilla", 0), ("selective", 0.01), ("all", 0.02)):
        body = f"sleep {pause}\n" if sleepy and pause else "exit 0\n"
        _script(tmp_path / f"loopstub_{mode}", body)
    return str(tmp_path)


def test_bench_structure(tmp_path, capsys):
    bin_dir = _bench_dir(tmp_path)
    rc = main(["bench", "--bin-dir", bin_dir, "--fixture", "loopstub",
               "--reps", "2"])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    modes = [line.split()[0] for line in out[1:] if line.strip()]
    assert modes == ["vanilla", "all", "selective"]


def test_bench_single_rep_has_na_spread(tmp_path, capsys):
    bin_dir = _bench_dir(tmp_path)
    rc = main(["bench", "--bin-dir", bin_dir, "--fixture", "loopstub",
               "--reps", "1"])
    assert rc == 0
    assert "n/a" in capsys.readouterr().out


def test_bench_missing_variant(tmp_path):
    _script(tmp_path / "half_vanilla", "exit 0\n")
    with pytest.raises(BuildMissing):
        bench_fixture(str(tmp_path), "half", 1, [], None)
