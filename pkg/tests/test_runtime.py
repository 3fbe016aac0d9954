import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from scalpel.backend import StateError
from scalpel.config import EventSpec
from scalpel.runtime import multiplex_group_index

from trace_utils import (RotationOracle, build_setup, check_op_log,
                         count_group_switches, count_sessions, plain_events,
                         random_trace)


def test_single_call_opens_and_closes_one_session():
    setup = build_setup(["foo"], {"foo": {}})
    setup.replay([("enter", "foo"), ("exit", "foo")])
    setup.runtime.on_process_exit()
    ops = [op[0] for op in setup.backend.op_log]
    assert ops == ["open", "start", "stop", "close"]
    assert setup.context("foo").call_count == 1


def test_recursion_keeps_one_session():
    setup = build_setup(["foo"], {"foo": {}})
    setup.replay([("enter", "foo"), ("enter", "foo"),
                  ("exit", "foo"), ("exit", "foo")])
    setup.runtime.on_process_exit()
    assert count_sessions(setup.backend.op_log) == 1
    assert setup.context("foo").call_count == 2
    check_op_log(setup.backend.op_log)


def test_parent_wins_nested_monitored_function():
    setup = build_setup(["foo", "bar"], {"foo": {}, "bar": {}})
    setup.replay([("enter", "foo"), ("enter", "bar"),
                  ("exit", "bar"), ("exit", "foo")])
    setup.runtime.on_process_exit()
    assert count_sessions(setup.backend.op_log) == 1
    assert setup.context("foo").call_count == 1
    assert setup.context("bar").call_count == 1
    assert sum(setup.context("bar").calls_per_group) == 0
    assert setup.runtime.unmatched_exits == 0


def test_adjacent_calls_share_a_session():
    setup = build_setup(["foo"], {"foo": {}})
    setup.replay([("enter", "foo"), ("exit", "foo"),
                  ("enter", "foo"), ("exit", "foo")])
    setup.runtime.on_process_exit()
    assert count_sessions(setup.backend.op_log) == 1
    assert setup.context("foo").call_count == 2


def test_inter_call_gap_attributed_to_function():
    setup = build_setup(["foo"], {"foo": {}})
    unit = "E_foo"
    setup.replay([("enter", "foo")])
    setup.backend.inject(unit, 5)
    setup.replay([("exit", "foo")])
    setup.backend.inject(unit, 3)  # loop overhead between adjacent calls
    setup.replay([("enter", "foo")])
    setup.backend.inject(unit, 2)
    setup.replay([("exit", "foo")])
    setup.runtime.on_process_exit()
    assert setup.context("foo").accumulated[0][0] == 10


def test_no_retain_closes_per_call():
    setup = build_setup(["foo"], {"foo": {}}, retain=False)
    setup.replay([("enter", "foo"), ("exit", "foo"),
                  ("enter", "foo"), ("exit", "foo")])
    assert count_sessions(setup.backend.op_log) == 2
    check_op_log(setup.backend.op_log)


def test_lazy_session_flushes_at_other_entry():
    setup = build_setup(["foo", "bar"], {"foo": {}})
    setup.replay([("enter", "foo"), ("exit", "foo"), ("enter", "bar")])
    # bar is unmonitored, but its entry is the flush point
    assert [op[0] for op in setup.backend.op_log] == ["open", "start", "stop", "close"]
    setup.replay([("exit", "bar")])
    setup.runtime.on_process_exit()


def test_sibling_monitored_after_lazy_flush_gets_own_session():
    setup = build_setup(["foo", "bar"], {"foo": {}, "bar": {}})
    setup.replay([("enter", "foo"), ("exit", "foo"),
                  ("enter", "bar"), ("exit", "bar")])
    setup.runtime.on_process_exit()
    assert count_sessions(setup.backend.op_log) == 2
    assert sum(setup.context("bar").calls_per_group) == 1
    check_op_log(setup.backend.op_log)


def test_lazy_session_flushes_at_enclosing_exit():
    setup = build_setup(["main", "foo"], {"foo": {}})
    setup.replay([("enter", "main"), ("enter", "foo"), ("exit", "foo"),
                  ("exit", "main")])
    assert [op[0] for op in setup.backend.op_log] == ["open", "start", "stop", "close"]
    setup.runtime.on_process_exit()
    assert setup.runtime.unmatched_exits == 0


def test_unmonitored_fast_path_touches_no_backend():
    setup = build_setup(["a", "b", "c"], {"c": {}})
    setup.replay([("enter", "a"), ("enter", "b"), ("exit", "b"), ("exit", "a")])
    assert setup.backend.op_log == []


def test_unmatched_exit_increments_diagnostic():
    setup = build_setup(["foo"], {"foo": {}})
    setup.replay([("exit", "foo")])
    assert setup.runtime.unmatched_exits == 1
    # double exit: depth floors at zero, session survives for retention
    setup.replay([("enter", "foo"), ("exit", "foo"), ("exit", "foo")])
    assert setup.runtime.unmatched_exits == 2
    setup.replay([("enter", "foo"), ("exit", "foo")])
    setup.runtime.on_process_exit()
    assert setup.context("foo").call_count == 2
    check_op_log(setup.backend.op_log)


def test_counting_only_context_without_events():
    setup = build_setup(["f"], {"f": {"events": ()}})
    setup.replay([("enter", "f"), ("exit", "f")] * 3)
    setup.runtime.on_process_exit()
    assert setup.context("f").call_count == 3
    assert setup.backend.op_log == []
    # sessionless exits of a counting-only context are expected, not unmatched
    assert setup.runtime.unmatched_exits == 0


def test_backend_failure_disables_context():
    setup = build_setup(["f"], {"f": {}})

    def broken_open(groups):
        raise StateError("synthetic failure")

    setup.backend.open_session = broken_open
    setup.replay([("enter", "f"), ("exit", "f"), ("enter", "f"), ("exit", "f")])
    ctx = setup.context("f")
    assert ctx.disabled
    assert ctx.call_count == 2  # counting continues after monitoring aborts
    assert setup.runtime.unmatched_exits == 0


# -- multiplexing ---------------------------------------------------------------


def test_multiplex_group_index_examples():
    assert multiplex_group_index(1, 100, 5) == 0
    assert multiplex_group_index(250, 100, 5) == 2
    assert multiplex_group_index(100, 100, 5) == 0
    assert multiplex_group_index(101, 100, 5) == 1


@pytest.mark.parametrize("period", [1, 7, 100])
@pytest.mark.parametrize("num_groups", [1, 2, 5])
def test_multiplex_matches_incremental_oracle(period, num_groups):
    oracle = RotationOracle(period, num_groups)
    for call in range(1, 5000):
        assert multiplex_group_index(call, period, num_groups) == oracle.next_call()


def _multiplexed_setup(num_groups=5, period=100, width=1):
    events = plain_events(num_groups)
    return build_setup(["f"], {"f": {"events": events, "period": period}},
                       width=width)


def test_loop_rotates_groups_in_declared_order():
    setup = _multiplexed_setup()
    assert len(setup.context("f").groups) == 5
    for _ in range(1000):
        setup.replay([("enter", "f"), ("exit", "f")])
    setup.runtime.on_process_exit()
    assert count_sessions(setup.backend.op_log) == 1
    starts = [op[2] for op in setup.backend.op_log if op[0] == "start"]
    assert starts == [0, 1, 2, 3, 4, 0, 1, 2, 3, 4]
    assert setup.context("f").calls_per_group == [200] * 5


def test_500_calls_give_each_group_100():
    setup = _multiplexed_setup()
    for _ in range(500):
        setup.replay([("enter", "f"), ("exit", "f")])
    setup.runtime.on_process_exit()
    assert setup.context("f").calls_per_group == [100] * 5


def test_group_switch_does_not_close_session():
    setup = _multiplexed_setup(num_groups=2, period=1)
    for _ in range(6):
        setup.replay([("enter", "f"), ("exit", "f")])
    setup.runtime.on_process_exit()
    assert count_sessions(setup.backend.op_log) == 1
    assert count_group_switches(setup.backend.op_log) == 5


def test_retention_minimality_switch_bound():
    n, period = 1000, 7
    setup = _multiplexed_setup(num_groups=3, period=period)
    for _ in range(n):
        setup.replay([("enter", "f"), ("exit", "f")])
    setup.runtime.on_process_exit()
    assert count_sessions(setup.backend.op_log) == 1
    assert count_group_switches(setup.backend.op_log) <= -(-n // period)


def test_recursion_does_not_switch_groups_mid_call():
    setup = _multiplexed_setup(num_groups=2, period=1)
    setup.replay([("enter", "f"), ("enter", "f"), ("enter", "f"),
                  ("exit", "f"), ("exit", "f"), ("exit", "f")])
    setup.runtime.on_process_exit()
    starts = [op for op in setup.backend.op_log if op[0] == "start"]
    assert len(starts) == 1  # three recursive calls, one uninterrupted window
    assert sum(setup.context("f").calls_per_group) == 3


def test_counter_values_follow_group_rotation():
    setup = _multiplexed_setup(num_groups=2, period=2, width=1)
    # calls 1,2 -> group 0; calls 3,4 -> group 1
    for call in range(1, 5):
        setup.replay([("enter", "f")])
        setup.backend.inject_active(call * 10)
        setup.replay([("exit", "f")])
    setup.runtime.on_process_exit()
    ctx = setup.context("f")
    assert ctx.accumulated[0][0] == 10 + 20
    assert ctx.accumulated[1][0] == 30 + 40
    assert ctx.calls_per_group == [2, 2]


# -- threading -------------------------------------------------------------------


def test_second_thread_counts_calls_without_session():
    setup = build_setup(["f"], {"f": {}})
    addr = setup.addr("f")
    entered = threading.Event()
    proceed = threading.Event()
    worker_done = threading.Event()

    def worker():
        entered.wait(5)
        setup.runtime.on_function_entry(addr)  # session busy: count only
        setup.runtime.on_function_exit(addr)   # non-owner exit: no-op
        worker_done.set()
        proceed.set()

    thread = threading.Thread(target=worker)
    thread.start()
    setup.runtime.on_function_entry(addr)
    entered.set()
    assert proceed.wait(5)
    setup.runtime.on_function_exit(addr)
    thread.join(5)
    setup.runtime.on_process_exit()
    assert worker_done.is_set()
    assert setup.context("f").call_count == 2
    assert count_sessions(setup.backend.op_log) == 1
    check_op_log(setup.backend.op_log)


# -- randomized traces -------------------------------------------------------------

NAMES = [f"fn{i}" for i in range(8)]


def _run_random_trace(seed: int) -> None:
    rng = random.Random(seed)
    monitored = {}
    for name in rng.sample(NAMES, rng.randint(0, len(NAMES))):
        n_events = rng.randint(1, 6)
        monitored[name] = {"events": plain_events(n_events, prefix=f"E{name}_"),
                           "period": rng.choice([0, 1, 3]) if n_events <= 4
                           else rng.choice([1, 3])}
    setup = build_setup(NAMES, monitored, width=4)
    trace = random_trace(rng, NAMES, max_depth=64,
                         target_events=rng.randint(10, 120))
    setup.replay(trace)
    setup.runtime.on_process_exit()
    check_op_log(setup.backend.op_log)
    entries = {}
    for op, name in trace:
        if op == "enter":
            entries[name] = entries.get(name, 0) + 1
    for name in monitored:
        assert setup.context(name).call_count == entries.get(name, 0), \
            f"count conservation broken for {name} (seed {seed})"


def test_random_traces_small_batch():
    for seed in range(300):
        _run_random_trace(seed)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31))
def test_random_traces_hypothesis(seed):
    _run_random_trace(seed)
