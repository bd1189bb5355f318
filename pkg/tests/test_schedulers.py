import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import random_instance
from defersched.schedulers import (
    HEURISTICS,
    SchedulerKind,
    heuristic_policy,
    order_jobs,
    run_heuristic,
    score,
    select_prefix,
)
from defersched.simenv import EnvState, RunningJob
from defersched.workload import CapacitySeries, JobRequest, WorkloadTrace


def jobs_with(cores=None, durations=None, earliest=None):
    n = len(cores or durations or earliest)
    return [JobRequest(i + 1, (cores or [1] * n)[i], (durations or [1] * n)[i],
                       (earliest or [0] * n)[i], 20, 0) for i in range(n)]


def state_of(current, t=5, capacity=16, running=()):
    return EnvState(t=t, historical=tuple(running), current=tuple(current), future=(), capacity_now=capacity)


class TestSelectPrefix:
    def test_prefix(self):
        assert select_prefix(jobs_with(cores=[2, 4, 6]), 8) == [1, 2]

    def test_strict_prefix_stops_at_first_overflow(self):
        assert select_prefix(jobs_with(cores=[6, 4, 2]), 8) == [1]

    def test_skip_variant(self):
        assert select_prefix(jobs_with(cores=[6, 4, 2]), 8, skip=True) == [1, 3]

    def test_zero_and_negative_budget(self):
        assert select_prefix(jobs_with(cores=[1, 1]), 0) == []
        assert select_prefix(jobs_with(cores=[1, 1]), -3) == []

    @given(st.lists(st.integers(1, 9), max_size=12), st.integers(-5, 40), st.booleans())
    def test_budget_and_prefix_properties(self, cores, budget, skip):
        ordered = jobs_with(cores=cores) if cores else []
        chosen = select_prefix(ordered, budget, skip=skip)
        by_id = {j.id: j for j in ordered}
        assert sum(by_id[i].cores for i in chosen) <= max(0, budget)
        if not skip:
            assert chosen == [j.id for j in ordered[:len(chosen)]]
            if len(chosen) < len(ordered):
                assert sum(by_id[i].cores for i in chosen) + ordered[len(chosen)].cores > max(0, budget)


class TestScore:
    def test_hrrn(self):
        a = JobRequest(1, 1, 2, 1, 9, 0)
        b = JobRequest(2, 1, 4, 3, 9, 0)
        s = state_of([a, b], t=5)
        assert score(SchedulerKind.HRRN, s, a) == 3.0 and score(SchedulerKind.HRRN, s, b) == 1.5
        assert [j.id for j in order_jobs(SchedulerKind.HRRN, s)] == [1, 2]

    def test_sjf(self):
        s = state_of(jobs_with(durations=[3, 1, 2]))
        assert [j.duration for j in order_jobs(SchedulerKind.SJF, s)] == [1, 2, 3]

    def test_tetris(self):
        s = state_of(jobs_with(cores=[2, 8, 4]), capacity=8)
        assert [j.cores for j in order_jobs(SchedulerKind.TETRIS, s)] == [8, 4, 2]

    def test_tetris_uses_nonnegative_free(self):
        running = [RunningJob(JobRequest(9, 10, 5, 0, 0, 0), 3)]
        s = state_of(jobs_with(cores=[2, 8], durations=[1, 2]), capacity=8, running=running)
        # free = -2 -> alignment 0, only 1/duration remains.
        assert score(SchedulerKind.TETRIS, s, s.current[0]) == 1.0
        assert [j.id for j in order_jobs(SchedulerKind.TETRIS, s)] == [1, 2]

    def test_fifo_ties(self):
        jobs = [JobRequest(5, 1, 1, 3, 9, 2), JobRequest(2, 1, 1, 3, 9, 3), JobRequest(7, 1, 1, 1, 9, 1),
                JobRequest(1, 1, 1, 3, 9, 2)]
        assert [j.id for j in order_jobs(SchedulerKind.FIFO, state_of(jobs))] == [7, 1, 5, 2]

    def test_sjf_ties_by_id(self):
        s = state_of(jobs_with(durations=[2, 2, 1]))
        assert [j.id for j in order_jobs(SchedulerKind.SJF, s)] == [3, 1, 2]

    def test_random_requires_seed(self):
        with pytest.raises(ValueError):
            heuristic_policy(SchedulerKind.RANDOM)
        with pytest.raises(ValueError):
            score(SchedulerKind.RANDOM, state_of([]), JobRequest(1, 1, 1, 0, 0, 0))


class TestRunHeuristic:
    def test_empty_trace(self):
        m, log = run_heuristic(SchedulerKind.FIFO, WorkloadTrace((), 4), CapacitySeries((1, 1, 1, 1)))
        assert m.as_dict() == {"utilization": 0.0, "time_delay": 0.0, "violation_penalty": 0.0,
                               "total_reward": 0.0}
        assert log == {}

    def test_single_job(self):
        trace = WorkloadTrace((JobRequest(1, 2, 2, 1, 2, 0),), 4)
        m, log = run_heuristic(SchedulerKind.FIFO, trace, CapacitySeries((2, 2, 2, 2)))
        assert log == {1: 1} and m.utilization == 4.0 and m.time_delay == 0.0

    @pytest.mark.parametrize("kind", [*HEURISTICS, SchedulerKind.RANDOM])
    def test_deterministic(self, kind):
        trace, cap = random_instance(np.random.default_rng(5), max_jobs=12, max_horizon=20)
        assert run_heuristic(kind, trace, cap, seed=3) == run_heuristic(kind, trace, cap, seed=3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([*HEURISTICS, SchedulerKind.RANDOM]), st.booleans())
    def test_windows_respected(self, seed, kind, skip):
        trace, cap = random_instance(np.random.default_rng(seed), max_jobs=10, max_horizon=14)
        _, log = run_heuristic(kind, trace, cap, seed=seed, skip=skip)
        by_id = {j.id: j for j in trace.jobs}
        assert all(by_id[i].earliest <= s <= by_id[i].latest for i, s in log.items())
