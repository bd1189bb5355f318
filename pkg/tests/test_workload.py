import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defersched.workload import (
    CORE_CASES,
    DURATION_CASES,
    CapacitySeries,
    JobRequest,
    SyntheticSpec,
    WorkloadError,
    WorkloadTrace,
    generate_workload,
    parse_capacity,
    parse_jobs,
    serialize_capacity,
    serialize_jobs,
    to_realtime,
)

HEADER = "id,submit,earliest,latest,duration,cores\n"


@st.composite
def jobs(draw, max_jobs=12):
    n = draw(st.integers(0, max_jobs))
    out = []
    for i in range(n):
        submit = draw(st.integers(0, 50))
        earliest = submit + draw(st.integers(0, 6))
        latest = earliest + draw(st.integers(0, 8))
        out.append(JobRequest(i * 3 + 1, draw(st.integers(1, 16)), draw(st.integers(1, 9)),
                              earliest, latest, submit))
    return out


class TestParseJobs:
    def test_row_maps_fields(self):
        trace = parse_jobs(HEADER + "7,3,5,9,4,2\n")
        assert trace.jobs == (JobRequest(id=7, submit=3, earliest=5, latest=9, duration=4, cores=2),)

    def test_submit_after_earliest_names_job(self):
        with pytest.raises(WorkloadError, match="submit > earliest for job 1"):
            parse_jobs(HEADER + "1,6,5,9,4,2\n")

    def test_header_only_is_empty(self):
        trace = parse_jobs(HEADER)
        assert trace.jobs == () and trace.horizon == 0

    def test_default_horizon(self):
        trace = parse_jobs(HEADER + "1,0,1,4,2,1\n2,0,0,2,5,1\n")
        assert trace.horizon == 4 + 5

    def test_sorted_by_submit(self):
        trace = parse_jobs(HEADER + "5,4,4,4,1,1\n9,1,2,3,1,1\n")
        assert [j.id for j in trace.jobs] == [9, 5]

    def test_malformed_row_names_line(self):
        with pytest.raises(WorkloadError, match="line 3"):
            parse_jobs(HEADER + "1,0,0,1,1,1\n2,0,x,1,1,1\n")
        with pytest.raises(WorkloadError, match="line 2"):
            parse_jobs(HEADER + "1,0,0\n")

    def test_earliest_after_latest(self):
        with pytest.raises(WorkloadError, match="earliest > latest for job 4"):
            parse_jobs(HEADER + "4,0,5,3,1,1\n")

    def test_bad_header(self):
        with pytest.raises(WorkloadError, match="header"):
            parse_jobs("id,cores\n1,2\n")

    @given(jobs())
    def test_round_trip(self, js):
        trace = WorkloadTrace(tuple(js), 60)
        again = parse_jobs(serialize_jobs(trace), horizon=60)
        assert again == trace
        assert serialize_jobs(again) == serialize_jobs(trace)


class TestParseCapacity:
    def test_values(self):
        assert parse_capacity("t,capacity\n0,16\n1,16\n2,8\n").values == (16, 16, 8)

    def test_gap(self):
        with pytest.raises(WorkloadError, match="missing time step 1"):
            parse_capacity("t,capacity\n0,16\n2,8\n")

    def test_negative(self):
        with pytest.raises(WorkloadError, match="negative capacity at t=0"):
            parse_capacity("t,capacity\n0,-4\n")

    def test_duplicate(self):
        with pytest.raises(WorkloadError, match="duplicate time step 0"):
            parse_capacity("t,capacity\n0,1\n0,2\n")

    def test_out_of_order_rows_are_sorted(self):
        assert parse_capacity("t,capacity\n1,3\n0,5\n").values == (5, 3)

    @given(st.lists(st.integers(0, 1000), max_size=40))
    def test_round_trip(self, values):
        cap = CapacitySeries(tuple(values))
        assert parse_capacity(serialize_capacity(cap)) == cap

    def test_at_outside_series(self):
        cap = CapacitySeries((3, 4))
        assert cap.at(1) == 4 and cap.at(2) == 0 and cap.at(-1) == 0


class TestGenerate:
    def test_zero_arrivals(self):
        trace, cap = generate_workload(SyntheticSpec(arrivals_per_step=0.0))
        assert trace.jobs == () and len(cap) == 96

    def test_deterministic(self):
        spec = SyntheticSpec(seed=42)
        a, ca = generate_workload(spec)
        b, cb = generate_workload(spec)
        assert serialize_jobs(a) == serialize_jobs(b)
        assert serialize_capacity(ca) == serialize_capacity(cb)

    def test_seed_changes_output(self):
        a, _ = generate_workload(SyntheticSpec(seed=1))
        b, _ = generate_workload(SyntheticSpec(seed=2))
        assert serialize_jobs(a) != serialize_jobs(b)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**63 - 1), st.sampled_from(sorted(CORE_CASES)), st.sampled_from(sorted(DURATION_CASES)))
    def test_invariants_hold(self, seed, cc, dc):
        spec = SyntheticSpec(seed=seed, core_probs=CORE_CASES[cc], duration_probs=DURATION_CASES[dc])
        trace, cap = generate_workload(spec)
        assert len(cap) == spec.horizon
        lo = round(spec.capacity_floor * spec.capacity_base)
        assert all(lo <= c <= spec.capacity_base for c in cap.values)
        for j in trace.jobs:
            assert 0 <= j.submit < spec.horizon
            assert 0 <= j.earliest - j.submit <= spec.max_lead
            assert 0 <= j.latest - j.earliest <= spec.max_window
            assert j.cores in spec.core_values and j.duration in spec.duration_values
        assert len({j.id for j in trace.jobs}) == len(trace.jobs)

    def test_uniform_core_frequencies(self):
        # Core case 2 is uniform; 10,000 jobs should land within 0.02 of 0.25 each.
        spec = SyntheticSpec(horizon=12_000, arrivals_per_step=1.0, core_probs=CORE_CASES[2], seed=3)
        trace, _ = generate_workload(spec)
        cores = np.array([j.cores for j in trace.jobs[:10_000]])
        assert len(cores) == 10_000
        for v in spec.core_values:
            assert abs(np.mean(cores == v) - 0.25) <= 0.02

    @pytest.mark.parametrize("case", sorted(DURATION_CASES))
    def test_frequencies_within_three_standard_errors(self, case):
        spec = SyntheticSpec(horizon=12_000, arrivals_per_step=1.0, duration_probs=DURATION_CASES[case],
                             core_probs=CORE_CASES[case], seed=100 + case)
        trace, _ = generate_workload(spec)
        sample = trace.jobs[:10_000]
        n = len(sample)
        assert n == 10_000
        for attr, values, probs in (("cores", spec.core_values, spec.core_probs),
                                    ("duration", spec.duration_values, spec.duration_probs)):
            observed = np.array([getattr(j, attr) for j in sample])
            for v, p in zip(values, probs):
                se = np.sqrt(p * (1 - p) / n)
                assert abs(np.mean(observed == v) - p) <= 3 * se + 1e-12, (attr, v)

    def test_poisson_mean(self):
        spec = SyntheticSpec(horizon=20_000, arrivals_per_step=0.42, seed=9)
        trace, _ = generate_workload(spec)
        rate = len(trace.jobs) / spec.horizon
        assert abs(rate - 0.42) <= 3 * np.sqrt(0.42 / spec.horizon)

    @pytest.mark.parametrize("change", [
        {"core_probs": (0.5, 0.5, 0.1, 0.0)},
        {"core_values": (1, 2), "core_probs": (1.0,)},
        {"horizon": 0},
        {"arrivals_per_step": -1.0},
        {"capacity_floor": 1.5},
        {"duration_probs": (1.0, 0, 0, 0, 0, -0.0001)},
    ])
    def test_spec_validation(self, change):
        with pytest.raises(WorkloadError):
            dataclasses.replace(SyntheticSpec(), **change)


class TestRealtime:
    def test_collapses_window(self):
        trace = WorkloadTrace((JobRequest(1, 2, 4, 5, 9, 3),), 20)
        (job,) = to_realtime(trace).jobs
        assert (job.submit, job.earliest, job.latest) == (3, 3, 3)
        assert (job.cores, job.duration, job.id) == (2, 4, 1)

    def test_fixed_point(self):
        trace = WorkloadTrace((JobRequest(1, 2, 4, 3, 3, 3),), 20)
        assert to_realtime(trace) == trace

    def test_empty(self):
        assert to_realtime(WorkloadTrace((), 5)) == WorkloadTrace((), 5)

    @given(jobs())
    def test_idempotent(self, js):
        trace = WorkloadTrace(tuple(js), 60)
        once = to_realtime(trace)
        assert to_realtime(once) == once
