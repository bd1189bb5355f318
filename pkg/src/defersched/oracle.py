"""Exact offline solver for the deferrable scheduling integer program.

Small instances only: a depth-first branch-and-bound over per-job start
choices, with "never scheduled" always among the branches.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .simenv import ContractError
from .workload import CapacitySeries, JobRequest, WorkloadTrace, to_realtime

DEFAULT_BUDGET = 2_000_000


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class OfflineInstance:
    jobs: tuple[JobRequest, ...]
    capacity: CapacitySeries
    omega1: float = 2.0
    omega2: float = 10.0
    horizon: int = 0

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(self.jobs))
        if len(self.capacity) < self.horizon:
            raise ValueError("capacity series shorter than the horizon")

    @classmethod
    def from_trace(cls, trace: WorkloadTrace, capacity: CapacitySeries,
                   omega1: float = 2.0, omega2: float = 10.0) -> "OfflineInstance":
        return cls(trace.jobs, capacity, omega1, omega2, trace.horizon)

    def start_options(self, job: JobRequest) -> range:
        """Admissible start steps: the job's window cut at the horizon."""
        return range(job.earliest, min(job.latest, self.horizon - 1) + 1)

    def search_size(self) -> int:
        return math.prod(len(self.start_options(j)) + 1 for j in self.jobs)


@dataclass(frozen=True)
class OfflinePlan:
    start_times: Mapping[int, int | None]
    objective: float = 0.0


def _penalty_terms(instance: OfflineInstance, starts: Mapping[int, int | None]) -> tuple[int, int, int]:
    horizon = instance.horizon
    occupancy = [0] * horizon
    revenue = delay = 0
    for job in instance.jobs:
        s = starts.get(job.id)
        if s is None:
            continue
        if s not in instance.start_options(job):
            raise ContractError(f"start {s} for job {job.id} lies outside its window")
        revenue += job.revenue
        delay += s - job.earliest
        for t in range(s, min(s + job.duration, horizon)):
            occupancy[t] += job.cores
    over = sum(max(0, occupancy[t] - instance.capacity.at(t)) for t in range(horizon))
    return revenue, delay, over


def _combine(instance: OfflineInstance, revenue: int, delay: int, over: int) -> float:
    return float(revenue) - instance.omega1 * delay - instance.omega2 * over


def objective(instance: OfflineInstance, plan: OfflinePlan | Mapping[int, int | None]) -> float:
    """Revenue minus weighted delay minus weighted capacity overrun of a fixed plan."""
    starts = plan.start_times if isinstance(plan, OfflinePlan) else plan
    unknown = set(starts) - {j.id for j in instance.jobs}
    if unknown:
        raise ContractError(f"plan references unknown jobs {sorted(unknown)}")
    return _combine(instance, *_penalty_terms(instance, starts))


def _tie_key(jobs_by_id: Sequence[JobRequest], starts: Mapping[int, int | None]) -> tuple:
    return tuple(math.inf if starts.get(j.id) is None else starts[j.id] for j in jobs_by_id)


def solve_exact(instance: OfflineInstance, budget: int = DEFAULT_BUDGET) -> OfflinePlan:
    """Maximize the offline objective over every feasible start assignment.

    Ties go to the lexicographically smallest start vector over ascending job
    id, with "unscheduled" ranking after any start time.
    """
    size = instance.search_size()
    if size > budget:
        raise InstanceTooLarge(
            f"instance has {size} candidate assignments, above the budget of {budget}; "
            "shrink the windows or job count, or raise the branch-and-bound limit")
    order = sorted(instance.jobs, key=lambda j: (-j.revenue, j.id))
    by_id = sorted(instance.jobs, key=lambda j: j.id)
    horizon = instance.horizon
    cap = [instance.capacity.at(t) for t in range(horizon)]
    options = [list(instance.start_options(j)) for j in order]
    suffix_revenue = [0] * (len(order) + 1)
    for k in range(len(order) - 1, -1, -1):
        suffix_revenue[k] = suffix_revenue[k + 1] + order[k].revenue

    occupancy = [0] * horizon
    starts: dict[int, int | None] = {}
    best = {"value": -math.inf, "key": None, "starts": {}}

    def descend(k: int, revenue: int, delay: int, over: int) -> None:
        if _combine(instance, revenue + suffix_revenue[k], delay, over) < best["value"]:
            return
        if k == len(order):
            value = _combine(instance, revenue, delay, over)
            key = _tie_key(by_id, starts)
            if value > best["value"] or (value == best["value"] and key < best["key"]):
                best.update(value=value, key=key, starts=dict(starts))
            return
        job = order[k]
        for s in options[k]:
            end = min(s + job.duration, horizon)
            extra = 0
            for t in range(s, end):
                before = occupancy[t] - cap[t]
                extra += max(0, before + job.cores) - max(0, before)
                occupancy[t] += job.cores
            starts[job.id] = s
            descend(k + 1, revenue + job.revenue, delay + s - job.earliest, over + extra)
            for t in range(s, end):
                occupancy[t] -= job.cores
        starts[job.id] = None
        descend(k + 1, revenue, delay, over)
        del starts[job.id]

    descend(0, 0, 0, 0)
    plan_starts = {j.id: best["starts"].get(j.id) for j in by_id}
    return OfflinePlan(plan_starts, objective(instance, plan_starts))


def solve_brute_force(instance: OfflineInstance) -> OfflinePlan:
    """Full enumeration; the independent reference for ``solve_exact``."""
    by_id = sorted(instance.jobs, key=lambda j: j.id)
    choices = [[*instance.start_options(j), None] for j in by_id]
    best_value, best_key, best_starts = -math.inf, None, {}
    for combo in itertools.product(*choices):
        starts = {j.id: s for j, s in zip(by_id, combo)}
        value = objective(instance, starts)
        key = _tie_key(by_id, starts)
        if value > best_value or (value == best_value and key < best_key):
            best_value, best_key, best_starts = value, key, starts
    return OfflinePlan(best_starts, best_value if by_id else 0.0)


def compare_deferrable_realtime(trace: WorkloadTrace, capacity: CapacitySeries,
                                omega2: float = 10.0,
                                budget: int = DEFAULT_BUDGET) -> tuple[float, float]:
    """Optimal utilization-first objective (no delay weight) with and without start windows."""
    deferrable = solve_exact(OfflineInstance.from_trace(trace, capacity, 0.0, omega2), budget)
    realtime = solve_exact(OfflineInstance.from_trace(to_realtime(trace), capacity, 0.0, omega2), budget)
    return deferrable.objective, realtime.objective
