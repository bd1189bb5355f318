"""Discrete-time environment for online deferrable-job deployment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .workload import CapacitySeries, JobRequest, WorkloadTrace

DEFAULT_OMEGA1 = 2.0
DEFAULT_OMEGA2 = 10.0


class ConfigurationError(ValueError):
    pass


class ContractError(RuntimeError):
    """A caller broke an environment precondition (a scheduler bug)."""


@dataclass(frozen=True)
class RunningJob:
    job: JobRequest
    started_at: int

    @property
    def ends_at(self) -> int:
        return self.started_at + self.job.duration

    @property
    def delay(self) -> int:
        return self.started_at - self.job.earliest


@dataclass(frozen=True)
class EnvState:
    t: int
    historical: tuple[RunningJob, ...]
    current: tuple[JobRequest, ...]
    future: tuple[JobRequest, ...]
    capacity_now: int
    expired: frozenset[int] = frozenset()
    deployed_log: dict[int, int] = field(default_factory=dict)
    next_submission: int = 0  # index into the trace of the first unsubmitted job


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    revenue: float
    delay_penalty: float
    violation_penalty: float
    violation: int
    expired_this_step: frozenset[int] = frozenset()


@dataclass(frozen=True)
class Metrics:
    utilization: float = 0.0
    time_delay: float = 0.0
    violation_penalty: float = 0.0
    total_reward: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "utilization": self.utilization,
            "time_delay": self.time_delay,
            "violation_penalty": self.violation_penalty,
            "total_reward": self.total_reward,
        }


def occupied_cores(state: EnvState) -> int:
    return sum(r.job.cores for r in state.historical if r.started_at <= state.t < r.ends_at)


def free_capacity(state: EnvState) -> int:
    return state.capacity_now - occupied_cores(state)


def violation(state: EnvState) -> int:
    return max(0, occupied_cores(state) - state.capacity_now)


def episode_metrics(outcomes: Iterable[StepOutcome]) -> Metrics:
    util = delay = viol = total = 0.0
    for o in outcomes:
        util += o.revenue
        delay += o.delay_penalty
        viol += o.violation_penalty
        total += o.reward
    return Metrics(utilization=util, time_delay=0.0 - delay, violation_penalty=viol, total_reward=total)


class Environment:
    """One trace/capacity pair plus penalty weights.

    ``reset`` and ``step`` are pure: states are immutable and ``step`` returns a
    fresh one, so a state can be replayed or branched freely.
    """

    def __init__(self, trace: WorkloadTrace, capacity: CapacitySeries,
                 omega1: float = DEFAULT_OMEGA1, omega2: float = DEFAULT_OMEGA2):
        if len(capacity) < trace.horizon:
            raise ConfigurationError(
                f"capacity series has {len(capacity)} steps but the trace horizon is {trace.horizon}")
        self.trace = trace
        self.capacity = capacity
        self.omega1 = float(omega1)
        self.omega2 = float(omega2)
        self.horizon = trace.horizon

    def reset(self) -> EnvState:
        return self._advance_to(0, historical=(), current=(), future=(),
                                expired=frozenset(), deployed_log={}, next_submission=0)

    def done(self, state: EnvState) -> bool:
        return state.t >= self.horizon

    def _advance_to(self, t, historical, current, future, expired, deployed_log, next_submission):
        jobs = self.trace.jobs
        future = list(future)
        while next_submission < len(jobs) and jobs[next_submission].submit <= t:
            future.append(jobs[next_submission])
            next_submission += 1
        current = list(current)
        still_future = []
        for j in future:
            if j.earliest <= t:
                current.append(j)
            else:
                still_future.append(j)
        historical = tuple(r for r in historical if r.ends_at > t)
        state = EnvState(
            t=t,
            historical=historical,
            current=tuple(sorted(current, key=lambda j: j.id)),
            future=tuple(sorted(still_future, key=lambda j: j.id)),
            capacity_now=self.capacity.at(t),
            expired=frozenset(expired),
            deployed_log=deployed_log,
            next_submission=next_submission,
        )
        return state

    def step(self, state: EnvState, selection: Sequence[int]) -> tuple[EnvState, StepOutcome]:
        """Deploy ``selection`` (job ids) at ``state.t`` and advance one step."""
        if self.done(state):
            raise ContractError(f"episode already finished at t={state.t}")
        by_id = {j.id: j for j in state.current}
        chosen = []
        seen = set()
        for jid in selection:
            if jid in seen:
                raise ContractError(f"job {jid} selected twice at t={state.t}")
            if jid not in by_id:
                raise ContractError(f"job {jid} is not deployable at t={state.t}")
            seen.add(jid)
            chosen.append(by_id[jid])
        budget = max(0, free_capacity(state))
        need = sum(j.cores for j in chosen)
        if need > budget:
            raise ContractError(f"selection needs {need} cores but only {budget} are free at t={state.t}")

        t = state.t
        started = tuple(RunningJob(j, t) for j in chosen)
        historical = state.historical + started
        occupied = sum(r.job.cores for r in historical if r.started_at <= t < r.ends_at)
        v = max(0, occupied - state.capacity_now)
        revenue = float(sum(j.revenue for j in chosen))
        delay_penalty = self.omega1 * sum(t - j.earliest for j in chosen)
        violation_penalty = self.omega2 * v

        log = dict(state.deployed_log)
        for j in chosen:
            log[j.id] = t
        remaining = [j for j in state.current if j.id not in seen]
        expiring = frozenset(j.id for j in remaining if j.latest <= t)
        remaining = [j for j in remaining if j.id not in expiring]

        nxt = self._advance_to(t + 1, historical, remaining, state.future,
                               state.expired | expiring, log, state.next_submission)
        outcome = StepOutcome(
            reward=revenue - delay_penalty - violation_penalty,
            revenue=revenue,
            delay_penalty=delay_penalty,
            violation_penalty=violation_penalty,
            violation=v,
            expired_this_step=expiring,
        )
        return nxt, outcome
