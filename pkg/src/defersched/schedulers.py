"""Heuristic baselines and the score-order/prefix deployment rule."""

from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np

from .simenv import EnvState, Environment, Metrics, StepOutcome, episode_metrics, free_capacity
from .workload import CapacitySeries, JobRequest, WorkloadTrace


class SchedulerKind(str, enum.Enum):
    FIFO = "fifo"
    SJF = "sjf"
    HRRN = "hrrn"
    TETRIS = "tetris"
    RANDOM = "random"


HEURISTICS = (SchedulerKind.FIFO, SchedulerKind.SJF, SchedulerKind.HRRN, SchedulerKind.TETRIS)

# A policy maps a state to the ordered job ids to deploy now.
Policy = Callable[[EnvState], Sequence[int]]


def select_prefix(ordered_jobs: Sequence[JobRequest], budget: int, skip: bool = False) -> list[int]:
    """Take jobs from the front of ``ordered_jobs`` while their cores fit ``budget``.

    By default the scan stops at the first job that does not fit. With
    ``skip=True`` it passes over that job and keeps packing (greedy variant).
    """
    budget = max(0, budget)
    used = 0
    chosen = []
    for job in ordered_jobs:
        if used + job.cores > budget:
            if skip:
                continue
            break
        used += job.cores
        chosen.append(job.id)
    return chosen


def score(kind: SchedulerKind, state: EnvState, job: JobRequest,
          rng: np.random.Generator | None = None) -> float:
    kind = SchedulerKind(kind)
    if kind is SchedulerKind.FIFO:
        return -float(job.earliest)
    if kind is SchedulerKind.SJF:
        return -float(job.duration)
    if kind is SchedulerKind.HRRN:
        return (state.t - job.earliest + job.duration) / job.duration
    if kind is SchedulerKind.TETRIS:
        return job.cores * max(0, free_capacity(state)) + 1.0 / job.duration
    if rng is None:
        raise ValueError("RANDOM scheduling needs a seeded generator")
    return float(rng.random())


def order_jobs(kind: SchedulerKind, state: EnvState,
               rng: np.random.Generator | None = None) -> list[JobRequest]:
    """Current jobs by descending score; ties go to earlier submit (FIFO only), then lower id."""
    kind = SchedulerKind(kind)
    fifo = kind is SchedulerKind.FIFO
    keyed = [(-score(kind, state, j, rng), j.submit if fifo else 0, j.id, j) for j in state.current]
    keyed.sort(key=lambda k: k[:3])
    return [k[3] for k in keyed]


def heuristic_policy(kind: SchedulerKind, seed: int | None = None, skip: bool = False) -> Policy:
    kind = SchedulerKind(kind)
    if kind is SchedulerKind.RANDOM and seed is None:
        raise ValueError("RANDOM scheduling requires a seed")
    rng = np.random.default_rng(seed) if kind is SchedulerKind.RANDOM else None

    def policy(state: EnvState) -> list[int]:
        return select_prefix(order_jobs(kind, state, rng), free_capacity(state), skip=skip)

    return policy


def run_policy(env: Environment, policy: Policy) -> tuple[Metrics, dict[int, int], list[StepOutcome]]:
    """Play one full episode; returns metrics, the job_id -> start_t log and per-step outcomes."""
    state = env.reset()
    outcomes = []
    while not env.done(state):
        state, outcome = env.step(state, policy(state))
        outcomes.append(outcome)
    return episode_metrics(outcomes), dict(state.deployed_log), outcomes


def run_heuristic(kind: SchedulerKind, trace: WorkloadTrace, capacity: CapacitySeries,
                  omega1: float = 2.0, omega2: float = 10.0, seed: int | None = None,
                  skip: bool = False) -> tuple[Metrics, dict[int, int]]:
    env = Environment(trace, capacity, omega1, omega2)
    metrics, log, _ = run_policy(env, heuristic_policy(kind, seed=seed, skip=skip))
    return metrics, log
