"""Job and capacity data: CSV ingestion and synthetic workload generation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

JOB_HEADER = ("id", "submit", "earliest", "latest", "duration", "cores")
CAPACITY_HEADER = ("t", "capacity")

# Value sets behind the categorical core/duration distributions.
DEFAULT_CORE_VALUES = (1, 2, 4, 8)
DEFAULT_DURATION_VALUES = (1, 2, 3, 4, 5, 6)

CORE_CASES = {
    1: (0.51, 0.37, 0.08, 0.04),
    2: (0.25, 0.25, 0.25, 0.25),
    3: (0.4, 0.3, 0.2, 0.1),
}
DURATION_CASES = {
    1: (1 / 6,) * 6,
    2: (0.4, 0.25, 0.15, 0.1, 0.05, 0.05),
    3: (0.6, 0.25, 0.1, 0.05, 0.0, 0.0),
}


class WorkloadError(ValueError):
    """Raised for malformed or invalid workload data."""


@dataclass(frozen=True)
class JobRequest:
    id: int
    cores: int
    duration: int
    earliest: int
    latest: int
    submit: int

    def __post_init__(self):
        if self.cores < 1:
            raise WorkloadError(f"cores < 1 for job {self.id}")
        if self.duration < 1:
            raise WorkloadError(f"duration < 1 for job {self.id}")
        if self.submit < 0:
            raise WorkloadError(f"negative submit for job {self.id}")
        if self.submit > self.earliest:
            raise WorkloadError(f"submit > earliest for job {self.id}")
        if self.earliest > self.latest:
            raise WorkloadError(f"earliest > latest for job {self.id}")

    @property
    def revenue(self) -> int:
        return self.cores * self.duration


@dataclass(frozen=True)
class WorkloadTrace:
    jobs: tuple[JobRequest, ...]
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(sorted(self.jobs, key=lambda j: (j.submit, j.id))))
        ids = [j.id for j in self.jobs]
        if len(set(ids)) != len(ids):
            raise WorkloadError("duplicate job ids in trace")
        if self.horizon < 0:
            raise WorkloadError("negative horizon")

    def __len__(self) -> int:
        return len(self.jobs)


@dataclass(frozen=True)
class CapacitySeries:
    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        for t, v in enumerate(self.values):
            if v < 0:
                raise WorkloadError(f"negative capacity at t={t}")

    def __len__(self) -> int:
        return len(self.values)

    def at(self, t: int) -> int:
        """Capacity at step ``t``; zero outside the series."""
        if 0 <= t < len(self.values):
            return self.values[t]
        return 0


@dataclass(frozen=True)
class SyntheticSpec:
    horizon: int = 96
    arrivals_per_step: float = 0.42
    core_values: tuple[int, ...] = DEFAULT_CORE_VALUES
    core_probs: tuple[float, ...] = CORE_CASES[1]
    duration_values: tuple[int, ...] = DEFAULT_DURATION_VALUES
    duration_probs: tuple[float, ...] = DURATION_CASES[2]
    max_window: int = 8
    max_lead: int = 4
    capacity_base: int = 16
    capacity_change_every: int = 8
    capacity_floor: float = 0.3
    capacity_step: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("core_values", "core_probs", "duration_values", "duration_probs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.horizon < 1:
            raise WorkloadError("horizon must be positive")
        if self.arrivals_per_step < 0:
            raise WorkloadError("arrivals_per_step must be nonnegative")
        _check_categorical("core", self.core_values, self.core_probs)
        _check_categorical("duration", self.duration_values, self.duration_probs)
        if self.max_window < 0 or self.max_lead < 0:
            raise WorkloadError("max_window and max_lead must be nonnegative")
        if self.capacity_base < 1:
            raise WorkloadError("capacity_base must be positive")
        if self.capacity_change_every < 1:
            raise WorkloadError("capacity_change_every must be positive")
        if not 0.0 <= self.capacity_floor <= 1.0:
            raise WorkloadError("capacity_floor must lie in [0, 1]")


def _check_categorical(name: str, values: Sequence[int], probs: Sequence[float]) -> None:
    if not values:
        raise WorkloadError(f"{name} values must be nonempty")
    if len(values) != len(probs):
        raise WorkloadError(f"{name} values and probabilities differ in length")
    if any(v < 1 for v in values):
        raise WorkloadError(f"{name} values must be positive")
    if any(p < 0 for p in probs):
        raise WorkloadError(f"{name} probabilities must be nonnegative")
    if abs(sum(probs) - 1.0) > 1e-9:
        raise WorkloadError(f"{name} probabilities sum to {sum(probs)!r}, not 1")


def _int_fields(row: list[str], lineno: int, width: int) -> list[int]:
    if len(row) != width:
        raise WorkloadError(f"line {lineno}: expected {width} fields, got {len(row)}")
    try:
        return [int(x) for x in row]
    except ValueError:
        raise WorkloadError(f"line {lineno}: non-integer field in {row!r}") from None


def parse_jobs(text: str, horizon: int | None = None) -> WorkloadTrace:
    """Parse a job CSV into a trace.

    The horizon defaults to ``max(latest) + max(duration)`` (0 for an empty file)
    unless given explicitly.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != JOB_HEADER:
        raise WorkloadError(f"line 1: expected header {','.join(JOB_HEADER)}")
    jobs = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not x.strip() for x in row):
            continue
        jid, submit, earliest, latest, duration, cores = _int_fields(row, lineno, len(JOB_HEADER))
        jobs.append(JobRequest(id=jid, cores=cores, duration=duration,
                               earliest=earliest, latest=latest, submit=submit))
    if horizon is None:
        horizon = max(j.latest for j in jobs) + max(j.duration for j in jobs) if jobs else 0
    return WorkloadTrace(tuple(jobs), horizon)


def serialize_jobs(trace: WorkloadTrace) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(JOB_HEADER)
    for j in trace.jobs:
        writer.writerow((j.id, j.submit, j.earliest, j.latest, j.duration, j.cores))
    return out.getvalue()


def parse_capacity(text: str) -> CapacitySeries:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CAPACITY_HEADER:
        raise WorkloadError(f"line 1: expected header {','.join(CAPACITY_HEADER)}")
    seen: dict[int, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not x.strip() for x in row):
            continue
        t, cap = _int_fields(row, lineno, 2)
        if t in seen:
            raise WorkloadError(f"duplicate time step {t}")
        if t < 0:
            raise WorkloadError(f"line {lineno}: negative time step {t}")
        if cap < 0:
            raise WorkloadError(f"negative capacity at t={t}")
        seen[t] = cap
    for t in range(len(seen)):
        if t not in seen:
            raise WorkloadError(f"missing time step {t}")
    return CapacitySeries(tuple(seen[t] for t in range(len(seen))))


def serialize_capacity(capacity: CapacitySeries) -> str:
    lines = ["t,capacity"] + [f"{t},{v}" for t, v in enumerate(capacity.values)]
    return "\n".join(lines) + "\n"


def capacity_walk(spec: SyntheticSpec, rng: np.random.Generator) -> CapacitySeries:
    """Piecewise-constant random walk on capacity, clipped to [floor*base, base]."""
    base = spec.capacity_base
    lo = spec.capacity_floor * base
    level = float(base)
    values = []
    for t in range(spec.horizon):
        if t > 0 and t % spec.capacity_change_every == 0:
            level += rng.choice((-1.0, 1.0)) * spec.capacity_step * base
            level = min(max(level, lo), float(base))
        values.append(int(round(level)))
    return CapacitySeries(tuple(values))


def generate_workload(spec: SyntheticSpec) -> tuple[WorkloadTrace, CapacitySeries]:
    """Draw a trace and capacity series; output is a pure function of ``spec``."""
    root = np.random.SeedSequence(spec.seed)
    job_seq, cap_seq = root.spawn(2)
    rng = np.random.default_rng(job_seq)
    core_values = np.asarray(spec.core_values)
    dur_values = np.asarray(spec.duration_values)
    jobs = []
    for t in range(spec.horizon):
        n = int(rng.poisson(spec.arrivals_per_step))
        for _ in range(n):
            cores = int(core_values[rng.choice(len(core_values), p=spec.core_probs)])
            duration = int(dur_values[rng.choice(len(dur_values), p=spec.duration_probs)])
            earliest = t + int(rng.integers(0, spec.max_lead + 1))
            latest = earliest + int(rng.integers(0, spec.max_window + 1))
            jobs.append(JobRequest(id=len(jobs), cores=cores, duration=duration,
                                   earliest=earliest, latest=latest, submit=t))
    capacity = capacity_walk(spec, np.random.default_rng(cap_seq))
    return WorkloadTrace(tuple(jobs), spec.horizon), capacity


def to_realtime(trace: WorkloadTrace) -> WorkloadTrace:
    """Collapse every job's start window onto its submission time."""
    jobs = tuple(replace(j, earliest=j.submit, latest=j.submit) for j in trace.jobs)
    return WorkloadTrace(jobs, trace.horizon)
