"""Command-line entry point: data generation, heuristics, oracle, training, evaluation, comparison."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .neuro import ParamStore
from .oracle import InstanceTooLarge, OfflineInstance, solve_exact
from .osdec import ModelConfig
from .schedulers import HEURISTICS, SchedulerKind, run_heuristic
from .simenv import DEFAULT_OMEGA1, DEFAULT_OMEGA2, ConfigurationError, ContractError, Metrics, episode_metrics
from .trainer import EpisodeSource, PpoConfig, evaluate, format_log, train
from .workload import (
    CapacitySeries,
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

log = logging.getLogger("defersched")

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Where episodes come from: seeded synthetic pools, or one ingested trace."""

    train_traces: int = 64
    eval_traces: int = 100
    train_seed: int = 0
    eval_seed: int = 1000
    jobs: str | None = None
    capacity: str | None = None

    def __post_init__(self):
        if self.train_traces < 1 or self.eval_traces < 1:
            raise ConfigError("train_traces and eval_traces must be positive")
        if (self.jobs is None) != (self.capacity is None):
            raise ConfigError("data.jobs and data.capacity must be given together")


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    omega1: float = DEFAULT_OMEGA1
    omega2: float = DEFAULT_OMEGA2
    workload: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["workload"].pop("seed")
        doc["ppo"].pop("seed")
        return _plain(doc)


_SECTIONS = {"workload": SyntheticSpec, "data": DataConfig, "model": ModelConfig, "ppo": PpoConfig}
# The experiment seed feeds these; they are not separately configurable.
_SEEDED = {"workload", "ppo"}


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build_section(name: str, doc: Any, seed: int):
    cls = _SECTIONS[name]
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    if name in _SEEDED:
        known.discard("seed")
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    kwargs = dict(doc)
    if name in _SEEDED:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def config_from_dict(doc: Mapping | None) -> ExperimentConfig:
    """Validate a parsed config document; every omitted key keeps its default."""
    doc = dict(doc or {})
    top = {"schema_version", "seed", "omega1", "omega2", *_SECTIONS}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    seed = int(doc.get("seed", 0))
    sections = {name: _build_section(name, doc.get(name), seed) for name in _SECTIONS}
    return ExperimentConfig(SCHEMA_VERSION, seed, float(doc.get("omega1", DEFAULT_OMEGA1)),
                            float(doc.get("omega2", DEFAULT_OMEGA2)), **sections)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is not None and not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc)


def with_overrides(config: ExperimentConfig, seed: int | None = None, omega1: float | None = None,
                   omega2: float | None = None, iterations: int | None = None) -> ExperimentConfig:
    """Apply command-line flags on top of a loaded config (flags win)."""
    doc = config.to_dict()
    if seed is not None:
        doc["seed"] = seed
    if omega1 is not None:
        doc["omega1"] = omega1
    if omega2 is not None:
        doc["omega2"] = omega2
    if iterations is not None:
        doc["ppo"]["iterations"] = iterations
    return config_from_dict(doc)


# ---------------------------------------------------------------- data plumbing


def read_instance(jobs_path: str | Path, capacity_path: str | Path) -> tuple[WorkloadTrace, CapacitySeries]:
    capacity = parse_capacity(Path(capacity_path).read_text())
    trace = parse_jobs(Path(jobs_path).read_text(), horizon=len(capacity))
    return trace, capacity


def synthetic_pool(config: ExperimentConfig, count: int, seed_base: int) -> EpisodeSource:
    traces, capacities = [], []
    for i in range(count):
        trace, capacity = generate_workload(dataclasses.replace(config.workload, seed=seed_base + i))
        traces.append(trace)
        capacities.append(capacity)
    return EpisodeSource(traces, capacities, config.omega1, config.omega2)


def episode_pools(config: ExperimentConfig) -> tuple[EpisodeSource, EpisodeSource]:
    """Training and evaluation pools; pool entry i uses workload seed ``base + i``."""
    data = config.data
    if data.jobs is not None:
        trace, capacity = read_instance(data.jobs, data.capacity)
        single = EpisodeSource([trace], [capacity], config.omega1, config.omega2)
        return single, single
    return (synthetic_pool(config, data.train_traces, config.seed + data.train_seed),
            synthetic_pool(config, data.eval_traces, config.seed + data.eval_seed))


def metrics_document(metrics: Metrics, trace: WorkloadTrace, schedule: Mapping[int, int]) -> dict:
    per_job = []
    for job in sorted(trace.jobs, key=lambda j: j.id):
        start = schedule.get(job.id)
        per_job.append({
            "job_id": job.id,
            "start_t": start,
            "delay": None if start is None else start - job.earliest,
            "revenue": job.revenue if start is not None else 0,
        })
    return {**metrics.as_dict(), "per_job": per_job}


def schedule_csv(schedule: Mapping[int, int | None]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["job_id", "start_t"])
    for job_id in sorted(schedule):
        if schedule[job_id] is not None:
            writer.writerow([job_id, schedule[job_id]])
    return out.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _model_config_for(checkpoint: Path, config_path: str | None) -> ModelConfig:
    if config_path is not None:
        return load_config(config_path).model
    sidecar = checkpoint.parent / "model_config.json"
    if not sidecar.exists():
        raise ConfigError(f"no model_config.json next to {checkpoint}; pass --config")
    return _build_section("model", json.loads(sidecar.read_text()), 0)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    config = load_config(args.spec)
    seed = config.seed if args.seed is None else args.seed
    trace, capacity = generate_workload(dataclasses.replace(config.workload, seed=seed))
    out = Path(args.out)
    _write(out / "jobs.csv", serialize_jobs(trace))
    _write(out / "capacity.csv", serialize_capacity(capacity))
    print(f"wrote {len(trace.jobs)} jobs over {trace.horizon} steps to {out}")
    return 0


def cmd_run_heuristic(args) -> int:
    trace, capacity = read_instance(args.jobs, args.capacity)
    if args.realtime:
        trace = to_realtime(trace)
    metrics, schedule = run_heuristic(SchedulerKind(args.kind), trace, capacity, args.omega1, args.omega2,
                                      seed=args.seed, skip=args.skip)
    doc = metrics_document(metrics, trace, schedule)
    if args.out:
        out = Path(args.out)
        _write(out / "metrics.json", _dump_json(doc))
        _write(out / "schedule.csv", schedule_csv(schedule))
    print(_dump_json(doc) if args.out is None else _dump_json(metrics.as_dict()), end="")
    return 0


def cmd_solve_oracle(args) -> int:
    trace, capacity = read_instance(args.jobs, args.capacity)
    if args.realtime:
        trace = to_realtime(trace)
    instance = OfflineInstance.from_trace(trace, capacity, args.omega1, args.omega2)
    plan = solve_exact(instance, budget=args.budget)
    doc = {"objective": plan.objective, "omega1": args.omega1, "omega2": args.omega2,
           "scheduled": sum(s is not None for s in plan.start_times.values()), "jobs": len(trace.jobs)}
    if args.out:
        out = Path(args.out)
        _write(out / "plan.csv", schedule_csv(plan.start_times))
        _write(out / "objective.json", _dump_json(doc))
    print(_dump_json(doc), end="")
    return 0


def cmd_train(args) -> int:
    config = with_overrides(load_config(args.config), seed=args.seed, iterations=args.iterations)
    source, eval_source = episode_pools(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    result = train(config.model, config.ppo, source, eval_source, out_dir=out)
    print(f"trained {config.ppo.iterations} iterations; outputs in {out}")
    if result.log and result.log[-1]["eval_mean"] != "":
        print(f"final eval mean reward {result.log[-1]['eval_mean']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    checkpoint = Path(args.checkpoint)
    model = _model_config_for(checkpoint, args.config)
    store = ParamStore.load(checkpoint)
    trace, capacity = read_instance(args.jobs, args.capacity)
    if args.realtime:
        trace = to_realtime(trace)
    source = EpisodeSource([trace], [capacity], args.omega1, args.omega2)
    result = evaluate(store.params, source, model, n=1)
    doc = result.episodes[0].as_dict()
    if args.out:
        _write(Path(args.out) / "metrics.json", _dump_json(doc))
    print(_dump_json(doc), end="")
    return 0


COMPARE_COLUMNS = ("method", "utilization", "time_delay", "violation_penalty", "total_reward")


def compare_rows(source: EpisodeSource, n: int, seed: int, realtime: bool = False,
                 policy: tuple[Mapping[str, np.ndarray], ModelConfig] | None = None) -> list[dict]:
    """Mean episode metrics per method over the first ``n`` traces of ``source``."""
    n = min(n, len(source))
    traces = [to_realtime(source.traces[i]) if realtime else source.traces[i] for i in range(n)]
    capacities = list(source.capacities[:n])
    methods: list[tuple[str, list[Metrics]]] = []
    for kind in (*HEURISTICS, SchedulerKind.RANDOM):
        runs = [run_heuristic(kind, tr, cp, source.omega1, source.omega2,
                              seed=seed + i if kind is SchedulerKind.RANDOM else None)[0]
                for i, (tr, cp) in enumerate(zip(traces, capacities))]
        methods.append((kind.value.upper(), runs))
    if policy is not None:
        params, model = policy
        pool = EpisodeSource(traces, capacities, source.omega1, source.omega2)
        methods.append(("OSDEC", evaluate(params, pool, model, n=n).episodes))
    rows = []
    for name, runs in methods:
        rows.append({"method": name, **{k: float(np.mean([getattr(m, k) for m in runs]))
                                        for k in COMPARE_COLUMNS[1:]}})
    return rows


def format_table(rows: Sequence[Mapping]) -> str:
    header = ("Method", "Utilization", "TimeDelay", "Violation", "TotalReward")
    body = [[r["method"]] + [f"{r[k]:.2f}" for k in COMPARE_COLUMNS[1:]] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).rjust(w) if i else str(x).ljust(w) for i, (x, w) in enumerate(zip(line, widths)))
             for line in (header, *body)]
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    config = with_overrides(load_config(args.config), seed=args.seed)
    if args.jobs is not None:
        trace, capacity = read_instance(args.jobs, args.capacity)
        source = EpisodeSource([trace], [capacity], config.omega1, config.omega2)
    else:
        _, source = episode_pools(config)
    policy = None
    if args.checkpoint is not None:
        checkpoint = Path(args.checkpoint)
        model = _model_config_for(checkpoint, args.config)
        policy = (ParamStore.load(checkpoint).params, model)
    n = args.traces if args.traces is not None else len(source)
    rows = compare_rows(source, n, config.seed, realtime=args.realtime, policy=policy)
    if args.out:
        out = io.StringIO()
        writer = csv.DictWriter(out, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows)
        _write(Path(args.out), out.getvalue())
    print(format_table(rows), end="")
    return 0


# ---------------------------------------------------------------- argument parsing


def _add_instance_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--jobs", required=required, help="job CSV")
    p.add_argument("--capacity", required=required, help="capacity CSV")
    p.add_argument("--realtime", action="store_true", help="collapse every window to its earliest start")


def _add_omegas(p: argparse.ArgumentParser) -> None:
    p.add_argument("--omega1", type=float, default=DEFAULT_OMEGA1, help="delay weight")
    p.add_argument("--omega2", type=float, default=DEFAULT_OMEGA2, help="violation weight")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defersched", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="draw a synthetic job trace and capacity series")
    p.add_argument("--spec", help="experiment config (its workload section and seed are used)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run-heuristic", help="run one heuristic scheduler over a trace")
    p.add_argument("--kind", required=True, choices=[k.value for k in SchedulerKind])
    _add_instance_args(p)
    _add_omegas(p)
    p.add_argument("--seed", type=int, default=0, help="seed for the random scheduler")
    p.add_argument("--skip", action="store_true", help="skip jobs that do not fit instead of stopping")
    p.add_argument("--out", help="directory for metrics.json and schedule.csv")
    p.set_defaults(func=cmd_run_heuristic)

    p = sub.add_parser("solve-oracle", help="solve a small instance exactly offline")
    _add_instance_args(p)
    _add_omegas(p)
    p.add_argument("--budget", type=int, default=2_000_000, help="maximum candidate assignments")
    p.add_argument("--out", help="directory for plan.csv and objective.json")
    p.set_defaults(func=cmd_solve_oracle)

    p = sub.add_parser("train", help="train the learned scheduler")
    p.add_argument("--config", help="experiment config (YAML or JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--iterations", type=int, help="override ppo.iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint deterministically on one trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config whose model section matches the checkpoint")
    _add_instance_args(p)
    _add_omegas(p)
    p.add_argument("--out", help="directory for metrics.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="table of mean metrics per method")
    p.add_argument("--config", help="experiment config (its evaluation pool is used)")
    _add_instance_args(p, required=False)
    p.add_argument("--checkpoint", help="include a trained policy")
    p.add_argument("--traces", type=int, help="number of evaluation traces")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="CSV file for the table")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "compare" and (args.jobs is None) != (args.capacity is None):
        parser.error("--jobs and --capacity must be given together")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InstanceTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ConfigurationError, ContractError, WorkloadError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
