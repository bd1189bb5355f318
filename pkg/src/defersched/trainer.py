"""PPO training loop: rollouts, GAE, clipped updates, aux training and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import neuro as nn
from .neuro import ParamStore, Tape
from .osdec import (
    AuxState,
    ModelConfig,
    aux_forward,
    aux_mse,
    aux_param_names,
    aux_targets,
    aux_train_step,
    featurize,
    forward,
    init_params,
    network_graph,
    sample_scores,
    scores_to_action,
)
from .simenv import ContractError, Environment, Metrics, StepOutcome, episode_metrics, free_capacity
from .workload import CapacitySeries, WorkloadTrace

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "policy_loss", "value_loss", "aux_loss", "eval_mean", "eval_std",
               "utilization", "time_delay", "violation", "lr_policy", "lr_value")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    epsilon: float = 0.2
    batch_size: int = 2048
    minibatch_size: int = 64
    policy_lr: tuple[float, float] = (1e-4, 1e-5)
    value_lr: tuple[float, float] = (2e-4, 2e-5)
    aux_lr: tuple[float, float] = (1e-2, 1e-3)
    workers: int = 16
    epochs_per_update: int = 4
    iterations: int = 200
    eval_trajectories: int = 100
    eval_every: int = 1
    checkpoint_every: int = 0
    value_coef: float = 0.5
    reward_scale: float = 0.05
    normalize_advantages: bool = True
    train_aux: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "policy_lr", tuple(self.policy_lr))
        object.__setattr__(self, "value_lr", tuple(self.value_lr))
        object.__setattr__(self, "aux_lr", tuple(self.aux_lr))
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.minibatch_size < 1 or self.batch_size % self.minibatch_size:
            raise ValueError("batch_size must be a positive multiple of minibatch_size")
        if self.workers < 1 or self.epochs_per_update < 1 or self.iterations < 0:
            raise ValueError("workers and epochs_per_update must be positive, iterations nonnegative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")


def linear_schedule(endpoints: tuple[float, float], iteration: int, iterations: int) -> float:
    start, end = endpoints
    if iterations <= 1:
        return start
    return start + (end - start) * iteration / (iterations - 1)


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class EpisodeSource:
    """A pool of (trace, capacity) pairs that episodes are drawn from."""

    traces: tuple[WorkloadTrace, ...]
    capacities: tuple[CapacitySeries, ...]
    omega1: float = 2.0
    omega2: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        object.__setattr__(self, "capacities", tuple(self.capacities))
        if not self.traces or len(self.traces) != len(self.capacities):
            raise ValueError("need a nonempty, equal-length list of traces and capacities")

    def __len__(self) -> int:
        return len(self.traces)

    def env(self, index: int) -> Environment:
        return Environment(self.traces[index], self.capacities[index], self.omega1, self.omega2)

    def sample(self, rng: np.random.Generator) -> Environment:
        return self.env(int(rng.integers(len(self.traces))))


def episode_seed(seed: int, iteration: int, episode: int) -> np.random.SeedSequence:
    """Stream-splitting rule: one independent stream per (run seed, iteration, episode)."""
    return np.random.SeedSequence([seed, iteration, episode])


@dataclass
class TrajectoryBatch:
    features: np.ndarray
    masks: np.ndarray
    scores: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    histories: np.ndarray
    aux_targets: np.ndarray
    aux_valid: np.ndarray
    episode_metrics: list[Metrics] = field(default_factory=list)
    advantages: np.ndarray | None = None
    advantages_raw: np.ndarray | None = None
    value_targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def transition_key(self, i: int) -> bytes:
        """Bytes identity of one transition, for multiset comparisons."""
        parts = (self.features[i], self.masks[i], self.scores[i], self.logp_old[i:i + 1],
                 self.rewards[i:i + 1], self.values[i:i + 1], self.dones[i:i + 1],
                 self.histories[i], self.aux_targets[i])
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


class _Runner:
    """One episode in flight: environment, state, aux memory and rng stream."""

    def __init__(self, env: Environment, config: ModelConfig, rng: np.random.Generator | None, tag: int):
        self.env = env
        self.state = env.reset()
        self.aux = AuxState(config)
        self.rng = rng
        self.tag = tag
        self.outcomes: list[StepOutcome] = []
        self.rows: list[dict] = []

    @property
    def done(self) -> bool:
        return self.env.done(self.state)


def _play(runners: list[_Runner], params: Mapping[str, np.ndarray], config: ModelConfig,
          deterministic: bool, record: bool) -> None:
    """Advance every runner to the end of its episode in lockstep."""
    active = [r for r in runners if not r.done]
    while active:
        windows = []
        for r in active:
            r.aux.observe(r.state, r.env.horizon)
            windows.append(r.aux.window())
        windows = np.stack(windows)
        if config.use_aux:
            low, high, preds = aux_forward(params, windows, config)
        else:
            low = np.zeros((len(active), config.low_dim))
            high = np.zeros((len(active), config.high_dim))
            preds = np.zeros((len(active), 4))
        feats = [featurize(r.state, low[i], high[i], config, r.env.horizon) for i, r in enumerate(active)]
        x = np.stack([f.matrix for f in feats])
        m = np.stack([f.mask for f in feats])
        out = forward(x, m, config, params)
        for i, r in enumerate(active):
            r.aux.low, r.aux.high, r.aux.predictions = low[i], high[i], preds[i]
            scores, logp = sample_scores(out.mu[i], out.sigma[i], out.mask[i], r.rng, deterministic)
            selection = scores_to_action(scores, feats[i].current_ids, r.state.current,
                                         free_capacity(r.state))
            chosen = [j for j in r.state.current if j.id in set(selection)]
            try:
                nxt, outcome = r.env.step(r.state, selection)
            except ContractError as exc:
                raise ContractError(f"episode {r.tag} at t={r.state.t}: {exc}") from exc
            r.aux.record_step(chosen, outcome)
            r.outcomes.append(outcome)
            if record:
                r.rows.append({
                    "features": x[i], "mask": m[i], "scores": scores, "logp": logp,
                    "reward": outcome.reward, "value": float(out.value[i]),
                    "done": r.env.done(nxt), "t": r.state.t, "history": windows[i],
                    "target": aux_targets(nxt, config, r.env.omega2), "target_valid": not r.env.done(nxt),
                })
            r.state = nxt
        active = [r for r in active if not r.done]


def collect_rollouts(params: Mapping[str, np.ndarray], source: EpisodeSource, config: ModelConfig,
                     ppo: PpoConfig, iteration: int = 0, workers: int | None = None) -> TrajectoryBatch:
    """Run whole episodes, ``workers`` at a time, until at least ``batch_size`` transitions exist.

    Episode ``e`` always draws its trace and noise from ``episode_seed(seed, iteration, e)``,
    so the collected multiset does not depend on ``workers``.
    """
    workers = ppo.workers if workers is None else workers
    runners: list[_Runner] = []
    collected = 0
    episode = 0
    while collected < ppo.batch_size:
        wave = []
        # Size each wave so no episode is started after the batch is already full.
        for _ in range(workers):
            if collected >= ppo.batch_size:
                break
            rng = np.random.default_rng(episode_seed(ppo.seed, iteration, episode))
            env = source.sample(rng)
            wave.append(_Runner(env, config, rng, episode))
            collected += env.horizon
            episode += 1
        _play(wave, params, config, deterministic=False, record=True)
        runners.extend(wave)
    return _to_batch(runners)


def _to_batch(runners: Sequence[_Runner]) -> TrajectoryBatch:
    rows = [(r.tag, row) for r in runners for row in r.rows]
    if not rows:
        raise ContractError("rollout produced no transitions (zero-length episodes)")
    get = lambda key, dtype=np.float64: np.array([row[key] for _, row in rows], dtype=dtype)
    return TrajectoryBatch(
        features=get("features"), masks=get("mask", bool), scores=get("scores"),
        logp_old=get("logp"), rewards=get("reward"), values=get("value"), dones=get("done", bool),
        episode=np.array([tag for tag, _ in rows]), t=get("t", np.int64), histories=get("history"),
        aux_targets=get("target"), aux_valid=get("target_valid", bool),
        episode_metrics=[episode_metrics(r.outcomes) for r in runners],
    )


# ---------------------------------------------------------------- advantages


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Truncated GAE for one finished episode (the value after the last step is 0)."""
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def compute_gae(batch: TrajectoryBatch, gamma: float, lam: float, reward_scale: float = 1.0,
                normalize: bool = True) -> TrajectoryBatch:
    adv = np.zeros(len(batch))
    starts = np.flatnonzero(np.r_[True, batch.episode[1:] != batch.episode[:-1]])
    ends = np.r_[starts[1:], len(batch)]
    seen = set()
    for s, e in zip(starts, ends):
        ep = int(batch.episode[s])
        if ep in seen:
            raise ContractError(f"episode {ep} is not contiguous in the batch")
        seen.add(ep)
        if np.any(np.diff(batch.t[s:e]) != 1) or not batch.dones[e - 1] or batch.dones[s:e - 1].any():
            raise ContractError(f"episode {ep} is not a complete, time-ordered trajectory")
        adv[s:e] = gae(batch.rewards[s:e] * reward_scale, batch.values[s:e], gamma, lam)
    batch.advantages_raw = adv
    batch.value_targets = adv + batch.values
    if normalize and len(adv) > 1:
        std = adv.std()
        batch.advantages = (adv - adv.mean()) / (std if std > 0 else 1.0)
    else:
        batch.advantages = adv.copy()
    return batch


# ---------------------------------------------------------------- updates


@dataclass
class UpdateReport:
    policy_loss: float
    value_loss: float
    mean_ratio: float
    clip_fraction: float


def ppo_minibatch_losses(tape: Tape, nodes, batch: TrajectoryBatch, idx: np.ndarray,
                         config: ModelConfig, epsilon: float):
    """Build (policy loss, value loss, ratios) for one minibatch on ``tape``."""
    mu, sigma, value = network_graph(tape, nodes, batch.features[idx], batch.masks[idx], config)
    cur_mask = batch.masks[idx][:, config.k_max:2 * config.k_max]
    logp = nn.gaussian_log_prob(mu, sigma, batch.scores[idx], cur_mask)
    policy_loss = nn.ppo_policy_loss(logp, batch.logp_old[idx], batch.advantages[idx], epsilon)
    value_loss = nn.mse(value, batch.value_targets[idx])
    ratio = np.exp(logp.value - batch.logp_old[idx])
    return policy_loss, value_loss, ratio


def ppo_update(batch: TrajectoryBatch, store: ParamStore, config: ModelConfig, ppo: PpoConfig,
               policy_lr: float, value_lr: float, rng: np.random.Generator) -> UpdateReport:
    """Clipped-surrogate and value regression passes over shuffled minibatches.

    One backward pass of ``policy_loss + value_coef * value_loss`` gives each
    head its own gradient and the shared encoder the sum; the encoder and policy
    head step at the policy rate, the value head at the value rate.
    """
    if batch.advantages is None:
        raise ContractError("ppo_update needs advantages; call compute_gae first")
    enc_pi = store.names("enc.") + store.names("pi.")
    v_head = store.names("v.")
    n = len(batch)
    losses, vlosses, ratios, clipped = [], [], [], []
    for _ in range(ppo.epochs_per_update):
        perm = rng.permutation(n)
        for lo in range(0, n, ppo.minibatch_size):
            idx = perm[lo:lo + ppo.minibatch_size]
            tape = Tape()
            nodes = {k: tape.param(store[k]) for k in enc_pi + v_head}
            policy_loss, value_loss, ratio = ppo_minibatch_losses(tape, nodes, batch, idx, config, ppo.epsilon)
            loss = nn.add(policy_loss, nn.scale(value_loss, ppo.value_coef))
            if not np.isfinite(loss.value):
                raise nn.NumericError(f"non-finite PPO loss (policy {policy_loss.value}, value {value_loss.value})")
            tape.backward(loss)
            store.step("policy", {k: nodes[k].grad for k in enc_pi if nodes[k].grad is not None}, policy_lr)
            store.step("value", {k: nodes[k].grad for k in v_head if nodes[k].grad is not None}, value_lr)
            losses.append(float(policy_loss.value))
            vlosses.append(float(value_loss.value))
            ratios.append(ratio)
            clipped.append(np.abs(ratio - 1.0) > ppo.epsilon)
    ratios = np.concatenate(ratios) if ratios else np.ones(0)
    return UpdateReport(
        policy_loss=float(np.mean(losses)) if losses else 0.0,
        value_loss=float(np.mean(vlosses)) if vlosses else 0.0,
        mean_ratio=float(ratios.mean()) if ratios.size else 1.0,
        clip_fraction=float(np.concatenate(clipped).mean()) if clipped else 0.0,
    )


def train_aux_epoch(batch: TrajectoryBatch, store: ParamStore, config: ModelConfig, lr: float,
                    minibatch_size: int, rng: np.random.Generator) -> float:
    """One pass of aux training over the batch's valid targets; returns the mean summed MSE."""
    idx = np.flatnonzero(batch.aux_valid)
    if idx.size == 0:
        return 0.0
    idx = idx[rng.permutation(idx.size)]
    losses = []
    for lo in range(0, idx.size, minibatch_size):
        sel = idx[lo:lo + minibatch_size]
        losses.append(aux_train_step(store, batch.histories[sel], batch.aux_targets[sel], lr, config))
    return float(np.mean(losses))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    mean: float
    std: float
    utilization: float
    time_delay: float
    violation: float
    episodes: list[Metrics]


def evaluate(params: Mapping[str, np.ndarray], source: EpisodeSource, config: ModelConfig,
             n: int = 100, batch: int = 100) -> EvalResult:
    """Deterministic (mean-score) episodes over the first ``n`` pool entries, cycling if needed."""
    results: list[Metrics] = []
    for lo in range(0, n, batch):
        runners = [_Runner(source.env(i % len(source)), config, None, i) for i in range(lo, min(n, lo + batch))]
        _play(runners, params, config, deterministic=True, record=False)
        results.extend(episode_metrics(r.outcomes) for r in runners)
    totals = np.array([m.total_reward for m in results])
    return EvalResult(
        mean=float(totals.mean()),
        std=float(totals.std()) if len(totals) > 1 else 0.0,
        utilization=float(np.mean([m.utilization for m in results])),
        time_delay=float(np.mean([m.time_delay for m in results])),
        violation=float(np.mean([m.violation_penalty for m in results])),
        episodes=results,
    )


# ---------------------------------------------------------------- main loop


@dataclass
class TrainResult:
    store: ParamStore
    log: list[dict]


def format_log(rows: Sequence[Mapping]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=LOG_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})
    return out.getvalue()


def train(model: ModelConfig, ppo: PpoConfig, source: EpisodeSource, eval_source: EpisodeSource | None = None,
          store: ParamStore | None = None, out_dir: str | Path | None = None,
          on_iteration: Callable[[dict], None] | None = None) -> TrainResult:
    """Collect, estimate advantages, train aux heads, update policy/value, evaluate, repeat."""
    store = store if store is not None else init_params(model, ppo.seed)
    eval_source = eval_source or source
    rows: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for it in range(ppo.iterations):
        lr_pi = linear_schedule(ppo.policy_lr, it, ppo.iterations)
        lr_v = linear_schedule(ppo.value_lr, it, ppo.iterations)
        lr_aux = linear_schedule(ppo.aux_lr, it, ppo.iterations)
        rng = np.random.default_rng(np.random.SeedSequence([ppo.seed, it, 2**31]))
        batch = collect_rollouts(store.snapshot(), source, model, ppo, it)
        compute_gae(batch, ppo.gamma, ppo.lam, ppo.reward_scale, ppo.normalize_advantages)
        aux_loss = (train_aux_epoch(batch, store, model, lr_aux, ppo.minibatch_size, rng)
                    if ppo.train_aux and model.use_aux else 0.0)
        report = ppo_update(batch, store, model, ppo, lr_pi, lr_v, rng)
        row = {"iter": it, "policy_loss": report.policy_loss, "value_loss": report.value_loss,
               "aux_loss": aux_loss, "lr_policy": lr_pi, "lr_value": lr_v}
        if (it + 1) % ppo.eval_every == 0 or it == ppo.iterations - 1:
            ev = evaluate(store.params, eval_source, model, ppo.eval_trajectories)
            row.update(eval_mean=ev.mean, eval_std=ev.std, utilization=ev.utilization,
                       time_delay=ev.time_delay, violation=ev.violation)
        else:
            row.update(eval_mean="", eval_std="", utilization="", time_delay="", violation="")
        rows.append(row)
        log.info("iter %d: policy %.4f value %.4f aux %.4f eval %s", it, report.policy_loss,
                 report.value_loss, aux_loss, row["eval_mean"])
        if on_iteration is not None:
            on_iteration(row)
        if out_dir is not None and ppo.checkpoint_every and (it + 1) % ppo.checkpoint_every == 0:
            store.save(out_dir / f"checkpoint_{it + 1:05d}.json")
    if out_dir is not None:
        store.save(out_dir / "checkpoint.json")
        (out_dir / "model_config.json").write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True))
        (out_dir / "train_log.csv").write_text(format_log(rows))
    return TrainResult(store, rows)
