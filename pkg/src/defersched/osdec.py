"""The learned scheduler: state featurization, auxiliary predictor, encoder and heads.

A state is encoded as a padded row set (historical, current and future jobs
plus one global capacity row). A permutation-equivariant attention encoder
feeds a Gaussian score head over the current-job rows and a pooled value head.
An auxiliary GRU predictor summarizes recent history; its shared-layer and
task-layer activations are appended to every row as constant features.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import neuro as nn
from .neuro import ParamStore, Tape, Tensor
from .schedulers import select_prefix
from .simenv import EnvState, StepOutcome, free_capacity, occupied_cores
from .workload import JobRequest

log = logging.getLogger(__name__)

# Per-row feature columns.
F_CORES, F_DURATION, F_SLACK, F_WAITED, F_LEAD, F_REMAINING = range(6)
F_HIS, F_CUR, F_FUT, F_GLOBAL = range(6, 10)
F_CAPACITY, F_FREE, F_CLOCK = range(10, 13)
BASE_FEATURES = 13

SUMMARY_DIM = 12
AUX_TASKS = ("capacity", "avg_cores", "avg_duration", "violation")


@dataclass(frozen=True)
class ModelConfig:
    k_max: int = 32
    d_model: int = 64
    encoder_layers: int = 2
    ffn_hidden: int = 128
    heads: int = 1
    aux_hidden_dim: int = 32
    aux_history_len: int = 16
    aux_task_hidden: int = 4
    high_dim: int = 5
    low_dim: int = 5
    high_coef: float = 10.0
    low_coef: float = 10.0
    coef_mode: str = "feature"  # "feature": scale aux vectors; "loss": weight aux losses
    use_aux: bool = True
    sigma_min: float = 1e-3
    sigma_init: float = 0.5
    core_scale: float = 8.0
    duration_scale: float = 6.0
    time_scale: float = 16.0
    capacity_scale: float = 16.0

    def __post_init__(self):
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        for name in ("k_max", "d_model", "encoder_layers", "ffn_hidden", "aux_hidden_dim",
                     "aux_history_len", "aux_task_hidden", "high_dim", "low_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.coef_mode not in ("feature", "loss"):
            raise ValueError("coef_mode must be 'feature' or 'loss'")

    @property
    def rows(self) -> int:
        return 3 * self.k_max + 1

    @property
    def feature_dim(self) -> int:
        return BASE_FEATURES + self.low_dim + self.high_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class JobFeatures:
    matrix: np.ndarray  # [rows, feature_dim]
    mask: np.ndarray  # [rows] bool
    current_ids: tuple[int, ...]  # job id per current slot (network view, <= k_max)


@dataclass
class PolicyOutput:
    mu: np.ndarray
    sigma: np.ndarray
    value: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------- parameters


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x05DEC]))
    d, f, h = config.d_model, config.feature_dim, config.ffn_hidden
    p: dict[str, np.ndarray] = {
        "enc.embed.W": _glorot(rng, f, d),
        "enc.embed.b": np.zeros(d),
    }
    for layer in range(config.encoder_layers):
        pre = f"enc.{layer}."
        for w in ("Wq", "Wk", "Wv"):
            p[pre + w] = _glorot(rng, d, d)
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p[pre + "ff1.W"], p[pre + "ff1.b"] = _glorot(rng, d, h, np.sqrt(2.0)), np.zeros(h)
        p[pre + "ff2.W"], p[pre + "ff2.b"] = _glorot(rng, h, d), np.zeros(d)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
    for head in ("mu", "sigma"):
        p[f"pi.{head}.1.W"], p[f"pi.{head}.1.b"] = _glorot(rng, d, d, np.sqrt(2.0)), np.zeros(d)
        p[f"pi.{head}.2.W"], p[f"pi.{head}.2.b"] = _glorot(rng, d, 1, 0.01), np.zeros(1)
    p["pi.sigma.2.b"] = np.full(1, np.log(np.expm1(config.sigma_init)))
    p["v.W"], p["v.b"] = _glorot(rng, d, 1), np.zeros(1)
    p.update(init_aux_params(config, rng))
    return ParamStore(p)


def init_aux_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    s, hd, th = SUMMARY_DIM, config.aux_hidden_dim, config.aux_task_hidden
    p = {}
    for gate in ("z", "r", "h"):
        p[f"aux.gru.W{gate}"] = _glorot(rng, s, hd)
        p[f"aux.gru.U{gate}"] = _glorot(rng, hd, hd)
        p[f"aux.gru.b{gate}"] = np.zeros(hd)
    p["aux.shared.W"], p["aux.shared.b"] = _glorot(rng, hd, config.low_dim), np.zeros(config.low_dim)
    for task in AUX_TASKS:
        p[f"aux.{task}.W"], p[f"aux.{task}.b"] = _glorot(rng, config.low_dim, th), np.zeros(th)
        p[f"aux.{task}.out.W"], p[f"aux.{task}.out.b"] = np.zeros((th, 1)), np.zeros(1)
    # Fixed projection of the task layers onto the high-level vector; no loss reaches it.
    p["aux.high.W"] = _glorot(rng, th * len(AUX_TASKS), config.high_dim)
    p["aux.high.b"] = np.zeros(config.high_dim)
    return p


def aux_param_names(store: ParamStore) -> list[str]:
    return store.names("aux.")


def policy_param_names(store: ParamStore) -> list[str]:
    return store.names("enc.") + store.names("pi.")


def value_param_names(store: ParamStore) -> list[str]:
    return store.names("enc.") + store.names("v.")


# ---------------------------------------------------------------- auxiliary predictor


class AuxState:
    """Per-episode ring of step summaries plus the latest aux vectors."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.history: deque[np.ndarray] = deque(maxlen=config.aux_history_len)
        self.low = np.zeros(config.low_dim)
        self.high = np.zeros(config.high_dim)
        self.predictions = np.zeros(len(AUX_TASKS))
        self.last_outcome: StepOutcome | None = None
        self.last_selected: tuple[int, int] = (0, 0)  # (jobs, cores) deployed last step

    def window(self) -> np.ndarray:
        """History as a [H, SUMMARY_DIM] array, zero-padded at the front."""
        h = self.config.aux_history_len
        out = np.zeros((h, SUMMARY_DIM))
        if self.history:
            out[h - len(self.history):] = np.stack(self.history)
        return out

    def observe(self, state: EnvState, horizon: int) -> np.ndarray:
        summary = step_summary(state, self, horizon)
        self.history.append(summary)
        return summary

    def record_step(self, selected: Sequence[JobRequest], outcome: StepOutcome) -> None:
        self.last_selected = (len(selected), sum(j.cores for j in selected))
        self.last_outcome = outcome


def _avg(values: Sequence[int]) -> float:
    return float(np.mean(values)) if values else 0.0


def step_summary(state: EnvState, aux: AuxState, horizon: int) -> np.ndarray:
    c = aux.config
    occ = occupied_cores(state)
    last_v = aux.last_outcome.violation if aux.last_outcome is not None else 0
    return np.array([
        state.capacity_now / c.capacity_scale,
        (state.capacity_now - occ) / c.capacity_scale,
        occ / c.capacity_scale,
        max(0, occ - state.capacity_now) / c.capacity_scale,
        last_v / c.capacity_scale,
        len(state.current) / c.k_max,
        len(state.future) / c.k_max,
        _avg([j.cores for j in state.current]) / c.core_scale,
        _avg([j.duration for j in state.current]) / c.duration_scale,
        aux.last_selected[0] / c.k_max,
        aux.last_selected[1] / c.capacity_scale,
        state.t / max(horizon, 1),
    ])


def aux_targets(next_state: EnvState, config: ModelConfig, omega2: float) -> np.ndarray:
    """Realized next-step values the aux heads learn to predict (empty averages are 0).

    The violation target is the penalty ``omega2 * v`` in capacity-scale units.
    """
    occ = occupied_cores(next_state)
    return np.array([
        next_state.capacity_now / config.capacity_scale,
        _avg([j.cores for j in next_state.current]) / config.core_scale,
        _avg([j.duration for j in next_state.current]) / config.duration_scale,
        omega2 * max(0, occ - next_state.capacity_now) / config.capacity_scale,
    ])


def aux_graph(tape: Tape, p: Mapping[str, Tensor], histories: np.ndarray,
              config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """GRU over [B, H, S] histories -> (low [B, low_dim], high [B, high_dim], predictions [B, 4])."""
    histories = np.asarray(histories, dtype=tape.dtype)
    batch = histories.shape[0]
    gru = {k: p[f"aux.gru.{k}"] for k in nn.GRU_KEYS}
    h = tape.const(np.zeros((batch, config.aux_hidden_dim)))
    for step in range(histories.shape[1]):
        h = nn.gru_cell(tape.const(histories[:, step, :]), h, gru)
    low = nn.tanh(nn.linear(h, p["aux.shared.W"], p["aux.shared.b"]))
    task_layers, preds = [], []
    for task in AUX_TASKS:
        hidden = nn.tanh(nn.linear(low, p[f"aux.{task}.W"], p[f"aux.{task}.b"]))
        task_layers.append(hidden)
        preds.append(nn.linear(hidden, p[f"aux.{task}.out.W"], p[f"aux.{task}.out.b"]))
    high = nn.tanh(nn.linear(nn.concat_last(task_layers), p["aux.high.W"], p["aux.high.b"]))
    return low, high, nn.concat_last(preds)


def aux_forward(params: Mapping[str, np.ndarray], histories: np.ndarray,
                config: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tape = Tape()
    nodes = {k: tape.const(v) for k, v in params.items() if k.startswith("aux.")}
    low, high, preds = aux_graph(tape, nodes, histories, config)
    return low.value, high.value, preds.value


def aux_loss_graph(tape: Tape, p: Mapping[str, Tensor], histories: np.ndarray,
                   targets: np.ndarray, config: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Summed per-task MSE; also returns the per-task MSE values."""
    _, _, preds = aux_graph(tape, p, histories, config)
    weights = np.ones(len(AUX_TASKS))
    if config.coef_mode == "loss":
        weights[:] = 0.5 * (config.high_coef + config.low_coef)
    diff = preds.value - targets
    per_task = (diff * diff).mean(axis=0)
    loss = nn.mse(nn.scale(preds, np.sqrt(weights)), targets * np.sqrt(weights))
    return nn.scale(loss, float(len(AUX_TASKS))), per_task


def aux_train_step(store: ParamStore, histories: np.ndarray, targets: np.ndarray,
                   lr: float, config: ModelConfig) -> float:
    """One Adam step on the aux parameters only; returns the summed 4-task MSE."""
    tape = Tape()
    names = aux_param_names(store)
    nodes = {k: tape.param(store[k]) for k in names}
    loss, per_task = aux_loss_graph(tape, nodes, histories, targets, config)
    if not np.isfinite(loss.value):
        raise nn.NumericError("auxiliary loss is not finite")
    tape.backward(loss)
    grads = {k: nodes[k].grad for k in names if nodes[k].grad is not None}
    store.step("aux", grads, lr)
    return float(per_task.sum())


def aux_mse(params: Mapping[str, np.ndarray], histories: np.ndarray, targets: np.ndarray,
            config: ModelConfig) -> np.ndarray:
    _, _, preds = aux_forward(params, histories, config)
    diff = preds - targets
    return (diff * diff).mean(axis=0)


# ---------------------------------------------------------------- featurization


def _truncate(jobs: Sequence[JobRequest], k_max: int) -> list[JobRequest]:
    return sorted(jobs, key=lambda j: (-j.revenue, j.id))[:k_max]


def featurize(state: EnvState, aux_low: np.ndarray, aux_high: np.ndarray, config: ModelConfig,
              horizon: int, scaled: bool = True) -> JobFeatures:
    """Encode a state as padded job rows plus a global row.

    Row blocks: [0, k) historical, [k, 2k) current, [2k, 3k) future, 3k global.
    ``scaled=False`` leaves raw step/core counts (for inspection and tests).
    """
    c = config
    k = c.k_max
    sc = 1.0 if not scaled else c.core_scale
    sd = 1.0 if not scaled else c.duration_scale
    st = 1.0 if not scaled else c.time_scale
    scap = 1.0 if not scaled else c.capacity_scale
    x = np.zeros((c.rows, c.feature_dim))
    mask = np.zeros(c.rows, dtype=bool)
    t = state.t

    running = sorted(state.historical, key=lambda r: (-r.job.revenue, r.job.id))
    blocks = (
        [r.job for r in running],
        list(state.current),
        list(state.future),
    )
    if any(len(b) > k for b in blocks):
        log.debug("t=%d: truncating job sets %s to k_max=%d", t, [len(b) for b in blocks], k)
    his = running[:k]
    cur = _truncate(state.current, k)
    fut = _truncate(state.future, k)
    for i, r in enumerate(his):
        row = x[i]
        row[F_CORES], row[F_DURATION] = r.job.cores / sc, r.job.duration / sd
        row[F_REMAINING] = (r.ends_at - t) / sd
        row[F_HIS] = 1.0
        mask[i] = True
    for i, j in enumerate(cur):
        row = x[k + i]
        row[F_CORES], row[F_DURATION] = j.cores / sc, j.duration / sd
        row[F_SLACK], row[F_WAITED] = (j.latest - t) / st, (t - j.earliest) / st
        row[F_CUR] = 1.0
        mask[k + i] = True
    for i, j in enumerate(fut):
        row = x[2 * k + i]
        row[F_CORES], row[F_DURATION] = j.cores / sc, j.duration / sd
        row[F_LEAD], row[F_SLACK] = (j.earliest - t) / st, (j.latest - t) / st
        row[F_FUT] = 1.0
        mask[2 * k + i] = True
    g = x[3 * k]
    g[F_GLOBAL] = 1.0
    g[F_CAPACITY] = state.capacity_now / scap
    g[F_FREE] = free_capacity(state) / scap
    g[F_CLOCK] = t / max(horizon, 1)
    mask[3 * k] = True
    if c.use_aux:
        low_scale = c.low_coef if c.coef_mode == "feature" else 1.0
        high_scale = c.high_coef if c.coef_mode == "feature" else 1.0
        x[mask, BASE_FEATURES:BASE_FEATURES + c.low_dim] = np.asarray(aux_low) * low_scale
        x[mask, BASE_FEATURES + c.low_dim:] = np.asarray(aux_high) * high_scale
    return JobFeatures(x, mask, tuple(j.id for j in cur))


# ---------------------------------------------------------------- policy / value network


def network_graph(tape: Tape, p: Mapping[str, Tensor], features: np.ndarray, mask: np.ndarray,
                  config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """[B, rows, F] features -> (mu [B, k], sigma [B, k], value [B])."""
    features = np.asarray(features, dtype=tape.dtype)
    mask = np.asarray(mask, dtype=bool)
    if features.ndim == 2:
        features, mask = features[None], mask[None]
    if not mask.any(axis=-1).all():
        raise ValueError("forward: a state has no live rows")
    k = config.k_max
    live = mask[..., None].astype(tape.dtype)
    x = nn.scale(nn.linear(tape.const(features), p["enc.embed.W"], p["enc.embed.b"]), live)
    for layer in range(config.encoder_layers):
        pre = f"enc.{layer}."
        att = nn.self_attention(x, p[pre + "Wq"], p[pre + "Wk"], p[pre + "Wv"], mask)
        x = nn.scale(nn.layer_norm(nn.add(x, att), p[pre + "ln1.g"], p[pre + "ln1.b"]), live)
        ff = nn.linear(nn.relu(nn.linear(x, p[pre + "ff1.W"], p[pre + "ff1.b"])),
                       p[pre + "ff2.W"], p[pre + "ff2.b"])
        x = nn.scale(nn.layer_norm(nn.add(x, ff), p[pre + "ln2.g"], p[pre + "ln2.b"]), live)
    cur = nn.rows(x, k, 2 * k)

    def head(name):
        hidden = nn.relu(nn.linear(cur, p[f"pi.{name}.1.W"], p[f"pi.{name}.1.b"]))
        return nn.squeeze_last(nn.linear(hidden, p[f"pi.{name}.2.W"], p[f"pi.{name}.2.b"]))

    mu = nn.tanh(head("mu"))
    sigma = nn.shift(nn.softplus(head("sigma")), config.sigma_min)
    per_row = nn.linear(x, p["v.W"], p["v.b"])
    value = nn.squeeze_last(nn.masked_mean(per_row, mask))
    return mu, sigma, value


def forward(features: np.ndarray, mask: np.ndarray, config: ModelConfig,
            params: Mapping[str, np.ndarray]) -> PolicyOutput:
    tape = Tape()
    nodes = {k: tape.const(v) for k, v in params.items() if not k.startswith("aux.")}
    mu, sigma, value = network_graph(tape, nodes, features, mask, config)
    mask = np.asarray(mask, dtype=bool)
    cur_mask = mask[..., config.k_max:2 * config.k_max]
    return PolicyOutput(mu.value, sigma.value, value.value, cur_mask)


def sample_scores(mu: np.ndarray, sigma: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None,
                  deterministic: bool = False) -> tuple[np.ndarray, float]:
    """Draw confidence scores for one state; returns (scores, summed log-density over live slots)."""
    mask = np.asarray(mask, dtype=bool)
    if deterministic:
        scores = np.array(mu, dtype=np.float64, copy=True)
    else:
        # Draw for every slot so the stream position does not depend on the mask.
        eps = rng.standard_normal(np.shape(mu))
        scores = np.where(mask, mu + sigma * eps, mu)
    logp = float(nn.gaussian_log_prob_values(mu, sigma, scores, mask))
    return scores, logp


def scores_to_action(scores: Sequence[float], current_ids: Sequence[int], current_jobs: Sequence[JobRequest],
                     free: int) -> list[int]:
    """Order current jobs by descending score (ties: lower id first) and take the capacity prefix.

    ``scores[i]`` belongs to ``current_ids[i]``; current jobs outside the network
    view get score -inf.
    """
    by_slot = {jid: float(s) for jid, s in zip(current_ids, scores)}
    ordered = sorted(current_jobs, key=lambda j: (-by_slot.get(j.id, -np.inf), j.id))
    return select_prefix(ordered, free)
