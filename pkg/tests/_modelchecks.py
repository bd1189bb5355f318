"""Encoder symmetry checks shared by the osdec unit tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from defersched.osdec import ModelConfig, featurize, forward
from defersched.simenv import EnvState


def state_features(state: EnvState, config: ModelConfig, horizon: int, rng: np.random.Generator):
    low = rng.normal(scale=0.1, size=config.low_dim)
    high = rng.normal(scale=0.1, size=config.high_dim)
    return featurize(state, low, high, config, horizon)


def equivariance_error(features, config: ModelConfig, params, rng: np.random.Generator) -> float:
    """Largest deviation after permuting the live current rows (and every other block).

    μ and σ must permute with the current rows and V must not move at all.
    """
    k = config.k_max
    x, m = features.matrix, features.mask
    base = forward(x, m, config, params)
    perm = np.arange(config.rows)
    for block in range(3):
        lo = block * k
        live = np.flatnonzero(m[lo:lo + k]) + lo
        perm[live] = rng.permutation(live)
    px, pm = x[perm], m[perm]
    out = forward(px, pm, config, params)
    cur_perm = perm[k:2 * k] - k
    live = m[k:2 * k]
    err_mu = np.abs(out.mu[0][live[cur_perm]] - base.mu[0][cur_perm][live[cur_perm]])
    err_sigma = np.abs(out.sigma[0][live[cur_perm]] - base.sigma[0][cur_perm][live[cur_perm]])
    return float(max(err_mu.max(initial=0.0), err_sigma.max(initial=0.0), abs(out.value[0] - base.value[0])))


def mask_error(features, config: ModelConfig, params, rng: np.random.Generator) -> float:
    """Largest deviation in live μ, σ and V after filling padded rows with garbage."""
    x, m = features.matrix, features.mask
    base = forward(x, m, config, params)
    noisy = x.copy()
    noisy[~m] = rng.normal(scale=5.0, size=noisy[~m].shape)
    out = forward(noisy, m, config, params)
    live = m[config.k_max:2 * config.k_max]
    return float(max(np.abs(out.mu[0] - base.mu[0])[live].max(initial=0.0),
                     np.abs(out.sigma[0] - base.sigma[0])[live].max(initial=0.0),
                     abs(out.value[0] - base.value[0])))
