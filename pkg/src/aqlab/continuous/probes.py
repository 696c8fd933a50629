"""Diagnostics: critic bias against Monte-Carlo returns, and policy entropy."""

from __future__ import annotations

import math

import numpy as np

from .agents import GaussianPolicy, squash_log_det

_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


def gaussian_entropy(log_std: np.ndarray) -> np.ndarray:
    """Differential entropy of a diagonal Gaussian, summed over the last axis."""
    log_std = np.asarray(log_std, dtype=float)
    return np.sum(log_std + _HALF_LOG_2PIE, axis=-1)


def entropy_probe(policy, states: np.ndarray, rng: np.random.Generator | None = None, n_samples: int = 64, squash: bool = True) -> float:
    """Mean entropy of ``pi(.|s)`` over ``states``.

    The Gaussian part is exact; the tanh squash adds ``E[log(1 - tanh(u)^2)]``,
    estimated with ``n_samples`` draws per state.
    """
    if not getattr(policy, "stochastic", False):
        raise TypeError("entropy_probe needs a stochastic policy")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    mean, log_std, _ = policy.dist(states)
    h = gaussian_entropy(log_std)
    if squash:
        xi = rng.standard_normal((n_samples,) + mean.shape)
        u = mean[None] + np.exp(log_std)[None] * xi
        h = h + np.mean(np.sum(squash_log_det(u), axis=-1), axis=0)
    return float(np.mean(h))


def bias_probe(agent, env, n_rollouts: int, rng: np.random.Generator, discount: float | None = None):
    """Mean and standard error of ``Q(s, a) - G`` over fresh episodes.

    For each rollout the first state and the policy's action there form the
    probe pair; ``G`` is the discounted return of continuing with the current
    policy. ``Q`` is the average of the twin critics.
    """
    gamma = agent.cfg.discount if discount is None else discount
    diffs = np.empty(n_rollouts)
    for i in range(n_rollouts):
        s = env.reset(rng)
        a = agent.act(s, rng, explore=True)
        q = agent.q_estimate(s[None], a[None])[0]
        ret, disc, steps = 0.0, 1.0, 0
        while True:
            s, r, done = env.step(a, rng)
            ret += disc * r
            disc *= gamma
            steps += 1
            if done or steps >= env.horizon:
                break
            a = agent.act(s, rng, explore=True)
        diffs[i] = q - ret
    se = float(np.std(diffs, ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else math.nan
    return float(np.mean(diffs)), se
