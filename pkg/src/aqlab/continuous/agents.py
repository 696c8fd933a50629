"""Actor-critic building blocks for continuous actions on the [-1, 1] box.

Critics take the concatenation ``[s, a]`` and output a scalar. The
deterministic policy outputs ``tanh(net(s))``; the stochastic policy is a
tanh-squashed Gaussian whose log-std is smoothly bounded to
``[log_std_min, log_std_max]``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .. import expectile
from ..nn import DivergenceError, MlpNet, backward, forward

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def q_forward(net: MlpNet, s: np.ndarray, a: np.ndarray):
    out, cache = forward(net, np.concatenate([s, a], axis=1))
    return out[:, 0], cache


def q_values(net: MlpNet, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return q_forward(net, s, a)[0]


class DeterministicPolicy:
    stochastic = False

    def __init__(self, net: MlpNet):
        self.net = net

    @property
    def action_dim(self) -> int:
        return self.net.weights[-1].shape[1]

    def forward(self, s: np.ndarray):
        out, cache = forward(self.net, s)
        return np.tanh(out), cache

    def mean_action(self, s: np.ndarray) -> np.ndarray:
        return self.forward(s)[0]


def squash_log_det(u: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(u)**2)`` in a form that stays finite for large ``|u|``."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class GaussianPolicy:
    """Tanh-squashed diagonal Gaussian; the net outputs ``[mean, raw_log_std]``."""

    stochastic = True

    def __init__(self, net: MlpNet, log_std_min: float = LOG_STD_MIN, log_std_max: float = LOG_STD_MAX):
        if net.weights[-1].shape[1] % 2:
            raise ValueError("gaussian policy net needs an even number of outputs")
        if not log_std_min < log_std_max:
            raise ValueError("log_std_min must be below log_std_max")
        self.net = net
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max

    @property
    def action_dim(self) -> int:
        return self.net.weights[-1].shape[1] // 2

    def dist(self, s: np.ndarray):
        out, cache = forward(self.net, s)
        d = self.action_dim
        mean, raw = out[:, :d], out[:, d:]
        t = np.tanh(raw)
        log_std = self.log_std_min + 0.5 * (self.log_std_max - self.log_std_min) * (t + 1.0)
        return mean, log_std, (cache, t)

    def sample(self, s: np.ndarray, xi: np.ndarray):
        """Reparameterised sample for standard-normal ``xi``; returns (action, log_prob, extras)."""
        mean, log_std, extra = self.dist(s)
        std = np.exp(log_std)
        u = mean + std * xi
        logp = np.sum(-0.5 * xi * xi - log_std - _HALF_LOG_2PI - squash_log_det(u), axis=1)
        return np.tanh(u), logp, (mean, log_std, std, u, extra)

    def mean_action(self, s: np.ndarray) -> np.ndarray:
        return np.tanh(self.dist(s)[0])


def _min_q(critics: Sequence[MlpNet], s, a) -> np.ndarray:
    q = q_values(critics[0], s, a)
    for c in critics[1:]:
        q = np.minimum(q, q_values(c, s, a))
    return q


def _bootstrap(r, done, discount, v_next) -> np.ndarray:
    y = np.asarray(r, dtype=float) + discount * (1.0 - np.asarray(done, dtype=float)) * v_next
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite critic targets")
    return y


def compute_target_td3(
    target_critics: Sequence[MlpNet],
    target_policy: DeterministicPolicy,
    s_next: np.ndarray,
    done: np.ndarray,
    r: np.ndarray,
    discount: float,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.2,
    noise_clip: float = 0.5,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Clipped double-Q target with clipped Gaussian smoothing of the next action."""
    a = target_policy.mean_action(s_next)
    if noise is None:
        noise = rng.standard_normal(a.shape)
    a = np.clip(a + np.clip(noise_std * noise, -noise_clip, noise_clip), -1.0, 1.0)
    return _bootstrap(r, done, discount, _min_q(target_critics, s_next, a))


def compute_target_sac(
    target_critics: Sequence[MlpNet],
    policy: GaussianPolicy,
    s_next: np.ndarray,
    done: np.ndarray,
    r: np.ndarray,
    discount: float,
    entropy_alpha: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Soft target ``r + gamma (1 - done) (min Q(s', a') - alpha log pi(a'|s'))``, ``a' ~ pi``."""
    if entropy_alpha < 0:
        raise ValueError("entropy_alpha must be non-negative")
    if noise is None:
        noise = rng.standard_normal((len(s_next), policy.action_dim))
    a, logp, _ = policy.sample(s_next, noise)
    v = _min_q(target_critics, s_next, a)
    if entropy_alpha:
        v = v - entropy_alpha * logp
    return _bootstrap(r, done, discount, v)


def compute_target_maxbackup(
    target_critics: Sequence[MlpNet],
    policy: GaussianPolicy,
    s_next: np.ndarray,
    done: np.ndarray,
    r: np.ndarray,
    discount: float,
    n_samples: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Max over ``n_samples`` policy actions of the clipped double-Q value.

    ``noise`` has shape ``(n, batch, action_dim)``; only its first
    ``n_samples`` slices are used, so smaller ``n`` see a prefix of the same draws.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if noise is None:
        noise = rng.standard_normal((n_samples, len(s_next), policy.action_dim))
    best = None
    for k in range(n_samples):
        a, _, _ = policy.sample(s_next, noise[k])
        q = _min_q(target_critics, s_next, a)
        best = q if best is None else np.maximum(best, q)
    return _bootstrap(r, done, discount, best)


def critic_loss_expectile(net: MlpNet, s, a, targets, tau: float):
    """Mean expectile loss of ``targets - Q(s, a)`` and its parameter gradients."""
    targets = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(targets)):
        raise DivergenceError("non-finite critic targets")
    q, cache = q_forward(net, s, a)
    u = targets - q
    n = len(u)
    value = float(np.mean(expectile.loss(tau, u)))
    dq = -expectile.loss_grad(tau, u) / n
    grads, _ = backward(net, cache, dq[:, None])
    return value, grads


def critic_loss_mse(net: MlpNet, s, a, targets):
    """Plain ``mean(u**2 / 2)`` critic loss; the reference for tau = 0.5."""
    targets = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(targets)):
        raise DivergenceError("non-finite critic targets")
    q, cache = q_forward(net, s, a)
    u = targets - q
    n = len(u)
    value = float(np.mean(0.5 * u * u))
    dq = -u / n
    grads, _ = backward(net, cache, dq[:, None])
    return value, grads


def td3_actor_grads(policy: DeterministicPolicy, critic: MlpNet, s: np.ndarray):
    """Objective ``mean Q(s, pi(s))`` and gradients of its negative w.r.t. the policy."""
    a, pcache = policy.forward(s)
    q, qcache = q_forward(critic, s, a)
    n = len(q)
    _, gx = backward(critic, qcache, np.full((n, 1), 1.0 / n))
    dj_da = gx[:, s.shape[1]:]
    grads, _ = backward(policy.net, pcache, -dj_da * (1.0 - a * a))
    return float(np.mean(q)), grads


def sac_actor_grads(policy: GaussianPolicy, critics: Sequence[MlpNet], s: np.ndarray, entropy_alpha: float, xi: np.ndarray):
    """Objective ``mean(min Q(s, a) - alpha log pi(a|s))`` with ``a`` reparameterised by ``xi``.

    Returns the objective and gradients of its negative w.r.t. the policy.
    """
    a, logp, (mean, log_std, std, u, (pcache, t)) = policy.sample(s, xi)
    n, sd = len(s), s.shape[1]
    qs, caches = zip(*(q_forward(c, s, a) for c in critics))
    qmin = np.min(np.stack(qs), axis=0)
    owner = np.argmin(np.stack(qs), axis=0)
    dq_da = np.zeros_like(a)
    for k, (c, cache) in enumerate(zip(critics, caches)):
        sel = (owner == k).astype(float)[:, None] / n
        if np.any(sel):
            _, gx = backward(c, cache, sel)
            dq_da += gx[:, sd:]
    # d/du of the per-sample objective, already scaled by 1/n
    dj_du = dq_da * (1.0 - a * a) - entropy_alpha * 2.0 * a / n
    dj_dmean = dj_du
    dj_dlogstd = dj_du * std * xi + entropy_alpha / n
    dj_draw = dj_dlogstd * 0.5 * (policy.log_std_max - policy.log_std_min) * (1.0 - t * t)
    grads, _ = backward(policy.net, pcache, -np.concatenate([dj_dmean, dj_draw], axis=1))
    objective = float(np.mean(qmin - entropy_alpha * logp))
    return objective, grads
