"""Toy continuous-action environments with known optima.

``two_peak_bandit``
    One step. The reward is a constant offset plus two Gaussian bumps over a
    1-D action: a narrow high peak and a wide low peak. Optional zero-mean
    Gaussian noise is added to the action before the reward is evaluated,
    which makes the reward of a commanded action random.

``point_mass_reach``
    A 2-D point mass with velocity state driven by a force action towards a
    fixed goal, with quadratic position and control costs. The episode ends
    at the horizon; the remaining-time fraction is part of the observation
    so that ending there is Markov.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ENV_KINDS = ("two_peak_bandit", "point_mass_reach")


@dataclass(frozen=True)
class ToyEnvConfig:
    kind: str = "two_peak_bandit"
    action_noise: float = 0.0
    horizon: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}; expected one of {ENV_KINDS}")
        if self.action_noise < 0:
            raise ValueError("action_noise must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ToyEnvConfig":
        unknown = set(d) - {"kind", "action_noise", "horizon", "params"}
        if unknown:
            raise ValueError(f"unknown env keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "action_noise": self.action_noise, "horizon": self.horizon, "params": dict(self.params)}


class TwoPeakBandit:
    state_dim = 1
    action_dim = 1

    def __init__(
        self,
        high_center: float = 0.6,
        high_height: float = 1.0,
        high_width: float = 0.08,
        low_center: float = -0.4,
        low_height: float = 0.6,
        low_width: float = 0.35,
        offset: float = 0.0,
        action_noise: float = 0.0,
        horizon: int | None = None,
    ):
        if horizon not in (None, 1):
            raise ValueError("two_peak_bandit episodes last exactly one step")
        if high_width <= 0 or low_width <= 0:
            raise ValueError("peak widths must be positive")
        if high_height < 0 or low_height < 0:
            raise ValueError("peak heights must be non-negative")
        self.peaks = ((high_center, high_height, high_width), (low_center, low_height, low_width))
        self.offset = offset
        self.action_noise = action_noise
        self.horizon = 1
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])
        self._obs = np.ones(1)

    @property
    def reward_bounds(self) -> tuple[float, float]:
        return self.offset, self.offset + sum(h for _, h, _ in self.peaks)

    def mean_reward(self, a) -> np.ndarray:
        """Expected reward of commanded action(s) ``a`` under the action noise."""
        a = np.asarray(a, dtype=float)
        out = np.full(a.shape, float(self.offset))
        for c, h, w in self.peaks:
            s2 = w * w + self.action_noise**2
            out += h * (w / math.sqrt(s2)) * np.exp(-((a - c) ** 2) / (2.0 * s2))
        return out

    def optimum(self) -> tuple[float, float]:
        """(action, expected reward) maximising :meth:`mean_reward` on the action box."""
        grid = np.linspace(-1.0, 1.0, 200_001)
        vals = self.mean_reward(grid)
        i = int(np.argmax(vals))
        return float(grid[i]), float(vals[i])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self._obs.copy()

    def step(self, action, rng: np.random.Generator):
        a = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0], -1.0, 1.0))
        if self.action_noise > 0:
            a = a + rng.normal(0.0, self.action_noise)
        r = self.offset
        for c, h, w in self.peaks:
            r += h * math.exp(-((a - c) ** 2) / (2.0 * w * w))
        return self._obs.copy(), float(r), True


class PointMassReach:
    state_dim = 5
    action_dim = 2

    def __init__(
        self,
        goal=(0.5, 0.5),
        dt: float = 0.1,
        control_cost: float = 0.1,
        action_noise: float = 0.0,
        horizon: int | None = None,
    ):
        self.goal = np.asarray(goal, dtype=float)
        self.dt = dt
        self.control_cost = control_cost
        self.action_noise = action_noise
        self.horizon = 50 if horizon is None else int(horizon)
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)
        self._state = np.zeros(4)
        self._t = 0

    @property
    def reward_bounds(self) -> tuple[float, float]:
        # position is confined to [-1, 1]^2, so the squared distance is at most (1 + |g|)^2 per axis
        worst = float(np.sum((1.0 + np.abs(self.goal)) ** 2))
        return -(worst + 2.0 * self.control_cost), 0.0

    def _obs(self) -> np.ndarray:
        return np.append(self._state, 1.0 - self._t / self.horizon)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])
        self._t = 0
        return self._obs()

    def step(self, action, rng: np.random.Generator):
        a = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
        force = a + rng.normal(0.0, self.action_noise, size=2) if self.action_noise > 0 else a
        pos, vel = self._state[:2], self._state[2:]
        vel = np.clip(vel + self.dt * force, -2.0, 2.0)
        pos = np.clip(pos + self.dt * vel, -1.0, 1.0)
        self._state = np.concatenate([pos, vel])
        self._t += 1
        r = -float(np.sum((pos - self.goal) ** 2)) - self.control_cost * float(np.sum(a * a))
        return self._obs(), r, self._t >= self.horizon


def make_env(cfg: ToyEnvConfig):
    if cfg.kind == "two_peak_bandit":
        return TwoPeakBandit(action_noise=cfg.action_noise, horizon=cfg.horizon, **cfg.params)
    return PointMassReach(action_noise=cfg.action_noise, horizon=cfg.horizon, **cfg.params)
