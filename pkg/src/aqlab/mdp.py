"""Finite tabular MDPs, episode rollout, and exact dynamic-programming oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import yaml


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with rewards on (s, a).

    ``transition[s, a]`` is a distribution over next states. Terminal states end
    an episode on entry; their rows are self-loops that are never followed.
    """

    transition: np.ndarray
    reward: np.ndarray
    terminal: frozenset
    discount: float
    initial_dist: np.ndarray
    state_names: tuple = ()
    action_names: tuple = ()

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        d0 = _frozen(self.initial_dist)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "terminal", frozenset(int(s) for s in self.terminal))
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {R.shape}")
        if d0.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {d0.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("every transition row must be a distribution (sum to 1 within 1e-12)")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a distribution")
        if any(not 0 <= s < S for s in self.terminal):
            raise ValueError("terminal state index out of range")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"s{i}" for i in range(S)))
        if not self.action_names:
            object.__setattr__(self, "action_names", tuple(f"a{i}" for i in range(A)))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.n_states, dtype=bool)
        m[list(self.terminal)] = True
        return m


@dataclass(frozen=True)
class ChainMdpParams:
    r1: float = 1.0
    r2: float = 0.5
    r3: float = 0.5
    r4: float = 0.5
    discount: float = 0.9
    # start uniformly in {s0, s1, s2}; otherwise always in s0
    random_start: bool = True


@dataclass
class ValueTable:
    q: np.ndarray
    v: np.ndarray
    residuals: list = field(default_factory=list)


class Step(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    done: bool


def build_chain_mdp(params: ChainMdpParams = ChainMdpParams()) -> TabularMdp:
    """Five-state two-step chain with terminal states s3 and s4.

    s0 --a0--> s1 (r1), s0 --a1--> s2 (r2); from s1 or s2, a0 --> s3 (r3) and
    a1 --> s4 (r4).
    """
    S, A = 5, 2
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    P[0, 0, 1] = P[0, 1, 2] = 1.0
    R[0] = (params.r1, params.r2)
    for s in (1, 2):
        P[s, 0, 3] = P[s, 1, 4] = 1.0
        R[s] = (params.r3, params.r4)
    for s in (3, 4):
        P[s, :, s] = 1.0
    d0 = np.zeros(S)
    if params.random_start:
        d0[:3] = 1.0 / 3.0
    else:
        d0[0] = 1.0
    return TabularMdp(P, R, frozenset({3, 4}), params.discount, d0)


def _next_values(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    v = np.where(mdp.terminal_mask(), 0.0, v)
    return mdp.reward + mdp.discount * mdp.transition @ v


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iters: int = 100_000) -> ValueTable:
    """Optimal action values by repeated application of the optimality backup.

    Stops once the sup-norm Bellman residual is at most ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    term = mdp.terminal_mask()
    q = np.zeros((mdp.n_states, mdp.n_actions))
    residuals = []
    for _ in range(max_iters):
        q_new = _next_values(mdp, q.max(axis=1))
        q_new[term] = 0.0
        res = float(np.max(np.abs(q_new - q)))
        residuals.append(res)
        q = q_new
        if res <= tol:
            return ValueTable(q=q, v=q.max(axis=1), residuals=residuals)
    raise ConvergenceError(f"value iteration did not converge in {max_iters} iterations", residuals[-1])


def exact_policy_q(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-12, max_iters: int = 100_000) -> ValueTable:
    """Action values of a stochastic policy table ``policy[s, a]``."""
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}")
    term = mdp.terminal_mask()
    if np.max(np.abs(pi[~term].sum(axis=1) - 1.0)) > 1e-9 or np.any(pi < 0):
        raise ValueError("policy rows must be distributions")
    q = np.zeros_like(pi)
    residuals = []
    for _ in range(max_iters):
        q_new = _next_values(mdp, (pi * q).sum(axis=1))
        q_new[term] = 0.0
        res = float(np.max(np.abs(q_new - q)))
        residuals.append(res)
        q = q_new
        if res <= tol:
            return ValueTable(q=q, v=(pi * q).sum(axis=1), residuals=residuals)
    raise ConvergenceError(f"policy evaluation did not converge in {max_iters} iterations", residuals[-1])


def run_episode(
    mdp: TabularMdp,
    policy: Callable[[int, np.random.Generator], int],
    rng: np.random.Generator,
    max_len: int = 100,
    start: int | None = None,
) -> list[Step]:
    """Roll out ``policy`` until a terminal state or ``max_len`` steps."""
    s = int(rng.choice(mdp.n_states, p=mdp.initial_dist)) if start is None else start
    traj: list[Step] = []
    while len(traj) < max_len and s not in mdp.terminal:
        a = policy(s, rng)
        s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        done = s_next in mdp.terminal
        traj.append(Step(s, a, float(mdp.reward[s, a]), s_next, done))
        s = s_next
    return traj


def mdp_from_dict(cfg: dict) -> TabularMdp:
    """Build an MDP from a key-value tree.

    Expected keys: ``states`` (names or a count), ``actions`` (names or a
    count), ``transitions`` as ``[s, a, s_next, prob, reward]`` rows,
    ``terminal``, ``discount`` and ``initial`` (mapping state -> probability).
    """
    allowed = {"states", "actions", "transitions", "terminal", "discount", "initial"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ValueError(f"unknown MDP keys: {sorted(unknown)}")
    missing = allowed - set(cfg)
    if missing:
        raise ValueError(f"missing MDP keys: {sorted(missing)}")

    def names(spec, prefix):
        return tuple(f"{prefix}{i}" for i in range(spec)) if isinstance(spec, int) else tuple(str(x) for x in spec)

    states, actions = names(cfg["states"], "s"), names(cfg["actions"], "a")
    s_idx = {n: i for i, n in enumerate(states)}
    a_idx = {n: i for i, n in enumerate(actions)}

    def lookup(table, key, what):
        if isinstance(key, int) and not isinstance(key, bool) and 0 <= key < len(table):
            return key
        try:
            return table[str(key)]
        except KeyError:
            raise ValueError(f"unknown {what} {key!r}") from None

    S, A = len(states), len(actions)
    P = np.zeros((S, A, S))
    R = np.full((S, A), np.nan)
    for row in cfg["transitions"]:
        if len(row) != 5:
            raise ValueError(f"transition rows are [s, a, s_next, prob, reward], got {row!r}")
        s, a, sn = lookup(s_idx, row[0], "state"), lookup(a_idx, row[1], "action"), lookup(s_idx, row[2], "state")
        prob, rew = float(row[3]), float(row[4])
        if not np.isnan(R[s, a]) and R[s, a] != rew:
            raise ValueError(f"rewards are defined on (s, a); conflicting rewards for ({row[0]}, {row[1]})")
        R[s, a] = rew
        P[s, a, sn] += prob
    terminal = frozenset(lookup(s_idx, t, "state") for t in cfg["terminal"])
    for s in range(S):
        if s in terminal:
            P[s] = 0.0
            P[s, :, s] = 1.0
            R[s] = 0.0
        elif np.any(np.isnan(R[s])):
            raise ValueError(f"state {states[s]} is missing transitions for some action")
    d0 = np.zeros(S)
    for k, p in cfg["initial"].items():
        d0[lookup(s_idx, k, "state")] = float(p)
    return TabularMdp(P, R, terminal, float(cfg["discount"]), d0, states, actions)


def load_mdp(path: str | Path) -> TabularMdp:
    with open(path) as fh:
        return mdp_from_dict(yaml.safe_load(fh))
