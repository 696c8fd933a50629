"""Tabular actor-critic with interchangeable critic targets.

The actor is a softmax over a logit table trained by single-sample policy
gradient; the critic is a Q-table updated towards one of four targets:

* ``sarsa``: expectation of the next Q-values under the policy,
* ``qlearning``: maximum of the next Q-values,
* ``annealed_weight``: ``w(t) * qlearning + (1 - w(t)) * sarsa``,
* ``expectile_tabular``: a sampled next-action target fitted with the
  expectile loss at the scheduled tau.

Gaussian noise can be added to the next-state Q-values before the target is
formed, which mimics the estimation noise of function approximation and
exposes the overestimation of the max backup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expectile import TauSchedule, schedule_value
from .mdp import Step, TabularMdp
from .metrics import RunMetrics

VARIANTS = ("sarsa", "qlearning", "annealed_weight", "expectile_tabular")
TABULAR_COLUMNS = ["step", "q_s0_a0", "q_s0_a1", "episode_return"]


@dataclass
class TabularAgentState:
    q: np.ndarray
    logits: np.ndarray
    step_size: float = 1e-3
    epsilon: float = 0.1

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, step_size: float = 1e-3, epsilon: float = 0.1):
        return cls(np.zeros((n_states, n_actions)), np.zeros((n_states, n_actions)), step_size, epsilon)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def active(self) -> bool:
        return self.enabled and self.sigma > 0


@dataclass(frozen=True)
class TargetRule:
    variant: str = "qlearning"
    schedule: TauSchedule | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown target variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in ("annealed_weight", "expectile_tabular") and self.schedule is None:
            raise ValueError(f"{self.variant} needs a schedule")
        if self.schedule is not None:
            lo, hi = self.schedule.value_range()
            if self.variant == "annealed_weight" and not (0.0 <= lo and hi <= 1.0):
                raise ValueError("annealed_weight schedule must stay within [0, 1]")
            if self.variant == "expectile_tabular" and not (0.5 <= lo and hi < 1.0):
                raise ValueError("expectile_tabular schedule must stay within [0.5, 1)")

    def scheduled(self, t: int) -> float | None:
        if self.schedule is None:
            return None
        return schedule_value(self.schedule, min(t, self.schedule.horizon))


# Rows are tiny (a handful of actions), where plain floats beat numpy calls.
def _softmax(row) -> list[float]:
    m = max(row)
    e = [math.exp(x - m) for x in row]
    z = sum(e)
    return [x / z for x in e]


def _sample(probs, u: float) -> int:
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


def policy_probs(agent: TabularAgentState, s: int) -> np.ndarray:
    """Softmax of the logit row, shifted by its maximum for stability."""
    return np.array(_softmax(agent.logits[s].tolist()))


def select_action(agent: TabularAgentState, s: int, rng: np.random.Generator) -> int:
    """Epsilon-mixed sampling: uniform with probability epsilon, else from the softmax."""
    n = agent.logits.shape[1]
    if rng.random() < agent.epsilon:
        return int(rng.integers(n))
    return _sample(_softmax(agent.logits[s].tolist()), rng.random())


def compute_target(
    rule: TargetRule,
    agent: TabularAgentState,
    step: Step,
    discount: float,
    noise: NoiseSpec,
    rng: np.random.Generator,
    t: int = 0,
) -> float:
    """Critic target for one transition.

    One noise draw per next action is shared by both halves of the
    ``annealed_weight`` target. ``expectile_tabular`` returns the raw target
    for a next action sampled from the policy.
    """
    if rule.variant not in VARIANTS:
        raise ValueError(f"unknown target variant {rule.variant!r}")
    if step.done:
        return float(step.r)
    q_next = agent.q[step.s_next].tolist()
    if noise.active:
        eps = rng.normal(0.0, noise.sigma, size=len(q_next)).tolist()
        q_next = [q + e for q, e in zip(q_next, eps)]
    probs = _softmax(agent.logits[step.s_next].tolist())

    if rule.variant == "expectile_tabular":
        a_next = _sample(probs, rng.random())
        return step.r + discount * q_next[a_next]
    sarsa = step.r + discount * sum(p * q for p, q in zip(probs, q_next))
    qlearn = step.r + discount * max(q_next)
    if rule.variant == "sarsa":
        return sarsa
    if rule.variant == "qlearning":
        return qlearn
    w = rule.scheduled(t)
    return w * qlearn + (1.0 - w) * sarsa


def update_critic(agent: TabularAgentState, s: int, a: int, target: float) -> TabularAgentState:
    agent.q[s, a] += agent.step_size * (target - agent.q[s, a])
    return agent


def update_critic_expectile(
    agent: TabularAgentState, s: int, a: int, sampled_target: float, tau: float
) -> TabularAgentState:
    """One gradient step on the expectile loss of ``sampled_target - Q(s, a)``."""
    if not 0.5 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0.5, 1), got {tau}")
    u = sampled_target - agent.q[s, a]
    weight = tau if u >= 0 else 1.0 - tau
    agent.q[s, a] += agent.step_size * (2.0 * weight * u)
    return agent


def update_actor(agent: TabularAgentState, s: int, a: int, q_sa: float | None = None) -> TabularAgentState:
    """Policy-gradient step ``theta[s] += alpha * (onehot(a) - pi(.|s)) * Q(s, a)``.

    ``q_sa`` lets the caller pass the action value from before the critic
    update of the same step.
    """
    if q_sa is None:
        q_sa = agent.q[s, a]
    row = agent.logits[s]
    scale = agent.step_size * float(q_sa)
    for b, p in enumerate(_softmax(row.tolist())):
        row[b] += scale * ((1.0 if a == b else 0.0) - p)
    return agent


def train_tabular(
    mdp: TabularMdp,
    rule: TargetRule,
    noise: NoiseSpec = NoiseSpec(),
    steps: int = 100_000,
    seed: int | np.random.SeedSequence = 0,
    log_every: int = 100,
    step_size: float = 1e-3,
    epsilon: float = 0.1,
    max_episode_len: int = 100,
) -> RunMetrics:
    """Online actor-critic training: one critic and one actor update per step.

    Episodes restart from ``mdp.initial_dist``. Logged rows hold the
    action values of state 0 and the return of the last finished episode.
    """
    rng = np.random.default_rng(seed)
    agent = TabularAgentState.zeros(mdp.n_states, mdp.n_actions, step_size, epsilon)
    init_probs = mdp.initial_dist.tolist()
    trans = mdp.transition.tolist()
    rewards = mdp.reward.tolist()
    terminal = mdp.terminal_mask().tolist()
    metrics = RunMetrics(list(TABULAR_COLUMNS))

    def reset():
        return _sample(init_probs, rng.random())

    metrics.append(0, float(agent.q[0, 0]), float(agent.q[0, 1]), math.nan)
    s, ep_len, ep_ret, ep_disc, last_return = reset(), 0, 0.0, 1.0, math.nan
    for t in range(steps):
        a = select_action(agent, s, rng)
        s_next = _sample(trans[s][a], rng.random())
        r = rewards[s][a]
        done = terminal[s_next]
        step = Step(s, a, r, s_next, done)

        q_sa = float(agent.q[s, a])
        target = compute_target(rule, agent, step, mdp.discount, noise, rng, t)
        if rule.variant == "expectile_tabular":
            update_critic_expectile(agent, s, a, target, rule.scheduled(t))
        else:
            update_critic(agent, s, a, target)
        update_actor(agent, s, a, q_sa)

        ep_ret += ep_disc * r
        ep_disc *= mdp.discount
        ep_len += 1
        if done or ep_len >= max_episode_len:
            last_return = ep_ret
            s, ep_len, ep_ret, ep_disc = reset(), 0, 0.0, 1.0
        else:
            s = s_next
        if (t + 1) % log_every == 0:
            metrics.append(t + 1, float(agent.q[0, 0]), float(agent.q[0, 1]), last_return)
    return metrics
