"""Off-policy training loop for the annealed-expectile TD3 and SAC agents."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..expectile import TauSchedule, schedule_value
from ..metrics import RunMetrics
from ..nn import AdamState, MlpNet, TargetTracker, adam_step, check_finite, ema_update, load_params, save_params, tracked_net
from . import agents as ag
from .buffer import Batch, ReplayBuffer
from .envs import ToyEnvConfig, make_env
from .probes import bias_probe, entropy_probe

ALGOS = ("aq_td3", "aq_sac", "maxbackup_sac")
CONTINUOUS_COLUMNS = ["step", "eval_return", "tau", "critic_loss", "bias", "entropy"]

_TD3_KEYS = {"exploration_std", "policy_delay", "target_noise", "target_noise_clip"}
_SAC_KEYS = {"entropy_alpha", "log_std_min", "log_std_max"}
_MAXBACKUP_KEYS = {"n_max_samples"}


@dataclass(frozen=True)
class AgentConfig:
    algo: str = "aq_sac"
    tau_schedule: TauSchedule = field(default_factory=lambda: TauSchedule("constant", 0.5, 0.5, 1))
    critic_loss: str = "expectile"  # "mse" is the plain squared-error reference
    hidden: tuple = (64, 64)
    learning_rate: float = 3e-4
    batch_size: int = 128
    discount: float = 0.99
    ema_coeff: float = 0.995
    buffer_capacity: int = 100_000
    start_steps: int = 1000
    eval_episodes: int = 5
    probe_rollouts: int = 20
    probe_states: int = 16
    # TD3 branch
    exploration_std: float = 0.1
    policy_delay: int = 2
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    # SAC branches
    entropy_alpha: float = 0.1
    log_std_min: float = ag.LOG_STD_MIN
    log_std_max: float = ag.LOG_STD_MAX
    n_max_samples: int = 10

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if self.critic_loss not in ("expectile", "mse"):
            raise ValueError("critic_loss must be 'expectile' or 'mse'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 <= self.discount < 1:
            raise ValueError("discount must lie in [0, 1)")
        lo, hi = self.tau_schedule.value_range()
        if not (0.0 < lo and hi < 1.0):
            raise ValueError("expectile schedule must stay inside (0, 1)")
        if self.entropy_alpha < 0:
            raise ValueError("entropy_alpha must be non-negative")
        if self.policy_delay < 1 or self.n_max_samples < 1:
            raise ValueError("policy_delay and n_max_samples must be at least 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        """Build from a config mapping, rejecting unknown and other-branch keys."""
        d = dict(d)
        algo = d.get("algo", cls.algo)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent keys: {sorted(unknown)}")
        allowed = known - _TD3_KEYS - _SAC_KEYS - _MAXBACKUP_KEYS
        allowed |= _TD3_KEYS if algo == "aq_td3" else _SAC_KEYS
        if algo == "maxbackup_sac":
            allowed |= _MAXBACKUP_KEYS
        foreign = set(d) - allowed
        if foreign:
            raise ValueError(f"keys {sorted(foreign)} do not apply to algo {algo!r}")
        if "tau_schedule" in d and isinstance(d["tau_schedule"], dict):
            d["tau_schedule"] = TauSchedule.from_dict(d["tau_schedule"])
        return cls(**d)

    def to_dict(self) -> dict:
        """Plain mapping with only the keys that apply to this algo (round-trips through from_dict)."""
        out = asdict(self)
        drop = _MAXBACKUP_KEYS if self.algo != "maxbackup_sac" else set()
        drop |= _SAC_KEYS if self.algo == "aq_td3" else _TD3_KEYS
        for k in drop:
            del out[k]
        out["tau_schedule"] = self.tau_schedule.to_dict()
        out["hidden"] = list(self.hidden)
        return out


class Agent:
    """Networks, optimisers and target copies for one run."""

    def __init__(self, cfg: AgentConfig, state_dim: int, action_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.state_dim, self.action_dim = state_dim, action_dim
        critic_sizes = [state_dim + action_dim, *cfg.hidden, 1]
        self.critics = [MlpNet.init(critic_sizes, rng) for _ in range(2)]
        self.critic_opts = [AdamState(cfg.learning_rate) for _ in range(2)]
        # optimisers and trackers work on each net's single flat parameter vector
        self.critic_targets = [TargetTracker([c.flat], cfg.ema_coeff) for c in self.critics]
        self.target_critic_nets = [tracked_net(t, critic_sizes) for t in self.critic_targets]
        if cfg.algo == "aq_td3":
            self.policy = ag.DeterministicPolicy(MlpNet.init([state_dim, *cfg.hidden, action_dim], rng))
            self.policy_target = TargetTracker([self.policy.net.flat], cfg.ema_coeff)
            self.target_policy = ag.DeterministicPolicy(tracked_net(self.policy_target, self.policy.net.layer_sizes))
        else:
            net = MlpNet.init([state_dim, *cfg.hidden, 2 * action_dim], rng)
            self.policy = ag.GaussianPolicy(net, cfg.log_std_min, cfg.log_std_max)
        self.policy_opt = AdamState(cfg.learning_rate)
        self.n_updates = 0

    def act(self, s: np.ndarray, rng: np.random.Generator, explore: bool = True) -> np.ndarray:
        s = np.asarray(s, dtype=float)[None]
        if not explore:
            return self.policy.mean_action(s)[0]
        if self.cfg.algo == "aq_td3":
            a = self.policy.mean_action(s)[0] + self.cfg.exploration_std * rng.standard_normal(self.action_dim)
            return np.clip(a, -1.0, 1.0)
        a, _, _ = self.policy.sample(s, rng.standard_normal((1, self.action_dim)))
        return a[0]

    def q_estimate(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return 0.5 * (ag.q_values(self.critics[0], s, a) + ag.q_values(self.critics[1], s, a))

    def targets(self, batch: Batch, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        if cfg.algo == "aq_td3":
            return ag.compute_target_td3(
                self.target_critic_nets, self.target_policy, batch.s_next, batch.done, batch.r,
                cfg.discount, rng, cfg.target_noise, cfg.target_noise_clip,
            )
        if cfg.algo == "maxbackup_sac":
            return ag.compute_target_maxbackup(
                self.target_critic_nets, self.policy, batch.s_next, batch.done, batch.r,
                cfg.discount, cfg.n_max_samples, rng,
            )
        return ag.compute_target_sac(
            self.target_critic_nets, self.policy, batch.s_next, batch.done, batch.r,
            cfg.discount, cfg.entropy_alpha, rng,
        )

    def update(self, batch: Batch, tau: float, rng: np.random.Generator) -> float:
        """One critic step (both critics), maybe an actor step, then target tracking."""
        cfg = self.cfg
        y = self.targets(batch, rng)
        losses = []
        for net, opt in zip(self.critics, self.critic_opts):
            if cfg.critic_loss == "mse":
                value, grads = ag.critic_loss_mse(net, batch.s, batch.a, y)
            else:
                value, grads = ag.critic_loss_expectile(net, batch.s, batch.a, y, tau)
            adam_step(opt, [net.flat], [net.flat_grad(grads)])
            losses.append(value)
        self.n_updates += 1

        if cfg.algo == "aq_td3":
            if self.n_updates % cfg.policy_delay == 0:
                _, grads = ag.td3_actor_grads(self.policy, self.critics[0], batch.s)
                adam_step(self.policy_opt, [self.policy.net.flat], [self.policy.net.flat_grad(grads)])
                for tracker, net in zip(self.critic_targets, self.critics):
                    ema_update(tracker, [net.flat])
                ema_update(self.policy_target, [self.policy.net.flat])
        else:
            xi = rng.standard_normal((len(batch.s), self.action_dim))
            _, grads = ag.sac_actor_grads(self.policy, self.critics, batch.s, cfg.entropy_alpha, xi)
            adam_step(self.policy_opt, [self.policy.net.flat], [self.policy.net.flat_grad(grads)])
            for tracker, net in zip(self.critic_targets, self.critics):
                ema_update(tracker, [net.flat])
        loss = float(np.mean(losses))
        if not math.isfinite(loss):
            raise ag.DivergenceError(f"critic loss became {loss} after {self.n_updates} updates")
        return loss

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter vectors: critics, policy, critic targets, then the policy target if any."""
        out = [net.flat for net in self.critics] + [self.policy.net.flat]
        out += [t.params[0] for t in self.critic_targets]
        if self.cfg.algo == "aq_td3":
            out += self.policy_target.params
        return out

    def save(self, path) -> None:
        """Write :meth:`parameters` as one checkpoint file (optimiser moments are not saved)."""
        save_params(path, self.parameters())

    def load(self, path) -> None:
        """Overwrite parameters in place from a checkpoint written by :meth:`save`."""
        loaded = load_params(path)
        current = self.parameters()
        if [p.shape for p in loaded] != [p.shape for p in current]:
            raise ValueError(f"{path}: checkpoint shapes do not match this agent")
        for dst, src in zip(current, loaded):
            dst[...] = src


def evaluate(agent: Agent, env, n_episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted return of mean-action rollouts."""
    total = 0.0
    for _ in range(n_episodes):
        s = env.reset(rng)
        for _ in range(env.horizon):
            s, r, done = env.step(agent.act(s, rng, explore=False), rng)
            total += r
            if done:
                break
    return total / n_episodes


def scheduled_tau(cfg: AgentConfig, t: int) -> float:
    """tau at environment step ``t``; held at the final value past the horizon."""
    return schedule_value(cfg.tau_schedule, min(t, cfg.tau_schedule.horizon))


def train_continuous(
    env_cfg: ToyEnvConfig,
    cfg: AgentConfig,
    seed: int | np.random.SeedSequence,
    total_steps: int,
    log_every: int = 500,
    probes: bool = True,
    trace: list | None = None,
) -> RunMetrics:
    """Act, store, update once per step after ``start_steps``, and log periodically.

    Separate random streams drive initialisation, acting, the environment,
    updates and evaluation/probing, so probing never perturbs training. If
    ``trace`` is a list, a snapshot of all parameters is appended after every
    update (used to compare parameter trajectories).
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, act_ss, env_ss, upd_ss, eval_ss = ss.spawn(5)
    init_rng, act_rng, env_rng = (np.random.default_rng(x) for x in (init_ss, act_ss, env_ss))
    upd_rng, eval_rng = np.random.default_rng(upd_ss), np.random.default_rng(eval_ss)

    env, eval_env = make_env(env_cfg), make_env(env_cfg)
    if np.any(env.action_low != -1.0) or np.any(env.action_high != 1.0):
        raise ValueError("agents expect a [-1, 1] action box")
    agent = Agent(cfg, env.state_dim, env.action_dim, init_rng)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim)
    metrics = RunMetrics(list(CONTINUOUS_COLUMNS))

    s = env.reset(env_rng)
    ep_len, last_loss = 0, math.nan
    for t in range(total_steps):
        if t < cfg.start_steps:
            a = act_rng.uniform(-1.0, 1.0, size=env.action_dim)
        else:
            a = agent.act(s, act_rng, explore=True)
        s_next, r, done = env.step(a, env_rng)
        buffer.add(s, a, r, s_next, done)
        ep_len += 1
        if done or ep_len >= env.horizon:
            s, ep_len = env.reset(env_rng), 0
        else:
            s = s_next

        tau = scheduled_tau(cfg, t)
        if t >= cfg.start_steps:
            last_loss = agent.update(buffer.sample(cfg.batch_size, upd_rng), tau, upd_rng)
            check_finite(agent.parameters(), "agent parameters")
            if trace is not None:
                trace.append([p.copy() for p in agent.parameters()])

        if (t + 1) % log_every == 0:
            ret = evaluate(agent, eval_env, cfg.eval_episodes, eval_rng)
            bias = entropy = math.nan
            if probes:
                bias, _ = bias_probe(agent, eval_env, cfg.probe_rollouts, eval_rng)
                if agent.policy.stochastic:
                    states = np.stack([eval_env.reset(eval_rng) for _ in range(cfg.probe_states)])
                    entropy = entropy_probe(agent.policy, states, eval_rng)
            metrics.append(t + 1, ret, tau, last_loss, bias, entropy)
    return metrics
