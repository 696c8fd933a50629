import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aqlab.expectile import TauSchedule
from aqlab.mdp import ChainMdpParams, Step, build_chain_mdp, value_iteration
from aqlab.tabular import (
    VARIANTS,
    NoiseSpec,
    TabularAgentState,
    TargetRule,
    compute_target,
    policy_probs,
    select_action,
    train_tabular,
    update_actor,
    update_critic,
    update_critic_expectile,
)

HALF_WEIGHT = TauSchedule("linear", 1.0, 0.0, 2)  # w(1) = 0.5
RULES = {
    "sarsa": TargetRule("sarsa"),
    "qlearning": TargetRule("qlearning"),
    "annealed_weight": TargetRule("annealed_weight", HALF_WEIGHT),
    "expectile_tabular": TargetRule("expectile_tabular", TauSchedule("constant", 0.7)),
}


def agent_with(q_next=(1.0, 0.2), logits=(0.0, 0.0)):
    ag = TabularAgentState.zeros(5, 2)
    ag.q[1] = q_next
    ag.logits[1] = logits
    return ag


def test_uniform_logits():
    np.testing.assert_array_equal(policy_probs(TabularAgentState.zeros(3, 2), 0), [0.5, 0.5])


def test_log_three_logits():
    ag = TabularAgentState.zeros(1, 2)
    ag.logits[0] = (0.0, math.log(3.0))
    np.testing.assert_allclose(policy_probs(ag, 0), [0.25, 0.75], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-5, 5))
def test_softmax_shift_invariance(c, k):
    ag = TabularAgentState.zeros(2, 2)
    ag.logits[0] = (c, c + k)
    ag.logits[1] = (0.0, k)
    np.testing.assert_allclose(policy_probs(ag, 0), policy_probs(ag, 1), rtol=1e-12, atol=1e-15)


def test_softmax_stable_for_large_logits():
    ag = TabularAgentState.zeros(1, 3)
    ag.logits[0] = (1000.0, 999.0, -1000.0)
    p = policy_probs(ag, 0)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12


def test_epsilon_one_is_uniform():
    ag = TabularAgentState.zeros(1, 2, epsilon=1.0)
    ag.logits[0] = (10.0, -10.0)
    rng = np.random.default_rng(0)
    n = 100_000
    k = sum(select_action(ag, 0, rng) for _ in range(n))
    assert abs(k - n / 2) < 3 * math.sqrt(n * 0.25)


def test_epsilon_zero_follows_softmax():
    ag = TabularAgentState.zeros(1, 2, epsilon=0.0)
    ag.logits[0] = (10.0, -10.0)
    rng = np.random.default_rng(1)
    n = 100_000
    zeros = sum(select_action(ag, 0, rng) == 0 for _ in range(n))
    assert zeros / n > 0.999


def test_select_action_deterministic_per_seed():
    ag = TabularAgentState.zeros(1, 3)
    a = [select_action(ag, 0, np.random.default_rng(9)) for _ in range(5)]
    r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
    assert [select_action(ag, 0, r1) for _ in range(50)] == [select_action(ag, 0, r2) for _ in range(50)]
    assert len(set(a)) == 1


@pytest.mark.parametrize("variant", VARIANTS)
def test_done_transition_returns_reward(variant):
    ag = agent_with()
    step = Step(0, 0, 0.5, 3, True)
    for noise in (NoiseSpec(0.0), NoiseSpec(0.3)):
        assert compute_target(RULES[variant], ag, step, 0.9, noise, np.random.default_rng(0), t=1) == 0.5


def test_target_values():
    ag = agent_with()
    step = Step(0, 0, 0.0, 1, False)
    rng = np.random.default_rng(0)
    assert compute_target(RULES["sarsa"], ag, step, 0.9, NoiseSpec(), rng) == pytest.approx(0.54, abs=1e-15)
    assert compute_target(RULES["qlearning"], ag, step, 0.9, NoiseSpec(), rng) == pytest.approx(0.9, abs=1e-15)
    w_half = compute_target(RULES["annealed_weight"], ag, step, 0.9, NoiseSpec(), rng, t=1)
    assert w_half == pytest.approx(0.72, abs=1e-15)


def test_expectile_target_is_sampled_next_value():
    ag = agent_with(logits=(0.0, 0.0))
    step = Step(0, 0, 0.1, 1, False)
    rng = np.random.default_rng(2)
    vals = {compute_target(RULES["expectile_tabular"], ag, step, 0.9, NoiseSpec(), rng) for _ in range(200)}
    assert len(vals) == 2
    np.testing.assert_allclose(sorted(vals), [0.1 + 0.9 * 0.2, 0.1 + 0.9 * 1.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_annealed_endpoints_equal_component_targets(seed, sigma, q_next):
    ag = agent_with(q_next=q_next, logits=(0.3, -0.4))
    step = Step(0, 1, 0.25, 1, False)
    noise = NoiseSpec(sigma)
    full = TargetRule("annealed_weight", TauSchedule("linear", 1.0, 0.0, 10))
    w1 = compute_target(full, ag, step, 0.9, noise, np.random.default_rng(seed), t=0)
    q = compute_target(RULES["qlearning"], ag, step, 0.9, noise, np.random.default_rng(seed))
    w0 = compute_target(full, ag, step, 0.9, noise, np.random.default_rng(seed), t=10)
    s = compute_target(RULES["sarsa"], ag, step, 0.9, noise, np.random.default_rng(seed))
    assert w1 == q and w0 == s


def test_annealed_shares_one_noise_draw():
    ag = agent_with(q_next=(0.0, 0.0))
    step = Step(0, 0, 0.0, 1, False)
    noise = NoiseSpec(0.5)
    for seed in range(20):
        eps = np.random.default_rng(seed).normal(0.0, 0.5, size=2)
        got = compute_target(RULES["annealed_weight"], ag, step, 0.9, noise, np.random.default_rng(seed), t=1)
        expected = 0.5 * 0.9 * eps.max() + 0.5 * 0.9 * eps.mean()
        assert got == pytest.approx(expected, abs=1e-14)


def test_max_target_overestimates_under_noise():
    # equal next values: the noiseless max equals the mean, the noisy max is biased upward
    ag = agent_with(q_next=(0.4, 0.4))
    step = Step(0, 0, 0.0, 1, False)
    rng = np.random.default_rng(11)
    n = 200_000
    excess = np.array([compute_target(RULES["qlearning"], ag, step, 0.9, NoiseSpec(0.3), rng) for _ in range(n)]) - 0.9 * 0.4
    oracle = 0.9 * 0.3 / math.sqrt(math.pi)
    assert abs(excess.mean() - oracle) < 4 * excess.std() / math.sqrt(n)
    assert excess.mean() > 0


def test_sarsa_target_unbiased_under_noise():
    ag = agent_with(q_next=(1.0, 0.2), logits=(0.5, -0.5))
    step = Step(0, 0, 0.0, 1, False)
    clean = compute_target(RULES["sarsa"], ag, step, 0.9, NoiseSpec(), None)
    rng = np.random.default_rng(12)
    n = 100_000
    d = np.array([compute_target(RULES["sarsa"], ag, step, 0.9, NoiseSpec(0.3), rng) for _ in range(n)]) - clean
    assert abs(d.mean()) < 3 * d.std() / math.sqrt(n)


def test_disabled_noise_draws_nothing():
    ag = agent_with()
    step = Step(0, 0, 0.0, 1, False)
    rng = np.random.default_rng(0)
    compute_target(RULES["qlearning"], ag, step, 0.9, NoiseSpec(0.3, enabled=False), rng)
    assert rng.random() == np.random.default_rng(0).random()


def test_update_critic_arithmetic():
    ag = TabularAgentState.zeros(2, 2)
    update_critic(ag, 0, 1, 1.0)
    assert ag.q[0, 1] == pytest.approx(0.001, abs=1e-18)
    before = ag.q.copy()
    update_critic(ag, 0, 1, float(ag.q[0, 1]))
    np.testing.assert_array_equal(ag.q, before)


def test_update_critic_geometric_convergence():
    ag = TabularAgentState.zeros(1, 1)
    c, n = 2.5, 3000
    for _ in range(n):
        update_critic(ag, 0, 0, c)
    assert ag.q[0, 0] == pytest.approx(c * (1 - (1 - 1e-3) ** n), rel=1e-12)


def test_expectile_update_arithmetic():
    ag = TabularAgentState.zeros(1, 1)
    update_critic_expectile(ag, 0, 0, 1.0, 0.5)
    assert ag.q[0, 0] == pytest.approx(0.001, abs=1e-18)
    for u, expected in ((1.0, 1.8e-3), (-1.0, -0.2e-3)):
        ag = TabularAgentState.zeros(1, 1)
        update_critic_expectile(ag, 0, 0, u, 0.9)
        assert ag.q[0, 0] == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValueError):
        update_critic_expectile(ag, 0, 0, 1.0, 0.3)


def test_expectile_update_at_half_matches_plain_update():
    rng = np.random.default_rng(0)
    a, b = TabularAgentState.zeros(1, 1), TabularAgentState.zeros(1, 1)
    for y in rng.normal(size=2000):
        update_critic(a, 0, 0, float(y))
        update_critic_expectile(b, 0, 0, float(y), 0.5)
        assert a.q[0, 0] == b.q[0, 0]


def test_expectile_update_converges_to_expectile():
    ag = TabularAgentState.zeros(1, 1)
    rng = np.random.default_rng(5)
    tail = []
    for i, y in enumerate(rng.integers(0, 2, size=1_000_000).tolist()):
        update_critic_expectile(ag, 0, 0, float(y), 0.9)
        if i >= 900_000:
            tail.append(ag.q[0, 0])
    assert abs(np.mean(tail) - 0.9) < 0.02


def test_actor_update_values():
    ag = TabularAgentState.zeros(1, 2)
    update_actor(ag, 0, 0)
    np.testing.assert_array_equal(ag.logits, 0.0)
    ag.q[0, 0] = 1.0
    update_actor(ag, 0, 0)
    np.testing.assert_allclose(ag.logits[0], [0.0005, -0.0005], atol=1e-18)


def test_actor_uses_passed_value():
    ag = TabularAgentState.zeros(1, 2)
    ag.q[0, 1] = 5.0
    update_actor(ag, 0, 1, q_sa=1.0)
    np.testing.assert_allclose(ag.logits[0], [-0.0005, 0.0005], atol=1e-18)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.integers(0, 2))
def test_score_function_matches_finite_differences(logits, a):
    ag = TabularAgentState.zeros(1, 3)
    ag.logits[0] = logits
    p = policy_probs(ag, 0)
    analytic = np.eye(3)[a] - p
    h = 1e-6
    for b in range(3):
        up, down = ag.logits.copy(), ag.logits.copy()
        up[0, b] += h
        down[0, b] -= h
        lp = math.log(policy_probs(TabularAgentState(ag.q, up), 0)[a])
        lm = math.log(policy_probs(TabularAgentState(ag.q, down), 0)[a])
        assert (lp - lm) / (2 * h) == pytest.approx(analytic[b], abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_policy_normalised_after_updates(seed):
    rng = np.random.default_rng(seed)
    ag = TabularAgentState.zeros(3, 4, step_size=0.5)
    ag.q[:] = rng.normal(scale=20, size=(3, 4))
    for _ in range(200):
        s, a = int(rng.integers(3)), int(rng.integers(4))
        update_actor(ag, s, a)
        assert abs(policy_probs(ag, s).sum() - 1.0) <= 1e-12


def test_rule_and_agent_validation():
    with pytest.raises(ValueError):
        TargetRule("double_q")
    with pytest.raises(ValueError):
        TargetRule("annealed_weight")
    with pytest.raises(ValueError):
        TargetRule("annealed_weight", TauSchedule("linear", 1.5, 0.0, 10))
    with pytest.raises(ValueError):
        TargetRule("expectile_tabular", TauSchedule("linear", 0.9, 0.4, 10))
    with pytest.raises(ValueError):
        TabularAgentState.zeros(1, 1, step_size=0.0)
    with pytest.raises(ValueError):
        TabularAgentState.zeros(1, 1, epsilon=1.5)
    with pytest.raises(ValueError):
        NoiseSpec(-0.1)


def test_training_log_layout_and_determinism():
    mdp = build_chain_mdp()
    m1 = train_tabular(mdp, RULES["sarsa"], NoiseSpec(0.3), steps=1000, seed=3, log_every=250)
    m2 = train_tabular(mdp, RULES["sarsa"], NoiseSpec(0.3), steps=1000, seed=3, log_every=250)
    assert m1.rows == m2.rows or all(
        all((x == y) or (math.isnan(x) and math.isnan(y)) for x, y in zip(r1, r2)) for r1, r2 in zip(m1.rows, m2.rows)
    )
    assert m1.columns == ["step", "q_s0_a0", "q_s0_a1", "episode_return"]
    assert list(m1.steps) == [0, 250, 500, 750, 1000]
    assert math.isnan(m1.rows[0][3]) and m1.rows[0][1] == 0.0


def test_qlearning_reaches_optimum():
    mdp = build_chain_mdp()
    q_star = value_iteration(mdp).q[0, 0]
    m = train_tabular(mdp, RULES["qlearning"], NoiseSpec(), steps=100_000, seed=0, log_every=1000)
    assert abs(m.column("q_s0_a0")[-1] - q_star) < 0.02


def test_expectile_variant_trains():
    mdp = build_chain_mdp(ChainMdpParams(r4=0.0))
    rule = TargetRule("expectile_tabular", TauSchedule("linear", 0.9, 0.5, 5000))
    m = train_tabular(mdp, rule, steps=5000, seed=0, log_every=1000)
    assert np.all(np.isfinite(m.column("q_s0_a0")))
