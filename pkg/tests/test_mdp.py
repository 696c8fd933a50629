import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aqlab.mdp import (
    ChainMdpParams,
    ConvergenceError,
    TabularMdp,
    build_chain_mdp,
    exact_policy_q,
    load_mdp,
    mdp_from_dict,
    run_episode,
    value_iteration,
)

rewards = st.floats(-2.0, 2.0, allow_nan=False)


def enumerate_chain_q(r1, r2, r3, r4, gamma):
    """Optimal action values of the chain by listing every action sequence.

    Written from the chain's wiring alone (no MDP object): each first action
    leads to a middle state, each second action to a terminal state.
    """
    first = {0: r1, 1: r2}
    second = {0: r3, 1: r4}
    q = np.zeros((5, 2))
    for a0 in (0, 1):
        q[0, a0] = max(first[a0] + gamma * second[a1] for a1 in (0, 1))
    for s in (1, 2):
        for a in (0, 1):
            q[s, a] = second[a]
    return q


def test_chain_structure():
    mdp = build_chain_mdp(ChainMdpParams(r1=1, r2=0.5, r3=0.5, r4=0.5, discount=0.9))
    assert (mdp.n_states, mdp.n_actions) == (5, 2)
    assert mdp.terminal == frozenset({3, 4})
    assert mdp.discount == 0.9
    np.testing.assert_array_equal(mdp.reward[:3], [[1, 0.5], [0.5, 0.5], [0.5, 0.5]])
    assert mdp.transition[0, 0, 1] == mdp.transition[0, 1, 2] == 1.0
    for s in (1, 2):
        assert mdp.transition[s, 0, 3] == mdp.transition[s, 1, 4] == 1.0
    np.testing.assert_allclose(mdp.initial_dist, [1 / 3, 1 / 3, 1 / 3, 0, 0])


def test_negative_reward_arm():
    mdp = build_chain_mdp(ChainMdpParams(r1=0.25, r2=-0.25))
    assert mdp.reward[0, 1] == -0.25
    q = value_iteration(mdp).q
    assert q[0, 1] == pytest.approx(-0.25 + 0.9 * 0.5, abs=1e-12)


def test_chain_optimal_values():
    vt = value_iteration(build_chain_mdp())
    assert vt.q[0, 0] == pytest.approx(1.45, abs=1e-12)
    assert vt.q[0, 1] == pytest.approx(0.95, abs=1e-12)
    np.testing.assert_array_equal(vt.v, vt.q.max(axis=1))


def test_zero_reward_and_myopic_cases():
    zero = build_chain_mdp(ChainMdpParams(0, 0, 0, 0))
    assert np.all(value_iteration(zero).q == 0)
    myopic = build_chain_mdp(ChainMdpParams(discount=0.0))
    q = value_iteration(myopic).q
    np.testing.assert_array_equal(q[:3], myopic.reward[:3])


@settings(max_examples=60, deadline=None)
@given(rewards, rewards, rewards, rewards, st.floats(0.0, 0.99))
def test_value_iteration_matches_enumeration(r1, r2, r3, r4, gamma):
    mdp = build_chain_mdp(ChainMdpParams(r1, r2, r3, r4, gamma))
    vt = value_iteration(mdp, tol=1e-13)
    np.testing.assert_allclose(vt.q, enumerate_chain_q(r1, r2, r3, r4, gamma), atol=1e-10)


def _random_mdp(rng, S=6, A=3, gamma=0.95):
    P = rng.random((S, A, S))
    P /= P.sum(axis=2, keepdims=True)
    P[-1] = 0.0
    P[-1, :, -1] = 1.0
    d0 = np.full(S, 1.0 / S)
    return TabularMdp(P, rng.normal(size=(S, A)), frozenset({S - 1}), gamma, d0)


def test_residuals_nonincreasing_and_below_tol():
    mdp = _random_mdp(np.random.default_rng(3))
    vt = value_iteration(mdp, tol=1e-11)
    r = vt.residuals
    assert r[-1] <= 1e-11
    assert all(b <= a + 1e-15 for a, b in zip(r[1:], r[2:]))


def test_nonconvergence_reports_residual():
    mdp = _random_mdp(np.random.default_rng(0), gamma=0.99)
    with pytest.raises(ConvergenceError) as err:
        value_iteration(mdp, tol=1e-12, max_iters=5)
    assert err.value.residual > 1e-12
    with pytest.raises(ConvergenceError):
        exact_policy_q(mdp, np.full((6, 3), 1 / 3), max_iters=3)


def test_bad_tolerance():
    with pytest.raises(ValueError):
        value_iteration(build_chain_mdp(), tol=0.0)


def test_policy_q_uniform_equals_optimal_when_successor_values_tie():
    mdp = build_chain_mdp()
    q = exact_policy_q(mdp, np.full((5, 2), 0.5)).q
    assert q[0, 0] == pytest.approx(1.45, abs=1e-12)


def test_policy_q_of_greedy_optimal_policy_is_optimal():
    mdp = build_chain_mdp(ChainMdpParams(r4=0.0))
    q_star = value_iteration(mdp).q
    greedy = np.eye(2)[np.argmax(q_star, axis=1)]
    np.testing.assert_allclose(exact_policy_q(mdp, greedy).q, q_star, atol=1e-12)


def test_policy_q_myopic():
    mdp = build_chain_mdp(ChainMdpParams(r1=0.3, r4=-1.0, discount=0.0))
    q = exact_policy_q(mdp, np.full((5, 2), 0.5)).q
    np.testing.assert_array_equal(q[:3], mdp.reward[:3])


def test_policy_q_matches_trajectory_enumeration():
    mdp = build_chain_mdp(ChainMdpParams(r4=0.0))
    pi = np.array([[0.3, 0.7], [0.6, 0.4], [0.2, 0.8], [0.5, 0.5], [0.5, 0.5]])
    q = exact_policy_q(mdp, pi).q
    # s0 then one more action from the successor: enumerate both steps
    for a0, s1 in ((0, 1), (1, 2)):
        expected = sum(pi[s1, a1] * (mdp.reward[0, a0] + 0.9 * mdp.reward[s1, a1]) for a1 in (0, 1))
        assert q[0, a0] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_policy_values_never_exceed_optimal(seed):
    rng = np.random.default_rng(seed)
    mdp = _random_mdp(rng)
    pi = rng.dirichlet(np.ones(3), size=6)
    assert np.all(exact_policy_q(mdp, pi).q <= value_iteration(mdp).q + 1e-9)


def test_policy_rows_validated():
    with pytest.raises(ValueError):
        exact_policy_q(build_chain_mdp(), np.full((5, 2), 0.7))


def test_run_episode_deterministic_chain():
    mdp = build_chain_mdp()
    traj = run_episode(mdp, lambda s, rng: 0, np.random.default_rng(0), start=0)
    assert [tuple(t) for t in traj] == [(0, 0, 1.0, 1, False), (1, 0, 0.5, 3, True)]


def test_run_episode_max_len_and_determinism():
    mdp = build_chain_mdp()
    pol = lambda s, rng: int(rng.integers(2))
    assert len(run_episode(mdp, pol, np.random.default_rng(1), max_len=1, start=0)) == 1
    a = run_episode(mdp, pol, np.random.default_rng(5))
    b = run_episode(mdp, pol, np.random.default_rng(5))
    assert a == b
    for step in a:
        assert step.r == mdp.reward[step.s, step.a]


def test_episode_starts_follow_initial_distribution():
    mdp = build_chain_mdp()
    rng = np.random.default_rng(0)
    starts = [run_episode(mdp, lambda s, r: 0, rng)[0].s for _ in range(3000)]
    counts = np.bincount(starts, minlength=3)
    assert counts.sum() == 3000 and np.all(np.abs(counts - 1000) < 4 * np.sqrt(3000 * (1 / 3) * (2 / 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constructed_rows_are_normalised(seed):
    mdp = _random_mdp(np.random.default_rng(seed))
    assert np.max(np.abs(mdp.transition.sum(axis=2) - 1.0)) <= 1e-12


def test_constructor_validation():
    good = build_chain_mdp()
    P = np.array(good.transition)
    P[0, 0, 1] = 0.9
    with pytest.raises(ValueError, match="distribution"):
        TabularMdp(P, good.reward, good.terminal, 0.9, good.initial_dist)
    with pytest.raises(ValueError, match="discount"):
        TabularMdp(good.transition, good.reward, good.terminal, 1.0, good.initial_dist)
    with pytest.raises(ValueError):
        TabularMdp(good.transition, good.reward[:, :1], good.terminal, 0.9, good.initial_dist)
    assert not good.transition.flags.writeable


def test_yaml_round_trip(tmp_path):
    text = """
states: [start, left, right, goal]
actions: [go, stay]
transitions:
  - [start, go, left, 0.5, 1.0]
  - [start, go, right, 0.5, 1.0]
  - [start, stay, start, 1.0, 0.0]
  - [left, go, goal, 1.0, 2.0]
  - [left, stay, left, 1.0, 0.0]
  - [right, go, goal, 1.0, -1.0]
  - [right, stay, right, 1.0, 0.0]
terminal: [goal]
discount: 0.5
initial: {start: 1.0}
"""
    p = tmp_path / "m.yaml"
    p.write_text(text)
    mdp = load_mdp(p)
    assert mdp.state_names == ("start", "left", "right", "goal")
    q = value_iteration(mdp).q
    # left: 2, right: max(-1, 0 + 0.5 * V(right)) = 0 via staying forever
    assert q[1, 0] == pytest.approx(2.0)
    assert q[0, 0] == pytest.approx(1.0 + 0.5 * (0.5 * 2.0 + 0.5 * 0.0))


def test_yaml_errors():
    base = {"states": 2, "actions": 1, "transitions": [[0, 0, 1, 1.0, 1.0]], "terminal": [1], "discount": 0.9,
            "initial": {0: 1.0}}
    assert mdp_from_dict(base).n_states == 2
    with pytest.raises(ValueError, match="unknown"):
        mdp_from_dict({**base, "extra": 1})
    with pytest.raises(ValueError, match="missing"):
        mdp_from_dict({k: v for k, v in base.items() if k != "discount"})
    with pytest.raises(ValueError, match="conflicting"):
        mdp_from_dict({**base, "transitions": [[0, 0, 1, 0.5, 1.0], [0, 0, 0, 0.5, 2.0]]})
    with pytest.raises(ValueError, match="unknown state"):
        mdp_from_dict({**base, "transitions": [[0, 0, 7, 1.0, 1.0]]})
    with pytest.raises(ValueError, match="missing transitions"):
        mdp_from_dict({**base, "actions": 2})


def test_all_action_sequences_bounded_by_optimum():
    mdp = build_chain_mdp(ChainMdpParams(r3=0.5, r4=0.0))
    q_star = value_iteration(mdp).q
    for a0, a1 in itertools.product((0, 1), repeat=2):
        s1 = 1 if a0 == 0 else 2
        ret = mdp.reward[0, a0] + 0.9 * mdp.reward[s1, a1]
        assert ret <= q_star[0, a0] + 1e-12
