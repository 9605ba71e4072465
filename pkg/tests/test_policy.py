from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from causalcredit.core import RunConfig
from causalcredit.oracle import finite_diff_check
from causalcredit.policy import (AgentBatch, GreedyPolicy, PolicyDivergence, QEnsemble,
                                 cql_loss, evaluate, evaluate_actor, train_policy)
from causalcredit.synthenv import behavior_policy, collect_dataset, make_env, policy_actor
from conftest import random_dataset


def agent(seed=0, d=3, a=4, hidden=6, randomize=True):
    qe = QEnsemble.init((d,), (a,), seed, hidden=hidden)
    ag = qe.agents[0]
    if randomize:
        rng = np.random.default_rng(seed)
        for net in ag.online + ag.target:
            for b in net.biases:
                b[...] = rng.normal(scale=0.3, size=b.shape)
    return ag


def batch(seed=0, n=5, d=3, a=4, r=None, done=None):
    rng = np.random.default_rng(seed)
    return AgentBatch(o=rng.normal(size=(n, d)), a=rng.integers(0, a, n),
                      r=rng.normal(size=n) if r is None else np.full(n, float(r)),
                      o_next=rng.normal(size=(n, d)),
                      done=(rng.random(n) < 0.3).astype(float) if done is None else
                      np.full(n, float(done)))


def zero_q(ag, value=0.0):
    for net in ag.online + ag.target:
        net.weights[-1][...] = 0.0
        net.biases[-1][...] = value


def test_loss_of_zero_q_with_unit_reward():
    ag = agent()
    zero_q(ag)
    loss, _, _ = cql_loss(ag, batch(r=1.0), gamma=0.0, alpha=0.0)
    assert loss == pytest.approx(1.0, abs=1e-15)


def test_conservative_term_of_constant_q_is_log_action_count():
    ag = agent()
    zero_q(ag, value=2.5)
    b = batch(r=2.5)
    loss, _, stats = cql_loss(ag, b, gamma=0.0, alpha=1.0)
    assert stats["gap"] == pytest.approx(np.log(4), abs=1e-12)
    assert loss == pytest.approx(np.log(4), abs=1e-12)


def test_missing_reward_is_rejected():
    b = batch()
    b.r = None
    with pytest.raises(ValueError):
        cql_loss(agent(), b, 0.9, 1.0)


def test_cql_gradients_match_finite_differences():
    ag = agent(1)
    b = batch(1)
    rep = finite_diff_check(lambda: cql_loss(ag, b, 0.95, 0.7)[:2], ag.params(), n_probes=100)
    assert rep.max_rel_error <= 1e-4, rep.max_rel_error


@pytest.fixture(scope="module")
def single_agent_env():
    env, truth = make_env("LINEAR", 1, (3, 3), 0.5, 5, score_episodes=100, horizon=10)
    ds, hidden = collect_dataset(env, truth, "medium", 30, 0)
    return env, truth, ds, hidden


def _cfg(**kw):
    base = dict(policy_steps=30, batch_size=32, hidden=8, eval_interval=10, target_sync=7)
    base.update(kw)
    return RunConfig(**base)


def test_team_mode_equals_individual_mode_for_one_agent(single_agent_env):
    _, _, ds, _ = single_agent_env
    _, team = train_policy(ds, _cfg(), "TEAM")
    _, ind = train_policy(ds, _cfg(), "INDIVIDUAL", rewards=ds.arrays["R"][:, None].copy())
    assert team.rows == ind.rows


def test_training_is_deterministic(small_dataset):
    q1, _ = train_policy(small_dataset, _cfg(), "TEAM")
    q2, _ = train_policy(small_dataset, _cfg(), "TEAM")
    assert q1.to_dict() == q2.to_dict()


def test_individual_mode_needs_rewards(small_dataset):
    with pytest.raises(ValueError):
        train_policy(small_dataset, _cfg(), "INDIVIDUAL")


def test_divergence_aborts_with_diagnostics(small_dataset):
    huge = np.full((len(small_dataset), small_dataset.n_agents), 1e12)
    with pytest.raises(PolicyDivergence) as err:
        train_policy(small_dataset, _cfg(policy_lr=1.0, gamma=0.99), "INDIVIDUAL", rewards=huge)
    assert err.value.step >= 1 and err.value.value > 1e6


def test_random_and_expert_evaluations_match_generation_scores(single_agent_env):
    env, truth, _, _ = single_agent_env
    for tier in ("random", "expert"):
        rep = evaluate_actor(policy_actor(behavior_policy(tier, env, truth)), env, truth, 400, 11)
        ref = truth.scores[tier]
        se = np.hypot(rep.std_return / np.sqrt(rep.n_episodes), ref["std"] / np.sqrt(ref["n"]))
        assert abs(rep.mean_return - ref["mean"]) <= 2 * se


def test_empty_evaluation_is_rejected(single_agent_env):
    env, truth, ds, _ = single_agent_env
    qe = QEnsemble.init(ds.state_dims, ds.action_counts, 0, hidden=4)
    with pytest.raises(ValueError):
        evaluate(qe, env, truth, 0, 0)


def test_evaluation_is_deterministic_and_serialisable(tmp_path, single_agent_env):
    env, truth, ds, _ = single_agent_env
    qe, _ = train_policy(ds, _cfg(), "TEAM")
    qe.save(tmp_path / "q.json")
    back = QEnsemble.load(tmp_path / "q.json")
    a, b = evaluate(qe, env, truth, 5, 3), evaluate(back, env, truth, 5, 3)
    assert a.to_dict() == b.to_dict()
    assert set(a.to_dict()) == {"mean_return", "std_return", "n_episodes", "normalized_score"}


@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 6))
def test_property_target_lag(seed, updates, period):
    qe = QEnsemble.init((2,), (3,), seed, hidden=4, sync_every=period)
    ag = qe.agents[0]
    rng = np.random.default_rng(seed)
    frozen = [t.to_dict() for t in ag.target]
    for _ in range(updates):
        for net in ag.online:
            net.weights[0] += rng.normal(size=net.weights[0].shape)
        synced = qe.after_update()
        if synced:
            for t, o in zip(ag.target, ag.online):
                assert t.to_dict()["layers"] == o.to_dict()["layers"]
            frozen = [t.to_dict() for t in ag.target]
        else:
            assert [t.to_dict() for t in ag.target] == frozen


@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.0, 5.0))
def test_property_conservative_gap_non_negative(seed, actions, alpha):
    ag = agent(seed, a=actions)
    _, _, stats = cql_loss(ag, batch(seed, a=actions), 0.9, alpha)
    assert stats["min_gap0"] >= 0.0 and stats["min_gap1"] >= 0.0
    if actions == 1:
        assert stats["gap"] == 0.0


@given(st.integers(0, 10_000), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_property_greedy_ties_go_to_lowest_index(seed, levels):
    qe = QEnsemble.init((2,), (4,), seed, hidden=4)
    for net in qe.agents[0].online:
        net.weights[-1][...] = 0.0
        net.biases[-1][...] = np.asarray(levels, float)
    s = np.random.default_rng(seed).normal(size=(3, 2))
    acts = GreedyPolicy(qe).act(s)
    assert np.all(acts[:, 0] == int(np.argmax(levels)))
    assert levels[int(acts[0, 0])] == max(levels) and \
        all(levels[k] < max(levels) for k in range(int(acts[0, 0])))


@given(st.integers(0, 10_000), st.floats(0.0, 0.99), st.floats(0.0, 3.0))
def test_property_cql_gradients(seed, gamma, alpha):
    ag = agent(seed)
    b = batch(seed)
    rep = finite_diff_check(lambda: cql_loss(ag, b, gamma, alpha)[:2], ag.params(), n_probes=100,
                            seed=seed)
    assert rep.max_rel_error <= 1e-4, rep.probes


def test_valid_dataset_trains_without_error():
    ds = random_dataset(np.random.default_rng(4))
    qe, log = train_policy(ds, _cfg(policy_steps=10), "TEAM")
    assert qe.updates == 10 and log.rows[-1]["step"] == 10
