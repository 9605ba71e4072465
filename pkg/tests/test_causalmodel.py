from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from causalcredit.causalmodel import (AssignedDataset, Batch, CausalModel, NumericalFailure,
                                      assign_rewards, build_model, clip_masks, hard_masks,
                                      model_loss, predict_masks, predict_reward,
                                      reconstruction_mse, train_model)
from causalcredit.core import MaskPair, RunConfig, dataset_from_arrays, one_hot_actions
from causalcredit.oracle import finite_diff_check
from causalcredit.synthenv import collect_dataset, make_env
from conftest import random_dataset

DIMS, COUNTS = (2, 3), (3, 2)


def tiny(mode="DG", scope="local", seed=0, hidden=6, h=0.1):
    m = CausalModel(DIMS, COUNTS, graph_mode=mode, h=h, scope=scope, hidden=hidden, seed=seed,
                    mask_init=0.6)
    rng = np.random.default_rng(seed)
    for name, p in m.params().items():
        if name.endswith(".b"):
            p[...] = rng.normal(scale=0.3, size=p.shape)
        elif name.startswith("fg_"):
            p[...] = rng.normal(size=p.shape)
    return m


def batch_of(ds):
    return Batch.from_dataset(ds)


def sample_input(seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=sum(DIMS)), np.array([rng.integers(3), rng.integers(2)])


def test_fcg_masks_are_all_ones():
    s, a = sample_input()
    mp = predict_masks(tiny("FCG"), s, a, 1)
    np.testing.assert_array_equal(mp.state_mask, np.ones(5))
    np.testing.assert_array_equal(mp.action_mask, np.ones(5))


def test_fg_masks_ignore_the_input():
    m = tiny("FG", scope="joint")
    (s1, a1), (s2, a2) = sample_input(1), sample_input(2)
    p1, p2 = predict_masks(m, s1, a1, 0), predict_masks(m, s2, a2, 0)
    np.testing.assert_array_equal(p1.state_mask, p2.state_mask)
    np.testing.assert_array_equal(p1.action_mask, p2.action_mask)


def test_dg_masks_are_deterministic_and_input_dependent():
    m = tiny("DG", scope="joint")
    s, a = sample_input()
    np.testing.assert_array_equal(predict_masks(m, s, a, 0).state_mask,
                                  predict_masks(m, s, a, 0).state_mask)
    other = predict_masks(m, s + 1.0, a, 0).state_mask
    assert not np.array_equal(other, predict_masks(m, s, a, 0).state_mask)


def test_unknown_agent_is_rejected():
    s, a = sample_input()
    with pytest.raises(ValueError, match="agent"):
        predict_masks(tiny(), s, a, 2)


def test_clip_masks_reference_values():
    mp = MaskPair(0, np.array([0.05, 0.11, 0.92]), np.array([0.5]))
    soft, hard = clip_masks(mp, 0.1)
    np.testing.assert_array_equal(soft.state_mask, [0.0, 0.11, 0.92])
    np.testing.assert_array_equal(hard.state_mask, [0.0, 1.0, 1.0])
    assert hard.hard


def test_clip_masks_edge_thresholds():
    mp = MaskPair(0, np.array([0.05, 0.6, 0.99]), np.array([0.3]))
    np.testing.assert_array_equal(clip_masks(mp, 0.0)[0].state_mask, mp.state_mask)
    assert not np.any(clip_masks(mp, 1.0)[0].state_mask)
    with pytest.raises(ValueError):
        clip_masks(mp, -0.1)


def test_zero_mask_reward_ignores_inputs():
    m = tiny()
    zero = MaskPair(0, np.zeros(5), np.zeros(5))
    (s1, a1), (s2, a2) = sample_input(3), sample_input(4)
    assert predict_reward(m, s1, a1, zero, 0) == predict_reward(m, s2, a2, zero, 0)


def test_ones_mask_reward_is_raw_network():
    m = tiny()
    s, a = sample_input(5)
    ones = MaskPair(1, np.ones(5), np.ones(5))
    raw = np.concatenate([s, one_hot_actions(a[None], COUNTS)[0], [0.0, 1.0]])
    assert predict_reward(m, s, a, ones, 1) == m.psi_r(raw)[0]


def test_linear_reward_net_closed_form():
    m = CausalModel(DIMS, COUNTS, hidden=1, seed=0)
    w = np.arange(1.0, 13.0) / 10.0          # 5 state + 5 action + 2 agent inputs
    net = m.psi_r
    net.weights[0][:, 0] = w
    net.biases[0][:] = 100.0                  # keeps every ReLU in its linear regime
    for k in (1, 2, 3):
        net.weights[k][:] = 1.0
        net.biases[k][:] = 0.0
    s, a = np.array([2.0, -1.0, 3.0, 0.5, 4.0]), np.array([1, 0])
    mask = MaskPair(0, np.array([1.0, 0, 0, 0, 0]), np.zeros(5))
    assert predict_reward(m, s, a, mask, 0) == pytest.approx(0.1 * 2.0 + 1.1 * 1.0 + 100.0,
                                                             abs=1e-12)


def test_loss_of_zero_predictor_is_mean_square_reward():
    m = tiny("FCG")
    m.psi_r.weights[-1][:] = 0.0
    m.psi_r.biases[-1][:] = 0.0
    batch = Batch(np.zeros((2, 5)), one_hot_actions(np.array([[0, 0], [1, 1]]), COUNTS),
                  np.array([1.0, -1.0]))
    assert model_loss(m, batch, 0.0, 0.0)[0] == pytest.approx(1.0, abs=1e-15)


def test_loss_with_perfect_reconstruction_is_the_regulariser():
    m = CausalModel((6,), (2,), graph_mode="FG", hidden=4, seed=0)
    m.fg_state[:] = 0.0                       # six entries at 0.5 each
    m.psi_r.weights[-1][:] = 0.0
    m.psi_r.biases[-1][:] = 0.0
    batch = Batch(np.ones((4, 6)), one_hot_actions(np.zeros((4, 1), int), (2,)), np.zeros(4))
    assert model_loss(m, batch, 1.0, 0.0)[0] == pytest.approx(3.0, abs=1e-12)


def test_empty_batch_is_rejected():
    with pytest.raises(ValueError):
        model_loss(tiny(), Batch(np.zeros((0, 5)), np.zeros((0, 5)), np.zeros(0)), 0.0, 0.0)


@pytest.mark.parametrize("mode", ["DG", "FG", "FCG"])
@pytest.mark.parametrize("scope", ["local", "joint"])
def test_model_loss_gradients_match_finite_differences(mode, scope, small_dataset):
    m = tiny(mode, scope)
    batch = batch_of(small_dataset)
    rep = finite_diff_check(lambda: model_loss(m, batch, 0.3, 0.2), m.params(), n_probes=100)
    assert rep.max_rel_error <= 1e-4, rep.max_rel_error


def _train_cfg(**kw):
    base = dict(train_steps=40, batch_size=16, hidden=8, eval_interval=20, mask_samples=32)
    base.update(kw)
    return RunConfig(**base)


def test_training_is_deterministic(small_dataset):
    cfg = _train_cfg()
    _, log1 = train_model(build_model(small_dataset, cfg), small_dataset, cfg)
    _, log2 = train_model(build_model(small_dataset, cfg), small_dataset, cfg)
    assert log1.rows == log2.rows and len(log1.rows) == 2
    assert {"step", "recon_mse", "l1_state", "l1_action", "S_sr", "S_ar"} <= set(log1.rows[0])


def test_non_finite_loss_aborts_with_step(small_dataset):
    arr = small_dataset.arrays
    ds = dataset_from_arrays(arr["episode"], arr["t"], arr["s"], arr["a"],
                             np.full(len(small_dataset), 1e300), arr["s_next"], arr["done"],
                             DIMS, COUNTS)
    cfg = _train_cfg()
    with pytest.raises(NumericalFailure) as err:
        train_model(build_model(ds, cfg), ds, cfg)
    assert err.value.step == 1


def test_fcg_assignment_sums_to_team_reward_within_reconstruction_error(small_dataset):
    cfg = _train_cfg(graph_mode="FCG", train_steps=60)
    model, _ = train_model(build_model(small_dataset, cfg), small_dataset, cfg)
    assigned = assign_rewards(model, small_dataset)
    err = np.mean((assigned.r_hat.sum(axis=1) - small_dataset.arrays["R"]) ** 2)
    assert err == pytest.approx(reconstruction_mse(model, batch_of(small_dataset)), rel=1e-12)


def test_huge_threshold_gives_state_independent_rewards(small_dataset):
    m = tiny("DG")
    m.h = 2.0
    r_hat = assign_rewards(m, small_dataset).r_hat
    np.testing.assert_allclose(r_hat, np.broadcast_to(r_hat[0], r_hat.shape), rtol=0, atol=0)


def test_single_agent_assignment_tracks_team_reward():
    env, truth = make_env("LINEAR", 1, (4, 2), 0.5, 7)
    ds, _ = collect_dataset(env, truth, "medium", 120, 0)
    cfg = RunConfig(train_steps=1500, batch_size=128, hidden=32, eval_interval=1500, seed=0)
    model, _ = train_model(build_model(ds, cfg), ds, cfg)
    r_hat = assign_rewards(model, ds).r_hat[:, 0]
    R = ds.arrays["R"]
    assert np.mean((r_hat - R) ** 2) <= 0.01 * np.var(R)


def test_model_and_assignment_serialization(tmp_path, small_dataset):
    m = tiny("FG")
    m.save(tmp_path / "m.json")
    back = CausalModel.load(tmp_path / "m.json")
    b = batch_of(small_dataset)
    np.testing.assert_array_equal(m.individual_rewards(b.s, b.a_onehot),
                                  back.individual_rewards(b.s, b.a_onehot))
    assigned = assign_rewards(m, small_dataset)
    assigned.write(tmp_path / "a.jsonl")
    again = AssignedDataset.read(tmp_path / "a.jsonl")
    np.testing.assert_array_equal(again.r_hat, assigned.r_hat)
    assert again.dataset == small_dataset


models = st.tuples(st.sampled_from(["DG", "FG"]), st.sampled_from(["local", "joint"]),
                   st.integers(0, 10_000), st.floats(0.0, 0.9))


@given(models)
def test_property_mask_ranges(spec):
    mode, scope, seed, h = spec
    m = tiny(mode, scope, seed, h=h)
    ds = random_dataset(np.random.default_rng(seed), DIMS, COUNTS, 1, 4)
    b = batch_of(ds)
    cs, ca = m.soft_masks(b.s, b.a_onehot)
    for soft, adm in ((cs, m.adm_state), (ca, m.adm_action)):
        inside = soft[:, adm.astype(bool)]
        assert np.all((inside > 0) & (inside < 1))
        assert not np.any(soft[:, ~adm.astype(bool)])
        clipped = np.where(soft < h, 0.0, soft)
        assert np.all((clipped == 0) | ((clipped >= h) & (clipped < 1)))
    hs, ha = hard_masks(m, b.s, b.a_onehot, h)
    assert set(np.unique(np.concatenate([hs.ravel(), ha.ravel()]))) <= {0.0, 1.0}


@given(st.integers(0, 10_000), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_property_fcg_assignment_ignores_threshold(seed, h1, h2):
    m = tiny("FCG", seed=seed)
    ds = random_dataset(np.random.default_rng(seed), DIMS, COUNTS, 1, 3)
    m.h = h1
    r1 = assign_rewards(m, ds).r_hat
    m.h = h2
    np.testing.assert_array_equal(r1, assign_rewards(m, ds).r_hat)


@given(models, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_property_model_loss_gradients(spec, lam1, lam2):
    mode, scope, seed, _ = spec
    m = tiny(mode, scope, seed)
    b = batch_of(random_dataset(np.random.default_rng(seed), DIMS, COUNTS, 1, 3))
    rep = finite_diff_check(lambda: model_loss(m, b, lam1, lam2), m.params(), n_probes=100,
                            seed=seed)
    assert rep.max_rel_error <= 1e-4, rep.probes
