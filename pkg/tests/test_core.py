from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from causalcredit.core import (DatasetFormatError, MaskPair, RunConfig, Transition,
                               dataset_from_arrays, derive_seed, one_hot_actions, read_dataset,
                               validate_dataset, write_dataset)
from conftest import random_dataset


def test_well_formed_dataset_has_no_violations(small_dataset):
    assert small_dataset.n_episodes == 2
    assert validate_dataset(small_dataset) == []


def test_missing_terminal_names_the_episode(small_dataset):
    trs = list(small_dataset.transitions)
    trs[2] = dataclasses.replace(trs[2], terminal=False)
    ds = dataclasses.replace(small_dataset, transitions=tuple(trs))
    found = validate_dataset(ds)
    assert len(found) == 1
    assert found[0].episode == 0 and "terminal" in found[0].message


def test_action_at_upper_bound_is_out_of_range(small_dataset):
    trs = list(small_dataset.transitions)
    a = list(trs[1].joint_action)
    a[0] = small_dataset.action_counts[0]
    trs[1] = dataclasses.replace(trs[1], joint_action=tuple(a))
    found = validate_dataset(dataclasses.replace(small_dataset, transitions=tuple(trs)))
    assert len(found) == 1 and "outside" in found[0].message


def test_non_consecutive_timesteps_and_split_episodes_are_flagged(small_dataset):
    trs = list(small_dataset.transitions)
    bad_t = dataclasses.replace(small_dataset, transitions=(trs[0], trs[2]) + tuple(trs[3:]))
    assert any("timestep" in v.message for v in validate_dataset(bad_t))
    reordered = tuple(trs[:2]) + tuple(trs[3:]) + (trs[2],)
    assert validate_dataset(dataclasses.replace(small_dataset, transitions=reordered))


def test_round_trip_is_bit_exact(tmp_path, small_dataset):
    path = tmp_path / "d.jsonl"
    write_dataset(small_dataset, path)
    assert read_dataset(path) == small_dataset


def test_truncated_last_line_reports_its_line_number(tmp_path, small_dataset):
    path = tmp_path / "d.jsonl"
    write_dataset(small_dataset, path)
    text = path.read_text()
    path.write_text(text[:-15])
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(path)
    assert err.value.line == len(small_dataset) + 1


def test_header_only_file_gives_empty_dataset(tmp_path, small_dataset):
    path = tmp_path / "d.jsonl"
    empty = dataclasses.replace(small_dataset, transitions=())
    write_dataset(empty, path)
    back = read_dataset(path)
    assert len(back) == 0 and back.n_episodes == 0


def test_dimension_mismatch_against_header_is_rejected(tmp_path, small_dataset):
    path = tmp_path / "d.jsonl"
    write_dataset(small_dataset, path)
    lines = path.read_text().splitlines()
    lines[1] = lines[1].replace('"s":[', '"s":[0.5,', 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(path)
    assert err.value.line == 2


def test_extra_keys_round_trip(tmp_path, small_dataset):
    path = tmp_path / "d.jsonl"
    extra = [{"r_hat": [float(k), -float(k)]} for k in range(len(small_dataset))]
    write_dataset(small_dataset, path, extra=extra)
    ds, back = read_dataset(path, extra_keys=["r_hat"])
    assert ds == small_dataset and back == extra


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.batch_size, cfg.model_lr, cfg.policy_lr, cfg.gamma, cfg.eval_episodes) == \
        (1024, 3e-4, 3e-4, 0.95, 10)
    assert (cfg.lambda1, cfg.lambda2, cfg.h) == (7e-3, 7e-3, 0.1)


@pytest.mark.parametrize("bad", [dict(lambda1=-1.0), dict(gamma=1.0), dict(batch_size=0),
                                 dict(graph_mode="XYZ"), dict(model_lr=0.0)])
def test_run_config_rejects_invalid_values(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)


def test_run_config_text_round_trip():
    cfg = RunConfig(lambda1=0.05, seed=17, graph_mode="FG", clip_enabled=False)
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert RunConfig.from_text("seed = 3  # comment\n").seed == 3
    with pytest.raises(ValueError):
        RunConfig.from_text("nonsense = 1")


def test_mask_pair_checks_range_and_hardness():
    MaskPair(0, np.array([0.0, 1.0]), np.array([1.0]), hard=True)
    with pytest.raises(ValueError):
        MaskPair(0, np.array([1.5]), np.array([1.0]))
    with pytest.raises(ValueError):
        MaskPair(0, np.array([0.5]), np.array([1.0]), hard=True)


def test_derive_seed_is_stable_and_name_sensitive():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert 0 <= derive_seed(2**40, "x") < 2**63


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 4), min_size=1, max_size=3),
       st.integers(1, 3), st.integers(1, 4))
def test_property_round_trip_identity(tmp_path_factory, seed, dims, episodes, length):
    rng = np.random.default_rng(seed)
    counts = [int(rng.integers(1, 5)) for _ in dims]
    ds = random_dataset(rng, tuple(dims), tuple(counts), episodes, length)
    assert validate_dataset(ds) == []
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    write_dataset(ds, path)
    assert read_dataset(path) == ds


@given(st.integers(0, 2**32 - 1))
def test_property_valid_datasets_feed_downstream_arrays(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, (1, 2), (2, 3), 2, 3)
    arr = ds.arrays
    oh = one_hot_actions(arr["a"], ds.action_counts)
    assert oh.shape == (len(ds), ds.action_dim)
    np.testing.assert_array_equal(oh.sum(axis=1), ds.n_agents)
    assert isinstance(ds.transitions[0], Transition)


def test_dataset_from_arrays_keeps_metadata():
    ds = dataset_from_arrays([0], [0], np.zeros((1, 1)), np.zeros((1, 1), int), [1.0],
                             np.zeros((1, 1)), [True], (1,), (2,), env="e", tier="expert", seed=4)
    assert ds.header()["tier"] == "expert" and ds.header()["seed"] == 4
