"""Round-engine tests: selection policies, local training, and FedAvg."""
from __future__ import annotations

import numpy as np
import pytest

from fedunlearn.data import DatasetSlice
from fedunlearn.fl import (
    DefenseConfig,
    RoundRecord,
    SelectionPolicy,
    fedavg_aggregate,
    local_train,
    select_participants,
)
from fedunlearn.nn import MlpArchitecture, ParamVector, forward_loss_grad, init_params

N, M, COMP = 100, 10, 0


def test_continuous_always_includes_compromised():
    policy = SelectionPolicy("continuous", m=M, seed=3)
    for r in range(50):
        selected = select_participants(policy, r, N, COMP)
        assert COMP in selected
        assert len(selected) == M == len(set(selected))
        assert selected == sorted(selected)


def test_selection_deterministic_per_round():
    policy = SelectionPolicy("random", m=M, seed=5)
    assert select_participants(policy, 17, N, COMP) == select_participants(policy, 17, N, COMP)
    assert select_participants(policy, 17, N, COMP) != select_participants(policy, 18, N, COMP)


def test_fixed_frequency_counting():
    policy = SelectionPolicy("fixed_frequency", m=M, f=10, seed=1)
    hits = sum(COMP in select_participants(policy, r, N, COMP) for r in range(100))
    assert hits == 10
    for r in range(0, 100, 10):
        assert COMP in select_participants(policy, r, N, COMP)


def test_random_selection_binomial_frequency():
    policy = SelectionPolicy("random", m=M, seed=2)
    hits = sum(COMP in select_participants(policy, r, N, COMP) for r in range(10000))
    assert hits / 10000 == pytest.approx(0.10, abs=0.01)


def test_selection_rejects_oversized_m():
    with pytest.raises(ValueError):
        select_participants(SelectionPolicy("random", m=11, seed=0), 0, 10, 0)


def vec(values):
    arr = np.asarray(values, dtype=np.float64)
    return ParamVector(arr, ((arr.size,),))


def test_fedavg_zero_updates_fixed_point():
    g = vec([1.0, 2.0])
    out = fedavg_aggregate(g, [(0, vec([0, 0]), 5), (1, vec([0, 0]), 5)], DefenseConfig())
    assert np.array_equal(out.values, g.values)


def test_fedavg_single_participant_adds_update():
    g = vec([1.0, -1.0])
    out = fedavg_aggregate(g, [(3, vec([0.5, 0.5]), 7)], DefenseConfig())
    np.testing.assert_allclose(out.values, [1.5, -0.5], atol=1e-15)


def test_fedavg_weighted_mean_hand_oracle():
    g = vec([0.0, 0.0])
    updates = [(0, vec([4.0, 0.0]), 1), (1, vec([0.0, 4.0]), 3)]
    out = fedavg_aggregate(g, updates, DefenseConfig())
    np.testing.assert_allclose(out.values, [1.0, 3.0], atol=1e-15)


def test_fedavg_equal_sizes_is_unweighted_mean():
    rng = np.random.default_rng(0)
    g = vec(rng.normal(0, 1, 6))
    locals_ = [vec(rng.normal(0, 1, 6)) for _ in range(4)]
    updates = [(i, loc.sub(g), 25) for i, loc in enumerate(locals_)]
    out = fedavg_aggregate(g, updates, DefenseConfig())
    mean_local = np.mean([loc.values for loc in locals_], axis=0)
    np.testing.assert_allclose(out.values, mean_local, atol=1e-12)


def test_fedavg_zero_sigma_matches_no_noise_bitwise():
    rng = np.random.default_rng(1)
    g = vec(rng.normal(0, 1, 8))
    updates = [(i, vec(rng.normal(0, 1, 8)), 10 + i) for i in range(3)]
    a = fedavg_aggregate(g, updates, DefenseConfig(noise_sigma=0.0, seed=9))
    b = fedavg_aggregate(g, updates, DefenseConfig())
    assert np.array_equal(a.values, b.values)


def test_fedavg_noise_is_seeded_and_nonzero():
    rng = np.random.default_rng(2)
    g = vec(rng.normal(0, 1, 8))
    updates = [(0, vec(rng.normal(0, 1, 8)), 10)]
    noisy1 = fedavg_aggregate(g, updates, DefenseConfig(noise_sigma=0.5, seed=4))
    noisy2 = fedavg_aggregate(g, updates, DefenseConfig(noise_sigma=0.5, seed=4))
    clean = fedavg_aggregate(g, updates, DefenseConfig())
    assert np.array_equal(noisy1.values, noisy2.values)
    assert not np.array_equal(noisy1.values, clean.values)


def test_fedavg_input_validation():
    g = vec([0.0])
    with pytest.raises(ValueError):
        fedavg_aggregate(g, [], DefenseConfig())
    with pytest.raises(ValueError):
        fedavg_aggregate(g, [(0, vec([1.0]), 0)], DefenseConfig())


def test_defense_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig(noise_sigma=-0.1)


def test_local_train_noop_cases(ref_data, warm_global):
    out = local_train(warm_global, ref_data.arch, ref_data.slices[1], 0, 0.1, 20, 0)
    assert out is warm_global
    out = local_train(warm_global, ref_data.arch, ref_data.slices[1], 1, 0.0, 20, 0)
    assert out is warm_global


def test_local_train_descends(ref_data):
    arch = ref_data.arch
    descended = 0
    for seed in range(20):
        params = init_params(arch, seed)
        data = ref_data.slices[seed % len(ref_data.slices)]
        before = forward_loss_grad(params, arch, data).loss
        after_params = local_train(params, arch, data, 1, 0.1, 20, seed)
        after = forward_loss_grad(after_params, arch, data).loss
        descended += after <= before
    assert descended >= 18


def test_round_record_band_helpers():
    rec = RoundRecord(
        round=1, phase="remove", selected=(0, 1, 2), global_params_norm=1.0,
        update_l2_per_participant={0: 0.5, 1: 0.2, 2: 0.9}, acc_main=0.9, acc_backdoor=0.1,
    )
    assert rec.l2_compromised(0) == 0.5
    assert rec.l2_benign_band(0) == (0.2, 0.9)
    assert rec.l2_compromised(7) is None
    lonely = RoundRecord(
        round=0, phase="insert", selected=(0,), global_params_norm=1.0,
        update_l2_per_participant={0: 0.5}, acc_main=0.9, acc_backdoor=0.1,
    )
    assert lonely.l2_benign_band(0) is None
