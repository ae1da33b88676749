"""Unlearning tests: importance weights, loss variants, the learning-rate
staircase, and the removal update algebra."""
from __future__ import annotations

import numpy as np
import pytest

from fedunlearn.data import DatasetSlice
from fedunlearn.nn import MlpArchitecture, ParamVector, accuracy, forward_loss_grad
from fedunlearn.unlearn import (
    MEMORY_PRESERVE,
    MP_PENALTY_UNWEIGHTED,
    MP_PENALTY_WEIGHTED,
    NAIVE_GA,
    ImportancePair,
    UnlearnPlan,
    compute_importance,
    removal_update,
    run_unlearning,
    unlearn_loss_grad,
)


def tiny_instance(seed=0):
    """A small model plus disjoint benign and trigger batches."""
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture(3, (4,), 3, activation="tanh")
    global_params = ParamVector(rng.normal(0, 0.5, arch.param_count()), arch.layer_shapes())
    benign = DatasetSlice(rng.normal(0, 1, (6, 3)), rng.integers(0, 3, 6).astype(np.int64))
    trigger = DatasetSlice(rng.normal(2, 1, (4, 3)), np.full(4, 1, np.int64))
    return arch, global_params, benign, trigger


def test_plan_validation_and_lr_staircase():
    plan = UnlearnPlan(lr0=1e-5, lr_decay_every=2, lr_decay_factor=10.0)
    expected = [1e-5, 1e-5, 1e-6, 1e-6, 1e-7, 1e-7]
    np.testing.assert_allclose([plan.lr_at(e) for e in range(6)], expected, rtol=1e-12)
    with pytest.raises(ValueError):
        UnlearnPlan(variant="bogus")
    with pytest.raises(ValueError):
        UnlearnPlan(gamma=-1.0)
    with pytest.raises(ValueError):
        UnlearnPlan(omega_clip=0.0)


def test_omega_matches_symbolic_hand_computation():
    """One-hidden-unit tanh network, one benign and one trigger example: the
    importance ratio matches a sympy-differentiated cross-entropy exactly."""
    sympy = pytest.importorskip("sympy")
    arch = MlpArchitecture(1, (1,), 2, activation="tanh")
    values = np.array([0.7, -0.2, 0.5, -0.4, 0.1, 0.3])
    params = ParamVector(values, arch.layer_shapes())

    w1, b1, w20, w21, b20, b21, x = sympy.symbols("w1 b1 w20 w21 b20 b21 x")
    a = sympy.tanh(x * w1 + b1)
    logits = [a * w20 + b20, a * w21 + b21]
    lse = sympy.log(sympy.exp(logits[0]) + sympy.exp(logits[1]))

    def grad_at(x_val, label):
        loss = lse - logits[label]
        subs = {w1: values[0], b1: values[1], w20: values[2], w21: values[3],
                b20: values[4], b21: values[5], x: x_val}
        return np.array([float(sympy.diff(loss, s).evalf(30, subs=subs))
                         for s in (w1, b1, w20, w21, b20, b21)])

    benign = DatasetSlice(np.array([[0.9]]), np.array([0], np.int64))
    trigger = DatasetSlice(np.array([[-1.3]]), np.array([1], np.int64))
    eps, clip = 1e-8, 1e4
    expected_ib = np.abs(grad_at(0.9, 0))
    expected_im = np.abs(grad_at(-1.3, 1))
    expected_omega = np.minimum(expected_ib / (expected_im + eps), clip)

    pair = compute_importance(params, arch, benign, trigger, eps, clip)
    np.testing.assert_allclose(pair.i_benign.values, expected_ib, atol=1e-10)
    np.testing.assert_allclose(pair.i_trigger.values, expected_im, atol=1e-10)
    np.testing.assert_allclose(pair.omega.values, expected_omega, atol=1e-10)


def test_omega_bounded_when_sets_coincide():
    arch, params, benign, _ = tiny_instance(1)
    pair = compute_importance(params, arch, benign, benign)
    assert isinstance(pair, ImportancePair)
    assert np.all(pair.omega.values <= 1.0)
    assert np.all(pair.omega.values >= 0.0)
    assert np.all(pair.i_benign.values >= 0.0)
    assert np.all(pair.i_trigger.values >= 0.0)


def test_omega_respects_clip():
    arch, params, benign, trigger = tiny_instance(2)
    pair = compute_importance(params, arch, benign, trigger, clip=0.5)
    assert np.all(pair.omega.values <= 0.5)


def test_compute_importance_rejects_empty_sets():
    arch, params, benign, _ = tiny_instance(3)
    empty = benign.subset(np.array([], dtype=int))
    with pytest.raises(ValueError):
        compute_importance(params, arch, empty, benign)


def test_penalty_vanishes_at_anchor():
    arch, g, benign, trigger = tiny_instance(4)
    omega = compute_importance(g, arch, benign, trigger).omega
    weighted = unlearn_loss_grad(g, arch, benign, trigger, g,
                                 omega, UnlearnPlan(variant=MP_PENALTY_WEIGHTED))
    plain = unlearn_loss_grad(g, arch, benign, trigger, g,
                              None, UnlearnPlan(variant=MEMORY_PRESERVE))
    assert weighted.loss == plain.loss


def test_gamma_zero_equals_memory_preserve_bitwise():
    arch, g, benign, trigger = tiny_instance(5)
    params = g.with_values(g.values + 0.01)
    omega = compute_importance(params, arch, benign, trigger).omega
    a = unlearn_loss_grad(params, arch, benign, trigger, g, omega,
                          UnlearnPlan(variant=MP_PENALTY_WEIGHTED, gamma=0.0))
    b = unlearn_loss_grad(params, arch, benign, trigger, g, None,
                          UnlearnPlan(variant=MEMORY_PRESERVE))
    assert a.loss == b.loss
    assert np.array_equal(a.grad.values, b.grad.values)


def test_unweighted_equals_weighted_with_unit_omega():
    arch, g, benign, trigger = tiny_instance(6)
    params = g.with_values(g.values + 0.02)
    ones = g.with_values(np.ones(len(g)))
    a = unlearn_loss_grad(params, arch, benign, trigger, g, ones,
                          UnlearnPlan(variant=MP_PENALTY_WEIGHTED))
    b = unlearn_loss_grad(params, arch, benign, trigger, g, None,
                          UnlearnPlan(variant=MP_PENALTY_UNWEIGHTED))
    assert a.loss == b.loss
    assert np.array_equal(a.grad.values, b.grad.values)


def test_naive_ga_is_negated_trigger_gradient():
    arch, g, benign, trigger = tiny_instance(7)
    naive = unlearn_loss_grad(g, arch, None, trigger, g, None,
                              UnlearnPlan(variant=NAIVE_GA))
    trig = forward_loss_grad(g, arch, trigger)
    assert naive.loss == -trig.loss
    assert np.array_equal(naive.grad.values, -trig.grad.values)


def test_variants_requiring_benign_batch_raise_without_one():
    arch, g, benign, trigger = tiny_instance(8)
    empty = benign.subset(np.array([], dtype=int))
    with pytest.raises(ValueError):
        unlearn_loss_grad(g, arch, None, trigger, g, None,
                          UnlearnPlan(variant=MEMORY_PRESERVE))
    with pytest.raises(ValueError):
        unlearn_loss_grad(g, arch, empty, trigger, g, None,
                          UnlearnPlan(variant=MP_PENALTY_WEIGHTED))
    with pytest.raises(ValueError):
        unlearn_loss_grad(g, arch, benign, trigger, g, None,
                          UnlearnPlan(variant=MP_PENALTY_WEIGHTED))


def test_weighted_loss_gradient_matches_finite_differences():
    """Full weighted-penalty gradient vs central differences, evaluated away
    from the L1 kinks (every coordinate deviates by at least 1e-3)."""
    rng = np.random.default_rng(9)
    for _ in range(10):
        arch, g, benign, trigger = tiny_instance(int(rng.integers(1 << 30)))
        offset = (rng.uniform(1e-3, 2e-3, len(g))) * rng.choice([-1.0, 1.0], len(g))
        params = g.with_values(g.values + offset)
        omega = g.with_values(rng.uniform(0.1, 5.0, len(g)))
        plan = UnlearnPlan(variant=MP_PENALTY_WEIGHTED, gamma=3.0)
        result = unlearn_loss_grad(params, arch, benign, trigger, g, omega, plan)

        def loss_fn(values):
            return unlearn_loss_grad(params.with_values(values), arch, benign,
                                     trigger, g, omega, plan).loss

        h = 1e-6
        fd = np.empty(len(g))
        for i in range(len(g)):
            up = params.values.copy(); up[i] += h
            down = params.values.copy(); down[i] -= h
            fd[i] = (loss_fn(up) - loss_fn(down)) / (2 * h)
        rel = np.max(np.abs(result.grad.values - fd) / (1.0 + np.abs(result.grad.values)))
        assert rel <= 1e-4


def test_run_unlearning_zero_epochs_is_identity():
    arch, g, benign, trigger = tiny_instance(10)
    out = run_unlearning(g, arch, benign, trigger, UnlearnPlan(epochs=0), 0)
    assert out is g


def test_run_unlearning_step_count_matches_loop_structure():
    arch, g, benign, trigger = tiny_instance(11)
    steps = []
    plan = UnlearnPlan(epochs=3, batch_size=3, early_stop=False)
    run_unlearning(g, arch, benign, trigger, plan, 0,
                   diagnostics=steps.append)
    expected = 3 * int(np.ceil(len(trigger) / 3))
    assert len(steps) == expected
    # the weighted variant logs omega percentiles every step
    assert all("omega_p50" in line for line in steps)


def test_single_call_forgetting_on_backdoored_model(ref_data, backdoored):
    """An aggressive plan erases the local backdoor in one call while keeping
    the benign shard accuracy nearly unchanged."""
    benign = ref_data.slices[0]
    entry_benign = accuracy(backdoored, ref_data.arch, benign)
    plan = UnlearnPlan(lr0=5e-4, omega_clip=20.0, batch_size=100)
    out = run_unlearning(backdoored, ref_data.arch, benign, ref_data.d_t,
                         plan, 11, num_classes=10)
    assert accuracy(out, ref_data.arch, ref_data.d_t) <= 0.2
    assert abs(accuracy(out, ref_data.arch, benign) - entry_benign) <= 0.05


def test_removal_update_algebra():
    g = ParamVector(np.array([1.0, 2.0]), ((2,),))
    local = ParamVector(np.array([3.0, 0.0]), ((2,),))
    scaled = removal_update(local, g, n_pc=100, n_sm=1000, scaled=True)
    np.testing.assert_allclose(scaled.values, 10.0 * (local.values - g.values), atol=1e-15)
    unscaled = removal_update(local, g, n_pc=100, n_sm=1000, scaled=False)
    np.testing.assert_allclose(unscaled.values, local.values - g.values, atol=1e-15)
    same = removal_update(local, g, n_pc=5, n_sm=5, scaled=True)
    assert np.array_equal(same.values, unscaled.values)
    zero = removal_update(g, g, n_pc=5, n_sm=10, scaled=True)
    assert np.all(zero.values == 0.0)
    with pytest.raises(ValueError):
        removal_update(local, g, 0, 1, scaled=True)
