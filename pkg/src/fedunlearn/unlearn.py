"""Backdoor-removal training for the compromised participant.

Implements four loss variants: naive gradient ascent on the trigger loss,
memory preservation (benign CE minus trigger CE), the unweighted L1 anchor
penalty, and the final importance-weighted penalty. The importance weight of
a coordinate is the ratio of its mean absolute benign-CE gradient to its mean
absolute trigger-CE gradient, recomputed before every optimizer step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import DatasetSlice
from .nn import GradResult, MlpArchitecture, ParamVector, forward_loss_grad

NAIVE_GA = "naive_ga"
MEMORY_PRESERVE = "memory_preserve"
MP_PENALTY_UNWEIGHTED = "mp_penalty_unweighted"
MP_PENALTY_WEIGHTED = "mp_penalty_weighted"

UNLEARN_VARIANTS = (NAIVE_GA, MEMORY_PRESERVE, MP_PENALTY_UNWEIGHTED, MP_PENALTY_WEIGHTED)

_PENALTY_VARIANTS = (MP_PENALTY_UNWEIGHTED, MP_PENALTY_WEIGHTED)


@dataclass(frozen=True)
class UnlearnPlan:
    variant: str = MP_PENALTY_WEIGHTED
    gamma: float = 3.0
    epochs: int = 6
    lr0: float = 1e-5
    lr_decay_every: int = 2
    lr_decay_factor: float = 10.0
    batch_size: int = 25
    epsilon_importance: float = 1e-8
    omega_clip: float = 1e4
    early_stop: bool = True

    def __post_init__(self):
        if self.variant not in UNLEARN_VARIANTS:
            raise ValueError(f"unknown unlearning variant {self.variant!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.epsilon_importance <= 0 or self.omega_clip <= 0:
            raise ValueError("epsilon_importance and omega_clip must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 / self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass(frozen=True)
class ImportancePair:
    i_benign: ParamVector
    i_trigger: ParamVector
    omega: ParamVector


def compute_importance(
    params: ParamVector,
    arch: MlpArchitecture,
    d_benign: DatasetSlice,
    d_t: DatasetSlice,
    epsilon: float = 1e-8,
    clip: float = 1e4,
) -> ImportancePair:
    """Per-coordinate benign and trigger importance, and their clipped ratio."""
    if len(d_benign) == 0 or len(d_t) == 0:
        raise ValueError("importance needs non-empty benign and trigger sets")
    i_b = np.abs(forward_loss_grad(params, arch, d_benign).grad.values)
    i_m = np.abs(forward_loss_grad(params, arch, d_t).grad.values)
    omega = np.minimum(i_b / (i_m + epsilon), clip)
    return ImportancePair(
        params.with_values(i_b), params.with_values(i_m), params.with_values(omega)
    )


def unlearn_loss_grad(
    params: ParamVector,
    arch: MlpArchitecture,
    benign_batch: DatasetSlice | None,
    trigger_batch: DatasetSlice,
    global_params: ParamVector,
    omega: ParamVector | None,
    plan: UnlearnPlan,
) -> GradResult:
    """Loss and exact gradient of the selected unlearning variant.

    The L1 subgradient at zero is taken as 0, and omega is treated as a
    constant (no gradient flows through the importance computation).
    """
    trig = forward_loss_grad(params, arch, trigger_batch)
    if plan.variant == NAIVE_GA:
        return GradResult(-trig.loss, trig.grad.scale(-1.0))

    if benign_batch is None or len(benign_batch) == 0:
        raise ValueError(f"variant {plan.variant} requires a benign batch")
    ben = forward_loss_grad(params, arch, benign_batch)
    loss = ben.loss - trig.loss
    grad = ben.grad.sub(trig.grad)
    if plan.variant == MEMORY_PRESERVE:
        return GradResult(loss, grad)

    dev = params.values - global_params.values
    if plan.variant == MP_PENALTY_WEIGHTED:
        if omega is None:
            raise ValueError("weighted penalty requires omega")
        w = omega.values
    else:
        w = np.ones_like(dev)
    loss += plan.gamma * float(np.sum(np.abs(w * dev)))
    penalty_grad = plan.gamma * w * np.sign(dev)
    return GradResult(loss, grad.with_values(grad.values + penalty_grad))


def run_unlearning(
    global_params: ParamVector,
    arch: MlpArchitecture,
    d_benign: DatasetSlice,
    d_t: DatasetSlice,
    plan: UnlearnPlan,
    seed: int,
    *,
    num_classes: int | None = None,
    diagnostics: Callable[[str], None] | None = None,
) -> ParamVector:
    """One local unlearning pass: mini-batch SGD on the unlearn loss with a
    staircase LR schedule, importance recomputed before every step.

    Each step pairs one benign and one trigger mini-batch of the same nominal
    size. Early-stops once the local trigger accuracy is at or below random
    guess and the benign accuracy is within 0.02 of its value at entry.
    """
    from .nn import accuracy  # local import to keep module load light

    if plan.epochs == 0:
        return global_params
    rng = np.random.default_rng(seed)
    params = global_params
    n_classes = num_classes if num_classes is not None else arch.num_classes
    entry_benign_acc = accuracy(params, arch, d_benign) if plan.early_stop else 0.0

    steps_per_epoch = max(1, int(np.ceil(len(d_t) / plan.batch_size)))
    step = 0
    for epoch in range(plan.epochs):
        lr = plan.lr_at(epoch)
        trig_perm = rng.permutation(len(d_t))
        for s in range(steps_per_epoch):
            trig_idx = trig_perm[s * plan.batch_size : (s + 1) * plan.batch_size]
            if trig_idx.size == 0:
                continue
            trigger_batch = d_t.subset(trig_idx)
            benign_batch = None
            if plan.variant != NAIVE_GA:
                ben_idx = rng.choice(len(d_benign), size=min(plan.batch_size, len(d_benign)), replace=False)
                benign_batch = d_benign.subset(ben_idx)
            omega = None
            if plan.variant == MP_PENALTY_WEIGHTED:
                omega = compute_importance(
                    params, arch, d_benign, d_t, plan.epsilon_importance, plan.omega_clip
                ).omega
            result = unlearn_loss_grad(
                params, arch, benign_batch, trigger_batch, global_params, omega, plan
            )
            params = params.with_values(params.values - lr * result.grad.values)
            step += 1
            if diagnostics is not None:
                payload = {"step": step, "epoch": epoch, "lr": lr, "loss": result.loss}
                if omega is not None:
                    payload["omega_p50"] = float(np.median(omega.values))
                    payload["omega_p95"] = float(np.percentile(omega.values, 95))
                diagnostics(json.dumps(payload))
        if plan.early_stop:
            trig_acc = accuracy(params, arch, d_t)
            ben_acc = accuracy(params, arch, d_benign)
            if trig_acc <= 1.0 / n_classes and abs(ben_acc - entry_benign_acc) <= 0.02:
                break
    return params


def removal_update(
    local: ParamVector, global_params: ParamVector, n_pc: int, n_sm: int, scaled: bool
) -> ParamVector:
    """Transmitted update during removal: scaled reuses replacement mechanics,
    unscaled is the plain model difference."""
    if n_pc <= 0 or n_sm <= 0:
        raise ValueError("dataset sizes must be positive")
    diff = local.sub(global_params)
    return diff.scale(n_sm / n_pc) if scaled else diff
