"""Compromised-participant insertion behavior: poisoned local training,
model-replacement scaling, and two desk-scale attack analogs.

The two attack methods are minimal functional analogs of the published
distance-constrained and gradient-masked insertion attacks; both train on the
poisoned pool and differ only in how they keep the malicious model close to
the broadcast global model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetSlice, TAG_BENIGN, TriggerSpec
from .nn import MlpArchitecture, ParamVector, accuracy, forward_loss_grad

CONSTRAIN_AND_SCALE = "constrain_and_scale"
NEUROTOXIN_MASK = "neurotoxin_mask"

ATTACK_METHODS = (CONSTRAIN_AND_SCALE, NEUROTOXIN_MASK)

SCALE_FULL_REPLACEMENT = "full_replacement"
SCALE_NONE = "none"


@dataclass(frozen=True)
class AttackPlan:
    method: str
    trigger: TriggerSpec
    poison_epochs: int = 5
    poison_lr: float = 0.05
    batch_size: int = 20
    alpha: float = 0.7           # CE weight in the distance-constrained objective
    mask_ratio: float = 0.25     # fraction of coordinates the masked attack may touch
    # Stop poisoning at the first epoch boundary where local accuracy on the
    # trigger rows reaches this value; 0 trains the full epoch budget. Keeps
    # repeated landings from carving out ever larger trigger regions.
    poison_stop_acc: float = 0.0
    scale_mode: str = SCALE_FULL_REPLACEMENT

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.poison_epochs < 1:
            raise ValueError("poison_epochs must be >= 1")
        if not 0 <= self.poison_stop_acc <= 1:
            raise ValueError("poison_stop_acc must be in [0, 1]")
        if self.scale_mode not in (SCALE_FULL_REPLACEMENT, SCALE_NONE):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")


def craft_poisoned_slice(benign: DatasetSlice, d_t: DatasetSlice, seed: int) -> DatasetSlice:
    """Poisoning pool: local benign data plus the trigger set, shuffled."""
    if len(d_t) == 0:
        raise ValueError("empty trigger set")
    rng = np.random.default_rng(seed)
    return DatasetSlice.concat([benign, d_t]).shuffled(rng)


def neurotoxin_trainable_mask(
    global_params: ParamVector,
    arch: MlpArchitecture,
    benign: DatasetSlice,
    mask_ratio: float,
) -> np.ndarray:
    """Boolean mask of the coordinates the masked attack may update.

    Trainable coordinates are the round(mask_ratio * length) coordinates with
    the smallest benign-gradient magnitude at the global model; the rest stay
    frozen at their global values.
    """
    g = np.abs(forward_loss_grad(global_params, arch, benign).grad.values)
    k = int(round(mask_ratio * len(global_params)))
    order = np.argsort(g, kind="stable")
    mask = np.zeros(len(global_params), dtype=bool)
    mask[order[:k]] = True
    return mask


def train_malicious(
    global_params: ParamVector,
    arch: MlpArchitecture,
    poisoned: DatasetSlice,
    plan: AttackPlan,
    seed: int,
) -> ParamVector:
    """Train the malicious local model from the broadcast global model.

    constrain_and_scale: minimize alpha*CE + (1-alpha)*||theta - theta_G||^2.
    neurotoxin_mask: plain CE on the poisoned pool, with updates projected
    onto the low-benign-gradient coordinate set (mask from tag==benign rows).
    """
    rng = np.random.default_rng(seed)
    theta_g = global_params.values

    mask = None
    if plan.method == NEUROTOXIN_MASK:
        benign_rows = np.flatnonzero(poisoned.tags == TAG_BENIGN)
        if benign_rows.size == 0:
            raise ValueError("masked attack needs benign rows in the poisoned pool")
        mask = neurotoxin_trainable_mask(
            global_params, arch, poisoned.subset(benign_rows), plan.mask_ratio
        )

    params = global_params
    n = len(poisoned)
    trigger_rows = poisoned.subset(np.flatnonzero(poisoned.tags != TAG_BENIGN))
    for _ in range(plan.poison_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, plan.batch_size):
            batch = poisoned.subset(perm[start : start + plan.batch_size])
            grad = forward_loss_grad(params, arch, batch).grad.values
            if plan.method == CONSTRAIN_AND_SCALE:
                step = plan.alpha * grad + 2.0 * (1.0 - plan.alpha) * (params.values - theta_g)
            else:
                step = np.where(mask, grad, 0.0)
            params = params.with_values(params.values - plan.poison_lr * step)
        if plan.poison_stop_acc > 0 and accuracy(params, arch, trigger_rows) >= plan.poison_stop_acc:
            break
    return params


def replacement_update(
    local: ParamVector, global_params: ParamVector, n_pc: int, n_sm: int
) -> ParamVector:
    """Model-replacement scaling: the transmitted update (n_sm/n_pc)(L - G),
    whose FedAvg contribution is exactly L - G."""
    if n_pc <= 0 or n_sm <= 0:
        raise ValueError("dataset sizes must be positive")
    return local.sub(global_params).scale(n_sm / n_pc)
