"""Federated round primitives: participant selection, local benign training,
and FedAvg aggregation with an optional Gaussian-noise defense."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSlice
from .nn import MlpArchitecture, ParamVector, forward_loss_grad

SELECTION_CONTINUOUS = "continuous"
SELECTION_FIXED_FREQUENCY = "fixed_frequency"
SELECTION_RANDOM = "random"

SELECTION_KINDS = (SELECTION_CONTINUOUS, SELECTION_FIXED_FREQUENCY, SELECTION_RANDOM)

PHASES = ("warmup", "insert", "gap", "remove", "post")


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str
    m: int
    f: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SELECTION_KINDS:
            raise ValueError(f"unknown selection kind {self.kind!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.f < 1:
            raise ValueError("f must be >= 1")


@dataclass(frozen=True)
class DefenseConfig:
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValueError("noise_sigma must be finite and >= 0")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    phase: str
    selected: tuple[int, ...]
    global_params_norm: float
    update_l2_per_participant: dict[int, float]
    acc_main: float
    acc_backdoor: float
    flag: str = ""

    def l2_compromised(self, compromised_id: int) -> float | None:
        return self.update_l2_per_participant.get(compromised_id)

    def l2_benign_band(self, compromised_id: int) -> tuple[float, float] | None:
        benign = [v for k, v in self.update_l2_per_participant.items() if k != compromised_id]
        if not benign:
            return None
        return min(benign), max(benign)


def select_participants(
    policy: SelectionPolicy, round_index: int, n: int, compromised_id: int
) -> list[int]:
    """Deterministic per (policy.seed, round) selection of m participant ids."""
    if policy.m > n:
        raise ValueError("m cannot exceed the population size")
    rng = np.random.default_rng([policy.seed, round_index])
    benign = np.array([i for i in range(n) if i != compromised_id])
    if policy.kind == SELECTION_RANDOM:
        chosen = rng.choice(n, size=policy.m, replace=False)
    elif policy.kind == SELECTION_CONTINUOUS or round_index % policy.f == 0:
        chosen = np.concatenate(
            [[compromised_id], rng.choice(benign, size=policy.m - 1, replace=False)]
        )
    else:
        chosen = rng.choice(benign, size=policy.m, replace=False)
    return sorted(int(i) for i in chosen)


def local_train(
    global_params: ParamVector,
    arch: MlpArchitecture,
    data: DatasetSlice,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> ParamVector:
    """Benign local training: shuffled mini-batch SGD from the global model."""
    if len(data) == 0:
        raise ValueError("empty local slice")
    if epochs == 0 or lr == 0:
        return global_params
    rng = np.random.default_rng(seed)
    params = global_params
    n = len(data)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = data.subset(perm[start : start + batch_size])
            grad = forward_loss_grad(params, arch, batch).grad
            params = params.with_values(params.values - lr * grad.values)
    return params


def fedavg_aggregate(
    global_params: ParamVector,
    updates: list[tuple[int, ParamVector, int]],
    defense: DefenseConfig,
    rng: np.random.Generator | None = None,
) -> ParamVector:
    """Weighted-average aggregation: G' = G + sum (n_pi/n_Sm) * update_i.

    Noise, when enabled, perturbs each update elementwise before averaging.
    Summation runs in ascending participant-id order for bit reproducibility.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    if any(n_pi <= 0 for _, _, n_pi in updates):
        raise ValueError("participant dataset sizes must be positive")
    if rng is None:
        rng = np.random.default_rng(defense.seed)
    n_sm = sum(n_pi for _, _, n_pi in updates)
    acc = np.zeros(len(global_params))
    for pid, update, n_pi in sorted(updates, key=lambda u: u[0]):
        if update.shapes != global_params.shapes:
            raise ValueError(f"update shape mismatch for participant {pid}")
        values = update.values
        if defense.noise_sigma > 0:
            values = values + rng.normal(0.0, defense.noise_sigma, size=values.shape)
        acc += (n_pi / n_sm) * values
    return global_params.with_values(global_params.values + acc)
