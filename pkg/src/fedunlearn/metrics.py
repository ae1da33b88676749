"""Evaluation helpers: backdoor/main-task accuracy, update-norm deviation,
multi-seed ensembles, monotone-trend checks, and the round-record CSV/JSONL
writers used by the harness."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetSlice
from .fl import RoundRecord
from .nn import MlpArchitecture, ParamVector, predict

CSV_COLUMNS = (
    "round",
    "phase",
    "acc_main",
    "acc_backdoor_unlearn",
    "acc_backdoor_normal",
    "l2_compromised",
    "l2_benign_min",
    "l2_benign_max",
)


@dataclass(frozen=True)
class MetricSeries:
    name: str
    rounds: tuple[int, ...]
    values: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.rounds) != len(self.values):
            raise ValueError("rounds and values must have the same length")
        if any(b <= a for a, b in zip(self.rounds, self.rounds[1:])):
            raise ValueError("rounds must be strictly increasing")


@dataclass(frozen=True)
class SeedEnsemble:
    name: str
    rounds: tuple[int, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    seeds: tuple[int, ...]


def acc_backdoor(params: ParamVector, arch: MlpArchitecture, d_t: DatasetSlice, target: int) -> float:
    """Fraction of trigger inputs classified as the adversary's target."""
    if len(d_t) == 0:
        raise ValueError("empty trigger set")
    return float(np.mean(predict(params, arch, d_t.features) == target))


def update_l2(local: ParamVector, global_params: ParamVector) -> float:
    return local.sub(global_params).l2_norm()


def series_from_records(records: list[RoundRecord], field: str, name: str, seed: int = 0) -> MetricSeries:
    return MetricSeries(
        name=name,
        rounds=tuple(rec.round for rec in records),
        values=tuple(getattr(rec, field) for rec in records),
        seed=seed,
    )


def ensemble_stats(runs: list[MetricSeries]) -> SeedEnsemble:
    if not runs:
        raise ValueError("empty ensemble")
    grid = runs[0].rounds
    if any(s.rounds != grid for s in runs[1:]):
        raise ValueError("all series must share the same round grid")
    matrix = np.array([s.values for s in runs])
    return SeedEnsemble(
        name=runs[0].name,
        rounds=grid,
        mean=tuple(matrix.mean(axis=0)),
        std=tuple(matrix.std(axis=0)),
        seeds=tuple(s.seed for s in runs),
    )


def trend_test(xs, ys, direction: str, delta: float = 0.01) -> bool:
    """Weak monotonicity of ys over xs with an absolute tolerance band."""
    if len(xs) != len(ys):
        raise ValueError("xs and ys must have the same length")
    if direction not in ("increasing", "decreasing"):
        raise ValueError("direction must be 'increasing' or 'decreasing'")
    order = np.argsort(xs)
    ys = np.asarray(ys, dtype=float)[order]
    diffs = np.diff(ys)
    if direction == "increasing":
        return bool(np.all(diffs >= -delta))
    return bool(np.all(diffs <= delta))


def write_rounds_csv(
    path: str | Path,
    records: list[RoundRecord],
    compromised_id: int,
    normal_records: list[RoundRecord] | None = None,
) -> None:
    """One row per round; the no-unlearning baseline column is filled from the
    forked branch where available, blank otherwise."""
    normal_by_round = {rec.round: rec for rec in normal_records or []}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            band = rec.l2_benign_band(compromised_id)
            comp = rec.l2_compromised(compromised_id)
            normal = normal_by_round.get(rec.round)
            writer.writerow(
                [
                    rec.round,
                    rec.phase,
                    repr(rec.acc_main),
                    repr(rec.acc_backdoor),
                    repr(normal.acc_backdoor) if normal is not None else "",
                    repr(comp) if comp is not None else "",
                    repr(band[0]) if band else "",
                    repr(band[1]) if band else "",
                ]
            )


def write_rounds_jsonl(path: str | Path, records: list[RoundRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "round": rec.round,
                        "phase": rec.phase,
                        "selected": list(rec.selected),
                        "global_params_norm": rec.global_params_norm,
                        "update_l2": {str(k): v for k, v in rec.update_l2_per_participant.items()},
                        "acc_main": rec.acc_main,
                        "acc_backdoor": rec.acc_backdoor,
                        "flag": rec.flag,
                    }
                )
                + "\n"
            )


def stealth_overlap_fraction(records: list[RoundRecord], compromised_id: int) -> float | None:
    """Fraction of remove-phase rounds where the compromised model deviation
    lies inside the benign [min, max] band."""
    rounds = [
        rec
        for rec in records
        if rec.phase == "remove" and rec.l2_compromised(compromised_id) is not None
    ]
    if not rounds:
        return None
    hits = 0
    for rec in rounds:
        band = rec.l2_benign_band(compromised_id)
        comp = rec.l2_compromised(compromised_id)
        if band is not None and band[0] <= comp <= band[1]:
            hits += 1
    return hits / len(rounds)
