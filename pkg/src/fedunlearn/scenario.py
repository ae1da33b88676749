"""The global training loop: phase scheduling (warmup, insert, gap, remove,
post), per-round orchestration of benign and adversarial participants, and
deterministic resume from phase-boundary checkpoints.

Every random stream is derived statelessly from (master seed, purpose, round,
participant), so resuming from a mid-run state reproduces the original run
bitwise, and baseline forks share the prefix stream by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attack as atk
from . import fl
from . import unlearn as ul
from .config import ScenarioConfig
from .data import DatasetSlice, build_trigger_set, generate_task, partition_iid
from .nn import MlpArchitecture, ParamVector, accuracy, init_params

_STREAM_TASK = 0
_STREAM_PARTITION = 1
_STREAM_SELECT = 2
_STREAM_LOCAL = 3
_STREAM_ATTACK = 4
_STREAM_UNLEARN = 5
_STREAM_NOISE = 6
_STREAM_TRIGGER = 7
_STREAM_INIT = 8


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class ScenarioData:
    """Everything derived from (config, seed) before the first round."""

    arch: MlpArchitecture
    test: DatasetSlice
    d_t: DatasetSlice
    slices: tuple[DatasetSlice, ...]
    sizes: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes


def prepare(config: ScenarioConfig, seed: int) -> ScenarioData:
    task = config.task
    arch = MlpArchitecture(
        input_dim=task.input_dim,
        hidden_dims=config.hidden_dims,
        num_classes=task.num_classes,
        activation=config.activation,
    )
    train, test, gen = generate_task(
        task.num_classes,
        task.input_dim,
        task.train_size,
        task.test_size,
        derive_seed(task.task_seed, _STREAM_TASK),
        subclusters=task.subclusters,
        class_scale=task.class_scale,
        sub_offset=task.sub_offset,
        within_sigma=task.within_sigma,
    )
    d_t, clean = build_trigger_set(
        train, config.trigger, gen, derive_seed(config.task.task_seed, _STREAM_TRIGGER)
    )
    part = partition_iid(clean, config.n, derive_seed(seed, _STREAM_PARTITION))
    return ScenarioData(arch=arch, test=test, d_t=d_t, slices=part.per_participant, sizes=part.sizes)


@dataclass(frozen=True)
class ScenarioState:
    round: int
    phase: str
    params: ParamVector
    insert_start: int = -1
    remove_start: int = -1
    gap_end: int = -1
    post_start: int = -1
    done: bool = False
    flag: str = ""

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in
             ("round", "phase", "insert_start", "remove_start", "gap_end", "post_start", "done", "flag")}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str, params: ParamVector) -> "ScenarioState":
        return cls(params=params, **json.loads(text))


@dataclass
class SimResult:
    records: list[fl.RoundRecord]
    state: ScenarioState
    checkpoints: dict[str, ScenarioState] = field(default_factory=dict)


def _selection_policy(config: ScenarioConfig, phase: str, seed: int) -> fl.SelectionPolicy:
    if phase == "insert":
        return config.selection_insert.to_policy(config.m, seed)
    if phase == "remove":
        return config.selection_remove.to_policy(config.m, seed)
    return fl.SelectionPolicy(kind=fl.SELECTION_RANDOM, m=config.m, seed=seed)


def initial_state(config: ScenarioConfig, seed: int, data: ScenarioData) -> ScenarioState:
    params = init_params(data.arch, derive_seed(seed, _STREAM_INIT))
    return ScenarioState(round=0, phase="warmup", params=params)


def simulate(
    config: ScenarioConfig,
    seed: int,
    data: ScenarioData | None = None,
    state: ScenarioState | None = None,
    *,
    removal_enabled: bool = True,
    stop_after_round: int | None = None,
    max_rounds: int | None = None,
) -> SimResult:
    """Run the scenario from ``state`` (or from scratch) until its phases end.

    ``removal_enabled=False`` keeps the adversary idle from the gap onward,
    producing the no-unlearning baseline branch. ``stop_after_round`` bounds
    the run at an absolute round index (inclusive), used to align forked
    branches on a common horizon.
    """
    if data is None:
        data = prepare(config, seed)
    if state is None:
        state = initial_state(config, seed, data)
    ph = config.phases
    comp = config.compromised_id
    select_seed = derive_seed(seed, _STREAM_SELECT)
    target_label = config.trigger.target_label
    random_guess = 1.0 / data.num_classes

    records: list[fl.RoundRecord] = []
    checkpoints: dict[str, ScenarioState] = {}
    rounds_done = 0

    while not state.done:
        if stop_after_round is not None and state.round > stop_after_round:
            break
        if max_rounds is not None and rounds_done >= max_rounds:
            break
        r = state.round
        phase = state.phase
        policy = _selection_policy(config, phase, select_seed)
        selected = fl.select_participants(policy, r, config.n, comp)
        n_sm = sum(data.sizes[pid] for pid in selected)

        updates: list[tuple[int, ParamVector, int]] = []
        l2: dict[int, float] = {}
        adversary_attacks = phase == "insert" and config.adversary_enabled
        adversary_removes = phase == "remove" and config.adversary_enabled and removal_enabled

        for pid in selected:
            if pid == comp and adversary_attacks:
                pool = atk.craft_poisoned_slice(
                    data.slices[pid], data.d_t, derive_seed(seed, _STREAM_ATTACK, r, 0)
                )
                local = atk.train_malicious(
                    state.params, data.arch, pool, config.attack,
                    derive_seed(seed, _STREAM_ATTACK, r, 1),
                )
                if config.attack.scale_mode == atk.SCALE_FULL_REPLACEMENT:
                    update = atk.replacement_update(local, state.params, data.sizes[pid], n_sm)
                else:
                    update = local.sub(state.params)
            elif pid == comp and adversary_removes:
                local = ul.run_unlearning(
                    state.params, data.arch, data.slices[pid], data.d_t,
                    config.unlearn, derive_seed(seed, _STREAM_UNLEARN, r),
                    num_classes=data.num_classes,
                )
                update = ul.removal_update(
                    local, state.params, data.sizes[pid], n_sm, config.removal_scaled
                )
            elif pid == comp and phase in ("gap", "post", "remove"):
                # idle: the compromised participant stops contributing
                continue
            else:
                local = fl.local_train(
                    state.params, data.arch, data.slices[pid],
                    config.local.epochs, config.local.lr, config.local.batch_size,
                    derive_seed(seed, _STREAM_LOCAL, r, pid),
                )
                update = local.sub(state.params)
            l2[pid] = local.sub(state.params).l2_norm()
            updates.append((pid, update, data.sizes[pid]))

        noise_rng = np.random.default_rng(
            [derive_seed(seed, _STREAM_NOISE, r), config.defense.seed]
        )
        new_params = fl.fedavg_aggregate(state.params, updates, config.defense, noise_rng)
        acc_m = accuracy(new_params, data.arch, data.test)
        acc_b = accuracy(new_params, data.arch, data.d_t)  # d_t labels are the target

        # phase transitions, evaluated on the freshly aggregated global model
        next_phase = phase
        flag = ""
        if phase == "warmup" and r + 1 >= ph.warmup_rounds:
            next_phase = "insert" if config.adversary_enabled else "done"
        elif phase == "insert":
            if acc_b >= ph.insert_target:
                next_phase = "gap"
            elif r + 1 - state.insert_start >= ph.insert_cap:
                next_phase = "gap"
                flag = "insert_cap"
        elif phase == "gap" and r + 1 >= state.gap_end:
            next_phase = "remove"
        elif phase == "remove":
            if ph.remove_fixed_rounds > 0:
                if r + 1 - state.remove_start >= ph.remove_fixed_rounds:
                    next_phase = "post"
            elif removal_enabled and acc_b <= random_guess:
                next_phase = "post"
            elif r + 1 - state.remove_start >= ph.remove_cap:
                next_phase = "post"
                flag = "remove_cap"
        elif phase == "post" and r + 1 - state.post_start >= ph.post_rounds:
            next_phase = "done"

        records.append(
            fl.RoundRecord(
                round=r,
                phase=phase,
                selected=tuple(selected),
                global_params_norm=new_params.l2_norm(),
                update_l2_per_participant=l2,
                acc_main=acc_m,
                acc_backdoor=acc_b,
                flag=flag,
            )
        )

        new_state = replace(state, round=r + 1, params=new_params, flag=flag)
        if next_phase != phase:
            if next_phase == "done":
                new_state = replace(new_state, done=True, phase=phase)
                checkpoints["end"] = new_state
            else:
                bookkeeping = {"phase": next_phase}
                if next_phase == "insert":
                    bookkeeping["insert_start"] = r + 1
                elif next_phase == "gap":
                    bookkeeping["gap_end"] = r + 1 + ph.gap_rounds
                elif next_phase == "remove":
                    bookkeeping["remove_start"] = r + 1
                elif next_phase == "post":
                    bookkeeping["post_start"] = r + 1
                new_state = replace(new_state, **bookkeeping)
                checkpoints[f"{phase}_end"] = new_state
        state = new_state
        rounds_done += 1

    return SimResult(records=records, state=state, checkpoints=checkpoints)


@dataclass
class ForkedResult:
    """Removal branch plus the no-unlearning baseline sharing its prefix."""

    prefix: SimResult
    removal: SimResult
    baseline: SimResult

    @property
    def records_unlearn(self) -> list[fl.RoundRecord]:
        return self.prefix.records + self.removal.records

    @property
    def records_normal(self) -> list[fl.RoundRecord]:
        return self.prefix.records + self.baseline.records


def run_forked(config: ScenarioConfig, seed: int, data: ScenarioData | None = None) -> ForkedResult:
    """Run the scenario through the gap, then fork: one branch performs
    removal, the other keeps the adversary idle, on a shared round horizon."""
    if data is None:
        data = prepare(config, seed)
    prefix = simulate(config, seed, data, stop_after_round=None, max_rounds=None,
                      removal_enabled=True)
    ckpt = prefix.checkpoints.get("gap_end")
    if ckpt is None:
        raise RuntimeError("scenario never reached the removal phase")
    # split the prefix records at the fork point
    fork_round = ckpt.round
    pre_records = [rec for rec in prefix.records if rec.round < fork_round]
    removal_records = [rec for rec in prefix.records if rec.round >= fork_round]
    horizon = prefix.state.round - 1
    baseline = simulate(
        config, seed, data, state=ckpt, removal_enabled=False, stop_after_round=horizon
    )
    removal = SimResult(records=removal_records, state=prefix.state, checkpoints=prefix.checkpoints)
    return ForkedResult(
        prefix=SimResult(records=pre_records, state=ckpt, checkpoints={}),
        removal=removal,
        baseline=baseline,
    )


def rounds_to_random_guess(result: SimResult | list[fl.RoundRecord], num_classes: int) -> int | None:
    """Rounds spent in the remove phase before the global backdoor accuracy
    first reached random guess; None if it never did."""
    records = result.records if isinstance(result, SimResult) else result
    remove_records = [rec for rec in records if rec.phase == "remove"]
    for i, rec in enumerate(remove_records):
        if rec.acc_backdoor <= 1.0 / num_classes:
            return i + 1
    return None


def save_checkpoint(path: str | Path, state: ScenarioState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = state.to_json().encode()
    blob = len(meta).to_bytes(4, "little") + meta + state.params.to_bytes()
    path.write_bytes(blob)


def load_checkpoint(path: str | Path) -> ScenarioState:
    raw = Path(path).read_bytes()
    meta_len = int.from_bytes(raw[:4], "little")
    meta = raw[4 : 4 + meta_len].decode()
    params = ParamVector.from_bytes(raw[4 + meta_len :])
    return ScenarioState.from_json(meta, params)
