"""Shared fixtures: the reference scenario, a warmed-up global model, and a
freshly backdoored local model, all deterministic."""
from __future__ import annotations

import pytest

from fedunlearn import attack as atk
from fedunlearn import scenario as sc
from fedunlearn.config import ScenarioConfig
from fedunlearn.data import TriggerSpec

REF_TRIGGER = TriggerSpec(
    kind="semantic_subpopulation", source_class=5, target_label=9, subcluster=1
)


@pytest.fixture(scope="session")
def ref_config() -> ScenarioConfig:
    return ScenarioConfig(trigger=REF_TRIGGER)


@pytest.fixture(scope="session")
def ref_data(ref_config):
    return sc.prepare(ref_config, 0)


@pytest.fixture(scope="session")
def warm_global(ref_config, ref_data):
    """Global model after the 30 benign warmup rounds of the reference run."""
    return sc.simulate(ref_config, 0, ref_data, max_rounds=30).state.params


@pytest.fixture(scope="session")
def poisoned_pool(ref_data):
    return atk.craft_poisoned_slice(ref_data.slices[0], ref_data.d_t, 123)


@pytest.fixture(scope="session")
def backdoored(ref_config, ref_data, warm_global, poisoned_pool):
    """Malicious local model trained from the warmed global model."""
    return atk.train_malicious(
        warm_global,
        ref_data.arch,
        poisoned_pool,
        atk.AttackPlan("constrain_and_scale", REF_TRIGGER),
        7,
    )
