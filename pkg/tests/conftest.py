import time

import numpy as np
import pytest

from edfa_gainlab.model import FeatureMode, Normalizer, build_model
from edfa_gainlab.simulator import (
    DatasetSpec,
    build_dataset,
    gen_random_loading,
    make_profile,
    simulate_measurement,
)


def small_model(seed=0, n_in=8, hidden=(6, 6, 4, 4), n_out=3, scale_stats=True):
    """The shrunken network used for gradient checks."""
    rng = np.random.default_rng(seed)
    norm = Normalizer(rng.normal(size=n_in), rng.uniform(0.5, 2.0, size=n_in),
                      rng.normal(size=n_out), rng.uniform(0.5, 2.0, size=n_out))
    if not scale_stats:
        norm = Normalizer(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))
    model = build_model(FeatureMode.WITH_INTERNAL, norm, rng, hidden_sizes=hidden,
                        n_outputs=n_out, n_inputs=n_in)
    for b in model.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    return model


@pytest.fixture
def booster():
    return make_profile(1, "booster")


@pytest.fixture
def preamp():
    return make_profile(2, "preamp")


@pytest.fixture
def measurement(booster):
    rng = np.random.default_rng(42)
    return simulate_measurement(booster, gen_random_loading(rng, -4.0), 20.0, rng, "m0")


@pytest.fixture(scope="session")
def small_dataset():
    profile = make_profile(3, "booster")
    spec = DatasetSpec(gain_settings_db=[20.0], random_count=200, goalpost_count=30,
                       unlabeled_count=64, seed=1)
    return profile, build_dataset(profile, spec)


@pytest.fixture(scope="session")
def full_budget_fleet():
    """Default 4-device fleet with base models trained at full budgets.

    Shared by the slow pipeline and acceptance tests; built once per session.
    """
    from edfa_gainlab.cli import FULL_BUDGETS, ExperimentConfig, fleet_profiles
    from edfa_gainlab.evaluation import FleetMember
    from edfa_gainlab.model import feature_matrix
    from edfa_gainlab.pipeline import pretrain_dae, train_base

    cfg = ExperimentConfig()
    cfg.pretrain.epochs = FULL_BUDGETS["pretrain"]
    cfg.train.epochs = FULL_BUDGETS["train"]
    cfg.transfer.epochs = FULL_BUDGETS["transfer"]
    fleet, timing = [], {}
    for profile in fleet_profiles(cfg):
        ds = build_dataset(profile, cfg.dataset)
        start = time.perf_counter()
        pre = pretrain_dae(feature_matrix(ds.unlabeled, cfg.mode), cfg.pretrain)
        model, _ = train_base(ds, pre, cfg.train, cfg.mode)
        timing[profile.device_id] = time.perf_counter() - start
        fleet.append(FleetMember(profile, ds, model))
    return cfg, fleet, timing


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
