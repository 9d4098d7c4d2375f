from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from biphasic.config import RunConfig, parse_config
from biphasic import trainer

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_CONFIG = """\
data.n_identities = 12
data.per_identity = 4
data.test_identities = 4
data.external_identities = 6
data.external_per_identity = 4
pretrain.phi_steps = 20
pretrain.aux_steps = 10
pretrain.clas_steps = 10
train.steps_initial = 4
train.steps_enhancing = 4
train.batch_size = 8
eval.every = 2
eval.samples = 16
"""


def tiny_config(**overrides) -> RunConfig:
    cfg = parse_config(TINY_CONFIG, "tiny")
    for key, value in overrides.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_splits():
    return trainer.make_splits(tiny_config())


@pytest.fixture(scope="session")
def tiny_estimators(tiny_splits):
    return trainer.pretrain_estimators(tiny_splits.external, tiny_config())


# -- acceptance summary ---------------------------------------------------------------------

# criterion number -> (passed, detail); filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_TITLES = {
    1: "gradient oracle suite",
    2: "loss value oracles",
    3: "metric oracles",
    4: "phase-semantics invariants",
    5: "determinism of two smoke runs",
    6: "end-to-end trend check",
    7: "ablation smoke runs",
    8: "serialization round-trips",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in ACCEPTANCE:
            passed, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"acceptance {n} {'PASS' if passed else 'FAIL'}: {title}; {detail}")
        else:
            terminalreporter.write_line(f"acceptance {n} NOT RUN: {title}")
