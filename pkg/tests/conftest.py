import dataclasses

import numpy as np
import pytest

from featforge.config import ExperimentConfig
from featforge.models import GeneratorSpec, HeadSpec, build_generator, build_teacher

# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_head_spec():
    return HeadSpec(in_channels=3, spatial=(3, 3), hidden=(4, 5), kernel=3, num_classes=3)


@pytest.fixture
def tiny_teacher(tiny_head_spec, rng):
    t = build_teacher(tiny_head_spec, rng)
    t.calibrate_norm(rng.standard_normal((16, 3, 3, 3)))
    return t


@pytest.fixture
def tiny_generator(rng):
    spec = GeneratorSpec(z_dim=4, trunk_channels=2, num_layers=2, kernel=3, out_channels=3,
                         spatial=(3, 3), num_classes=3)
    return build_generator(spec, rng)


def small_config(**finetune) -> ExperimentConfig:
    """A few-second end-to-end configuration for pipeline and CLI tests."""
    cfg = ExperimentConfig()
    r = dataclasses.replace
    return cfg.replace(
        task=r(cfg.task, num_base=3, num_novel=2, channels=6, spatial=(3, 3), separation=1.5, shots=5),
        head=r(cfg.head, hidden=(12, 12)),
        generator=r(cfg.generator, z_dim=8, trunk_channels=4, num_layers=2),
        base=r(cfg.base, epochs=10, train_per_class=80, test_per_class=60, accuracy_bar=0.9),
        gen_train=r(cfg.gen_train, iterations=40, features_per_class=12),
        finetune=r(cfg.finetune, iterations=25, **finetune),
    ).validate()


@pytest.fixture
def small_cfg():
    return small_config()
