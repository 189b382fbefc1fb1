import numpy as np
import pytest

from pyramid_distill import (PyramidConfig, SynthSpec, TrainConfig, generate_synthetic,
                             load_teacher, pretrain_toy_teacher)
from pyramid_distill.datasets import default_texture_classes
from pyramid_distill.pipeline import fit_category

TOY_TRAIN = TrainConfig(learning_rate=0.4, epochs=20, batch_size=8, input_size=64, seed=0)


@pytest.fixture(scope="session")
def toy_archive():
    return pretrain_toy_teacher(default_texture_classes(64, seed=0), epochs=8, seed=0)


@pytest.fixture(scope="session")
def pyramid():
    return PyramidConfig((2, 3, 4))


@pytest.fixture(scope="session")
def synth_category():
    return generate_synthetic(SynthSpec(seed=1))


@pytest.fixture(scope="session")
def trained(toy_archive, pyramid, synth_category):
    """(teacher, student, checkpoint) after a short desk-scale run."""
    teacher = load_teacher(toy_archive, pyramid)
    student, ckpt = fit_category(synth_category, teacher, pyramid, TOY_TRAIN)
    return teacher, student, ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and (rep.when == "call" or outcome == "skipped"):
                lines.append((props["criterion"], outcome.upper()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for crit, outcome in sorted(set(lines)):
            word = {"PASSED": "PASS", "FAILED": "FAIL", "SKIPPED": "SKIP"}[outcome]
            terminalreporter.write_line(f"{word:<5} {crit}")
