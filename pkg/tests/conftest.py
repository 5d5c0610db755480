from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from xmodal.config import TrainConfig

# first-call timings include torch warm-up; wall-clock deadlines only add flakiness
settings.register_profile("xmodal", deadline=None)
settings.load_profile("xmodal")


def small_config(**sections) -> TrainConfig:
    """A few-second pipeline config: 4 classes, small splits, short schedules."""
    base = TrainConfig().with_overrides(
        dataset={"num_classes": 4, "dim": 16, "train_per_class": 40, "val_per_class": 20, "image_noise": 1.0},
        teacher_m={"epochs": 3, "batch_size": 20},
        teacher_x={"epochs": 3, "batch_size": 20},
        student={"epochs": 3, "batch_size": 20},
    )
    return base.with_overrides(**sections) if sections else base


@pytest.fixture
def small_cfg() -> TrainConfig:
    return small_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number: int, passed: bool, detail: str) -> str:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} | {detail}"
        lines[number] = line
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
