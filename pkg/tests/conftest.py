import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stripdet.config import AnchorSpec, GridSpec, ModelConfig

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(**changes) -> ModelConfig:
    """Tiny two-class model on a 32x32 grid for fast end-to-end tests."""
    grid = GridSpec(x_range=(0.0, 5.12), y_range=(-2.56, 2.56), max_points_per_pillar=8, max_pillars=1024)
    base = ModelConfig(
        c0=8,
        stage_channels=(8, 8, 16),
        stage_depths=(1, 1, 1),
        k=3,
        head_channels=8,
        grid=grid,
        anchors=(
            AnchorSpec("Car", 1.6, 3.9, 1.56, -1.78),
            AnchorSpec("Pedestrian", 0.6, 0.8, 1.73, -0.6, match_iou=0.5, unmatch_iou=0.35),
        ),
    )
    return base.with_(**changes)


@pytest.fixture
def small_cfg():
    return small_config()


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
