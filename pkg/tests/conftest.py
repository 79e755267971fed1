import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dpcl.config import ExperimentConfig, override

settings.register_profile("dpcl", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dpcl")


def tiny_config(**sections) -> ExperimentConfig:
    """8x8 images, D=8, 1-way 1-shot, fp64; small enough for finite differences."""
    base = override(
        ExperimentConfig(),
        data={"resolution": 32, "images_per_class": 6},
        encoder={"stem_width": 4, "stem_stride": 1, "widths": [4, 6, 8], "strides": [2, 1, 2], "taps": [2, 4],
                 "proj_dim": 4},
        dictionary={"capacity": 16},
        csnce={"num_negatives": 8},
        canece={"num_negatives": 10, "group_size": 5},
        trainer={"dtype": "float64", "max_iterations": 20, "checkpoint_every": 5},
        eval={"episodes": 8},
    )
    return override(base, **sections) if sections else base


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
