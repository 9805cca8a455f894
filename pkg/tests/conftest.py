"""Shared fixtures: deterministic images and a small trained checkpoint.

Also hosts the acceptance reporting hooks: acceptance tests record a
one-line detail message, and the terminal summary prints one PASS/FAIL
line per criterion at the end of the run.
"""

import re

import numpy as np
import pytest

from sinddm.denoiser import DenoiserSpec
from sinddm.trainer import TrainConfig, train

ACCEPTANCE_DETAILS: dict[str, str] = {}
ACCEPTANCE_OUTCOMES: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::" in report.nodeid:
        ACCEPTANCE_OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(ACCEPTANCE_OUTCOMES):
        name = nodeid.split("::")[-1]
        m = re.search(r"criterion_(\d+)", name)
        label = f"criterion {int(m.group(1)):2d}/11" if m else name
        status = "PASS" if ACCEPTANCE_OUTCOMES[nodeid] == "passed" else "FAIL"
        detail = ACCEPTANCE_DETAILS.get(nodeid, name)
        terminalreporter.write_line(f"{label}  {status}  {detail}")


def make_test_image(h: int = 48, w: int = 48, seed: int = 7) -> np.ndarray:
    """Smooth color pattern plus mild noise, float64 in [-1, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.stack(
        [
            np.sin(xx / 5.0) * 0.6,
            np.cos(yy / 7.0) * 0.5,
            np.sin((xx + yy) / 9.0) * 0.4,
        ],
        axis=2,
    )
    img += 0.2 * rng.standard_normal((h, w, 3))
    return np.clip(img, -1.0, 1.0)


TINY_SPEC = DenoiserSpec(blocks=2, convs_per_block=2, hidden_width=8, embed_dim=16)


@pytest.fixture(scope="session")
def train_image():
    return make_test_image()


@pytest.fixture(scope="session")
def tiny_ckpt(train_image, tmp_path_factory):
    """A briefly trained small model shared by sampling-path tests."""
    run_dir = tmp_path_factory.mktemp("tiny-run")
    cfg = TrainConfig(steps=80, batch_size=4, seed=11, checkpoint_every=50)
    return train(train_image, TINY_SPEC, cfg, run_dir=str(run_dir))
