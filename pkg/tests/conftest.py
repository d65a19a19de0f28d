import numpy as np
import pytest

from pishgu import data
from pishgu.model import ModelConfig, ModelParams

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome for the terminal summary."""

    class Recorder:
        def __call__(self, label: str, passed: bool, detail: str = ""):
            ACCEPTANCE_RESULTS.append((label, bool(passed), detail))
            assert passed, f"{label}: {detail}"

    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(t_in=3, t_out=2, features_per_step=2, conv_channels=(4, 4, 4), cbam_reduction=2)


def random_frame(rng, n, t_in, t_out, scale=1.0, anchor=0):
    """Random absolute windows for ``n`` subjects, normalized into one frame."""
    windows = []
    for i in range(n):
        path = np.cumsum(rng.normal(0.0, scale, size=(t_in + t_out, 2)), axis=0) + rng.normal(0, 5 * scale, 2)
        windows.append(data.make_window(str(i), anchor, path[:t_in], path[t_in:]))
    return data.make_frame(windows)


def random_params(cfg, seed, scale=1.0):
    """Parameters with every tensor (biases and theta included) drawn at random."""
    params = ModelParams.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name, t in params:
        if t.ndim == 1:
            t.data = rng.normal(0.0, 0.3 * scale, size=t.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
