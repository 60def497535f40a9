import numpy as np
import pytest

from fdan.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(42)


def naive_conv2d(x, w, b, stride=1, pad=0):
    """Direct quadruple-loop cross-correlation, float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += np.asarray(b, np.float64)[None, :, None, None]
    return out


def smoke_pairs(n=4, size=64, scale=2):
    from fdan.data import synthetic_pair

    return [synthetic_pair(size, scale, Rng(7).child(i), f"synthetic{i}") for i in range(n)]


def smoke_configs(iterations=500, **train_overrides):
    """Reduced model and schedule used by the overfit smoke test."""
    from fdan.model import FdanConfig
    from fdan.trainer import TrainConfig

    model = FdanConfig(channels=16, blocks=3, groups=2, scale=2, seed=3)
    train = TrainConfig(
        batch_size=4,
        patch_size=64,
        seed=1,
        lr_max=2e-3,
        lr_min=1e-6,
        iterations=iterations,
        period_iters=iterations,
        restart=False,
        **train_overrides,
    )
    return train, model


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
