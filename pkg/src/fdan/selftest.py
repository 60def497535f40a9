"""Quick built-in oracle checks run by ``fdan selftest``."""

from __future__ import annotations

import numpy as np

from .gradcheck import check_coordinates
from .model import FdanConfig, build_fdan, fdan_forward
from .profiler import count_params
from .rng import Rng
from .tensor import Tensor
from .trainer import l1_loss

EXPECTED_PARAMS = {2: 126_660, 4: 142_248, 8: 204_600, 16: 454_008}


def param_count_check() -> tuple[bool, str]:
    got = {s: count_params(build_fdan(FdanConfig(scale=s))[0]) for s in EXPECTED_PARAMS}
    return got == EXPECTED_PARAMS, f"params {got}"


def shape_check() -> tuple[bool, str]:
    cases = [(4, 16, 16), (2, 32, 32)]
    ok = True
    shapes = []
    for s, h, w in cases:
        model, _ = build_fdan(FdanConfig(channels=16, blocks=3, groups=2, scale=s))
        y = fdan_forward(Tensor(np.zeros((1, 3, h, w), np.float32)), model)
        ok &= y.shape == (1, 3, s * h, s * w)
        shapes.append(y.shape)
    return ok, f"shapes {shapes}"


def gradient_check(seed: int = 0, coords: int = 30, eps: float = 1e-3) -> tuple[bool, str]:
    model, params = build_fdan(FdanConfig(channels=16, blocks=3, groups=2, scale=2, seed=seed))
    report = full_model_gradcheck(model, params, Rng(seed).child(99), coords, eps)
    ok = report.max_rel_error < 1e-3 and len(report.checked) >= coords
    return ok, f"max rel err {report.max_rel_error:.2e} over {len(report.checked)} coords ({report.skipped} skipped at kinks)"


def full_model_gradcheck(model, params, rng: Rng, coords: int = 30, eps: float = 1e-3, size: int = 16):
    """Kink-aware gradient check of L1(model(x), y) in float64 at a generic random point.

    Biases are redrawn from U(-0.05, 0.05) so no pre-activation sits exactly on
    a ReLU kink (zero biases feeding dead channels would).
    """
    params.astype(np.float64)
    for name, t in params:
        if name.endswith(".bias"):
            t.data = rng.uniform(t.shape, -0.05, 0.05)
    s = model.config.scale
    x = Tensor(rng.uniform((1, 3, size, size)))
    y = rng.uniform((1, 3, s * size, s * size))
    names = params.names()
    candidates = []
    for _ in range(coords * 20):
        n = names[int(rng.integers(0, len(names)))]
        candidates.append((n, int(rng.integers(0, params[n].size))))
    return check_coordinates(lambda: l1_loss(fdan_forward(x, model), y), dict(params), candidates, eps, want=coords)


CHECKS = {
    "param_count": param_count_check,
    "shapes": shape_check,
    "gradient": gradient_check,
}


def run_all(emit=print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        ok, detail = check()
        all_ok &= ok
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
