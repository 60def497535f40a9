"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ops import record_patterns
from .tensor import Tensor

DEFAULT_EPS = 1e-3


def _relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return np.abs(g_ad - g_fd) / denom


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def numerical_gradient(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = DEFAULT_EPS, indices: Sequence[int] | None = None
) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the flat coordinates ``indices`` of ``x``.

    ``x.data`` is perturbed in place and restored, so ``f`` may reach ``x``
    indirectly (e.g. a parameter owned by a model) instead of through its
    argument.
    """
    idx = range(x.size) if indices is None else indices
    return np.array([_central(f, x, j, eps)[0] for j in idx], dtype=np.float64)


def _central(f, x: Tensor, j: int, eps: float, base_pattern=None) -> tuple[float, bool]:
    """(difference quotient, whether both probes stayed on the base pattern)."""
    flat = x.data.reshape(-1)
    orig = flat[j]
    try:
        with record_patterns() as plus_pat:
            flat[j] = orig + eps
            plus = float(f(x).data)
        with record_patterns() as minus_pat:
            flat[j] = orig - eps
            minus = float(f(x).data)
    finally:
        flat[j] = orig
    smooth = base_pattern is None or (_same_pattern(base_pattern, plus_pat) and _same_pattern(base_pattern, minus_pat))
    return (plus - minus) / (2 * eps), smooth


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        f(x).backward()
        g = x.grad if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad = was
        x.grad = None
    return np.asarray(g, dtype=np.float64)


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = DEFAULT_EPS, indices: Sequence[int] | None = None
) -> float:
    """Max over checked coordinates of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).

    Run it on float64 data; in float32 the rounding of ``f`` swamps a 1e-3
    step for anything but toy functions.
    """
    g_ad = analytic_gradient(f, x).reshape(-1)
    if indices is not None:
        g_ad = g_ad[list(indices)]
    g_fd = numerical_gradient(f, x, eps, indices)
    if g_ad.size == 0:
        return 0.0
    return float(_relative_error(g_ad, g_fd).max())


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    checked: list[tuple[str, int, float, float]] = field(default_factory=list)  # name, index, ad, fd
    skipped: int = 0


def check_coordinates(
    f: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    coords: Sequence[tuple[str, int]],
    eps: float = DEFAULT_EPS,
    want: int | None = None,
) -> GradCheckReport:
    """Kink-aware check of a zero-argument scalar ``f`` over ``(name, flat index)`` coordinates.

    One backward pass supplies every analytic gradient. A coordinate whose
    +eps or -eps probe changes any ReLU mask, max-pool winner or L1 sign is
    skipped (the difference quotient straddles a kink there). Stops after
    ``want`` coordinates have been checked.
    """
    flags = {k: t.requires_grad for k, t in tensors.items()}
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    try:
        with record_patterns() as base:
            out = f()
        out.backward()
        grads = {k: (t.grad.reshape(-1).astype(np.float64) if t.grad is not None else np.zeros(t.size)) for k, t in tensors.items()}
    finally:
        for k, t in tensors.items():
            t.grad = None
            t.requires_grad = flags[k]
    report = GradCheckReport()
    for name, j in coords:
        if want is not None and len(report.checked) >= want:
            break
        fd, smooth = _central(lambda _t: f(), tensors[name], j, eps, base)
        if not smooth:
            report.skipped += 1
            continue
        ad = float(grads[name][j])
        report.checked.append((name, j, ad, fd))
        report.max_rel_error = max(report.max_rel_error, float(_relative_error(np.array(ad), np.array(fd))))
    return report
