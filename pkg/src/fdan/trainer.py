"""L1 training loop: Adam with cosine annealing, CSV loss log, resumable checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_container, save_checkpoint, write_container
from .data import Manifest, SamplePair, crop_aligned_pair, draw_augmentation, transform_planes
from .errors import ConfigError, FormatError, GraphError, NumericError, ShapeError, TrainingError
from .model import FDAN, FdanConfig, ParamStore, build_fdan
from .ops import note_pattern
from .rng import Rng
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


# -- loss ----------------------------------------------------------------------------


def l1_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean absolute difference; subgradient sign(pred - target) / N."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t.astype(pred.data.dtype, copy=False)
    note_pattern(np.sign(diff))
    n = diff.size
    value = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.data.dtype)
    inv_n = np.asarray(1.0 / n, dtype=pred.data.dtype)
    return Tensor.from_op(value, (pred,), lambda g: (np.sign(diff) * (g * inv_n),), "l1_loss")


# -- schedule ------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = 5e-5
    lr_min: float = 1e-11
    period_iters: int = 9376
    restart: bool = True

    def __post_init__(self):
        if self.period_iters < 1:
            raise ConfigError(f"period_iters must be positive, got {self.period_iters}")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")


def cosine_lr(iteration: int, sched: LrSchedule) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be non-negative, got {iteration}")
    if sched.restart:
        u = (iteration % sched.period_iters) / sched.period_iters
    else:
        u = min(iteration / sched.period_iters, 1.0)
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * u))


# -- optimizer -----------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ParamStore, **kw) -> "OptimState":
        m = {name: np.zeros_like(p.data) for name, p in params}
        v = {name: np.zeros_like(p.data) for name, p in params}
        return cls(m, v, **kw)


def adam_step(params: ParamStore, state: OptimState, lr: float) -> None:
    """One bias-corrected Adam update from ``param.grad``, in place."""
    missing = [name for name, p in params if p.grad is None]
    if missing:
        raise GraphError(f"no gradient for {len(missing)} parameter(s), first: {missing[0]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    with no_grad():
        for name, p in params:
            g = p.grad
            m = state.m[name]
            v = state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_optim_state(state: OptimState, iteration: int, path) -> None:
    meta = {"kind": "adam", "t": state.t, "iteration": iteration, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    entries = [(f"m/{k}", a) for k, a in state.m.items()] + [(f"v/{k}", a) for k, a in state.v.items()]
    write_container(path, meta, entries)


def load_optim_state(path) -> tuple[OptimState, int]:
    meta, entries = read_container(path)
    if meta.get("kind") != "adam":
        raise FormatError(f"{path}: not an optimizer state file")
    m = {k[2:]: a for k, a in entries if k.startswith("m/")}
    v = {k[2:]: a for k, a in entries if k.startswith("v/")}
    state = OptimState(m, v, int(meta["t"]), meta["beta1"], meta["beta2"], meta["eps"])
    return state, int(meta["iteration"])


# -- training ------------------------------------------------------------------------


def default_batch_size(scale: int) -> int:
    return 32 if scale == 2 else 64


@dataclass
class TrainConfig:
    batch_size: int | None = None  # None: 32 at x2, 64 otherwise
    epochs: float = 1200
    patch_size: int = 256
    seed: int = 0
    lr_max: float = 5e-5
    lr_min: float = 1e-11
    period_epochs: float = 120
    restart: bool = True
    iterations: int | None = None  # overrides epochs
    period_iters: int | None = None  # overrides period_epochs
    augment: bool = True
    log_path: str | None = None
    checkpoint_path: str | None = None
    checkpoint_every: int = 0  # 0: only at the end

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def resolve(self, scale: int, n_samples: int) -> tuple[int, int, LrSchedule]:
        """(batch size, total iterations, schedule); one epoch = n_samples / batch iterations."""
        batch = self.batch_size or default_batch_size(scale)
        if batch < 1 or self.patch_size < 1 or self.patch_size % scale:
            raise ConfigError(f"invalid batch {batch} / patch {self.patch_size} for scale {scale}")
        per_epoch = n_samples / batch
        total = self.iterations if self.iterations is not None else max(1, round(self.epochs * per_epoch))
        period = self.period_iters if self.period_iters is not None else max(1, round(self.period_epochs * per_epoch))
        return batch, total, LrSchedule(self.lr_max, self.lr_min, period, self.restart)


@dataclass
class TrainResult:
    model: FDAN
    losses: list[float] = field(default_factory=list)
    iterations: int = 0
    checkpoint_path: str | None = None


def sample_batch(pairs: list[SamplePair], batch: int, patch: int, rng: Rng, augment: bool = True):
    """Input and target arrays (N, 3, h, w) for one iteration."""
    idx = rng.integers(0, len(pairs), size=batch)
    xs, ys = [], []
    for b, i in enumerate(idx):
        pair = pairs[int(i)]
        sub = rng.child(b)
        lr, hr = crop_aligned_pair(pair.hr, pair.lr, pair.scale, patch, sub.child(0))
        x, y = lr.planes, hr.planes
        if augment:
            flip, rot = draw_augmentation(sub.child(1))
            x, y = transform_planes(x, flip, rot), transform_planes(y, flip, rot)
        xs.append(x)
        ys.append(y)
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)


def _optim_path(ckpt: str) -> str:
    return ckpt + ".optim"


def train(
    train_config: TrainConfig,
    fdan_config: FdanConfig,
    data: Manifest | list[SamplePair],
    resume: str | None = None,
) -> TrainResult:
    pairs = data.load_pairs() if isinstance(data, Manifest) else list(data)
    if not pairs:
        raise ConfigError("training data is empty")
    for p in pairs:
        if p.scale != fdan_config.scale:
            raise ConfigError(f"{p.source_id}: pair scale {p.scale} != model scale {fdan_config.scale}")
    batch, total, sched = train_config.resolve(fdan_config.scale, len(pairs))

    model, params = build_fdan(fdan_config)
    state = OptimState.create(params)
    start = 0
    if resume:
        load_checkpoint(resume, model)
        state, start = load_optim_state(_optim_path(resume))
        log.info("resumed from %s at iteration %d", resume, start)

    log_fh = None
    if train_config.log_path:
        mode = "a" if resume and Path(train_config.log_path).exists() else "w"
        log_fh = open(train_config.log_path, mode)
        if mode == "w":
            log_fh.write("iter,lr,loss\n")

    root = Rng(train_config.seed)
    result = TrainResult(model)
    ckpt = train_config.checkpoint_path

    def checkpoint(done: int) -> None:
        if ckpt:
            save_checkpoint(params, fdan_config, ckpt)
            save_optim_state(state, done, _optim_path(ckpt))

    try:
        for it in range(start, total):
            lr = cosine_lr(it, sched)
            x, y = sample_batch(pairs, batch, train_config.patch_size, root.child(it), train_config.augment)
            params.zero_grad()
            try:
                loss = l1_loss(model(Tensor(x)), y)
            except NumericError as exc:
                raise TrainingError(f"non-finite activations at iteration {it}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss became {value} at iteration {it}")
            loss.backward()
            adam_step(params, state, lr)
            result.losses.append(value)
            if log_fh:
                log_fh.write(f"{it},{lr:.6e},{value:.8f}\n")
            if train_config.checkpoint_every and (it + 1) % train_config.checkpoint_every == 0:
                checkpoint(it + 1)
            log.debug("iter %d lr %.3e loss %.6f", it, lr, value)
        result.iterations = total - start
        checkpoint(total)
    finally:
        if log_fh:
            log_fh.close()
    result.checkpoint_path = ckpt
    return result
