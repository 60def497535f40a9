"""Image containers, bicubic degradation, aligned cropping and augmentation.

Images live in memory as :class:`ImageBuffer`: three float32 planes
normalized to [0, 1] by the maximum code value of their bit depth. Three
on-disk containers round-trip losslessly:

* 8-bit RGB PNG (SDR, Rec.709);
* 16-bit RGB PNG whose samples carry 10-bit codes (HDR, Rec.2100);
* raw planar 4:4:4 ``.yuv`` (u8 or u16 LE samples) plus a ``.json`` sidecar
  ``{"width", "height", "bit_depth", "color_space"}``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np

from .errors import FormatError, RangeError, ShapeError
from .rng import Rng

COLOR_SPACES = ("sdr_709", "hdr_2100")
BIT_DEPTHS = (8, 10)
# (Kr, Kb) luma coefficients.
LUMA_COEFFS = {"sdr_709": (0.2126, 0.0722), "hdr_2100": (0.2627, 0.0593)}


@dataclass
class ImageBuffer:
    planes: np.ndarray  # (3, H, W) float32 in [0, 1]
    bit_depth: int = 8
    color_space: str = "sdr_709"
    layout: str = "rgb"  # or "yuv"

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != 3:
            raise ShapeError(f"expected 3 planes (3, H, W), got {self.planes.shape}")
        if self.bit_depth not in BIT_DEPTHS:
            raise FormatError(f"unsupported bit depth {self.bit_depth}")
        if self.color_space not in COLOR_SPACES:
            raise FormatError(f"unknown color space {self.color_space!r}")
        if self.layout not in ("rgb", "yuv"):
            raise FormatError(f"unknown layout {self.layout!r}")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def max_code(self) -> int:
        return (1 << self.bit_depth) - 1

    def codes(self) -> np.ndarray:
        """Quantized integer codes, clipped to the valid range."""
        q = np.rint(np.clip(self.planes, 0.0, 1.0).astype(np.float64) * self.max_code)
        return q.astype(np.uint16)

    @classmethod
    def from_codes(cls, codes: np.ndarray, bit_depth: int, color_space: str, layout: str = "rgb") -> "ImageBuffer":
        codes = np.asarray(codes)
        max_code = (1 << bit_depth) - 1
        if codes.size and (codes.min() < 0 or codes.max() > max_code):
            raise RangeError(f"code value {int(codes.max())} outside [0, {max_code}] for {bit_depth}-bit {color_space}")
        planes = (codes.astype(np.float64) / max_code).astype(np.float32)
        return cls(planes, bit_depth, color_space, layout)

    def crop(self, y: int, x: int, h: int, w: int) -> "ImageBuffer":
        return ImageBuffer(self.planes[:, y : y + h, x : x + w].copy(), self.bit_depth, self.color_space, self.layout)

    def with_planes(self, planes: np.ndarray) -> "ImageBuffer":
        return ImageBuffer(np.ascontiguousarray(planes, dtype=np.float32), self.bit_depth, self.color_space, self.layout)


@dataclass
class SamplePair:
    lr: ImageBuffer
    hr: ImageBuffer
    scale: int
    source_id: str = ""

    def __post_init__(self):
        if self.hr.width != self.scale * self.lr.width or self.hr.height != self.scale * self.lr.height:
            raise ShapeError(
                f"{self.source_id or 'pair'}: HR {self.hr.width}x{self.hr.height} is not x{self.scale} "
                f"of LR {self.lr.width}x{self.lr.height}"
            )


# -- file containers ---------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def load_image(path) -> ImageBuffer:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        if not path.exists():
            raise FileNotFoundError(path)
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise FormatError(f"{path}: not a readable PNG")
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise FormatError(f"{path}: expected 3-channel RGB PNG, got shape {raw.shape}")
        rgb = raw[:, :, ::-1].transpose(2, 0, 1)
        if raw.dtype == np.uint8:
            return ImageBuffer.from_codes(rgb, 8, "sdr_709")
        if raw.dtype == np.uint16:
            return ImageBuffer.from_codes(rgb, 10, "hdr_2100")
        raise FormatError(f"{path}: unsupported PNG sample type {raw.dtype}")
    if suffix == ".yuv":
        side = _sidecar(path)
        try:
            meta = json.loads(side.read_text())
            w, h, bd, cs = int(meta["width"]), int(meta["height"]), int(meta["bit_depth"]), meta["color_space"]
        except FileNotFoundError:
            raise FormatError(f"{path}: missing sidecar {side.name}") from None
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{side}: malformed sidecar ({exc})") from exc
        if bd not in BIT_DEPTHS or cs not in COLOR_SPACES:
            raise FormatError(f"{side}: unsupported bit_depth/color_space {bd}/{cs}")
        dtype = np.dtype("u1") if bd == 8 else np.dtype("<u2")
        payload = path.read_bytes()
        expected = 3 * w * h * dtype.itemsize
        if len(payload) != expected:
            raise FormatError(f"{path}: payload is {len(payload)} bytes, sidecar {w}x{h}@{bd}bit implies {expected}")
        codes = np.frombuffer(payload, dtype=dtype).reshape(3, h, w)
        return ImageBuffer.from_codes(codes, bd, cs, layout="yuv")
    raise FormatError(f"{path}: unsupported container {suffix or '(none)'}")


def save_image(img: ImageBuffer, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    codes = img.codes()
    if suffix == ".png":
        if img.layout != "rgb":
            raise FormatError(f"{path}: PNG holds RGB only; save YUV content as .yuv")
        hwc = np.ascontiguousarray(codes.transpose(1, 2, 0)[:, :, ::-1])
        hwc = hwc.astype(np.uint8) if img.bit_depth == 8 else hwc.astype(np.uint16)
        if not cv2.imwrite(str(path), hwc):
            raise FormatError(f"{path}: PNG encoder failed")
        return
    if suffix == ".yuv":
        dtype = np.dtype("u1") if img.bit_depth == 8 else np.dtype("<u2")
        path.write_bytes(codes.astype(dtype).tobytes())
        meta = {"width": img.width, "height": img.height, "bit_depth": img.bit_depth, "color_space": img.color_space}
        _sidecar(path).write_text(json.dumps(meta))
        return
    raise FormatError(f"{path}: unsupported container {suffix or '(none)'}")


# -- resampling ----------------------------------------------------------------------


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) resampling matrix; half-pixel centers, edge clamp.

    When shrinking, the kernel is stretched by n_in/n_out (antialiasing);
    each row is normalized to sum to one.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize dimensions must be positive, got {n_in} -> {n_out}")
    ratio = n_in / n_out
    stretch = max(ratio, 1.0)
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        center = (o + 0.5) * ratio - 0.5
        lo = math.floor(center - support)
        taps = np.arange(lo, math.ceil(center + support) + 1)
        w = cubic_kernel((center - taps) / stretch)
        np.add.at(m[o], np.clip(taps, 0, n_in - 1), w)
        m[o] /= m[o].sum()
    return m


def resize_planes(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size {out_h}x{out_w} must be positive")
    _, h, w = planes.shape
    wy = bicubic_weights(h, out_h)
    wx = bicubic_weights(w, out_w)
    out = np.einsum("ih,chw,jw->cij", wy, planes.astype(np.float64), wx, optimize=True)
    return out.astype(np.float32)


def bicubic_resize(img: ImageBuffer, scale) -> ImageBuffer:
    """Resize by a rational factor (1/4 shrinks 3840x2160 to 960x540)."""
    f = Fraction(scale).limit_denominator(1 << 16)
    if f <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    out_h, out_w = round(img.height * f), round(img.width * f)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"scale {scale} maps {img.width}x{img.height} to an empty image")
    return img.with_planes(resize_planes(img.planes, out_h, out_w))


# -- patch sampling ------------------------------------------------------------------


def crop_aligned_pair(hr: ImageBuffer, lr: ImageBuffer, s: int, patch: int, rng: Rng) -> tuple[ImageBuffer, ImageBuffer]:
    """Random HR patch with top-left on the s-grid and its co-located LR patch.

    Returns ``(lr_patch, hr_patch)``.
    """
    if patch % s:
        raise ValueError(f"patch {patch} not divisible by scale {s}")
    if hr.height < patch or hr.width < patch:
        raise ValueError(f"HR image {hr.width}x{hr.height} smaller than patch {patch}")
    if lr.height * s < hr.height or lr.width * s < hr.width:
        raise ValueError(f"LR image {lr.width}x{lr.height} does not cover HR {hr.width}x{hr.height} at x{s}")
    y = s * int(rng.integers(0, (hr.height - patch) // s + 1))
    x = s * int(rng.integers(0, (hr.width - patch) // s + 1))
    lp = patch // s
    return lr.crop(y // s, x // s, lp, lp), hr.crop(y, x, patch, patch)


def transform_planes(planes: np.ndarray, flip: bool, rotation: int) -> np.ndarray:
    """Horizontal flip, then counter-clockwise rotation by ``rotation`` quarter turns."""
    if rotation % 2 and planes.shape[-1] != planes.shape[-2]:
        raise ValueError(f"cannot rotate a non-square {planes.shape[-1]}x{planes.shape[-2]} patch by 90 degrees")
    out = planes[..., ::-1] if flip else planes
    return np.ascontiguousarray(np.rot90(out, rotation % 4, axes=(-2, -1)))


def draw_augmentation(rng: Rng) -> tuple[bool, int]:
    flip = rng.random() < 0.5
    rotation = int(rng.integers(0, 4))
    return flip, rotation


def augment(pair: tuple[ImageBuffer, ImageBuffer], rng: Rng) -> tuple[ImageBuffer, ImageBuffer]:
    """Same random flip/rotation applied to both images of ``(lr, hr)``."""
    flip, rotation = draw_augmentation(rng)
    return tuple(img.with_planes(transform_planes(img.planes, flip, rotation)) for img in pair)


# -- color ---------------------------------------------------------------------------


def to_luma(img: ImageBuffer) -> np.ndarray:
    """Y plane: passed through for YUV, matrixed from RGB otherwise."""
    if img.layout == "yuv":
        return img.planes[0]
    kr, kb = LUMA_COEFFS[img.color_space]
    r, g, b = (p.astype(np.float64) for p in img.planes)
    return kr * r + (1.0 - kr - kb) * g + kb * b


# -- manifests -----------------------------------------------------------------------


@dataclass
class ManifestEntry:
    lr: str
    hr: str
    scale: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    seed: int = 0
    root: Path = Path(".")

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.root / path

    def load_pairs(self) -> list[SamplePair]:
        pairs = []
        for i, e in enumerate(self.entries):
            lr_path, hr_path = self.resolve(e.lr), self.resolve(e.hr)
            for p in (lr_path, hr_path):
                if not p.exists():
                    raise FormatError(f"manifest entry {i}: missing file {p}")
            pairs.append(SamplePair(load_image(lr_path), load_image(hr_path), e.scale, source_id=Path(e.lr).stem))
        return pairs


def load_manifest(path, split: str = "train", seed: int = 0) -> Manifest:
    path = Path(path)
    try:
        items = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(items, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    entries = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or set(item) != {"lr", "hr", "scale"}:
            raise FormatError(f"{path}: entry {i} must have exactly the keys lr, hr, scale")
        entries.append(ManifestEntry(str(item["lr"]), str(item["hr"]), int(item["scale"])))
    return Manifest(entries, split, seed, path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    items = [{"lr": e.lr, "hr": e.hr, "scale": e.scale} for e in manifest.entries]
    path.write_text(json.dumps(items, indent=2) + "\n")


IMAGE_SUFFIXES = (".png", ".yuv")


def prepare_dataset(input_dir, out_dir, scale: int) -> Manifest:
    """Degrade ``input_dir/sdr/*`` by bicubic 1/scale; pair with ``input_dir/hdr/*``.

    Writes ``out_dir/lr_x{scale}/<name>`` and ``out_dir/manifest.json``.
    Input images are only read.
    """
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    sdr_dir, hdr_dir = input_dir / "sdr", input_dir / "hdr"
    if not sdr_dir.is_dir() or not hdr_dir.is_dir():
        raise FormatError(f"{input_dir}: expected sdr/ and hdr/ subdirectories")
    lr_dir = out_dir / f"lr_x{scale}"
    lr_dir.mkdir(parents=True, exist_ok=True)
    hdr_by_stem = {p.stem: p for p in hdr_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    manifest = Manifest(root=out_dir)
    for sdr_path in sorted(p for p in sdr_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        hdr_path = hdr_by_stem.get(sdr_path.stem)
        if hdr_path is None:
            raise FormatError(f"{sdr_path.name}: no HDR counterpart in {hdr_dir}")
        sdr = load_image(sdr_path)
        hdr = load_image(hdr_path)
        if (sdr.width, sdr.height) != (hdr.width, hdr.height):
            raise ShapeError(f"{sdr_path.stem}: SDR {sdr.width}x{sdr.height} and HDR {hdr.width}x{hdr.height} differ")
        if sdr.width % scale or sdr.height % scale:
            raise ShapeError(f"{sdr_path.stem}: {sdr.width}x{sdr.height} not divisible by {scale}")
        lr = bicubic_resize(sdr, Fraction(1, scale))
        lr_path = lr_dir / sdr_path.name
        save_image(lr, lr_path)
        manifest.entries.append(
            ManifestEntry(os.path.relpath(lr_path, out_dir), os.path.relpath(hdr_path.resolve(), out_dir.resolve()), scale)
        )
    if not manifest.entries:
        raise FormatError(f"{sdr_dir}: no images found")
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def batch_planes(images: list[ImageBuffer]) -> np.ndarray:
    return np.stack([img.planes for img in images]).astype(np.float32)


def synthetic_pair(size: int, scale: int, rng: Rng, source_id: str = "") -> SamplePair:
    """Smooth random HDR scene, its tone-mapped SDR rendition and the bicubic LR input.

    HR-HDR is a sum of random Gaussian blobs (10-bit, Rec.2100 tag); the SDR
    version is a compressive tone curve of it, quantized to 8 bits and
    shrunk by ``1/scale``.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    planes = np.zeros((3, size, size))
    for _ in range(6):
        cy, cx = rng.uniform(2)
        width = rng.uniform(None, 0.08, 0.35)
        colour = rng.uniform(3, 0.05, 0.6)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        planes += colour[:, None, None] * blob
    hdr = np.clip(planes / max(planes.max(), 1e-6), 0, 1)
    hr = ImageBuffer.from_codes(np.rint(hdr * 1023).astype(np.uint16), 10, "hdr_2100")
    sdr_full = ImageBuffer.from_codes(np.rint(np.sqrt(hdr) * 255).astype(np.uint16), 8, "sdr_709")
    lr = bicubic_resize(sdr_full, Fraction(1, scale))
    lr = ImageBuffer.from_codes(lr.codes(), 8, "sdr_709")
    return SamplePair(lr, hr, scale, source_id)
