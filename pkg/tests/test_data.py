import json
from fractions import Fraction

import cv2
import numpy as np
import pytest

from fdan.data import (
    ImageBuffer,
    SamplePair,
    augment,
    bicubic_resize,
    bicubic_weights,
    crop_aligned_pair,
    draw_augmentation,
    cubic_kernel,
    load_image,
    load_manifest,
    prepare_dataset,
    save_image,
    synthetic_pair,
    to_luma,
    transform_planes,
)
from fdan.errors import FormatError, RangeError, ShapeError
from fdan.rng import Rng


def random_image(h, w, bit_depth=10, color_space="hdr_2100", layout="rgb", seed=0):
    codes = np.random.default_rng(seed).integers(0, 1 << bit_depth, size=(3, h, w))
    return ImageBuffer.from_codes(codes, bit_depth, color_space, layout)


# -- bicubic ---------------------------------------------------------------------------


def test_cubic_kernel_values():
    x = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5])
    np.testing.assert_allclose(cubic_kernel(x), [1.0, 0.5625, 0.0, -0.0625, 0.0, 0.0])


@pytest.mark.parametrize("scale", [Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16), 2, 3])
def test_constant_image_is_preserved(scale):
    v = np.float32(0.3712)
    img = ImageBuffer(np.full((3, 64, 48), v, np.float32))
    out = bicubic_resize(img, scale)
    assert np.all(np.abs(out.planes - v) <= np.spacing(v))


@pytest.mark.parametrize("s,size", [(2, (1080, 1920)), (4, (540, 960)), (8, (270, 480)), (16, (135, 240))])
def test_degradation_dimension_table(s, size):
    hr = ImageBuffer(np.zeros((3, 2160, 3840), np.float32))
    lr = bicubic_resize(hr, Fraction(1, s))
    assert (lr.height, lr.width) == size


def brute_force_downsample(row, factor, a=-0.5):
    """Direct weighted sum of the stretched Keys kernel, with edge clamp."""
    n = len(row)
    out = []
    for o in range(n // factor):
        center = (o + 0.5) * factor - 0.5
        acc = norm = 0.0
        for t in range(int(np.floor(center - 2 * factor)), int(np.ceil(center + 2 * factor)) + 1):
            d = abs(center - t) / factor
            if d <= 1:
                w = (a + 2) * d**3 - (a + 3) * d**2 + 1
            elif d < 2:
                w = a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a
            else:
                w = 0.0
            acc += w * row[min(max(t, 0), n - 1)]
            norm += w
        out.append(acc / norm)
    return np.array(out)


def test_ramp_downsample_matches_brute_force():
    ramp = np.linspace(0.0, 1.0, 40)
    img = ImageBuffer(np.broadcast_to(ramp, (3, 6, 40)).astype(np.float32).copy())
    out = bicubic_resize(img, Fraction(1, 2)).planes[0, 1]
    ref = brute_force_downsample(img.planes[0, 3].astype(np.float64), 2)
    np.testing.assert_allclose(out[2:-2], ref[2:-2], atol=1e-6)
    # away from the clamped border a ramp stays a ramp
    assert np.allclose(np.diff(out[2:-2]), np.diff(out[2:-2])[0], atol=1e-6)


def test_weights_rows_sum_to_one():
    for n_in, n_out in [(16, 4), (7, 3), (5, 20)]:
        np.testing.assert_allclose(bicubic_weights(n_in, n_out).sum(axis=1), 1.0)


def test_resize_rejects_empty_target():
    with pytest.raises(ValueError):
        bicubic_resize(ImageBuffer(np.zeros((3, 4, 4), np.float32)), Fraction(1, 8))
    with pytest.raises(ValueError):
        bicubic_resize(ImageBuffer(np.zeros((3, 4, 4), np.float32)), 0)


# -- cropping and augmentation ---------------------------------------------------------


def test_crop_patch_sizes_and_alignment():
    hr = random_image(300, 280)
    lr = bicubic_resize(hr, Fraction(1, 4))
    lr_p, hr_p = crop_aligned_pair(hr, lr, 4, 256, Rng(3))
    assert (hr_p.height, hr_p.width) == (256, 256)
    assert (lr_p.height, lr_p.width) == (64, 64)


def test_crop_is_colocated():
    hr = random_image(64, 64)
    lr = ImageBuffer(hr.planes[:, ::4, ::4].copy(), 10, "hdr_2100")
    lr_p, hr_p = crop_aligned_pair(hr, lr, 4, 16, Rng(8))
    np.testing.assert_array_equal(lr_p.planes, hr_p.planes[:, ::4, ::4])


def test_crop_identity_at_scale_one():
    img = random_image(40, 40)
    lr_p, hr_p = crop_aligned_pair(img, img, 1, 16, Rng(1))
    np.testing.assert_array_equal(lr_p.planes, hr_p.planes)


def test_crop_deterministic():
    hr = random_image(96, 96)
    lr = bicubic_resize(hr, Fraction(1, 2))
    a = crop_aligned_pair(hr, lr, 2, 32, Rng(5).child(2))
    b = crop_aligned_pair(hr, lr, 2, 32, Rng(5).child(2))
    assert all(np.array_equal(x.planes, y.planes) for x, y in zip(a, b))


def test_crop_rejects_bad_sizes():
    img = random_image(32, 32)
    with pytest.raises(ValueError):
        crop_aligned_pair(img, img, 4, 30, Rng(0))
    with pytest.raises(ValueError):
        crop_aligned_pair(img, bicubic_resize(img, Fraction(1, 4)), 4, 64, Rng(0))


def test_aligned_crop_consistency_interior():
    # the border of a patch sees clamped taps, the full frame sees real neighbours
    pair = synthetic_pair(128, 4, Rng(0))
    hr_sdr = ImageBuffer(np.sqrt(pair.hr.planes), 8, "sdr_709")
    lr_full = bicubic_resize(hr_sdr, Fraction(1, 4))
    lr_p, hr_p = crop_aligned_pair(hr_sdr, lr_full, 4, 64, Rng(4))
    again = bicubic_resize(hr_p, Fraction(1, 4))
    np.testing.assert_allclose(again.planes[:, 2:-2, 2:-2], lr_p.planes[:, 2:-2, 2:-2], atol=1e-5)


def test_rotation_twice_is_identity():
    p = random_image(8, 8).planes
    np.testing.assert_array_equal(transform_planes(transform_planes(p, False, 2), False, 2), p)
    np.testing.assert_array_equal(transform_planes(transform_planes(p, True, 0), True, 0), p)


def test_flip_preserves_histograms():
    p = random_image(8, 8).planes
    q = transform_planes(p, True, 1)
    for c in range(3):
        np.testing.assert_array_equal(np.sort(p[c].ravel()), np.sort(q[c].ravel()))


def test_rotation_needs_square_patch():
    with pytest.raises(ValueError):
        transform_planes(np.zeros((3, 4, 6)), False, 1)


def test_augment_same_transform_on_both():
    lr = random_image(8, 8)
    hr = lr.with_planes(np.kron(lr.planes, np.ones((1, 2, 2), np.float32)))
    seen = set()
    for i in range(16):
        rng = Rng(2).child(i)
        seen.add(draw_augmentation(Rng(2).child(i)))
        lr_a, hr_a = augment((lr, hr), rng)
        np.testing.assert_array_equal(lr_a.planes, hr_a.planes[:, ::2, ::2])
    assert len(seen) > 2


def test_augment_sequence_reproducible():
    img = random_image(12, 12)

    def run():
        rng = Rng(77)
        return [augment((img, img), rng)[0].planes.tobytes() for _ in range(8)]

    first = run()
    assert first == run()
    assert len(set(first)) > 1


# -- containers ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "suffix,bit_depth,color_space,layout",
    [(".png", 8, "sdr_709", "rgb"), (".png", 10, "hdr_2100", "rgb"), (".yuv", 10, "hdr_2100", "yuv"), (".yuv", 8, "sdr_709", "yuv")],
)
def test_container_round_trip(tmp_path, suffix, bit_depth, color_space, layout):
    img = random_image(9, 13, bit_depth, color_space, layout)
    path = tmp_path / f"img{suffix}"
    save_image(img, path)
    back = load_image(path)
    assert (back.bit_depth, back.color_space, back.layout) == (bit_depth, color_space, layout)
    assert back.planes.tobytes() == img.planes.tobytes()


def test_png_channel_order(tmp_path):
    codes = np.zeros((3, 2, 2), np.uint16)
    codes[0] = 255
    save_image(ImageBuffer.from_codes(codes, 8, "sdr_709"), tmp_path / "red.png")
    bgr = cv2.imread(str(tmp_path / "red.png"), cv2.IMREAD_UNCHANGED)
    assert bgr[0, 0].tolist() == [0, 0, 255]


def test_png_out_of_range_hdr(tmp_path):
    raw = np.full((4, 4, 3), 1024, np.uint16)
    cv2.imwrite(str(tmp_path / "bad.png"), raw)
    with pytest.raises(RangeError):
        load_image(tmp_path / "bad.png")


def test_sidecar_mismatch(tmp_path):
    img = random_image(4, 6, layout="yuv")
    save_image(img, tmp_path / "a.yuv")
    side = tmp_path / "a.json"
    meta = json.loads(side.read_text())
    meta["width"] = 7
    side.write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="payload"):
        load_image(tmp_path / "a.yuv")
    side.unlink()
    with pytest.raises(FormatError, match="sidecar"):
        load_image(tmp_path / "a.yuv")


def test_unsupported_container(tmp_path):
    (tmp_path / "x.bmp").write_bytes(b"BM")
    with pytest.raises(FormatError):
        load_image(tmp_path / "x.bmp")


def test_sample_pair_dimension_check():
    with pytest.raises(ShapeError):
        SamplePair(random_image(8, 8), random_image(15, 16), 2)


# -- luma ------------------------------------------------------------------------------


@pytest.mark.parametrize("color_space", ["sdr_709", "hdr_2100"])
def test_gray_luma(color_space):
    planes = np.full((3, 4, 4), 0.42, np.float32)
    np.testing.assert_allclose(to_luma(ImageBuffer(planes, 10, color_space)), 0.42, rtol=1e-6)


def test_red_luma():
    planes = np.zeros((3, 1, 1), np.float32)
    planes[0] = 1.0
    assert to_luma(ImageBuffer(planes, 8, "sdr_709"))[0, 0] == pytest.approx(0.2126)
    assert to_luma(ImageBuffer(planes, 10, "hdr_2100"))[0, 0] == pytest.approx(0.2627)


def test_yuv_luma_passthrough():
    img = random_image(5, 5, layout="yuv")
    assert to_luma(img).tobytes() == img.planes[0].tobytes()


# -- manifests -------------------------------------------------------------------------


def test_prepare_writes_manifest_and_keeps_inputs(tmp_path):
    src = tmp_path / "src"
    (src / "sdr").mkdir(parents=True)
    (src / "hdr").mkdir()
    for i in range(2):
        pair = synthetic_pair(32, 2, Rng(i))
        save_image(ImageBuffer(pair.hr.planes, 8, "sdr_709"), src / "sdr" / f"f{i}.png")
        save_image(pair.hr, src / "hdr" / f"f{i}.png")
    before = {p: p.read_bytes() for p in src.rglob("*.png")}
    prepare_dataset(src, tmp_path / "out", 2)
    assert {p: p.read_bytes() for p in src.rglob("*.png")} == before
    pairs = load_manifest(tmp_path / "out" / "manifest.json").load_pairs()
    assert len(pairs) == 2
    assert (pairs[0].lr.width, pairs[0].hr.width) == (16, 32)
    assert pairs[0].lr.bit_depth == 8 and pairs[0].hr.bit_depth == 10


def test_manifest_rejects_extra_keys(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps([{"lr": "a.png", "hr": "b.png", "scale": 2, "x": 1}]))
    with pytest.raises(FormatError):
        load_manifest(path)


def test_manifest_missing_file(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps([{"lr": "a.png", "hr": "b.png", "scale": 2}]))
    with pytest.raises(FormatError, match="missing file"):
        load_manifest(path).load_pairs()


def test_synthetic_pair_contract():
    pair = synthetic_pair(64, 4, Rng(1))
    assert (pair.lr.width, pair.hr.width) == (16, 64)
    assert pair.hr.bit_depth == 10 and pair.lr.bit_depth == 8
    again = synthetic_pair(64, 4, Rng(1))
    assert again.hr.planes.tobytes() == pair.hr.planes.tobytes()
