import numpy as np
import pytest

from fdan.checkpoint import load_checkpoint, read_container, save_checkpoint
from fdan.errors import ConfigError, FormatError, ShapeError
from fdan.model import ESA, FDB, HFDG, FdanConfig, ParamStore, _Builder, build_fdan, fdan_forward, hfdg_concat_widths
from fdan.profiler import count_params
from fdan.rng import Rng
from fdan.selftest import full_model_gradcheck
from fdan.tensor import Tensor, no_grad
from fdan.trainer import l1_loss


def make(cls, *args, seed=0):
    store = ParamStore()
    layer = cls(*args, _Builder(store, Rng(seed)))
    return layer, store


def zero(store):
    for _, t in store:
        t.data[...] = 0.0


def rand_input(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


# -- FDB -------------------------------------------------------------------------------


def test_fdb_zero_weights_detail_is_alpha():
    fdb, store = make(FDB, "fdb", 48)
    zero(store)
    x = rand_input((1, 48, 8, 8))
    base, detail = fdb(x)
    np.testing.assert_array_equal(detail.data, x.data[:, :24])
    assert not base.data.any()


def test_fdb_identity_conv_on_nonpositive_beta():
    fdb, store = make(FDB, "fdb", 8)
    zero(store)
    store["fdb.conv1x1.weight"].data[:, :, 0, 0] = np.eye(4)
    x = rand_input((1, 8, 6, 6))
    x.data[:, 4:] = -np.abs(x.data[:, 4:])
    _, detail = fdb(x)
    np.testing.assert_array_equal(detail.data, x.data[:, :4])


def test_fdb_output_shapes():
    fdb, _ = make(FDB, "fdb", 48)
    base, detail = fdb(rand_input((1, 48, 8, 8)))
    assert base.shape == detail.shape == (1, 24, 8, 8)


def test_fdb_rejects_odd_channels():
    with pytest.raises(ShapeError):
        make(FDB, "fdb", 7)


# -- ESA -------------------------------------------------------------------------------


def test_esa_zero_weights_halves_input():
    esa, store = make(ESA, "esa", 48)
    zero(store)
    x = rand_input((1, 48, 32, 32))
    np.testing.assert_array_equal(esa(x).data, 0.5 * x.data)


def test_esa_shape_and_param_count():
    esa, store = make(ESA, "esa", 48)
    assert esa(rand_input((1, 48, 32, 32))).shape == (1, 48, 32, 32)
    assert store.num_params() == 6_600
    per_layer = [store[f"esa.{n}.weight"].size + store[f"esa.{n}.bias"].size for n in ("conv1", "conv_f", "conv2", "conv_max", "conv3", "conv3_", "conv4")]
    assert per_layer == [588, 156, 1_308, 1_308, 1_308, 1_308, 624]


def test_esa_rejects_small_input():
    esa, _ = make(ESA, "esa", 16)
    with pytest.raises(ShapeError, match="at least 15x15"):
        esa(rand_input((1, 16, 14, 20)))
    assert esa(rand_input((1, 16, 15, 15))).shape == (1, 16, 15, 15)


# -- HFDG ------------------------------------------------------------------------------


def test_hfdg_concat_widths_default():
    assert hfdg_concat_widths(48, 3) == [24, 12, 6, 6]


@pytest.mark.parametrize("c,b", [(48, 3), (32, 2), (64, 4), (16, 1)])
def test_channel_conservation(c, b):
    assert sum(hfdg_concat_widths(c, b)) == c
    group, _ = make(HFDG, "g", c, b)
    assert group(rand_input((1, c, 16, 16))).shape == (1, c, 16, 16)


def test_hfdg_rejects_indivisible_channels():
    with pytest.raises(ConfigError):
        hfdg_concat_widths(20, 3)
    with pytest.raises(ConfigError):
        FdanConfig(channels=20, blocks=3)


def test_hfdg_zero_weights():
    group, store = make(HFDG, "g", 48, 3)
    zero(store)
    x = rand_input((1, 48, 16, 16))
    y = group(x).data
    # each detail is the first half of a running input whose base is zero after block 1
    expected = np.concatenate([x.data[:, :24], np.zeros((1, 12 + 6 + 6, 16, 16), np.float32)], axis=1)
    np.testing.assert_array_equal(y, 0.5 * expected)


# -- full network ----------------------------------------------------------------------


@pytest.mark.parametrize("scale,expected", [(2, 126_660), (4, 142_248), (8, 204_600), (16, 454_008)])
def test_param_count_oracle(scale, expected):
    assert count_params(build_fdan(FdanConfig(scale=scale))[0]) == expected
    assert build_fdan(FdanConfig(scale=scale))[1].num_params() == expected


def test_param_count_breakdown_s4():
    _, store = build_fdan(FdanConfig(scale=4))

    def total(prefix):
        return sum(t.size for n, t in store if n.startswith(prefix))

    assert total("group0.fdb0.") == 5_808
    assert total("group0.fdb1.") == 1_464
    assert total("group0.fdb2.") == 372
    assert total("group0.esa.") == 6_600
    assert total("group") == 85_464
    assert total("head.") == 1_344
    assert total("aggregate.conv1x1.") == 13_872
    assert total("aggregate.conv3x3.") == 20_784
    assert total("reconstruct.") == 20_784


def test_inter_scale_deltas():
    counts = [count_params(build_fdan(FdanConfig(scale=s))[0]) for s in (2, 4, 8, 16)]
    # each relative to s=2; only the reconstruction conv depends on the scale
    assert [c - counts[0] for c in counts[1:]] == [15_588, 77_940, 327_348]


def test_fdan_a_drops_aggregation_conv():
    full = count_params(build_fdan(FdanConfig())[0])
    variant = count_params(build_fdan(FdanConfig(aggregate=False))[0])
    assert full - variant == 13_872 == 6 * 48 * 48 + 48


def test_param_names_unique_and_ordered():
    _, store = build_fdan(FdanConfig())
    names = store.names()
    assert len(names) == len(set(names))
    assert names[:2] == ["head.weight", "head.bias"]
    assert names[-2:] == ["reconstruct.weight", "reconstruct.bias"]
    _, again = build_fdan(FdanConfig())
    assert again.names() == names


@pytest.mark.parametrize("scale,hw,out", [(4, (16, 16), (64, 64)), (2, (32, 32), (64, 64))])
def test_forward_shapes(scale, hw, out):
    model, _ = build_fdan(FdanConfig(channels=16, groups=2, scale=scale))
    with no_grad():
        y = fdan_forward(Tensor(np.random.default_rng(0).uniform(size=(1, 3, *hw)).astype(np.float32)), model)
    assert y.shape == (1, 3, *out)
    assert np.isfinite(y.data).all()


def test_forward_rejects_bad_input():
    model, _ = build_fdan(FdanConfig(channels=16, groups=1, scale=2))
    with pytest.raises(ShapeError):
        fdan_forward(Tensor.zeros((1, 3, 12, 20)), model)
    with pytest.raises(ShapeError):
        fdan_forward(Tensor.zeros((1, 4, 16, 16)), model)


def test_all_zero_weights_give_zero_output():
    model, store = build_fdan(FdanConfig(channels=16, groups=2, scale=4))
    zero(store)
    y = fdan_forward(rand_input((1, 3, 16, 16)), model)
    assert y.shape == (1, 3, 64, 64)
    assert not y.data.any()


def test_gradient_on_small_subset():
    model, store = build_fdan(FdanConfig(channels=16, blocks=3, groups=2, scale=2, seed=5))
    report = full_model_gradcheck(model, store, Rng(5).child(1), coords=10)
    assert len(report.checked) >= 10
    assert report.max_rel_error < 1e-3


def test_every_sampled_parameter_is_connected():
    model, store = build_fdan(FdanConfig(channels=16, blocks=3, groups=2, scale=2, seed=2))
    store.astype(np.float64)
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    with no_grad():
        base = np.abs(fdan_forward(x, model).data).sum()
    names = store.names()
    hits = attempts = 0
    while hits < 20:
        attempts += 1
        assert attempts < 200, "too many dead parameters"
        name = names[rng.integers(len(names))]
        t = store[name]
        i = np.unravel_index(rng.integers(t.size), t.shape)
        old = t.data[i]
        t.data[i] = old + 1e-2
        with no_grad():
            moved = np.abs(fdan_forward(x, model).data).sum()
        t.data[i] = old
        if moved != base:
            hits += 1


def test_same_seed_same_weights_different_seed_differs():
    a = build_fdan(FdanConfig(seed=9))[1].state()
    b = build_fdan(FdanConfig(seed=9))[1].state()
    c = build_fdan(FdanConfig(seed=10))[1].state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["head.weight"], c["head.weight"])


def test_config_rejects_bad_scale_and_unknown_keys():
    with pytest.raises(ConfigError):
        FdanConfig(scale=3)
    with pytest.raises(ConfigError):
        FdanConfig.from_dict({"channels": 48, "depth": 2})


# -- checkpoint ------------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    config = FdanConfig(channels=16, groups=2, scale=4, seed=3)
    _, store = build_fdan(config)
    path = tmp_path / "m.fdan"
    save_checkpoint(store, config, path)
    loaded, cfg = load_checkpoint(path)
    assert cfg == config
    assert loaded.names() == store.names()
    for (n, a), (_, b) in zip(store, loaded):
        assert a.data.tobytes() == b.data.tobytes(), n
    model, _ = build_fdan(FdanConfig(channels=16, groups=2, scale=4, seed=99))
    load_checkpoint(path, model)
    for (n, a), (_, b) in zip(store, model.params):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_checkpoint_header_layout(tmp_path):
    config = FdanConfig(channels=8, blocks=1, groups=1, scale=2)
    _, store = build_fdan(config)
    path = tmp_path / "m.fdan"
    save_checkpoint(store, config, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FDAN"
    assert int.from_bytes(raw[4:6], "little") == 1
    meta, entries = read_container(path)
    assert meta == config.to_dict()
    assert [n for n, _ in entries] == store.names()


def test_checkpoint_truncated_names_entry(tmp_path):
    config = FdanConfig(channels=8, blocks=1, groups=1, scale=2)
    _, store = build_fdan(config)
    path = tmp_path / "m.fdan"
    save_checkpoint(store, config, path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError, match="reconstruct.bias"):
        load_checkpoint(path)


@pytest.mark.parametrize("mutate", [lambda b: b"XDAN" + b[4:], lambda b: b[:4] + b"\x02\x00" + b[6:], lambda b: b[:7]])
def test_checkpoint_bad_header(tmp_path, mutate):
    config = FdanConfig(channels=8, blocks=1, groups=1, scale=2)
    path = tmp_path / "m.fdan"
    save_checkpoint(build_fdan(config)[1], config, path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    config = FdanConfig(scale=4)
    path = tmp_path / "m.fdan"
    save_checkpoint(build_fdan(config)[1], config, path)
    model, _ = build_fdan(FdanConfig(scale=2))
    with pytest.raises(ConfigError):
        load_checkpoint(path, model)


def test_l1_training_signal_reaches_every_layer():
    model, store = build_fdan(FdanConfig(channels=16, groups=2, scale=2, seed=1))
    x = rand_input((1, 3, 16, 16))
    loss = l1_loss(fdan_forward(x, model), np.zeros((1, 3, 32, 32), np.float32))
    loss.backward()
    assert all(t.grad is not None and t.grad.shape == t.shape for _, t in store)
    assert np.abs(store["head.weight"].grad).sum() > 0
