import math

import numpy as np
import pytest

from gianet import models as M
from gianet import nn
from gianet import tensor as T
from gianet.models import ArchConfig, GiaSpec
from gianet.raw import PackedInput
from gianet.tensor import ShapeError, Tensor

from gradcheck import check_grad, numeric_grad

TINY = dict(base_width=4, depth=2)


def test_default_widths_and_conv_count():
    c = M.variant_config("sid")
    assert c.widths == [32, 64, 128, 256, 512]
    assert c.conv3x3_count == 18
    assert c.out_channels == 12
    assert M.variant_config("sid", 9, out_factor=3).out_channels == 27


def test_config_text_round_trip():
    c = M.variant_config("sw", 9, out_factor=3, width_scale=0.5)
    text = c.to_text()
    assert "block = sw" in text
    assert ArchConfig.from_text(text) == c
    with pytest.raises(ValueError):
        ArchConfig.from_text("colour = red\n")


@pytest.mark.parametrize("bad", [dict(bottleneck="both"), dict(block="wide"), dict(depth=0), dict(width_scale=0)])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        ArchConfig(**bad)


def test_unknown_variant():
    with pytest.raises(ValueError, match="unknown variant"):
        M.variant_config("se-unet")


def test_gia_shape_trace():
    net = M.build(M.variant_config("gia"))
    x = Tensor(np.random.default_rng(0).random((1, 512, 16, 16)))
    pooled = nn.global_avg_pool(x)
    assert pooled.shape == (1, 512, 1, 1)
    shrunk = net.gia.shrink(pooled)
    assert shrunk.shape == (1, 256, 1, 1)
    up = net.gia.global_branch(x)
    assert up.shape == (1, 256, 16, 16)
    cat = nn.concat_channels(x, up)
    assert cat.shape == (1, 768, 16, 16)
    assert net.gia(x).shape == (1, 512, 16, 16)


def test_gia_param_identity():
    for scale in (1.0, 0.25):
        sid = M.variant_config("sid", width_scale=scale)
        gia = M.variant_config("gia", width_scale=scale)
        c = gia.widths[-1]
        assert M.count_params(gia) - M.count_params(sid) == M.gia_param_count(c, gia.gia)
    assert M.gia_param_count(512, GiaSpec()) == 525056


def test_gia_constant_input_gives_constant_output(rng):
    net = M.build(M.desk_config("gia"))
    c = net.config.widths[-1]
    vals = rng.random((1, c, 1, 1)).astype(np.float32)
    x = Tensor(np.broadcast_to(vals, (1, c, 5, 7)).copy())
    g = net.gia.global_branch(x).data
    with T.no_grad():
        direct = nn.leaky_relu(net.gia.shrink(Tensor(vals)), net.config.slope).data
    np.testing.assert_allclose(g, np.broadcast_to(direct, g.shape), rtol=1e-6)
    y = net.gia(x).data
    assert np.all(y == y[:, :, :1, :1])


def test_gia_global_branch_permutation_invariant(rng):
    net = M.build(M.desk_config("gia"))
    c = net.config.widths[-1]
    x = rng.random((1, c, 6, 6)).astype(np.float32)
    perm = rng.permutation(36)
    xp = x.reshape(1, c, 36)[:, :, perm].reshape(1, c, 6, 6)
    ga = net.gia.global_branch(Tensor(x)).data
    gb = net.gia.global_branch(Tensor(xp)).data
    np.testing.assert_allclose(ga, gb, rtol=1e-5, atol=1e-6)
    y = net.gia(Tensor(x)).data
    yp = net.gia(Tensor(xp)).data
    np.testing.assert_allclose(y.reshape(1, -1, 36)[:, :, perm].reshape(yp.shape), yp, rtol=1e-4, atol=1e-5)


def test_sw_block_split_and_size():
    c = M.variant_config("sw")
    net = M.build(ArchConfig(block="sw", base_width=32, depth=1))
    blk = net.encoder[0][1]
    assert [b.spec.out_ch for b in blk.branches] == [16, 16]
    assert blk.branches[1].spec.dilation == 2
    out = blk(Tensor(np.zeros((1, 32, 8, 8))))
    assert out.shape == (1, 32, 8, 8)
    assert nn.receptive_field([(3, 1, c.dilation)]) == 5


def test_sw_with_dilation_one_equals_plain(rng):
    sw = M.build(ArchConfig(block="sw", dilation=1, **TINY), seed=3)
    plain = M.build(ArchConfig(**TINY), seed=4)
    assert M.count_params(sw.config) == M.count_params(plain.config) == plain.n_params()
    state = plain.state_dict()
    for name in list(plain.params):
        if name.endswith(".weight") and f"{name[:-7]}.local.weight" in sw.params:
            base = name[:-7]
            w, b = state[name], state[f"{base}.bias"]
            k = sw.params[f"{base}.local.weight"].shape[0]
            sw.params[f"{base}.local.weight"].data = w[:k].copy()
            sw.params[f"{base}.wide.weight"].data = w[k:].copy()
            sw.params[f"{base}.local.bias"].data = b[:, :k].copy()
            sw.params[f"{base}.wide.bias"].data = b[:, k:].copy()
        elif name in sw.params:
            sw.params[name].data = state[name].copy()
    x = rng.random((1, 4, 8, 8))
    np.testing.assert_allclose(M.predict(sw, x), M.predict(plain, x), rtol=1e-5, atol=1e-6)


def test_dilated_variant_dilates_every_3x3():
    net = M.build(M.desk_config("sid-dilated"))
    convs = [b for (b1, b2) in net.encoder for blk in (b1, b2) for b in blk.branches]
    convs += [b for (_, _, b1, b2) in net.decoder for blk in (b1, b2) for b in blk.branches]
    assert len(convs) == 2 * 4 + 2 * 3
    assert all(c.spec.dilation == 2 for c in convs)


def test_gia_forward_shape():
    net = M.build(M.variant_config("gia"))
    assert M.forward(net, np.zeros((1, 4, 64, 64), np.float32)).shape == (1, 3, 128, 128)


def test_sony_shape_at_reduced_width():
    net = M.build(M.variant_config("gia", width_scale=0.125))
    with T.no_grad():
        assert M.forward(net, np.zeros((1, 4, 512, 512), np.float32)).shape == (1, 3, 1024, 1024)


def test_fuji_shape():
    net = M.build(M.variant_config("sid", 9, out_factor=3))
    with T.no_grad():
        out = M.forward(net, PackedInput(Tensor(np.zeros((1, 9, 96, 96))), 100.0))
    assert out.shape == (1, 3, 288, 288)


def test_indivisible_and_wrong_channels():
    net = M.build(M.desk_config("sid"))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 4, 20, 24))))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 9, 16, 16))))


def test_zero_head_gives_zero_output(rng):
    net = M.build(M.desk_config("gia"))
    net.params["head.weight"].data[...] = 0
    out = M.forward(net, rng.random((1, 4, 32, 32)))
    assert np.all(out.data == 0)


def test_predict_clamps(rng):
    net = M.build(M.desk_config("sid"))
    net.params["head.bias"].data[...] = 5.0
    assert M.predict(net, rng.random((1, 4, 16, 16))).max() == 1.0
    assert M.forward(net, rng.random((1, 4, 16, 16))).data.max() > 1.0


def test_init_is_seeded_and_truncated():
    a = M.build(M.desk_config("gia"), seed=1).state_dict()
    b = M.build(M.desk_config("gia"), seed=1).state_dict()
    c = M.build(M.desk_config("gia"), seed=2).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)
    w = a["enc2.conv1.weight"]
    std = math.sqrt(2.0 / (w.shape[1] * 9))
    assert np.abs(w).max() <= 2 * std + 1e-7
    assert np.all(a["enc2.conv1.bias"] == 0)


@pytest.mark.parametrize("variant", sorted(M.VARIANTS))
def test_count_params_matches_built_network(variant):
    cfg = M.desk_config(variant)
    assert M.count_params(cfg) == M.build(cfg).n_params()


def test_width_scaling_is_quadratic():
    full = M.count_params(M.variant_config("sid"))
    half = M.count_params(M.variant_config("sid", width_scale=0.5))
    assert half / full == pytest.approx(0.25, abs=0.01)


def test_flops_scale_with_area():
    cfg = M.desk_config("gia")
    a = M.count_flops(cfg, (64, 64), packed=True)
    b = M.count_flops(cfg, (128, 128), packed=True)
    assert b / a == pytest.approx(4.0, rel=0.01)


def test_receptive_field_values():
    sid = M.desk_config("sid")
    assert M.bottleneck_receptive_field(sid) == 68
    assert M.bottleneck_receptive_field(M.desk_config("gia")) == math.inf
    assert M.bottleneck_receptive_field(M.desk_config("sid-dilated")) > 68
    lo, hi = M.bottleneck_support(sid, 31)
    assert hi - lo + 1 == 68


def test_plain_bottleneck_is_local_gia_is_global():
    rng = np.random.default_rng(0)
    x = rng.random((1, 4, 128, 128)).astype(np.float32)
    xp = x.copy()
    xp[0, :, 0, 0] += 1.0
    for variant in ("sid", "gia"):
        net = M.build(M.desk_config(variant))
        with T.no_grad():
            a = net.features(Tensor(x))["bottleneck"].data
            b = net.features(Tensor(xp))["bottleneck"].data
        diff = a != b
        if variant == "gia":
            assert np.all(np.any(diff, axis=1))
        else:
            n = a.shape[-1]
            reach = [i for i in range(n) if M.bottleneck_support(net.config, i)[0] <= 0]
            outside = np.ones((n, n), bool)
            outside[np.ix_(reach, reach)] = False
            assert not diff[0][:, outside].any()
            assert diff[0][:, ~outside].any()


@pytest.mark.parametrize("variant", ["gia", "sw", "sid-extra"])
def test_network_input_gradcheck(variant, rng):
    cfg = M.variant_config(variant, **TINY)
    net = M.build(cfg, seed=5)
    for p in net.parameters():
        p.requires_grad = False
    assert check_grad(lambda x: net(x), [rng.random((1, 4, 4, 4))], step=1e-3, dtype=np.float64) < 1e-5
    for p in net.parameters():
        p.requires_grad = True


@pytest.mark.parametrize("variant", ["gia", "sw"])
def test_network_parameter_gradients(variant, rng):
    net = M.build(M.variant_config(variant, **TINY), seed=6)
    x = rng.random((1, 4, 4, 4))
    w = rng.standard_normal((1, 3, 8, 8))
    with T.float64_mode():
        for p in net.parameters():
            p.data = p.data.astype(np.float64)
            p.data += 0.05 * rng.standard_normal(p.shape)  # move biases off zero

        def f(_):
            with T.no_grad():
                return float(np.sum(net(Tensor(x)).data * w))

        net.zero_grad()
        T.backward(T.total(T.mul(net(Tensor(x)), Tensor(w))))
        for name, p in net.params.items():
            coords = rng.choice(p.data.size, min(6, p.data.size), replace=False)
            num = numeric_grad(f, [p.data], 0, 1e-6, coords).reshape(-1)[coords]
            ana = p.grad.reshape(-1)[coords]
            assert np.allclose(num, ana, rtol=1e-4, atol=1e-6), name
