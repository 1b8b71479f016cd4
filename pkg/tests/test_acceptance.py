"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary. Criteria 6 and 7 train small models and take minutes.
"""

import math
import time

import numpy as np
import pytest

from gianet import cli, losses, models, nn, raw, trainer
from gianet import tensor as T
from gianet.losses import SsimParams
from gianet.nn import Conv2dSpec
from gianet.raw import BAYER, XTRANS, RawFrame
from gianet.tensor import Tensor

from gradcheck import check_grad

RESULTS = []


def verdict(no, ok, what, detail):
    line = f"criterion {no}: {'PASS' if ok else 'FAIL'}  {what}  [{detail}]"
    RESULTS.append(line)
    print(line)
    return ok


# -- 1. cost claims ------------------------------------------------------------


def test_1_cost_claims(capsys):
    t0 = time.perf_counter()
    assert cli.main(["count", "--variant", "sid", "--in-ch", "4", "--res", "4240x2832"]) == 0
    assert cli.main(["count", "--variant", "gia", "--in-ch", "4", "--res", "4240x2832"]) == 0
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    sid = models.variant_config("sid")
    gia = models.variant_config("gia")
    p_sid, p_gia = models.count_params(sid), models.count_params(gia)
    f_sid = models.count_flops(sid, "4240x2832")
    f_gia = models.count_flops(gia, "4240x2832")
    pr, fr = p_gia / p_sid, f_gia / f_sid
    ok = (
        abs(p_sid - 7.76e6) <= 0.01 * 7.76e6
        and abs(f_sid - 1112.92e9) <= 0.10 * 1112.92e9
        and abs(pr - 1.07) <= 0.01
        and abs(fr - 1.008) <= 0.002
        and elapsed < 1.0
    )
    verdict(
        1, ok, "count: sid params 7.76M +-1%, gia ratios 1.07x +-0.01 / 1.008x +-0.002",
        f"sid {p_sid / 1e6:.3f}M {f_sid / 1e9:.2f}G; ratios {pr:.4f}x {fr:.5f}x; {elapsed:.2f}s",
    )
    assert ok


# -- 2. gradients --------------------------------------------------------------


def _pos(rng, shape, lo=0.2, hi=1.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _grad_cases(rng):
    s = (1, 2, 4, 4)
    taps = losses.gaussian_taps(5, 1.0)
    spec1 = Conv2dSpec(2, 3)
    spec2 = Conv2dSpec(2, 3, dilation=2)
    p2 = SsimParams(levels=2)
    y16 = rng.random((1, 2, 16, 16))
    y24 = rng.random((1, 2, 24, 24))
    return [
        ("add", T.add, [rng.standard_normal(s), rng.standard_normal(s)]),
        ("sub", T.sub, [rng.standard_normal(s), rng.standard_normal(s)]),
        ("mul", T.mul, [rng.standard_normal(s), rng.standard_normal(s)]),
        ("div", T.div, [rng.standard_normal(s), _pos(rng, s, 0.5, 2.0)]),
        ("scalar_mul", lambda a: T.scalar_mul(a, 1.7), [rng.standard_normal(s)]),
        ("add_scalar", lambda a: T.add_scalar(a, 0.3), [rng.standard_normal(s)]),
        ("neg", T.neg, [rng.standard_normal(s)]),
        ("square", T.square, [rng.standard_normal(s)]),
        ("absolute", T.absolute, [_pos(rng, s)]),
        ("clamp_min", lambda a: T.clamp_min(a, 0.0), [_pos(rng, s)]),
        ("total", T.total, [rng.standard_normal(s)]),
        ("mean", T.mean, [rng.standard_normal(s)]),
        ("conv2d", lambda x, w, b: nn.conv2d(x, spec1, w, b),
         [rng.standard_normal(s), rng.standard_normal(spec1.weight_shape), rng.standard_normal((1, 3, 1, 1))]),
        ("conv2d dilated", lambda x, w, b: nn.conv2d(x, spec2, w, b),
         [rng.standard_normal(s), rng.standard_normal(spec2.weight_shape), rng.standard_normal((1, 3, 1, 1))]),
        ("conv2d_transposed", nn.conv2d_transposed,
         [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((1, 3, 1, 1))]),
        ("maxpool2x2", nn.maxpool2x2, [rng.permutation(32).reshape(s) * 0.1]),
        ("avgpool2x2", nn.avgpool2x2, [rng.standard_normal(s)]),
        ("global_avg_pool", nn.global_avg_pool, [rng.standard_normal(s)]),
        ("bilinear_upsample", lambda x: nn.bilinear_upsample(x, (5, 7)), [rng.standard_normal((1, 2, 2, 3))]),
        ("concat_channels", nn.concat_channels, [rng.standard_normal(s), rng.standard_normal((1, 3, 4, 4))]),
        ("slice_channels", lambda x: nn.slice_channels(x, 1, 3), [rng.standard_normal((1, 4, 4, 4))]),
        ("depth_to_space", lambda x: nn.depth_to_space(x, 2), [rng.standard_normal((1, 8, 2, 2))]),
        ("space_to_depth", lambda x: nn.space_to_depth(x, 2), [rng.standard_normal(s)]),
        ("leaky_relu", nn.leaky_relu, [_pos(rng, s)]),
        ("gaussian_filter", lambda x: nn.gaussian_filter(x, taps), [rng.standard_normal((1, 2, 6, 6))]),
        ("ssim", lambda x: losses.ssim(x, Tensor(y16)), [rng.random((1, 2, 16, 16))]),
        ("ms_ssim", lambda x: losses.ms_ssim(x, Tensor(y24), p2), [rng.random((1, 2, 24, 24))]),
        ("l1_loss", lambda x: losses.l1_loss(x, Tensor(y16)), [y16 + _pos(rng, y16.shape, 0.05, 0.2)]),
    ], p2


def _directional_error(fn, x, n_dirs=3, step=1e-1, seed=0):
    """Compare grad . u with a central difference along directions u.

    Each u mixes the unit gradient with a unit random vector. A purely random
    u is nearly orthogonal to the gradient in 12k dimensions, and the
    difference then drowns in f32 rounding.
    """
    rng = np.random.default_rng(seed)
    leaf = Tensor(x.astype(np.float32), requires_grad=True)
    T.backward(fn(leaf))
    g = leaf.grad.astype(np.float64)
    worst = 0.0
    for _ in range(n_dirs):
        r = rng.standard_normal(x.shape)
        u = g / np.linalg.norm(g) + r / np.linalg.norm(r)
        u /= np.linalg.norm(u)
        with T.no_grad():
            fp = fn(Tensor((x + step * u).astype(np.float32))).item()
            fm = fn(Tensor((x - step * u).astype(np.float32))).item()
        num = (fp - fm) / (2 * step)
        ana = float(np.sum(leaf.grad.astype(np.float64) * u))
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return worst


def test_2_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cases, p2 = _grad_cases(rng)
    errors = {}
    for name, fn, arrays in cases:
        errors[name] = check_grad(fn, arrays, step=1e-2 if "ssim" in name else 1e-3)
    # full joint loss on 64x64 pairs with a two-level pyramid
    y = rng.random((1, 3, 64, 64))
    x = y + rng.choice([-1, 1], y.shape) * rng.uniform(0.05, 0.2, y.shape)
    joint = lambda o: losses.joint_loss(o, Tensor(y), 0.84, p2).loss  # noqa: E731
    errors["joint_loss coords"] = check_grad(joint, [x], step=1e-2, max_coords=400)
    errors["joint_loss directions"] = _directional_error(joint, x)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-2 for e in errors.values()) and elapsed < 120
    verdict(2, ok, f"central differences, {len(errors)} checks at rel tol 1e-2 (f32)",
            f"worst {worst} {errors[worst]:.2e}; {elapsed:.1f}s")
    assert ok, errors


# -- 3. loss identities --------------------------------------------------------


def test_3_loss_identities():
    rng = np.random.default_rng(3)
    x = rng.random((1, 3, 176, 176))
    j0 = losses.joint_loss(x, x).total
    ms1 = losses.ms_ssim(x, x).item()

    data = trainer.synthetic_dataset(3, 2, 64)
    cfg = trainer.TrainConfig(lr_initial=1e-4, variant="gia", width_scale=0.25, depth=4, gamma=1.0,
                              patch_a=8, patch_b_min=2, patch_b_max=4, msssim_levels=2, max_steps=1)
    res = trainer.train(cfg, data)
    net = models.build(cfg.arch(), cfg.seed)
    samples, _ = trainer._step_batch(cfg, data, 0)
    xb, yb = trainer._batch(samples)
    T.backward(losses.l1_loss(net(xb), yb))
    trainer.adam_step(net.params, {k: p.grad for k, p in net.params.items()}, trainer.AdamState(), cfg.lr_initial)
    upd = max(float(np.max(np.abs(net.params[k].data - res.net.params[k].data))) for k in net.params)

    sub = losses.weighted_total(0.1, 0.5, 0.84)
    checks = {
        "joint(x,x)=0": abs(j0) <= 1e-6,
        "ms_ssim(x,x)=1": abs(ms1 - 1) <= 1e-6,
        "gamma=1 updates = l1-only": upd <= 1e-7,
        "substitution = 0.244": sub == 0.244,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(3, ok, "joint(x,x)=0, ms_ssim(x,x)=1, gamma=1 update equality, 0.84/0.1/0.5 -> 0.244",
            f"joint {j0:.1e}, ms {ms1:.8f}, max update diff {upd:.1e}, substitution gives {sub:.6f}"
            + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok, checks


# -- 4. packing ----------------------------------------------------------------


def test_4_packing_bijective():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    bad = 0
    channels = {}
    for cfa in (BAYER, XTRANS):
        p = raw.CFA_PERIOD[cfa]
        for _ in range(1000):
            h, w = p * int(rng.integers(1, 6)), p * int(rng.integers(1, 6))
            m = rng.integers(0, 65536, (h, w), dtype=np.uint16)
            packed = raw.pack(RawFrame(m, cfa, 0, 65535, 1.0))
            channels[cfa] = packed.shape[1]
            bad += raw.unpack(packed, cfa).tobytes() != m.tobytes()
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and channels == {BAYER: 4, XTRANS: 9}
    verdict(4, ok, "1000 Bayer + 1000 X-Trans frames round-trip bit-exactly; 4 / 9 channels",
            f"{bad} mismatches, channels {channels}, {elapsed:.1f}s")
    assert ok


# -- 5. globality --------------------------------------------------------------


def test_5_globality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    x = rng.random((1, 4, 256, 256)).astype(np.float32)
    xp = x.copy()
    xp[0, :, 0, 0] += 1.0
    out = {}
    for variant in ("gia", "sid"):
        net = models.build(models.desk_config(variant))
        with T.no_grad():
            a = net.features(Tensor(x))["bottleneck"].data
            b = net.features(Tensor(xp))["bottleneck"].data
        out[variant] = (net.config, a, b)
    _, a, b = out["gia"]
    gia_delta = float(np.max(np.abs(a[0, :, -1, -1] - b[0, :, -1, -1])))
    cfg, a, b = out["sid"]
    n = a.shape[-1]
    reach = [i for i in range(n) if models.bottleneck_support(cfg, i)[0] <= 0]
    outside = np.ones((n, n), bool)
    outside[np.ix_(reach, reach)] = False
    sid_unchanged = a[0][:, outside].tobytes() == b[0][:, outside].tobytes()
    elapsed = time.perf_counter() - t0
    ok = gia_delta > 0 and sid_unchanged and elapsed < 60
    verdict(5, ok, "corner perturbation reaches the opposite GIA bottleneck corner; sid unchanged outside its RF",
            f"gia |delta| {gia_delta:.3e}; sid RF {models.bottleneck_receptive_field(cfg)} px, "
            f"{int(outside.sum())}/{n * n} positions bit-identical: {sid_unchanged}; {elapsed:.1f}s")
    assert ok


# -- 6. desk-scale learning ----------------------------------------------------

# Threshold from the criterion: final joint loss below 20% of the initial one.
# Pilot with this exact setup: ratio 0.749 at 200 steps, 0.259 at 2000 steps;
# lr 1e-3 crosses 0.20 between 300 and 400 steps. Expected to fail as stated.
OVERFIT_RATIO = 0.20
OVERFIT_STEPS = 200
OVERFIT_LR = 1e-4


def _set_loss(net, samples, gamma, params):
    vals = []
    with T.no_grad():
        for s in samples:
            vals.append(losses.joint_loss(net(s.input.tensor), Tensor(s.target), gamma, params).total)
    return float(np.mean(vals))


def test_6_desk_overfit():
    t0 = time.perf_counter()
    data = trainer.synthetic_dataset(6, 8, 128, read_noise=0.5, shot_gain=0.0)
    cfg = trainer.TrainConfig(lr_initial=OVERFIT_LR, variant="gia", width_scale=0.25, depth=4, patch_a=0,
                              flips=False, msssim_levels=3, max_steps=OVERFIT_STEPS, seed=6)
    params = SsimParams(levels=3)
    initial = _set_loss(models.build(cfg.arch(), cfg.seed), data, cfg.gamma, params)
    res = trainer.train(cfg, data)
    final = _set_loss(res.net, data, cfg.gamma, params)
    ratio = final / initial
    elapsed = time.perf_counter() - t0
    ok = ratio < OVERFIT_RATIO and elapsed < 600
    verdict(6, ok, f"desk GIA overfits 8 pairs: loss < {OVERFIT_RATIO:.0%} of initial in {OVERFIT_STEPS} steps at lr 1e-4",
            f"initial {initial:.4f}, final {final:.4f}, ratio {ratio:.3f}; {elapsed:.0f}s")
    assert ok


# -- 7. direction of effect ----------------------------------------------------

CAST_SEEDS = 7
CAST_STEPS = 4000
CAST_SIZE = 128
# Pilot, seed 0, held-out PSNR sid/gia: 2000 steps 15.98/15.22, 4000 steps 16.94/17.31,
# 8000 steps 18.64/18.64. Naive demosaic baseline 19.05.


def sign_test_p(wins, n):
    """One-sided P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


def test_7_cast_benchmark():
    t0 = time.perf_counter()
    diffs = []
    for seed in range(CAST_SEEDS):
        train_set, test_set = trainer.cast_benchmark(seed, 8, 8, CAST_SIZE)
        score = {}
        for variant in ("sid", "gia"):
            cfg = trainer.TrainConfig(lr_initial=1e-4, variant=variant, width_scale=0.25, depth=4, gamma=1.0,
                                      patch_a=0, msssim_levels=1, max_steps=CAST_STEPS, seed=seed)
            res = trainer.train(cfg, train_set)
            score[variant] = float(np.mean([m["psnr_db"] for m in trainer.evaluate(res.net, test_set)]))
        diffs.append(score["gia"] - score["sid"])
    wins = sum(d > 0 for d in diffs)
    p = sign_test_p(wins, len(diffs))
    elapsed = time.perf_counter() - t0
    ok = float(np.mean(diffs)) >= 0 and p < 0.1
    verdict(7, ok, f"gia-l1 >= sid-l1 mean PSNR on the colour-cast benchmark, {CAST_SEEDS} paired seeds, sign test p < 0.1",
            f"mean diff {np.mean(diffs):+.3f} dB, wins {wins}/{len(diffs)}, p {p:.3f}; "
            f"diffs {' '.join(f'{d:+.2f}' for d in diffs)}; {elapsed:.0f}s")
    assert ok


# -- 8. determinism and persistence --------------------------------------------


def test_8_determinism(tmp_path):
    data = trainer.synthetic_dataset(8, 3, 64)
    cfg = trainer.TrainConfig(lr_initial=1e-4, variant="gia", width_scale=0.25, depth=4, patch_a=8,
                              patch_b_min=2, patch_b_max=4, msssim_levels=2, max_steps=12)
    a = trainer.train(cfg, data)
    b = trainer.train(cfg, data)
    curves = a.log == b.log

    half = trainer.train(trainer._replace(cfg, max_steps=6), data)
    trainer.save_checkpoint(tmp_path / "half.giac", half.checkpoint())
    resumed = trainer.train(cfg, data, resume=trainer.load_checkpoint(tmp_path / "half.giac"))
    resume_ok = all(a.net.params[k].data.tobytes() == resumed.net.params[k].data.tobytes() for k in a.net.params)
    resume_ok = resume_ok and resumed.log == a.log[6:]

    trainer.save_checkpoint(tmp_path / "a.giac", a.checkpoint())
    trainer.save_checkpoint(tmp_path / "b.giac", trainer.load_checkpoint(tmp_path / "a.giac"))
    ckpt_ok = (tmp_path / "a.giac").read_bytes() == (tmp_path / "b.giac").read_bytes()

    m = np.random.default_rng(8).integers(0, 65536, (12, 12), dtype=np.uint16)
    m[0, :2] = (0, 65535)
    frame = RawFrame(m, XTRANS, 512.0, 16383.0, 0.1)
    raw.write_container(tmp_path / "f.giar", frame)
    raw.write_container(tmp_path / "g.giar", raw.read_container(tmp_path / "f.giar"))
    cont_ok = (tmp_path / "f.giar").read_bytes() == (tmp_path / "g.giar").read_bytes()
    cont_ok = cont_ok and raw.read_container(tmp_path / "f.giar").mosaic.tobytes() == m.tobytes()

    ok = curves and resume_ok and ckpt_ok and cont_ok
    verdict(8, ok, "fixed-seed curves identical; resume bit-exact; container and checkpoint round-trips bit-exact",
            f"curves {curves}, resume {resume_ok}, checkpoint {ckpt_ok}, container {cont_ok}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
