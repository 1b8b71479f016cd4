"""Command-line entry point: ``gianet <command> [flags]``.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 numerical divergence.
Set ``GIA_DETERMINISTIC=1`` to force single-threaded BLAS reductions.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import models, raw, trainer
from .raw import BAYER, XTRANS, PackedInput, RawFrame, Sample

log = logging.getLogger("gianet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SHORT_SUFFIX = ".short.giar"
LONG_SUFFIX = ".long.giar"
PRED_SUFFIX = ".pred.giar"
EVAL_HEADER = "# ssim and ms_ssim: mean over RGB channels computed separately; gaussian window 11, sigma 1.5"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ---------------------------------------------------------------


def image_id(path: Path) -> str:
    return path.name.split(".")[0]


def read(path) -> object:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        return raw.read_container(path)
    except raw.ContainerError as exc:
        raise DataError(str(exc)) from exc


def to_packed(obj, target_exposure_s: float, ratio_cap: float, path) -> PackedInput:
    if isinstance(obj, RawFrame):
        return raw.preprocess(obj, target_exposure_s, ratio_cap)
    if isinstance(obj, PackedInput):
        return obj
    raise DataError(f"{path}: expected a raw or packed container, found an RGB image")


def load_pairs(folder, target_exposure_s: float, ratio_cap: float = raw.DEFAULT_RATIO_CAP) -> list[Sample]:
    """Pairs ``<id>.short.giar`` (raw or packed) with ``<id>.long.giar`` (RGB)."""
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"no such directory: {folder}")
    shorts = sorted(folder.glob("*" + SHORT_SUFFIX))
    if not shorts:
        raise DataError(f"{folder}: no *{SHORT_SUFFIX} files")
    out = []
    for sp in shorts:
        key = image_id(sp)
        packed = to_packed(read(sp), target_exposure_s, ratio_cap, sp)
        lp = folder / (key + LONG_SUFFIX)
        target = read(lp)
        if not isinstance(target, np.ndarray):
            raise DataError(f"{lp}: expected an RGB image")
        try:
            out.append(Sample(packed, target[None], ids=key))
        except ValueError as exc:
            raise DataError(f"{sp}: {exc}") from exc
    return out


def train_config(args, **extra) -> trainer.TrainConfig:
    gamma = args.gamma
    if args.variant == "gia-l1":
        if gamma is not None and gamma != 1.0:
            raise UsageError("variant gia-l1 is trained with --gamma 1")
        gamma = 1.0
    try:
        models.variant_config(args.variant)
        return trainer.TrainConfig(
            lr_initial=args.lr,
            lr_decay_factor=args.lr_decay,
            epochs_per_phase=args.epochs_per_phase,
            gamma=0.84 if gamma is None else gamma,
            seed=args.seed,
            batch_size=args.batch_size,
            patch_a=args.patch_a,
            patch_b_min=args.patch_b_min,
            patch_b_max=args.patch_b_max,
            variable_patch=not args.fixed_patch,
            flips=not args.no_flips,
            variant=args.variant,
            width_scale=args.width_scale,
            depth=args.depth,
            msssim_levels=args.msssim_levels,
            max_steps=args.max_steps,
            **extra,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def write_metrics(path, rows: list[dict]) -> dict:
    fields = ["image_id", "psnr_db", "ssim", "ms_ssim"]
    mean = {"image_id": "mean"}
    for k in fields[1:]:
        mean[k] = float(np.mean([r[k] for r in rows]))
    with open(path, "w", newline="") as fh:
        fh.write(EVAL_HEADER + "\n")
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows + [mean]:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and math.isfinite(v) else v) for k, v in r.items()})
    return mean


def to_u8(rgb: np.ndarray) -> bytes:
    """(3, H, W) in [0, 1] -> interleaved H x W x 3 bytes."""
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0).tobytes()


# -- commands --------------------------------------------------------------


def cmd_preprocess(args) -> int:
    frame = read(args.input)
    if not isinstance(frame, RawFrame):
        raise DataError(f"{args.input}: expected a raw mosaic container")
    try:
        packed = raw.preprocess(frame, args.target_exposure, args.ratio_cap)
    except ValueError as exc:
        raise DataError(f"{args.input}: {exc}") from exc
    raw.write_container(args.out, packed)
    _, c, h, w = packed.tensor.shape
    print(f"ratio {packed.ratio:g}")
    print(f"packed {frame.cfa} {c} channels {h}x{w} -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        rng = raw.sample_rng(args.seed, i)
        cast = rng.uniform(-args.cast_range, args.cast_range, 3) if args.cast_range > 0 else None
        try:
            frame, target = raw.synth_scene(
                rng, args.size, args.cfa, ratio=args.ratio, read_noise=args.read_noise,
                shot_gain=args.shot_gain, long_exposure_s=args.target_exposure, cast=cast,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        key = f"synth-{args.seed}-{i:04d}"
        raw.write_container(out / (key + SHORT_SUFFIX), frame)
        raw.write_container(out / (key + LONG_SUFFIX), target)
    print(f"wrote {args.n} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = train_config(args, checkpoint_every=args.checkpoint_every)
    resume = None
    if args.resume:
        if not Path(args.resume).exists():
            raise DataError(f"no such file: {args.resume}")
        try:
            resume = trainer.load_checkpoint(args.resume)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    data = load_pairs(args.data, args.target_exposure)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = trainer.train(cfg, data, resume=resume, checkpoint_dir=out)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    trainer.save_checkpoint(out / "final.giac", result.checkpoint())
    result.write_log(out / "loss.csv")
    last = result.log[-1]["total"] if result.log else float("nan")
    print(f"trained {result.step} steps, final loss {last:.6f} -> {out / 'final.giac'}")
    return EXIT_OK


def _predict_all(net, samples, workers: int) -> list[np.ndarray]:
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda s: models.predict(net, s.input), samples))
    return [models.predict(net, s.input) for s in samples]


def _metrics_all(pairs, workers: int) -> list[dict]:
    fn = lambda p: trainer.image_metrics(p[1], p[2], p[0])  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, pairs))
    return [fn(p) for p in pairs]


def _load_checkpoint(path):
    if not Path(path).exists():
        raise DataError(f"no such file: {path}")
    try:
        return trainer.load_checkpoint(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(args) -> int:
    if args.checkpoint:
        if not args.data:
            raise UsageError("--checkpoint needs --data")
        net = _load_checkpoint(args.checkpoint).network()
        samples = load_pairs(args.data, args.target_exposure)
        preds = _predict_all(net, samples, args.workers)
        pairs = [(s.ids, p, s.target) for s, p in zip(samples, preds)]
    else:
        if not (args.pred and args.target):
            raise UsageError("give --checkpoint/--data or --pred/--target")
        pred_dir, target_dir = Path(args.pred), Path(args.target)
        for d in (pred_dir, target_dir):
            if not d.is_dir():
                raise DataError(f"no such directory: {d}")
        targets = {image_id(p): p for p in sorted(target_dir.glob("*.giar")) if p.name.endswith(LONG_SUFFIX) or "." not in p.stem}
        preds = {image_id(p): p for p in sorted(pred_dir.glob("*.giar")) if not p.name.endswith(SHORT_SUFFIX)}
        keys = sorted(set(targets) & set(preds))
        if not keys:
            raise DataError(f"no matching prediction/target ids between {pred_dir} and {target_dir}")
        pairs = []
        for k in keys:
            a, b = read(preds[k]), read(targets[k])
            if not (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)) or a.shape != b.shape:
                raise DataError(f"{k}: prediction and target must be RGB images of equal size")
            pairs.append((k, a[None], b[None]))
    rows = _metrics_all(pairs, args.workers)
    mean = write_metrics(args.out, rows)
    print(f"{len(rows)} images: psnr {mean['psnr_db']:.3f} dB, ssim {mean['ssim']:.4f}, ms_ssim {mean['ms_ssim']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    net = _load_checkpoint(args.checkpoint).network()
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.glob("*.giar") if not p.name.endswith(LONG_SUFFIX))
        if not files:
            raise DataError(f"{src}: no input containers")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [(f, out_dir / (image_id(f) + PRED_SUFFIX)) for f in files]
    else:
        jobs = [(src, Path(args.out))]
    for f, dest in jobs:
        packed = to_packed(read(f), args.target_exposure, args.ratio_cap, f)
        try:
            net.check_input(packed.tensor)
        except ValueError as exc:
            raise DataError(f"{f}: {exc}") from exc
        rgb = models.predict(net, packed)[0]
        raw.write_container(dest, rgb)
        if args.u8:
            u8 = Path(args.u8)
            if len(jobs) > 1:
                u8.mkdir(parents=True, exist_ok=True)
                u8 = u8 / (image_id(f) + ".rgb8")
            u8.write_bytes(to_u8(rgb))
            print(f"{u8}: {rgb.shape[2]}x{rgb.shape[1]} RGB8")
        print(f"{f} -> {dest}")
    return EXIT_OK


def cmd_count(args) -> int:
    try:
        cfg = models.variant_config(args.variant, args.in_ch, width_scale=args.width_scale, depth=args.depth)
        base = models.variant_config("sid", args.in_ch, width_scale=args.width_scale, depth=args.depth)
        rep = models.cost_report(cfg, args.res, packed=args.packed)
        ref = models.cost_report(base, args.res, packed=args.packed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(rep.to_table())
    print(f"params {rep.params} ({rep.params / 1e6:.2f}M), flops {rep.flops} ({rep.flops / 1e9:.2f}G) at {args.res}")
    print(f"vs sid: params {rep.params / ref.params:.2f}x, flops {rep.flops / ref.flops:.3f}x")
    if args.width_scale != 1.0:
        full = models.count_params(models.variant_config(args.variant, args.in_ch, depth=args.depth))
        print(f"vs full width: params {rep.params / full:.3f}x")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.grid != "default":
        raise UsageError(f"unknown grid {args.grid!r}")
    args.variant = "gia"
    base = train_config(args)
    if args.data:
        train_set = load_pairs(args.data, args.target_exposure)
        test_set = load_pairs(args.test or args.data, args.target_exposure)
    else:
        train_set = trainer.synthetic_dataset(args.seed, args.n_train, args.size)
        test_set = trainer.synthetic_dataset(args.seed + 1, args.n_test, args.size)
    rows = trainer.run_ablation(trainer.default_grid(), train_set, test_set, base, args.out)
    for r in rows:
        print(f"{r['no']:>2} {r['variant']:<10} msssim={r['msssim']} aug={r['aug']} psnr={r['psnr']:.3f} ssim={r['ssim']:.4f} {r['status']}")
    print(f"-> {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _train_flags(p):
    p.add_argument("--variant", default="gia", help="sid, sid-dilated, sw, gia, gia-l1, sid-extra")
    p.add_argument("--lr", type=float, default=0.1, help="initial learning rate (default 0.1; 1e-4 works at desk scale)")
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--epochs-per-phase", type=int, default=2000)
    p.add_argument("--gamma", type=float, default=None, help="l1 weight in the joint loss (default 0.84)")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--patch-a", type=int, default=32, help="0 trains on whole images")
    p.add_argument("--patch-b-min", type=int, default=16)
    p.add_argument("--patch-b-max", type=int, default=32)
    p.add_argument("--fixed-patch", action="store_true", help="always use patch-b-max")
    p.add_argument("--no-flips", action="store_true")
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--msssim-levels", type=int, default=5)
    p.add_argument("--max-steps", type=int, default=0)
    p.add_argument("--target-exposure", type=float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="gianet", description="Low-light raw-to-RGB restoration with global context.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.set_defaults(func=fn)
        return p

    p = add("preprocess", cmd_preprocess, "pack, normalise and amplify a raw container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--target-exposure", type=float, default=10.0)
    p.add_argument("--ratio-cap", type=float, default=raw.DEFAULT_RATIO_CAP)
    p.add_argument("--out", required=True)

    p = add("synth", cmd_synth, "generate synthetic short/long pairs")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--cfa", choices=[BAYER, XTRANS], default=BAYER)
    p.add_argument("--ratio", type=float, default=100.0)
    p.add_argument("--read-noise", type=float, default=2.0)
    p.add_argument("--shot-gain", type=float, default=1.0)
    p.add_argument("--cast-range", type=float, default=0.0)
    p.add_argument("--target-exposure", type=float, default=10.0)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a model on a folder of pairs")
    _train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume")

    p = add("eval", cmd_eval, "PSNR / SSIM / MS-SSIM table")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--pred")
    p.add_argument("--target")
    p.add_argument("--target-exposure", type=float, default=10.0)
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "run a checkpoint on raw or packed containers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--u8", help="also write interleaved 8-bit RGB bytes here")
    p.add_argument("--target-exposure", type=float, default=10.0)
    p.add_argument("--ratio-cap", type=float, default=raw.DEFAULT_RATIO_CAP)

    p = add("count", cmd_count, "parameter and FLOP table")
    p.add_argument("--variant", default="gia")
    p.add_argument("--in-ch", type=int, default=4)
    p.add_argument("--res", default="4240x2832", help="WxH sensor resolution")
    p.add_argument("--packed", action="store_true", help="--res is already the packed resolution")
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--depth", type=int, default=5)

    p = add("ablate", cmd_ablate, "train the component grid and write a CSV")
    _train_flags(p)
    p.set_defaults(lr=1e-4, width_scale=0.25, depth=4, patch_a=8, patch_b_min=2, patch_b_max=4,
                   msssim_levels=2, max_steps=50)
    p.add_argument("--grid", default="default")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--n-train", type=int, default=4)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = 1 if os.environ.get("GIA_DETERMINISTIC") == "1" else max(1, args.workers)
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"gianet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"gianet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except trainer.DivergenceError as exc:
        print(f"gianet {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
