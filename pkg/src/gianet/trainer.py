"""Adam training loop, checkpoints, synthetic datasets and the ablation runner."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses
from .losses import SsimParams
from .models import ArchConfig, Network, build, desk_config, predict, variant_config
from .raw import BAYER, PACK_FACTOR, Sample, augment, preprocess, sample_rng, synth_scene
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "Checkpoint",
    "TrainResult",
    "DivergenceError",
    "adam_step",
    "lr_at",
    "train",
    "evaluate",
    "image_metrics",
    "synthetic_dataset",
    "cast_benchmark",
    "default_grid",
    "run_ablation",
    "save_checkpoint",
    "load_checkpoint",
]


class DivergenceError(RuntimeError):
    """Loss or parameters became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 0.1
    lr_decay_factor: float = 0.1
    epochs_per_phase: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 0.84
    seed: int = 0
    batch_size: int = 1
    patch_a: int = 32
    patch_b_min: int = 16
    patch_b_max: int = 32
    variable_patch: bool = True
    flips: bool = True
    variant: str = "gia"
    width_scale: float = 1.0
    depth: int = 5
    msssim_levels: int = 5
    max_steps: int = 0  # 0 -> run both phases to completion
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr_initial > 0:
            raise ValueError(f"lr_initial must be positive, got {self.lr_initial}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.epochs_per_phase < 1:
            raise ValueError(f"epochs_per_phase must be >= 1, got {self.epochs_per_phase}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_a < 0 or (self.patch_a and not 1 <= self.patch_b_min <= self.patch_b_max):
            raise ValueError("patch sizes need patch_a >= 0 and 1 <= patch_b_min <= patch_b_max")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ValueError("max_steps and checkpoint_every must be >= 0")

    def arch(self, in_ch: int = 4) -> ArchConfig:
        return variant_config(self.variant, in_ch, width_scale=self.width_scale, depth=self.depth)

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in asdict(self).items()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: str(f.type) for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ValueError(f"unknown TrainConfig key {key!r}")
            t = types[key]
            kw[key] = (value == "True") if t == "bool" else int(value) if t == "int" else float(value) if t == "float" else value
        return cls(**kw)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = np.float32(beta1) * m + np.float32(1.0 - beta1) * g
        v = np.float32(beta2) * v + np.float32(1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        p.data = (p.data - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps))).astype(np.float32)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Piecewise constant: lr_initial for the first phase, times the decay factor after."""
    return config.lr_initial if epoch < config.epochs_per_phase else config.lr_initial * config.lr_decay_factor


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"GIAC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    arch: ArchConfig
    train: TrainConfig
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]

    def network(self) -> Network:
        net = build(self.arch, self.train.seed)
        net.load_state_dict(self.params)
        return net

    def adam_state(self) -> AdamState:
        return AdamState({k: v.copy() for k, v in self.adam_m.items()}, {k: v.copy() for k, v in self.adam_v.items()}, self.step)


def _write_text(buf: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout: magic, u8 version, two u32-prefixed UTF-8 config texts,
    u64 step, u32 record count, then named f32 tensor records."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B", CKPT_VERSION))
    _write_text(buf, ckpt.arch.to_text())
    _write_text(buf, ckpt.train.to_text())
    buf.write(struct.pack("<Q", ckpt.step))
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    records += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    records += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_tensor(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<B")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    texts = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        texts.append(r.take(n).decode("utf-8"))
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(r.take(size), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise ValueError(f"{path}: unknown record {name!r}")
        groups[kind][key] = arr
    if r.pos != len(r.data):
        raise ValueError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Checkpoint(
        ArchConfig.from_text(texts[0]),
        TrainConfig.from_text(texts[1]),
        step,
        groups["param"],
        groups["adam_m"],
        groups["adam_v"],
    )


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    net: Network
    state: AdamState
    step: int
    config: TrainConfig
    log: list[dict] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.net.config,
            self.config,
            self.step,
            self.net.state_dict(),
            {k: v.copy() for k, v in self.state.m.items()},
            {k: v.copy() for k, v in self.state.v.items()},
        )

    @property
    def losses(self) -> list[float]:
        return [row["total"] for row in self.log]

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "l1_term", "msssim_term", "total", "lr"])
            w.writeheader()
            w.writerows(self.log)


def _batch(samples: Sequence[Sample]) -> tuple[Tensor, Tensor]:
    x = np.concatenate([s.input.tensor.data for s in samples], axis=0)
    y = np.concatenate([s.target for s in samples], axis=0)
    return Tensor(x), Tensor(y)


def _validate(config: TrainConfig, arch: ArchConfig, dataset: Sequence[Sample]) -> SsimParams:
    if not dataset:
        raise ValueError("training set is empty")
    m = 2 ** (arch.depth - 1)
    r = arch.out_factor
    for s in dataset:
        if s.input.tensor.shape[1] != arch.in_ch:
            raise ValueError(f"sample {s.ids!r} has {s.input.tensor.shape[1]} channels, model expects {arch.in_ch}")
    if config.patch_a:
        lo = config.patch_a * config.patch_b_min
        if config.patch_a % m:
            raise ValueError(f"patch_a={config.patch_a} must be a multiple of {m} for depth {arch.depth}")
        smallest = min(min(s.input.tensor.shape[2:]) for s in dataset)
        if smallest < lo:
            raise ValueError(f"smallest packed image side {smallest} < minimum patch {lo}")
        min_side = r * lo
    else:
        for s in dataset:
            h, w = s.input.tensor.shape[2:]
            if h % m or w % m:
                raise ValueError(f"sample {s.ids!r} packed size {h}x{w} not divisible by {m}")
        if config.batch_size > 1 and len({s.input.tensor.shape for s in dataset}) > 1:
            raise ValueError("uncropped batches need equally sized samples")
        min_side = min(min(s.target.shape[2:]) for s in dataset)
    params = SsimParams(levels=max(1, config.msssim_levels))
    if config.gamma < 1.0 and min_side < params.min_side:
        raise ValueError(
            f"MS-SSIM with {params.levels} levels needs target side >= {params.min_side}, "
            f"smallest training patch gives {min_side}; lower msssim_levels"
        )
    return params


def _step_batch(config: TrainConfig, dataset: Sequence[Sample], step: int) -> tuple[list[Sample], int]:
    """Deterministic batch for a global step: (samples, epoch)."""
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = sample_rng(config.seed, epoch).permutation(len(dataset))
    idx = order[pos * config.batch_size : (pos + 1) * config.batch_size]
    rng = sample_rng(config.seed, epoch, pos)
    if config.patch_a and config.variable_patch:
        b = int(rng.integers(config.patch_b_min, config.patch_b_max + 1))
    else:
        b = config.patch_b_max
    out = []
    for j, i in enumerate(idx):
        srng = sample_rng(config.seed, epoch, pos, j + 1)
        s = dataset[i]
        if config.patch_a:
            fit = min(s.input.tensor.shape[2:]) // config.patch_a
            bb = min(b, fit)
            s = augment(s, srng, config.patch_a, (bb, bb), None if config.flips else (False, False, False))
        elif config.flips:
            s = augment(s, srng, crop=False)
        out.append(s)
    if len({s.input.tensor.shape for s in out}) > 1:
        # clamped patches in a batch: crop all to the smallest
        side = min(s.input.tensor.shape[2] for s in out)
        out = [augment(s, srng, side, (1, 1), (False, False, False)) for s in out]
    return out, epoch


def train(
    config: TrainConfig,
    dataset: Sequence[Sample],
    arch: ArchConfig | None = None,
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
    callback: Callable[[int, losses.LossReport], None] | None = None,
) -> TrainResult:
    """Two-phase Adam training on the joint loss.

    One epoch is one pass over ``dataset`` in a seeded order with one random
    patch per sample. ``max_steps`` (if set) stops early. Every random draw is
    keyed by (seed, epoch, position), so a resumed run reproduces the
    uninterrupted one exactly.
    """
    if resume is not None:
        arch = resume.arch
        net = resume.network()
        state = resume.adam_state()
        step = resume.step
    else:
        in_ch = dataset[0].input.tensor.shape[1] if dataset else 4
        arch = arch or config.arch(in_ch)
        net = build(arch, config.seed)
        state = AdamState()
        step = 0
    ssim_params = _validate(config, arch, dataset)
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = 2 * config.epochs_per_phase * per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)
    result = TrainResult(net, state, step, config)
    while step < total_steps:
        samples, epoch = _step_batch(config, dataset, step)
        lr = lr_at(config, epoch)
        x, y = _batch(samples)
        net.zero_grad()
        report = losses.joint_loss(net(x), y, config.gamma, ssim_params)
        if not math.isfinite(report.total):
            raise DivergenceError(f"non-finite loss {report.total} at step {step} (epoch {epoch}, lr {lr})")
        backward(report.loss)
        grads = {k: p.grad for k, p in net.params.items() if p.grad is not None}
        adam_step(net.params, grads, state, lr, config.beta1, config.beta2, config.eps)
        for k, p in net.params.items():
            if not np.isfinite(p.data).all():
                raise DivergenceError(f"parameter {k} became non-finite at step {step}")
        step += 1
        result.step = step
        result.log.append(
            dict(step=step, l1_term=report.l1_term, msssim_term=report.msssim_term, total=report.total, lr=lr)
        )
        if callback is not None:
            callback(step, report)
        if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step{step:08d}.giac", result.checkpoint())
        if step % 50 == 0:
            logger.info("step %d epoch %d lr %.3g loss %.5f", step, epoch, lr, report.total)
    return result


def image_metrics(out: np.ndarray, target: np.ndarray, image_id="") -> dict:
    """PSNR, SSIM and MS-SSIM of one RGB pair (1, 3, H, W).

    MS-SSIM uses as many pyramid levels as the image holds, at most 5; it is
    NaN for images smaller than one window.
    """
    side = min(target.shape[2:])
    levels = min(5, losses.max_levels(side))
    a, b = Tensor(out), Tensor(target)
    return dict(
        image_id=image_id,
        psnr_db=losses.psnr(out, target),
        ssim=losses.ssim(a, b).item() if levels else math.nan,
        ms_ssim=losses.ms_ssim(a, b, SsimParams(levels=levels)).item() if levels else math.nan,
    )


def evaluate(net: Network, samples: Sequence[Sample]) -> list[dict]:
    """Per-sample metrics of the clamped predictions."""
    return [image_metrics(predict(net, s.input), s.target, s.ids) for s in samples]


# -- synthetic data --------------------------------------------------------


def synthetic_dataset(
    seed: int,
    n: int,
    size: int,
    cfa: str = BAYER,
    cast_range: float = 0.0,
    **scene_kw,
) -> list[Sample]:
    """``n`` preprocessed synthetic pairs; sample ``i`` uses stream (seed, i).

    ``cast_range`` > 0 adds a random per-channel offset in
    [-cast_range, cast_range] to each scene's radiance (targets stay clean),
    re-centred so the cast shifts the whole-image colour balance.
    """
    out = []
    long_s = scene_kw.pop("long_exposure_s", 10.0)
    for i in range(n):
        rng = sample_rng(seed, i)
        cast = rng.uniform(-cast_range, cast_range, 3) if cast_range > 0 else None
        frame, target = synth_scene(rng, size, cfa, long_exposure_s=long_s, cast=cast, **scene_kw)
        out.append(Sample(preprocess(frame, long_s), target, ids=f"synth-{seed}-{i:04d}"))
    return out


def cast_benchmark(seed: int, n_train: int = 8, n_test: int = 8, size: int = 128, cast_range: float = 0.25):
    """Train/test sets whose scenes carry a random global colour cast.

    Noise is kept low so the dominant error is the cast, which only
    whole-image statistics reveal.
    """
    kw = dict(cast_range=cast_range, ratio=100.0, read_noise=0.5, shot_gain=0.0)
    train_set = synthetic_dataset(seed * 2 + 1, n_train, size, **kw)
    test_set = synthetic_dataset(seed * 2 + 2, n_test, size, **kw)
    return train_set, test_set


# -- ablation --------------------------------------------------------------

ABLATION_FIELDS = ["no", "variant", "l1", "gia", "msssim", "aug", "extra_convs", "psnr", "ssim", "status"]


def default_grid() -> list[dict]:
    """The nine component combinations: backbone x MS-SSIM x augmentation, plus extra convs."""
    return [
        dict(variant="sid", loss="l1", aug=False),
        dict(variant="sid-extra", loss="l1", aug=False),
        dict(variant="sid", loss="joint", aug=False),
        dict(variant="sid", loss="l1", aug=True),
        dict(variant="sid", loss="joint", aug=True),
        dict(variant="gia", loss="l1", aug=False),
        dict(variant="gia", loss="joint", aug=False),
        dict(variant="gia", loss="l1", aug=True),
        dict(variant="gia", loss="joint", aug=True),
    ]


def run_ablation(
    grid: Sequence[dict],
    train_set: Sequence[Sample],
    test_set: Sequence[Sample],
    base: TrainConfig,
    csv_path=None,
) -> list[dict]:
    """Train every cell from the same seed and evaluate on ``test_set``.

    A failing cell yields a row with NaN metrics and the error in ``status``;
    the remaining cells still run.
    """
    in_ch = train_set[0].input.tensor.shape[1]
    rows = []
    for no, cell in enumerate(grid, start=1):
        variant = cell["variant"]
        loss = cell.get("loss", "joint")
        aug = bool(cell.get("aug", True))
        row = dict(
            no=no,
            variant=variant,
            l1=1,
            gia=int(variant.startswith("gia")),
            msssim=int(loss == "joint"),
            aug=int(aug),
            extra_convs=int(variant == "sid-extra"),
            psnr=math.nan,
            ssim=math.nan,
            status="ok",
        )
        try:
            gamma = base.gamma if loss == "joint" else 1.0
            cfg = _replace(base, variant=variant, gamma=gamma, variable_patch=aug)
            arch = desk_config(variant, in_ch, width_scale=base.width_scale, depth=base.depth)
            res = train(cfg, train_set, arch=arch)
            metrics = evaluate(res.net, test_set)
            row["psnr"] = float(np.mean([m["psnr_db"] for m in metrics]))
            row["ssim"] = float(np.mean([m["ssim"] for m in metrics]))
        except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the grid
            logger.exception("ablation cell %d (%s) failed", no, variant)
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        rows.append(row)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
            w.writeheader()
            w.writerows(rows)
    return rows


def _replace(cfg: TrainConfig, **kw) -> TrainConfig:
    d = asdict(cfg)
    d.update(kw)
    return TrainConfig(**d)
