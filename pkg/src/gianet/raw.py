"""Sensor-raw ingestion: packing, normalization, augmentation, synthetic scenes.

Also defines the ``GIAR`` container used to move raw frames, packed inputs
and RGB images between commands. Layout (all little-endian)::

    magic  b"GIAR"
    u8     version (1)
    u8     kind    0 = raw mosaic, 1 = RGB image, 2 = packed network input
    u8     cfa     0 = none, 1 = Bayer, 2 = X-Trans
    u32    h, w    payload spatial size
    f32    black_level, white_level, exposure_s
    payload  u16 (h, w) for kind 0; f32 CHW for kinds 1 and 2

Kind 2 stores the packed channels (4 for Bayer, 9 for X-Trans) and reuses
``exposure_s`` for the amplification ratio; black/white are 0 and 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .nn import interp_matrix
from .tensor import Tensor

BAYER = "bayer"
XTRANS = "xtrans"
CFA_KINDS = (BAYER, XTRANS)

# packing factor and channel count per CFA
PACK_FACTOR = {BAYER: 2, XTRANS: 3}
PACKED_CHANNELS = {BAYER: 4, XTRANS: 9}
# mosaic divisibility (X-Trans repeats every 6 pixels)
CFA_PERIOD = {BAYER: 2, XTRANS: 6}

# Colour index (0=R, 1=G, 2=B) per CFA site.
BAYER_PATTERN = np.array([[0, 1], [1, 2]])
XTRANS_PATTERN = np.array(
    [
        [1, 1, 0, 1, 1, 2],
        [1, 1, 2, 1, 1, 0],
        [2, 0, 1, 0, 2, 1],
        [1, 1, 2, 1, 1, 0],
        [1, 1, 0, 1, 1, 2],
        [0, 2, 1, 2, 0, 1],
    ]
)
# Bayer channel order: R (0,0), G1 (0,1), B (1,1), G2 (1,0)
BAYER_PHASES = ((0, 0), (0, 1), (1, 1), (1, 0))

DEFAULT_RATIO_CAP = 300.0


class ContainerError(ValueError):
    """Base class for GIAR container problems."""


class ContainerFormatError(ContainerError):
    """Bad magic, unknown version or unknown kind/CFA code."""


class ContainerTruncatedError(ContainerError):
    """File ended before the header or payload was complete."""


class ContainerConsistencyError(ContainerError):
    """Header fields contradict each other or the payload length."""


@dataclass
class RawFrame:
    mosaic: np.ndarray
    cfa: str
    black_level: float
    white_level: float
    exposure_s: float

    def __post_init__(self):
        self.mosaic = np.asarray(self.mosaic)
        if self.mosaic.ndim != 2:
            raise ValueError(f"mosaic must be 2-D, got shape {self.mosaic.shape}")
        if self.mosaic.dtype != np.uint16:
            raise ValueError(f"mosaic must be uint16, got {self.mosaic.dtype}")
        if self.cfa not in CFA_KINDS:
            raise ValueError(f"unknown CFA {self.cfa!r}; expected one of {CFA_KINDS}")
        p = CFA_PERIOD[self.cfa]
        h, w = self.mosaic.shape
        if h % p or w % p:
            raise ValueError(f"{self.cfa} mosaic dims must be divisible by {p}, got {h}x{w}")
        if not self.black_level < self.white_level:
            raise ValueError(f"black_level {self.black_level} must be below white_level {self.white_level}")
        if not self.exposure_s > 0:
            raise ValueError(f"exposure_s must be positive, got {self.exposure_s}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mosaic.shape


@dataclass
class PackedInput:
    tensor: Tensor
    ratio: float

    @property
    def cfa(self) -> str:
        return cfa_for_channels(self.tensor.shape[1])

    @property
    def factor(self) -> int:
        return PACK_FACTOR[self.cfa]


@dataclass
class Sample:
    input: PackedInput
    target: np.ndarray
    ids: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        r = self.input.factor
        _, _, h, w = self.input.tensor.shape
        if self.target.ndim != 4 or self.target.shape[:2] != (1, 3):
            raise ValueError(f"target must be (1, 3, H, W), got {self.target.shape}")
        if self.target.shape[2:] != (h * r, w * r):
            raise ValueError(f"target {self.target.shape[2:]} is not {r}x the packed size {(h, w)}")


def cfa_for_channels(c: int) -> str:
    for kind, n in PACKED_CHANNELS.items():
        if n == c:
            return kind
    raise ValueError(f"no CFA packs into {c} channels")


# -- packing ---------------------------------------------------------------


def _phase_planes(mosaic: np.ndarray, r: int, phases) -> np.ndarray:
    return np.stack([mosaic[i::r, j::r] for i, j in phases])


def _scatter_planes(planes: np.ndarray, r: int, phases, dtype) -> np.ndarray:
    c, h, w = planes.shape
    out = np.empty((h * r, w * r), dtype=dtype)
    for k, (i, j) in enumerate(phases):
        out[i::r, j::r] = planes[k]
    return out


def _phases(cfa: str):
    if cfa == BAYER:
        return BAYER_PHASES
    return tuple((i, j) for i in range(3) for j in range(3))


def pack_bayer(frame: RawFrame) -> Tensor:
    """(H, W) Bayer mosaic -> (1, 4, H/2, W/2) tensor of raw counts."""
    if frame.cfa != BAYER:
        raise ValueError(f"pack_bayer needs a Bayer frame, got {frame.cfa}")
    return Tensor(_phase_planes(frame.mosaic, 2, BAYER_PHASES)[None], dtype=np.float32)


def pack_xtrans(frame: RawFrame) -> Tensor:
    """(H, W) X-Trans mosaic -> (1, 9, H/3, W/3); channel 3*i + j holds site (i, j) of each 3x3 tile."""
    if frame.cfa != XTRANS:
        raise ValueError(f"pack_xtrans needs an X-Trans frame, got {frame.cfa}")
    return Tensor(_phase_planes(frame.mosaic, 3, _phases(XTRANS))[None], dtype=np.float32)


def pack(frame: RawFrame) -> Tensor:
    return pack_bayer(frame) if frame.cfa == BAYER else pack_xtrans(frame)


def unpack(packed: Union[Tensor, np.ndarray], cfa: str | None = None, dtype=np.uint16) -> np.ndarray:
    """Inverse of :func:`pack`: rebuild the (H, W) mosaic."""
    arr = packed.data if isinstance(packed, Tensor) else np.asarray(packed)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"unpack expects a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    cfa = cfa or cfa_for_channels(arr.shape[0])
    if arr.shape[0] != PACKED_CHANNELS[cfa]:
        raise ValueError(f"{cfa} packs into {PACKED_CHANNELS[cfa]} channels, got {arr.shape[0]}")
    return _scatter_planes(arr.astype(dtype), PACK_FACTOR[cfa], _phases(cfa), dtype)


def cfa_color_map(cfa: str, h: int, w: int) -> np.ndarray:
    pattern = BAYER_PATTERN if cfa == BAYER else XTRANS_PATTERN
    p = pattern.shape[0]
    return np.tile(pattern, (h // p, w // p))


def mosaic_rgb(rgb: np.ndarray, cfa: str) -> np.ndarray:
    """Sample a (3, H, W) image through the CFA into an (H, W) mosaic."""
    _, h, w = rgb.shape
    colors = cfa_color_map(cfa, h, w)
    return np.take_along_axis(rgb, colors[None], axis=0)[0]


def naive_rgb(packed: Union[PackedInput, Tensor, np.ndarray]) -> np.ndarray:
    """Per-tile colour averages broadcast back to full resolution, (1, 3, H, W).

    A crude stand-in for an ISP, used as the "just amplify" baseline.
    """
    if isinstance(packed, PackedInput):
        packed = packed.tensor
    arr = packed.data if isinstance(packed, Tensor) else np.asarray(packed)
    cfa = cfa_for_channels(arr.shape[1])
    r = PACK_FACTOR[cfa]
    mos = unpack(arr, cfa, dtype=np.float32)
    h, w = mos.shape
    colors = cfa_color_map(cfa, h, w)
    out = np.empty((1, 3, h, w), dtype=np.float32)
    for k in range(3):
        sel = colors == k
        num = np.where(sel, mos, 0).reshape(h // r, r, w // r, r).sum(axis=(1, 3))
        cnt = sel.reshape(h // r, r, w // r, r).sum(axis=(1, 3))
        out[0, k] = np.repeat(np.repeat(num / cnt, r, axis=0), r, axis=1)
    return out


# -- normalization ---------------------------------------------------------


def normalize_amplify(
    packed: Tensor,
    frame: RawFrame,
    target_exposure_s: float,
    ratio_cap: float = DEFAULT_RATIO_CAP,
) -> PackedInput:
    """Subtract black level, scale to [0, 1], clamp negatives, multiply by the exposure ratio.

    The ratio is ``min(target_exposure_s / frame.exposure_s, ratio_cap)``.
    No clamp is applied after amplification.
    """
    if not target_exposure_s > 0:
        raise ValueError(f"target exposure must be positive, got {target_exposure_s}")
    if not frame.exposure_s > 0:
        raise ValueError(f"frame exposure must be positive, got {frame.exposure_s}")
    ratio = min(target_exposure_s / frame.exposure_s, ratio_cap)
    span = frame.white_level - frame.black_level
    norm = np.maximum((packed.data.astype(np.float64) - frame.black_level) / span, 0.0)
    return PackedInput(Tensor((norm * ratio).astype(np.float32)), float(ratio))


def preprocess(frame: RawFrame, target_exposure_s: float, ratio_cap: float = DEFAULT_RATIO_CAP) -> PackedInput:
    return normalize_amplify(pack(frame), frame, target_exposure_s, ratio_cap)


# -- augmentation ----------------------------------------------------------


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for one (seed, keys...) tuple, e.g. (seed, epoch, index)."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def _flip(a: np.ndarray, hflip: bool, vflip: bool, transpose: bool) -> np.ndarray:
    if hflip:
        a = a[:, :, :, ::-1]
    if vflip:
        a = a[:, :, ::-1, :]
    if transpose:
        a = a.transpose(0, 1, 3, 2)
    return np.ascontiguousarray(a)


def augment(
    sample: Sample,
    rng: np.random.Generator,
    a: int = 32,
    b_range: tuple[int, int] = (16, 32),
    flips: tuple[bool, bool, bool] | None = None,
    crop: bool = True,
) -> Sample:
    """Random (a*b)-sided packed crop with its aligned target crop, then flips/transpose.

    ``b`` is drawn uniformly from ``b_range`` (inclusive). If the image cannot
    hold the largest patch, the upper bound is clamped and recorded in
    ``meta["b_clamped"]``. ``flips`` forces (horizontal, vertical, transpose).
    """
    r = sample.input.factor
    x = sample.input.tensor.data
    _, _, h, w = x.shape
    meta = dict(sample.meta)
    if crop:
        lo, hi = b_range
        fit = min(h, w) // a
        if fit < lo:
            raise ValueError(f"image {h}x{w} cannot hold the smallest {a}*{lo} patch")
        if fit < hi:
            meta["b_clamped"] = fit
            hi = fit
        b = int(rng.integers(lo, hi + 1))
        side = a * b
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        x = x[:, :, y0 : y0 + side, x0 : x0 + side]
        t = sample.target[:, :, r * y0 : r * (y0 + side), r * x0 : r * (x0 + side)]
        meta.update(b=b, offset=(y0, x0))
    else:
        t = sample.target
    if flips is None:
        flips = tuple(bool(rng.integers(0, 2)) for _ in range(3))
    meta["flips"] = tuple(flips)
    x = _flip(x, *flips)
    t = _flip(t, *flips)
    return Sample(PackedInput(Tensor(x), sample.input.ratio), t, sample.ids, meta)


# -- synthetic data --------------------------------------------------------


def smooth_field(rng: np.random.Generator, h: int, w: int, channels: int = 3, cells: int = 4) -> np.ndarray:
    """Random low-frequency field in [0, 1]: a coarse grid bilinearly enlarged."""
    gh = max(2, cells)
    gw = max(2, round(cells * w / h))
    coarse = rng.random((channels, gh, gw))
    ah = interp_matrix(gh, h, np.float64)
    aw = interp_matrix(gw, w, np.float64)
    return np.einsum("ih,chw,jw->cij", ah, coarse, aw)


def synth_scene(
    rng: np.random.Generator,
    size: int | tuple[int, int],
    cfa: str = BAYER,
    ratio: float = 100.0,
    read_noise: float = 2.0,
    shot_gain: float = 1.0,
    black_level: float = 512.0,
    white_level: float = 16383.0,
    long_exposure_s: float = 10.0,
    cast: np.ndarray | None = None,
) -> tuple[RawFrame, np.ndarray]:
    """Paired (short-exposure raw frame, clean RGB target) for a random smooth scene.

    ``read_noise`` is the Gaussian read-noise std in counts; ``shot_gain`` is
    counts per photo-electron (0 disables shot noise). ``cast`` is an optional
    per-channel offset added to the scene radiance before capture; the target
    stays uncast.
    """
    if cfa not in CFA_KINDS:
        raise ValueError(f"unknown CFA {cfa!r}")
    h, w = (size, size) if np.isscalar(size) else size
    p = CFA_PERIOD[cfa]
    if h % p or w % p or h < p or w < p:
        raise ValueError(f"{cfa} scene size must be a positive multiple of {p}, got {h}x{w}")
    scene = smooth_field(rng, h, w, 3, cells=max(2, min(h, w) // 32))
    # fine texture so that structure terms are informative
    scene = np.clip(0.85 * scene + 0.15 * smooth_field(rng, h, w, 3, cells=max(2, min(h, w) // 4)), 0.0, 1.0)
    radiance = scene if cast is None else np.clip(scene + np.asarray(cast).reshape(3, 1, 1), 0.0, 1.0)
    signal = mosaic_rgb(radiance, cfa) * (white_level - black_level) / ratio
    if shot_gain > 0:
        signal = shot_gain * rng.poisson(signal / shot_gain)
    if read_noise > 0:
        signal = signal + rng.normal(0.0, read_noise, signal.shape)
    counts = np.clip(np.round(black_level + signal), 0, white_level).astype(np.uint16)
    frame = RawFrame(counts, cfa, black_level, white_level, long_exposure_s / ratio)
    return frame, scene.astype(np.float32)[None]


# -- container I/O ---------------------------------------------------------

MAGIC = b"GIAR"
VERSION = 1
KIND_RAW, KIND_RGB, KIND_PACKED = 0, 1, 2
_CFA_CODE = {None: 0, BAYER: 1, XTRANS: 2}
_CODE_CFA = {v: k for k, v in _CFA_CODE.items()}
_HEADER = struct.Struct("<4sBBBIIfff")


def write_container(path, obj: Union[RawFrame, PackedInput, np.ndarray]) -> None:
    """Write a raw frame, packed input or (3, H, W) / (1, 3, H, W) RGB image."""
    if isinstance(obj, RawFrame):
        h, w = obj.mosaic.shape
        head = _HEADER.pack(
            MAGIC, VERSION, KIND_RAW, _CFA_CODE[obj.cfa], h, w, obj.black_level, obj.white_level, obj.exposure_s
        )
        payload = obj.mosaic.astype("<u2").tobytes()
    elif isinstance(obj, PackedInput):
        _, c, h, w = obj.tensor.shape
        head = _HEADER.pack(MAGIC, VERSION, KIND_PACKED, _CFA_CODE[obj.cfa], h, w, 0.0, 1.0, obj.ratio)
        payload = obj.tensor.data[0].astype("<f4").tobytes()
    else:
        rgb = np.asarray(obj)
        if rgb.ndim == 4 and rgb.shape[0] == 1:
            rgb = rgb[0]
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            raise ValueError(f"RGB image must be (3, H, W), got {rgb.shape}")
        _, h, w = rgb.shape
        head = _HEADER.pack(MAGIC, VERSION, KIND_RGB, 0, h, w, 0.0, 1.0, 1.0)
        payload = rgb.astype("<f4").tobytes()
    Path(path).write_bytes(head + payload)


def read_container(path) -> Union[RawFrame, PackedInput, np.ndarray]:
    """Inverse of :func:`write_container`. RGB images come back as (3, H, W) float32."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise ContainerTruncatedError(f"{path}: {len(buf)} bytes is shorter than the magic")
    if buf[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise ContainerTruncatedError(f"{path}: header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, kind, cfa_code, h, w, black, white, exposure = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    if cfa_code not in _CODE_CFA:
        raise ContainerFormatError(f"{path}: unknown CFA code {cfa_code}")
    cfa = _CODE_CFA[cfa_code]
    if kind == KIND_RAW:
        if cfa is None:
            raise ContainerConsistencyError(f"{path}: raw mosaic without a CFA")
        p = CFA_PERIOD[cfa]
        if h % p or w % p:
            raise ContainerConsistencyError(f"{path}: {cfa} mosaic {h}x{w} not divisible by {p}")
        shape, dtype = (h, w), "<u2"
    elif kind == KIND_RGB:
        if cfa is not None:
            raise ContainerConsistencyError(f"{path}: RGB image with CFA code {cfa_code}")
        shape, dtype = (3, h, w), "<f4"
    elif kind == KIND_PACKED:
        if cfa is None:
            raise ContainerConsistencyError(f"{path}: packed input without a CFA")
        shape, dtype = (PACKED_CHANNELS[cfa], h, w), "<f4"
    else:
        raise ContainerFormatError(f"{path}: unknown kind {kind}")
    need = int(np.prod(shape)) * np.dtype(dtype).itemsize
    body = buf[_HEADER.size :]
    if len(body) < need:
        raise ContainerTruncatedError(f"{path}: payload needs {need} bytes, file has {len(body)}")
    if len(body) > need:
        raise ContainerConsistencyError(f"{path}: {len(body) - need} trailing bytes after payload")
    data = np.frombuffer(body, dtype=dtype).reshape(shape)
    if kind == KIND_RAW:
        try:
            return RawFrame(data.astype(np.uint16), cfa, float(black), float(white), float(exposure))
        except ValueError as exc:
            raise ContainerConsistencyError(f"{path}: {exc}") from exc
    if kind == KIND_PACKED:
        return PackedInput(Tensor(data.astype(np.float32)[None]), float(exposure))
    return data.astype(np.float32)
