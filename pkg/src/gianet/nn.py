"""Neural-network building blocks on :class:`~gianet.tensor.Tensor`.

Each op has a forward, a backward registered on the tape, and (for the
layers the models use) a closed-form parameter/FLOP count.

FLOP convention: one multiply-accumulate is 2 FLOPs; bias adds, activations,
pooling and interpolation cost one FLOP per element they produce or read
(documented per op below).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record

__all__ = [
    "Conv2dSpec",
    "CostReport",
    "LayerCost",
    "conv2d",
    "conv2d_transposed",
    "maxpool2x2",
    "avgpool2x2",
    "global_avg_pool",
    "bilinear_upsample",
    "concat_channels",
    "slice_channels",
    "depth_to_space",
    "space_to_depth",
    "leaky_relu",
    "gaussian_filter",
    "conv_cost",
    "conv_transposed_cost",
    "receptive_field",
    "support_interval",
    "interp_matrix",
]


@dataclass(frozen=True)
class Conv2dSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: int = 1
    padding: str | tuple[int, int] = "same"
    bias: bool = True

    def __post_init__(self):
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError(f"channel counts must be positive, got {self.in_ch}->{self.out_ch}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding == "same":
            kh, kw = self.kernel
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError(f"'same' padding needs an odd kernel, got {self.kernel}")
            if self.stride != (1, 1):
                raise ValueError("'same' padding is only defined for stride 1")

    @property
    def pad(self) -> tuple[int, int]:
        if self.padding == "same":
            kh, kw = self.kernel
            return self.dilation * (kh - 1) // 2, self.dilation * (kw - 1) // 2
        return tuple(self.padding)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch) + tuple(self.kernel)

    @property
    def params(self) -> int:
        kh, kw = self.kernel
        return self.in_ch * self.out_ch * kh * kw + (self.out_ch if self.bias else 0)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.pad
        d = self.dilation
        ho = (h + 2 * ph - d * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - d * (kw - 1) - 1) // sw + 1
        return ho, wo


@dataclass
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def add(self, name: str, params: int, flops: int) -> None:
        self.rows.append(LayerCost(name, int(params), int(flops)))

    def to_table(self) -> str:
        width = max([len("layer")] + [len(r.name) for r in self.rows])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'flops':>18}  {'cum_params':>12}  {'cum_flops':>18}"]
        cp = cf = 0
        for r in self.rows:
            cp += r.params
            cf += r.flops
            lines.append(f"{r.name:<{width}}  {r.params:>12d}  {r.flops:>18d}  {cp:>12d}  {cf:>18d}")
        lines.append(f"{'total':<{width}}  {self.params:>12d}  {self.flops:>18d}")
        return "\n".join(lines)


# -- convolution ---------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, d: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (n, c, ho, wo, kh, kw) over a padded input."""
    n, c, hp, wp = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2] * d, s[3] * d),
        writeable=False,
    )


def _conv_forward(x: np.ndarray, w: np.ndarray, stride, dilation, pad, ho, wo):
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    kh, kw = w.shape[2:]
    cols = _windows(xp, kh, kw, dilation, stride[0], stride[1], ho, wo)
    # (n, ho, wo, c*kh*kw) @ (c*kh*kw, o)
    n, c = x.shape[:2]
    mat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = mat @ w.reshape(w.shape[0], -1).T
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), mat


def _conv_backward_input(g, w, x_shape, stride, dilation, pad):
    n, c, h, wdt = x_shape
    ph, pw = pad
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    sh, sw = stride
    # dcols[n, ho, wo, c, kh, kw]
    dcols = np.tensordot(g.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    dxp = np.zeros((n, c, h + 2 * ph, wdt + 2 * pw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            dxp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dxp[:, :, ph : ph + h, pw : pw + wdt]


def conv2d(x: Tensor, spec: Conv2dSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dilated 2-D cross-correlation.

    ``weight`` is (out_ch, in_ch, kh, kw); ``bias`` is (1, out_ch, 1, 1).
    """
    if x.shape[1] != spec.in_ch:
        raise ShapeError("conv2d (input channels vs spec.in_ch)", x.shape, (spec.in_ch,))
    if weight.shape != spec.weight_shape:
        raise ShapeError("conv2d (weight)", weight.shape, spec.weight_shape)
    if spec.bias != (bias is not None):
        raise ValueError("conv2d: bias tensor presence must match spec.bias")
    if bias is not None and bias.shape != (1, spec.out_ch, 1, 1):
        raise ShapeError("conv2d (bias)", bias.shape, (1, spec.out_ch, 1, 1))
    n, _, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d (input smaller than kernel footprint)", x.shape, spec.kernel)
    out, mat = _conv_forward(x.data, weight.data, spec.stride, spec.dilation, spec.pad, ho, wo)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _conv_backward_input(g, weight.data, x.shape, spec.stride, spec.dilation, spec.pad)
        if weight.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_ch)
            gw = (g2.T @ mat).reshape(spec.weight_shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype).reshape(1, -1, 1, 1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out, inputs, bw, "conv2d")


def conv2d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """2x2 / stride-2 transposed convolution; doubles height and width.

    ``weight`` is (in_ch, out_ch, 2, 2). Its backward w.r.t. ``x`` is the
    2x2 / stride-2 forward convolution of the upstream gradient.
    """
    if stride != 2 or weight.shape[2:] != (2, 2):
        raise ValueError(f"conv2d_transposed supports kernel 2x2 / stride 2 only, got {weight.shape[2:]} / {stride}")
    n, c, h, w = x.shape
    if weight.shape[0] != c:
        raise ShapeError("conv2d_transposed (input channels)", x.shape, weight.shape)
    o = weight.shape[1]
    # out[n, o, h, a, w, b] = sum_c x[n, c, h, w] W[c, o, a, b]
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    y = xm @ weight.data.reshape(c, -1)
    out = y.reshape(n, h, w, o, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gr = g.reshape(n, o, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, o * 4)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gr @ weight.data.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (xm.T @ gr).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype).reshape(1, -1, 1, 1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out, inputs, bw, "conv2d_transposed")


# -- pooling / resampling -------------------------------------------------


def _check_even(op: str, x: Tensor) -> None:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{op} (spatial dims must be even)", x.shape)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling. Ties go to the first maximum in row-major order."""
    _check_even("maxpool2x2", x)
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), bw, "maxpool2x2")


def avgpool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling; odd trailing rows/columns are dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError("avgpool2x2 (input too small)", x.shape)
    xc = x.data[:, :, : 2 * h2, : 2 * w2]
    quarter = x.dtype.type(0.25)
    out = xc.reshape(n, c, h2, 2, w2, 2).sum(axis=(3, 5)) * quarter

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3)
        return (gx,)

    return record(out, (x,), bw, "avgpool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (n, c, h, w) -> (n, c, 1, 1)."""
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool", x.shape)
    area = h * w
    out = (x.data.sum(axis=(2, 3), keepdims=True, dtype=np.float64) / area).astype(x.dtype)
    inv = x.dtype.type(1.0 / area)
    return record(out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),), "global_avg_pool")


def interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Align-corners-false linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize to ``size`` (align-corners-false). 1x1 input broadcasts exactly."""
    n, c, h, w = x.shape
    th, tw = size
    if th < h or tw < w:
        raise ShapeError("bilinear_upsample (target smaller than source)", x.shape, size)
    if (h, w) == (th, tw):
        return record(x.data.copy(), (x,), lambda g: (g,), "bilinear_upsample")
    if (h, w) == (1, 1):
        out = np.broadcast_to(x.data, (n, c, th, tw)).copy()
        return record(
            out,
            (x,),
            lambda g: (g.sum(axis=(2, 3), keepdims=True, dtype=np.float64).astype(g.dtype),),
            "bilinear_upsample",
        )
    ah = interp_matrix(h, th, x.dtype)
    aw = interp_matrix(w, tw, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)

    return record(np.ascontiguousarray(out), (x,), bw, "bilinear_upsample")


# -- channel rearrangement ------------------------------------------------


def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError("concat_channels", ref, t.shape)
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record(out, xs, bw, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels [{start}:{stop}]", x.shape)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return record(x.data[:, start:stop].copy(), (x,), bw, "slice_channels")


def _d2s(a: np.ndarray, r: int) -> np.ndarray:
    n, crr, h, w = a.shape
    c = crr // (r * r)
    return a.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _s2d(a: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """Pixel shuffle: channel ``c*r*r + i*r + j`` lands at (row*r + i, col*r + j)."""
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"depth_to_space (channels not divisible by {r}^2)", x.shape)
    return record(np.ascontiguousarray(_d2s(x.data, r)), (x,), lambda g: (_s2d(g, r),), "depth_to_space")


def space_to_depth(x: Tensor, r: int) -> Tensor:
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"space_to_depth (spatial dims not divisible by {r})", x.shape)
    return record(np.ascontiguousarray(_s2d(x.data, r)), (x,), lambda g: (_d2s(g, r),), "space_to_depth")


# -- activations / filters ------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """x for x >= 0 else slope*x. At exactly 0 the gradient is 1."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    pos = x.data >= 0
    k = x.dtype.type(slope)
    factor = np.where(pos, x.dtype.type(1), k)
    return record(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def gaussian_filter(x: Tensor, taps: np.ndarray) -> Tensor:
    """Separable 'valid' filtering of every channel with the 1-D kernel ``taps``."""
    k = len(taps)
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"gaussian_filter (image smaller than {k}x{k} window)", x.shape)
    g1 = np.asarray(taps, dtype=x.dtype)
    ho, wo = h - k + 1, w - k + 1
    tmp = np.zeros((n, c, h, wo), dtype=x.dtype)
    for i in range(k):
        tmp += g1[i] * x.data[:, :, :, i : i + wo]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        out += g1[i] * tmp[:, :, i : i + ho, :]

    def bw(g):
        gt = np.zeros((n, c, h, wo), dtype=g.dtype)
        for i in range(k):
            gt[:, :, i : i + ho, :] += g1[i] * g
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(k):
            gx[:, :, :, i : i + wo] += g1[i] * gt
        return (gx,)

    return record(out, (x,), bw, "gaussian_filter")


# -- cost accounting ------------------------------------------------------


def conv_cost(spec: Conv2dSpec, h_out: int, w_out: int) -> tuple[int, int]:
    """(params, flops) of one convolution producing an h_out x w_out map."""
    kh, kw = spec.kernel
    area = h_out * w_out
    flops = 2 * kh * kw * spec.in_ch * spec.out_ch * area
    if spec.bias:
        flops += spec.out_ch * area
    return spec.params, flops


def conv_transposed_cost(in_ch: int, out_ch: int, h_out: int, w_out: int, bias: bool) -> tuple[int, int]:
    # each output pixel receives exactly one 2x2 tap from every input channel
    params = in_ch * out_ch * 4 + (out_ch if bias else 0)
    flops = 2 * in_ch * out_ch * h_out * w_out + (out_ch * h_out * w_out if bias else 0)
    return params, flops


def receptive_field(layers: Iterable[tuple[int, int, int]]) -> int:
    """Receptive field of a stack of (kernel, stride, dilation) layers."""
    rf, jump = 1, 1
    for k, s, d in layers:
        rf += d * (k - 1) * jump
        jump *= s
    return rf


def support_interval(layers: Sequence[tuple[int, int, int]], lo: int, hi: int) -> tuple[int, int]:
    """Input index range that can influence output positions ``lo..hi``.

    ``layers`` are (kernel, stride, dilation) with 'same'-centred odd kernels
    for stride 1 and non-overlapping windows for stride == kernel.
    """
    for k, s, d in reversed(list(layers)):
        if s == 1:
            half = d * (k - 1) // 2
            lo, hi = lo - half, hi + half
        else:
            lo, hi = lo * s, hi * s + (k - 1)
    return lo, hi
