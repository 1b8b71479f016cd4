"""Training objective (l1 + MS-SSIM) and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import avgpool2x2, gaussian_filter
from .tensor import ShapeError, Tensor

__all__ = [
    "SsimParams",
    "LossReport",
    "l1_loss",
    "ssim_map",
    "ssim",
    "ms_ssim",
    "joint_loss",
    "psnr",
    "weighted_total",
    "max_levels",
    "gaussian_taps",
]

MSSSIM_EPS = 1e-6


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma_g: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    levels: int = 5

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and positive, got {self.window}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def min_side(self) -> int:
        return self.window * 2 ** (self.levels - 1)

    def with_levels(self, levels: int) -> "SsimParams":
        return SsimParams(self.window, self.sigma_g, self.k1, self.k2, self.dynamic_range, levels)


@dataclass
class LossReport:
    l1_term: float
    msssim_term: float
    total: float
    gamma: float
    loss: Tensor | None = None

    def as_row(self) -> dict:
        return {"l1_term": self.l1_term, "msssim_term": self.msssim_term, "total": self.total}


def gaussian_taps(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def max_levels(min_side: int, window: int = 11) -> int:
    """Largest pyramid depth M with window * 2**(M-1) <= min_side (0 if none)."""
    if min_side < window:
        return 0
    return int(math.floor(math.log2(min_side / window))) + 1


def _check_pair(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(op, x.shape, y.shape)


def _as_tensor(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a)


def l1_loss(out: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    out, target = _as_tensor(out), _as_tensor(target)
    _check_pair("l1_loss", out, target)
    return T.mean(T.absolute(T.sub(out, target)))


def ssim_map(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> tuple[Tensor, Tensor]:
    """Per-pixel luminance and contrast-structure maps with 'valid' Gaussian windows.

    Returns (l, cs), each (n, c, h - window + 1, w - window + 1); channels are
    kept separate so callers average them.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    _check_pair("ssim_map", x, y)
    if min(x.shape[2:]) < params.window:
        raise ShapeError(f"ssim_map (image smaller than {params.window}x{params.window} window)", x.shape)
    taps = gaussian_taps(params.window, params.sigma_g)
    mu_x = gaussian_filter(x, taps)
    mu_y = gaussian_filter(y, taps)
    mu_xx = T.square(mu_x)
    mu_yy = T.square(mu_y)
    mu_xy = T.mul(mu_x, mu_y)
    var_x = T.sub(gaussian_filter(T.square(x), taps), mu_xx)
    var_y = T.sub(gaussian_filter(T.square(y), taps), mu_yy)
    cov = T.sub(gaussian_filter(T.mul(x, y), taps), mu_xy)
    c1, c2 = params.c1, params.c2
    lum = T.div(T.add_scalar(T.scalar_mul(mu_xy, 2.0), c1), T.add_scalar(T.add(mu_xx, mu_yy), c1))
    cs = T.div(T.add_scalar(T.scalar_mul(cov, 2.0), c2), T.add_scalar(T.add(var_x, var_y), c2))
    return lum, cs


def ssim(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """Single-scale SSIM: mean of l * cs over pixels and channels."""
    lum, cs = ssim_map(x, y, params)
    return T.mean(T.mul(lum, cs))


def ms_ssim(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """Multi-scale SSIM with unit exponents.

    mean(l at the coarsest level) * prod_j mean(cs_j), each factor clamped
    below at 1e-6, with 2x2 average pooling between levels.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    _check_pair("ms_ssim", x, y)
    side = min(x.shape[2:])
    if side < params.min_side:
        raise ShapeError(
            f"ms_ssim ({params.levels} levels need min side {params.min_side}; "
            f"at most {max_levels(side, params.window)} fit)",
            x.shape,
        )
    result = None
    for level in range(params.levels):
        lum, cs = ssim_map(x, y, params)
        factor = T.clamp_min(T.mean(cs), MSSSIM_EPS)
        result = factor if result is None else T.mul(result, factor)
        if level == params.levels - 1:
            result = T.mul(result, T.clamp_min(T.mean(lum), MSSSIM_EPS))
        else:
            x, y = avgpool2x2(x), avgpool2x2(y)
    return result


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def weighted_total(l1_term: float, msssim_term: float, gamma: float = 0.84) -> float:
    """Scalar form of the joint weighting: gamma * l1_term + (1 - gamma) * msssim_term."""
    _check_gamma(gamma)
    return gamma * l1_term + (1.0 - gamma) * msssim_term


def joint_loss(out: Tensor, target: Tensor, gamma: float = 0.84, params: SsimParams = SsimParams()) -> LossReport:
    """gamma * l1 + (1 - gamma) * (1 - MS-SSIM).

    A term whose weight is exactly zero is evaluated for reporting only and
    contributes nothing to the graph.
    """
    _check_gamma(gamma)
    out, target = _as_tensor(out), _as_tensor(target)
    _check_pair("joint_loss", out, target)
    if gamma == 0.0:
        with T.no_grad():
            l1 = l1_loss(out, target)
    else:
        l1 = l1_loss(out, target)
    if gamma == 1.0:
        with T.no_grad():
            ms = ms_ssim(out, target, params)
    else:
        ms = ms_ssim(out, target, params)
    ms_term = T.add_scalar(T.neg(ms), 1.0)
    if gamma == 1.0:
        total = l1
    elif gamma == 0.0:
        total = ms_term
    else:
        total = T.add(T.scalar_mul(l1, gamma), T.scalar_mul(ms_term, 1.0 - gamma))
    return LossReport(l1.item(), ms_term.item(), total.item(), gamma, total)


def psnr(out, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = out.data if isinstance(out, Tensor) else np.asarray(out)
    b = target.data if isinstance(target, Tensor) else np.asarray(target)
    if a.shape != b.shape:
        raise ShapeError("psnr", a.shape, b.shape)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(max_val) - 10.0 * math.log10(mse)
