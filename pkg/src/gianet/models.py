"""U-Net backbone and its variants: plain, dilated, see-wider blocks, GIA bottleneck.

An :class:`ArchConfig` describes a variant declaratively. :func:`build`
turns it into a :class:`Network`; :func:`cost_report` accounts for the same
config analytically without instantiating anything.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import nn
from .nn import Conv2dSpec, CostReport
from .raw import PackedInput
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "ArchConfig",
    "GiaSpec",
    "Network",
    "GIAModule",
    "VARIANTS",
    "variant_config",
    "desk_config",
    "build",
    "forward",
    "predict",
    "gia_param_count",
    "count_params",
    "count_flops",
    "cost_report",
    "bottleneck_layers",
    "bottleneck_receptive_field",
    "bottleneck_support",
]

BOTTLENECKS = ("none", "gia", "extra")
BLOCKS = ("plain", "dilated", "sw")


@dataclass(frozen=True)
class GiaSpec:
    c1: int = 256
    c2: int = 512

    def __post_init__(self):
        if self.c1 < 1 or self.c2 < 1:
            raise ValueError(f"GIA channel counts must be positive, got c1={self.c1}, c2={self.c2}")


@dataclass(frozen=True)
class ArchConfig:
    in_ch: int = 4
    base_width: int = 32
    depth: int = 5
    bottleneck: str = "none"
    gia_c1: int = 0  # 0 -> half the bottleneck width
    gia_c2: int = 0  # 0 -> the bottleneck width
    extra_convs: int = 2
    block: str = "plain"
    dilation: int = 2
    sw_local_fraction: float = 0.5
    out_factor: int = 2
    width_scale: float = 1.0
    slope: float = 0.2
    upsample_bias: bool = False

    def __post_init__(self):
        if self.in_ch < 1:
            raise ValueError(f"in_ch must be positive, got {self.in_ch}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.bottleneck not in BOTTLENECKS:
            raise ValueError(f"bottleneck must be one of {BOTTLENECKS}, got {self.bottleneck!r}")
        if self.block not in BLOCKS:
            raise ValueError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.out_factor < 1:
            raise ValueError(f"out_factor must be >= 1, got {self.out_factor}")
        if self.width_scale <= 0:
            raise ValueError(f"width_scale must be positive, got {self.width_scale}")
        if not 0.0 < self.sw_local_fraction < 1.0:
            raise ValueError(f"sw_local_fraction must lie in (0, 1), got {self.sw_local_fraction}")
        if self.widths[0] < 2 and self.block == "sw":
            raise ValueError("see-wider blocks need at least 2 channels per layer")

    @property
    def widths(self) -> list[int]:
        w0 = max(1, int(round(self.base_width * self.width_scale)))
        return [w0 * 2**k for k in range(self.depth)]

    @property
    def gia(self) -> GiaSpec:
        c = self.widths[-1]
        return GiaSpec(self.gia_c1 or max(1, c // 2), self.gia_c2 or c)

    @property
    def bottleneck_out(self) -> int:
        return self.gia.c2 if self.bottleneck == "gia" else self.widths[-1]

    @property
    def out_channels(self) -> int:
        return 3 * self.out_factor**2

    @property
    def conv3x3_count(self) -> int:
        extra = self.extra_convs if self.bottleneck == "extra" else 0
        return 2 * self.depth + 2 * (self.depth - 1) + extra

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in asdict(self).items()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ValueError(f"unknown ArchConfig key {key!r}")
            kw[key] = _parse_value(types[key], value)
        return cls(**kw)


def _parse_value(type_name, value: str):
    type_name = str(type_name)
    if type_name == "bool":
        if value not in ("True", "False"):
            raise ValueError(f"expected True/False, got {value!r}")
        return value == "True"
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value


VARIANTS = {
    "sid": dict(),
    "sid-dilated": dict(block="dilated"),
    "sw": dict(block="sw"),
    "gia": dict(bottleneck="gia"),
    "gia-l1": dict(bottleneck="gia"),
    "sid-extra": dict(bottleneck="extra"),
}


def variant_config(name: str, in_ch: int = 4, **overrides) -> ArchConfig:
    """ArchConfig for a named variant. ``gia-l1`` shares ``gia``'s architecture."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    out_factor = {4: 2, 9: 3}.get(in_ch, 2)
    kw = dict(in_ch=in_ch, out_factor=out_factor)
    kw.update(VARIANTS[name])
    kw.update(overrides)
    return ArchConfig(**kw)


def desk_config(name: str, in_ch: int = 4, **overrides) -> ArchConfig:
    """Small preset used for CPU training: quarter width, four scales."""
    kw = dict(width_scale=0.25, depth=4)
    kw.update(overrides)
    return variant_config(name, in_ch, **kw)


# -- network ---------------------------------------------------------------


class Conv:
    def __init__(self, net: "Network", name: str, spec: Conv2dSpec):
        self.spec = spec
        self.weight = net.register(f"{name}.weight", spec.weight_shape, fan_in=spec.in_ch * spec.kernel[0] * spec.kernel[1])
        self.bias = net.register(f"{name}.bias", (1, spec.out_ch, 1, 1), zero=True) if spec.bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv2d(x, self.spec, self.weight, self.bias)


class Block:
    """One 3x3 stage: plain, dilated, or see-wider (parallel plain + dilated)."""

    def __init__(self, net: "Network", name: str, in_ch: int, out_ch: int, kind: str, dilation: int, fraction: float):
        self.slope = net.config.slope
        if kind == "sw":
            c_l = max(1, min(out_ch - 1, int(round(out_ch * fraction))))
            self.branches = [
                Conv(net, f"{name}.local", Conv2dSpec(in_ch, c_l)),
                Conv(net, f"{name}.wide", Conv2dSpec(in_ch, out_ch - c_l, dilation=dilation)),
            ]
        else:
            d = dilation if kind == "dilated" else 1
            self.branches = [Conv(net, name, Conv2dSpec(in_ch, out_ch, dilation=d))]

    def __call__(self, x: Tensor) -> Tensor:
        outs = [nn.leaky_relu(b(x), self.slope) for b in self.branches]
        return outs[0] if len(outs) == 1 else nn.concat_channels(*outs)


class GIAModule:
    """Global pooling -> 1x1 shrink -> broadcast -> concat with input -> 1x1 fuse."""

    def __init__(self, net: "Network", name: str, channels: int, spec: GiaSpec):
        self.spec = spec
        self.slope = net.config.slope
        self.shrink = Conv(net, f"{name}.shrink", Conv2dSpec(channels, spec.c1, kernel=(1, 1)))
        self.fuse = Conv(net, f"{name}.fuse", Conv2dSpec(channels + spec.c1, spec.c2, kernel=(1, 1)))

    def global_branch(self, x: Tensor) -> Tensor:
        g = nn.leaky_relu(self.shrink(nn.global_avg_pool(x)), self.slope)
        return nn.bilinear_upsample(g, x.shape[2:])

    def __call__(self, x: Tensor) -> Tensor:
        return nn.leaky_relu(self.fuse(nn.concat_channels(x, self.global_branch(x))), self.slope)


class Network:
    """A built U-Net. Parameters live in ``params`` in registration order."""

    def __init__(self, config: ArchConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        c = config
        widths = c.widths
        mk = lambda name, i, o: Block(self, name, i, o, c.block, c.dilation, c.sw_local_fraction)  # noqa: E731

        self.encoder = []
        prev = c.in_ch
        for k, w in enumerate(widths):
            self.encoder.append((mk(f"enc{k + 1}.conv1", prev, w), mk(f"enc{k + 1}.conv2", w, w)))
            prev = w
        self.gia = None
        self.extra = []
        if c.bottleneck == "gia":
            self.gia = GIAModule(self, "gia", widths[-1], c.gia)
            prev = c.gia.c2
        elif c.bottleneck == "extra":
            self.extra = [
                Block(self, f"extra{i + 1}", widths[-1], widths[-1], "plain", 1, 0.5) for i in range(c.extra_convs)
            ]
        self.decoder = []
        for k in range(c.depth - 2, -1, -1):
            w = widths[k]
            up_w = self.register(f"dec{k + 1}.up.weight", (prev, w, 2, 2), fan_in=prev)
            up_b = self.register(f"dec{k + 1}.up.bias", (1, w, 1, 1), zero=True) if c.upsample_bias else None
            self.decoder.append((up_w, up_b, mk(f"dec{k + 1}.conv1", 2 * w, w), mk(f"dec{k + 1}.conv2", w, w)))
            prev = w
        self.head = Conv(self, "head", Conv2dSpec(prev, c.out_channels, kernel=(1, 1)))
        del self._rng

    def register(self, name: str, shape, fan_in: int = 1, zero: bool = False) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        if zero:
            data = np.zeros(shape, dtype=np.float32)
        else:
            std = math.sqrt(2.0 / fan_in)
            data = _truncated_normal(self._rng, shape, std).astype(np.float32)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"load_state_dict ({k})", v.shape, self.params[k].shape)
            self.params[k].data = np.array(v, dtype=np.float32)

    def check_input(self, x: Tensor) -> None:
        n, ch, h, w = x.shape
        if ch != self.config.in_ch:
            raise ShapeError("network input channels", x.shape, (self.config.in_ch,))
        m = 2 ** (self.config.depth - 1)
        if h % m or w % m:
            raise ShapeError(f"network input (spatial dims must be divisible by {m})", x.shape)

    def features(self, x: Tensor) -> dict[str, Tensor]:
        """Forward pass returning intermediate maps: enc1..encD, bottleneck, out."""
        self.check_input(x)
        feats = {}
        skips = []
        for k, (b1, b2) in enumerate(self.encoder):
            if k:
                x = nn.maxpool2x2(x)
            x = b2(b1(x))
            feats[f"enc{k + 1}"] = x
            skips.append(x)
        if self.gia is not None:
            x = self.gia(x)
        for blk in self.extra:
            x = blk(x)
        feats["bottleneck"] = x
        for (up_w, up_b, b1, b2), skip in zip(self.decoder, reversed(skips[:-1])):
            x = nn.conv2d_transposed(x, up_w, up_b)
            x = b2(b1(nn.concat_channels(x, skip)))
        x = nn.depth_to_space(self.head(x), self.config.out_factor)
        feats["out"] = x
        return feats

    def __call__(self, x: Tensor) -> Tensor:
        return self.features(x)["out"]


def _truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def build(config: ArchConfig, seed: int = 0) -> Network:
    return Network(config, seed)


def _as_input(packed) -> Tensor:
    if isinstance(packed, PackedInput):
        return packed.tensor
    if isinstance(packed, Tensor):
        return packed
    return Tensor(np.asarray(packed, dtype=np.float32))


def forward(net: Network, packed) -> Tensor:
    """Unclamped RGB prediction at out_factor x the packed resolution."""
    return net(_as_input(packed))


def predict(net: Network, packed) -> np.ndarray:
    """Inference: no graph, output clamped to [0, 1]."""
    with no_grad():
        out = net(_as_input(packed))
    return np.clip(out.data, 0.0, 1.0)


# -- analytic accounting ---------------------------------------------------


def gia_param_count(channels: int, spec: GiaSpec) -> int:
    return (channels * spec.c1 + spec.c1) + ((channels + spec.c1) * spec.c2 + spec.c2)


def _parse_res(input_res) -> tuple[int, int]:
    if isinstance(input_res, str):
        w, _, h = input_res.lower().partition("x")
        return int(h), int(w)
    h, w = input_res
    return int(h), int(w)


def cost_report(config: ArchConfig, input_res=None, packed: bool = False) -> CostReport:
    """Per-layer params and FLOPs.

    ``input_res`` is the sensor resolution as (H, W) or a ``"WxH"`` string
    (packed resolution if ``packed``). Pooling follows 'same' semantics,
    halving with ceiling, and each decoder upsample is sized to its skip,
    so sensor sizes that are not multiples of 2**(depth-1) remain countable.
    With no resolution only parameters are filled in.
    """
    c = config
    widths = c.widths
    report = CostReport()
    if input_res is None:
        sizes = [(0, 0)] * c.depth
    else:
        h, w = _parse_res(input_res)
        if h < 1 or w < 1:
            raise ValueError(f"resolution must be positive, got {h}x{w}")
        if not packed:
            r = c.out_factor
            if h % r or w % r:
                raise ValueError(f"resolution {w}x{h} is not divisible by the packing factor {r}")
            h, w = h // r, w // r
        sizes = [(h, w)]
        for _ in range(c.depth - 1):
            ph, pw = sizes[-1]
            sizes.append((-(-ph // 2), -(-pw // 2)))

    def conv(name, spec, hw, act=True):
        p, f = nn.conv_cost(spec, *hw)
        if act:
            f += spec.out_ch * hw[0] * hw[1]
        report.add(name, p, f)

    def block(name, i, o, hw, kind=None):
        kind = kind or c.block
        if kind == "sw":
            c_l = max(1, min(o - 1, int(round(o * c.sw_local_fraction))))
            conv(f"{name}.local", Conv2dSpec(i, c_l), hw)
            conv(f"{name}.wide", Conv2dSpec(i, o - c_l, dilation=c.dilation), hw)
        else:
            conv(name, Conv2dSpec(i, o, dilation=c.dilation if kind == "dilated" else 1), hw)

    prev = c.in_ch
    for k, wd in enumerate(widths):
        hw = sizes[k]
        if k:
            ph, pw = sizes[k - 1]
            report.add(f"pool{k}", 0, prev * ph * pw)
        block(f"enc{k + 1}.conv1", prev, wd, hw)
        block(f"enc{k + 1}.conv2", wd, wd, hw)
        prev = wd
    bhw = sizes[-1]
    area = bhw[0] * bhw[1]
    if c.bottleneck == "gia":
        g = c.gia
        report.add("gia.pool", 0, prev * area)
        conv("gia.shrink", Conv2dSpec(prev, g.c1, kernel=(1, 1)), (1, 1))
        report.add("gia.upsample", 0, g.c1 * area)
        conv("gia.fuse", Conv2dSpec(prev + g.c1, g.c2, kernel=(1, 1)), bhw)
        prev = g.c2
    elif c.bottleneck == "extra":
        for i in range(c.extra_convs):
            block(f"extra{i + 1}", prev, prev, bhw, kind="plain")
    for k in range(c.depth - 2, -1, -1):
        wd = widths[k]
        hw = sizes[k]
        p, f = nn.conv_transposed_cost(prev, wd, hw[0], hw[1], c.upsample_bias)
        report.add(f"dec{k + 1}.up", p, f)
        block(f"dec{k + 1}.conv1", 2 * wd, wd, hw)
        block(f"dec{k + 1}.conv2", wd, wd, hw)
        prev = wd
    conv("head", Conv2dSpec(prev, c.out_channels, kernel=(1, 1)), sizes[0], act=False)
    return report


def count_params(config: ArchConfig) -> int:
    return cost_report(config).params


def count_flops(config: ArchConfig, input_res, packed: bool = False) -> int:
    return cost_report(config, input_res, packed).flops


def bottleneck_layers(config: ArchConfig) -> list[tuple[int, int, int]]:
    """(kernel, stride, dilation) chain from the packed input to the bottleneck output.

    See-wider blocks contribute their wider (dilated) branch. The GIA module
    is excluded because its global branch has unbounded reach.
    """
    d = 1 if config.block == "plain" else config.dilation
    layers = []
    for k in range(config.depth):
        if k:
            layers.append((2, 2, 1))
        layers += [(3, 1, d), (3, 1, d)]
    if config.bottleneck == "extra":
        layers += [(3, 1, 1)] * config.extra_convs
    return layers


def bottleneck_receptive_field(config: ArchConfig) -> float:
    """Receptive field (packed pixels) of one bottleneck activation; inf with GIA."""
    if config.bottleneck == "gia":
        return math.inf
    return nn.receptive_field(bottleneck_layers(config))


def bottleneck_support(config: ArchConfig, index: int) -> tuple[int, int]:
    """Packed-input index range (one axis) that can affect bottleneck row/column ``index``."""
    if config.bottleneck == "gia":
        return -math.inf, math.inf
    return nn.support_interval(bottleneck_layers(config), index, index)


def with_overrides(config: ArchConfig, **kw) -> ArchConfig:
    return replace(config, **kw)
