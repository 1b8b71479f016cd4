"""Input checks shared by the estimator layer and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .raw import PACKED_CHANNELS, PackedInput, Sample
from .tensor import Tensor


def check_packed(x, in_ch: int | None = None) -> PackedInput:
    """Coerce an array, Tensor or PackedInput to a single-image PackedInput."""
    if isinstance(x, PackedInput):
        p = x
    else:
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        p = PackedInput(Tensor(data), 1.0)
    shape = p.tensor.shape
    if len(shape) != 4 or shape[0] != 1:
        raise ValueError(f"expected one packed image (1, C, h, w), got {shape}")
    if shape[1] not in PACKED_CHANNELS.values():
        raise ValueError(f"packed input must have 4 or 9 channels, got {shape[1]}")
    if in_ch is not None and shape[1] != in_ch:
        raise ValueError(f"model expects {in_ch} channels, got {shape[1]}")
    if not np.isfinite(p.tensor.data).all():
        raise ValueError("packed input contains non-finite values")
    return p


def check_target(y, packed: PackedInput) -> np.ndarray:
    t = np.asarray(y, dtype=np.float32)
    if t.ndim == 3:
        t = t[None]
    r = packed.factor
    h, w = packed.tensor.shape[2:]
    if t.shape != (1, 3, r * h, r * w):
        raise ValueError(f"target must be (1, 3, {r * h}, {r * w}) for this input, got {t.shape}")
    return t


def check_pairs(X: Sequence, y: Sequence) -> list[Sample]:
    """Validate a paired training set and wrap it as Samples."""
    if len(X) == 0:
        raise ValueError("no training pairs")
    if len(X) != len(y):
        raise ValueError(f"{len(X)} inputs but {len(y)} targets")
    out = []
    for i, (x, t) in enumerate(zip(X, y)):
        p = check_packed(x)
        out.append(Sample(p, check_target(t, p), ids=f"pair-{i:04d}"))
    channels = {s.input.tensor.shape[1] for s in out}
    if len(channels) > 1:
        raise ValueError(f"mixed channel counts {sorted(channels)}")
    return out
