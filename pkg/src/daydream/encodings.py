"""Scalar-to-distribution codecs shared by the reward predictor and the critic.

Values are squashed with a sign-preserving log transform, then spread as weights
over the two bucket centers bracketing them. Decoding is the dot product with
the centers followed by the inverse squash.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .config import ConfigError


def symlog(x):
    """sign(x) * ln(1 + |x|); accepts a float or a tensor."""
    if isinstance(x, torch.Tensor):
        if not torch.isfinite(x).all():
            raise ValueError("symlog requires finite input")
        return torch.sign(x) * torch.log1p(torch.abs(x))
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("symlog requires finite input")
    return math.copysign(math.log1p(abs(x)), x) if x else 0.0


def symexp(y):
    """Inverse of symlog: sign(y) * (exp(|y|) - 1)."""
    if isinstance(y, torch.Tensor):
        if not torch.isfinite(y).all():
            raise ValueError("symexp requires finite input")
        return torch.sign(y) * torch.expm1(torch.abs(y))
    y = float(y)
    if not math.isfinite(y):
        raise ValueError("symexp requires finite input")
    return math.copysign(math.expm1(abs(y)), y) if y else 0.0


@dataclass(frozen=True)
class BucketSpec:
    """K equally spaced bucket centers on [lo, hi]."""

    count: int
    lo: float
    hi: float
    centers: torch.Tensor = field(repr=False, default=None)

    def __post_init__(self):
        if self.count < 2:
            raise ConfigError("BucketSpec needs at least 2 buckets")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ConfigError("BucketSpec needs finite lo < hi")
        if self.centers is None:
            centers = torch.linspace(self.lo, self.hi, self.count, dtype=torch.float64)
            object.__setattr__(self, "centers", centers)
        else:
            c = self.centers.to(torch.float64)
            if c.shape != (self.count,):
                raise ConfigError("centers length must equal count")
            diffs = c[1:] - c[:-1]
            if not (diffs > 0).all():
                raise ConfigError("centers must be strictly increasing")
            step = (self.hi - self.lo) / (self.count - 1)
            if (diffs - step).abs().max().item() > 1e-9 * abs(step):
                raise ConfigError("centers must be uniformly spaced")
            object.__setattr__(self, "centers", c)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.count - 1)


def two_hot_encode(value, spec: BucketSpec) -> torch.Tensor:
    """Spread a value (clamped into [lo, hi]) over its two bracketing centers.

    A value sitting exactly on a center yields a strict one-hot. Returns
    float64 weights shaped like the input plus a trailing bucket axis.
    """
    v = torch.as_tensor(value, dtype=torch.float64)
    if not torch.isfinite(v).all():
        raise ValueError("two_hot_encode requires finite values")
    shape = v.shape
    flat = v.reshape(-1).clamp(spec.lo, spec.hi)
    k = torch.searchsorted(spec.centers, flat, right=True) - 1
    k = k.clamp(0, spec.count - 2)
    frac = (flat - spec.centers[k]) / (spec.centers[k + 1] - spec.centers[k])
    weights = torch.zeros(flat.numel(), spec.count, dtype=torch.float64)
    rows = torch.arange(flat.numel())
    weights[rows, k] = 1.0 - frac
    weights[rows, k + 1] += frac
    return weights.reshape(*shape, spec.count)


def two_hot_decode(weights: torch.Tensor, spec: BucketSpec) -> torch.Tensor:
    """Dot product with the bucket centers; also accepts arbitrary softmax output."""
    weights = torch.as_tensor(weights)
    if weights.shape[-1] != spec.count:
        raise ValueError(
            f"weight length {weights.shape[-1]} does not match bucket count {spec.count}"
        )
    return weights @ spec.centers.to(weights.dtype)
