"""Feature maps for linear attention, including the 2nd-order Taylor map.

The Taylor map approximates exp(q.k / sqrt(d')) with its quadratic Taylor
expansion. With the scaling baked into the feature layout,

    phi(x) = [1 | x / d'^(1/4) | vec(x outer x) / (sqrt(2) * sqrt(d'))]

the inner product comes out as phi(q).phi(k) = 1 + a + a^2/2 for
a = q.k / sqrt(d'), which is bounded below by 1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError, ParameterError, ShapeError
from .tensor import Tensor

TAGS = ("TaylorExp2", "PosELU", "ReLU", "Square", "Identity")


@dataclass(frozen=True)
class FeatureMapKind:
    """Which map to apply; `d_prime` is the expected input width (Taylor only)."""

    tag: str
    d_prime: int | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ParameterError(f"unknown feature map tag {self.tag!r}; expected one of {TAGS}")
        if self.tag == "TaylorExp2":
            if self.d_prime is None or self.d_prime < 1:
                raise ParameterError(f"TaylorExp2 requires d_prime >= 1, got {self.d_prime}")


def taylor_exp2(d_prime: int) -> FeatureMapKind:
    return FeatureMapKind("TaylorExp2", d_prime)


@dataclass(frozen=True)
class DimReport:
    """Feature counts: fully materialized, symmetric-unique, and tile-padded."""

    materialized: int
    unique: int
    padded: int


def unique_dim(d_prime: int) -> int:
    """Distinct monomials of the Taylor map: 1 + d' + d'(d'+1)/2."""
    return 1 + d_prime + d_prime * (d_prime + 1) // 2


def feature_dim(kind: FeatureMapKind) -> int:
    """Output width of `apply` for this kind."""
    if kind.tag == "TaylorExp2":
        return 1 + kind.d_prime + kind.d_prime * kind.d_prime
    if kind.d_prime is None:
        raise ParameterError(f"{kind.tag} needs d_prime to state its width")
    return kind.d_prime


def dims(kind: FeatureMapKind, tile: int = 1) -> DimReport:
    """Materialized / unique / padded widths; padding rounds up to `tile`."""
    if tile < 1:
        raise ParameterError(f"tile must be >= 1, got {tile}")
    if kind.tag == "TaylorExp2":
        materialized = 1 + kind.d_prime + kind.d_prime * kind.d_prime
        unique = unique_dim(kind.d_prime)
    else:
        materialized = unique = feature_dim(kind)
    padded = ((materialized + tile - 1) // tile) * tile
    return DimReport(materialized, unique, padded)


def _taylor_features(x: Tensor) -> Tensor:
    """Materialize [1 | x/d'^(1/4) | vec(outer)/ (sqrt2 * sqrt d')] on the last axis."""
    d = x.shape[-1]
    rd = math.sqrt(d)
    rrd = math.sqrt(rd)
    r2 = math.sqrt(2.0)
    lead = x.shape[:-1]
    ones = np.ones(lead + (1,), dtype=x.dtype)
    lin = x.data / rrd
    outer = (x.data[..., :, None] * x.data[..., None, :]).reshape(lead + (d * d,)) / (r2 * rd)
    out = np.concatenate([ones, lin, outer], axis=-1)

    def backward(g):
        if not x.requires_grad:
            return
        g_lin = g[..., 1:1 + d]
        g_outer = g[..., 1 + d:].reshape(lead + (d, d))
        sym = g_outer + np.swapaxes(g_outer, -1, -2)
        dx = g_lin / rrd + np.einsum("...ij,...j->...i", sym, x.data) / (r2 * rd)
        T.accumulate(x, dx)

    return T.from_op(out, (x,), backward)


def apply(kind: FeatureMapKind, x: Tensor) -> Tensor:
    """Apply the map along the trailing axis of `x`.

    Raises on non-finite input and, for the Taylor map, on a trailing-axis
    width other than d'.
    """
    if not np.isfinite(x.data).all():
        raise NumericError(f"{kind.tag}: non-finite input")
    if kind.tag == "TaylorExp2":
        if x.shape[-1] != kind.d_prime:
            raise ShapeError(f"TaylorExp2 expects width {kind.d_prime}, got input shape {x.shape}")
        return _taylor_features(x)
    if kind.tag == "PosELU":
        return T.pos_elu(x)
    if kind.tag == "ReLU":
        return T.relu(x)
    if kind.tag == "Square":
        return T.mul(x, x)
    return x  # Identity


def taylor_compact(x: np.ndarray) -> np.ndarray:
    """Unique-monomial layout of the Taylor map (numpy-only decode path).

    One entry per monomial: [1 | x_i/d'^(1/4) | x_i x_j * c_ij for i <= j]
    with c_ii = 1/(sqrt2 * sqrt d') and c_ij = 1/sqrt(d') off the diagonal,
    so that compact(q).compact(k) equals the materialized inner product.
    """
    x = np.asarray(x)
    d = x.shape[-1]
    rd = math.sqrt(d)
    rrd = math.sqrt(rd)
    iu, ju = np.triu_indices(d)
    coeff = np.where(iu == ju, 1.0 / (math.sqrt(2.0) * rd), 1.0 / rd)
    parts = [
        np.ones(x.shape[:-1] + (1,), dtype=x.dtype),
        x / rrd,
        x[..., iu] * x[..., ju] * coeff,
    ]
    return np.concatenate(parts, axis=-1)


def apply_numpy(kind: FeatureMapKind, x: np.ndarray) -> np.ndarray:
    """Graph-free twin of `apply` for decode-time code paths."""
    if kind.tag == "TaylorExp2":
        d = x.shape[-1]
        if d != kind.d_prime:
            raise ShapeError(f"TaylorExp2 expects width {kind.d_prime}, got input shape {x.shape}")
        rd = math.sqrt(d)
        outer = (x[..., :, None] * x[..., None, :]).reshape(x.shape[:-1] + (d * d,))
        return np.concatenate(
            [np.ones(x.shape[:-1] + (1,), dtype=x.dtype), x / math.sqrt(rd), outer / (math.sqrt(2.0) * rd)],
            axis=-1,
        )
    if kind.tag == "PosELU":
        return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    if kind.tag == "ReLU":
        return np.maximum(x, 0.0)
    if kind.tag == "Square":
        return x * x
    return x
