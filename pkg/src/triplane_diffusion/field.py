"""Triplane neural field: plane sampling, positional embedding, decoder.

A triplane stores three N x N x n_f feature maps on the canonical
coordinate planes (XY, XZ, YZ).  The feature of a 3D point is the sum of
the three bilinear plane lookups; a small 2-layer MLP maps that feature
(together with a positional embedding of the point) to density and
color.  Everything is pure and safe to evaluate concurrently; the
feature maps and decoder weights are only mutated by the optimizer
between steps.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ops

# Plane storage convention: plane k has shape (n_f, N, N) indexed
# [channel, row, col] where (col, row) are the first/second projected
# coordinates listed here, both normalized by the extent into [-1, 1].
PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


@dataclass
class Triplane:
    """Three feature planes packed as one tensor plus a world extent.

    features: Tensor (B, 3 * n_f, N, N); plane k occupies channels
    [k * n_f, (k + 1) * n_f).  extent maps world coordinates to plane
    coordinates: q = p / extent must land in [-1, 1] to hit the plane.
    """

    features: ad.Tensor
    n_f: int
    extent: float

    def __post_init__(self):
        b, c, n, n2 = self.features.shape
        if c != 3 * self.n_f or n != n2:
            raise ad.ShapeError(
                f"triplane features must be (B, 3*{self.n_f}, N, N), got {self.features.shape}")
        if self.extent <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")

    @property
    def batch(self):
        return self.features.shape[0]

    @property
    def resolution(self):
        return self.features.shape[2]

    def plane(self, k):
        n_f = self.n_f
        return ops.getitem(self.features, (slice(None), slice(k * n_f, (k + 1) * n_f)))

    def detached(self):
        return Triplane(self.features.detach(), self.n_f, self.extent)


def sample_triplane(tri, points):
    """Features of world points: sum of the three bilinear plane lookups.

    points: ndarray (B, K, 3) world coordinates.  A point outside
    [-extent, extent] in a plane's two coordinates contributes a zero
    vector from that plane.  Returns a Tensor (B, K, n_f); the lookup is
    linear in the plane features and differentiable w.r.t. them.
    """
    points = np.asarray(points)
    if points.ndim != 3 or points.shape[0] != tri.batch or points.shape[2] != 3:
        raise ad.ShapeError(
            f"points must be (B={tri.batch}, K, 3), got {points.shape}")
    q = points / tri.extent
    total = None
    for k, (ax_x, ax_y) in enumerate(PLANE_AXES):
        coords = np.stack([q[..., ax_x], q[..., ax_y]], axis=-1)
        sampled = ops.grid_sample(tri.plane(k), coords)
        total = sampled if total is None else ops.add(total, sampled)
    return total


def positional_embedding(points, n_freq, dtype=np.float64):
    """Raw coordinates plus sin/cos at octave-spaced frequencies 2^k.

    points (..., 3) -> (..., 3 + 6 * n_freq), ordered
    [x, y, z, sin(2^0 p), cos(2^0 p), ..., sin(2^(n-1) p), cos(2^(n-1) p)].
    """
    if n_freq < 0:
        raise ValueError(f"n_freq must be >= 0, got {n_freq}")
    points = np.asarray(points, dtype=dtype)
    out = np.empty(points.shape[:-1] + (3 + 6 * n_freq,), dtype=dtype)
    out[..., :3] = points
    scaled = points.copy()
    for k in range(n_freq):
        if k > 0:
            scaled *= 2.0
        lo = 3 + 6 * k
        np.sin(scaled, out=out[..., lo:lo + 3])
        np.cos(scaled, out=out[..., lo + 3:lo + 6])
    return out


def embedding_dim(n_freq):
    return 3 + 6 * n_freq


@dataclass
class FieldSample:
    """Density (1/world-unit, >= 0) and color in [0, 1]^3 per sample."""

    gamma: ad.Tensor   # (..., )
    color: ad.Tensor   # (..., 3)


class DecoderParams:
    """Weights of the 2-layer point decoder.

    Input is [plane features (n_f) || positional embedding]; one hidden
    SiLU layer, then a linear head whose first channel becomes density
    via softplus and remaining three become color via sigmoid.
    """

    def __init__(self, n_f, n_freq, hidden, rng, dtype=np.float64,
                 density_bias=-4.0):
        in_dim = n_f + embedding_dim(n_freq)
        self.n_f = n_f
        self.n_freq = n_freq
        self.hidden = hidden
        scale1 = np.sqrt(2.0 / in_dim)
        scale2 = np.sqrt(2.0 / hidden)
        self.w1 = ad.parameter(rng.standard_normal((in_dim, hidden)) * scale1, dtype=dtype)
        self.b1 = ad.parameter(np.zeros(hidden), dtype=dtype)
        self.w2 = ad.parameter(rng.standard_normal((hidden, 4)) * scale2, dtype=dtype)
        # negative density bias starts the field near-empty (white background)
        b2 = np.zeros(4)
        b2[0] = density_bias
        self.b2 = ad.parameter(b2, dtype=dtype)

    def named_params(self, prefix="decoder."):
        return [(prefix + name, getattr(self, name)) for name in ("w1", "b1", "w2", "b2")]


def decode(dec, points, features):
    """Map (point, triplane feature) pairs to density and color.

    points: ndarray (B, K, 3); features: Tensor (B, K, n_f).
    Density uses softplus (gamma >= 0 for any finite input), color uses
    sigmoid (each channel in [0, 1]).
    """
    if features.shape[-1] != dec.n_f:
        raise ad.ShapeError(
            f"decoder expects {dec.n_f} feature channels, got {features.shape[-1]}")
    emb = positional_embedding(points, dec.n_freq, dtype=features.dtype)
    x = ops.concat([features, ad.constant(emb)], axis=-1)
    h = ops.silu(ops.linear(x, dec.w1, dec.b1))
    out = ops.linear(h, dec.w2, dec.b2)
    gamma = ops.softplus(ops.getitem(out, (..., 0)))
    color = ops.sigmoid(ops.getitem(out, (..., slice(1, 4))))
    return FieldSample(gamma=gamma, color=color)
