"""Differentiable volume rendering of a triplane field along camera rays.

Two-pass scheme: a coarse stratified pass places samples, its weights
drive inverse-CDF importance sampling, and the merged depth set is
decoded and composited into the final image.  The coarse pass runs
without recording (sample placement is not differentiated); the fine
pass is differentiable end-to-end w.r.t. the triplane features and
decoder weights.

Compositing uses explicit weights: alpha_i = 1 - exp(-gamma_i delta_i),
transmittance T_i = prod_{j<i} (1 - alpha_j) computed as
exp(-cumsum(gamma delta)), weights w_i = T_i alpha_i.  The last segment
length is far - t_last.

With ``rng=None`` rendering is fully deterministic: coarse samples sit
at bin midpoints and importance samples at fixed CDF quantiles, so two
calls are bit-identical.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .cameras import camera_rays
from .field import decode, sample_triplane

OPACITY_FLOOR = 1e-3   # below this, depth reports far
_WEIGHT_EPS = 1e-8     # degenerate importance distributions fall back to uniform


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 32
    n_fine: int = 32
    background: tuple = (1.0, 1.0, 1.0)   # fixed white, CLEVR-style
    near: float = 0.5
    far: float = 6.0

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")


def segment_lengths(depths, far):
    """Per-sample segment lengths; the last segment is far - t_last."""
    d = np.diff(depths, axis=-1)
    last = far - depths[..., -1:]
    return np.concatenate([d, last], axis=-1)


@dataclass
class RaySamples:
    """Ordered samples along a bundle of rays.

    depths: ndarray (..., S), non-decreasing along the last axis (exact
    ties can occur where merged coarse/fine depths coincide; they carry
    zero segment length).  gamma: Tensor (..., S); color: Tensor (..., S, 3).
    """

    depths: np.ndarray
    far: float
    gamma: ad.Tensor
    color: ad.Tensor

    def __post_init__(self):
        if np.any(np.diff(self.depths, axis=-1) < 0):
            raise ValueError("sample depths must be sorted along each ray")
        if self.gamma.shape != self.depths.shape:
            raise ad.ShapeError(
                f"gamma shape {self.gamma.shape} != depths shape {self.depths.shape}")
        if self.color.shape != self.depths.shape + (3,):
            raise ad.ShapeError(f"color shape {self.color.shape} invalid")

    @property
    def deltas(self):
        return segment_lengths(self.depths, self.far)


@dataclass
class RenderOutput:
    rgb: ad.Tensor          # (M, M, 3) in [0, 1], background-blended
    depth: np.ndarray       # (M, M) expected termination depth
    opacity: ad.Tensor      # (M, M) accumulated alpha
    fine_depths: np.ndarray = dc_field(default=None, repr=False)


def stratified_depths(near, far, n, rng, batch_shape=()):
    """One uniform draw per equal-width bin partitioning [near, far]."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    width = (far - near) / n
    base = near + np.arange(n) * width
    u = rng.random(batch_shape + (n,))
    return base + u * width


def midpoint_depths(near, far, n, batch_shape=()):
    width = (far - near) / n
    mids = near + (np.arange(n) + 0.5) * width
    return np.broadcast_to(mids, batch_shape + (n,)).copy()


def importance_depths(coarse_weights, n_fine, near, far, rng=None):
    """Inverse-CDF samples from the piecewise-constant distribution given
    by the normalized coarse weights over the equal-width coarse bins.

    Rays whose weights are degenerate (non-positive or near-zero total)
    fall back to the uniform distribution.  With ``rng=None`` the samples
    sit at the fixed quantiles (i + 0.5) / n_fine.
    """
    w = np.asarray(coarse_weights, dtype=np.float64)
    n_bins = w.shape[-1]
    w = np.maximum(w, 0.0)
    total = w.sum(axis=-1, keepdims=True)
    degenerate = total < _WEIGHT_EPS
    w = np.where(degenerate, 1.0, w)
    total = np.where(degenerate, float(n_bins), total)
    pdf = w / total
    cdf = np.cumsum(pdf, axis=-1)
    cdf[..., -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine,
                            w.shape[:-1] + (n_fine,)).copy()
    else:
        u = rng.random(w.shape[:-1] + (n_fine,))

    # first bin with cdf >= u
    idx = np.sum(cdf[..., None, :] < u[..., None], axis=-1)
    idx = np.minimum(idx, n_bins - 1)
    cdf_prev = np.where(idx > 0,
                        np.take_along_axis(cdf, np.maximum(idx - 1, 0), axis=-1),
                        0.0)
    bin_mass = np.take_along_axis(pdf, idx, axis=-1)
    frac = (u - cdf_prev) / np.maximum(bin_mass, 1e-12)
    frac = np.clip(frac, 0.0, 1.0)
    width = (far - near) / n_bins
    return near + (idx + frac) * width


def composite(samples, background):
    """Alpha-composite ordered ray samples over a background color.

    Returns (rgb, depth, opacity): rgb and opacity are differentiable
    tensors; depth is a plain array (sum w_i t_i / max(opacity, eps),
    reporting far where opacity < 1e-3).
    """
    gamma_data = samples.gamma.data
    if not np.all(np.isfinite(gamma_data)):
        bad = np.argwhere(~np.isfinite(gamma_data).all(axis=-1))
        raise ad.NonFiniteError(
            f"non-finite density along ray index {tuple(bad[0])}")
    deltas = samples.deltas
    s = ops.mul(samples.gamma, ad.constant(deltas.astype(gamma_data.dtype)))
    s_inc = ops.cumsum(s, axis=-1)
    s_exc = ops.sub(s_inc, s)
    trans = ops.exp(ops.neg(s_exc))
    weights = ops.sub(trans, ops.exp(ops.neg(s_inc)))   # T_i * alpha_i
    opacity = ops.tensor_sum(weights, axis=-1)

    bg = np.asarray(background, dtype=gamma_data.dtype)
    w3 = ops.reshape(weights, weights.shape + (1,))
    rgb_fg = ops.tensor_sum(ops.mul(w3, samples.color), axis=-2)
    bg_term = ops.mul(
        ops.reshape(ops.sub(ad.constant(np.asarray(1.0, dtype=gamma_data.dtype)), opacity),
                    opacity.shape + (1,)),
        ad.constant(bg))
    rgb = ops.add(rgb_fg, bg_term)

    w = weights.data
    opac = opacity.data
    depth = (w * samples.depths).sum(axis=-1) / np.maximum(opac, OPACITY_FLOOR)
    depth = np.where(opac < OPACITY_FLOOR, samples.far, depth)
    return rgb, depth, opacity


def _query(tri, dec, field_fn, points):
    """Evaluate the field at (B, R, S, 3) points -> gamma (B,R,S), color (B,R,S,3)."""
    b, r, s, _ = points.shape
    flat = points.reshape(b, r * s, 3)
    if field_fn is not None:
        gamma, color = field_fn(flat)
        gamma = ad.constant(np.asarray(gamma).reshape(b, r, s))
        color = ad.constant(np.asarray(color).reshape(b, r, s, 3))
        return gamma, color
    feats = sample_triplane(tri, flat)
    out = decode(dec, flat, feats)
    return (ops.reshape(out.gamma, (b, r, s)),
            ops.reshape(out.color, (b, r, s, 3)))


def render_rays(tri, dec, origins, dirs, cfg, rng=None, field_fn=None,
                fixed_depths=None):
    """Render a bundle of rays: origins (B, 3), dirs (B, R, 3).

    Returns (rgb (B,R,3) Tensor, depth (B,R) ndarray, opacity (B,R) Tensor,
    merged fine depths (B,R,S)).  If ``fixed_depths`` is given, sampling
    is skipped entirely and the single differentiable pass runs on those
    depths (test hook for finite-difference gradient checks).
    """
    b, r, _ = dirs.shape
    near, far = cfg.near, cfg.far

    def query_at(depths):
        pts = origins[:, None, None, :] + dirs[:, :, None, :] * depths[..., None]
        return _query(tri, dec, field_fn, pts)

    if fixed_depths is None:
        if rng is None:
            coarse = midpoint_depths(near, far, cfg.n_coarse, (b, r))
        else:
            coarse = stratified_depths(near, far, cfg.n_coarse, rng, (b, r))
        gamma, color = query_at(coarse)
        depths = coarse
        if cfg.n_fine > 0:
            # Sample placement sees detached densities only: gradients
            # reach the coarse samples through the final composite, never
            # through where the fine samples land.
            s = gamma.data * segment_lengths(coarse, far)
            s_exc = np.cumsum(s, axis=-1) - s
            cw = np.exp(-s_exc) * (1.0 - np.exp(-s))
            fine = importance_depths(cw, cfg.n_fine, near, far, rng)
            gamma_f, color_f = query_at(fine)
            cat = np.concatenate([coarse, fine], axis=-1)
            order = np.argsort(cat, axis=-1, kind="stable")
            depths = np.take_along_axis(cat, order, axis=-1)
            gamma = ops.permute_along_axis(
                ops.concat([gamma, gamma_f], axis=-1), order, axis=-1)
            color = ops.permute_along_axis(
                ops.concat([color, color_f], axis=-2), order[..., None], axis=-2)
    else:
        depths = np.asarray(fixed_depths, dtype=np.float64)
        if depths.shape[:2] != (b, r):
            raise ad.ShapeError(
                f"fixed_depths must be (B={b}, R={r}, S), got {depths.shape}")
        gamma, color = query_at(depths)

    samples = RaySamples(depths, far, gamma, color)
    rgb, depth, opacity = composite(samples, cfg.background)
    return rgb, depth, opacity, depths


def render(tri, dec, cam, cfg, rng=None, field_fn=None, fixed_depths=None):
    """Render one camera view of a (batch-1) triplane field."""
    if field_fn is None and tri.batch != 1:
        raise ad.ShapeError(f"render expects a batch-1 triplane, got batch {tri.batch}")
    m = cam.resolution
    origin, dirs, _, _ = camera_rays(cam, cfg.near, cfg.far)
    try:
        rgb, depth, opacity, depths = render_rays(
            tri, dec, origin[None], dirs[None], cfg, rng=rng,
            field_fn=field_fn, fixed_depths=fixed_depths)
    except ad.NonFiniteError as err:
        raise ad.NonFiniteError(f"{err} (image {m}x{m}, row-major rays)") from None
    return RenderOutput(
        rgb=ops.reshape(ops.getitem(rgb, 0), (m, m, 3)),
        depth=depth[0].reshape(m, m),
        opacity=ops.reshape(ops.getitem(opacity, 0), (m, m)),
        fine_depths=depths[0].reshape(m, m, -1),
    )


def render_views(tri, dec, cams, cfg, rng=None):
    """Render one view per batch element: cams is a length-B sequence.

    Returns (rgb Tensor (B, M, M, 3), opacity Tensor (B, R)).  Used by
    training, where every batch element carries its own camera.
    """
    if len(cams) != tri.batch:
        raise ad.ShapeError(f"{len(cams)} cameras for triplane batch {tri.batch}")
    m = cams[0].resolution
    origins = np.stack([c.position for c in cams])
    dirs = np.stack([camera_rays(c, cfg.near, cfg.far)[1] for c in cams])
    rgb, _, opacity, _ = render_rays(tri, dec, origins, dirs, cfg, rng=rng)
    return ops.reshape(rgb, (tri.batch, m, m, 3)), opacity
