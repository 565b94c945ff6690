"""Inference-time procedures over a trained denoiser.

All samplers share one reverse-chain implementation, so unconditional
generation, reconstruction, and mask-conditioned inpainting differ only
in their starting state and per-step pixel replacement rule.  Every run
is a deterministic function of (params, config, seed): the chain RNG
derives from the seed alone, and renders inside the chain draw from the
same stream.

Images inside the chain live in the [-1, 1] diffusion range with
channels first; SampleRun exposes the final image in [0, 1] HWC.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .denoiser import denoise
from .field import Triplane
from .render import render
from .schedule import ancestral_step, q_sample


@dataclass
class SampleRun:
    """Result of one sampler run: final image, final triplane, provenance.

    The stored triplane is the one produced by the last denoiser call
    (the t = 1 step for chains, the single pass for t_r = 0) and is what
    novel_view renders.
    """

    seed: int
    schedule_hash: str
    camera: object
    params: object
    triplane_features: np.ndarray
    final_pm1: np.ndarray                 # (M, M, 3) chain output in [-1, 1]
    denoiser_calls: int
    t_r: int = None
    trace: list = None

    @property
    def image(self):
        """Final image in [0, 1]."""
        return np.clip((self.final_pm1 + 1.0) / 2.0, 0.0, 1.0)

    def triplane(self):
        return Triplane(ad.constant(self.triplane_features),
                        n_f=self.params.model.n_f,
                        extent=self.params.model.extent)

    def metadata(self):
        return {
            "seed": int(self.seed),
            "t_r": self.t_r,
            "denoiser_calls": int(self.denoiser_calls),
            "schedule_hash": self.schedule_hash,
            "camera": self.camera.to_dict(),
        }

    def write_metadata(self, path):
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class InpaintTask:
    """Known pixels of a target image plus the mask of unknowns (1 = unknown)."""

    image: np.ndarray          # (M, M, 3) in [0, 1]
    mask: np.ndarray           # (M, M) bool or {0, 1}
    camera: object

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} must match image {self.image.shape[:2]}")


def _default_denoiser(params):
    """denoise_fn(x_t (3,M,M), t, camera, rng) -> (x0hat (M,M,3), triplane features)."""
    def call(x_t_chw, t, camera, rng):
        with ad.no_grad():
            x0hat, tri = denoise(params, x_t_chw[None].astype(params.dtype),
                                 np.array([t]), [camera], rng=rng)
        return x0hat.data[0].astype(np.float64), tri.features.data.astype(np.float64)
    return call


def _reverse_chain(params, sched, x_start_chw, t_start, camera, rng,
                   denoise_fn=None, known_mask=None, known_target_pm1=None,
                   keep_trace=False):
    """Ancestral chain from x_{t_start} down to x_0.

    known_mask (M, M) True on pixels pinned to the target: after every
    ancestral step those pixels are replaced by the target noised to
    level t-1 (exactly the target at t-1 = 0).  Predicted x0 estimates
    are clamped to [-1, 1] before the posterior mean.
    """
    fn = denoise_fn or _default_denoiser(params)
    x = np.array(x_start_chw, dtype=np.float64)
    tri_feats = None
    calls = 0
    trace = [] if keep_trace else None
    has_known = known_mask is not None and bool(np.any(known_mask))
    if has_known:
        target_chw = np.transpose(known_target_pm1, (2, 0, 1))

    for t in range(t_start, 0, -1):
        x0hat_hwc, tri_feats = fn(x, t, camera, rng)
        calls += 1
        x0hat = np.clip(np.transpose(x0hat_hwc, (2, 0, 1)), -1.0, 1.0)
        noise = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = ancestral_step(x, x0hat, t, noise, sched)
        if has_known:
            if t - 1 == 0:
                replacement = target_chw
            else:
                replacement = q_sample(target_chw, t - 1,
                                       rng.standard_normal(x.shape), sched)
            x = np.where(known_mask[None], replacement, x)
        if keep_trace:
            trace.append(x.copy())
    return np.transpose(x, (1, 2, 0)), tri_feats, calls, trace


def generate(params, sched, camera, seed, denoise_fn=None, keep_trace=False):
    """Unconditional sample: reverse chain from pure noise, one fixed view."""
    rng = np.random.default_rng([seed])
    m = camera.resolution
    x_start = rng.standard_normal((3, m, m))
    final, tri, calls, trace = _reverse_chain(
        params, sched, x_start, sched.T, camera, rng,
        denoise_fn=denoise_fn, keep_trace=keep_trace)
    return SampleRun(seed=seed, schedule_hash=sched.content_hash(),
                     camera=camera, params=params, triplane_features=tri,
                     final_pm1=final, denoiser_calls=calls, t_r=None,
                     trace=trace)


def reconstruct(params, sched, image01, camera, t_r, seed, denoise_fn=None):
    """Reconstruction with noise-level control.

    t_r = 0: a single denoiser pass on the clean image (exactly one
    call).  Otherwise the image is noised to x_{t_r} in closed form and
    the reverse chain runs from there (exactly t_r calls).
    """
    if not 0 <= t_r <= sched.T:
        raise ValueError(f"t_r {t_r} out of range [0, {sched.T}]")
    rng = np.random.default_rng([seed])
    x0_pm1 = np.asarray(image01, dtype=np.float64) * 2.0 - 1.0
    x0_chw = np.transpose(x0_pm1, (2, 0, 1))
    fn = denoise_fn or _default_denoiser(params)

    if t_r == 0:
        x0hat_hwc, tri = fn(x0_chw, 0, camera, rng)
        return SampleRun(seed=seed, schedule_hash=sched.content_hash(),
                         camera=camera, params=params, triplane_features=tri,
                         final_pm1=np.clip(x0hat_hwc, -1, 1),
                         denoiser_calls=1, t_r=0)

    eps = rng.standard_normal(x0_chw.shape)
    x_start = q_sample(x0_chw, t_r, eps, sched)
    final, tri, calls, _ = _reverse_chain(
        params, sched, x_start, t_r, camera, rng, denoise_fn=denoise_fn)
    return SampleRun(seed=seed, schedule_hash=sched.content_hash(),
                     camera=camera, params=params, triplane_features=tri,
                     final_pm1=final, denoiser_calls=calls, t_r=t_r)


def inpaint(params, sched, task, seed, denoise_fn=None):
    """Mask-conditioned sampling: reverse chain from pure noise where,
    after each step, known pixels are set to the noised target."""
    rng = np.random.default_rng([seed])
    m = task.camera.resolution
    x_start = rng.standard_normal((3, m, m))
    known = ~task.mask
    target_pm1 = task.image * 2.0 - 1.0
    final, tri, calls, _ = _reverse_chain(
        params, sched, x_start, sched.T, task.camera, rng,
        denoise_fn=denoise_fn, known_mask=known, known_target_pm1=target_pm1)
    return SampleRun(seed=seed, schedule_hash=sched.content_hash(),
                     camera=task.camera, params=params, triplane_features=tri,
                     final_pm1=final, denoiser_calls=calls, t_r=None)


def novel_view(run, camera):
    """Deterministic midpoint render of the run's final triplane."""
    if run.triplane_features is None:
        raise ValueError("run holds no triplane (oracle-denoiser runs do not)")
    return render(run.triplane(), run.params.decoder, camera,
                  run.params.render, rng=None)


def mask_for_eval(rng, m):
    """Square evaluation mask: side 40% of the image, its centre uniform
    inside the centred square with side 5/16 of the image."""
    if m < 16:
        raise ValueError(f"mask rule needs image size >= 16, got {m}")
    side = round(0.4 * m)
    region_half = 5.0 * m / 32.0
    lo = math.ceil(m / 2.0 - region_half - side / 2.0)
    hi = math.floor(m / 2.0 + region_half - side / 2.0)
    top = int(rng.integers(lo, hi + 1))
    left = int(rng.integers(lo, hi + 1))
    mask = np.zeros((m, m), dtype=bool)
    mask[top:top + side, left:left + side] = True
    return mask
