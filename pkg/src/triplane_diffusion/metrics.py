"""Image-space evaluation: PSNR and SSIM over held-out test views.

Both metrics operate on [0, 1] images.  SSIM uses the standard 11x11
Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1,
computed per channel on the interior (valid-convolution) region and
averaged; these match the usual reference implementations to float
precision.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .render import RenderConfig
from .samplers import novel_view, reconstruct

PSNR_CAP_DB = 99.0
_PSNR_CAP_MSE = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b):
    """10 log10(1 / MSE) in dB, capped at 99 dB for near-identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < _PSNR_CAP_MSE:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel():
    radius = SSIM_WINDOW // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(img, kernel):
    """Separable 2-D convolution, valid region only."""
    from numpy.lib.stride_tricks import sliding_window_view

    w = kernel.size
    rows = sliding_window_view(img, w, axis=0) @ kernel
    return sliding_window_view(rows, w, axis=1) @ kernel


def _ssim_single(a, b):
    kernel = _gaussian_kernel()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    aa = _filter_valid(a * a, kernel) - mu_a * mu_a
    bb = _filter_valid(b * b, kernel) - mu_b * mu_b
    ab = _filter_valid(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (aa + bb + c2)
    return np.mean(num / den)


def ssim(a, b):
    """Mean local structural similarity; channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if a.ndim == 2:
        return float(_ssim_single(a, b))
    return float(np.mean([_ssim_single(a[..., c], b[..., c])
                          for c in range(a.shape[-1])]))


@dataclass
class SceneReport:
    scene_id: int
    input_view: int
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim_values))


@dataclass
class MetricReport:
    scenes: list
    t_r: int

    @property
    def psnr(self):
        all_vals = [v for s in self.scenes for v in s.psnr_values]
        return float(np.mean(all_vals))

    @property
    def ssim(self):
        all_vals = [v for s in self.scenes for v in s.ssim_values]
        return float(np.mean(all_vals))

    def summary_lines(self):
        lines = [f"{'scene':>6} {'views':>5} {'psnr_db':>8} {'ssim':>7}"]
        for s in self.scenes:
            lines.append(f"{s.scene_id:>6} {len(s.psnr_values):>5} "
                         f"{s.mean_psnr:>8.2f} {s.mean_ssim:>7.4f}")
        lines.append(f"{'all':>6} {sum(len(s.psnr_values) for s in self.scenes):>5} "
                     f"{self.psnr:>8.2f} {self.ssim:>7.4f}")
        return lines

    def key_values(self):
        out = {"t_r": self.t_r, "psnr_db": self.psnr, "ssim": self.ssim}
        for s in self.scenes:
            out[f"scene_{s.scene_id}/psnr_db"] = s.mean_psnr
            out[f"scene_{s.scene_id}/ssim"] = s.mean_ssim
        return out

    def write(self, txt_path, kv_path):
        with open(txt_path, "w") as fh:
            fh.write("\n".join(self.summary_lines()) + "\n")
        with open(kv_path, "w") as fh:
            for key, val in self.key_values().items():
                fh.write(f"{key}={val:.6f}\n" if isinstance(val, float)
                         else f"{key}={val}\n")


def evaluate_reconstruction(params, dataset, sched, t_r=0, seed=0,
                            eval_render=None, scene_override=None):
    """Reconstruct each scene from its first test view; render the final
    triplane from every other held-out test camera and score vs ground
    truth.  ``scene_override(scene_id) -> SampleRun-like`` is a test hook
    substituting the reconstruction (e.g. an oracle field).
    """
    eval_render = eval_render or RenderConfig(
        n_coarse=params.render.n_coarse, n_fine=params.render.n_fine,
        background=params.render.background, near=params.render.near,
        far=params.render.far)
    reports = []
    for scene_id in dataset.scene_ids:
        test_views = dataset.scene_views(scene_id, split="test")
        if not test_views:
            raise ValueError(f"scene {scene_id} has no test views")
        input_view = test_views[0]
        if scene_override is not None:
            run = scene_override(scene_id)
        else:
            run = reconstruct(params, sched, input_view.image,
                              input_view.camera, t_r, seed)
        held_out = test_views[1:] if len(test_views) > 1 else test_views
        report = SceneReport(scene_id=scene_id, input_view=input_view.view_id)
        for view in held_out:
            if scene_override is not None:
                rendered = run(view.camera)
            else:
                out = novel_view(run, view.camera)
                rendered = np.clip(out.rgb.data, 0.0, 1.0)
            report.psnr_values.append(psnr(rendered, view.image))
            report.ssim_values.append(ssim(rendered, view.image))
        reports.append(report)
    if not reports:
        raise ValueError("dataset has no scenes to evaluate")
    return MetricReport(scenes=reports, t_r=t_r)
