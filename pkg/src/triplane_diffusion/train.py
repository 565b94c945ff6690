"""Training loop: x0-prediction L1 loss plus the optional score-distillation
regularizer, Adam updates, line-delimited metrics, and checkpointing.

Determinism contract: every stochastic choice at step k is drawn from a
generator seeded by (seed, k), and the optimizer state rides along in
checkpoints, so resuming from step k and training to 2k reproduces the
uninterrupted run bit-for-bit (single-worker mode).  With multiple
workers the batch is chunked; per-chunk gradients are merged in chunk
order, so results are reproducible for a fixed worker count.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import schedule as sch
from .autodiff import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import denoise, encode
from .optim import Adam
from .render import render_views

METRICS_NAME = "metrics.jsonl"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint is preserved."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    steps: int = 2000
    lr: float = 1e-4
    lambda_sd: float = 0.0       # regularizer off by default for this data
    rho_sd: float = 0.5
    seed: int = 0
    checkpoint_every: int = 500
    workers: int = 1
    ema_decay: float = 0.0       # 0 disables EMA tracking

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_sd < 0:
            raise ValueError("lambda_sd must be >= 0")
        if not 0.0 <= self.rho_sd <= 1.0:
            raise ValueError("rho_sd must be in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def q_sample_batch(x0, t, eps, sched):
    """Vectorized forward noising with one timestep per batch element."""
    t = np.asarray(t)
    ab = sched.alpha_bar[t].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _to_hwc_pm1(images_chw):
    return np.transpose(images_chw, (0, 2, 3, 1))


def denoise_loss(params, x0, cams, t, eps, sched, rng=None):
    """Mean absolute error between the re-rendered denoised image and x0.

    x0: (B, 3, M, M) in [-1, 1] with known cameras; t: (B,) in 1..T;
    eps: standard normal, same shape as x0.  Returns (loss Tensor,
    triplane) so the caller can reuse the encoded scene.
    """
    x_t = q_sample_batch(x0, t, eps, sched)
    x0hat, tri = denoise(params, x_t.astype(params.dtype), t, cams, rng=rng)
    target = ad.constant(_to_hwc_pm1(x0).astype(params.dtype))
    loss = ops.tensor_mean(ops.absolute(ops.sub(x0hat, target)))
    return loss, tri


def score_distillation_loss(params, tri, cams_r, t, sched, rng,
                            inner_denoiser=None):
    """Render the denoised scene from random poses and penalize the
    denoiser's failure to recover that render after re-noising it.

    Gradient flows only through the first render; the inner denoiser
    evaluation is detached (treated as a fixed function of its input).
    ``inner_denoiser`` is a test hook replacing the real denoiser; it
    receives (x_t (B,3,M,M), t) and returns an (B,M,M,3) image in [-1,1].
    """
    rgb, _ = render_views(tri, params.decoder, cams_r, params.render, rng=rng)
    two = ad.constant(np.asarray(2.0, dtype=params.dtype))
    one = ad.constant(np.asarray(1.0, dtype=params.dtype))
    x_r = ops.sub(ops.mul(rgb, two), one)                  # (B, M, M, 3) in [-1, 1]

    x_r_chw = np.transpose(x_r.data, (0, 3, 1, 2))
    eps = rng.standard_normal(x_r_chw.shape) if rng is not None else np.zeros_like(x_r_chw)
    noised = q_sample_batch(x_r_chw, t, eps, sched).astype(params.dtype)
    with ad.no_grad():
        if inner_denoiser is None:
            redenoised, _ = denoise(params, noised, t, cams_r, rng=rng)
            target = redenoised.data
        else:
            target = inner_denoiser(noised, t)
    return ops.tensor_mean(ops.absolute(ops.sub(x_r, ad.constant(target))))


@dataclass
class TrainState:
    params: object
    optimizer: Adam
    sched: object
    step: int = 0
    ema: dict = field(default_factory=dict)


def _train_views(dataset):
    views = dataset.split("train")
    if not views:
        raise ValueError("dataset has no training views")
    return views


def _batch_arrays(views, idx):
    x0 = np.stack([views[i].image.transpose(2, 0, 1) * 2.0 - 1.0 for i in idx])
    cams = [views[i].camera for i in idx]
    return x0, cams


def train_step(state, views, cfg, step, workers_pool=None):
    """One optimization step; returns (denoise_loss, sd_loss) floats."""
    params, sched = state.params, state.sched
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.integers(len(views), size=cfg.batch_size)
    t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
    x0, cams = _batch_arrays(views, idx)
    eps = rng.standard_normal(x0.shape)
    use_sd = cfg.lambda_sd > 0 and rng.random() < cfg.rho_sd
    if use_sd:
        r_idx = rng.integers(len(views), size=cfg.batch_size)
        cams_r = [views[i].camera for i in r_idx]
        sd_seed = rng.integers(2 ** 31)

    def run_chunk(sl, weight):
        store = {}
        chunk_rng = np.random.default_rng([cfg.seed, step, int(sl.start)])
        with ad.Tape():
            dl, tri = denoise_loss(params, x0[sl], cams[sl], t[sl], eps[sl],
                                   sched, rng=chunk_rng)
            sd = None
            if use_sd:
                sd_rng = np.random.default_rng([sd_seed, int(sl.start)])
                sd = score_distillation_loss(params, tri, cams_r[sl], t[sl],
                                             sched, sd_rng)
                total = ops.add(dl, ops.mul(sd, ad.constant(
                    np.asarray(cfg.lambda_sd, dtype=params.dtype))))
            else:
                total = dl
            scaled = ops.mul(total, ad.constant(
                np.asarray(weight, dtype=params.dtype)))
            ad.backward(scaled, grad_store=store)
        return float(dl.data), float(sd.data) if sd is not None else 0.0, store

    bounds = np.linspace(0, cfg.batch_size, min(cfg.workers, cfg.batch_size) + 1,
                         dtype=int)
    chunks = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])
              if b > a]
    weights = [(sl.stop - sl.start) / cfg.batch_size for sl in chunks]

    try:
        if len(chunks) == 1:
            results = [run_chunk(chunks[0], weights[0])]
        else:
            results = list(workers_pool.map(run_chunk, chunks, weights))
    except ad.NonFiniteError as err:
        raise TrainingDiverged(f"non-finite value at step {step}: {err}") from err

    dl_total, sd_total = 0.0, 0.0
    for (dl_val, sd_val, store), w in zip(results, weights):
        dl_total += w * dl_val
        sd_total += w * sd_val
        for p, g in store.items():
            p.accumulate_grad(g)

    if not (np.isfinite(dl_total) and np.isfinite(sd_total)):
        raise TrainingDiverged(f"non-finite loss at step {step}")

    state.optimizer.step()
    state.optimizer.zero_grad()
    state.step = step
    if cfg.ema_decay > 0:
        d = cfg.ema_decay
        for name, p in params.named_params():
            ema = state.ema.setdefault(name, p.data.copy())
            ema *= d
            ema += (1.0 - d) * p.data
    return dl_total, sd_total


def _save(state, cfg, path):
    opt_state = state.optimizer.state_dict()
    for name, arr in state.ema.items():
        opt_state[f"ema/{name}"] = arr
    save_checkpoint(
        path, state.params,
        schedule_cfg={"T": state.sched.T, "s": state.sched.offset},
        meta={"step": state.step, "train_seed": cfg.seed,
              "param_count": state.params.count()},
        opt_state=opt_state)


def train(params, dataset, sched, cfg, out_dir, resume=None, log_fn=None):
    """Run the training loop; writes checkpoints and a metrics log.

    Returns the path of the final checkpoint.  On divergence the last
    good checkpoint is left in place and TrainingDiverged is raised.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    views = _train_views(dataset)

    start_step = 1
    ema = {}
    if resume is not None:
        params, header, opt_state = load_checkpoint(resume)
        ema = {k[len("ema/"):]: v for k, v in opt_state.items()
               if k.startswith("ema/")}
        start_step = int(header["meta"]["step"]) + 1
    optimizer = Adam(params.named_params(), lr=cfg.lr)
    if resume is not None:
        optimizer.load_state_dict({k: v for k, v in opt_state.items()
                                   if not k.startswith("ema/")})
    state = TrainState(params=params, optimizer=optimizer, sched=sched, ema=ema)

    metrics_path = out / METRICS_NAME
    mode = "a" if (resume is not None and metrics_path.exists()) else "w"
    pool = (ThreadPoolExecutor(max_workers=cfg.workers)
            if cfg.workers > 1 else None)
    final_path = ckpt_dir / "final.ckpt"
    try:
        with open(metrics_path, mode) as log:
            for step in range(start_step, cfg.steps + 1):
                t0 = time.perf_counter()
                dl, sd = train_step(state, views, cfg, step, workers_pool=pool)
                record = {
                    "step": step,
                    "denoise_loss": dl,
                    "sd_loss": sd,
                    "lr": cfg.lr,
                    "seconds": round(time.perf_counter() - t0, 4),
                }
                log.write(json.dumps(record) + "\n")
                if log_fn:
                    log_fn(record)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    _save(state, cfg, ckpt_dir / f"step_{step:06d}.ckpt")
        _save(state, cfg, final_path)
    finally:
        if pool is not None:
            pool.shutdown()
    return final_path
