"""Noise schedule and closed-form diffusion quantities.

Arrays are indexed directly by timestep t: ``alpha_bar[t]`` is valid for
t = 0..T with alpha_bar[0] = 1, and ``beta[t]``, ``alpha[t]``,
``posterior_var[t]`` are valid for t = 1..T (index 0 holds the neutral
values 0, 1, 0).  All schedule arrays are float64 and immutable; every
operation here is a pure function of its arguments.

Images live in [-1, 1] internally; PNG [0, 255] is mapped linearly at
the I/O boundary.
"""

import math
from dataclasses import dataclass, field

import numpy as np

BETA_CLIP = 0.999  # prevents division blow-ups near t = T


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta_t, alpha_t, alpha-bar_t and posterior variances."""

    T: int
    beta: np.ndarray            # beta[t], t = 1..T
    alpha: np.ndarray           # alpha[t] = 1 - beta[t]
    alpha_bar: np.ndarray       # alpha_bar[t] = prod_{s<=t} alpha[s], alpha_bar[0] = 1
    posterior_var: np.ndarray   # sigma_t^2, t = 1..T (index 0 is 0)
    offset: float = 0.008

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar, self.posterior_var):
            arr.setflags(write=False)

    def validate(self):
        assert self.alpha_bar[0] == 1.0
        assert np.all(np.diff(self.alpha_bar) < 0), "alpha_bar must be strictly decreasing"
        assert np.all(self.beta[1:] > 0) and np.all(self.beta[1:] < 1)
        assert np.all(self.posterior_var >= 0)
        return self

    def content_hash(self):
        """Stable hash of the schedule arrays, recorded in run metadata."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.int64(self.T).tobytes())
        h.update(self.beta.tobytes())
        return h.hexdigest()[:16]

    def _check_t(self, t, low):
        if not low <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [{low}, {self.T}]")


def cosine_alpha_bar(t, T, s=0.008):
    """Closed-form signal fraction f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)."""
    def f(u):
        return math.cos(((u / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    return f(t) / f(0)


def build_cosine_schedule(T, s=0.008):
    """Cosine schedule; beta derived as 1 - abar_t/abar_{t-1}, clipped at 0.999."""
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    if not 0.0 < s < 1.0:
        raise ValueError(f"cosine offset must be in (0, 1), got {s}")
    ts = np.arange(T + 1, dtype=np.float64)
    abar_form = np.array([cosine_alpha_bar(t, T, s) for t in ts])
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - abar_form[1:] / abar_form[:-1], BETA_CLIP)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha[1:])])
    posterior_var = np.zeros(T + 1)
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         posterior_var=posterior_var, offset=s).validate()


def q_sample(x0, t, eps, sched):
    """Single-step closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched._check_t(t, 0)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean_var(x0, xt, t, sched):
    """Closed-form posterior of the previous step given (x0, xt).

    mu_t = sqrt(abar_{t-1}) beta_t / (1 - abar_t) * x0
         + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * xt
    sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
    """
    sched._check_t(t, 1)
    ab_prev = sched.alpha_bar[t - 1]
    ab = sched.alpha_bar[t]
    beta = sched.beta[t]
    alpha = sched.alpha[t]
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    mu = c0 * np.asarray(x0) + ct * np.asarray(xt)
    return mu, sched.posterior_var[t]


def mu_from_x0hat(xt, x0hat, t, sched):
    """Posterior mean driven by a denoiser's x0 estimate.

    mu_t = (1/sqrt(alpha_t)) (xt - ((1 - alpha_t)/(1 - abar_t)) (xt - sqrt(abar_t) x0hat))
    Algebraically identical to posterior_mean_var(x0hat, xt, t).
    """
    sched._check_t(t, 1)
    alpha = sched.alpha[t]
    ab = sched.alpha_bar[t]
    inner = np.asarray(xt) - math.sqrt(ab) * np.asarray(x0hat)
    return (np.asarray(xt) - (1.0 - alpha) / (1.0 - ab) * inner) / math.sqrt(alpha)


def ancestral_step(xt, x0hat, t, noise, sched):
    """One reverse step: mu_t(xt, x0hat) + sigma_t * noise (noise omitted at t=1)."""
    sched._check_t(t, 1)
    mu = mu_from_x0hat(xt, x0hat, t, sched)
    if t == 1:
        return mu
    return mu + math.sqrt(sched.posterior_var[t]) * np.asarray(noise)
