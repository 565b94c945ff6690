"""The 3D-aware denoiser: U-Net triplane encoder + volumetric re-render.

The encoder maps a noisy M x M x 3 image and a timestep embedding to
three N x N x n_f feature planes; the point decoder and volume renderer
turn those planes back into the denoised image from the input viewpoint.
The encoder never sees the camera: the pose only enters through the
renderer, so identical (x_t, t) always produce the identical triplane.

Images entering the encoder are in the diffusion value range [-1, 1]
(noisy inputs may exceed it slightly; nothing is clipped).  The
renderer's natural [0, 1] output is affinely mapped back to [-1, 1].
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .field import DecoderParams, Triplane
from .render import RenderConfig, render_views


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32          # M
    triplane_size: int = 32       # N >= M, N/M a power of two
    n_f: int = 32                 # feature channels per plane
    channels: tuple = (32, 64, 128)
    time_dim: int = 64
    groups: int = 8
    n_freq: int = 6
    decoder_hidden: int = 64
    extent: float = 2.0
    attention: bool = False       # flag-gated plain attention at the bottleneck
    density_bias: float = -4.0

    def __post_init__(self):
        m, n = self.image_size, self.triplane_size
        if n < m or (n % m) != 0 or (n // m) & (n // m - 1):
            raise ValueError(f"triplane size {n} must be M * 2^k for image size {m}")
        if len(self.channels) < 1:
            raise ValueError("need at least one channel width")

    @property
    def extra_ups(self):
        return int(math.log2(self.triplane_size // self.image_size))

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "image_size", "triplane_size", "n_f", "time_dim", "groups",
            "n_freq", "decoder_hidden", "extent", "attention", "density_bias")}
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class Layer:
    """Parameter container; children are discovered from attributes."""

    def named_params(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            out.extend(_walk_params(val, f"{prefix}{key}"))
        return out


def _walk_params(val, name):
    if isinstance(val, ad.Tensor):
        return [(name, val)] if val.requires_grad else []
    if isinstance(val, Layer):
        return val.named_params(name + ".")
    if isinstance(val, (list, tuple)):
        out = []
        for i, item in enumerate(val):
            out.extend(_walk_params(item, f"{name}.{i}"))
        return out
    return []


def _gn_groups(requested, channels):
    g = math.gcd(requested, channels)
    return max(g, 1)


class Linear(Layer):
    def __init__(self, n_in, n_out, rng, dtype, zero_init=False):
        scale = 0.0 if zero_init else math.sqrt(2.0 / n_in)
        self.w = ad.parameter(rng.standard_normal((n_in, n_out)) * scale, dtype=dtype)
        self.b = ad.parameter(np.zeros(n_out), dtype=dtype)

    def __call__(self, x):
        return ops.linear(x, self.w, self.b)


class Conv(Layer):
    def __init__(self, c_in, c_out, rng, dtype, kernel=3, stride=1,
                 padding=None, zero_init=False):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        scale = 0.0 if zero_init else math.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = ad.parameter(
            rng.standard_normal((c_out, c_in, kernel, kernel)) * scale, dtype=dtype)
        self.b = ad.parameter(np.zeros(c_out), dtype=dtype)

    def __call__(self, x):
        out = ops.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        return ops.add(out, ops.reshape(self.b, (1, self.b.shape[0], 1, 1)))


class GroupNorm(Layer):
    def __init__(self, channels, groups, dtype):
        self.groups = _gn_groups(groups, channels)
        self.gamma = ad.parameter(np.ones(channels), dtype=dtype)
        self.beta = ad.parameter(np.zeros(channels), dtype=dtype)

    def __call__(self, x):
        return ops.group_norm(x, self.groups, self.gamma, self.beta)


class ResBlock(Layer):
    """Two 3x3 convs with group norms and an additive timestep projection."""

    def __init__(self, c_in, c_out, time_dim, groups, rng, dtype):
        self.norm1 = GroupNorm(c_in, groups, dtype)
        self.conv1 = Conv(c_in, c_out, rng, dtype)
        self.time_proj = Linear(time_dim, c_out, rng, dtype)
        self.norm2 = GroupNorm(c_out, groups, dtype)
        self.conv2 = Conv(c_out, c_out, rng, dtype)
        self.conv2.w.data *= 0.2  # near-identity start, residual branch damped
        self.skip = Conv(c_in, c_out, rng, dtype, kernel=1) if c_in != c_out else None

    def __call__(self, x, t_emb):
        h = self.conv1(ops.silu(self.norm1(x)))
        tt = self.time_proj(t_emb)
        h = ops.add(h, ops.reshape(tt, tt.shape + (1, 1)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(h, self.skip(x) if self.skip else x)


class AttentionBlock(Layer):
    """Single-head self-attention over spatial positions (flag-gated)."""

    def __init__(self, channels, groups, rng, dtype):
        self.channels = channels
        self.norm = GroupNorm(channels, groups, dtype)
        self.qkv = Conv(channels, 3 * channels, rng, dtype, kernel=1)
        self.proj = Conv(channels, channels, rng, dtype, kernel=1, zero_init=True)

    def __call__(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        qkv = ops.reshape(qkv, (b, 3, c, h * w))
        q = ops.getitem(qkv, (slice(None), 0))
        k = ops.getitem(qkv, (slice(None), 1))
        v = ops.getitem(qkv, (slice(None), 2))
        logits = ops.mul(ops.matmul(ops.swapaxes(q, 1, 2), k),
                         ad.constant(np.asarray(1.0 / math.sqrt(c), dtype=x.dtype)))
        attn = ops.softmax(logits, axis=-1)                     # (B, HW, HW)
        out = ops.matmul(v, ops.swapaxes(attn, 1, 2))           # (B, C, HW)
        out = self.proj(ops.reshape(out, (b, c, h, w)))
        return ops.add(x, out)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps at geometric frequencies.

    t: scalar or (B,) array; returns (B, dim) float64 with sin in the
    first half and cos in the second.  t = 0 maps to all-zero sines and
    all-one cosines.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    k = np.arange(half)
    freqs = np.exp(-math.log(10000.0) * k / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class Encoder(Layer):
    """U-Net over the noisy image, projecting to 3 * n_f plane channels.

    ``depth`` down/up levels with two residual blocks each and skip
    connections pairing equal resolutions; extra no-skip up blocks are
    appended only when the triplane resolution exceeds the image's.
    """

    def __init__(self, cfg, rng, dtype=np.float64):
        ch = cfg.channels
        depth = len(ch)
        td = cfg.time_dim
        self.cfg = cfg
        self.time_mlp1 = Linear(td, td, rng, dtype)
        self.time_mlp2 = Linear(td, td, rng, dtype)
        self.stem = Conv(3, ch[0], rng, dtype)
        self.down_res = []
        self.down_convs = []
        for lvl in range(depth):
            self.down_res.append([
                ResBlock(ch[lvl], ch[lvl], td, cfg.groups, rng, dtype),
                ResBlock(ch[lvl], ch[lvl], td, cfg.groups, rng, dtype),
            ])
            if lvl < depth - 1:
                self.down_convs.append(
                    Conv(ch[lvl], ch[lvl + 1], rng, dtype, stride=2))
        self.mid1 = ResBlock(ch[-1], ch[-1], td, cfg.groups, rng, dtype)
        self.mid_attn = (AttentionBlock(ch[-1], cfg.groups, rng, dtype)
                         if cfg.attention else None)
        self.mid2 = ResBlock(ch[-1], ch[-1], td, cfg.groups, rng, dtype)
        self.up_res = []
        self.up_convs = []
        for lvl in range(depth - 1, -1, -1):
            self.up_res.append([
                ResBlock(2 * ch[lvl], ch[lvl], td, cfg.groups, rng, dtype),
                ResBlock(ch[lvl], ch[lvl], td, cfg.groups, rng, dtype),
            ])
            if lvl > 0:
                self.up_convs.append(Conv(ch[lvl], ch[lvl - 1], rng, dtype))
        self.extra_res = []
        self.extra_convs = []
        for _ in range(cfg.extra_ups):
            self.extra_convs.append(Conv(ch[0], ch[0], rng, dtype))
            self.extra_res.append([
                ResBlock(ch[0], ch[0], td, cfg.groups, rng, dtype),
                ResBlock(ch[0], ch[0], td, cfg.groups, rng, dtype),
            ])
        self.head_norm = GroupNorm(ch[0], cfg.groups, dtype)
        self.head = Conv(ch[0], 3 * cfg.n_f, rng, dtype)
        self.head.w.data *= 0.1  # start with small plane features

    def __call__(self, x, t_emb):
        t_emb = self.time_mlp2(ops.silu(self.time_mlp1(t_emb)))
        h = self.stem(x)
        skips = []
        depth = len(self.cfg.channels)
        for lvl in range(depth):
            for res in self.down_res[lvl]:
                h = res(h, t_emb)
            skips.append(h)
            if lvl < depth - 1:
                h = self.down_convs[lvl](h)
        h = self.mid1(h, t_emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, t_emb)
        for i, lvl in enumerate(range(depth - 1, -1, -1)):
            h = ops.concat([h, skips[lvl]], axis=1)
            for res in self.up_res[i]:
                h = res(h, t_emb)
            if lvl > 0:
                h = self.up_convs[i](ops.upsample_nearest(h, 2))
        for conv, res_pair in zip(self.extra_convs, self.extra_res):
            h = conv(ops.upsample_nearest(h, 2))
            for res in res_pair:
                h = res(h, t_emb)
        return self.head(ops.silu(self.head_norm(h)))


@dataclass
class DenoiserParams:
    """Encoder + decoder weights with their model and render configs."""

    model: ModelConfig
    encoder: Encoder
    decoder: DecoderParams
    render: RenderConfig = field(default_factory=RenderConfig)

    def named_params(self):
        return (self.encoder.named_params("encoder.")
                + self.decoder.named_params("decoder."))

    def params(self):
        return [p for _, p in self.named_params()]

    def count(self):
        return sum(p.size for p in self.params())

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    @property
    def dtype(self):
        return self.encoder.stem.w.dtype


def build_denoiser(model_cfg, rng, dtype=np.float32, render_cfg=None):
    encoder = Encoder(model_cfg, rng, dtype=dtype)
    decoder = DecoderParams(
        n_f=model_cfg.n_f, n_freq=model_cfg.n_freq,
        hidden=model_cfg.decoder_hidden, rng=rng, dtype=dtype,
        density_bias=model_cfg.density_bias)
    return DenoiserParams(model=model_cfg, encoder=encoder, decoder=decoder,
                          render=render_cfg or RenderConfig())


def encode(params, x_t, t):
    """Noisy image stack (B, 3, M, M) at timesteps t (B,) -> Triplane."""
    x = x_t if isinstance(x_t, ad.Tensor) else ad.constant(
        np.asarray(x_t, dtype=params.dtype))
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != params.model.image_size \
            or x.shape[3] != params.model.image_size:
        raise ad.ShapeError(
            f"encoder expects (B, 3, {params.model.image_size}, "
            f"{params.model.image_size}), got {x.shape}")
    emb = timestep_embedding(t, params.model.time_dim)
    if emb.shape[0] == 1 and x.shape[0] > 1:
        emb = np.repeat(emb, x.shape[0], axis=0)
    feats = params.encoder(x, ad.constant(emb.astype(params.dtype)))
    return Triplane(feats, n_f=params.model.n_f, extent=params.model.extent)


def denoise(params, x_t, t, cams, rng=None):
    """Full denoiser: encode, then render from each element's viewpoint.

    Returns (x0hat Tensor (B, M, M, 3) in [-1, 1], triplane).  The
    triplane depends only on (x_t, t); ``cams`` affect the render alone.
    """
    tri = encode(params, x_t, t)
    rgb, _ = render_views(tri, params.decoder, cams, params.render, rng=rng)
    x0hat = ops.sub(ops.mul(rgb, ad.constant(np.asarray(2.0, dtype=params.dtype))),
                    ad.constant(np.asarray(1.0, dtype=params.dtype)))
    return x0hat, tri
