"""Run configuration: INI files with sections, merged with CLI overrides.

The fully resolved configuration is echoed into every run directory so a
run can be reproduced from its outputs alone.  All values are validated
by the owning dataclasses before any work starts.
"""

import configparser
import io
from dataclasses import dataclass, field

from .denoiser import ModelConfig
from .render import RenderConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    timesteps: int = 100          # desk-scale default; paper-like runs use 1000
    cosine_offset: float = 0.008

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp["schedule"] = {
            "timesteps": str(self.timesteps),
            "cosine_offset": repr(self.cosine_offset),
        }
        m = self.model
        cp["model"] = {
            "image_size": str(m.image_size),
            "triplane_size": str(m.triplane_size),
            "n_f": str(m.n_f),
            "channels": ",".join(str(c) for c in m.channels),
            "time_dim": str(m.time_dim),
            "groups": str(m.groups),
            "n_freq": str(m.n_freq),
            "decoder_hidden": str(m.decoder_hidden),
            "extent": repr(m.extent),
            "attention": str(m.attention),
            "density_bias": repr(m.density_bias),
        }
        r = self.render
        cp["render"] = {
            "n_coarse": str(r.n_coarse),
            "n_fine": str(r.n_fine),
            "background": ",".join(repr(c) for c in r.background),
            "near": repr(r.near),
            "far": repr(r.far),
        }
        t = self.train
        cp["train"] = {
            "batch_size": str(t.batch_size),
            "steps": str(t.steps),
            "lr": repr(t.lr),
            "lambda_sd": repr(t.lambda_sd),
            "rho_sd": repr(t.rho_sd),
            "seed": str(t.seed),
            "checkpoint_every": str(t.checkpoint_every),
            "workers": str(t.workers),
            "ema_decay": repr(t.ema_decay),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _get(cp, section, key, cast, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return cast(raw)


def _tuple(cast):
    return lambda raw: tuple(cast(v) for v in raw.split(",") if v.strip())


def load_ini(path=None, text=None):
    """Parse an INI config; missing keys keep their defaults."""
    cp = configparser.ConfigParser()
    if text is not None:
        cp.read_string(text)
    elif path is not None:
        read = cp.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
    base = RunConfig()
    model = ModelConfig(
        image_size=_get(cp, "model", "image_size", int, base.model.image_size),
        triplane_size=_get(cp, "model", "triplane_size", int, base.model.triplane_size),
        n_f=_get(cp, "model", "n_f", int, base.model.n_f),
        channels=_get(cp, "model", "channels", _tuple(int), base.model.channels),
        time_dim=_get(cp, "model", "time_dim", int, base.model.time_dim),
        groups=_get(cp, "model", "groups", int, base.model.groups),
        n_freq=_get(cp, "model", "n_freq", int, base.model.n_freq),
        decoder_hidden=_get(cp, "model", "decoder_hidden", int, base.model.decoder_hidden),
        extent=_get(cp, "model", "extent", float, base.model.extent),
        attention=_get(cp, "model", "attention", bool, base.model.attention),
        density_bias=_get(cp, "model", "density_bias", float, base.model.density_bias),
    )
    render = RenderConfig(
        n_coarse=_get(cp, "render", "n_coarse", int, base.render.n_coarse),
        n_fine=_get(cp, "render", "n_fine", int, base.render.n_fine),
        background=_get(cp, "render", "background", _tuple(float), base.render.background),
        near=_get(cp, "render", "near", float, base.render.near),
        far=_get(cp, "render", "far", float, base.render.far),
    )
    train = TrainConfig(
        batch_size=_get(cp, "train", "batch_size", int, base.train.batch_size),
        steps=_get(cp, "train", "steps", int, base.train.steps),
        lr=_get(cp, "train", "lr", float, base.train.lr),
        lambda_sd=_get(cp, "train", "lambda_sd", float, base.train.lambda_sd),
        rho_sd=_get(cp, "train", "rho_sd", float, base.train.rho_sd),
        seed=_get(cp, "train", "seed", int, base.train.seed),
        checkpoint_every=_get(cp, "train", "checkpoint_every", int,
                              base.train.checkpoint_every),
        workers=_get(cp, "train", "workers", int, base.train.workers),
        ema_decay=_get(cp, "train", "ema_decay", float, base.train.ema_decay),
    )
    return RunConfig(
        model=model, render=render, train=train,
        timesteps=_get(cp, "schedule", "timesteps", int, base.timesteps),
        cosine_offset=_get(cp, "schedule", "cosine_offset", float,
                           base.cosine_offset),
    )
