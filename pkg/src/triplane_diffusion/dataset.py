"""Procedural single-primitive dataset with posed oracle renders.

Each scene holds one primitive (sphere, cube, or cylinder) of random
size and palette color, centred at the origin in x, y and resting on
the ground plane z = 0.  Views are sampled uniformly on a hemisphere
(shallow elevations rejected) and rendered by the analytic ray tracer.

On-disk layout::

    out_dir/manifest.json
    out_dir/scene_<k>/view_<j>.png

The manifest is JSON with a format_version field; cameras are stored as
a row-major 3x3 rotation, a 3-vector position, focal length, principal
point, and resolution.  Regeneration with the same config is
bit-identical.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pngio
from .cameras import Camera, sample_hemisphere_pose, DEFAULT_RADIUS
from .raytrace import oracle_render

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

SHAPES = ("sphere", "cube", "cylinder")

# the 8 classic palette colors, sRGB / 255
PALETTE = {
    "gray": (87, 87, 87),
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "brown": (129, 74, 25),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "yellow": (255, 238, 51),
}
PALETTE_ARR = np.array(list(PALETTE.values()), dtype=np.float64) / 255.0


@dataclass(frozen=True)
class SceneSpec:
    """One primitive resting on the ground plane.

    size is the radius (sphere, cylinder) or half-extent (cube); the
    resting constraint fixes the centre height to size (cylinder half
    height equals its radius, so height = 2 * size).
    """

    shape: str
    size: float
    color: np.ndarray

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.size <= 0:
            raise ValueError(f"size must be positive, got {self.size}")
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))

    @property
    def centre(self):
        return np.array([0.0, 0.0, self.size])

    def to_dict(self):
        return {"shape": self.shape, "size": self.size,
                "color": [float(c) for c in self.color]}

    @classmethod
    def from_dict(cls, d):
        return cls(shape=d["shape"], size=float(d["size"]),
                   color=np.array(d["color"]))


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 16
    views_train: int = 8
    views_test: int = 4
    resolution: int = 32
    seed: int = 0
    size_min: float = 0.35
    size_max: float = 0.7
    camera_radius: float = DEFAULT_RADIUS
    min_elevation_deg: float = 12.0
    train_scenes: int = None     # scene-level split; None = every scene trains

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("need at least one scene")
        if self.views_train < 1 or self.views_test < 0:
            raise ValueError("need views_train >= 1 and views_test >= 0")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError("invalid size range")
        if self.train_scenes is not None and not 1 <= self.train_scenes <= self.n_scenes:
            raise ValueError("train_scenes must be in [1, n_scenes]")


def sample_scene(rng, cfg=DatasetConfig()):
    """Uniform shape, uniform size in range, uniform palette color."""
    shape = SHAPES[rng.integers(len(SHAPES))]
    size = rng.uniform(cfg.size_min, cfg.size_max)
    color = PALETTE_ARR[rng.integers(len(PALETTE_ARR))]
    return SceneSpec(shape=shape, size=size, color=color)


@dataclass
class DatasetManifest:
    resolution: int
    seed: int
    scenes: list = field(default_factory=list)
    train_scene_ids: list = None

    def to_dict(self):
        d = {
            "format_version": MANIFEST_VERSION,
            "resolution": self.resolution,
            "seed": self.seed,
            "n_scenes": len(self.scenes),
            "scenes": self.scenes,
        }
        if self.train_scene_ids is not None:
            d["train_scene_ids"] = self.train_scene_ids
        return d


def generate_dataset(cfg, out_dir):
    """Render every view of every scene and write images + manifest.

    Per-scene RNG streams derive from (seed, scene index), so scenes are
    independent of each other and of the scene count.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids = (list(range(cfg.train_scenes))
                 if cfg.train_scenes is not None else None)
    manifest = DatasetManifest(resolution=cfg.resolution, seed=cfg.seed,
                               train_scene_ids=train_ids)
    min_el = math.radians(cfg.min_elevation_deg)
    for k in range(cfg.n_scenes):
        rng = np.random.default_rng([cfg.seed, k])
        spec = sample_scene(rng, cfg)
        scene_dir = out / f"scene_{k:04d}"
        scene_dir.mkdir(exist_ok=True)
        views = []
        n_views = cfg.views_train + cfg.views_test
        for j in range(n_views):
            cam = sample_hemisphere_pose(
                rng, min_elevation=min_el, radius=cfg.camera_radius,
                resolution=cfg.resolution)
            img = oracle_render(spec, cam)
            rel = f"scene_{k:04d}/view_{j:02d}.png"
            pngio.save_rgb(out / rel, img)
            views.append({
                "file": rel,
                "split": "train" if j < cfg.views_train else "test",
                "camera": cam.to_dict(),
            })
        manifest.scenes.append({"id": k, "spec": spec.to_dict(), "views": views})
    payload = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    (out / MANIFEST_NAME).write_text(payload + "\n")
    return manifest


@dataclass
class View:
    scene_id: int
    view_id: int
    split: str
    image: np.ndarray         # (M, M, 3) in [0, 1]
    camera: Camera
    path: Path


class Dataset:
    """Loaded dataset: images in memory plus per-view cameras."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_NAME
        if not manifest_path.exists():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        raw = json.loads(manifest_path.read_text())
        if raw.get("format_version") != MANIFEST_VERSION:
            raise ValueError(
                f"unsupported manifest version {raw.get('format_version')}")
        self.resolution = int(raw["resolution"])
        self.seed = int(raw["seed"])
        self.train_scene_ids = (set(raw["train_scene_ids"])
                                if "train_scene_ids" in raw else None)
        self.specs = {}
        self.views = []
        for scene in raw["scenes"]:
            sid = int(scene["id"])
            self.specs[sid] = SceneSpec.from_dict(scene["spec"])
            for j, v in enumerate(scene["views"]):
                img_path = self.root / v["file"]
                if not img_path.exists():
                    raise FileNotFoundError(f"manifest references missing {img_path}")
                self.views.append(View(
                    scene_id=sid,
                    view_id=j,
                    split=v["split"],
                    image=pngio.load_rgb(img_path),
                    camera=Camera.from_dict(v["camera"]),
                    path=img_path,
                ))

    def split(self, name):
        """Views of the given split.  With a scene-level split, training
        views come only from training scenes and test views only from
        held-out scenes."""
        views = [v for v in self.views if v.split == name]
        if self.train_scene_ids is None:
            return views
        if name == "train":
            return [v for v in views if v.scene_id in self.train_scene_ids]
        return [v for v in views if v.scene_id not in self.train_scene_ids]

    def scene_views(self, scene_id, split=None):
        return [v for v in self.views
                if v.scene_id == scene_id and (split is None or v.split == split)]

    @property
    def scene_ids(self):
        return sorted(self.specs)
