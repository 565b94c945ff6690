"""Pinhole camera model, look-at poses, per-pixel rays, hemisphere sampling.

World conventions (fixed here and documented once): right-handed frame,
+z up, ground plane z = 0, object at the origin.  Camera space has
x = image right, y = image down, z = forward, so the world-from-camera
rotation columns are (right, down, forward).  Pixel (i, j) refers to
row i (top to bottom) and column j (left to right); rays pass through
pixel centres at (j + 0.5, i + 0.5).
"""

import math
from dataclasses import dataclass

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])
FALLBACK_UP = np.array([1.0, 0.0, 0.0])  # used when forward is (anti)parallel to +z
DEFAULT_FOV_DEG = 40.0                   # vertical field of view shared by the dataset
DEFAULT_RADIUS = 4.0                     # ~2.5x the largest object bounding radius
DEFAULT_NEAR = 0.5
DEFAULT_FAR = 6.0
MIN_ELEVATION_RAD = math.radians(12.0)


@dataclass(frozen=True)
class Camera:
    """Intrinsics plus a world-from-camera pose."""

    resolution: int                 # M pixels per side (square images)
    focal: float                    # pixels
    cx: float                       # principal point, pixels
    cy: float
    rotation: np.ndarray            # (3, 3) world-from-camera, columns (right, down, forward)
    position: np.ndarray            # (3,) camera centre, world units

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        if self.resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        self.rotation.setflags(write=False)
        self.position.setflags(write=False)

    @property
    def forward(self):
        return self.rotation[:, 2]

    def ray_direction(self, y, x):
        """Unit world direction through continuous pixel coords (y=row, x=col)."""
        d_cam = np.stack([
            (np.asarray(x) - self.cx) / self.focal,
            (np.asarray(y) - self.cy) / self.focal,
            np.ones_like(np.asarray(x, dtype=np.float64)),
        ], axis=-1)
        d_world = d_cam @ self.rotation.T
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def project(self, point):
        """Continuous pixel-centre coords (row, col) of a world point.

        Raises ValueError for points at or behind the camera plane.
        """
        p_cam = self.rotation.T @ (np.asarray(point, dtype=np.float64) - self.position)
        if p_cam[2] <= 0:
            raise ValueError("point is behind the camera")
        x = self.focal * p_cam[0] / p_cam[2] + self.cx
        y = self.focal * p_cam[1] / p_cam[2] + self.cy
        return y, x

    def to_dict(self):
        return {
            "resolution": self.resolution,
            "focal": self.focal,
            "principal_point": [self.cx, self.cy],
            "rotation": [float(v) for v in self.rotation.reshape(-1)],  # row-major
            "position": [float(v) for v in self.position],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            resolution=int(d["resolution"]),
            focal=float(d["focal"]),
            cx=float(d["principal_point"][0]),
            cy=float(d["principal_point"][1]),
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            position=np.array(d["position"], dtype=np.float64),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"direction must be unit length, |d| = {n}")


def focal_from_fov(resolution, fov_deg=DEFAULT_FOV_DEG):
    return (resolution / 2.0) / math.tan(math.radians(fov_deg) / 2.0)


def look_at_rotation(position, target):
    """World-from-camera rotation looking from position towards target."""
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    norm = np.linalg.norm(fwd)
    if norm == 0:
        raise ValueError("camera position coincides with target")
    fwd = fwd / norm
    up = WORLD_UP if abs(fwd @ WORLD_UP) < 1.0 - 1e-8 else FALLBACK_UP
    side = np.cross(fwd, up)
    side /= np.linalg.norm(side)
    cam_up = np.cross(side, fwd)
    return np.stack([side, -cam_up, fwd], axis=1)


def look_at_pose(azimuth, elevation, radius, target=(0.0, 0.0, 0.0),
                 resolution=32, focal=None):
    """Camera on the sphere of ``radius`` about ``target``.

    Azimuth 0, elevation 0 places the camera at target + (radius, 0, 0);
    elevation pi/2 puts it straight above, looking down (fallback up axis
    +x keeps the pose well defined there).
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not -math.pi / 2 < elevation <= math.pi / 2:
        raise ValueError(f"elevation {elevation} outside (-pi/2, pi/2]")
    target = np.asarray(target, dtype=np.float64)
    offset = radius * np.array([
        math.cos(elevation) * math.cos(azimuth),
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
    ])
    position = target + offset
    if focal is None:
        focal = focal_from_fov(resolution)
    return Camera(
        resolution=resolution,
        focal=focal,
        cx=resolution / 2.0,
        cy=resolution / 2.0,
        rotation=look_at_rotation(position, target),
        position=position,
    )


def pixel_ray(cam, i, j, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """Ray through the centre of pixel (row i, column j)."""
    if not (0 <= i < cam.resolution and 0 <= j < cam.resolution):
        raise ValueError(
            f"pixel ({i}, {j}) outside image of resolution {cam.resolution}")
    d = cam.ray_direction(i + 0.5, j + 0.5)
    return Ray(origin=cam.position.copy(), direction=d, near=near, far=far)


def camera_rays(cam, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """All pixel-centre rays: origins (3,), directions (M*M, 3), row-major."""
    m = cam.resolution
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    dirs = cam.ray_direction(ii.ravel() + 0.5, jj.ravel() + 0.5)
    return cam.position.copy(), dirs, near, far


def sample_hemisphere_pose(rng, min_elevation=MIN_ELEVATION_RAD,
                           radius=DEFAULT_RADIUS, target=(0.0, 0.0, 0.0),
                           resolution=32, focal=None):
    """Pose uniform on the unit hemisphere, rejection-resampled until the
    elevation clears ``min_elevation`` (default 12 degrees)."""
    if not 0 <= min_elevation < math.pi / 2:
        raise ValueError(f"min_elevation {min_elevation} outside [0, pi/2)")
    while True:
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        elevation = math.asin(rng.uniform(0.0, 1.0))  # area-uniform on hemisphere
        if elevation >= min_elevation:
            return look_at_pose(azimuth, elevation, radius, target,
                                resolution=resolution, focal=focal)
