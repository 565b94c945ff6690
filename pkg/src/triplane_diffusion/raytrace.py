"""Analytic reference ray tracer for single-primitive scenes.

This is the oracle renderer: closed-form ray intersections against a
sphere, cube, or cylinder resting on the ground plane z = 0, flat
Lambertian shading under one fixed directional light with an ambient
term and hard shadows, white background.  It shares no sampling or
compositing code with the differentiable volume renderer and is used
both to produce dataset images and to cross-check that renderer.
"""

import numpy as np

from .cameras import camera_rays

LIGHT_DIR = np.array([0.35, 0.25, 0.9])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.3
DIFFUSE = 0.7
GROUND_ALBEDO = np.array([0.82, 0.82, 0.82])
BACKGROUND = np.array([1.0, 1.0, 1.0])
_EPS = 1e-9
_SHADOW_OFFSET = 1e-6


def _intersect_sphere(centre, radius, origins, dirs, tmin):
    oc = origins - centre
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > tmin, t0, t1)
    t = np.where(hit & (t > tmin), t, np.inf)
    with np.errstate(invalid="ignore", over="ignore"):
        p = origins + np.where(hit, t, 0.0)[..., None] * dirs
        n = p - centre
        n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), _EPS)
    return t, n


def _intersect_cube(centre, half, origins, dirs, tmin):
    # slab method; normal is the axis of the entry face
    inv = 1.0 / np.where(np.abs(dirs) < _EPS, np.copysign(_EPS, dirs), dirs)
    lo = (centre - half - origins) * inv
    hi = (centre + half - origins) * inv
    t_near_axis = np.minimum(lo, hi)
    t_far_axis = np.maximum(lo, hi)
    t_near = t_near_axis.max(axis=-1)
    t_far = t_far_axis.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > tmin)
    t = np.where(t_near > tmin, t_near, t_far)
    t = np.where(hit & (t > tmin), t, np.inf)
    axis = np.argmax(t_near_axis, axis=-1)
    n = np.zeros_like(np.asarray(dirs, dtype=np.float64))
    rows = np.arange(n.reshape(-1, 3).shape[0])
    flat_n = n.reshape(-1, 3)
    flat_axis = axis.reshape(-1)
    flat_dirs = dirs.reshape(-1, 3)
    flat_n[rows, flat_axis] = -np.sign(flat_dirs[rows, flat_axis])
    return t, n


def _intersect_cylinder(radius, height, origins, dirs, tmin):
    # vertical cylinder, base on z = 0, top cap at z = height
    ox, oy, oz = origins[..., 0], origins[..., 1], origins[..., 2]
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = b * b - a * c
        sq = np.sqrt(np.where(disc > 0, disc, 0.0))
        t_side0 = (-b - sq) / a
        t_side1 = (-b + sq) / a
    def side_valid(t):
        z = oz + t * dz
        return (disc > 0) & (a > _EPS) & (t > tmin) & (z >= 0.0) & (z <= height)
    t_side = np.where(side_valid(t_side0), t_side0,
                      np.where(side_valid(t_side1), t_side1, np.inf))

    def cap(z_plane, normal_z):
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (z_plane - oz) / dz
        p2 = (ox + t * dx) ** 2 + (oy + t * dy) ** 2
        ok = (np.abs(dz) > _EPS) & (t > tmin) & (p2 <= radius * radius)
        return np.where(ok, t, np.inf), normal_z

    t_top, _ = cap(height, 1.0)
    t_bot, _ = cap(0.0, -1.0)

    t = np.minimum(np.minimum(t_side, t_top), t_bot)
    with np.errstate(invalid="ignore", over="ignore"):
        p = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        n_side = np.stack([p[..., 0], p[..., 1], np.zeros_like(t)], axis=-1)
        n_side = n_side / np.maximum(np.linalg.norm(n_side, axis=-1, keepdims=True), _EPS)
    n = np.where((t == t_top)[..., None], [0.0, 0.0, 1.0],
                 np.where((t == t_bot)[..., None], [0.0, 0.0, -1.0], n_side))
    return t, n


def intersect_object(scene, origins, dirs, tmin=0.0):
    """Nearest object hit distance (inf on miss) and surface normal."""
    if scene.shape == "sphere":
        return _intersect_sphere(scene.centre, scene.size, origins, dirs, tmin)
    if scene.shape == "cube":
        return _intersect_cube(scene.centre, scene.size, origins, dirs, tmin)
    if scene.shape == "cylinder":
        return _intersect_cylinder(scene.size, 2.0 * scene.size, origins, dirs, tmin)
    raise ValueError(f"unknown primitive {scene.shape!r}")


def _intersect_ground(origins, dirs, tmin=0.0):
    dz = dirs[..., 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = -origins[..., 2] / dz
    ok = (np.abs(dz) > _EPS) & (t > tmin)
    return np.where(ok, t, np.inf)


def oracle_render(scene, cam):
    """Shaded (M, M, 3) image in [0, 1]; bit-identical across calls."""
    origin, dirs, _, _ = camera_rays(cam)
    origins = np.broadcast_to(origin, dirs.shape)
    t_obj, n_obj = intersect_object(scene, origins, dirs, tmin=0.0)
    t_ground = _intersect_ground(origins, dirs, tmin=0.0)

    obj_hit = t_obj < t_ground
    ground_hit = np.isfinite(t_ground) & ~obj_hit
    any_hit = obj_hit | ground_hit
    t = np.where(obj_hit, t_obj, t_ground)

    p = origins + np.where(any_hit, t, 0.0)[..., None] * dirs
    normal = np.where(obj_hit[..., None], n_obj, [0.0, 0.0, 1.0])
    albedo = np.where(obj_hit[..., None], scene.color, GROUND_ALBEDO)

    lambert = np.maximum(normal @ LIGHT_DIR, 0.0)
    shadow_origin = p + _SHADOW_OFFSET * normal
    t_shadow, _ = intersect_object(
        scene, shadow_origin, np.broadcast_to(LIGHT_DIR, dirs.shape),
        tmin=_SHADOW_OFFSET)
    lambert = np.where(np.isfinite(t_shadow), 0.0, lambert)

    shade = albedo * (AMBIENT + DIFFUSE * lambert[..., None])
    img = np.where(any_hit[..., None], shade, BACKGROUND)
    m = cam.resolution
    return np.clip(img, 0.0, 1.0).reshape(m, m, 3)


def oracle_object_mask(scene, cam):
    """Boolean (M, M) silhouette: rays whose first hit is the object."""
    origin, dirs, _, _ = camera_rays(cam)
    origins = np.broadcast_to(origin, dirs.shape)
    t_obj, _ = intersect_object(scene, origins, dirs, tmin=0.0)
    t_ground = _intersect_ground(origins, dirs, tmin=0.0)
    m = cam.resolution
    return (t_obj < t_ground).reshape(m, m)


def oracle_field(scene, sharpness=600.0):
    """Density/color field matching the scene analytically (test hook).

    Returns f(points (B, K, 3)) -> (gamma (B, K), color (B, K, 3)) with a
    hard-surface density (``sharpness`` per world unit inside the object
    or inside a thin ground slab) and colors from the same shading model
    as oracle_render, using the analytic surface normal of each shape.
    """
    def field(points):
        x, y, z = points[..., 0], points[..., 1], points[..., 2]
        if scene.shape == "sphere":
            d = np.linalg.norm(points - scene.centre, axis=-1)
            inside = d <= scene.size
            normal = points - scene.centre
        elif scene.shape == "cube":
            q = np.abs(points - scene.centre)
            inside = np.all(q <= scene.size, axis=-1)
            axis = np.argmax(q, axis=-1)
            normal = np.eye(3)[axis] * np.sign(points - scene.centre)
        else:  # cylinder
            r = np.hypot(x, y)
            inside = (r <= scene.size) & (z >= 0) & (z <= 2 * scene.size)
            side = np.stack([x, y, np.zeros_like(z)], axis=-1)
            top = np.abs(z - 2 * scene.size) < (scene.size - r)
            normal = np.where(top[..., None], [0.0, 0.0, 1.0], side)
        with np.errstate(invalid="ignore"):
            normal = normal / np.maximum(
                np.linalg.norm(normal, axis=-1, keepdims=True), _EPS)

        ground_slab = (z <= 0.0) & (z >= -0.25)
        gamma = sharpness * (inside | ground_slab).astype(np.float64)

        lambert_obj = np.maximum(normal @ LIGHT_DIR, 0.0)
        shadow_t, _ = intersect_object(
            scene, points + _SHADOW_OFFSET * normal,
            np.broadcast_to(LIGHT_DIR, points.shape), tmin=_SHADOW_OFFSET)
        lambert_obj = np.where(np.isfinite(shadow_t), 0.0, lambert_obj)
        color_obj = scene.color * (AMBIENT + DIFFUSE * lambert_obj[..., None])

        shadow_t_g, _ = intersect_object(
            scene, np.stack([x, y, np.full_like(z, _SHADOW_OFFSET)], axis=-1),
            np.broadcast_to(LIGHT_DIR, points.shape), tmin=_SHADOW_OFFSET)
        lambert_g = np.where(np.isfinite(shadow_t_g), 0.0, LIGHT_DIR[2])
        color_g = GROUND_ALBEDO * (AMBIENT + DIFFUSE * lambert_g[..., None])

        color = np.where(inside[..., None], color_obj, color_g)
        return gamma, np.clip(color, 0.0, 1.0)

    return field
