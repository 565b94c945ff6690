"""Scene sampling, oracle ray tracer, and dataset generation."""

import json
import math

import numpy as np
import pytest
from scipy import stats

from triplane_diffusion import dataset as ds
from triplane_diffusion import raytrace as rt
from triplane_diffusion.cameras import look_at_pose


class TestSampleScene:
    def test_shape_frequencies_uniform(self):
        rng = np.random.default_rng(0)
        counts = {s: 0 for s in ds.SHAPES}
        n = 10_000
        for _ in range(n):
            counts[ds.sample_scene(rng).shape] += 1
        _, p = stats.chisquare(list(counts.values()))
        assert p > 0.001

    def test_sphere_rests_on_plane(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            spec = ds.sample_scene(rng)
            np.testing.assert_allclose(spec.centre, [0, 0, spec.size])

    def test_sizes_within_range(self):
        rng = np.random.default_rng(2)
        cfg = ds.DatasetConfig(size_min=0.4, size_max=0.5)
        sizes = [ds.sample_scene(rng, cfg).size for _ in range(500)]
        assert all(0.4 <= s <= 0.5 for s in sizes)

    def test_colors_from_palette(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            c = ds.sample_scene(rng).color
            assert any(np.allclose(c, p) for p in ds.PALETTE_ARR)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ds.SceneSpec(shape="cone", size=0.5, color=np.ones(3))
        with pytest.raises(ValueError):
            ds.SceneSpec(shape="cube", size=0.0, color=np.ones(3))


class TestOracleRender:
    def test_empty_ground_view_is_flat_ground_color(self):
        # camera aimed at bare ground far from the object: every pixel is
        # the same shaded ground color (directional light, no falloff)
        scene = ds.SceneSpec(shape="sphere", size=0.4, color=np.array([1, 0, 0.0]))
        cam = look_at_pose(0.0, math.radians(70), 2.0,
                           target=(40.0, 40.0, 0.0), resolution=16)
        img = rt.oracle_render(scene, cam)
        expected = rt.GROUND_ALBEDO * (rt.AMBIENT + rt.DIFFUSE * rt.LIGHT_DIR[2])
        assert np.ptp(img.reshape(-1, 3), axis=0).max() < 1e-9
        np.testing.assert_allclose(img[0, 0], expected, atol=1e-9)

    def test_sphere_silhouette_radius_matches_projection(self):
        # pixel-counted disc radius vs the analytic projected radius
        scene = ds.SceneSpec(shape="sphere", size=0.5, color=np.array([0, 0, 1.0]))
        cam = look_at_pose(0.3, math.radians(45), 4.0,
                           target=(0, 0, 0.5), resolution=64)
        mask = rt.oracle_object_mask(scene, cam)
        counted_radius = math.sqrt(mask.sum() / math.pi)
        d = np.linalg.norm(cam.position - scene.centre)
        # the silhouette of a sphere subtends asin(r/d); its image is a
        # disc of radius ~ focal * tan(asin(r/d)) for a centred view
        theta = math.asin(scene.size / d)
        analytic_radius = cam.focal * math.tan(theta)
        assert abs(counted_radius - analytic_radius) < 1.0

    def test_rendering_deterministic(self):
        scene = ds.SceneSpec(shape="cylinder", size=0.5, color=np.array([0.2, 0.7, 0.3]))
        cam = look_at_pose(1.1, 0.7, 4.0, resolution=32)
        a = rt.oracle_render(scene, cam)
        b = rt.oracle_render(scene, cam)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("shape", ds.SHAPES)
    def test_object_visible_and_shadow_present(self, shape):
        scene = ds.SceneSpec(shape=shape, size=0.6, color=np.array([0.9, 0.1, 0.1]))
        # viewpoint on the shadow side (shadows fall away from the light)
        shadow_azimuth = math.atan2(-rt.LIGHT_DIR[1], -rt.LIGHT_DIR[0])
        cam = look_at_pose(shadow_azimuth, 0.6, 4.0, resolution=48)
        img = rt.oracle_render(scene, cam)
        mask = rt.oracle_object_mask(scene, cam)
        assert 0.01 < mask.mean() < 0.5
        ground = ~mask & np.any(img < 0.99, axis=-1)
        ground_vals = img[ground][:, 0]
        # hard shadow splits ground pixels into two distinct shading levels
        assert ground_vals.min() < rt.GROUND_ALBEDO[0] * (rt.AMBIENT + 0.01)
        assert ground_vals.max() > rt.GROUND_ALBEDO[0] * (rt.AMBIENT + 0.3)

    def test_cube_faces_shaded_distinctly(self):
        scene = ds.SceneSpec(shape="cube", size=0.5, color=np.array([1.0, 1.0, 1.0]))
        cam = look_at_pose(math.radians(30), math.radians(35), 4.0, resolution=64)
        img = rt.oracle_render(scene, cam)
        mask = rt.oracle_object_mask(scene, cam)
        vals = np.unique(np.round(img[mask][:, 0], 6))
        assert len(vals) >= 2  # top face vs side faces


class TestGenerateDataset:
    def test_desk_default_layout(self, tmp_path):
        cfg = ds.DatasetConfig(n_scenes=3, views_train=2, views_test=1,
                               resolution=16, seed=5)
        manifest = ds.generate_dataset(cfg, tmp_path)
        pngs = sorted(tmp_path.glob("scene_*/view_*.png"))
        assert len(pngs) == 3 * 3
        assert (tmp_path / "manifest.json").exists()
        assert len(manifest.scenes) == 3

    def test_regeneration_bit_identical(self, tmp_path):
        cfg = ds.DatasetConfig(n_scenes=2, views_train=2, views_test=1,
                               resolution=16, seed=9)
        ds.generate_dataset(cfg, tmp_path / "a")
        ds.generate_dataset(cfg, tmp_path / "b")
        for rel in ["manifest.json", "scene_0000/view_00.png", "scene_0001/view_02.png"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_loaded_dataset_round_trip(self, tmp_path):
        cfg = ds.DatasetConfig(n_scenes=2, views_train=3, views_test=2,
                               resolution=16, seed=1)
        ds.generate_dataset(cfg, tmp_path)
        data = ds.Dataset(tmp_path)
        assert data.resolution == 16
        assert len(data.split("train")) == 6
        assert len(data.split("test")) == 4
        train_ids = {(v.scene_id, v.view_id) for v in data.split("train")}
        test_ids = {(v.scene_id, v.view_id) for v in data.split("test")}
        assert not train_ids & test_ids  # disjoint view splits
        v = data.split("train")[0]
        assert v.image.shape == (16, 16, 3)
        assert v.image.min() >= 0.0 and v.image.max() <= 1.0

    def test_camera_reprojects_object_centre_inside_image(self, tmp_path):
        cfg = ds.DatasetConfig(n_scenes=4, views_train=3, views_test=2,
                               resolution=24, seed=11)
        ds.generate_dataset(cfg, tmp_path)
        data = ds.Dataset(tmp_path)
        for v in data.views:
            centre = data.specs[v.scene_id].centre
            y, x = v.camera.project(centre)
            assert 0 <= y < 24 and 0 <= x < 24

    def test_missing_image_detected(self, tmp_path):
        cfg = ds.DatasetConfig(n_scenes=1, views_train=1, views_test=1,
                               resolution=16, seed=2)
        ds.generate_dataset(cfg, tmp_path)
        (tmp_path / "scene_0000/view_01.png").unlink()
        with pytest.raises(FileNotFoundError, match="view_01"):
            ds.Dataset(tmp_path)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            ds.DatasetConfig(n_scenes=0)
        with pytest.raises(ValueError):
            ds.DatasetConfig(views_train=0)
        with pytest.raises(ValueError):
            ds.DatasetConfig(n_scenes=4, train_scenes=5)

    def test_scene_level_split(self, tmp_path):
        cfg = ds.DatasetConfig(n_scenes=5, views_train=2, views_test=1,
                               resolution=16, seed=4, train_scenes=3)
        ds.generate_dataset(cfg, tmp_path)
        data = ds.Dataset(tmp_path)
        train_scenes = {v.scene_id for v in data.split("train")}
        test_scenes = {v.scene_id for v in data.split("test")}
        assert train_scenes == {0, 1, 2}
        assert test_scenes == {3, 4}

    def test_full_scale_config_constructs(self):
        # the large configuration stays valid without being rendered
        cfg = ds.DatasetConfig(n_scenes=900, train_scenes=400,
                               views_train=70, views_test=30, resolution=32)
        assert cfg.n_scenes * (cfg.views_train + cfg.views_test) == 90_000
