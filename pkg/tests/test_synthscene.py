import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrprior.geometry import project
from scrprior.synthscene import (
    BundleFormatError, DatasetConfig, FeatureEmbedding, InfeasibleSceneError, SceneConfig, TrajectoryError,
    default_intrinsics, generate_scene, generate_trajectory, load_bundle, make_dataset, render_frame,
    sample_surface_points, save_bundle, surface_distance,
)

K = default_intrinsics()


def area_fraction_oracle(scene):
    poor = total = 0.0
    for s in scene.surfaces:
        a = np.linalg.norm(np.cross(s.u, s.v))
        total += a
        poor += a if s.rho < 0.1 else 0.0
    return poor / total


def test_scene_is_deterministic():
    a, b = generate_scene(5), generate_scene(5)
    assert np.array_equal(a.extents, b.extents)
    for s, t in zip(a.surfaces, b.surfaces):
        assert s.kind == t.kind and s.rho == t.rho
        assert np.array_equal(s.origin, t.origin) and np.array_equal(s.u, t.u)


def test_textureless_zero_means_all_rich():
    scene = generate_scene(2, SceneConfig(textureless_fraction=0.0))
    assert all(s.rho >= 0.1 for s in scene.surfaces)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_textureless_area_fraction_near_target(seed):
    scene = generate_scene(seed, SceneConfig(textureless_fraction=0.3))
    frac = area_fraction_oracle(scene)
    assert 0.2 <= frac <= 0.4
    assert abs(frac - scene.texture_poor_fraction()) < 1e-12


def test_rho_in_unit_interval():
    scene = generate_scene(8, SceneConfig(textureless_fraction=0.5))
    assert all(0.0 <= s.rho <= 1.0 for s in scene.surfaces)


def test_infeasible_furniture_raises():
    with pytest.raises(InfeasibleSceneError):
        generate_scene(0, SceneConfig(room_min=(2.0, 2.0, 2.4), room_max=(2.0, 2.0, 2.4), furniture_count=40))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        SceneConfig(textureless_fraction=1.5)


def test_room_is_closed_every_ray_hits():
    scene = generate_scene(4)
    frame = render_frame(scene, generate_trajectory(scene, 2, 4)[0], K)
    assert np.isfinite(frame.gt_depth).all()


def test_trajectory_properties():
    scene = generate_scene(1)
    poses = generate_trajectory(scene, 30, 1)
    centers = np.array([p.translation for p in poses])
    assert scene.contains(centers).all()
    for a, b in zip(poses[:-1], poses[1:]):
        assert np.linalg.norm(a.translation - b.translation) <= 0.2
        rel = a.R.T @ b.R
        assert np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1))) <= 15.0
    for p in poses:
        f = render_frame(scene, p, K, F=8)
        d = f.gt_depth
        assert (np.isfinite(d) & (d >= 0.3) & (d <= 10.0)).mean() >= 0.5


def test_trajectory_tiny_room_and_determinism():
    scene = generate_scene(3, SceneConfig(room_min=(2.2, 2.2, 2.3), room_max=(2.2, 2.2, 2.3), furniture_count=0))
    a = generate_trajectory(scene, 2, 9)
    b = generate_trajectory(scene, 2, 9)
    assert len(a) == 2 and scene.contains(np.array([p.translation for p in a])).all()
    assert all(np.array_equal(p.matrix(), q.matrix()) for p, q in zip(a, b))
    with pytest.raises(ValueError):
        generate_trajectory(scene, 1, 0)


def test_trajectory_failure_is_explicit():
    scene = generate_scene(3, SceneConfig(room_min=(0.6, 0.6, 2.4), room_max=(0.6, 0.6, 2.4), furniture_count=0))
    with pytest.raises(TrajectoryError):
        generate_trajectory(scene, 3, 0, max_retries=5)


def test_render_invariants(small_dataset):
    for f in small_dataset.frames:
        valid = np.isfinite(f.gt_depth)
        px, z = project(f.gt_coords[valid], f.pose, f.K)
        assert np.abs(px - f.pixel_grid()[valid]).max() < 0.5
        assert np.abs(z - f.gt_depth[valid]).max() < 1e-6
        assert (f.gt_depth[valid] > 0).all()


def test_textureless_surface_features_constant(small_dataset):
    scene = small_dataset.scene
    emb = FeatureEmbedding(scene, 32)
    poor = [s for s in scene.surfaces if s.texture_poor]
    sid = np.full(2, poor[0].sid)
    feats = emb(sid, np.array([[0.1, 0.2], [0.9, 0.5]]))
    assert np.array_equal(feats[0], feats[1])
    others = emb(np.array([s.sid for s in poor]), np.zeros((len(poor), 2)))
    assert len({tuple(f) for f in others}) == len(poor)


def test_textured_features_separate_at_half_metre():
    scene = generate_scene(6)
    emb = FeatureEmbedding(scene, 32)
    rng = np.random.default_rng(0)
    sims = []
    for s in scene.surfaces:
        for _ in range(20):
            ang = rng.uniform(0, 2 * np.pi)
            a = rng.uniform(0, 0.3, size=2)
            b = a + 0.5 * np.array([np.cos(ang), np.sin(ang)])
            f = emb(np.array([s.sid, s.sid]), np.stack([a, b]))
            sims.append(float(f[0] @ f[1]))
    assert np.max(sims) < 0.9


def test_feature_noise_is_additive_and_seeded():
    scene = generate_scene(2)
    pose = generate_trajectory(scene, 2, 2)[0]
    clean = render_frame(scene, pose, K, F=16)
    a = render_frame(scene, pose, K, F=16, feature_noise_sigma=0.1)
    b = render_frame(scene, pose, K, F=16, feature_noise_sigma=0.1)
    assert np.array_equal(a.feature_map, b.feature_map)
    resid = (a.feature_map - clean.feature_map).ravel()
    assert abs(resid.std() - 0.1) < 0.01


def test_surface_samples_lie_on_surfaces():
    scene = generate_scene(1)
    pts = sample_surface_points(scene, 2000, 0)
    assert surface_distance(pts, scene).max() < 1e-9


def test_depth_layout_near_reference_prior():
    from scrprior.priors import fit_laplace

    d = [f.gt_depth[np.isfinite(f.gt_depth)] for s in range(3)
         for f in make_dataset(s, config=DatasetConfig(n_frames=16)).mapping_frames]
    p = fit_laplace(np.concatenate(d))
    assert 1.4 < p.mu < 2.3 and 0.25 < p.b < 0.8


def test_bundle_round_trip(tmp_path, small_dataset):
    save_bundle(small_dataset, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert back.split == small_dataset.split and back.depth_sensor
    for f, g in zip(small_dataset.frames, back.frames):
        assert np.array_equal(f.pose.rotation, g.pose.rotation)
        assert np.array_equal(f.pose.translation, g.pose.translation)
        assert np.array_equal(f.gt_depth, g.gt_depth, equal_nan=True)
        assert np.array_equal(f.texture_mask, g.texture_mask)
        assert np.array_equal(f.feature_map, g.feature_map)
        assert np.allclose(f.gt_coords, g.gt_coords, atol=1e-12, equal_nan=True)


def test_truncated_feature_file_named_in_error(tmp_path, small_dataset):
    save_bundle(small_dataset, tmp_path / "b")
    path = tmp_path / "b" / "frames" / "0" / "features.bin"
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(BundleFormatError, match="features.bin"):
        load_bundle(tmp_path / "b")


def test_version_mismatch_rejected(tmp_path, small_dataset):
    save_bundle(small_dataset, tmp_path / "b")
    scene = tmp_path / "b" / "scene.txt"
    scene.write_text(scene.read_text().replace("scrprior-scene 1", "scrprior-scene 9", 1))
    with pytest.raises(BundleFormatError, match="version"):
        load_bundle(tmp_path / "b")


def test_missing_directory_rejected(tmp_path):
    with pytest.raises(BundleFormatError):
        load_bundle(tmp_path / "nope")
