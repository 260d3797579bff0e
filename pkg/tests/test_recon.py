import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import ring_cameras
from matrixkit.depthmap import DepthMap
from matrixkit.errors import EmptyCloudError, InsufficientViewsError, ShapeError
from matrixkit.fileio import read_ply
from matrixkit.geometry import Camera, look_at, rotation_error
from matrixkit.recon import (
    LossWeights,
    Trajectory,
    accumulation_loss,
    accumulation_loss_grad,
    init_package,
    orbit_around,
    orbit_trajectory,
    ranking_loss,
    spline_trajectory,
    weighted_photometric_loss,
)
from matrixkit.synthscene import CameraSampler, SceneData, generate_scene, scene_distance, write_scene


def principal_ray_miss(cam, point=np.zeros(3)):
    """Distance from ``point`` to the camera's principal ray."""
    v = point - cam.center
    return np.linalg.norm(v - (v @ cam.forward) * cam.forward)


# -- trajectories -------------------------------------------------------------


def test_orbit_default_has_80_cameras():
    assert len(orbit_trajectory()) == 80


@given(st.integers(2, 120), st.floats(-60, 80), st.floats(0.5, 3.0))
def test_orbit_even_spacing_and_look_at(n, elevation, distance):
    traj = orbit_trajectory(n, elevation, distance)
    centers = np.stack([c.center for c in traj.cameras])
    az = np.degrees(np.arctan2(centers[:, 1], centers[:, 0]))
    gaps = np.diff(np.unwrap(np.radians(az)))
    np.testing.assert_allclose(np.degrees(gaps), 360.0 / n, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(centers, axis=1), distance, rtol=1e-12)
    for c in traj.cameras:
        assert principal_ray_miss(c) < 1e-6


def test_orbit_rejects_single_camera():
    with pytest.raises(ValueError):
        orbit_trajectory(1)


def test_orbit_around_starts_at_camera_and_keeps_distance():
    cam = ring_cameras(3)[1]
    traj = orbit_around(cam, 8)
    assert rotation_error(traj.cameras[0].rotation, cam.rotation) < 1e-12
    for c in traj.cameras:
        assert np.linalg.norm(c.center) == pytest.approx(np.linalg.norm(cam.center))
        assert principal_ray_miss(c) < 1e-6


def test_spline_default_on_three_keys_gives_240_views():
    keys = ring_cameras(8)[:3]
    traj = spline_trajectory(keys)
    assert len(traj) == 240 and traj.kind == "spline"


def test_spline_passes_through_keys():
    keys = ring_cameras(6)[:4]
    traj = spline_trajectory(keys, 3, 80)
    for k in keys:
        errs = [rotation_error(c.rotation, k.rotation) + np.linalg.norm(c.center - k.center) for c in traj.cameras]
        assert min(errs) < 1e-9
    assert traj.cameras[0] is keys[0] and traj.cameras[-1] is keys[-1]


def test_spline_rotations_orthonormal_and_collinear_centers():
    keys = []
    for x in (-1.0, -0.2, 0.5, 1.3):
        c = np.array([x, 2.0, 0.5])
        R, t = look_at(c)
        keys.append(Camera(R, t, 20.0, np.array([16.0, 16.0]), (32, 32)))
    traj = spline_trajectory(keys, 2, 40)
    centers = np.stack([c.center for c in traj.cameras])
    np.testing.assert_allclose(centers[:, 1:], np.broadcast_to([2.0, 0.5], (len(centers), 2)), atol=1e-9)
    for c in traj.cameras:
        assert np.abs(c.rotation.T @ c.rotation - np.eye(3)).max() < 1e-9


def test_spline_needs_two_keys():
    with pytest.raises(InsufficientViewsError):
        spline_trajectory(ring_cameras(2)[:1])


def test_trajectory_round_trip(tmp_path):
    traj = orbit_trajectory(5)
    traj.write(tmp_path / "trajectory.json")
    back = Trajectory.read(tmp_path / "trajectory.json")
    assert back.kind == "orbit" and len(back) == 5
    for a, b in zip(traj.cameras, back.cameras):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)


# -- accumulation loss --------------------------------------------------------


def test_accumulation_loss_at_one_half():
    assert accumulation_loss(np.full(10, 0.5), "printed") == pytest.approx(np.log(2.0), abs=1e-15)
    assert accumulation_loss(np.full(10, 0.5), "corrected") == pytest.approx(2 * np.log(2.0), abs=1e-15)
    with pytest.raises(ValueError):
        accumulation_loss([0.5], "other")


@pytest.mark.parametrize("sign", ["printed", "corrected"])
def test_accumulation_gradient_matches_finite_differences(sign):
    rng = np.random.default_rng(3)
    a = rng.uniform(0.05, 0.95, 20)
    g = accumulation_loss_grad(a, sign)
    h = 1e-6
    fd = np.empty_like(a)
    for i in range(len(a)):
        up, dn = a.copy(), a.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (accumulation_loss(up, sign) - accumulation_loss(dn, sign)) / (2 * h)
    # the corrected gradient vanishes to third order at 1/2, so guard the ratio
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-6


def test_accumulation_corrected_shape():
    # BCE(a, 0.5) + binary entropy = -(0.5 + a) ln a - (1.5 - a) ln(1 - a): its only
    # stationary point is a (quartically flat) minimum at 1/2 and it grows toward
    # both clamped extremes
    grid = np.linspace(1e-6, 1 - 1e-6, 20001)
    vals = np.array([accumulation_loss([a], "corrected") for a in grid])
    assert grid[np.argmin(vals)] == pytest.approx(0.5, abs=1e-3)
    assert vals[0] > vals[len(grid) // 2] and vals[-1] > vals[len(grid) // 2]
    grads = accumulation_loss_grad(grid, "corrected")
    signs = np.sign(grads)
    assert np.all(signs[grid < 0.4999] < 0) and np.all(signs[grid > 0.5001] > 0)


def test_accumulation_clamps_extremes():
    assert np.isfinite(accumulation_loss([0.0, 1.0]))
    assert np.all(accumulation_loss_grad(np.array([0.0, 1.0])) == 0)


# -- weighted photometric loss ------------------------------------------------


def test_loss_weight_presets():
    mono = LossWeights.monocular()
    assert (mono.w_l1, mono.w_ssim, mono.w_lpips, mono.w_mask, mono.w_accum) == (1.0, 0.2, 10.0, 5.0, 5.0)
    assert mono.w_depth == 0 and mono.w_rel_depth == 0
    assert mono.input_view_l1_boost == 10.0 and mono.minibatch == 10
    sparse = LossWeights.sparse_view()
    assert (sparse.w_accum, sparse.w_depth, sparse.w_rel_depth) == (0.5, 10.0, 20.0)
    assert sparse.input_view_l1_boost == 20.0 and sparse.minibatch == 5
    with pytest.raises(ValueError):
        LossWeights(w_l1=-1.0)


def test_loss_perfect_prediction_is_zero(rng):
    rgb = rng.random((2, 16, 16, 3))
    mask = (rng.random((2, 16, 16)) > 0.5).astype(float)
    weights = LossWeights(w_accum=0.0, w_depth=1.0, w_rel_depth=1.0)
    depth = rng.uniform(1, 2, (2, 16, 16))
    total, terms = weighted_photometric_loss(rgb, rgb, mask, mask, weights, depth, depth)
    # only pairs closer than the ranking margin leave a residual
    assert total == pytest.approx(0.0, abs=1e-6)
    assert total == pytest.approx(terms["rel_depth"], abs=1e-12)
    total, _ = weighted_photometric_loss(rgb, rgb, mask, mask, LossWeights(w_accum=0.0))
    assert total == 0.0


def test_loss_breakdown_is_additive_and_boosts_inputs(rng):
    pred, gt = rng.random((2, 3, 16, 16, 3))
    alpha = rng.uniform(0.01, 0.99, (3, 16, 16))
    mask = (rng.random((3, 16, 16)) > 0.5).astype(float)
    pd, gd = rng.uniform(1, 2, (2, 3, 16, 16))
    w = LossWeights.sparse_view()
    total, terms = weighted_photometric_loss(pred, gt, alpha, mask, w, pd, gd, is_input=[True, False, False])
    assert total == pytest.approx(sum(terms.values()), abs=1e-12)
    assert terms["lpips"] == 0.0
    _, plain = weighted_photometric_loss(pred, gt, alpha, mask, w, pd, gd)
    per_view = np.abs(pred - gt).mean(axis=(1, 2, 3))
    expect = (20.0 * per_view[0] + per_view[1] + per_view[2]) / 3
    assert terms["l1"] == pytest.approx(expect, rel=1e-12)
    assert plain["l1"] == pytest.approx(per_view.mean(), rel=1e-12)


def test_loss_shape_errors(rng):
    a = rng.random((1, 16, 16, 3))
    with pytest.raises(ShapeError):
        weighted_photometric_loss(a, a[:, :8], np.ones((1, 16, 16)), np.ones((1, 16, 16)), LossWeights())
    with pytest.raises(ShapeError):
        weighted_photometric_loss(a, a, np.ones((1, 8, 16)), np.ones((1, 8, 16)), LossWeights())


def test_ranking_loss_penalizes_inverted_order():
    g = np.arange(100, dtype=float).reshape(10, 10)
    valid = np.ones_like(g, bool)
    assert ranking_loss(g, g, valid) == 0.0
    assert ranking_loss(-g, g, valid) > 1.0
    # pairs ordered correctly but closer than the margin are still penalized
    assert ranking_loss(g * 1e-6, g, valid) > 0.0
    assert ranking_loss(g, np.ones_like(g), valid) == 0.0  # all ties are skipped


# -- initialization -----------------------------------------------------------


def test_init_package_points_on_surfaces(tmp_path):
    near, total = 0, 0
    for seed in range(4):
        scene = generate_scene(seed, 6, sampler=CameraSampler(resolution=(32, 32)), depth_resolution=(16, 16), normalize=False)
        cloud, traj = init_package(scene, tmp_path / str(seed))
        d = scene_distance(scene.spec, cloud.points)
        near += int(np.sum(d < 0.02))
        total += len(d)
        pts, cols = read_ply(tmp_path / str(seed) / "init.ply")
        assert len(pts) == len(cloud.points)
        np.testing.assert_array_equal(pts, cloud.points.astype(np.float32))
        assert traj is None
    assert near / total >= 0.95


def test_init_package_reads_directory_with_trajectory(tmp_path):
    scene = generate_scene(1, 4)
    write_scene(tmp_path, scene)
    orbit_trajectory(6).write(tmp_path / "trajectory.json")
    cloud, traj = init_package(tmp_path)
    assert len(cloud) > 0 and len(traj) == 6


def test_init_package_without_depth_fails():
    scene = generate_scene(1, 3)
    empty = SceneData([type(v)(v.rgb, v.camera, DepthMap.invalid(16, 16), v.view_id) for v in scene.views])
    with pytest.raises(EmptyCloudError):
        init_package(empty)
