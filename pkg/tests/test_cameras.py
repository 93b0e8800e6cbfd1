import json
import shutil

import numpy as np
import pytest

from services.cameras import (
    Camera,
    SceneDataset,
    View,
    camera_bundle,
    generate_ray,
    generate_rays,
    intrinsics_from_fov,
    load_cameras,
    load_dataset,
    look_at,
    orbit_cameras,
    sample_ray_batch,
    stratified_depths,
    write_cameras,
)
from services.preprocess import binarize_mask, build_pixel_table, preprocess_view
from utils.ids import IDS


def _camera(resolution=(8, 6)):
    eye = np.array([0.0, 0.0, -3.0])
    return Camera(intrinsics_from_fov(resolution, 40.0), look_at(eye), eye, resolution)


def _dataset(n_views=2, resolution=(4, 3)):
    cams = orbit_cameras(n_views, 2.5, resolution, 40.0)
    views = []
    for i, cam in enumerate(cams):
        image = np.full((resolution[1], resolution[0], 3), 0.1 * (i + 1))
        mask = np.zeros(resolution[::-1])
        mask[0, 0] = 1.0
        views.append(View(index=i, image=image, mask=mask, camera=cam))
    return SceneDataset(views=views, t_near=1.0, t_far=4.0)


def test_center_pixel_looks_along_the_optical_axis():
    cam = _camera((9, 7))
    origin, d = generate_ray(cam, (4.0, 3.0))
    np.testing.assert_allclose(origin, [0.0, 0.0, -3.0])
    np.testing.assert_allclose(d, [0.0, 0.0, 1.0], atol=1e-12)


def test_ray_directions_are_unit_and_project_back():
    cam = orbit_cameras(3, 2.5, (16, 12), 50.0, seed=1, jitter=0.05)[2]
    u = np.array([0.0, 5.0, 15.0])
    v = np.array([0.0, 7.0, 11.0])
    origins, dirs = generate_rays(cam, u, v)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
    pixels = cam.project(origins + 2.0 * dirs)
    np.testing.assert_allclose(pixels, np.stack([u, v], axis=1), atol=1e-9)


def test_pixel_outside_image_is_rejected():
    with pytest.raises(ValueError, match="outside"):
        generate_ray(_camera((8, 6)), (8.0, 0.0))


@pytest.mark.parametrize("kwargs, match", [
    ({"intrinsics": (0.0, 10.0, 4.0, 3.0)}, "focal"),
    ({"intrinsics": (10.0, 10.0, 9.0, 3.0)}, "principal point"),
    ({"rotation": np.diag([1.0, 1.0, -1.0])}, "orthonormal"),
    ({"rotation": 1.1 * np.eye(3)}, "orthonormal"),
])
def test_invalid_cameras(kwargs, match):
    base = dict(intrinsics=(10.0, 10.0, 4.0, 3.0), rotation=np.eye(3), translation=np.zeros(3), resolution=(8, 6))
    with pytest.raises(ValueError, match=match):
        Camera(**{**base, **kwargs})


def test_look_at_handles_vertical_view_direction():
    r = look_at([0.0, 3.0, 0.0])
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(r[:, 2], [0.0, -1.0, 0.0], atol=1e-12)


def test_orbit_cameras_face_the_origin():
    for cam in orbit_cameras(6, 2.0, (8, 8), 40.0, seed=0, jitter=0.1):
        assert np.linalg.norm(cam.translation) == pytest.approx(2.0)
        np.testing.assert_allclose(cam.rotation[:, 2], -cam.translation / 2.0, atol=1e-12)


def test_stratified_depths_bins_and_deltas():
    jitter = np.array([[0.0, 0.5, 0.999]])
    t, deltas = stratified_depths(1, 3, 1.0, 4.0, jitter)
    np.testing.assert_allclose(t, [[1.0, 2.5, 3.999]])
    np.testing.assert_allclose(deltas, [[1.5, 1.499, 0.001]])
    mid, _ = stratified_depths(2, 4, 0.0, 4.0, None)
    np.testing.assert_allclose(mid[1], [0.5, 1.5, 2.5, 3.5])


def test_ray_batch_is_deterministic_in_seeds():
    ds = _dataset()
    a = sample_ray_batch(ds, 20, 8, seed=3, strata_seed=4)
    b = sample_ray_batch(ds, 20, 8, seed=3, strata_seed=4)
    c = sample_ray_batch(ds, 20, 8, seed=3, strata_seed=5)
    np.testing.assert_array_equal(a.origins, b.origins)
    np.testing.assert_array_equal(a.t, b.t)
    np.testing.assert_array_equal(a.directions, c.directions)
    assert not np.array_equal(a.t, c.t)
    assert np.all(np.diff(a.t, axis=1) > 0)
    assert np.all((a.t >= 1.0) & (a.t < 4.0))
    assert set(np.unique(a.masks)) <= {0.0, 1.0}


def test_ray_batch_colors_come_from_the_sampled_view():
    ds = _dataset(n_views=3)
    bundle = sample_ray_batch(ds, 64, 4, seed=0)
    brightness = np.round(bundle.colors[:, 0], 6)
    assert set(brightness) <= {0.1, 0.2, 0.3}
    for level, view in zip((0.1, 0.2, 0.3), ds.views):
        rows = brightness == level
        np.testing.assert_allclose(bundle.origins[rows], np.broadcast_to(view.camera.translation, (rows.sum(), 3)))


def test_ray_batch_argument_checks():
    ds = _dataset()
    with pytest.raises(ValueError, match="batch size"):
        sample_ray_batch(ds, 0, 8, seed=0)
    with pytest.raises(ValueError, match="samples"):
        sample_ray_batch(ds, 4, 1, seed=0)


def test_bundle_subset_and_points():
    bundle = camera_bundle(_camera((4, 2)), 1.0, 3.0, 5)
    assert bundle.num_rays == 8 and bundle.num_samples == 5
    part = bundle.subset(np.array([1, 6]))
    assert part.num_rays == 2
    np.testing.assert_allclose(part.points[:, 0], part.origins + part.t[:, :1] * part.directions)


def test_dataset_rejects_mixed_resolutions_and_bad_bounds():
    a = orbit_cameras(1, 2.0, (4, 4), 40.0)[0]
    b = orbit_cameras(1, 2.0, (5, 4), 40.0)[0]
    views = [View(0, np.zeros((4, 4, 3)), np.zeros((4, 4)), a), View(1, np.zeros((4, 5, 3)), np.zeros((4, 5)), b)]
    with pytest.raises(ValueError, match="resolution"):
        SceneDataset(views=views, t_near=1.0, t_far=4.0)
    with pytest.raises(ValueError, match="t_near"):
        SceneDataset(views=views[:1], t_near=2.0, t_far=1.0)


def test_preprocess_view_shapes_and_binarization():
    image = np.full((3, 4, 4), 1.5)   # RGBA, overexposed
    mask = np.array([[0.2, 0.5, 0.7, 0.0]] * 3)
    img, m = preprocess_view(image, mask, (4, 3), "view 0")
    assert img.shape == (3, 4, 3) and img.max() == 1.0
    np.testing.assert_array_equal(m[0], [0.0, 1.0, 1.0, 0.0])
    with pytest.raises(ValueError, match="camera says 5x3"):
        preprocess_view(image, mask, (5, 3), "view 0")
    np.testing.assert_array_equal(binarize_mask([0.49, 0.5]), [0.0, 1.0])


def test_pixel_table_is_view_major():
    table = build_pixel_table([np.zeros((2, 3, 3)), np.ones((2, 3, 3))], [np.zeros((2, 3)), np.ones((2, 3))])
    assert len(table) == 12
    np.testing.assert_array_equal(table.view, [0] * 6 + [1] * 6)
    np.testing.assert_array_equal(table.u[:6], [0, 1, 2, 0, 1, 2])
    np.testing.assert_array_equal(table.v[:6], [0, 0, 0, 1, 1, 1])


def test_cameras_json_round_trip(tmp_path):
    cams = orbit_cameras(3, 2.5, (8, 6), 45.0, seed=2, jitter=0.05)
    write_cameras(tmp_path / IDS.CAMERAS_JSON, cams, 1.0, 4.0)
    loaded, t_near, t_far = load_cameras(tmp_path)
    assert (t_near, t_far) == (1.0, 4.0)
    for a, b in zip(cams, loaded):
        np.testing.assert_allclose(a.rotation, b.rotation)
        assert a.intrinsics == b.intrinsics and a.resolution == b.resolution


def test_load_dataset_from_generated_views(tiny_dataset_dir):
    ds = load_dataset(tiny_dataset_dir)
    assert len(ds.views) == 4
    assert ds.resolution == (16, 16)
    assert ds.views[0].image.shape == (16, 16, 3)
    assert ds.views[0].mask.sum() > 0
    assert len(ds.pixels) == 4 * 16 * 16


def test_load_dataset_names_the_missing_image(tiny_dataset_dir, tmp_path):
    copy = tmp_path / "data"
    shutil.copytree(tiny_dataset_dir, copy)
    (copy / IDS.IMAGES_DIR / (IDS.VIEW_PATTERN % 2)).unlink()
    with pytest.raises(ValueError, match="view 2: missing image"):
        load_dataset(copy)


def test_load_dataset_names_the_bad_camera(tiny_dataset_dir, tmp_path):
    copy = tmp_path / "data"
    shutil.copytree(tiny_dataset_dir, copy)
    path = copy / IDS.CAMERAS_JSON
    records = json.loads(path.read_text())
    records["views"][1]["extrinsics"][0] = 3.0
    path.write_text(json.dumps(records))
    with pytest.raises(ValueError, match="view 1"):
        load_dataset(copy)


def test_load_dataset_rejects_malformed_records(tmp_path):
    (tmp_path / IDS.CAMERAS_JSON).write_text(json.dumps({"t_near": 1.0, "t_far": 4.0,
                                                         "views": [{"index": 0, "intrinsics": [1, 2]}]}))
    with pytest.raises(ValueError, match="intrinsics"):
        load_dataset(tmp_path)
    with pytest.raises(ValueError, match="not found"):
        load_dataset(tmp_path / "nope")
