import numpy as np
import pytest

from services.autodiff import DiffGraph, backward, finite_difference_check
from services.cameras import RayBundle, camera_bundle, orbit_cameras, stratified_depths
from services.fields import FieldConfig, init_fields
from services.renderer import (
    compute_weights,
    render_bundle,
    render_ray,
    render_rays,
    render_view,
    sdf_to_density,
    surface_point,
    weight_entropy,
    weight_nodes,
)
from services.scenes import Sphere

GREY = np.array([0.2, 0.4, 0.6])


def _constant_shading(graph, points, normals, view_dirs):
    return graph.constant(np.tile(GREY, (len(points), 1)))


def _facing_shading(graph, points, normals, view_dirs):
    facing = graph.reshape(graph.dot(normals, graph.constant(view_dirs)), (len(points), 1))
    return graph.concat([facing, facing, facing])


def _bundle(origins, dirs, samples, t_near=1.0, t_far=4.0):
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(origins)
    t, deltas = stratified_depths(n, samples, t_near, t_far, None)
    return RayBundle(origins, dirs, np.zeros((n, 3)), np.zeros(n), t, deltas)


def _sphere_sources(graph):
    return Sphere(np.zeros(3), 0.5), _constant_shading


# ---------- density & weights ----------

def test_density_is_bounded_and_non_increasing():
    s = np.linspace(-1.0, 1.0, 101)
    sigma = sdf_to_density(s, 30.0)
    assert np.all(np.diff(sigma) <= 0)
    assert np.all((sigma > 0) & (sigma < 30.0))
    assert sdf_to_density(0.0, 30.0) == pytest.approx(15.0)
    with pytest.raises(ValueError, match="kappa"):
        sdf_to_density(s, 0.0)


def test_weights_and_transmittance():
    densities = np.array([[0.0, 1.0, 2.0, 50.0]])
    deltas = np.full((1, 4), 0.5)
    w, trans = compute_weights(densities, deltas)
    assert trans[0, 0] == 1.0
    assert np.all(np.diff(trans) <= 0)
    assert w.sum() <= 1.0
    np.testing.assert_allclose(w[0, 1], np.exp(0.0) * (1 - np.exp(-0.5)))
    np.testing.assert_allclose(w.sum(), 1.0 - np.exp(-(densities * deltas).sum()))


@pytest.mark.parametrize("densities, deltas, match", [
    ([[-1.0, 1.0]], [[0.1, 0.1]], "non-negative"),
    ([[1.0, 1.0]], [[0.1, 0.0]], "positive"),
])
def test_weight_input_checks(densities, deltas, match):
    with pytest.raises(ValueError, match=match):
        compute_weights(np.array(densities), np.array(deltas))


def test_graph_weights_match_numpy(rng):
    sigma = rng.uniform(0.0, 5.0, size=(3, 6))
    deltas = rng.uniform(0.05, 0.2, size=(3, 6))
    graph = DiffGraph()
    w, trans = weight_nodes(graph, graph.constant(sigma), deltas)
    w_ref, t_ref = compute_weights(sigma, deltas)
    np.testing.assert_allclose(graph.value(w), w_ref, rtol=1e-12)
    np.testing.assert_allclose(graph.value(trans), t_ref, rtol=1e-12)


def test_weight_entropy():
    assert weight_entropy(np.full(4, 0.25)) == pytest.approx(np.log(4.0))
    assert weight_entropy(np.array([0.0, 0.7, 0.0])) == 0.0
    assert weight_entropy(np.zeros(5)) == 0.0


# ---------- rendering ----------

def test_hit_and_miss_against_a_sphere():
    bundle = _bundle([[0, 0, -3.0], [0, 0.9, -3.0]], [[0, 0, 1.0], [0, 0, 1.0]], 256)
    result = render_bundle(bundle, _sphere_sources, kappa=100.0, cutoff=0.0)
    assert result.opacity[0] == pytest.approx(1.0, abs=1e-6)
    assert result.opacity[1] < 1e-6
    np.testing.assert_allclose(result.color, result.opacity[:, None] * GREY, atol=1e-6)
    assert result.hit.tolist() == [True, False]


def test_head_on_depth_is_unbiased():
    bundle = _bundle([0, 0, -3.0], [0, 0, 1.0], 300)
    result = render_ray(bundle, _sphere_sources, kappa=100.0, cutoff=0.0)
    bin_width = 3.0 / 300
    assert abs(result.depth[0] - 2.5) <= 2 * bin_width
    points, normals, hit = surface_point(result, bundle, Sphere(np.zeros(3), 0.5))
    assert hit[0]
    np.testing.assert_allclose(normals[0], [0, 0, -1.0], atol=1e-3)
    np.testing.assert_allclose(points[0], [0, 0, -0.5], atol=2 * bin_width)


def test_surface_point_is_nan_on_a_miss():
    bundle = _bundle([0, 0.9, -3.0], [0, 0, 1.0], 32)
    result = render_ray(bundle, _sphere_sources, kappa=50.0)
    points, normals, hit = surface_point(result, bundle, Sphere(np.zeros(3), 0.5))
    assert not hit[0]
    assert np.isnan(points).all() and np.isnan(normals).all()


def test_render_ray_argument_checks():
    two = _bundle([[0, 0, -3.0]] * 2, [[0, 0, 1.0]] * 2, 8)
    with pytest.raises(ValueError, match="one ray"):
        render_ray(two, _sphere_sources, 10.0)


def test_cutoff_skips_low_weight_samples():
    bundle = _bundle([0, 0, -3.0], [0, 0, 1.0], 128)
    graph = DiffGraph()
    kappa = graph.constant(np.array([100.0]))
    everything = render_rays(graph, bundle, Sphere(np.zeros(3), 0.5), _constant_shading, kappa, cutoff=0.0)
    graph2 = DiffGraph()
    kappa2 = graph2.constant(np.array([100.0]))
    pruned = render_rays(graph2, bundle, Sphere(np.zeros(3), 0.5), _constant_shading, kappa2, cutoff=1e-3)
    assert pruned.shaded_samples < everything.shaded_samples
    assert pruned.shaded_samples == int(np.sum(pruned.weights >= 1e-3)) - pruned.skipped_backfacing
    np.testing.assert_allclose(graph2.value(pruned.color), graph.value(everything.color), atol=1e-2)


def test_back_facing_samples_are_flagged_and_skipped():
    # a ray starting inside the sphere sees only back faces
    bundle = _bundle([0, 0, 0.0], [0, 0, 1.0], 64, t_near=0.05, t_far=1.0)
    graph = DiffGraph()
    out = render_rays(graph, bundle, Sphere(np.zeros(3), 0.5), _constant_shading,
                      graph.constant(np.array([50.0])), cutoff=0.0)
    assert out.skipped_backfacing > 0
    assert out.flagged[0]
    np.testing.assert_allclose(graph.value(out.color), 0.0)


def test_kappa_gradient_matches_central_differences():
    bundle = _bundle([[0, 0, -3.0], [0.2, 0.1, -3.0]], [[0, 0, 1.0], [0, 0, 1.0]], 64)

    def f(graph, log_kappa):
        out = render_rays(graph, bundle, Sphere(np.zeros(3), 0.5), _constant_shading,
                          graph.exp(log_kappa), cutoff=0.0)
        return graph.sum(out.color)

    assert finite_difference_check(f, np.array([np.log(20.0)])) < 1e-5


def test_geometry_gradient_through_normals_and_weights(tiny_fields):
    geo, _, _ = init_fields(0, FieldConfig(**{**tiny_fields.__dict__, "softplus_beta": 10.0}))
    bundle = _bundle([[0, 0, -2.0], [0.1, -0.1, -2.0]], [[0, 0, 1.0], [0, 0.05, 1.0]], 24, t_near=0.5, t_far=3.0)
    name = "geometry.b0"
    base = geo.params[name].copy()

    def loss_of(graph, b_id):
        bound = geo.bind(graph, trainable=True, leaves={name: b_id})
        out = render_rays(graph, bundle, bound, _facing_shading, graph.constant(np.array([20.0])), cutoff=0.0)
        return graph.sum(out.color)

    graph = DiffGraph()
    b_id = graph.parameter(base)
    analytic = backward(graph, loss_of(graph, b_id))[b_id]

    numeric = np.zeros_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += 1e-6
        minus[i] -= 1e-6
        values = []
        for b in (plus, minus):
            g = DiffGraph()
            values.append(float(g.value(loss_of(g, g.parameter(b)))))
        numeric[i] = (values[0] - values[1]) / 2e-6
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_render_view_is_chunk_and_thread_invariant():
    camera = orbit_cameras(1, 2.5, (6, 5), 40.0)[0]
    whole, alpha = render_view(camera, 1.0, 4.0, 32, _sphere_sources, 50.0)
    chunked, _ = render_view(camera, 1.0, 4.0, 32, _sphere_sources, 50.0, chunk=7, threads=2)
    assert whole.shape == (5, 6, 3) and alpha.shape == (5, 6)
    np.testing.assert_allclose(chunked, whole, atol=1e-12)
    assert alpha.max() > 0.5


def test_camera_bundle_render_matches_render_view():
    camera = orbit_cameras(1, 2.5, (4, 4), 40.0)[0]
    image, _ = render_view(camera, 1.0, 4.0, 16, _sphere_sources, 50.0)
    result = render_bundle(camera_bundle(camera, 1.0, 4.0, 16, np.array([5, 10])), _sphere_sources, 50.0)
    np.testing.assert_allclose(result.color, image.reshape(-1, 3)[[5, 10]], atol=1e-12)
