import numpy as np
import pytest

from services.autodiff import DiffGraph, backward
from services.fields import (
    FieldConfig,
    PBRSample,
    PositionalEncodingConfig,
    ROUGHNESS_FLOOR,
    all_parameters,
    count_parameters,
    encoding_jacobian,
    geometry_query,
    init_fields,
    light_query,
    material_query,
    positional_encode,
    sh9_basis,
    zero_output_layer,
)
from services.shading import fibonacci_sphere
from utils.ids import IDS


def _numeric_grad(fn, x, step):
    grad = np.zeros_like(x)
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus.flat[i] += step
        minus.flat[i] -= step
        grad.flat[i] = (fn(plus) - fn(minus)) / (2.0 * step)
    return grad


def test_init_is_deterministic_in_seed(tiny_fields):
    a = init_fields(5, tiny_fields)
    b = init_fields(5, tiny_fields)
    c = init_fields(6, tiny_fields)
    for net_a, net_b, net_c in zip(a, b, c):
        assert sorted(net_a.params) == sorted(net_b.params)
        for name in net_a.params:
            np.testing.assert_array_equal(net_a.params[name], net_b.params[name])
        assert any(not np.array_equal(net_a.params[n], net_c.params[n]) for n in net_a.params)


def test_geometry_starts_as_a_sphere_like_field():
    geo, _, _ = init_fields(0, FieldConfig(geometry_layers=2, geometry_width=64, geometry_frequencies=2,
                                           skip_layer=0))
    assert geo.sdf(np.zeros(3))[0] < 0.0
    far = 1.5 * fibonacci_sphere(64)
    assert geo.sdf(far).mean() > 0.0


def test_sdf_gradient_matches_central_differences(tiny_fields, rng):
    geo, _, _ = init_fields(1, tiny_fields)
    points = rng.uniform(-0.8, 0.8, size=(5, 3))
    _, grad = geo.sdf_and_gradient(points)
    for i, p in enumerate(points):
        numeric = _numeric_grad(lambda q: geo.sdf(q)[0], p.copy(), 1e-6)
        np.testing.assert_allclose(grad[i], numeric, rtol=1e-4, atol=1e-6)


def test_eikonal_style_loss_differentiates_through_tangents(rng):
    cfg = FieldConfig(geometry_layers=2, geometry_width=8, geometry_frequencies=1, skip_layer=0,
                      softplus_beta=10.0)
    geo, _, _ = init_fields(2, cfg)
    points = rng.uniform(-0.6, 0.6, size=(6, 3))
    name = "geometry.w1"
    base = geo.params[name].copy()

    def loss_of(graph, w_id):
        bound = geo.bind(graph, trainable=True, leaves={name: w_id})
        _, grad = bound.sdf_nodes(graph, points, with_gradient=True)
        return graph.mean(graph.square(graph.affine(graph.norm(grad), shift=-1.0)))

    graph = DiffGraph()
    w_id = graph.parameter(base)
    analytic = backward(graph, loss_of(graph, w_id))[w_id]

    def value(w):
        g = DiffGraph()
        return float(g.value(loss_of(g, g.parameter(w))))

    numeric = _numeric_grad(value, base, 1e-6)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_material_outputs_stay_in_range(tiny_fields, rng):
    _, mat, _ = init_fields(3, tiny_fields)
    for name in list(mat.params):
        mat.params[name] = mat.params[name] * 50.0  # saturate the heads
    sample = material_query(mat, rng.uniform(-1, 1, size=(200, 3)))
    assert sample.albedo.shape == (200, 3)
    assert np.all((sample.albedo >= 0) & (sample.albedo <= 1))
    assert np.all((sample.roughness >= ROUGHNESS_FLOOR) & (sample.roughness <= 1))
    assert np.all((sample.metallic >= 0) & (sample.metallic <= 1))


def test_zeroed_material_head_gives_half_values(tiny_fields):
    _, mat, _ = init_fields(3, tiny_fields)
    zero_output_layer(mat)
    sample = mat.material(np.zeros((2, 3)))
    np.testing.assert_allclose(sample.as_array(), 0.5)


@pytest.mark.parametrize("model", ["mlp", "sh9"])
def test_light_is_positive(model, tiny_fields):
    cfg = FieldConfig(**{**tiny_fields.__dict__, "light_model": model})
    _, _, light = init_fields(4, cfg)
    radiance = light_query(light, fibonacci_sphere(50))
    assert radiance.shape == (50, 3)
    assert np.all(radiance > 0)


def test_sh9_light_matches_numpy_basis():
    _, _, light = init_fields(4, FieldConfig(light_model="sh9", geometry_layers=1, geometry_width=4,
                                             material_layers=1, material_width=4))
    dirs = fibonacci_sphere(20)
    expected = np.logaddexp(0.0, sh9_basis(dirs) @ light.params["light.sh"])
    np.testing.assert_allclose(light.radiance(dirs), expected, rtol=1e-12)


def test_light_query_rejects_non_unit_direction(tiny_fields):
    _, _, light = init_fields(4, tiny_fields)
    with pytest.raises(ValueError, match="norm"):
        light_query(light, np.array([0.0, 0.0, 1.01]))


def test_geometry_query_normals(tiny_fields, rng):
    geo, _, _ = init_fields(1, tiny_fields)
    sample = geometry_query(geo, rng.uniform(-1, 1, size=(30, 3)))
    norms = np.linalg.norm(sample.normal[sample.valid], axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    single = geometry_query(geo, np.array([0.1, 0.2, 0.3]))
    assert single.sdf.shape == (1,)


def test_queries_reject_bad_shapes_and_wrong_field(tiny_fields):
    geo, mat, _ = init_fields(1, tiny_fields)
    with pytest.raises(ValueError, match=r"\(N, 3\)"):
        geo.sdf(np.zeros((4, 2)))
    with pytest.raises(ValueError, match="geometry"):
        mat.sdf(np.zeros((1, 3)))


def test_queries_chunk_transparently(tiny_fields, rng, monkeypatch):
    from services import fields

    geo, _, _ = init_fields(1, tiny_fields)
    points = rng.uniform(-1, 1, size=(50, 3))
    whole = geo.sdf(points)
    monkeypatch.setattr(fields, "QUERY_CHUNK", 7)
    np.testing.assert_allclose(geo.sdf(points), whole, rtol=0, atol=1e-12)


def test_encoding_layout_and_jacobian(rng):
    cfg = PositionalEncodingConfig(num_frequencies=3)
    x = rng.uniform(-1, 1, size=(4, 3))
    enc = positional_encode(x, cfg)
    assert enc.shape == (4, cfg.output_dim(3)) == (4, 21)
    np.testing.assert_array_equal(enc[:, :3], x)
    np.testing.assert_allclose(enc[:, 3:6], np.sin(np.pi * x))
    np.testing.assert_allclose(enc[:, 6:9], np.cos(np.pi * x))

    jac = encoding_jacobian(x, cfg)
    for a in range(3):
        numeric = _numeric_grad_rows(lambda p: positional_encode(p, cfg), x, a, 1e-6)
        np.testing.assert_allclose(jac[a], numeric, atol=1e-7)


def _numeric_grad_rows(fn, x, axis, step):
    plus, minus = x.copy(), x.copy()
    plus[:, axis] += step
    minus[:, axis] -= step
    return (fn(plus) - fn(minus)) / (2.0 * step)


def test_parameter_table_and_counts(tiny_fields):
    geo, mat, light = init_fields(0, tiny_fields)
    table = all_parameters(geo, mat, light, np.log(20.0))
    assert table[IDS.LOG_KAPPA][0] == pytest.approx(np.log(20.0))
    assert sum(v.size for v in table.values()) == (
        count_parameters(geo) + count_parameters(mat) + count_parameters(light) + 1)
    assert all(name.split(".")[0] in ("geometry", "material", "light") for name in table if name != IDS.LOG_KAPPA)


def test_pbr_sample_array_layout():
    sample = PBRSample.constant(3, (0.1, 0.2, 0.3), 0.4, 0.5)
    arr = sample.as_array()
    assert arr.shape == (3, 5)
    np.testing.assert_allclose(PBRSample.from_array(arr).albedo, sample.albedo)


def test_field_config_validation():
    with pytest.raises(ValueError, match="light_model"):
        FieldConfig(light_model="grid")
    with pytest.raises(ValueError, match="geometry_width"):
        FieldConfig(geometry_width=0)
