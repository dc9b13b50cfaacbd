import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import adlift.render as R
from adlift.scene import (
    Camera,
    Gaussian,
    Gaussians,
    Scene,
    bundled_cameras,
    bundled_scene,
    init_safeguard,
    look_at,
    make_camera_ring,
    make_synthetic_scene,
)


def _axis_camera(size=64, f=50.0):
    rot, t = look_at(np.array([3.0, 0.0, 0.0]))
    return Camera(rot, t, f, f, size / 2, size / 2, size, size)


def _gaussian(pos=(0, 0, 0), log_scale=(-2, -2, -2), q=(1, 0, 0, 0), color=(1, 0, 0), logit=10.0):
    return Gaussian(np.array(pos, float), np.array(log_scale, float), np.array(q, float),
                    np.array(color, float), float(logit))


def _random_scene(seed, n_raw=10, n_sg=10, size=32):
    base = make_synthetic_scene(n_raw, 100 + seed, 1.0, (0.2, 0.3, 0.4))
    sg = make_synthetic_scene(n_sg, 500 + seed, 1.0).raw
    cam = make_camera_ring(5, 3.0, 1.0, size, 50)[seed % 5]
    return base.with_safeguard(sg), cam


def test_on_axis_projection_hits_principal_point():
    sp = R.project_gaussian(_gaussian(), _axis_camera())
    np.testing.assert_allclose(sp.mean2d, [32.0, 32.0], atol=1e-12)
    assert sp.depth == pytest.approx(3.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1),
       st.floats(-3, -1))
def test_isotropic_cov_ignores_rotation(q, ls):
    cam = _axis_camera()
    a = R.project_gaussian(_gaussian((0.1, 0.2, -0.1), (ls,) * 3, q), cam)
    b = R.project_gaussian(_gaussian((0.1, 0.2, -0.1), (ls,) * 3), cam)
    np.testing.assert_allclose(a.cov2d, b.cov2d, atol=1e-9)


def test_cov2d_dilated_and_symmetric():
    sp = R.project_gaussian(_gaussian(log_scale=(-12, -12, -12)), _axis_camera())
    np.testing.assert_allclose(sp.cov2d, R.COV_DILATION * np.eye(2), atol=1e-6)


def test_behind_camera_culled():
    assert R.project_gaussian(_gaussian((5.0, 0.0, 0.0)), _axis_camera()) is None
    scene = Scene(Gaussians.from_list([_gaussian((5.0, 0.0, 0.0))]), Gaussians.empty(), np.zeros(3))
    np.testing.assert_array_equal(R.render(scene, _axis_camera()), 0.0)


def test_empty_scene_is_background():
    bg = np.array([0.25, 0.5, 0.75])
    scene = Scene(Gaussians.empty(), Gaussians.empty(), bg)
    img = R.render(scene, _axis_camera())
    assert np.all(img == bg)


def test_single_gaussian_clamped_alpha():
    bg = np.array([0.2, 0.4, 0.6])
    c = np.array([0.9, 0.1, 0.5])
    scene = Scene(Gaussians.from_list([_gaussian(color=c)]), Gaussians.empty(), bg)
    img = R.render(scene, _axis_camera())
    np.testing.assert_allclose(img[32, 32], 0.99 * c + 0.01 * bg, atol=1e-12)


def test_two_coincident_gaussians_rear_weight():
    g = _gaussian()
    scene = Scene(Gaussians.from_list([g, g]), Gaussians.empty(), np.zeros(3))
    w, T = R.blend_weights(scene, _axis_camera(), 32, 32)
    assert w[0] == pytest.approx(0.99, abs=1e-12)
    assert w[1] == pytest.approx(0.01 * 0.99, abs=1e-12)
    assert T == pytest.approx(0.01 * 0.01, abs=1e-12)


def test_depth_order_front_to_back_with_index_ties():
    gs = [_gaussian((0.5, 0, 0)), _gaussian((-0.5, 0, 0)), _gaussian((0.5, 0, 0))]
    proj = R.project(Gaussians.from_list(gs), _axis_camera())
    assert list(R.depth_order(proj)) == [0, 2, 1]


@pytest.mark.parametrize("seed", range(5))
def test_weights_plus_transmittance_sum_to_one(seed):
    scene, cam = _random_scene(seed)
    rng = np.random.default_rng(seed)
    for px, py in rng.integers(0, 32, size=(20, 2)):
        w, T = R.blend_weights(scene, cam, int(px), int(py))
        assert abs(w.sum() + T - 1.0) < 1e-12


def test_render_is_weighted_sum_of_colors():
    scene, cam = _random_scene(3)
    img = R.render(scene, cam)
    colors = np.clip(scene.joint().color, 0, 1)
    for px, py in [(3, 4), (16, 16), (20, 11)]:
        w, T = R.blend_weights(scene, cam, px, py)
        np.testing.assert_allclose(img[py, px], np.clip(w @ colors + T * scene.background, 0, 1), atol=1e-12)


def test_zero_adjoint_gives_zero_grads():
    scene, cam = _random_scene(1)
    g = R.render_backward(scene, cam, np.zeros((32, 32, 3)))
    assert g.records.shape == (10, 14)
    assert not g.records.any()


def test_no_safeguards_gives_empty_grads():
    scene = bundled_scene()
    g = R.render_backward(scene, bundled_cameras()[0], np.ones((64, 64, 3)))
    assert len(g) == 0


def test_adjoint_shape_mismatch():
    scene, cam = _random_scene(0)
    with pytest.raises(ValueError):
        R.render_backward(scene, cam, np.zeros((16, 16, 3)))


@pytest.mark.parametrize("seed", [0, 7])
def test_backward_matches_finite_differences_12_gaussians(seed):
    scene, cam = _random_scene(seed, n_raw=6, n_sg=6)
    adj = np.random.default_rng(seed).standard_normal((32, 32, 3))
    ana = R.render_backward(scene, cam, adj).records
    fd = R.finite_diff_grads(scene, cam, lambda im: float(np.sum(adj * im))).records
    err = np.abs(ana - fd) / np.maximum(1e-8, np.abs(ana))
    assert err.max() < 1e-4


def test_finite_diff_quadratic_loss_one_gaussian():
    scene = Scene(Gaussians.empty(), Gaussians.from_list([_gaussian(log_scale=(-1.5, -1.8, -1.6), color=(0.6, 0.3, 0.2), logit=0.3)]),
                  np.full(3, 0.3))
    cam = _axis_camera(32, 25.0)
    target = np.full((32, 32, 3), 0.5)
    fd = R.finite_diff_grads(scene, cam, lambda im: float(np.sum((im - target) ** 2)))
    ana = R.render_backward(scene, cam, 2 * (R.render(scene, cam) - target))
    np.testing.assert_allclose(ana.records, fd.records, rtol=1e-4, atol=1e-9)
    zero = R.finite_diff_grads(scene, cam, lambda im: 0.0)
    assert not zero.records.any()


def test_param_grads_accessors():
    g = R.ParamGrads(np.arange(28.0).reshape(2, 14))
    np.testing.assert_array_equal(g.position[1], [14, 15, 16])
    np.testing.assert_array_equal(g.opacity_logit, [13, 27])


def test_thread_count_does_not_change_results():
    scene = init_safeguard(bundled_scene(), "copy_raw")
    cam = bundled_cameras()[2]
    adj = np.random.default_rng(0).standard_normal((64, 64, 3))
    old = R.get_threads()
    try:
        out = []
        for k in (1, 3, 8):
            R.set_threads(k)
            out.append((R.render(scene, cam), R.render_backward(scene, cam, adj).records))
    finally:
        R.set_threads(old)
    for img, g in out[1:]:
        assert np.array_equal(img, out[0][0])
        assert np.array_equal(g, out[0][1])
