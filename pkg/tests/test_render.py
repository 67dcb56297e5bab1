"""Ray generation, sampling, compositing and full ray rendering."""

import math

import numpy as np
import pytest
from scipy.stats import chi2

import hdrf.autodiff as ad
from hdrf.autodiff import Tensor, finite_diff_check
from hdrf.encoding import positional_encode
from hdrf.errors import DegenerateError, InputError
from hdrf.model import ModelConfig, create_bundle, field_forward, tone_map
from hdrf.render import (
    CameraView,
    Rays,
    composite,
    composite_op,
    generate_rays,
    hierarchical_sample,
    render_hdr,
    render_image,
    render_ldr,
    render_rays,
    stratified_sample,
    view_pixel_grid,
)
from test_model import TINY, make_sigmoid_mapper, tiny_bundle


def simple_view(size=5, exposure=1.0):
    return CameraView(np.eye(3), np.zeros(3), fx=100.0, fy=100.0, cx=size / 2, cy=size / 2,
                      width=size, height=size, exposure_time_s=exposure)


def straight_rays(n=2, near=0.5, far=3.5):
    o = np.tile([0.0, 0.0, 2.0], (n, 1))
    d = np.tile([0.0, 0.0, -1.0], (n, 1))
    return Rays(o, d, near, far)


# ---------------------------------------------------------------------------
# camera and rays


def test_view_rejects_non_orthonormal_rotation():
    r = np.eye(3)
    r[0, 0] = 1.1
    with pytest.raises(InputError):
        CameraView(r, np.zeros(3), 10, 10, 2, 2, 4, 4, 1.0)


def test_view_rejects_non_positive_exposure():
    with pytest.raises(InputError):
        CameraView(np.eye(3), np.zeros(3), 10, 10, 2, 2, 4, 4, 0.0)


def test_ray_through_principal_point_looks_down_minus_z():
    view = simple_view(size=5)  # cx = cy = 2.5, so pixel (2, 2) center hits it
    rays = generate_rays(view, [(2, 2)], 1.0, 2.0)
    assert np.allclose(rays.directions[0], [0.0, 0.0, -1.0], atol=1e-12)
    assert np.allclose(rays.origins[0], 0.0)


def test_ray_one_column_right_of_center():
    view = simple_view(size=5)
    rays = generate_rays(view, [(2, 3)], 1.0, 2.0)
    expected = np.array([1.0 / view.fx, 0.0, -1.0])
    expected /= np.linalg.norm(expected)
    assert np.allclose(rays.directions[0], expected, atol=1e-12)


def test_distinct_pixels_give_distinct_directions():
    view = simple_view()
    rays = generate_rays(view, [(0, 0), (4, 4), (2, 1)], 1.0, 2.0)
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.allclose(rays.directions[i], rays.directions[j])


def test_out_of_bounds_pixel_rejected():
    view = simple_view()
    with pytest.raises(InputError):
        generate_rays(view, [(5, 0)], 1.0, 2.0)
    with pytest.raises(InputError):
        generate_rays(view, [(0, -1)], 1.0, 2.0)


def test_rotated_pose_rotates_rays():
    # columns of the rotation are the camera axes in world coordinates;
    # here camera z maps to world -x, so the view axis (-z_cam) is world +x
    r = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    view = CameraView(r, np.array([1.0, 2.0, 3.0]), 50, 50, 2.5, 2.5, 5, 5, 1.0)
    rays = generate_rays(view, [(2, 2)], 1.0, 2.0)
    assert np.allclose(rays.directions[0], [1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(rays.origins[0], [1.0, 2.0, 3.0])


def test_rays_validate_bounds_and_unit_norm():
    with pytest.raises(InputError):
        Rays(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]), 2.0, 2.0)
    with pytest.raises(InputError):
        Rays(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.5]]), 1.0, 2.0)


# ---------------------------------------------------------------------------
# stratified sampling


def test_stratified_one_sample_per_bin():
    rays = straight_rays(n=1, near=2.0, far=6.0)
    depths = stratified_sample(rays, 4, np.random.default_rng(0))
    assert depths.shape == (1, 4)
    for i in range(4):
        assert 2.0 + i <= depths[0, i] < 3.0 + i


def test_stratified_single_sample_inside_range():
    rays = straight_rays(n=3, near=1.0, far=2.0)
    depths = stratified_sample(rays, 1, np.random.default_rng(1))
    assert np.all((depths >= 1.0) & (depths < 2.0))


def test_stratified_seeded_determinism():
    rays = straight_rays(n=4)
    a = stratified_sample(rays, 8, np.random.default_rng(42))
    b = stratified_sample(rays, 8, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_stratified_midpoints_without_rng():
    rays = straight_rays(n=1, near=0.0, far=4.0)
    depths = stratified_sample(rays, 4, None)
    assert np.allclose(depths[0], [0.5, 1.5, 2.5, 3.5])


def test_stratified_rejects_zero_samples():
    with pytest.raises(InputError):
        stratified_sample(straight_rays(), 0, None)


# ---------------------------------------------------------------------------
# hierarchical sampling


def test_hierarchical_step_cdf_lands_in_the_hot_bin():
    edges = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    weights = np.array([[0.0, 1.0, 0.0, 0.0]])
    depths = hierarchical_sample(edges, weights, 16, np.random.default_rng(0), floor=0.0)
    assert np.all((depths >= 1.0) & (depths <= 2.0))


def test_hierarchical_uniform_weights_sample_uniformly():
    n_bins, n = 8, 10_000
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    weights = np.ones((1, n_bins))
    depths = hierarchical_sample(edges, weights, n, np.random.default_rng(123))
    counts, _ = np.histogram(depths[0], bins=n_bins, range=(0.0, 1.0))
    expected = n / n_bins
    stat = float(np.sum((counts - expected) ** 2 / expected))
    assert stat < chi2.ppf(0.999, df=n_bins - 1)


def test_hierarchical_rejects_zero_draws():
    with pytest.raises(InputError):
        hierarchical_sample(np.array([0.0, 1.0]), np.array([[1.0]]), 0, None)


def test_hierarchical_degenerate_without_floor():
    with pytest.raises(DegenerateError):
        hierarchical_sample(np.array([0.0, 1.0, 2.0]), np.array([[0.0, 0.0]]), 4, None, floor=0.0)


def test_hierarchical_deterministic_mode():
    edges = np.linspace(0.0, 1.0, 9)
    weights = np.random.default_rng(3).random((2, 8))
    a = hierarchical_sample(edges, weights, 5, None)
    b = hierarchical_sample(edges, weights, 5, None)
    assert np.array_equal(a, b)
    assert np.all(np.diff(a, axis=1) >= 0)


# ---------------------------------------------------------------------------
# compositing


def test_composite_empty_medium():
    out = composite(np.zeros(4), np.ones((4, 3)), np.linspace(1, 2, 4))
    assert np.allclose(out.value, 0.0)
    assert np.allclose(out.weights, 0.0)
    assert out.t_final[0] == pytest.approx(1.0)


def test_composite_opaque_sample_takes_all():
    out = composite(np.array([50.0]), np.array([[0.2, 0.4, 0.8]]), np.array([1.0]), terminal_delta=1.0)
    assert np.allclose(out.value[0], [0.2, 0.4, 0.8], atol=1e-9)
    assert out.weights[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_composite_two_sample_closed_form():
    out = composite(np.array([1.0, 1.0]), np.ones((2, 3)), np.array([0.0, 1.0]), terminal_delta=1.0)
    w1 = 1.0 - math.exp(-1.0)
    w2 = math.exp(-1.0) * (1.0 - math.exp(-1.0))
    assert out.weights[0, 0] == pytest.approx(w1, rel=1e-12)
    assert out.weights[0, 1] == pytest.approx(w2, rel=1e-12)


def test_composite_invariants_over_randomized_configurations():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        r, s = int(rng.integers(1, 6)), int(rng.integers(1, 33))
        sigma = rng.random((r, s)) * rng.choice([0.1, 1.0, 10.0])
        depths = np.sort(rng.random((r, s)) * 4.0 + 1.0, axis=1)
        values = rng.random((r, s, 3))
        out = composite(sigma, values, depths)
        assert np.all(out.weights >= 0)
        assert np.max(np.abs(out.weights.sum(axis=1) + out.t_final - 1.0)) < 1e-9
        assert np.all(np.diff(out.transmittance, axis=1) <= 1e-15)


def test_composite_zero_density_insertion_is_invariant():
    # inserting a zero-density sample at the depth of the sample after it
    # leaves every other interval, and therefore the output, unchanged
    rng = np.random.default_rng(5)
    sigma = rng.random(6) * 3.0
    depths = np.sort(rng.random(6) * 3.0 + 1.0)
    values = rng.random((6, 3))
    base = composite(sigma, values, depths)
    for k in range(6):
        sigma2 = np.insert(sigma, k, 0.0)
        depths2 = np.insert(depths, k, depths[k])
        values2 = np.insert(values, k, rng.random(3), axis=0)
        out = composite(sigma2, values2, depths2)
        assert np.max(np.abs(out.value - base.value)) < 1e-12
        assert abs(out.t_final[0] - base.t_final[0]) < 1e-12


def test_composite_rejects_unsorted_depths():
    with pytest.raises(InputError):
        composite(np.ones(3), np.ones((3, 3)), np.array([1.0, 0.5, 2.0]))


def test_composite_rejects_negative_sigma():
    with pytest.raises(InputError):
        composite(np.array([-0.1]), np.ones((1, 3)), np.array([1.0]))


def test_composite_op_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    r, s = 3, 5
    sigma = Tensor(rng.random((r, s)) * 2.0, requires_grad=True)
    values = Tensor(rng.random((r, s, 3)), requires_grad=True)
    depths = np.sort(rng.random((r, s)) * 2.0 + 1.0, axis=1)
    proj = Tensor(rng.standard_normal((r, 3)))

    def loss():
        out, _ = composite_op(sigma, values, depths, terminal_delta=0.7)
        return ad.sum_all(ad.mul(out, proj))

    report = finite_diff_check(loss, [sigma, values], h=1e-6, rel_tol=1e-5)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# ray rendering


def opaque_constant_bundle(ln_e=0.0, sigma_bias=1e4):
    """Field with constant log-radiance and a constant (huge) density."""
    bundle = make_sigmoid_mapper(tiny_bundle())
    for which in (bundle.coarse, bundle.fine):
        for w, b in which.trunk:
            w.data[...] = 0.0
            b.data[...] = 0.0
        which.sigma_w.data[...] = 0.0
        which.sigma_b.data[...] = sigma_bias
        which.rad_w1.data[...] = 0.0
        which.rad_w2.data[...] = 0.0
        which.rad_b.data[...] = 0.0
        which.out_w.data[...] = 0.0
        which.out_b.data[...] = ln_e
    return bundle


def test_render_ldr_empty_scene_is_black():
    bundle = opaque_constant_bundle(sigma_bias=-200.0)  # softplus(-200) ~ 0
    out = render_ldr(straight_rays(), 1.0, bundle, "fine", None, n_coarse=8, n_importance=8)
    assert np.max(np.abs(out)) < 1e-9


def test_render_ldr_opaque_constant_scene_hits_anchor_color():
    bundle = opaque_constant_bundle(ln_e=0.0)
    out = render_ldr(straight_rays(), 1.0, bundle, "fine", None, n_coarse=8, n_importance=8)
    assert np.allclose(out, 0.5, atol=1e-9)


def test_render_ldr_monotone_in_exposure_time():
    bundle = opaque_constant_bundle(ln_e=0.0)
    lo = render_ldr(straight_rays(), 0.5, bundle, "fine", None, n_coarse=8, n_importance=8)
    hi = render_ldr(straight_rays(), 1.0, bundle, "fine", None, n_coarse=8, n_importance=8)
    assert np.all(hi >= lo)


def test_render_ldr_rejects_bad_exposure():
    with pytest.raises(InputError):
        render_ldr(straight_rays(), 0.0, tiny_bundle())


def test_render_hdr_empty_scene_is_zero():
    bundle = opaque_constant_bundle(sigma_bias=-200.0)
    out = render_hdr(straight_rays(), bundle, "fine", None, n_coarse=8, n_importance=8)
    assert np.max(np.abs(out)) < 1e-9


def test_render_hdr_opaque_unit_radiance():
    bundle = opaque_constant_bundle(ln_e=0.0)
    out = render_hdr(straight_rays(), bundle, "fine", None, n_coarse=8, n_importance=8)
    assert np.allclose(out, 1.0, atol=1e-9)


def test_render_hdr_conserves_constant_radiance():
    bundle = opaque_constant_bundle(ln_e=math.log(3.7), sigma_bias=10.0)
    out = render_hdr(straight_rays(), bundle, "fine", None, n_coarse=16, n_importance=16)
    assert np.allclose(out, 3.7, rtol=1e-9)


def test_render_coarse_only_path():
    bundle = opaque_constant_bundle(ln_e=0.0)
    out = render_ldr(straight_rays(), 1.0, bundle, "coarse", None, n_coarse=8)
    assert np.allclose(out, 0.5, atol=1e-9)


def test_render_rays_rejects_unknown_stage():
    with pytest.raises(InputError):
        render_rays(tiny_bundle(), straight_rays(), np.zeros(2), None, which="medium")


def test_render_image_single_pixel_equals_single_ray():
    bundle = opaque_constant_bundle(ln_e=0.2)
    view = CameraView(np.eye(3), np.array([0.0, 0.0, 2.0]), 10, 10, 0.5, 0.5, 1, 1, 1.0)
    img = render_image(view, bundle, 0.5, 3.5, mode="ldr", dt=1.0, n_coarse=8, n_importance=8)
    rays = generate_rays(view, [(0, 0)], 0.5, 3.5)
    direct = render_ldr(rays, 1.0, bundle, "fine", None, n_coarse=8, n_importance=8)
    assert np.array_equal(img.reshape(1, 3), direct)


def test_render_image_bit_identical_across_runs():
    bundle = tiny_bundle(seed=7)
    view = CameraView(np.eye(3), np.array([0.0, 0.0, 2.0]), 8, 8, 3.0, 3.0, 6, 6, 1.0)
    a = render_image(view, bundle, 0.5, 3.5, mode="ldr", dt=0.7, n_coarse=6, n_importance=6)
    b = render_image(view, bundle, 0.5, 3.5, mode="ldr", dt=0.7, n_coarse=6, n_importance=6)
    assert np.array_equal(a, b)


def test_render_image_hdr_differs_from_ldr():
    bundle = tiny_bundle(seed=7)
    view = CameraView(np.eye(3), np.array([0.0, 0.0, 2.0]), 8, 8, 2.0, 2.0, 4, 4, 1.0)
    ldr = render_image(view, bundle, 0.5, 3.5, mode="ldr", dt=1.0, n_coarse=4, n_importance=4)
    hdr = render_image(view, bundle, 0.5, 3.5, mode="hdr", n_coarse=4, n_importance=4)
    assert not np.allclose(ldr, hdr)


def test_view_pixel_grid_covers_image():
    view = simple_view(size=3)
    grid = view_pixel_grid(view)
    assert grid.shape == (9, 2)
    assert grid[0].tolist() == [0, 0] and grid[-1].tolist() == [2, 2]


def test_full_render_gradient_matches_finite_differences():
    # the loss of a fixed-depth 4-sample render, differentiated w.r.t. every
    # field and mapper parameter of a micro model
    bundle = tiny_bundle(seed=2)
    params = bundle.fine.tensors() + bundle.tone_mapper.tensors()
    rays = straight_rays(n=2)
    depths = np.tile(np.linspace(1.0, 3.0, 4), (2, 1))
    target = np.random.default_rng(0).random((2, 3))
    enc = bundle.config.encoding

    def loss():
        pos = rays.origins[:, None, :] + depths[:, :, None] * rays.directions[:, None, :]
        penc = positional_encode(bundle.normalize_positions(pos.reshape(-1, 3)),
                                 enc.levels_position, enc.include_input)
        denc = np.repeat(positional_encode(rays.directions, enc.levels_direction, enc.include_input), 4, axis=0)
        ln_e, sigma = field_forward(bundle.fine, penc, denc)
        colors = tone_map(bundle.tone_mapper, ln_e, np.repeat([0.0, 0.3], 4))
        out, _ = composite_op(ad.reshape(sigma, (2, 4)), ad.reshape(colors, (2, 4, 3)), depths)
        return ad.mean_sq_err(out, Tensor(target))

    report = finite_diff_check(loss, params, h=1e-5, rel_tol=1e-4)
    assert report.passed, str(report)
