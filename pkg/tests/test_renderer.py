import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import posefield.autodiff as A
from posefield.autodiff import Tape, Tensor
from posefield.field import FieldConfig, FieldModel
from posefield.renderer import (RaySampleBatch, RenderConfig, deltas_from_t,
                                integrate, render_image, render_rays,
                                sample_uniform, stratified_resample)
from posefield.rng import substream
from posefield.synth import default_intrinsics
from posefield.geometry import Pose, look_at


def make_batch(densities, colors=None, t=None, deltas=None, features=None):
    densities = np.atleast_2d(np.asarray(densities, dtype=np.float64))
    r, m = densities.shape
    if t is None:
        t = np.tile(np.arange(1.0, m + 1.0), (r, 1))
    if deltas is None:
        deltas = deltas_from_t(t)
    return RaySampleBatch(
        t=t, deltas=np.asarray(deltas, dtype=np.float64),
        positions=np.zeros((r, m, 3)),
        densities=Tensor(densities),
        colors=None if colors is None else Tensor(np.asarray(colors, dtype=np.float64)),
        features=None if features is None else Tensor(features),
    )


# -- sample_uniform ------------------------------------------------------------


def test_sample_uniform_midpoints():
    t = sample_uniform(1.0, 2.0, 2, jitter=False)
    assert np.allclose(t, [[1.25, 1.75]])


def test_sample_uniform_jitter_stays_in_bins():
    rng = np.random.default_rng(0)
    t = sample_uniform(1.0, 2.0, 8, jitter=True, rng=rng, n_rays=500)
    edges = np.linspace(1, 2, 9)
    for j in range(8):
        assert (t[:, j] >= edges[j]).all() and (t[:, j] <= edges[j + 1]).all()
    assert (np.diff(t, axis=1) > 0).all()


def test_sample_uniform_jitter_mean_is_midpoint():
    rng = np.random.default_rng(1)
    t = sample_uniform(1.0, 2.0, 4, jitter=True, rng=rng, n_rays=100_000)
    mids = np.array([1.125, 1.375, 1.625, 1.875])
    assert np.abs(t.mean(axis=0) - mids).max() < 1e-2


def test_sample_uniform_per_ray_bounds():
    near = np.array([1.0, 2.0])
    far = np.array([2.0, 4.0])
    t = sample_uniform(near, far, 4, jitter=False, n_rays=2)
    assert np.allclose(t[0], [1.125, 1.375, 1.625, 1.875])
    assert np.allclose(t[1], [2.25, 2.75, 3.25, 3.75])


def test_sample_uniform_validates():
    with pytest.raises(ValueError, match="near"):
        sample_uniform(2.0, 1.0, 4, jitter=False)
    with pytest.raises(ValueError, match="samples"):
        sample_uniform(1.0, 2.0, 1, jitter=False)
    with pytest.raises(ValueError, match="rng"):
        sample_uniform(1.0, 2.0, 4, jitter=True)


# -- integrate -----------------------------------------------------------------


def test_integrate_empty_space_is_exactly_zero():
    batch = make_batch(np.zeros((3, 8)), colors=np.zeros((3, 8, 3)),
                       features=np.ones((3, 8, 5)))
    out = integrate(batch)
    assert np.all(out.S.data == 0.0)
    assert np.all(out.C.data == 0.0)
    assert np.all(out.G.data == 0.0)


def test_integrate_two_sample_closed_form():
    # d = [10, 10], deltas = [1, 1], colors red then blue.
    batch = make_batch([[10.0, 10.0]],
                       colors=[[[1, 0, 0], [0, 0, 1]]],
                       t=np.array([[1.0, 2.0]]),
                       deltas=np.array([[1.0, 1.0]]))
    out = integrate(batch)
    a1 = 1 - np.exp(-10.0)
    w2 = np.exp(-10.0) * a1
    assert out.C.data[0, 0] == pytest.approx(a1, rel=1e-9)
    assert out.C.data[0, 2] == pytest.approx(w2, rel=1e-9)
    assert out.C.data[0, 2] == pytest.approx(4.54e-5, rel=1e-2)
    assert out.S.data[0] == pytest.approx(1 - np.exp(-20.0), abs=1e-12)


def test_integrate_rejects_negative_density():
    with pytest.raises(ValueError, match="negative density"):
        integrate(make_batch([[1.0, -0.5]]))


def test_opacity_monotone_in_density():
    base = np.full((1, 16), 0.3)
    prev = -1.0
    for bump in np.linspace(0, 5, 12):
        d = base.copy()
        d[0, 7] += bump
        s = integrate(make_batch(d)).S.data[0]
        assert s >= prev - 1e-12
        prev = s


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conservation_sum_weights_equals_S(seed):
    rng = np.random.default_rng(seed)
    r, m = 8, 32
    d = rng.uniform(0, 40, size=(r, m))
    t = np.sort(rng.uniform(1, 3, size=(r, m)), axis=1)
    t += np.arange(m) * 1e-6  # enforce strict monotonicity
    out = integrate(make_batch(d, t=t))
    s = out.weights.sum(axis=1)
    assert (s >= 0).all() and (s <= 1 + 1e-6).all()
    assert np.abs(s - out.S.data).max() < 1e-6
    # S equals 1 - prod(1 - alpha) analytically.
    alpha = 1 - np.exp(-d * deltas_from_t(t))
    assert np.abs(out.S.data - (1 - np.prod(1 - alpha, axis=1))).max() < 1e-6


def test_quadrature_split_consistency():
    # Halving the sample spacing changes C by O(delta^2) on a smooth field.
    def render(m):
        t = np.linspace(1.0, 2.0, m)[None, :]
        dens = 8 * np.exp(-((t - 1.5) ** 2) / 0.02)
        colors = np.stack([np.sin(t * 3) * 0.5 + 0.5] * 3, axis=2)
        return integrate(make_batch(dens, colors=colors, t=t)).C.data[0, 0]

    c64, c128, c256 = render(64), render(128), render(256)
    err_64 = abs(c64 - c256)
    err_128 = abs(c128 - c256)
    assert err_128 < err_64
    assert err_64 < 0.02


def test_integrate_differentiable_through_density():
    rng = np.random.default_rng(9)
    d0 = rng.uniform(0.1, 3.0, size=(2, 10))
    t = np.tile(np.linspace(1, 2, 10), (2, 1))
    colors = rng.uniform(0, 1, size=(2, 10, 3))

    def f(dt):
        batch = make_batch(dt.data, colors=colors, t=t)
        batch.densities = dt
        out = integrate(batch)
        return A.mul(out.C, out.C).sum()

    from posefield.autodiff import grad_check
    assert grad_check(f, Tensor(d0), eps=1e-6) < 1e-4


# -- stratified_resample ----------------------------------------------------------


def test_resample_concentrated_mass_stays_in_bin():
    t = np.linspace(1, 2, 8)[None, :]
    contrib = np.zeros((1, 8))
    contrib[0, 3] = 2.0
    out = stratified_resample(t, contrib, 8, np.random.default_rng(0))
    lo = (t[0, 2] + t[0, 3]) / 2
    hi = (t[0, 3] + t[0, 4]) / 2
    assert (out >= lo).all() and (out <= hi).all()
    assert np.all(np.diff(out) >= 0)


def test_resample_uniform_contributions_ks():
    rng = np.random.default_rng(1)
    t = np.linspace(1, 2, 16)[None, :].repeat(12_500, axis=0)
    contrib = np.ones((12_500, 16))
    out = stratified_resample(t, contrib, 8, rng).reshape(-1)
    # KS statistic against U(edge_lo, edge_hi).
    lo = 1 - 0.5 / 15
    hi = 2 + 0.5 / 15
    u = np.sort((out - lo) / (hi - lo))
    grid = np.arange(1, len(u) + 1) / len(u)
    ks = np.abs(u - grid).max()
    assert ks < 0.05


def test_resample_zero_mass_falls_back_to_uniform():
    t = np.linspace(1, 2, 8)[None, :]
    out = stratified_resample(t, np.zeros((1, 8)), 16, np.random.default_rng(2))
    assert out.shape == (1, 16)
    spread = out.max() - out.min()
    assert spread > 0.7  # roughly covers the whole range


def test_resample_validates_k():
    with pytest.raises(ValueError, match="k"):
        stratified_resample(np.linspace(1, 2, 8)[None], np.ones((1, 8)), 0,
                            np.random.default_rng(0))


def test_resample_default_k_matches_stage2_count():
    assert RenderConfig().resample_k == 8


# -- render_image ------------------------------------------------------------------


class ZeroField:
    """Duck-typed field with zero density everywhere."""

    def __init__(self):
        self.config = FieldConfig.desk(feature_hidden=8)
        self._model = FieldModel(self.config, substream(0, "init"))

    def density_forward(self, x):
        pts = np.asarray(x).reshape(-1, 3)
        return (Tensor(np.zeros(len(pts), dtype=np.float32)),
                Tensor(np.zeros((len(pts), self.config.density_hidden),
                                dtype=np.float32)))

    def density_at(self, x):
        return np.zeros(len(np.asarray(x).reshape(-1, 3)), dtype=np.float32)

    def color_forward(self, inter, dirs, repeat_index=None):
        n = inter.shape[0]
        return Tensor(np.zeros((n, 3), dtype=np.float32))

    def feature_forward(self, x):
        return self._model.feature_forward(x)

    def feature_at(self, x):
        return self._model.feature_at(x)


def test_render_zero_density_silhouette_is_zero():
    K = default_intrinsics(16)
    pose = look_at(np.array([0, 0, 2.0]), np.zeros(3), up=(0, 1, 0))
    img = render_image(ZeroField(), pose, K, 1.0, 3.0, mode="silhouette",
                       cfg=RenderConfig(points_per_ray=16))
    assert img.shape == (16, 16)
    assert np.all(img == 0.0)


def test_render_deterministic_without_jitter():
    model = FieldModel(FieldConfig.desk(density_hidden=8, color_hidden=8,
                                        feature_hidden=8), substream(1, "init"))
    K = default_intrinsics(12)
    pose = look_at(np.array([0.5, 0.4, 1.8]), np.zeros(3))
    cfg = RenderConfig(points_per_ray=12)
    a = render_image(model, pose, K, 1.0, 3.0, mode="color", cfg=cfg)
    b = render_image(model, pose, K, 1.0, 3.0, mode="color", cfg=cfg)
    assert np.array_equal(a, b)
    f1 = render_image(model, pose, K, 1.0, 3.0, mode="feature", cfg=cfg)
    assert f1.shape == (12, 12, 12)


def test_render_mode_validation():
    with pytest.raises(ValueError, match="mode"):
        render_image(ZeroField(), Pose.identity(), default_intrinsics(8),
                     1.0, 2.0, mode="normals")


def test_render_pixels_subset_writes_disjoint_slots():
    K = default_intrinsics(16)
    pose = look_at(np.array([0, 0, 2.0]), np.zeros(3), up=(0, 1, 0))
    pixels = np.array([[3, 4], [10, 11]])
    img = render_image(ZeroField(), pose, K, 1.0, 3.0, mode="color",
                       pixels=pixels, cfg=RenderConfig(points_per_ray=8, chunk=1))
    assert img.shape == (16, 16, 3)
    assert np.all(img == 0)
