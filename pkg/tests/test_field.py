import numpy as np
import pytest

import posefield.autodiff as A
from posefield.autodiff import Tape, Tensor, grad_check
from posefield.field import FieldConfig, FieldModel, positional_encode
from posefield.rng import substream

TINY = FieldConfig(n_harmonics=4, density_hidden=8, color_hidden=8,
                   feature_hidden=8, dtype="float64")


@pytest.fixture(scope="module")
def model():
    return FieldModel(FieldConfig.desk(), substream(0, "init"))


def test_positional_encode_zeros():
    out = positional_encode(np.zeros((5, 3)), 10)
    assert out.shape == (5, 60)
    sin_cols = out.reshape(5, 10, 2, 3)[:, :, 0, :]
    cos_cols = out.reshape(5, 10, 2, 3)[:, :, 1, :]
    assert np.all(sin_cols == 0)
    assert np.all(cos_cols == 1)


def test_positional_encode_paper_width():
    assert positional_encode(np.zeros(3), 60).shape == (360,)


def test_positional_encode_pi_case():
    out = positional_encode(np.array([np.pi, 0.0, 0.0]), 1)
    assert abs(out[0]) < 1e-12          # sin(pi)
    assert out[3] == pytest.approx(-1)  # cos(pi)


def test_positional_encode_rejects_bad_n():
    with pytest.raises(ValueError):
        positional_encode(np.zeros(3), 0)


def test_config_invariants():
    with pytest.raises(ValueError):
        FieldConfig(feature_dim=1)
    with pytest.raises(ValueError):
        FieldConfig(n_harmonics=0)
    with pytest.raises(ValueError):
        FieldConfig(density_hidden=2)


def test_density_nonnegative_everywhere(model):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10_000, 3))
    d, _ = model.density_forward(x)
    assert d.data.min() >= 0.0
    assert d.shape == (10_000,)


def test_density_deterministic(model):
    x = np.random.default_rng(2).normal(size=(50, 3))
    d1, _ = model.density_forward(x)
    d2, _ = model.density_forward(x)
    assert np.array_equal(d1.data, d2.data)


def test_fresh_init_density_bounded():
    # Statistical oracle: initialization keeps density in a sane band.
    samples = []
    for seed in range(3):
        m = FieldModel(FieldConfig.desk(), substream(seed, "init"))
        x = np.random.default_rng(seed).uniform(-1, 1, size=(4000, 3))
        samples.append(m.density_at(x))
    d = np.concatenate(samples)
    assert d.min() > 0.0
    assert d.max() < 20.0
    assert d.mean() < 5.0


def test_color_in_unit_cube(model):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 3))
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    _, inter = model.density_forward(x)
    c = model.color_forward(inter, dirs)
    assert c.data.min() >= 0.0 and c.data.max() <= 1.0
    c2 = model.color_forward(model.density_forward(x)[1], dirs)
    assert np.array_equal(c.data, c2.data)


def test_feature_shape_and_determinism(model):
    x = np.random.default_rng(4).normal(size=(64, 3))
    f1 = model.feature_forward(x)
    f2 = model.feature_forward(x)
    assert f1.shape == (64, 12)
    assert np.array_equal(f1.data, f2.data)


def test_feature_is_view_independent_by_construction(model):
    # The signature takes only points; re-evaluating alongside any ray
    # bookkeeping is bit-identical.
    x = np.random.default_rng(5).normal(size=(16, 3))
    base = model.feature_at(x)
    for _ in range(3):
        assert np.array_equal(model.feature_at(x), base)


def test_siren_init_bounds():
    cfg = FieldConfig.desk(feature_hidden=64)
    m = FieldModel(cfg, substream(9, "init"))
    first = m.feature_net[0].w.data
    assert np.abs(first).max() <= 1 / 3 + 1e-9
    later = m.feature_net[1].w.data
    bound = np.sqrt(6 / 64) / cfg.siren_w0
    assert np.abs(later).max() <= bound + 1e-9


def test_density_gradients(monkeypatch):
    model = FieldModel(TINY, substream(0, "init"))
    x = np.random.default_rng(0).normal(size=(5, 3))

    w = model.density_net[0].w

    def f(t):
        w.data = t.data
        d, _ = model.density_forward(x)
        return A.mul(d, d).sum()

    err = grad_check_param(f, w)
    assert err < 1e-4


def test_color_gradients():
    model = FieldModel(TINY, substream(1, "init"))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 3))
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    w = model.color_int.w

    def f(t):
        w.data = t.data
        _, inter = model.density_forward(x)
        c = model.color_forward(inter, dirs)
        return c.mean()

    assert grad_check_param(f, w) < 1e-4


def test_feature_gradients():
    model = FieldModel(TINY, substream(2, "init"))
    x = np.random.default_rng(2).normal(size=(6, 3))
    w = model.feature_net[0].w

    def f(t):
        w.data = t.data
        out = model.feature_forward(x)
        return A.mul(out, out).sum()

    assert grad_check_param(f, w) < 1e-4


def grad_check_param(f, param) -> float:
    """grad_check over a parameter tensor, restoring it afterwards."""
    original = param.data.copy()
    try:
        probe = Tensor(original.copy(), requires_grad=True)
        with Tape() as tape:
            # f installs the probe's buffer into the parameter; gradients
            # land on the parameter tensor itself.
            out = f(probe)
            tape.backward(out)
        analytic = param.grad.copy() if param.grad is not None \
            else np.zeros_like(original)
        param.grad = None

        flat = original.reshape(-1).copy()
        numeric = np.zeros_like(flat)
        eps = 1e-5
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            param.data = flat.reshape(original.shape)
            hi = f(Tensor(param.data)).item()
            flat[i] = keep - eps
            param.data = flat.reshape(original.shape)
            lo = f(Tensor(param.data)).item()
            flat[i] = keep
            numeric[i] = (hi - lo) / (2 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
        return float(np.max(np.abs(a - numeric) / denom))
    finally:
        param.data = original
        param.grad = None


def test_freeze_flag_shrinks_trainable_set(model_=None):
    m = FieldModel(TINY, substream(3, "init"))
    full = len(m.trainable_parameters())
    m.freeze_stage1()
    frozen = m.trainable_parameters()
    assert len(frozen) == len(m.feature_parameters()) < full
    ids = {id(p) for p in frozen}
    for p in m.stage1_parameters():
        assert id(p) not in ids


def test_checkpoint_meta_round_trip(tmp_path):
    from posefield.autodiff import load_checkpoint, save_checkpoint
    m = FieldModel(TINY, substream(4, "init"))
    m.freeze_stage1()
    arrays = {f"field.{k}": v for k, v in m.state_arrays().items()}
    save_checkpoint(tmp_path / "f.ckpt", arrays, m.checkpoint_meta())
    arrays2, meta = load_checkpoint(tmp_path / "f.ckpt")
    m2 = FieldModel.from_checkpoint_meta(meta, arrays2)
    assert m2.stage1_frozen
    x = np.random.default_rng(5).normal(size=(8, 3))
    assert np.array_equal(m2.density_at(x), m.density_at(x))
    assert np.array_equal(m2.feature_at(x), m.feature_at(x))
