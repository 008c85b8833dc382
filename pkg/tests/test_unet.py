import numpy as np
import pytest

import posefield.autodiff as A
from posefield.autodiff import Tape, Tensor
from posefield.rng import substream
from posefield.unet import UNet, UNetConfig


@pytest.fixture(scope="module")
def small_unet():
    cfg = UNetConfig(levels=2, base_channels=4, input_size=16)
    return UNet(cfg, substream(0, "init"))


def test_config_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        UNetConfig(levels=3, input_size=20)


def test_output_shape_and_channels(small_unet):
    x = Tensor(np.random.default_rng(0).uniform(0, 1, size=(2, 3, 16, 16))
               .astype(np.float32))
    out = small_unet(x)
    assert out.shape == (2, 12, 16, 16)


def test_rejects_wrong_input_size(small_unet):
    with pytest.raises(ValueError, match="expects"):
        small_unet(Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32)))


def test_deterministic_forward(small_unet):
    img = np.random.default_rng(1).uniform(0, 1, size=(16, 16, 3))
    a = small_unet.feature_image(img)
    b = small_unet.feature_image(img)
    assert np.array_equal(a, b)
    assert a.shape == (16, 16, 12)


def test_gradients_match_finite_differences():
    cfg = UNetConfig(levels=2, base_channels=3, input_size=8)
    import posefield.autodiff.tensor as T
    T.set_default_dtype(np.float64)
    try:
        net = UNet(cfg, substream(2, "init"))
    finally:
        T.set_default_dtype(np.float32)
    x = np.random.default_rng(2).uniform(0, 1, size=(1, 3, 8, 8))
    param = net.head.w

    original = param.data.copy()
    with Tape() as tape:
        out = net(Tensor(x))
        loss = A.mul(out, out).mean()
        tape.backward(loss)
    analytic = param.grad.copy()
    param.grad = None

    eps = 1e-6
    flat = original.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        param.data = flat.reshape(original.shape)
        hi = A.mul(net(Tensor(x)), net(Tensor(x))).mean().item()
        flat[i] = keep - eps
        param.data = flat.reshape(original.shape)
        lo = A.mul(net(Tensor(x)), net(Tensor(x))).mean().item()
        flat[i] = keep
        numeric[i] = (hi - lo) / (2 * eps)
    param.data = original
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    assert rel.max() < 1e-4


def test_translation_covariance_interior():
    # Shifting the input by 2^levels pixels shifts interior features by the
    # same amount. Needs a net whose receptive field leaves an interior
    # beyond the padding's influence, hence one level at 32 px.
    cfg = UNetConfig(levels=1, base_channels=4, input_size=32)
    net = UNet(cfg, substream(3, "init"))
    rng = np.random.default_rng(3)
    base = rng.uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
    shift = 2  # 2^levels
    shifted = np.zeros_like(base)
    shifted[:, shift:] = base[:, :-shift]
    f1 = net.feature_image(base)
    f2 = net.feature_image(shifted)
    margin = 10
    inner1 = f1[margin:-margin, margin:-margin - shift]
    inner2 = f2[margin:-margin, margin + shift:-margin]
    denom = np.abs(f1).mean()
    assert np.abs(inner1 - inner2).max() / denom < 1e-5


def test_checkpoint_round_trip(tmp_path):
    from posefield.autodiff import load_checkpoint, save_checkpoint
    cfg = UNetConfig(levels=2, base_channels=4, input_size=16)
    net = UNet(cfg, substream(4, "init"))
    arrays = {f"unet.{k}": v for k, v in net.state_arrays().items()}
    save_checkpoint(tmp_path / "u.ckpt", arrays, net.checkpoint_meta())
    arrays2, meta = load_checkpoint(tmp_path / "u.ckpt")
    net2 = UNet.from_checkpoint_meta(meta, arrays2)
    img = np.random.default_rng(5).uniform(0, 1, size=(16, 16, 3))
    assert np.array_equal(net.feature_image(img), net2.feature_image(img))
