"""Parameter containers and the small layer zoo the pipeline needs."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter-holding base: children discovered by attribute scan."""

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters().items()]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters in checkpoint: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != model {p.data.shape}")
            p.data = arr.copy()
            p.grad = None


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


class Linear(Module):
    """Affine layer storing the weight as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=None, init: str = "glorot", w0: float = 30.0,
                 siren_first: bool = False, bias: bool = True):
        dtype = dtype or T.default_dtype()
        if init == "glorot":
            bound = np.sqrt(6.0 / (in_features + out_features))
        elif init == "he":
            bound = np.sqrt(6.0 / in_features)
        elif init == "siren":
            # First layer U(+-1/fan_in); deeper layers U(+-sqrt(6/fan_in)/w0).
            if siren_first:
                bound = 1.0 / in_features
            else:
                bound = np.sqrt(6.0 / in_features) / w0
        else:
            raise ValueError(f"unknown init {init!r}")
        w = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.w = parameter(w.astype(dtype))
        self.b = parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, padding: int = 0, dtype=None):
        dtype = dtype or T.default_dtype()
        fan_in = in_channels * kernel_size * kernel_size
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound,
                        size=(out_channels, in_channels, kernel_size, kernel_size))
        self.w = parameter(w.astype(dtype))
        self.b = parameter(np.zeros(out_channels, dtype=dtype))
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=1, padding=self.padding)


class Adam:
    """Standard Adam over one or more parameter groups.

    Groups are (params, lr) pairs so stage-2 can run the field and the CNN
    at different rates with a single optimizer. Moments update in place;
    ``state_arrays``/``load_state_arrays`` round-trip through checkpoints.
    """

    def __init__(self, params_or_groups, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if isinstance(params_or_groups, (list, tuple)) and params_or_groups \
                and isinstance(params_or_groups[0], Tensor):
            groups = [(list(params_or_groups), lr)]
        else:
            groups = [(list(ps), float(glr)) for ps, glr in params_or_groups]
        for _, glr in groups:
            if glr <= 0:
                raise ValueError(f"learning rate must be positive, got {glr}")
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in ps] for ps, _ in groups]
        self.v = [[np.zeros_like(p.data) for p in ps] for ps, _ in groups]

    def zero_grad(self) -> None:
        for ps, _ in self.groups:
            for p in ps:
                p.grad = None

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for gi, (ps, lr) in enumerate(self.groups):
            for pi, p in enumerate(ps):
                if p.grad is None:
                    continue
                g = p.grad
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                mhat = m / bc1
                vhat = v / bc2
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adam.t": np.array([self.t], dtype=np.float64)}
        for gi in range(len(self.groups)):
            for pi in range(len(self.groups[gi][0])):
                out[f"adam.m.{gi}.{pi}"] = self.m[gi][pi]
                out[f"adam.v.{gi}.{pi}"] = self.v[gi][pi]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for gi in range(len(self.groups)):
            for pi in range(len(self.groups[gi][0])):
                self.m[gi][pi] = arrays[f"adam.m.{gi}.{pi}"].copy()
                self.v[gi][pi] = arrays[f"adam.v.{gi}.{pi}"].copy()
