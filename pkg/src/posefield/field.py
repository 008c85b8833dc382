"""The implicit object model: density, color, and feature MLPs.

Density: positionally encoded 3D point -> softplus MLP -> non-negative
extinction, exposing the last hidden activation for the color branch.
Color: encoded ray direction concatenated with that intermediate -> softplus
MLP -> sigmoid RGB. Feature: a small Siren network mapping raw coordinates
to an unbounded embedding, deliberately blind to view direction so the
embedding is a property of the surface point alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as A
from .autodiff import Linear, Module, Tensor


@dataclass(frozen=True)
class FieldConfig:
    n_harmonics: int = 10        # desk default; 60 reproduces full scale
    density_hidden: int = 256
    density_layers: int = 3
    color_hidden: int = 256
    color_layers: int = 2
    feature_dim: int = 12
    feature_hidden: int = 256
    feature_layers: int = 2
    siren_w0: float = 30.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_harmonics < 1:
            raise ValueError("n_harmonics must be >= 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        for name in ("density_hidden", "color_hidden", "feature_hidden"):
            if getattr(self, name) < 4:
                raise ValueError(f"{name} must be >= 4")
        if self.density_layers < 2 or self.color_layers < 2 \
                or self.feature_layers < 2:
            raise ValueError("each MLP needs at least 2 layers")

    @staticmethod
    def desk(**overrides) -> "FieldConfig":
        """Small widths that train in minutes on a laptop CPU."""
        base = dict(n_harmonics=10, density_hidden=48, color_hidden=48,
                    feature_hidden=64)
        base.update(overrides)
        return FieldConfig(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(blob: str) -> "FieldConfig":
        return FieldConfig(**json.loads(blob))


def positional_encode(x: np.ndarray, n: int) -> np.ndarray:
    """Harmonic embedding: [sin(2^k x), cos(2^k x)] for k = 0..n-1.

    Input (N, 3) maps to (N, 6n); a single 3-vector maps to (6n,).
    """
    if n <= 0:
        raise ValueError(f"need at least one harmonic, got n = {n}")
    arr = np.asarray(x)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    freqs = (2.0 ** np.arange(n)).astype(pts.dtype)
    ang = pts[:, None, :] * freqs[None, :, None]        # (N, n, 3)
    out = np.empty((pts.shape[0], n, 2, pts.shape[1]), dtype=pts.dtype)
    np.sin(ang, out=out[:, :, 0, :])
    np.cos(ang, out=out[:, :, 1, :])
    out = out.reshape(pts.shape[0], 2 * n * pts.shape[1])
    return out[0] if single else out


class FieldModel(Module):
    """Parameters of the three MLPs plus the stage-1 freeze flag."""

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        self.config = config
        dtype = np.dtype(config.dtype).type
        pe_dim = 6 * config.n_harmonics

        dims = [pe_dim] + [config.density_hidden] * (config.density_layers - 1)
        self.density_net = [Linear(dims[i], dims[i + 1], rng, dtype=dtype)
                            for i in range(len(dims) - 1)]
        self.density_net.append(Linear(dims[-1], 1, rng, dtype=dtype))

        # First color layer acts on [encoded dir | density intermediate]; it
        # is stored as two blocks of the same weight matrix so the direction
        # half can be evaluated once per ray instead of once per sample.
        self.color_dir = Linear(pe_dim, config.color_hidden, rng, dtype=dtype,
                                bias=False)
        self.color_int = Linear(config.density_hidden, config.color_hidden,
                                rng, dtype=dtype)
        cdims = [config.color_hidden] * (config.color_layers - 1)
        self.color_net = [Linear(cdims[i], cdims[i + 1], rng, dtype=dtype)
                          for i in range(len(cdims) - 1)]
        self.color_net.append(Linear(cdims[-1], 3, rng, dtype=dtype))

        fdims = [3] + [config.feature_hidden] * (config.feature_layers - 1)
        self.feature_net = [
            Linear(fdims[i], fdims[i + 1], rng, dtype=dtype, init="siren",
                   w0=config.siren_w0, siren_first=(i == 0))
            for i in range(len(fdims) - 1)
        ]
        self.feature_net.append(Linear(fdims[-1], config.feature_dim, rng,
                                       dtype=dtype, init="siren",
                                       w0=config.siren_w0))
        self.stage1_frozen = False

    # -- parameter groups -------------------------------------------------------

    def density_parameters(self) -> list[Tensor]:
        return [p for layer in self.density_net for p in layer.parameters()]

    def color_parameters(self) -> list[Tensor]:
        out = self.color_dir.parameters() + self.color_int.parameters()
        return out + [p for layer in self.color_net for p in layer.parameters()]

    def feature_parameters(self) -> list[Tensor]:
        return [p for layer in self.feature_net for p in layer.parameters()]

    def stage1_parameters(self) -> list[Tensor]:
        return self.density_parameters() + self.color_parameters()

    def trainable_parameters(self) -> list[Tensor]:
        if self.stage1_frozen:
            return self.feature_parameters()
        return self.stage1_parameters() + self.feature_parameters()

    def freeze_stage1(self) -> None:
        """Exclude density and color from further optimization."""
        self.stage1_frozen = True

    # -- forward passes ----------------------------------------------------------

    def _dtype(self):
        return np.dtype(self.config.dtype)

    def density_forward(self, x) -> tuple[Tensor, Tensor]:
        """Density (N,) plus the last hidden activation feeding the color MLP."""
        pts = np.asarray(x.data if isinstance(x, Tensor) else x,
                         dtype=self._dtype()).reshape(-1, 3)
        h = Tensor(positional_encode(pts, self.config.n_harmonics))
        for layer in self.density_net[:-1]:
            h = A.softplus(layer(h))
        intermediate = h
        raw = self.density_net[-1](h)
        d = A.softplus(A.reshape(raw, (-1,)))
        return d, intermediate

    def color_forward(self, intermediate: Tensor, ray_dirs,
                      repeat_index: np.ndarray | None = None) -> Tensor:
        """RGB in [0,1]; directions are encoded with the same harmonics.

        ``ray_dirs`` is (N, 3) row-aligned with ``intermediate``; pass one
        row per ray plus ``repeat_index`` (sample -> ray) to avoid encoding
        the same direction once per sample.
        """
        dirs = np.asarray(ray_dirs, dtype=self._dtype()).reshape(-1, 3)
        enc = positional_encode(dirs, self.config.n_harmonics)
        dir_part = self.color_dir(Tensor(enc))
        if repeat_index is not None:
            dir_part = A.take(dir_part, repeat_index)
        elif dir_part.shape[0] == 1 and intermediate.shape[0] > 1:
            dir_part = A.take(dir_part,
                              np.zeros(intermediate.shape[0], dtype=np.intp))
        h = A.softplus(A.add(dir_part, self.color_int(intermediate)))
        for layer in self.color_net[:-1]:
            h = A.softplus(layer(h))
        return A.sigmoid(self.color_net[-1](h))

    def feature_forward(self, x) -> Tensor:
        """Per-point embedding (N, feature_dim); no view dependence by design."""
        pts = np.asarray(x.data if isinstance(x, Tensor) else x,
                         dtype=self._dtype()).reshape(-1, 3)
        w0 = self.config.siren_w0
        h = Tensor(pts)
        for layer in self.feature_net[:-1]:
            h = A.sin(A.mul(layer(h), w0))
        return self.feature_net[-1](h)

    def density_at(self, x) -> np.ndarray:
        return self.density_forward(x)[0].data

    def feature_at(self, x) -> np.ndarray:
        return self.feature_forward(x).data

    # -- persistence ---------------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {"field_config": json.loads(self.config.to_json()),
                "stage1_frozen": self.stage1_frozen}

    @staticmethod
    def from_checkpoint_meta(meta: dict, arrays: dict[str, np.ndarray],
                             prefix: str = "field.") -> "FieldModel":
        config = FieldConfig(**meta["field_config"])
        model = FieldModel(config, np.random.default_rng(0))
        own = {k[len(prefix):]: v for k, v in arrays.items()
               if k.startswith(prefix)}
        model.load_state_arrays(own)
        model.stage1_frozen = bool(meta.get("stage1_frozen", False))
        return model
