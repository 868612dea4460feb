"""Tiny conditional UNet noise predictor with a hand-written backward pass.

Layout: three resolution levels, each with two 3x3 conv + SiLU layers.
Average-pool downsampling, nearest-neighbour upsampling and concatenated
skips.  A sinusoidal timestep embedding and an MLP embedding of the 32x32
lighting map are summed; after a SiLU, one linear projection per conv
layer turns that vector into an additive per-channel shift.  The global
lighting condition therefore enters as a FiLM-style shift, not through
cross-attention.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf; ``layer`` names the first culprit."""

    def __init__(self, layer: str, message: str = ""):
        self.layer = layer
        super().__init__(message or f"non-finite values first produced by layer {layer!r}")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 7  # x_t (3) + condition image (3) + mask (1)
    out_channels: int = 3
    channels: tuple[int, int, int] = (32, 64, 128)
    emb_dim: int = 64
    light_res: int = 32
    light_hidden: int = 256
    dtype: str = "float32"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)

    def arch_hash(self) -> str:
        return hashlib.sha256(("unet:" + self.to_json()).encode()).hexdigest()

    def conv_specs(self) -> list[tuple[str, int, int]]:
        """(name, cin, cout) for every FiLM-conditioned conv, in execution order."""
        c0, c1, c2 = self.channels
        return [
            ("enc0.a", self.in_channels, c0),
            ("enc0.b", c0, c0),
            ("enc1.a", c0, c1),
            ("enc1.b", c1, c1),
            ("mid.a", c1, c2),
            ("mid.b", c2, c2),
            ("dec1.a", c2 + c1, c1),
            ("dec1.b", c1, c1),
            ("dec0.a", c1 + c0, c0),
            ("dec0.b", c0, c0),
        ]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in the fixed serialization order."""
        light_in = self.light_res * self.light_res * 3
        shapes: dict[str, tuple[int, ...]] = {
            "light.w1": (light_in, self.light_hidden),
            "light.b1": (self.light_hidden,),
            "light.w2": (self.light_hidden, self.emb_dim),
            "light.b2": (self.emb_dim,),
        }
        for name, cin, cout in self.conv_specs():
            shapes[f"{name}.conv.w"] = (3, 3, cin, cout)
            shapes[f"{name}.conv.b"] = (cout,)
            shapes[f"{name}.film.w"] = (self.emb_dim, cout)
            shapes[f"{name}.film.b"] = (cout,)
        shapes["out.w"] = (3, 3, self.channels[0], self.out_channels)
        shapes["out.b"] = (self.out_channels,)
        return shapes


@dataclass
class DenoiserParams:
    """All trainable weights plus the architecture they belong to."""

    config: UNetConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    history: tuple[str, ...] = ()  # training stages applied so far, oldest first

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                              self.history)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    def astype(self, dtype) -> "DenoiserParams":
        cfg = UNetConfig.from_dict({**asdict(self.config), "dtype": np.dtype(dtype).name})
        return DenoiserParams(cfg, {k: v.astype(dtype) for k, v in self.weights.items()},
                              self.history)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in self.config.param_shapes()])

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}


def init_params(config: UNetConfig, seed: int = 0) -> DenoiserParams:
    """He-normal convolutions, small FiLM projections, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    weights = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b") or name.endswith((".b1", ".b2")):
            w = np.zeros(shape)
        elif name == "out.w":
            w = rng.normal(0.0, 0.1 * np.sqrt(1.0 / (9 * shape[2])), shape)
        elif name.endswith("conv.w"):
            w = rng.normal(0.0, np.sqrt(2.0 / (9 * shape[2])), shape)
        elif name.endswith("film.w"):
            w = rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape)
        else:  # light MLP
            w = rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape)
        weights[name] = w.astype(dtype)
    return DenoiserParams(config, weights)


def _check(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)


class TinyUNet:
    """Stateless network: ``forward`` caches activations for ``backward``."""

    def __init__(self, config: UNetConfig):
        self.config = config

    def forward(self, params: DenoiserParams, x: np.ndarray, t: np.ndarray,
                light: np.ndarray, check_finite: bool = False):
        """Predict noise.

        x: (N, H, W, in_channels) stacked local conditioning, H and W divisible by 4.
        t: (N,) integer timesteps.  light: (N, light_res, light_res, 3).
        """
        cfg = self.config
        p = params.weights
        if x.shape[-1] != cfg.in_channels:
            raise ValueError(
                f"local conditioning has {x.shape[-1]} channels, model expects {cfg.in_channels}"
            )
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ValueError(f"spatial size {x.shape[1:3]} must be divisible by 4")
        dtype = p["out.w"].dtype
        x = x.astype(dtype, copy=False)
        n = x.shape[0]
        chk = _check if check_finite else (lambda *_: None)
        cache: dict = {}

        lf = light.reshape(n, -1).astype(dtype) - 0.5  # lighting maps arrive in [0, 1]
        z1, cache["light1"] = L.linear_forward(lf, p["light.w1"], p["light.b1"])
        a1, cache["light_act"] = L.silu_forward(z1)
        z2, cache["light2"] = L.linear_forward(a1, p["light.w2"], p["light.b2"])
        chk("light_mlp", z2)
        emb = L.timestep_embedding(t, cfg.emb_dim, dtype) + z2
        act, cache["emb_act"] = L.silu_forward(emb)

        def block(name: str, h: np.ndarray) -> np.ndarray:
            for part in ("a", "b"):
                key = f"{name}.{part}"
                shift, _ = L.linear_forward(act, p[f"{key}.film.w"], p[f"{key}.film.b"])
                h, cache[key + ".conv"] = L.conv3x3_forward(h, p[f"{key}.conv.w"], p[f"{key}.conv.b"])
                h += shift[:, None, None, :]
                h, cache[key + ".act"] = L.silu_forward(h)
                chk(key, h)
            return h

        e0 = block("enc0", x)
        e1 = block("enc1", L.avgpool2_forward(e0))
        m = block("mid", L.avgpool2_forward(e1))
        d1 = block("dec1", np.concatenate([L.upsample2_forward(m), e1], axis=-1))
        d0 = block("dec0", np.concatenate([L.upsample2_forward(d1), e0], axis=-1))
        out, cache["out"] = L.conv3x3_forward(d0, p["out.w"], p["out.b"])
        chk("out", out)
        cache["channels"] = cfg.channels
        return out, cache

    def backward(self, params: DenoiserParams, cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
        p = params.weights
        _, c1, c2 = self.config.channels
        g: dict[str, np.ndarray] = {}
        act = cache["emb_act"][0] * cache["emb_act"][1]
        d_act = np.zeros_like(act)

        dd0, g["out.w"], g["out.b"] = L.conv3x3_backward(dout, cache["out"], p["out.w"])

        def block_back(name: str, dh: np.ndarray) -> np.ndarray:
            nonlocal d_act
            for part in ("b", "a"):
                key = f"{name}.{part}"
                dh = L.silu_backward(dh, cache[key + ".act"])
                dshift = dh.sum(axis=(1, 2))
                g[f"{key}.film.w"] = act.T @ dshift
                g[f"{key}.film.b"] = dshift.sum(axis=0)
                d_act += dshift @ p[f"{key}.film.w"].T
                dh, g[f"{key}.conv.w"], g[f"{key}.conv.b"] = L.conv3x3_backward(
                    dh, cache[key + ".conv"], p[f"{key}.conv.w"])
            return dh

        dcat0 = block_back("dec0", dd0)
        de0 = dcat0[..., c1:].copy()
        dd1 = L.upsample2_backward(dcat0[..., :c1])
        dcat1 = block_back("dec1", dd1)
        de1 = dcat1[..., c2:].copy()
        dm = L.upsample2_backward(dcat1[..., :c2])
        dm = block_back("mid", dm)
        de1 += L.avgpool2_backward(dm)
        de1 = block_back("enc1", de1)
        de0 += L.avgpool2_backward(de1)
        block_back("enc0", de0)

        demb = L.silu_backward(d_act, cache["emb_act"])
        da1, g["light.w2"], g["light.b2"] = L.linear_backward(demb, cache["light2"], p["light.w2"])
        dz1 = L.silu_backward(da1, cache["light_act"])
        _, g["light.w1"], g["light.b1"] = L.linear_backward(dz1, cache["light1"], p["light.w1"])
        return {k: g[k] for k in params.config.param_shapes()}


def find_nonfinite_layer(params: DenoiserParams, x, t, light) -> str | None:
    """Re-run the forward pass with per-layer checks; return the first bad layer name."""
    for name, w in params.weights.items():
        if not np.all(np.isfinite(w)):
            return f"param:{name}"
    try:
        TinyUNet(params.config).forward(params, x, t, light, check_finite=True)
    except NonFiniteError as exc:
        return exc.layer
    return None
