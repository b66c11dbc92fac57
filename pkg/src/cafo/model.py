"""Depthwise channel attention followed by a small CNN classifier."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DepCaConfig:
    gamma: int = 3
    kernel_size: int = 3
    stride: int = 1
    padding: str | int = "same"

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")


@dataclass(frozen=True)
class BackboneConfig:
    # (out_channels, kernel, stride) per conv block; padding is kernel // 2
    conv_blocks: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2))
    hidden: int = 0
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(tuple(int(v) for v in b) for b in self.conv_blocks))
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


@dataclass(frozen=True)
class ModelConfig:
    n_features: int
    depca: DepCaConfig = field(default_factory=DepCaConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "depca": asdict(self.depca), "backbone": asdict(self.backbone)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            n_features=int(d["n_features"]),
            depca=DepCaConfig(**d.get("depca", {})),
            backbone=BackboneConfig(**d.get("backbone", {})),
        )


Params = dict[str, Tensor]


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # Kaiming-uniform with negative slope sqrt(5): bound = 1 / sqrt(fan_in)
    gain = math.sqrt(2.0 / (1.0 + 5.0))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 42) -> Params:
    """Parameters in declaration order; deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    d = cfg.n_features
    k = cfg.depca.kernel_size
    g = cfg.depca.gamma
    p: Params = {
        "depca.weight": Tensor(_kaiming_uniform(rng, (g, d, k, k), k * k), requires_grad=True),
        "depca.bias": Tensor(np.zeros((g, d)), requires_grad=True),
    }
    cin = d
    for i, (cout, kk, _) in enumerate(cfg.backbone.conv_blocks):
        p[f"conv{i}.weight"] = Tensor(_kaiming_uniform(rng, (cout, cin, kk, kk), cin * kk * kk), requires_grad=True)
        p[f"conv{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    if cfg.backbone.hidden:
        h = cfg.backbone.hidden
        p["hidden.weight"] = Tensor(_kaiming_uniform(rng, (cin, h), cin), requires_grad=True)
        p["hidden.bias"] = Tensor(np.zeros(h), requires_grad=True)
        cin = h
    c = cfg.backbone.num_classes
    p["fc.weight"] = Tensor(_kaiming_uniform(rng, (cin, c), cin), requires_grad=True)
    p["fc.bias"] = Tensor(np.zeros(c), requires_grad=True)
    return p


def depca_forward(stack, params: Params, cfg: DepCaConfig | None = None) -> Tensor:
    """Channel attention scores in (0, 1) for a batch (N, D, L, L) -> (N, D).

    Filters are averaged per originating feature after pooling, so the score
    of feature j depends on channel j only.
    """
    cfg = cfg or DepCaConfig()
    x = stack if isinstance(stack, Tensor) else Tensor(stack)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    w, b = params["depca.weight"], params["depca.bias"]
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"stack of shape {x.shape} does not match a DepCA bank for {w.shape[1]} features")
    if cfg.stride == 1:
        pooled = T.depthwise_conv_pool(x, w, b, stride=1, padding=cfg.padding)  # (N, 2, G, D)
        fw = pooled.mean(axis=2)  # feature-wise average over the G filters
        a = T.sigmoid(fw[:, 0] + fw[:, 1])
    else:
        n, d = x.shape[0], x.shape[1]
        g = w.shape[0]
        f_out = T.depthwise_conv2d(x, w, b, stride=cfg.stride, padding=cfg.padding)
        f_avg = T.global_avg_pool(f_out).reshape(n, g, d)
        f_max = T.global_max_pool(f_out).reshape(n, g, d)
        a = T.sigmoid(f_avg.mean(axis=1) + f_max.mean(axis=1))
    return a[0] if single else a


def apply_attention(stack, a) -> Tensor:
    """Scale channel j of every instance by a_j."""
    x = stack if isinstance(stack, Tensor) else Tensor(stack)
    a = a if isinstance(a, Tensor) else Tensor(a)
    if x.ndim == 3:
        if a.shape != (x.shape[0],):
            raise ShapeError(f"attention of shape {a.shape} for a stack with {x.shape[0]} channels")
        return x * a.reshape(-1, 1, 1)
    if a.shape != x.shape[:2]:
        raise ShapeError(f"attention of shape {a.shape} for a batch of shape {x.shape}")
    return x * a.reshape(a.shape + (1, 1))


def backbone_forward(x: Tensor, params: Params, cfg: BackboneConfig) -> Tensor:
    h = x
    for i, (_, k, s) in enumerate(cfg.conv_blocks):
        h = T.relu(T.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=s, padding=k // 2))
    h = T.global_avg_pool(h)
    if cfg.hidden:
        h = T.relu(h @ params["hidden.weight"] + params["hidden.bias"])
    return h @ params["fc.weight"] + params["fc.bias"]


def model_forward(stack, params: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Return (logits (N, C), attention (N, D)) for a batch of stacks."""
    x = stack if isinstance(stack, Tensor) else Tensor(stack)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    a = depca_forward(x, params, cfg.depca)
    logits = backbone_forward(apply_attention(x, a), params, cfg.backbone)
    if single:
        return logits[0], a[0]
    return logits, a


# -- checkpoints --------------------------------------------------------------
_MAGIC = b"CAFOCKPT"


def save_checkpoint(path, params: Params, cfg: ModelConfig, epoch: int, seed: int, extra: dict | None = None) -> None:
    """JSON header then little-endian f64 parameters in declaration order."""
    header = {
        "model": cfg.to_dict(),
        "epoch": epoch,
        "seed": seed,
        "params": [[name, list(t.shape)] for name, t in params.items()],
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    payload = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    params: Params = {}
    off = 0
    for name, shape in header["params"]:
        size = int(np.prod(shape))
        if off + size > payload.size:
            raise ValueError(f"{path}: truncated parameter payload")
        params[name] = Tensor(payload[off : off + size].reshape(shape).copy(), requires_grad=True)
        off += size
    if off != payload.size:
        raise ValueError(f"{path}: payload longer than declared parameters")
    return params, ModelConfig.from_dict(header["model"]), header
