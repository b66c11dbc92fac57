"""Image encodings of univariate series: recurrence plots and Gramian angular
summation fields.

Each feature column of an instance becomes one square image channel, so an
instance of shape (T, D) turns into a (D, L, L) stack.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterator

import numpy as np

if TYPE_CHECKING:
    from .synthgen import MtsDataset

# relative slack so that distances equal to epsilon up to rounding stay recurrent
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class RpConfig:
    tau: int = 1
    m: int = 1
    epsilon_fraction: float = 0.10

    def __post_init__(self):
        if self.tau < 1 or self.m < 1:
            raise ValueError("tau and m must be >= 1")
        if not 0.0 < self.epsilon_fraction <= 1.0:
            raise ValueError("epsilon_fraction must lie in (0, 1]")

    def image_size(self, t: int) -> int:
        return t - (self.m - 1) * self.tau


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "rp"
    rp: RpConfig = field(default_factory=RpConfig)

    def __post_init__(self):
        if self.kind not in ("rp", "gaf"):
            raise ValueError(f"unknown encoder {self.kind!r}; expected 'rp' or 'gaf'")

    def image_size(self, t: int) -> int:
        return self.rp.image_size(t) if self.kind == "rp" else t

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rp": asdict(self.rp)}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(kind=d.get("kind", "rp"), rp=RpConfig(**d.get("rp", {})))


@dataclass
class EncodedStack:
    channels: np.ndarray  # (D, L, L)
    encoder: str
    instance_id: int


def _check_series(x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise ValueError("series contains non-finite values")


def _rp_batch(series: np.ndarray, cfg: RpConfig) -> np.ndarray:
    """Recurrence plots of a batch of series, shape (..., T) -> (..., L, L) uint8."""
    t = series.shape[-1]
    L = cfg.image_size(t)
    if L < 2:
        raise ValueError(f"series of length {t} too short for tau={cfg.tau}, m={cfg.m}")
    # embedded vectors v_k = [x_k, x_{k+tau}, ..., x_{k+(m-1)tau}]
    emb = np.stack([series[..., i * cfg.tau : i * cfg.tau + L] for i in range(cfg.m)], axis=-1)
    diff = emb[..., :, None, :] - emb[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    dmax = dist.max(axis=(-2, -1), keepdims=True)
    eps = cfg.epsilon_fraction * dmax
    return (dist <= eps + _TIE_RTOL * dmax).astype(np.uint8)


def encode_rp(series, cfg: RpConfig | None = None) -> np.ndarray:
    """Binary recurrence plot with a closed threshold (H(0) = 1)."""
    cfg = cfg or RpConfig()
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("encode_rp expects a 1-D series")
    _check_series(x)
    return _rp_batch(x, cfg).astype(np.float64)


def _gaf_batch(series: np.ndarray) -> np.ndarray:
    lo = series.min(axis=-1, keepdims=True)
    hi = series.max(axis=-1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    # a zero-range series maps to the midpoint 0
    scaled = np.where(span > 0, 2.0 * (series - lo) / safe - 1.0, 0.0)
    phi = np.arccos(np.clip(scaled, -1.0, 1.0))
    return np.cos(phi[..., :, None] + phi[..., None, :])


def encode_gaf(series) -> np.ndarray:
    """Gramian angular summation field of a min-max scaled series."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("encode_gaf expects a non-empty 1-D series")
    _check_series(x)
    return _gaf_batch(x)


def encode_array(X: np.ndarray, cfg: EncoderConfig | None = None, chunk: int = 512) -> np.ndarray:
    """Encode instances of shape (N, T, D) into (N, D, L, L).

    RP images come back as uint8, GAF images as float64.
    """
    cfg = cfg or EncoderConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected (N, T, D) instances, got shape {X.shape}")
    _check_series(X)
    n, t, d = X.shape
    L = cfg.image_size(t)
    dtype = np.uint8 if cfg.kind == "rp" else np.float64
    out = np.empty((n, d, L, L), dtype=dtype)
    for s in range(0, n, chunk):
        series = np.swapaxes(X[s : s + chunk], 1, 2)
        out[s : s + chunk] = _rp_batch(series, cfg.rp) if cfg.kind == "rp" else _gaf_batch(series)
    return out


def encode_dataset(ds: "MtsDataset", cfg: EncoderConfig | None = None) -> Iterator[EncodedStack]:
    """Yield one stack per instance, channel j encoding feature j."""
    cfg = cfg or EncoderConfig()
    for i in range(ds.n):
        img = encode_array(ds.X[i : i + 1], cfg)[0]
        yield EncodedStack(channels=img.astype(np.float64), encoder=cfg.kind, instance_id=i)


# -- on-disk cache ------------------------------------------------------------
def cache_dir() -> Path:
    return Path(os.environ.get("CAFO_CACHE_DIR", Path.home() / ".cache" / "cafo"))


def cache_key(X: np.ndarray, cfg: EncoderConfig) -> str:
    h = hashlib.sha256()
    h.update(str(X.shape).encode())
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:32]


def encode_cached(X: np.ndarray, cfg: EncoderConfig | None = None, directory: Path | None = None) -> np.ndarray:
    """Encode with a disk cache keyed by (data hash, encoder config).

    Returns a read-only memory map when served from the cache.
    """
    cfg = cfg or EncoderConfig()
    directory = Path(directory) if directory is not None else cache_dir()
    path = directory / f"enc-{cache_key(X, cfg)}.npy"
    if path.exists():
        return np.load(path, mmap_mode="r")
    enc = encode_array(X, cfg)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".{os.getpid()}.tmp.npy")
    np.save(tmp, enc)
    os.replace(tmp, path)
    return np.load(path, mmap_mode="r")
