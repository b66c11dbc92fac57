"""SquidGame benchmark generation, pseudo distractor signals and dataset I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1
SHAPES = ("circle", "triangle", "square")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


class CholeskyError(np.linalg.LinAlgError):
    pass


@dataclass
class MtsDataset:
    """N labelled instances of shape (T, D).

    ``folds`` holds the cross-validation fold of every training instance and -1
    for held-out test instances; ``split`` is "train" or "test" per instance.
    """

    X: np.ndarray
    labels: np.ndarray
    feature_names: list[str]
    folds: np.ndarray
    split: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.folds = np.asarray(self.folds, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.X.ndim != 3:
            raise DatasetError(f"instances must form an (N, T, D) array, got {self.X.shape}")
        n, _, d = self.X.shape
        if self.labels.shape != (n,) or self.folds.shape != (n,) or self.split.shape != (n,):
            raise DatasetError("labels, folds and split need one entry per instance")
        if len(self.feature_names) != d:
            raise DatasetError(f"{len(self.feature_names)} feature names for {d} features")
        if n and self.labels.min() < 0:
            raise DatasetError("negative class label")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if n and self.labels.max() >= self.n_classes:
            raise DatasetError("label exceeds the number of classes")
        bad = set(np.unique(self.split)) - {"train", "test"}
        if bad:
            raise DatasetError(f"unknown split values {sorted(bad)}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def t(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    @property
    def n_folds(self) -> int:
        tr = self.folds[self.split == "train"]
        return int(tr.max()) + 1 if tr.size else 0

    def select_features(self, keep: Sequence[int]) -> "MtsDataset":
        keep = list(keep)
        return replace(self, X=self.X[:, :, keep], feature_names=[self.feature_names[j] for j in keep])

    def subset(self, idx) -> "MtsDataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], labels=self.labels[idx], folds=self.folds[idx], split=self.split[idx])


@dataclass(frozen=True)
class SquidGameConfig:
    n_per_class: int = 18000
    t: int = 32
    d: int = 30
    seed: int = 42
    noise_sigma: float = 0.2
    signal_amplitude: float = 1.0
    signal_freq_range: tuple[float, float] = (0.1, 0.45)
    radius_range: tuple[float, float] = (2.0, 4.0)
    test_fraction: float = 0.2
    folds: int = 5

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.d % 3:
            raise ValueError("D must split into three equal feature groups")
        if self.t < 2:
            raise ValueError("T must be >= 2")
        lo, hi = self.radius_range
        # radius >= 1 guarantees every shape covers at least one grid cell
        if not 1 <= lo <= hi or 2 * hi + 1 > min(self.t, self.d // 3):
            raise ValueError("mask radius range must lie in [1, (block width - 1) / 2]")
        if not 0 < self.test_fraction < 1 or self.folds < 2:
            raise ValueError("need 0 < test_fraction < 1 and at least 2 folds")


@dataclass
class GroundTruthMask:
    """Two C x D importance patterns; a prediction is scored against the one it
    agrees with better."""

    variant_a: np.ndarray
    variant_b: np.ndarray

    def to_dict(self) -> dict:
        return {"variant_a": self.variant_a.astype(int).tolist(), "variant_b": self.variant_b.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthMask":
        return cls(np.asarray(d["variant_a"], dtype=bool), np.asarray(d["variant_b"], dtype=bool))


def squidgame_ground_truth(d: int = 30, n_classes: int = 3) -> GroundTruthMask:
    width = d // n_classes
    a = np.zeros((n_classes, d), dtype=bool)
    for c in range(n_classes):
        a[c, c * width : (c + 1) * width] = True
    return GroundTruthMask(variant_a=a, variant_b=~a)


def _instance_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream, index]))


def shape_mask(shape: str, t: int, width: int, center: tuple[float, float], radius: float) -> np.ndarray:
    """Boolean (t, width) mask of a shape centred at (time, feature)."""
    tt, ff = np.meshgrid(np.arange(t), np.arange(width), indexing="ij")
    dt = tt - center[0]
    df = ff - center[1]
    if shape == "circle":
        return dt * dt + df * df <= radius * radius
    if shape == "square":
        return (np.abs(dt) <= radius) & (np.abs(df) <= radius)
    if shape == "triangle":
        # apex at the earliest time step, widening along the time axis
        depth = dt + radius
        return (depth >= 0) & (dt <= radius) & (np.abs(df) <= depth / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def _squidgame_instance(cfg: SquidGameConfig, label: int, index: int) -> np.ndarray:
    rng = _instance_rng(cfg.seed, index)
    x = rng.normal(0.0, cfg.noise_sigma, size=(cfg.t, cfg.d))
    width = cfg.d // 3
    for _ in range(100):
        radius = rng.uniform(*cfg.radius_range)
        # centre drawn so the shape's bounding box stays inside the block
        ct = rng.uniform(radius, cfg.t - 1 - radius)
        cf = rng.uniform(radius, width - 1 - radius)
        mask = shape_mask(SHAPES[label], cfg.t, width, (ct, cf), radius)
        if mask.any():
            break
    else:  # pragma: no cover - the config check makes this unreachable
        raise RuntimeError("could not place a non-empty mask")
    freq = rng.uniform(*cfg.signal_freq_range)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wave = cfg.signal_amplitude * np.sin(2.0 * math.pi * freq * np.arange(cfg.t) + phase)
    block = x[:, label * width : (label + 1) * width]
    block[mask] = np.broadcast_to(wave[:, None], mask.shape)[mask]
    return x


def assign_splits(labels: np.ndarray, folds: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified held-out test split plus k folds over the rest."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    split = np.full(labels.shape, "train", dtype="<U5")
    fold_of = np.full(labels.shape, -1, dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_test = int(round(test_fraction * idx.size))
        split[idx[:n_test]] = "test"
        rest = idx[n_test:]
        fold_of[rest] = np.arange(rest.size) % folds
    return split, fold_of


def gen_squidgame(cfg: SquidGameConfig | None = None) -> tuple[MtsDataset, GroundTruthMask]:
    cfg = cfg or SquidGameConfig()
    labels = np.repeat(np.arange(3), cfg.n_per_class)
    X = np.empty((labels.size, cfg.t, cfg.d))
    for i, c in enumerate(labels):
        X[i] = _squidgame_instance(cfg, int(c), i)
    split, folds = assign_splits(labels, cfg.folds, cfg.test_fraction, cfg.seed)
    names = [f"{SHAPES[j // (cfg.d // 3)]}_{j % (cfg.d // 3)}" for j in range(cfg.d)]
    ds = MtsDataset(X=X, labels=labels, feature_names=names, folds=folds, split=split, n_classes=3)
    return ds, squidgame_ground_truth(cfg.d, 3)


# -- pseudo distractor signals ------------------------------------------------
PSEUDO_KINDS = {
    "wn": "whitenoise",
    "whitenoise": "whitenoise",
    "sin": "sinusoid",
    "sinusoid": "sinusoid",
    "gp": "gp",
}
_PSEUDO_TAGS = {"whitenoise": "wn", "sinusoid": "sin", "gp": "gp"}


def matern32(r: np.ndarray, length_scale: float = 1.0) -> np.ndarray:
    z = math.sqrt(3.0) * np.abs(r) / length_scale
    return (1.0 + z) * np.exp(-z)


@lru_cache(maxsize=16)
def _gp_factor(t: int, length_scale: float) -> np.ndarray:
    grid = np.arange(t, dtype=np.float64)
    cov = matern32(grid[:, None] - grid[None, :], length_scale)
    jitter = 1e-9
    while jitter <= 1e-3:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(t))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise CholeskyError(f"Matern covariance for T={t} is not positive definite even with jitter 1e-3")


def gen_pseudo_signal(kind: str, t: int, seed=None, length_scale: float = 1.0) -> np.ndarray:
    """One pseudo series of length ``t``.

    whitenoise: N(0, 0.3^2); sinusoid: unit amplitude, 0.25 cycles per step,
    phase uniform from the seed; gp: zero-mean Matern-3/2 process.
    """
    if kind not in PSEUDO_KINDS:
        raise ValueError(f"unknown pseudo signal kind {kind!r}")
    if t < 2:
        raise ValueError("pseudo signals need T >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kind = PSEUDO_KINDS[kind]
    if kind == "whitenoise":
        return rng.normal(0.0, 0.3, size=t)
    if kind == "sinusoid":
        phase = rng.uniform(0.0, 2.0 * math.pi)
        return np.sin(2.0 * math.pi * 0.25 * np.arange(t) + phase)
    return _gp_factor(t, float(length_scale)) @ rng.standard_normal(t)


def parse_kinds(kinds) -> list[str]:
    if isinstance(kinds, str):
        kinds = [k for k in kinds.split(",") if k.strip()]
    out = []
    for k in kinds:
        k = k.strip().lower()
        if k not in PSEUDO_KINDS:
            raise ValueError(f"unknown pseudo signal kind {k!r}")
        out.append(PSEUDO_KINDS[k])
    return out


def inject_pseudo(ds: MtsDataset, kinds, seed: int = 42) -> MtsDataset:
    """Append one freshly drawn pseudo column per kind to every instance."""
    kinds = parse_kinds(kinds)
    if not kinds:
        return ds
    extra = np.empty((ds.n, ds.t, len(kinds)))
    for i in range(ds.n):
        rng = _instance_rng(seed, i, stream=1)
        for c, kind in enumerate(kinds):
            extra[i, :, c] = gen_pseudo_signal(kind, ds.t, rng)
    names = list(ds.feature_names) + [f"pseudo_{_PSEUDO_TAGS[k]}" for k in kinds]
    return replace(ds, X=np.concatenate([ds.X, extra], axis=2), feature_names=names)


def pseudo_columns(ds: MtsDataset) -> list[int]:
    return [j for j, name in enumerate(ds.feature_names) if name.startswith("pseudo_")]


# -- I/O ----------------------------------------------------------------------
def write_dataset(ds: MtsDataset, path, ground_truth: GroundTruthMask | None = None) -> Path:
    """Write ``manifest.json`` + ``data.bin`` (little-endian f32, instance-major)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "n": ds.n,
        "t": ds.t,
        "d": ds.d,
        "c": int(ds.n_classes),
        "feature_names": list(ds.feature_names),
        "labels": ds.labels.tolist(),
        "folds": ds.folds.tolist(),
        "split": ds.split.tolist(),
    }
    ds.X.astype("<f4").tofile(path / "data.bin")
    (path / "manifest.json").write_text(json.dumps(manifest))
    if ground_truth is not None:
        (path / "ground_truth.json").write_text(json.dumps(ground_truth.to_dict()))
    return path


def read_manifest_dataset(path: Path) -> MtsDataset:
    try:
        m = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path / 'manifest.json'}: invalid JSON ({exc})") from exc
    if m.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {m.get('version')!r}")
    n, t, d = int(m["n"]), int(m["t"]), int(m["d"])
    raw = np.fromfile(path / "data.bin", dtype="<f4")
    if raw.size != n * t * d:
        raise DatasetError(f"data.bin holds {raw.size} values but the manifest declares n*t*d = {n * t * d}")
    split = m["split"]
    if isinstance(split, str):
        split = [split] * n
    return MtsDataset(
        X=raw.reshape(n, t, d).astype(np.float64),
        labels=np.asarray(m["labels"]),
        feature_names=list(m["feature_names"]),
        folds=np.asarray(m["folds"]),
        split=np.asarray(split),
        n_classes=int(m["c"]),
    )


def read_csv_dataset(path: Path, folds: int = 5, test_fraction: float = 0.2, seed: int = 42) -> MtsDataset:
    """Columns ``instance_id,t,label,f0..f{D-1}``, rows grouped by instance."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty CSV") from None
        for col in ("instance_id", "t", "label"):
            if col not in header:
                raise DatasetError(f"{path}: missing column {col!r}")
        feat_cols = [h for h in header if h not in ("instance_id", "t", "label")]
        d = len(feat_cols)
        expected = [f"f{j}" for j in range(d)]
        for name in expected:
            if name not in feat_cols:
                raise DatasetError(f"{path}: missing feature column {name!r}")
        pos = [header.index(name) for name in expected]
        i_id, i_t, i_lab = header.index("instance_id"), header.index("t"), header.index("label")
        series: dict[str, list] = {}
        order: list[str] = []
        labels: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            key = row[i_id]
            if key not in series:
                if order and key in labels:
                    raise DatasetError(f"{path}:{lineno}: rows of instance {key} are not contiguous")
                series[key] = []
                order.append(key)
                labels[key] = int(row[i_lab])
            if int(row[i_t]) != len(series[key]):
                raise DatasetError(f"{path}:{lineno}: time index {row[i_t]} out of order for instance {key}")
            try:
                series[key].append([float(row[p]) for p in pos])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    if not order:
        raise DatasetError(f"{path}: no data rows")
    lengths = {len(series[k]) for k in order}
    if len(lengths) != 1:
        raise DatasetError(f"{path}: instances have differing lengths {sorted(lengths)}")
    X = np.asarray([series[k] for k in order], dtype=np.float64)
    y = np.asarray([labels[k] for k in order])
    split, fold_of = assign_splits(y, folds, test_fraction, seed)
    return MtsDataset(X=X, labels=y, feature_names=expected, folds=fold_of, split=split)


def read_dataset(path) -> MtsDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if path.is_dir():
        if not (path / "manifest.json").exists():
            raise DatasetError(f"{path}: no manifest.json")
        return read_manifest_dataset(path)
    if path.suffix.lower() == ".csv":
        return read_csv_dataset(path)
    raise DatasetError(f"{path}: expected a dataset directory or a .csv file")


def read_ground_truth(path) -> GroundTruthMask | None:
    p = Path(path) / "ground_truth.json"
    if not p.exists():
        return None
    return GroundTruthMask.from_dict(json.loads(p.read_text()))
