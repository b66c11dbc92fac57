"""Experiment orchestration: training, cross-validation, remove-and-retrain,
pseudo-signal tracking and lambda sweeps."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from . import tensor as T
from .encode import EncoderConfig, RpConfig, encode_cached
from .model import BackboneConfig, DepCaConfig, ModelConfig, init_params, model_forward, save_checkpoint
from .qr import ORIENTATIONS, class_prototypes, offdiag_mean, total_loss
from .synthgen import GroundTruthMask, MtsDataset, inject_pseudo, pseudo_columns

log = logging.getLogger(__name__)

EVAL_BATCH = 256
MAX_BAD_BATCHES = 3


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.002
    lam: float = 1.0
    seed: int = 42
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    folds: int = 5
    workers: int = 1
    qr_orientation: str = "auto"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    depca: DepCaConfig = field(default_factory=DepCaConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.qr_orientation not in ORIENTATIONS:
            raise ValueError(f"qr_orientation must be one of {ORIENTATIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        enc = EncoderConfig.from_dict(d.pop("encoder", {}))
        dep = DepCaConfig(**d.pop("depca", {}))
        bb = BackboneConfig(**d.pop("backbone", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(encoder=enc, depca=dep, backbone=bb, **d)


@dataclass
class RunRecord:
    fold: int
    history: list[dict]
    gi_trajectory: np.ndarray  # (epochs, D)
    test_attention: np.ndarray  # (N_test, D)
    test_labels: np.ndarray
    test_acc: float
    val_offdiag: float
    feature_names: list[str]
    run_dir: Path | None = None

    @property
    def gi(self) -> M.GiReport:
        return M.global_importance(self.test_attention, source_run_id=str(self.fold))


def _encoded(ds: MtsDataset, cfg: TrainConfig, enc=None):
    return encode_cached(ds.X, cfg.encoder) if enc is None else enc


def _batches(enc, idx: np.ndarray, features) -> np.ndarray:
    x = np.asarray(enc[np.sort(idx)] if isinstance(enc, np.memmap) else enc[idx])
    if isinstance(enc, np.memmap):
        # restore the requested order after the sorted (sequential) read
        order = np.argsort(np.argsort(idx, kind="stable"), kind="stable")
        x = x[order]
    if features is not None:
        x = x[:, features]
    return x.astype(np.float64)


def evaluate(params, mcfg: ModelConfig, enc, idx: np.ndarray, labels: np.ndarray, features=None):
    """Return (mean CE, accuracy, attention (n, D)) without recording a graph."""
    att, ce_sum, correct = [], 0.0, 0
    with T.no_grad():
        for s in range(0, idx.size, EVAL_BATCH):
            bi = idx[s : s + EVAL_BATCH]
            logits, a = model_forward(T.Tensor(_batches(enc, bi, features)), params, mcfg)
            yb = labels[bi]
            ce_sum += T.softmax_cross_entropy(logits, yb).item() * bi.size
            correct += int(np.sum(logits.data.argmax(axis=1) == yb))
            att.append(a.data)
    n = max(idx.size, 1)
    d = mcfg.n_features
    return ce_sum / n, correct / n, (np.concatenate(att) if att else np.zeros((0, d)))


def train(
    ds: MtsDataset,
    cfg: TrainConfig,
    train_idx,
    val_idx=None,
    test_idx=None,
    *,
    fold: int = 0,
    run_dir=None,
    enc=None,
    features: Sequence[int] | None = None,
) -> RunRecord:
    """Mini-batch AdamW training of the attention model.

    ``features`` restricts training to a subset of channels (columns are
    dropped before the model sees them). Validation metrics and a GI snapshot
    are recorded after every epoch.
    """
    enc = _encoded(ds, cfg, enc)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx if val_idx is not None else [], dtype=np.int64)
    test_idx = np.asarray(test_idx if test_idx is not None else [], dtype=np.int64)
    features = None if features is None else list(features)
    names = ds.feature_names if features is None else [ds.feature_names[j] for j in features]
    d = len(names)
    mcfg = ModelConfig(n_features=d, depca=cfg.depca, backbone=replace(cfg.backbone, num_classes=ds.n_classes))
    params = init_params(mcfg, cfg.seed)
    opt = T.AdamW(params.values(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    labels = ds.labels
    history: list[dict] = []
    gi_traj: list[np.ndarray] = []
    val_offdiag = float("nan")
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, fold, epoch]))
        perm = rng.permutation(train_idx)
        loss_sum = ce_sum = 0.0
        correct = seen = 0
        for s in range(0, perm.size, cfg.batch_size):
            bi = perm[s : s + cfg.batch_size]
            yb = labels[bi]
            try:
                logits, a = model_forward(T.Tensor(_batches(enc, bi, features)), params, mcfg)
                protos = class_prototypes(a, yb).rows if cfg.lam > 0 else None
                loss, ce, _ = total_loss(logits, yb, protos, cfg.lam, cfg.qr_orientation)
            except T.NonFiniteError as exc:
                bad += 1
                log.warning("non-finite batch in epoch %d: %s", epoch, exc)
                if bad >= MAX_BAD_BATCHES:
                    raise TrainingDiverged(f"loss non-finite for {bad} consecutive batches (epoch {epoch})") from exc
                continue
            bad = 0
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            loss_sum += loss.item() * bi.size
            ce_sum += ce.item() * bi.size
            correct += int(np.sum(logits.data.argmax(axis=1) == yb))
            seen += bi.size
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / max(seen, 1),
            "train_ce": ce_sum / max(seen, 1),
            "train_acc": correct / max(seen, 1),
        }
        if val_idx.size:
            v_ce, v_acc, v_att = evaluate(params, mcfg, enc, val_idx, labels, features)
            protos = M.class_means(v_att, labels[val_idx], ds.n_classes)
            val_offdiag = offdiag_mean(protos, cfg.qr_orientation)
            row.update(val_ce=v_ce, val_acc=v_acc, val_offdiag=val_offdiag)
            gi_traj.append(v_att.mean(axis=0))
        history.append(row)
        log.info("fold %d epoch %d %s", fold, epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
    if test_idx.size:
        _, test_acc, test_att = evaluate(params, mcfg, enc, test_idx, labels, features)
    else:
        test_acc, test_att = float("nan"), np.zeros((0, d))
    rec = RunRecord(
        fold=fold,
        history=history,
        gi_trajectory=np.asarray(gi_traj).reshape(len(gi_traj), d),
        test_attention=test_att,
        test_labels=labels[test_idx],
        test_acc=test_acc,
        val_offdiag=val_offdiag,
        feature_names=names,
    )
    if run_dir is not None:
        rec.run_dir = Path(run_dir)
        write_run(rec, rec.run_dir, cfg, params, mcfg)
    return rec


# -- run directory I/O --------------------------------------------------------
def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_run(rec: RunRecord, run_dir: Path, cfg: TrainConfig, params, mcfg: ModelConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"train": cfg.to_dict(), "fold": rec.fold, "feature_names": rec.feature_names}, indent=2, sort_keys=True)
    )
    cols = list(rec.history[0].keys()) if rec.history else ["epoch"]
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rec.history:
            w.writerow([_fmt(row[c]) for c in cols])
    with open(run_dir / "gi_trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + list(rec.feature_names))
        for e, gi in enumerate(rec.gi_trajectory, start=1):
            w.writerow([e] + [_fmt(v) for v in gi])
    rec.test_attention.astype("<f8").tofile(run_dir / "attentions_test.bin")
    (run_dir / "attentions_test.json").write_text(
        json.dumps(
            {
                "n": int(rec.test_attention.shape[0]),
                "d": int(rec.test_attention.shape[1]),
                "dtype": "<f8",
                "labels": rec.test_labels.tolist(),
                "test_acc": rec.test_acc,
                "val_offdiag": rec.val_offdiag,
                "feature_names": rec.feature_names,
            }
        )
    )
    save_checkpoint(run_dir / "checkpoint.bin", params, mcfg, epoch=len(rec.history), seed=cfg.seed)


def read_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    missing = [n for n in ("config.json", "metrics.csv", "gi_trajectory.csv", "attentions_test.bin", "attentions_test.json") if not (run_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{run_dir}: missing {', '.join(missing)}")
    conf = json.loads((run_dir / "config.json").read_text())
    meta = json.loads((run_dir / "attentions_test.json").read_text())
    att = np.fromfile(run_dir / "attentions_test.bin", dtype="<f8").reshape(meta["n"], meta["d"])
    with open(run_dir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    history = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]
    with open(run_dir / "gi_trajectory.csv") as fh:
        gi_rows = list(csv.reader(fh))[1:]
    traj = np.asarray([[float(v) for v in r[1:]] for r in gi_rows]).reshape(len(gi_rows), meta["d"])
    return RunRecord(
        fold=int(conf["fold"]),
        history=history,
        gi_trajectory=traj,
        test_attention=att,
        test_labels=np.asarray(meta["labels"], dtype=np.int64),
        test_acc=float(meta["test_acc"]),
        val_offdiag=float(meta["val_offdiag"]),
        feature_names=list(meta["feature_names"]),
        run_dir=run_dir,
    )


# -- cross-validation ---------------------------------------------------------
def fold_indices(ds: MtsDataset, fold: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tr = ds.split == "train"
    train_idx = np.flatnonzero(tr & (ds.folds != fold))
    val_idx = np.flatnonzero(tr & (ds.folds == fold))
    test_idx = np.flatnonzero(ds.split == "test")
    return train_idx, val_idx, test_idx


def _run_fold(args):
    ds, cfg, fold, run_dir, features = args
    tr, va, te = fold_indices(ds, fold)
    return train(ds, cfg, tr, va, te, fold=fold, run_dir=run_dir, features=features)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def cross_validate(ds: MtsDataset, cfg: TrainConfig, run_root=None, features=None) -> list[RunRecord]:
    """One run per fold, each fold validating once; all runs score the common test split."""
    k = cfg.folds
    present = set(np.unique(ds.folds[ds.split == "train"]).tolist())
    missing = [f for f in range(k) if f not in present]
    if missing:
        raise ValueError(f"dataset has no instances in folds {missing}")
    if np.any(ds.folds[ds.split == "train"] >= k):
        raise ValueError(f"dataset has more than {k} folds")
    encode_cached(ds.X, cfg.encoder)  # populate the cache once before any worker starts
    jobs = [
        (ds, cfg, f, None if run_root is None else Path(run_root) / f"fold{f}", features)
        for f in range(k)
    ]
    return _map(_run_fold, jobs, cfg.workers)


def cv_summary(records: Sequence[RunRecord], n_classes: int, gt: GroundTruthMask | None = None) -> dict:
    """Aggregate CV metrics: accuracy, rank consistency and CWRI agreement."""
    ranks = [r.gi.rank_desc for r in records]
    out: dict = {
        "test_acc": [r.test_acc for r in records],
        "val_offdiag": [r.val_offdiag for r in records],
        "gi": [r.gi.gi.tolist() for r in records],
        "gi_mean": averaged_gi(records).tolist(),
        "gi_rank": rank_from_runs(records).tolist(),
        "calinski_harabasz": [M.calinski_harabasz(r.test_attention, r.test_labels) for r in records],
    }
    if len(records) >= 2:
        out["spearman"], out["kendall"] = M.rank_correlations(ranks)
    if gt is not None:
        per_fold = [cwri_agreement(r, n_classes, gt) for r in records]
        out["cwri"] = per_fold
        for key in ("f1", "jaccard", "iacc"):
            out[key] = float(np.mean([p[key] for p in per_fold]))
    return out


def cwri_of_run(rec: RunRecord, n_classes: int) -> M.CwriMatrix:
    return M.cwri(M.class_means(rec.test_attention, rec.test_labels, n_classes))


def cwri_agreement(rec: RunRecord, n_classes: int, gt: GroundTruthMask) -> dict:
    res = M.gt_agreement(cwri_of_run(rec, n_classes), gt)
    return {"fold": rec.fold, "f1": res["f1"], "jaccard": res["jaccard"], "iacc": res["iacc"], "selected": res["selected"]}


def averaged_gi(records: Sequence[RunRecord]) -> np.ndarray:
    return np.mean([r.gi.gi for r in records], axis=0)


def rank_from_runs(records: Sequence[RunRecord]) -> np.ndarray:
    """Per-run GI vectors are averaged first, then ranked."""
    return M.rank_descending(averaged_gi(records))


# -- remove and retrain -------------------------------------------------------
def _roar_job(args):
    ds, cfg, keep, train_idx, test_idx = args
    rec = train(ds, cfg, train_idx, None, test_idx, features=keep)
    return rec.test_acc


def roar(ds: MtsDataset, cfg: TrainConfig, gi_rank, run_dir=None) -> M.RoarCurve:
    """Retrain after dropping the top-d features in truth (descending GI) and
    inverse (ascending GI) order, d = 0..D-1: 2*D retrains."""
    gi_rank = np.asarray(gi_rank, dtype=np.int64)
    d = ds.d
    if sorted(gi_rank.tolist()) != list(range(d)):
        raise ValueError("gi_rank must be a permutation of the feature indices")
    train_idx = np.flatnonzero(ds.split == "train")
    test_idx = np.flatnonzero(ds.split == "test")
    encode_cached(ds.X, cfg.encoder)
    jobs = []
    for order in (gi_rank, gi_rank[::-1]):
        for k in range(d):
            removed = set(order[:k].tolist())
            keep = [j for j in range(d) if j not in removed]
            jobs.append((ds, cfg, keep, train_idx, test_idx))
    accs = _map(_roar_job, jobs, cfg.workers)
    curve = M.RoarCurve(x=np.arange(d), truth_acc=accs[:d], inverse_acc=accs[d:])
    if run_dir is not None:
        write_roar(curve, Path(run_dir), gi_rank, ds.feature_names)
    return curve


def roar_summary(curve: M.RoarCurve, k_fraction: float = 0.2) -> dict:
    d = curve.x.size
    k = M.k_removed(d, k_fraction)
    base = float(curve.truth_acc[0])
    return {
        "abc": M.abc(curve),
        "abc_x_normalized": True,
        "da": M.drop_in_accuracy(base, float(curve.truth_acc[k])),
        "da_k_features": k,
        "wda": M.weighted_drop(base, curve.truth_acc, d),
        "base_acc": base,
    }


def write_roar(curve: M.RoarCurve, run_dir: Path, gi_rank, names) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    gi_rank = np.asarray(gi_rank)
    with open(run_dir / "roar_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["removed", "truth_acc", "inverse_acc", "truth_removed_feature", "inverse_removed_feature"])
        for i, x in enumerate(curve.x):
            tr = names[gi_rank[i - 1]] if i else ""
            iv = names[gi_rank[::-1][i - 1]] if i else ""
            w.writerow([int(x), _fmt(curve.truth_acc[i]), _fmt(curve.inverse_acc[i]), tr, iv])


def read_roar(run_dir) -> M.RoarCurve:
    path = Path(run_dir) / "roar_curve.csv"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: missing roar_curve.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return M.RoarCurve(
        x=[int(r["removed"]) for r in rows],
        truth_acc=[float(r["truth_acc"]) for r in rows],
        inverse_acc=[float(r["inverse_acc"]) for r in rows],
    )


# -- pseudo signals -----------------------------------------------------------
@dataclass
class PseudoResult:
    trajectories: list[np.ndarray]  # per fold, (epochs, D')
    pseudo_idx: list[int]
    feature_names: list[str]
    records: list[RunRecord]

    def final_ranks(self) -> list[np.ndarray]:
        return [M.rank_descending(t[-1]) for t in self.trajectories]

    def in_bottom(self, fraction: float = 0.2) -> list[bool]:
        """Per fold: do all pseudo features sit in the bottom ``fraction`` of ranks?"""
        d = len(self.feature_names)
        bottom = int(np.ceil(fraction * d))
        out = []
        for rank in self.final_ranks():
            tail = set(rank[d - bottom :].tolist())
            out.append(all(j in tail for j in self.pseudo_idx))
        return out


def pseudo_experiment(ds: MtsDataset, cfg: TrainConfig, kinds, run_root=None, seed: int | None = None) -> PseudoResult:
    aug = inject_pseudo(ds, kinds, seed=cfg.seed if seed is None else seed)
    recs = cross_validate(aug, cfg, run_root)
    return PseudoResult(
        trajectories=[r.gi_trajectory for r in recs],
        pseudo_idx=pseudo_columns(aug),
        feature_names=list(aug.feature_names),
        records=recs,
    )


# -- lambda sweep -------------------------------------------------------------
def lambda_sweep(ds: MtsDataset, cfg: TrainConfig, lambdas: Sequence[float], gt: GroundTruthMask | None = None, run_root=None) -> list[dict]:
    if not lambdas:
        raise ValueError("lambda list is empty")
    table = []
    for lam in lambdas:
        sub = None if run_root is None else Path(run_root) / f"lambda_{lam:g}"
        recs = cross_validate(ds, replace(cfg, lam=float(lam)), sub)
        row = {"lambda": float(lam), "acc": float(np.mean([r.test_acc for r in recs]))}
        if gt is not None:
            agg = [cwri_agreement(r, ds.n_classes, gt) for r in recs]
            for key in ("f1", "jaccard", "iacc"):
                row[key] = float(np.mean([a[key] for a in agg]))
        table.append(row)
    return table


def default_config(**overrides) -> TrainConfig:
    base = TrainConfig()
    if "rp" in overrides:
        overrides["encoder"] = EncoderConfig(kind=base.encoder.kind, rp=RpConfig(**overrides.pop("rp")))
    return replace(base, **overrides)
