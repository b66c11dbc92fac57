"""Tables, JSON summaries and SVG plots built from run directories.

Every number drawn in an SVG is also written to a CSV or JSON file; the SVGs
are for people, the tables are for programs.
"""

from __future__ import annotations

import csv
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from .harness import RunRecord, read_roar, read_run, roar_summary
from .synthgen import GroundTruthMask, read_ground_truth

REPORT_KEYS = ("abc", "da", "wda", "spearman", "kendall", "f1", "jaccard", "iacc")


class ReportInputError(FileNotFoundError):
    pass


def find_runs(paths: Sequence) -> tuple[list[Path], list[Path]]:
    """Split input paths into training run dirs and ROAR dirs.

    A path may be a run dir itself or a parent holding run dirs one level down.
    """
    runs: list[Path] = []
    roars: list[Path] = []
    missing: list[str] = []
    for raw in paths:
        p = Path(raw)
        if not p.is_dir():
            missing.append(str(p))
            continue
        cands = [p] + sorted(c for c in p.iterdir() if c.is_dir())
        for c in cands:
            if (c / "metrics.csv").exists() and (c / "attentions_test.json").exists():
                runs.append(c)
            if (c / "roar_curve.csv").exists():
                roars.append(c)
    if missing:
        raise ReportInputError("missing run directories: " + ", ".join(missing))
    if not runs and not roars:
        raise ReportInputError(
            "no run artifacts found (need metrics.csv + attentions_test.* or roar_curve.csv) in: "
            + ", ".join(str(p) for p in paths)
        )
    return runs, roars


def _find_ground_truth(paths: Sequence) -> GroundTruthMask | None:
    for p in paths:
        gt = read_ground_truth(p)
        if gt is not None:
            return gt
    return None


def summarize(records: Sequence[RunRecord], curve: M.RoarCurve | None, gt: GroundTruthMask | None) -> dict:
    """All report metrics; a key whose inputs are absent maps to None."""
    out: dict = {k: None for k in REPORT_KEYS}
    if curve is not None:
        out.update(roar_summary(curve))
    if len(records) >= 2:
        out["spearman"], out["kendall"] = M.rank_correlations([r.gi.rank_desc for r in records])
    if records:
        n_classes = int(max(int(r.test_labels.max()) for r in records)) + 1
        out["test_acc"] = [r.test_acc for r in records]
        out["val_offdiag"] = [r.val_offdiag for r in records]
        out["calinski_harabasz"] = [M.calinski_harabasz(r.test_attention, r.test_labels) for r in records]
        if gt is not None and gt.variant_a.shape == (n_classes, records[0].test_attention.shape[1]):
            per = []
            for r in records:
                res = M.gt_agreement(M.cwri(M.class_means(r.test_attention, r.test_labels, n_classes)), gt)
                per.append({"fold": r.fold, "f1": res["f1"], "jaccard": res["jaccard"], "iacc": res["iacc"], "selected": res["selected"]})
            out["cwri_agreement"] = per
            for key in ("f1", "jaccard", "iacc"):
                out[key] = float(np.mean([p[key] for p in per]))
    return out


def build_report(paths: Sequence, out_dir, gt: GroundTruthMask | None = None) -> dict:
    """Read run dirs under ``paths`` and write the report files into ``out_dir``.

    Inputs are validated before anything is written, so a failure leaves no
    partial report behind.
    """
    run_dirs, roar_dirs = find_runs(paths)
    records = [read_run(d) for d in run_dirs]
    curve = read_roar(roar_dirs[0]) if roar_dirs else None
    gt = gt or _find_ground_truth(list(paths) + run_dirs)
    summary = summarize(records, curve, gt)
    summary["runs"] = [str(d) for d in run_dirs]
    summary["roar"] = str(roar_dirs[0]) if roar_dirs else None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    M.write_json(out / "report.json", summary)
    if records:
        names = records[0].feature_names
        write_gi_table(out / "gi_table.csv", records)
        n_classes = int(max(int(r.test_labels.max()) for r in records)) + 1
        scores = np.mean([M.cwri(M.class_means(r.test_attention, r.test_labels, n_classes)).scores for r in records], axis=0)
        write_matrix(out / "cwri_heatmap.csv", scores, names)
        for r in records:
            (out / f"gi_trajectory_fold{r.fold}.svg").write_text(gi_trajectory_svg(r.gi_trajectory, names, title=f"GI per epoch, fold {r.fold}"))
    if curve is not None:
        abc_val = M.abc(curve)
        with open(out / "roar_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["removed", "truth_acc", "inverse_acc"])
            for x, t, i in zip(curve.x, curve.truth_acc, curve.inverse_acc):
                w.writerow([int(x), repr(float(t)), repr(float(i))])
        (out / "roar.svg").write_text(roar_svg(curve, abc_val))
    return summary


def write_gi_table(path, records: Sequence[RunRecord]) -> None:
    names = records[0].feature_names
    gis = np.asarray([r.gi.gi for r in records])
    mean = gis.mean(axis=0)
    rank_pos = np.empty(len(names), dtype=np.int64)
    rank_pos[M.rank_descending(mean)] = np.arange(1, len(names) + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "rank", "gi_mean"] + [f"gi_fold{r.fold}" for r in records])
        for j, name in enumerate(names):
            w.writerow([name, int(rank_pos[j]), repr(float(mean[j]))] + [repr(float(g)) for g in gis[:, j]])


def write_matrix(path, scores: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + list(names))
        for c, row in enumerate(scores):
            w.writerow([c] + [repr(float(v)) for v in row])


# -- SVG ----------------------------------------------------------------------
_W, _H, _PAD = 640, 400, 50


def _scale(vals, lo, hi, a, b):
    span = (hi - lo) or 1.0
    return a + (np.asarray(vals, dtype=np.float64) - lo) / span * (b - a)


def _points(xs, ys) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def _frame(title: str, body: list[str], xlabel: str, ylabel: str) -> str:
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
            f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
            f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
            f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {_H / 2})">{escape(ylabel)}</text>',
            *body,
            "</svg>",
        ]
    )


def roar_svg(curve: M.RoarCurve, abc_value: float) -> str:
    ys_all = np.concatenate([curve.truth_acc, curve.inverse_acc])
    lo, hi = float(ys_all.min()), float(ys_all.max())
    px = _scale(curve.x, curve.x[0], curve.x[-1], _PAD, _W - _PAD)
    pt = _scale(curve.truth_acc, lo, hi, _H - _PAD, _PAD)
    pi = _scale(curve.inverse_acc, lo, hi, _H - _PAD, _PAD)
    area = _points(px, pi) + " " + _points(px[::-1], pt[::-1])
    body = [
        f'<polygon class="abc-area" points="{area}" fill="#9ecae1" fill-opacity="0.4" stroke="none"/>',
        f'<polyline id="truth" data-label="Truth" points="{_points(px, pt)}" fill="none" stroke="#d62728" stroke-width="2"/>',
        f'<polyline id="inverse" data-label="Inverse" points="{_points(px, pi)}" fill="none" stroke="#1f77b4" stroke-width="2"/>',
        f'<text x="{_W - _PAD - 90}" y="{_PAD + 10}" font-size="12" fill="#d62728">Truth</text>',
        f'<text x="{_W - _PAD - 90}" y="{_PAD + 26}" font-size="12" fill="#1f77b4">Inverse</text>',
        f'<text class="abc-label" x="{_PAD + 10}" y="{_PAD + 10}" font-size="12">ABC = {abc_value:.4f}</text>',
    ]
    return _frame("Remove and retrain", body, "features removed", "test accuracy")


def gi_trajectory_svg(traj: np.ndarray, names: Sequence[str], title: str = "GI per epoch") -> str:
    traj = np.asarray(traj, dtype=np.float64)
    if traj.size == 0:
        return _frame(title, [], "epoch", "GI")
    epochs = np.arange(1, traj.shape[0] + 1)
    lo, hi = float(traj.min()), float(traj.max())
    px = _scale(epochs, 1, max(epochs[-1], 2), _PAD, _W - _PAD)
    body = []
    for j, name in enumerate(names):
        py = _scale(traj[:, j], lo, hi, _H - _PAD, _PAD)
        colour = "#d62728" if name.startswith("pseudo_") else "#7f7f7f"
        body.append(
            f'<polyline data-label="{escape(name)}" points="{_points(px, py)}" fill="none" stroke="{colour}" stroke-width="1"/>'
        )
    return _frame(title, body, "epoch", "GI")
