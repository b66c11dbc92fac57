"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Options may also come from a flat JSON file given with ``--config``; explicit
flags win over the file, which wins over built-in defaults.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import harness as H
from . import metrics as M
from .encode import EncoderConfig, RpConfig, cache_dir, cache_key, encode_cached
from .model import BackboneConfig, DepCaConfig
from .report import ReportInputError, build_report, find_runs
from .synthgen import (
    CholeskyError,
    DatasetError,
    SquidGameConfig,
    gen_squidgame,
    inject_pseudo,
    parse_kinds,
    read_dataset,
    read_ground_truth,
    write_dataset,
)
from .tensor import NonFiniteError

log = logging.getLogger("cafo")

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 1, 2, 3

# option key -> type; the same keys are accepted in --config files
_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lambda": float,
    "seed": int,
    "weight_decay": float,
    "folds": int,
    "workers": int,
    "qr_orientation": str,
    "encoder": str,
    "rp_tau": int,
    "rp_m": int,
    "rp_eps_frac": float,
    "gamma": int,
    "kernel_size": int,
    "depca_stride": int,
}


def _train_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(dir_okay=False), help="Flat JSON file of option values."),
        click.option("--epochs", type=int),
        click.option("--batch-size", type=int),
        click.option("--lr", type=float),
        click.option("--lambda", "lambda_", type=float, help="Weight of the orthogonality loss."),
        click.option("--seed", type=int),
        click.option("--weight-decay", type=float),
        click.option("--folds", type=int),
        click.option("--workers", type=int, help="Parallel training processes."),
        click.option("--qr-orientation", type=click.Choice(["auto", "columns", "rows"])),
        click.option("--encoder", type=click.Choice(["rp", "gaf"])),
        click.option("--rp-tau", type=int),
        click.option("--rp-m", type=int),
        click.option("--rp-eps-frac", type=float),
        click.option("--gamma", type=int, help="Depthwise filters per feature."),
        click.option("--kernel-size", type=int),
        click.option("--depca-stride", type=int),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file does not exist: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise click.UsageError(f"{p}: expected a JSON object")
    out = {}
    for k, v in raw.items():
        key = k.replace("-", "_")
        if key not in _TRAIN_KEYS:
            raise click.UsageError(f"{p}: unknown option {k!r}")
        out[key] = _TRAIN_KEYS[key](v)
    return out


def build_train_config(flags: dict) -> H.TrainConfig:
    """Merge defaults, the optional JSON file and explicit flags."""
    merged = _load_config_file(flags.get("config_file"))
    for k in _TRAIN_KEYS:
        v = flags.get("lambda_" if k == "lambda" else k)
        if v is not None:
            merged[k] = v
    base = H.TrainConfig()
    rp = base.encoder.rp
    rp = RpConfig(
        tau=merged.get("rp_tau", rp.tau),
        m=merged.get("rp_m", rp.m),
        epsilon_fraction=merged.get("rp_eps_frac", rp.epsilon_fraction),
    )
    enc = EncoderConfig(kind=merged.get("encoder", base.encoder.kind), rp=rp)
    dep = DepCaConfig(
        gamma=merged.get("gamma", base.depca.gamma),
        kernel_size=merged.get("kernel_size", base.depca.kernel_size),
        stride=merged.get("depca_stride", base.depca.stride),
    )
    simple = {k: merged[k] for k in ("epochs", "batch_size", "lr", "seed", "weight_decay", "folds", "workers", "qr_orientation") if k in merged}
    if "lambda" in merged:
        simple["lam"] = merged["lambda"]
    return replace(base, encoder=enc, depca=dep, backbone=BackboneConfig(), **simple)


def _train_config(flags: dict) -> H.TrainConfig:
    try:
        return build_train_config(flags)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _dataset(path):
    return read_dataset(path)


def _copy_ground_truth(data, out: Path) -> None:
    src = Path(data) / "ground_truth.json"
    if src.exists():
        shutil.copyfile(src, out / "ground_truth.json")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def cli(verbose):
    """Feature-centric explanations for multivariate time-series classifiers."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command()
@click.argument("kind", type=click.Choice(["squidgame"]))
@click.option("--n-per-class", type=int, default=SquidGameConfig.n_per_class, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--noise-sigma", type=float, default=SquidGameConfig.noise_sigma, show_default=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def generate(kind, n_per_class, seed, noise_sigma, folds, out):
    """Generate a synthetic benchmark with a known ground truth."""
    if n_per_class < 1:
        raise click.BadParameter("must be >= 1", param_hint="--n-per-class")
    try:
        cfg = SquidGameConfig(n_per_class=n_per_class, seed=seed, noise_sigma=noise_sigma, folds=folds)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    ds, gt = gen_squidgame(cfg)
    write_dataset(ds, out, gt)
    click.echo(f"wrote {kind} to {out}: n={ds.n} t={ds.t} d={ds.d} classes={ds.n_classes}")


@cli.command("inject-pseudo")
@click.option("--data", type=click.Path(), required=True)
@click.option("--kinds", default="wn,sin,gp", show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def inject_pseudo_cmd(data, kinds, seed, out):
    """Append pseudo features (white noise, sinusoid, Gaussian process)."""
    try:
        kind_list = parse_kinds(kinds)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--kinds") from exc
    ds = _dataset(data)
    aug = inject_pseudo(ds, kind_list, seed=seed)
    write_dataset(aug, out)
    click.echo(f"wrote {out}: d={aug.d} ({', '.join(aug.feature_names[ds.d:]) or 'no pseudo features'})")


@cli.command()
@click.option("--data", type=click.Path(), required=True)
@click.option("--encoder", type=click.Choice(["rp", "gaf"]), default="rp", show_default=True)
@click.option("--rp-tau", type=int, default=1, show_default=True)
@click.option("--rp-m", type=int, default=1, show_default=True)
@click.option("--rp-eps-frac", type=float, default=0.1, show_default=True)
def encode(data, encoder, rp_tau, rp_m, rp_eps_frac):
    """Encode a dataset into the on-disk cache."""
    try:
        cfg = EncoderConfig(kind=encoder, rp=RpConfig(tau=rp_tau, m=rp_m, epsilon_fraction=rp_eps_frac))
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    ds = _dataset(data)
    arr = encode_cached(ds.X, cfg)
    path = cache_dir() / f"enc-{cache_key(ds.X, cfg)}.npy"
    click.echo(f"{path} shape={tuple(arr.shape)} dtype={arr.dtype}")


@cli.command()
@click.option("--data", type=click.Path(), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--fold", type=int, default=0, show_default=True, help="Validation fold.")
@_train_options
def train(data, out, fold, **flags):
    """Train one model, validating on one fold."""
    cfg = _train_config(flags)
    ds = _dataset(data)
    tr, va, te = H.fold_indices(ds, fold)
    if tr.size == 0:
        raise DatasetError(f"no training instances outside fold {fold}")
    rec = H.train(ds, cfg, tr, va, te, fold=fold, run_dir=out)
    click.echo(f"fold {fold}: test_acc={rec.test_acc:.4f} val_offdiag={rec.val_offdiag:.4f} -> {out}")


@cli.command()
@click.option("--data", type=click.Path(), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_train_options
def cv(data, out, **flags):
    """Cross-validate: one run dir per fold plus an aggregate report.json."""
    cfg = _train_config(flags)
    ds = _dataset(data)
    gt = read_ground_truth(data)
    out = Path(out)
    recs = H.cross_validate(ds, cfg, out)
    summary = H.cv_summary(recs, ds.n_classes, gt)
    _copy_ground_truth(data, out)
    M.write_json(out / "report.json", summary)
    rows = [{"run": "cv", "fold": r.fold, "metric": "test_acc", "value": r.test_acc} for r in recs]
    rows += [{"run": "cv", "fold": r.fold, "metric": "val_offdiag", "value": r.val_offdiag} for r in recs]
    M.write_metric_rows(out / "summary.csv", rows)
    msg = f"{len(recs)} folds: mean test_acc={np.mean(summary['test_acc']):.4f}"
    if "f1" in summary:
        msg += f" cwri_f1={summary['f1']:.4f}"
    click.echo(msg)


@cli.command()
@click.option("--data", type=click.Path(), required=True)
@click.option("--gi-from", type=click.Path(), required=True, help="Cross-validation output whose GI sets the removal order.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_train_options
def roar(data, gi_from, out, **flags):
    """Remove features by GI rank and retrain (2*D runs)."""
    cfg = _train_config(flags)
    ds = _dataset(data)
    run_dirs, _ = find_runs([gi_from])
    if not run_dirs:
        raise ReportInputError(f"{gi_from}: no training runs to take GI from")
    recs = [H.read_run(d) for d in run_dirs]
    if recs[0].feature_names != list(ds.feature_names):
        raise DatasetError("GI runs were trained on different features than --data")
    rank = H.rank_from_runs(recs)
    out = Path(out)
    curve = H.roar(ds, cfg, rank, out)
    summary = H.roar_summary(curve)
    summary["gi_rank"] = rank.tolist()
    M.write_json(out / "report.json", summary)
    click.echo(f"abc={summary['abc']:.4f} da={summary['da']:.2f}% wda={summary['wda']:.4f}")


@cli.command()
@click.option("--data", type=click.Path(), required=True)
@click.option("--kinds", default="wn,sin,gp", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_train_options
def pseudo(data, kinds, out, **flags):
    """Inject pseudo features, cross-validate and track their GI per epoch."""
    try:
        kind_list = parse_kinds(kinds)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--kinds") from exc
    cfg = _train_config(flags)
    ds = _dataset(data)
    out = Path(out)
    res = H.pseudo_experiment(ds, cfg, kind_list, out)
    bottom = res.in_bottom(0.2)
    M.write_json(
        out / "pseudo.json",
        {
            "feature_names": res.feature_names,
            "pseudo_idx": res.pseudo_idx,
            "final_ranks": [r.tolist() for r in res.final_ranks()],
            "in_bottom_20pct": bottom,
            "trajectories": [t.tolist() for t in res.trajectories],
        },
    )
    click.echo(f"pseudo features in bottom 20% on {sum(bottom)}/{len(bottom)} folds")


@cli.command()
@click.option("--data", type=click.Path(), required=True)
@click.option("--lambdas", default="0,0.1,0.2,0.5,1.0", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_train_options
def sweep(data, lambdas, out, **flags):
    """Cross-validate for every lambda in a list."""
    try:
        lams = [float(v) for v in lambdas.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--lambdas") from exc
    if not lams:
        raise click.BadParameter("empty list", param_hint="--lambdas")
    cfg = _train_config(flags)
    ds = _dataset(data)
    out = Path(out)
    table = H.lambda_sweep(ds, cfg, lams, read_ground_truth(data), out)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(table[0].keys())
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in table:
            w.writerow([repr(float(row[c])) for c in cols])
    for row in table:
        click.echo(" ".join(f"{k}={v:.4f}" for k, v in row.items()))


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--data", type=click.Path(), help="Dataset holding ground_truth.json, if not beside the runs.")
def report(run_dirs, out, data):
    """Tables, report.json and SVG plots from run directories."""
    gt = read_ground_truth(data) if data else None
    summary = build_report(run_dirs, out, gt)
    click.echo(" ".join(f"{k}={summary[k]:.4f}" for k in ("abc", "da", "wda", "spearman", "kendall", "f1", "jaccard", "iacc") if summary[k] is not None) or "report written")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="cafo", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except (FileNotFoundError, DatasetError, CholeskyError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (H.TrainingDiverged, NonFiniteError, RuntimeError, MemoryError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
