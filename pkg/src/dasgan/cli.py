"""Command-line entry point: synth, ck-segment, train, predict, score, evaluate.

Every run writes its effective configuration and a versioned run manifest
into the output directory so results are reproducible from the directory
alone. Domain errors exit with code 1 and a single machine-parsable line;
usage errors exit with code 2 (click's default).
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import __version__
from .ck import condition_masks, default_stain_matrix, load_stain_matrix, segment_ck
from .data import (
    Domain,
    save_mask,
    save_overlay,
    save_split,
    load_mask,
    load_patch,
    load_split,
)
from .errors import DasganError, InvalidInputError, NoEpitheliumError
from .evaluate import (
    DEFAULT_OVERLAP,
    DEFAULT_TILE,
    REPORTED_CLASSES,
    build_tc_report,
    confusion_counts,
    f1_from_counts,
    f1_scores,
    predict_mask,
    tc_score,
)
from .losses import LossWeights
from .networks import DiscriminatorSpec, GeneratorSpec, load_segmentation_model
from .plots import plot_concordance, plot_f1_bars, plot_loss_curves, plot_tc_bins
from .synth import SplitSizes, SynthConfig, make_splits
from .training import TrainConfig, train

OUT_ROOT_ENV = "DASGAN_OUT_ROOT"
RUN_MANIFEST_VERSION = 1

_MODE_NAMES = {
    "dasgan": "dasgan",
    "seg-real": "seg_only_real",
    "seg-synth": "seg_only_synth",
    "two-step": "two_step",
}


def _resolve_out(out: str | None, command: str) -> Path:
    if out:
        path = Path(out)
    else:
        root = os.environ.get(OUT_ROOT_ENV)
        if not root:
            raise click.UsageError(
                f"no --out given and {OUT_ROOT_ENV} is not set")
        path = Path(root) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_files(out_dir: Path, command: str, config: dict, outputs: list) -> None:
    (out_dir / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True, default=str))
    manifest = {
        "format_version": RUN_MANIFEST_VERSION,
        "tool_version": __version__,
        "command": command,
        "outputs": sorted(outputs),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def _domain_errors_exit_1(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DasganError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Stain translation and epithelium segmentation pipeline."""


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command("synth")
@click.option("--out", type=click.Path(), default=None, help="Output dataset directory.")
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--patch-size", type=int, default=64, show_default=True)
@click.option("--n-train-a", type=int, default=160, show_default=True)
@click.option("--n-train-b", type=int, default=160, show_default=True)
@click.option("--n-test", type=int, default=16, show_default=True)
@click.option("--n-validation", type=int, default=24, show_default=True)
@click.option("--annotation-fraction", type=float, default=1.0, show_default=True,
              help="Fraction of domain-A training masks kept annotated.")
@click.option("--positive-fraction", type=float, default=0.5, show_default=True)
@click.option("--distractor-density", type=float, default=10.0, show_default=True)
@click.option("--noise-sigma", type=float, default=0.015, show_default=True)
@_domain_errors_exit_1
def synth_cmd(out, seed, patch_size, n_train_a, n_train_b, n_test, n_validation,
              annotation_fraction, positive_fraction, distractor_density, noise_sigma):
    """Generate the two synthetic stain domains with exact masks."""
    out_dir = _resolve_out(out, "synth")
    config = SynthConfig(patch_size=patch_size, seed=seed,
                         positive_fraction=positive_fraction,
                         distractor_density=distractor_density, noise_sigma=noise_sigma)
    sizes = SplitSizes(train_a=n_train_a, train_b=n_train_b, test=n_test,
                       validation=n_validation, annotation_fraction=annotation_fraction)
    split = make_splits(config, sizes)
    save_split(split, out_dir)
    outputs = ["manifest.csv", "train_a", "train_b", "test", "validation"]
    _write_run_files(out_dir, "synth",
                     {"synth": asdict(config), "sizes": asdict(sizes)}, outputs)
    click.echo(f"wrote dataset to {out_dir}")


# ---------------------------------------------------------------------------
# ck-segment
# ---------------------------------------------------------------------------

def _plain_pngs(directory: Path) -> list:
    skip = ("_mask", "_neg", "_pos", "_pred", "_overlay")
    return sorted(p for p in directory.glob("*.png")
                  if not any(p.stem.endswith(s) for s in skip))


@main.command("ck-segment")
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of CK-like patch PNGs.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--stain-matrix", type=click.Path(exists=True), default=None,
              help="Text file with 3 rows x 3 stain vectors.")
@click.option("--close-radius", type=int, default=2, show_default=True)
@click.option("--on-blank", type=click.Choice(["empty", "error"]), default="empty",
              show_default=True)
@_domain_errors_exit_1
def ck_segment_cmd(input_dir, out, stain_matrix, close_radius, on_blank):
    """Label epithelium on CK patches and emit both conditioned mask variants."""
    out_dir = _resolve_out(out, "ck-segment")
    stains = load_stain_matrix(stain_matrix) if stain_matrix else default_stain_matrix()
    outputs = []
    for path in _plain_pngs(Path(input_dir)):
        patch = load_patch(path, Domain.B)
        binary = segment_ck(patch, stains, close_radius=close_radius, on_blank=on_blank)
        negative, positive = condition_masks(binary)
        for mask, suffix in ((negative, "mask"), (negative, "neg"), (positive, "pos")):
            name = f"{path.stem}_{suffix}.png"
            save_mask(mask, out_dir / name)
            outputs.append(name)
    config = {"input": str(input_dir), "close_radius": close_radius, "on_blank": on_blank,
              "stain_matrix": stains.vectors.tolist()}
    _write_run_files(out_dir, "ck-segment", config, outputs)
    click.echo(f"segmented {len(outputs) // 3} patches into {out_dir}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_train_config(config_file, overrides: dict, out_dir: Path) -> TrainConfig:
    base: dict = {}
    if config_file:
        base = json.loads(Path(config_file).read_text())
    base.update({k: v for k, v in overrides.items() if v is not None})
    weights = LossWeights(**base.pop("weights", {})) if "weights" in base else LossWeights(
        lambda_cycle=base.pop("lambda_cycle", 10.0), lambda_seg=base.pop("lambda_seg", 1.0))
    gen_spec = GeneratorSpec(**base.pop("gen_spec", {}))
    disc_spec = DiscriminatorSpec(**base.pop("disc_spec", {}))
    return TrainConfig(weights=weights, gen_spec=gen_spec, disc_spec=disc_spec,
                       out_dir=str(out_dir), **base)


@main.command("train")
@click.option("--mode", type=click.Choice(sorted(_MODE_NAMES)), default="dasgan",
              show_default=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Dataset directory with a split manifest.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None,
              help="JSON file with training-config fields; flags override it.")
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--g-lr", type=float, default=None)
@click.option("--d-lr", type=float, default=None)
@click.option("--lambda-cycle", type=float, default=None)
@click.option("--lambda-seg", type=float, default=None)
@click.option("--pool-size", type=int, default=None)
@click.option("--checkpoint-every", type=int, default=None)
@_domain_errors_exit_1
def train_cmd(mode, data_dir, out, config_file, iterations, batch_size, seed, g_lr, d_lr,
              lambda_cycle, lambda_seg, pool_size, checkpoint_every):
    """Train the joint model or one of the comparison baselines."""
    out_dir = _resolve_out(out, "train")
    overrides = {
        "mode": _MODE_NAMES[mode], "iterations": iterations, "batch_size": batch_size,
        "seed": seed, "g_lr": g_lr, "d_lr": d_lr, "pool_size": pool_size,
        "checkpoint_every": checkpoint_every,
    }
    if lambda_cycle is not None or lambda_seg is not None:
        overrides["weights"] = {
            "lambda_cycle": 10.0 if lambda_cycle is None else lambda_cycle,
            "lambda_seg": 1.0 if lambda_seg is None else lambda_seg,
        }
    config = _load_train_config(config_file, overrides, out_dir)
    data = load_split(data_dir)
    state = train(config, data)
    best = {"best_checkpoint": state.best_checkpoint, "best_f1": state.best_f1,
            "iterations": state.iteration}
    (out_dir / "best.json").write_text(json.dumps(best, indent=2))
    plot_loss_curves(out_dir / "training_log.csv", out_dir / "loss_curves.png")
    outputs = ["train_config.json", "training_log.csv", "checkpoints", "best.json",
               "loss_curves.png"]
    _write_run_files(out_dir, "train", asdict(config), outputs)
    click.echo(f"best checkpoint {state.best_checkpoint} (mean F1 {state.best_f1:.4f})")


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

@main.command("predict")
@click.option("--model", "model_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Checkpoint directory.")
@click.option("--input", "input_path", type=click.Path(exists=True), required=True,
              help="Image file or directory of PNGs.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--tile", type=int, default=DEFAULT_TILE, show_default=True)
@click.option("--overlap", type=int, default=DEFAULT_OVERLAP, show_default=True)
@_domain_errors_exit_1
def predict_cmd(model_dir, input_path, out, tile, overlap):
    """Tiled segmentation of PD-L1-like images: indexed masks plus overlays."""
    out_dir = _resolve_out(out, "predict")
    model = load_segmentation_model(model_dir)
    input_path = Path(input_path)
    files = _plain_pngs(input_path) if input_path.is_dir() else [input_path]
    outputs = []
    for path in files:
        patch = load_patch(path, Domain.A)
        mask = predict_mask(model, patch, tile=tile, overlap=overlap)
        pred_name, overlay_name = f"{path.stem}_pred.png", f"{path.stem}_overlay.png"
        save_mask(mask, out_dir / pred_name)
        save_overlay(mask, out_dir / overlay_name)
        outputs += [pred_name, overlay_name]
    config = {"model": str(model_dir), "input": str(input_path), "tile": tile,
              "overlap": overlap}
    _write_run_files(out_dir, "predict", config, outputs)
    click.echo(f"predicted {len(files)} images into {out_dir}")


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

@main.command("score")
@click.option("--masks", "mask_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of indexed mask PNGs.")
@click.option("--out", type=click.Path(), default=None)
@_domain_errors_exit_1
def score_cmd(mask_dir, out):
    """Per-image TC scores (percent) from predicted masks."""
    out_dir = _resolve_out(out, "score")
    rows = []
    for path in sorted(Path(mask_dir).glob("*.png")):
        if path.stem.endswith("_overlay"):
            continue
        mask = load_mask(path, Domain.A)
        image_id = path.stem.removesuffix("_pred").removesuffix("_mask")
        try:
            rows.append((image_id, f"{100.0 * tc_score(mask):.4f}", ""))
        except NoEpitheliumError:
            rows.append((image_id, "", "no-epithelium"))
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "tc_percent", "note"))
        writer.writerows(rows)
    _write_run_files(out_dir, "score", {"masks": str(mask_dir)}, ["scores.csv"])
    click.echo(f"scored {len(rows)} masks into {out_dir}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _pair_mask_files(pred_dir: Path, truth_dir: Path) -> list:
    truths = {}
    for path in sorted(truth_dir.glob("*.png")):
        if path.stem.endswith("_mask"):
            truths[path.stem.removesuffix("_mask")] = path
        elif not any(path.stem.endswith(s) for s in ("_pred", "_overlay", "_neg", "_pos")):
            truths.setdefault(path.stem, path)
    pairs = []
    for path in sorted(pred_dir.glob("*_pred.png")):
        image_id = path.stem.removesuffix("_pred")
        if image_id in truths:
            pairs.append((image_id, path, truths[image_id]))
    if not pairs:
        raise InvalidInputError("no (prediction, truth) pairs matched by id")
    return pairs


@main.command("evaluate")
@click.option("--pred", "pred_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of *_pred.png masks.")
@click.option("--truth", "truth_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of ground-truth masks.")
@click.option("--out", type=click.Path(), default=None)
@_domain_errors_exit_1
def evaluate_cmd(pred_dir, truth_dir, out):
    """F1 tables, TC concordance and bin report, with rendered figures."""
    out_dir = _resolve_out(out, "evaluate")
    pairs = _pair_mask_files(Path(pred_dir), Path(truth_dir))

    totals = {cls: [0, 0, 0] for cls in (*REPORTED_CLASSES, "tc")}
    f1_rows, scored = [], []
    for image_id, pred_path, truth_path in pairs:
        pred = load_mask(pred_path, Domain.A)
        truth = load_mask(truth_path, Domain.A)
        scores = f1_scores(pred, truth)
        f1_rows.append([image_id] + [f"{scores[k]:.6f}" for k in
                                     (*REPORTED_CLASSES, "tc", "mean")])
        for cls, (tp, fp, fn) in confusion_counts(pred, truth).items():
            totals[cls][0] += tp
            totals[cls][1] += fp
            totals[cls][2] += fn
        try:
            pred_tc = 100.0 * tc_score(pred)
        except NoEpitheliumError:
            pred_tc = 0.0
        try:
            true_tc = 100.0 * tc_score(truth)
        except NoEpitheliumError:
            true_tc = None
        scored.append((image_id, pred_tc, true_tc))

    pooled = {cls: f1_from_counts(*totals[cls]) for cls in totals}
    pooled["mean"] = float(np.mean([pooled[c] for c in REPORTED_CLASSES]))
    with open(out_dir / "f1.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "other", "tc_neg", "tc_pos", "tc", "mean"))
        writer.writerows(f1_rows)
        writer.writerow(["pooled"] + [f"{pooled[k]:.6f}" for k in
                                      (*REPORTED_CLASSES, "tc", "mean")])

    report = build_tc_report(scored)
    with open(out_dir / "concordance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("lcc", "pcc", "mae"))
        writer.writerow((f"{report.lcc:.6f}", f"{report.pcc:.6f}", f"{report.mae:.6f}"))
    with open(out_dir / "bins.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("bin", "count", "mean", "std"))
        for b in report.bins:
            writer.writerow((b.label, b.count,
                             "" if b.mean is None else f"{b.mean:.4f}",
                             "" if b.std is None else f"{b.std:.4f}"))

    plot_f1_bars(pooled, out_dir / "f1_bars.png")
    plot_concordance(report.per_image, out_dir / "concordance_scatter.png")
    plot_tc_bins(report.bins, out_dir / "tc_bins.png")

    outputs = ["f1.csv", "concordance.csv", "bins.csv", "f1_bars.png",
               "concordance_scatter.png", "tc_bins.png"]
    _write_run_files(out_dir, "evaluate",
                     {"pred": str(pred_dir), "truth": str(truth_dir)}, outputs)
    click.echo(f"mean F1 {pooled['mean']:.4f}  Lcc {report.lcc:.4f}  "
               f"Pcc {report.pcc:.4f}  MAE {report.mae:.2f}")


if __name__ == "__main__":
    main()
