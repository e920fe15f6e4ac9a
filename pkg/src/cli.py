"""
Command-line surface: gen-data, train, eval, predict, export-roc, ablation.

Library code raises FibrosisError subclasses; ``main`` turns them (and
OSError) into a message on standard error and exit status 1. Results go to
standard output, progress logging to standard error.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
import time
from collections import Counter
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ABLATION_METRICS_NAME,
    ABLATION_ROWS,
    CHECKPOINT_NAME,
    CONFIG_ECHO_NAME,
    CONFOUNDER_MODES,
    DATA_DIR,
    EVAL_ECHO_TEMPLATE,
    EXPORT_ECHO_NAME,
    FUSION_VARIANTS,
    HISTORY_NAME,
    METRICS_COLUMNS,
    MODEL_VARIANTS,
    NORM_KINDS,
    NUM_VIEWS,
    PREDICTIONS_TEMPLATE,
    ROC_FOLD_TEMPLATE,
    ROC_GRID_POINTS,
    ROC_LEGEND_NAME,
    RUN_LOG_NAME,
    STUDY_FRAGMENT_NAME,
    THREADS,
)
from .dataset import Study, patients_of
from .errors import ConfigError, FibrosisError, ManifestError, MetricError
from .evaluation import (
    MetricsReport,
    Prediction,
    auc,
    cross_fold_mean,
    evaluate_scores,
    mean_roc,
    partial_auc,
    read_metrics_csv,
    read_roc_csv,
    tpr_on_grid,
    write_mean_roc_csv,
    write_metrics_csv,
    write_predictions_csv,
    write_roc_csv,
)
from .excel_report import build_metrics_workbook
from .model import FibrosisModel, batch_scores, score_study
from .phantom import generate_corpus
from .run_config import RunConfig, echo_settings, settings_text
from .store import load_manifest, save_dataset
from .tensor import no_grad
from .training import (
    FoldSplit,
    TrainConfig,
    read_history,
    split_folds,
    studies_for,
    train,
    write_history,
)

logger = logging.getLogger("fibrosis-fusion")

_ROC_FOLD_FILE = re.compile(r"^roc_fold(\d+)\.csv$")


def setup_logging(verbose: bool = False, log_dir: Path | None = None) -> None:
    """Configure logging to standard error and, with ``log_dir``, to ``run.log`` there."""
    level = logging.DEBUG if verbose else logging.INFO
    fmt = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / RUN_LOG_NAME, encoding="utf-8"))
    logging.basicConfig(level=level, format=fmt, handlers=handlers, force=True)


def _banner(title: str) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


def _require(value: str, what: str) -> Path:
    if not value:
        raise ConfigError(f"{what} is required")
    return Path(value)


def _log_text(text: str) -> None:
    for line in text.splitlines():
        if line:
            logger.info("  %s", line)


def _log_config(cfg: RunConfig) -> None:
    _log_text(cfg.to_text())


def _manifest_path(cfg: RunConfig, args: argparse.Namespace) -> Path:
    """Manifest from the flag, or from the config file (relative to that file)."""
    manifest = _require(cfg.data.manifest, "--manifest")
    if args.manifest is None and args.config is not None and not manifest.is_absolute():
        manifest = args.config.parent / manifest
    return manifest


# ─── Shared steps ───────────────────────────────────────────────────────────

def _fold_studies(studies: list[Study], folds: int, fold: int, split_seed: int) -> tuple[FoldSplit, list[Study], list[Study], list[Study]]:
    if not 0 <= fold < folds:
        raise ConfigError(f"fold index {fold} must be in 0..{folds - 1}")
    split = split_folds(patients_of(studies), folds, split_seed)
    part = split[fold]
    return split, studies_for(studies, part.train), studies_for(studies, part.val), studies_for(studies, part.test)


def _warn_batch_stats(config: TrainConfig) -> None:
    if config.norm_kind == "batch" and config.model_variant in FUSION_VARIANTS:
        logger.warning(
            "%s with batch normalization mixes statistics of studies with different image counts; "
            "expect unstable training", config.model_variant,
        )


def score_studies(
    model: FibrosisModel,
    studies: Sequence[Study],
    view: int | None = None,
) -> tuple[list[Prediction], int]:
    """Study-level predictions; with ``view`` only that view's images are used and studies lacking it are skipped."""
    model.eval()
    kept: list[Study] = []
    subsets: list[list[int] | None] = []
    for study in studies:
        subset = None
        if view is not None:
            subset = [i for i, v in enumerate(study.views) if v == view]
            if not subset:
                continue
        kept.append(study)
        subsets.append(subset)
    scores = batch_scores(model, kept, subsets)
    predictions = [Prediction(s.study_id, s.patient_id, s.label, p) for s, p in zip(kept, scores)]
    return predictions, len(studies) - len(kept)


def _report(model: FibrosisModel, predictions: list[Prediction], fold: str, view: int | None, skipped: int) -> MetricsReport:
    if not predictions:
        raise MetricError("no studies left to evaluate")
    return evaluate_scores(
        [p.probability for p in predictions],
        [p.label for p in predictions],
        fold=fold,
        variant=model.variant,
        norm=model.config.norm_kind,
        view=view,
        skipped=skipped,
    )


# ─── Commands ───────────────────────────────────────────────────────────────

def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config).override({
        "data.studies": args.studies,
        "data.seed": args.seed,
        "data.min_images": args.min_images,
        "data.max_images": args.max_images,
        "data.confounder": args.confounder,
        "output.out": args.out,
    })
    out = Path(cfg.output.out) if cfg.output.out else DATA_DIR / "synthetic"
    setup_logging(args.verbose)
    d = cfg.data
    if d.confounder not in CONFOUNDER_MODES:
        raise ConfigError(f"confounder must be one of {CONFOUNDER_MODES}, got {d.confounder!r}")

    started = time.time()
    _banner(f"Generating {d.studies} synthetic studies (seed {d.seed})")
    try:
        studies = generate_corpus(
            d.studies, d.seed, d.min_images, d.max_images, d.confounder,
            size=(cfg.backbone.input_size[0], cfg.backbone.input_size[1]), threads=THREADS,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = save_dataset(studies, out)
    # paths relative to the corpus directory
    cfg.output.out = "."
    cfg.data.manifest = manifest.name
    cfg.echo(out, CONFIG_ECHO_NAME)

    records = [line for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    expected = sum(s.k for s in studies)
    if len(records) != expected:
        raise ManifestError(f"manifest has {len(records)} records, expected {expected}")

    counts = [s.k for s in studies]
    views = Counter(v for s in studies for v in s.views)
    positives = sum(s.label for s in studies)
    print(f"manifest\t{manifest}")
    print(f"studies\t{len(studies)}")
    print(f"patients\t{len(patients_of(studies))}")
    print(f"images\t{expected}")
    print(f"positive\t{positives}")
    print(f"negative\t{len(studies) - positives}")
    print(f"images_per_study\tmin={min(counts)} mean={np.mean(counts):.2f} max={max(counts)}")
    print("views\t" + " ".join(f"{v}:{views.get(v, 0)}" for v in range(1, NUM_VIEWS + 1)))
    logger.info("Done in %.1f seconds", time.time() - started)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config).override({
        "data.manifest": args.manifest,
        "data.seed": args.split_seed,
        "train.variant": args.variant,
        "train.norm": args.norm,
        "train.fold": args.fold,
        "train.folds": args.folds,
        "train.epochs": args.epochs,
        "train.lr": args.lr,
        "train.seed": args.seed,
        "train.batch_size": args.batch_size,
        "train.augment": False if args.no_augment else None,
        "output.out": args.out,
    })
    manifest = _manifest_path(cfg, args)
    out = _require(cfg.output.out, "--out")
    setup_logging(args.verbose, out)
    train_cfg = cfg.train_config()
    backbone = cfg.backbone_config()

    started = time.time()
    _banner(f"Training {train_cfg.model_variant}/{train_cfg.norm_kind}, fold {cfg.train.fold}/{cfg.train.folds}")
    _log_config(cfg)
    _warn_batch_stats(train_cfg)

    logger.info("Step 1/3: Loading %s", manifest)
    studies = load_manifest(manifest, backbone.input_size)
    _, train_set, val_set, test_set = _fold_studies(studies, cfg.train.folds, cfg.train.fold, cfg.data.seed)
    logger.info("Split: %d train / %d val / %d test studies", len(train_set), len(val_set), len(test_set))

    logger.info("Step 2/3: Training for %d epochs", train_cfg.epochs)
    result = train(train_set, val_set, train_cfg, backbone)

    logger.info("Step 3/3: Writing artifacts to %s", out)
    checkpoint = out / CHECKPOINT_NAME
    save_checkpoint(result.model, checkpoint, extra={
        "folds": cfg.train.folds,
        "fold": cfg.train.fold,
        "split_seed": cfg.data.seed,
        "seed": train_cfg.seed,
        "epochs": train_cfg.epochs,
        "lr": train_cfg.lr,
        "best_epoch": result.best_epoch,
    })
    write_history(result.history, out / HISTORY_NAME)
    cfg.echo(out, CONFIG_ECHO_NAME)

    load_checkpoint(checkpoint)
    if len(read_history(out / HISTORY_NAME)) != train_cfg.epochs:
        raise FibrosisError("history file does not hold one row per epoch")
    logger.info("Done in %.1f seconds (best epoch %d)", time.time() - started, result.best_epoch)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    setup_logging(args.verbose)
    if args.single_view is not None and not 1 <= args.single_view <= NUM_VIEWS:
        raise ConfigError(f"--single-view must be in 1..{NUM_VIEWS}, got {args.single_view}")
    model, meta = load_checkpoint(args.checkpoint)
    folds = int(meta.get("folds", 5))
    fold = args.fold if args.fold is not None else int(meta.get("fold", 0))
    split_seed = int(meta.get("split_seed", 0))
    out: Path = args.out
    tag = "" if args.single_view is None else f"_view{args.single_view}"
    settings = {
        "checkpoint": args.checkpoint,
        "manifest": args.manifest,
        "variant": model.variant,
        "norm": model.config.norm_kind,
        "folds": folds,
        "fold": fold,
        "split_seed": split_seed,
        "single_view": args.single_view,
        "out": out,
    }
    _banner(f"Evaluating {model.variant}/{model.config.norm_kind} on fold {fold}")
    _log_text(settings_text("eval", settings))

    studies = load_manifest(args.manifest, model.config.input_size)
    _, _, _, test_set = _fold_studies(studies, folds, fold, split_seed)
    if not test_set:
        raise MetricError(f"fold {fold} has an empty test split")
    predictions, skipped = score_studies(model, test_set, args.single_view)
    if skipped:
        logger.warning("Skipped %d studies without view %d", skipped, args.single_view)
    report = _report(model, predictions, str(fold), args.single_view, skipped)

    write_metrics_csv([report], out)
    echo_settings(out.parent / EVAL_ECHO_TEMPLATE.format(fold=fold, tag=tag), "eval", settings)
    assert report.roc is not None
    write_roc_csv(report.roc, out.parent / ROC_FOLD_TEMPLATE.format(fold=fold, tag=tag))
    write_predictions_csv(predictions, out.parent / PREDICTIONS_TEMPLATE.format(fold=fold, tag=tag))

    rows = read_metrics_csv(out)
    if len(rows) != 1:
        raise MetricError(f"{out} should hold one row, found {len(rows)}")
    print(",".join(rows[0].values()))
    logger.info("AUC %.4f | pAUC@0.3 %.4f | %d studies scored, %d skipped",
                report.auc, report.partial_auc, len(predictions), skipped)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    setup_logging(args.verbose)
    model, _ = load_checkpoint(args.checkpoint)
    fragment = args.study_dir / STUDY_FRAGMENT_NAME
    studies = load_manifest(fragment, model.config.input_size)
    if len(studies) != 1:
        raise ManifestError(f"{fragment} must describe exactly one study, found {len(studies)}")
    study = studies[0]
    _banner(f"Predicting study {study.study_id}")
    _log_text(settings_text("predict", {
        "checkpoint": args.checkpoint,
        "study_dir": args.study_dir,
        "variant": model.variant,
        "norm": model.config.norm_kind,
        "images": study.k,
        "views": study.views,
    }))

    model.eval()
    with no_grad():
        probability = score_study(model, study)
        pooled = model.pool(study.images).data
        per_image = None if model.fuses else [float(p) for p in model.forward_groups([study.images]).data]
    winners = np.bincount(np.argmax(pooled, axis=0), minlength=study.k)

    print("study_id\tprobability")
    print(f"{study.study_id}\t{probability:.6f}")
    print("image\tview\tpooled_norm\tmax_channels" + ("" if per_image is None else "\tprobability"))
    for i, item in enumerate(study.images):
        line = f"{i}\t{item.view}\t{np.linalg.norm(pooled[i]):.6f}\t{winners[i]}"
        if per_image is not None:
            line += f"\t{per_image[i]:.6f}"
        print(line)
    return 0


def cmd_export_roc(args: argparse.Namespace) -> int:
    setup_logging(args.verbose)
    metrics_dir: Path = args.metrics_dir
    out: Path = args.out
    if not metrics_dir.is_dir():
        raise MetricError(f"metrics directory not found: {metrics_dir}")
    found = sorted(
        (int(m.group(1)), path) for path in metrics_dir.iterdir() if (m := _ROC_FOLD_FILE.match(path.name))
    )
    if not found:
        raise MetricError(f"no roc_fold<k>.csv files in {metrics_dir}")
    settings = {
        "metrics_dir": metrics_dir,
        "out": out,
        "folds": [fold for fold, _ in found],
        "grid_points": ROC_GRID_POINTS,
    }
    _banner(f"Exporting ROC data for {len(found)} folds")
    _log_text(settings_text("export-roc", settings))

    curves = {fold: read_roc_csv(path) for fold, path in found}
    mean = mean_roc(list(curves.values()))
    write_mean_roc_csv(mean, out)

    target = out.parent
    if target.resolve() != metrics_dir.resolve():
        for fold, curve in curves.items():
            write_roc_csv(curve, target / ROC_FOLD_TEMPLATE.format(fold=fold, tag=""))

    legend = target / ROC_LEGEND_NAME
    with legend.open("w", encoding="utf-8", newline="") as handle:
        handle.write("fold,pauc30,auc\n")
        for fold, curve in curves.items():
            handle.write(f"{fold},{partial_auc(curve):.12g},{auc(curve):.12g}\n")

    rows: list[dict[str, str]] = []
    for path in sorted(metrics_dir.glob("*.csv")):
        if _ROC_FOLD_FILE.match(path.name) or path.resolve() == out.resolve():
            continue
        table = read_metrics_csv(path)
        if table and list(table[0])[:len(METRICS_COLUMNS)] == METRICS_COLUMNS:
            rows.extend(table)
    if not rows:
        rows = [
            {"fold": str(fold), "auc": f"{auc(c):.12g}", "pauc30": f"{partial_auc(c):.12g}"}
            for fold, c in curves.items()
        ]
    fold_tpr = {f"Fold {fold}": tpr_on_grid(c, mean.fpr) for fold, c in curves.items()}
    build_metrics_workbook(rows, mean, out.with_suffix(".xlsx"), fold_tpr)
    echo_settings(target / EXPORT_ECHO_NAME, "export-roc", settings)

    written = read_metrics_csv(out)
    if len(written) != ROC_GRID_POINTS:
        raise MetricError(f"{out} holds {len(written)} rows, expected {ROC_GRID_POINTS}")
    print(f"mean_roc\t{out}")
    print(f"legend\t{legend}")
    return 0


def cmd_ablation(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config).override({
        "data.manifest": args.manifest,
        "data.seed": args.split_seed,
        "train.folds": args.folds,
        "train.epochs": args.epochs,
        "train.seed": args.seed,
        "output.out": args.out,
    })
    manifest = _manifest_path(cfg, args)
    out = _require(cfg.output.out, "--out")
    setup_logging(args.verbose, out)
    started = time.time()
    _banner(f"Ablation over {len(ABLATION_ROWS)} model rows × {cfg.train.folds} folds")
    _log_config(cfg)

    backbone_shape = cfg.backbone_config()
    studies = load_manifest(manifest, backbone_shape.input_size)
    reports: list[MetricsReport] = []
    for row_index, (variant, norm) in enumerate(ABLATION_ROWS, start=1):
        cfg.train.variant, cfg.train.norm = variant, norm
        train_cfg = cfg.train_config()
        backbone = cfg.backbone_config()
        _warn_batch_stats(train_cfg)
        row_dir = out / f"{variant}_{norm}"
        per_fold: list[MetricsReport] = []
        for fold in range(cfg.train.folds):
            logger.info("Step %d/%d: %s/%s fold %d", row_index, len(ABLATION_ROWS), variant, norm, fold)
            _, train_set, val_set, test_set = _fold_studies(studies, cfg.train.folds, fold, cfg.data.seed)
            result = train(train_set, val_set, train_cfg, backbone)
            predictions, _ = score_studies(result.model, test_set)
            report = _report(result.model, predictions, str(fold), None, 0)
            assert report.roc is not None
            write_roc_csv(report.roc, row_dir / ROC_FOLD_TEMPLATE.format(fold=fold, tag=""))
            write_history(result.history, row_dir / f"history_fold{fold}.csv")
            per_fold.append(report)
        reports.extend(per_fold)
        reports.append(cross_fold_mean(per_fold))

    cfg.echo(out, CONFIG_ECHO_NAME)
    metrics = out / ABLATION_METRICS_NAME
    write_metrics_csv(reports, metrics)
    if len(read_metrics_csv(metrics)) != len(reports):
        raise MetricError(f"{metrics} does not hold every ablation row")
    for report in reports:
        if report.fold == "mean":
            print(f"{report.variant}\t{report.norm}\tauc={report.auc:.4f}\tpauc30={report.partial_auc:.4f}")
    logger.info("Done in %.1f seconds", time.time() - started)
    return 0


# ─── Parser ─────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fibrosis-fusion",
        description="Liver fibrosis assessment from multi-view ultrasound studies",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic phantom corpus")
    gen.add_argument("--config", type=Path, help="INI run configuration")
    gen.add_argument("--out", help="Output directory (default: data/synthetic)")
    gen.add_argument("--studies", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--min-images", type=int)
    gen.add_argument("--max-images", type=int)
    gen.add_argument("--confounder", choices=CONFOUNDER_MODES)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="Train one model on one cross-validation fold")
    tr.add_argument("--config", type=Path, help="INI run configuration")
    tr.add_argument("--manifest")
    tr.add_argument("--variant", choices=MODEL_VARIANTS)
    tr.add_argument("--norm", choices=NORM_KINDS)
    tr.add_argument("--fold", type=int)
    tr.add_argument("--folds", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--split-seed", type=int, help="Seed of the patient-level fold split")
    tr.add_argument("--no-augment", action="store_true", help="Disable data augmentation")
    tr.add_argument("--out")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on its fold's test split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--fold", type=int)
    ev.add_argument("--out", type=Path, required=True, help="Metrics CSV")
    ev.add_argument("--single-view", type=int)
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="Score one study directory")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--study-dir", type=Path, required=True)
    pr.set_defaults(func=cmd_predict)

    ex = sub.add_parser("export-roc", help="Export per-fold and mean ROC data")
    ex.add_argument("--metrics-dir", type=Path, required=True)
    ex.add_argument("--out", type=Path, required=True, help="Mean ROC CSV")
    ex.set_defaults(func=cmd_export_roc)

    ab = sub.add_parser("ablation", help="Train and evaluate every model row on every fold")
    ab.add_argument("--config", type=Path, help="INI run configuration")
    ab.add_argument("--manifest")
    ab.add_argument("--folds", type=int)
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--seed", type=int)
    ab.add_argument("--split-seed", type=int)
    ab.add_argument("--out")
    ab.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FibrosisError, OSError) as exc:
        logging.getLogger("fibrosis-fusion").error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
