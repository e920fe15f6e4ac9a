"""
Configuration constants for the liver-fibrosis ultrasound pipeline.
All tunable parameters live here: backbone shape, views, ROI rule, phantom,
augmentation, training, evaluation and report thresholds.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import TypedDict


class ViewGeometry(TypedDict):
    center_row: float   # fraction of image height
    center_col: float   # fraction of image width
    semi_rows: float    # fraction of image height
    semi_cols: float    # fraction of image width
    angle_deg: float


# ─── Paths ───────────────────────────────────────────────────────────────────
PROJECT_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = PROJECT_ROOT / "data"
RUN_LOG_NAME = "run.log"
CONFIG_ECHO_NAME = "config.ini"
EVAL_ECHO_TEMPLATE = "eval_fold{fold}{tag}.ini"
EXPORT_ECHO_NAME = "export_roc.ini"
CHECKPOINT_NAME = "model.hfus"
HISTORY_NAME = "history.csv"
PREDICTIONS_TEMPLATE = "predictions_fold{fold}{tag}.csv"
ROC_FOLD_TEMPLATE = "roc_fold{fold}{tag}.csv"
ROC_LEGEND_NAME = "roc_legend.csv"
ABLATION_METRICS_NAME = "ablation_metrics.csv"
MANIFEST_NAME = "manifest.jsonl"
STUDY_FRAGMENT_NAME = "study.jsonl"

# ─── Parallelism ─────────────────────────────────────────────────────────────
THREADS = max(1, int(os.environ.get("HFUS_THREADS", "1")))

# ─── Numerics ────────────────────────────────────────────────────────────────
LOSS_EPS = 1e-7
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

# ─── Backbone ────────────────────────────────────────────────────────────────
INPUT_SIZE = (64, 64)
STAGE_WIDTHS = [16, 32, 64]
STAGE_STRIDES = [1, 2, 2]
KERNEL_SIZE = 3
NORM_KINDS = ("instance", "batch")

# ─── Model Variants ──────────────────────────────────────────────────────────
MODEL_VARIANTS = ("imagewise", "imagewise_roi", "global_fusion", "ghif", "ghif_vsp")
IMAGEWISE_VARIANTS = ("imagewise", "imagewise_roi")
FUSION_VARIANTS = ("global_fusion", "ghif", "ghif_vsp")
MASKED_VARIANTS = ("imagewise_roi", "global_fusion", "ghif", "ghif_vsp")

# Rows of the ablation table: (variant, norm)
ABLATION_ROWS = [
    ("imagewise", "batch"),
    ("imagewise_roi", "batch"),
    ("global_fusion", "batch"),
    ("ghif", "batch"),
    ("ghif", "instance"),
    ("ghif_vsp", "instance"),
]

# ─── Views ───────────────────────────────────────────────────────────────────
NUM_VIEWS = 6
MAX_IMAGES_PER_STUDY = 14

# Liver placement per transducer position. Kept clear of the top-left corner,
# where the confounder patch lives.
VIEW_GEOMETRY: dict[int, ViewGeometry] = {
    1: {"center_row": 0.58, "center_col": 0.55, "semi_rows": 0.22, "semi_cols": 0.30, "angle_deg": 0.0},
    2: {"center_row": 0.62, "center_col": 0.62, "semi_rows": 0.20, "semi_cols": 0.26, "angle_deg": 15.0},
    3: {"center_row": 0.60, "center_col": 0.50, "semi_rows": 0.24, "semi_cols": 0.24, "angle_deg": -10.0},
    4: {"center_row": 0.66, "center_col": 0.58, "semi_rows": 0.18, "semi_cols": 0.30, "angle_deg": 25.0},
    5: {"center_row": 0.56, "center_col": 0.66, "semi_rows": 0.22, "semi_cols": 0.22, "angle_deg": -20.0},
    6: {"center_row": 0.64, "center_col": 0.52, "semi_rows": 0.20, "semi_cols": 0.28, "angle_deg": 5.0},
}

# ─── Clinical ROI ────────────────────────────────────────────────────────────
ROI_EXTENSION_PIXELS = 10       # margin above the liver at the reference height
ROI_REFERENCE_HEIGHT = 128
MASK_KEEP_FRACTION = 0.5        # feature cell kept when ≥ this much of it is ROI

# ─── Synthetic Phantom ───────────────────────────────────────────────────────
PHANTOM_TEXTURE_SIGMA = {0: 0.6, 1: 1.6}     # parenchyma correlation length (px)
PHANTOM_TEXTURE_AMPLITUDE = 0.22
PHANTOM_NODULE_AMPLITUDE = {0: 0.0, 1: 0.09}  # relative border modulation
PHANTOM_NODULE_CYCLES = 9
PHANTOM_POSITION_JITTER = 0.03
PHANTOM_BACKGROUND_LEVEL = 0.30
PHANTOM_LIVER_LEVEL = 0.50
PHANTOM_CONFOUNDER_SIZE = 5
PHANTOM_CONFOUNDER_LEVELS = (0.08, 0.92)      # (label 0, label 1) in "train" mode
CONFOUNDER_MODES = ("off", "train", "flipped")

# ─── Augmentation ────────────────────────────────────────────────────────────
AUG_BRIGHTNESS = (-0.1, 0.1)
AUG_CONTRAST = (0.8, 1.2)
AUG_ROTATION_DEG = (-10.0, 10.0)
AUG_SCALE = (0.9, 1.1)

# ─── Training ────────────────────────────────────────────────────────────────
LEARNING_RATE = 0.001
EPOCHS = 30
BATCH_SIZE = 8
N_FOLDS = 5
SPLIT_FRACTIONS = (0.7, 0.2, 0.1)   # train, test, val
MIN_PATIENTS = 10
# Frozen head-input standardization, fitted once before the first epoch:
# scale = gain / max(std, floor · median std) per feature.
HEAD_INPUT_GAIN = 2.0
HEAD_SCALE_FLOOR = 0.1

# ─── Evaluation ──────────────────────────────────────────────────────────────
PAUC_FPR_MAX = 0.3
RECALL_PRECISIONS = (0.90, 0.85, 0.80)
ROC_GRID_POINTS = 201
METRICS_COLUMNS = ["fold", "variant", "norm", "auc", "pauc30", "r_at_p90", "r_at_p85", "r_at_p80"]
ROC_COLUMNS = ["fpr", "tpr", "threshold"]

# ─── Report Thresholds ───────────────────────────────────────────────────────
# Partial-AUC colour rating in the metrics workbook
PAUC_GREEN_MIN = 0.75
PAUC_YELLOW_MIN = 0.55
