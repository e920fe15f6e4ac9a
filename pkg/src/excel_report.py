"""Excel workbook for evaluation results: per-fold metrics plus the mean ROC grid."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

from openpyxl import Workbook
from openpyxl.chart import Reference, ScatterChart, Series
from openpyxl.formatting.rule import CellIsRule
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

from .config import METRICS_COLUMNS, PAUC_GREEN_MIN, PAUC_YELLOW_MIN
from .evaluation import MeanRoc

METRIC_HEADERS = [
    "Fold",         # A
    "Variant",      # B
    "Norm",         # C
    "AUC",          # D
    "pAUC@0.3",     # E
    "R@P90",        # F
    "R@P85",        # G
    "R@P80",        # H
    "Rating",       # I
]

_NUMERIC = set(METRICS_COLUMNS[3:])


def style_header_row(ws) -> None:
    header_fill = PatternFill(fill_type="solid", start_color="FFD9D9D9", end_color="FFD9D9D9")
    header_font = Font(bold=True)
    header_alignment = Alignment(horizontal="center", vertical="center")
    for cell in ws[1]:
        cell.fill = header_fill
        cell.font = header_font
        cell.alignment = header_alignment


def apply_auto_width(ws) -> None:
    for col_idx in range(1, ws.max_column + 1):
        letter = get_column_letter(col_idx)
        longest = max(
            (len(str(ws.cell(row=r, column=col_idx).value)) for r in range(1, ws.max_row + 1)
             if ws.cell(row=r, column=col_idx).value is not None),
            default=0,
        )
        ws.column_dimensions[letter].width = min(longest + 4, 50)


def pauc_rating(value: float) -> str:
    if value >= PAUC_GREEN_MIN:
        return "Green"
    if value >= PAUC_YELLOW_MIN:
        return "Yellow"
    return "Red"


def build_rating_formula(cell: str) -> str:
    return f'=IF({cell}>={PAUC_GREEN_MIN},"Green",IF({cell}>={PAUC_YELLOW_MIN},"Yellow","Red"))'


def _number(value: str | float) -> float | str:
    try:
        return float(value)
    except (TypeError, ValueError):
        return value  # type: ignore[return-value]


def build_metrics_workbook(
    rows: Sequence[Mapping[str, str | float]],
    mean_curve: MeanRoc | None,
    output_path: Path,
    fold_curves: Mapping[str, Sequence[float]] | None = None,
) -> None:
    """
    ``rows`` use the metrics CSV keys. The Metrics sheet rates each row's
    partial AUC Green/Yellow/Red; the Mean ROC sheet holds the grid (and the
    per-fold TPR columns when given) with a line chart.
    """
    wb = Workbook()

    metrics_ws = wb.active
    if metrics_ws is None:
        metrics_ws = wb.create_sheet("Metrics")
    metrics_ws.title = "Metrics"
    metrics_ws.append(METRIC_HEADERS)
    metrics_ws.freeze_panes = "A2"
    style_header_row(metrics_ws)

    light_fills = {
        "Green": PatternFill(fill_type="solid", start_color="FFE2F0D9", end_color="FFE2F0D9"),
        "Yellow": PatternFill(fill_type="solid", start_color="FFFFF2CC", end_color="FFFFF2CC"),
        "Red": PatternFill(fill_type="solid", start_color="FFF4CCCC", end_color="FFF4CCCC"),
    }

    for row_idx, row in enumerate(rows, start=2):
        for col_idx, key in enumerate(METRICS_COLUMNS, start=1):
            value = row.get(key, "")
            cell = metrics_ws.cell(row=row_idx, column=col_idx, value=_number(value) if key in _NUMERIC else value)
            if key in _NUMERIC:
                cell.number_format = "0.000"
        metrics_ws.cell(row=row_idx, column=len(METRICS_COLUMNS) + 1, value=build_rating_formula(f"E{row_idx}"))
        pauc = _number(row.get("pauc30", ""))
        if isinstance(pauc, float):
            metrics_ws.cell(row=row_idx, column=2).fill = light_fills[pauc_rating(pauc)]

    green_fill = PatternFill(fill_type="solid", start_color="FF92D050", end_color="FF92D050")
    yellow_fill = PatternFill(fill_type="solid", start_color="FFFFFF00", end_color="FFFFFF00")
    red_fill = PatternFill(fill_type="solid", start_color="FFFF0000", end_color="FFFF0000")
    rating_range = f"I2:I{max(2, metrics_ws.max_row)}"
    metrics_ws.conditional_formatting.add(
        rating_range, CellIsRule(operator="equal", formula=['"Green"'], fill=green_fill)
    )
    metrics_ws.conditional_formatting.add(
        rating_range, CellIsRule(operator="equal", formula=['"Yellow"'], fill=yellow_fill)
    )
    metrics_ws.conditional_formatting.add(
        rating_range,
        CellIsRule(operator="equal", formula=['"Red"'], fill=red_fill, font=Font(color="FFFFFFFF")),
    )
    apply_auto_width(metrics_ws)

    if mean_curve is not None:
        roc_ws = wb.create_sheet("Mean ROC")
        fold_curves = dict(fold_curves or {})
        roc_ws.append(["FPR", "Mean TPR", *fold_curves])
        roc_ws.freeze_panes = "A2"
        style_header_row(roc_ws)
        columns = list(fold_curves.values())
        for i, (x, y) in enumerate(zip(mean_curve.fpr, mean_curve.tpr)):
            roc_ws.append([float(x), float(y), *(float(c[i]) for c in columns)])
        for row in roc_ws.iter_rows(min_row=2):
            for cell in row:
                cell.number_format = "0.000"

        chart = ScatterChart()
        chart.title = "Mean ROC"
        chart.x_axis.title = "False positive rate"
        chart.y_axis.title = "True positive rate"
        last = roc_ws.max_row
        xs = Reference(roc_ws, min_col=1, min_row=2, max_row=last)
        for col in range(2, roc_ws.max_column + 1):
            series = Series(Reference(roc_ws, min_col=col, min_row=1, max_row=last), xs, title_from_data=True)
            chart.series.append(series)
        roc_ws.add_chart(chart, f"{get_column_letter(roc_ws.max_column + 2)}2")
        apply_auto_width(roc_ws)

    output_path.parent.mkdir(parents=True, exist_ok=True)
    wb.save(output_path)
