#!/usr/bin/env python3
"""
Sparse-view study.

For every phantom seed, view count and start angle, simulates projections
and reconstructs with FDK and SART (and a trained model when --checkpoint is
given), then scores each reconstruction with PSNR / SSIM.

Outputs:
  analysis/data/study_results.parquet   one row per (case, views, start angle, method)
  analysis/data/study_summary.parquet   mean / std per (method, views)
  analysis/sparse_view_study.xlsx       Summary + Results sheets
  analysis/charts/psnr_vs_views.png     mean PSNR per method against view count
"""

import argparse
from pathlib import Path
import sys
import time

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import polars as pl
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

from cbct_lab.classical import FdkOptions, SartOptions, fdk_reconstruct, sart_reconstruct
from cbct_lab.errors import CbctError
from cbct_lab.io_formats import load_checkpoint
from cbct_lab.manifest import preset_manifest
from cbct_lab.metrics import metrics_frame, metrics_record
from cbct_lab.network import predict
from cbct_lab.phantoms import random_ellipsoids
from cbct_lab.projector import render_stack

# Paths
ANALYSIS_DIR = PROJECT_ROOT / "analysis"
DATA_DIR = ANALYSIS_DIR / "data"
CHARTS_DIR = ANALYSIS_DIR / "charts"
OUTPUT_FILE = ANALYSIS_DIR / "sparse_view_study.xlsx"

# Study grid
PRESET = "desk"
VIEW_COUNTS = [5, 10, 20]
START_ANGLES = [0.0, 10.0, 20.0]
PHANTOM_SEEDS = [1000, 1001, 1002, 1003]
SART_ITERATIONS = 10

plt.rcParams['figure.dpi'] = 150
plt.rcParams['font.size'] = 10
plt.rcParams['font.family'] = 'sans-serif'


def run_case(seed, views, start_angle, model=None):
    """Reconstruct one phantom at one acquisition setting; returns metrics records."""
    manifest = preset_manifest(PRESET, views, start_angle)
    shape, spacing = manifest.volume_shape, manifest.volume_spacing
    gt = random_ellipsoids(shape, spacing, seed=seed)
    stack = render_stack(gt, manifest.poses())

    estimates = {
        "fdk": fdk_reconstruct(stack, shape, spacing, FdkOptions()),
        "sart": sart_reconstruct(stack, shape, spacing, SartOptions(iterations=SART_ITERATIONS)),
    }
    if model is not None:
        state, model_cfg = model
        estimates["model"] = predict(stack, shape, spacing, model_cfg, state)

    records = []
    for method, estimate in estimates.items():
        record = metrics_record(f"ellipsoids-{seed:04d}", views, gt, estimate, method)
        record["start_angle"] = start_angle
        records.append(record)
    return records


def run_study(model=None) -> pl.DataFrame:
    """Run the full sweep."""
    settings = [(s, v, a) for s in PHANTOM_SEEDS for v in VIEW_COUNTS for a in START_ANGLES]
    total = len(settings)
    start_time = time.time()
    records = []

    print(f"Running {total} acquisition settings...")
    for done, (seed, views, angle) in enumerate(settings, start=1):
        records.extend(run_case(seed, views, angle, model))
        elapsed = time.time() - start_time
        print(f"  Progress: {done}/{total} ({elapsed / done:.1f}s per setting)", end="\r")
    print("\nSweep completed")

    frame = metrics_frame([{k: v for k, v in r.items() if k != "start_angle"} for r in records])
    return frame.with_columns(pl.Series("start_angle", [r["start_angle"] for r in records]))


def summarize(results: pl.DataFrame) -> pl.DataFrame:
    return (
        results.group_by(["method", "views"])
        .agg(
            pl.col("psnr").mean().alias("psnr_mean"),
            pl.col("psnr").std().alias("psnr_std"),
            pl.col("ssim").mean().alias("ssim_mean"),
            pl.col("ssim").std().alias("ssim_std"),
            pl.len().alias("cases"),
        )
        .sort(["method", "views"])
    )


def format_sheet_header(ws, headers):
    """Format Excel sheet header row."""
    header_fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
    header_font = Font(color="FFFFFF", bold=True, size=11)

    for col_num, header in enumerate(headers, 1):
        cell = ws.cell(row=1, column=col_num)
        cell.value = header
        cell.fill = header_fill
        cell.font = header_font
        cell.alignment = Alignment(horizontal='center', vertical='center', wrap_text=True)

    for col_num in range(1, len(headers) + 1):
        ws.column_dimensions[get_column_letter(col_num)].width = 15


def write_sheet(wb, title, frame: pl.DataFrame):
    print(f"    {title}...")
    ws = wb.create_sheet(title)
    format_sheet_header(ws, frame.columns)
    for row_num, row in enumerate(frame.iter_rows(), start=2):
        for col_num, value in enumerate(row, start=1):
            cell = ws.cell(row=row_num, column=col_num, value=value)
            if isinstance(value, float):
                cell.number_format = "0.000"


def export_excel(results, summary):
    print("\nCreating Excel report...")
    wb = Workbook()
    wb.remove(wb.active)
    write_sheet(wb, "Summary", summary)
    write_sheet(wb, "Results", results)
    ws = wb["Summary"]
    note_row = len(summary) + 3
    ws[f"A{note_row}"] = "PSNR / SSIM data range: reference max - min per case"
    ws[f"A{note_row}"].font = Font(italic=True)
    wb.save(OUTPUT_FILE)
    print(f"  ✓ Saved: {OUTPUT_FILE}")


def create_psnr_chart(summary: pl.DataFrame):
    """Mean PSNR (with std error bars) against the number of views per method."""
    print("\nCreating PSNR vs views chart...")
    fig, ax = plt.subplots(figsize=(8, 5))
    for method in summary["method"].unique().sort():
        rows = summary.filter(pl.col("method") == method)
        ax.errorbar(rows["views"].to_list(), rows["psnr_mean"].to_list(),
                    yerr=rows["psnr_std"].fill_null(0.0).to_list(),
                    marker="o", capsize=3, label=method.upper())
    ax.set_xlabel("Number of views")
    ax.set_ylabel("PSNR (dB)")
    ax.set_xticks(VIEW_COUNTS)
    ax.set_title("Sparse-view reconstruction quality", fontweight="bold")
    ax.grid(alpha=0.3, linestyle="--")
    ax.legend()
    plt.tight_layout()

    output_file = CHARTS_DIR / "psnr_vs_views.png"
    plt.savefig(output_file, dpi=300, bbox_inches="tight", facecolor="white")
    plt.close()
    print(f"  ✓ Saved: {output_file}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", help="trained model to include in the comparison")
    args = parser.parse_args()

    overall_start = time.time()
    print("=" * 80)
    print("SPARSE-VIEW STUDY")
    print("=" * 80)
    print(f"Preset: {PRESET}  views: {VIEW_COUNTS}  start angles: {START_ANGLES}")
    print(f"Phantoms: {len(PHANTOM_SEEDS)} random-ellipsoid volumes")

    DATA_DIR.mkdir(parents=True, exist_ok=True)
    CHARTS_DIR.mkdir(parents=True, exist_ok=True)

    try:
        model = None
        if args.checkpoint:
            state, model_cfg, _ = load_checkpoint(args.checkpoint)
            model = (state, model_cfg)
            print(f"Model: {args.checkpoint} (S={model_cfg.downsample}, fusion={model_cfg.strategy})")
        results = run_study(model)
    except CbctError as exc:
        print(f"\n✗ Error: {exc}")
        sys.exit(1)

    summary = summarize(results)
    results.write_parquet(DATA_DIR / "study_results.parquet")
    summary.write_parquet(DATA_DIR / "study_summary.parquet")
    print(f"\n  ✓ Saved: {DATA_DIR / 'study_results.parquet'}")
    print(f"  ✓ Saved: {DATA_DIR / 'study_summary.parquet'}")

    print("\nSummary:")
    print(summary)

    export_excel(results, summary)
    create_psnr_chart(summary)

    elapsed = time.time() - overall_start
    print("\n" + "=" * 80)
    print("✓ STUDY COMPLETED")
    print("=" * 80)
    print(f"Total time: {elapsed:.1f}s ({elapsed/60:.1f} minutes)")


if __name__ == "__main__":
    main()
