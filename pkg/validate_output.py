#!/usr/bin/env python3
"""
Validation script for the pipeline outputs (phantom, projections, reconstructions, metrics).
"""

from pathlib import Path
import sys

import numpy as np
import polars as pl

from cbct_lab.errors import CbctError
from cbct_lab.io_formats import read_photon_settings, read_projections, read_volume

OUTPUT_DIR = Path("data") / "pipeline"
VOLUMES = ["phantom.raw", "fdk.raw", "sart.raw"]
METRICS_FILE = "metrics.parquet"
EXPECTED_COLUMNS = ["case_id", "method", "views", "psnr", "psnr_infinite", "ssim", "ssim_3d",
                    "data_range", "data_range_convention"]


def validate_output(output_dir: Path = OUTPUT_DIR) -> bool:
    """Validate the pipeline outputs in output_dir."""
    print("=" * 80)
    print(f"VALIDATION: {output_dir}")
    print("=" * 80)

    if not output_dir.exists():
        print(f"✗ Error: Directory not found: {output_dir}")
        return False

    ok = True
    try:
        # Volumes
        print("\n1. Volumes:")
        shapes = set()
        for name in VOLUMES:
            path = output_dir / name
            if not path.exists():
                print(f"   ✗ Missing: {name}")
                ok = False
                continue
            vol = read_volume(path)
            shapes.add(vol.shape)
            finite = bool(np.all(np.isfinite(vol.data)))
            mark = "✓" if finite else "✗"
            print(f"   {mark} {name}: shape {vol.shape}, spacing {vol.spacing}, "
                  f"range [{vol.values.min():.5f}, {vol.values.max():.5f}]")
            ok &= finite
        if len(shapes) > 1:
            print(f"   ✗ Volume shapes disagree: {sorted(shapes)}")
            ok = False

        # Projections
        print("\n2. Projections:")
        stack = read_projections(output_dir / "projections")
        values = stack.array
        print(f"   ✓ {len(stack)} views of {stack.detector_shape}")
        print(f"     Line integrals: min {values.min():.4f}, max {values.max():.4f}")
        if values.min() < 0:
            print("   ✗ Negative line integrals")
            ok = False
        photon = read_photon_settings(output_dir / "projections")
        if photon is not None:
            print(f"     Photon noise: I0={photon['i0']:g}, below dark: {photon['below_dark']:,}")

        # Metrics
        print("\n3. Metrics table:")
        metrics_path = output_dir / METRICS_FILE
        if not metrics_path.exists():
            print(f"   ✗ Missing: {METRICS_FILE}")
            return False
        df = pl.read_parquet(metrics_path)
        print(f"   Rows: {len(df):,}")
        for col in EXPECTED_COLUMNS:
            if col in df.columns:
                print(f"   ✓ {col}")
            else:
                print(f"   ✗ Missing: {col}")
                ok = False

        print("\n4. Scores:")
        for row in df.iter_rows(named=True):
            psnr = "inf" if row["psnr_infinite"] else f"{row['psnr']:.2f} dB"
            print(f"   {row['method']:>8s}: PSNR {psnr}, SSIM {row['ssim']:.4f} "
                  f"(3D {row['ssim_3d']:.4f}), {row['views']} views")
            if not -1.0 <= row["ssim"] <= 1.0:
                print("   ✗ SSIM outside [-1, 1]")
                ok = False

    except CbctError as e:
        print(f"\n✗ Validation failed: {e}")
        return False
    except Exception as e:
        print(f"\n✗ Validation failed: {e}")
        import traceback
        traceback.print_exc()
        return False

    print("\n" + "=" * 80)
    print("✓ VALIDATION PASSED" if ok else "✗ VALIDATION FAILED")
    print("=" * 80)
    return ok


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else OUTPUT_DIR
    success = validate_output(target)
    sys.exit(0 if success else 1)
