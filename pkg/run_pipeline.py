#!/usr/bin/env python3
"""
Pipeline Orchestrator - Run the complete simulation / reconstruction pipeline.
Executes all steps in order: phantom -> projections -> matrices -> FDK -> SART -> metrics
"""

import sys
import subprocess
from pathlib import Path
import time

DATA_DIR = Path("data") / "pipeline"
PRESET = "desk"
VIEWS = 20
PHANTOM_KIND = "shepp-logan"
SART_ITERATIONS = 10


def run_script(args: list[str], description: str) -> bool:
    """Run a Python script with arguments and return success status."""
    print("\n" + "=" * 80)
    print(f"RUNNING: {description}")
    print("=" * 80)

    start_time = time.time()

    try:
        subprocess.run([sys.executable, *args], check=True, capture_output=False, text=True)
        elapsed = time.time() - start_time
        print(f"\n✓ {description} completed in {elapsed:.1f}s")
        return True

    except subprocess.CalledProcessError as e:
        elapsed = time.time() - start_time
        print(f"\n✗ {description} failed after {elapsed:.1f}s")
        print(f"Error code: {e.returncode}")
        return False


def main():
    overall_start = time.time()

    print("=" * 80)
    print("CONE-BEAM CT LABORATORY - COMPLETE PIPELINE")
    print("=" * 80)
    print("\nThis script will run the complete pipeline:")
    print(f"1. Generate a {PHANTOM_KIND} phantom ({PRESET} preset)")
    print(f"2. Simulate {VIEWS} DRR projections")
    print("3. Precompute per-view system matrices")
    print("4. FDK reconstruction")
    print("5. SART reconstruction")
    print("6. PSNR / SSIM evaluation")
    print()

    DATA_DIR.mkdir(parents=True, exist_ok=True)
    phantom = DATA_DIR / "phantom.raw"
    projections = DATA_DIR / "projections"
    matrices = DATA_DIR / "matrices"
    fdk = DATA_DIR / "fdk.raw"
    sart = DATA_DIR / "sart.raw"
    metrics = DATA_DIR / "metrics.parquet"

    steps = [
        (["cbct.py", "phantom", "--kind", PHANTOM_KIND, "--preset", PRESET, "--out", str(phantom)],
         "Phantom"),
        (["cbct.py", "simulate", "--volume", str(phantom), "--preset", PRESET, "--views", str(VIEWS),
          "--out", str(projections)], "Simulate Projections"),
        (["matrix/projection_matrix.py", "--preset", PRESET, "--views", str(VIEWS),
          "--out", str(matrices), "--force"], "System Matrices"),
        (["cbct.py", "fdk", "--projections", str(projections), "--out", str(fdk)], "FDK"),
        (["cbct.py", "sart", "--projections", str(projections), "--matrix-dir", str(matrices),
          "--iterations", str(SART_ITERATIONS), "--out", str(sart)], "SART"),
        (["cbct.py", "eval", "--reference", str(phantom), "--estimate", str(fdk), str(sart),
          "--method", "fdk", "sart", "--views", str(VIEWS), "--out", str(metrics)], "Evaluate"),
    ]

    for args, description in steps:
        if not run_script(args, description):
            print(f"\n✗ Pipeline failed at {description.lower()}")
            sys.exit(1)

    # Final summary
    overall_elapsed = time.time() - overall_start

    print("\n" + "=" * 80)
    print("✓ PIPELINE COMPLETED SUCCESSFULLY")
    print("=" * 80)
    print(f"Total time: {overall_elapsed:.1f}s ({overall_elapsed/60:.1f} minutes)")

    if metrics.exists():
        print(f"\nMetrics table: {metrics}")
        print(f"Validate with: python3 validate_output.py {DATA_DIR}")

    print("\n" + "=" * 80)


if __name__ == "__main__":
    main()
