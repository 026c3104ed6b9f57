#!/usr/bin/env python3
"""
Build per-view DRR system matrices (pixel -> voxel weights) for SART.
One sparse matrix per view, saved as .npz next to a matrices.json sidecar;
`cbct.py sart --matrix-dir` loads them instead of rebuilding.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
import sys
import time

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT))

from cbct_lab.config import MAX_WORKERS
from cbct_lab.errors import CbctError
from cbct_lab.io_formats import MATRIX_SIDECAR, save_view_matrices
from cbct_lab.manifest import load_manifest, preset_manifest
from cbct_lab.projector import default_step, projection_matrix

# Configuration
OUTPUT_DIR = REPO_ROOT / "matrix" / "outputs"
PRESET = "desk"
N_VIEWS = 20


def build_view(args):
    shape, spacing, pose, step = args
    return projection_matrix(shape, spacing, pose, step)


def build_matrices(manifest, step, workers=MAX_WORKERS):
    """Build one matrix per view, distributing views over worker processes."""
    shape, spacing = manifest.volume_shape, manifest.volume_spacing
    jobs = [(shape, spacing, pose, step) for pose in manifest.poses()]
    total = len(jobs)
    start_time = time.time()
    matrices = []

    print(f"Building {total} system matrices for a {shape} grid...")
    if workers == 1:
        for job in jobs:
            matrices.append(build_view(job))
            elapsed = time.time() - start_time
            print(f"  Progress: {len(matrices)}/{total} ({len(matrices) / elapsed:.1f} views/sec)", end="\r")
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            for matrix in executor.map(build_view, jobs, chunksize=1):
                matrices.append(matrix)
                elapsed = time.time() - start_time
                print(f"  Progress: {len(matrices)}/{total} ({len(matrices) / elapsed:.1f} views/sec)", end="\r")
    print("\nMatrix construction completed")
    return matrices


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--manifest", help="geometry manifest; default is the preset")
    parser.add_argument("--preset", default=PRESET)
    parser.add_argument("--views", type=int, default=N_VIEWS)
    parser.add_argument("--start-angle", type=float, default=0.0)
    parser.add_argument("--step", type=float)
    parser.add_argument("--workers", type=int, default=MAX_WORKERS)
    parser.add_argument("--out", default=str(OUTPUT_DIR))
    parser.add_argument("--force", action="store_true", help="rebuild even if matrices exist")
    args = parser.parse_args()

    print("=" * 80)
    print("PROJECTION SYSTEM MATRIX GENERATION")
    print("=" * 80)

    out = Path(args.out)
    if (out / MATRIX_SIDECAR).exists() and not args.force:
        size_mb = sum(p.stat().st_size for p in out.glob("*.npz")) / 1024**2
        print(f"Matrices already exist in {out} ({size_mb:.1f} MB); use --force to rebuild")
        return

    try:
        if args.manifest:
            manifest = load_manifest(args.manifest)
        else:
            manifest = preset_manifest(args.preset, args.views, args.start_angle)
        step = default_step(manifest.volume_spacing) if args.step is None else args.step
        matrices = build_matrices(manifest, step, args.workers)
    except CbctError as exc:
        print(f"✗ Error: {exc}")
        sys.exit(1)

    nnz = sum(m.nnz for m in matrices)
    print("\nMatrix statistics:")
    print(f"  Views: {len(matrices)}")
    print(f"  Rows per view: {matrices[0].shape[0]:,}  columns: {matrices[0].shape[1]:,}")
    print(f"  Nonzeros: {nnz:,} ({nnz / len(matrices):,.0f} per view)")

    print(f"\nSaving matrices to: {out}...")
    save_view_matrices(matrices, out, manifest.volume_shape, manifest.volume_spacing, step)
    size_mb = sum(p.stat().st_size for p in out.glob("*.npz")) / 1024**2
    print(f"Matrices saved successfully ({size_mb:.1f} MB)")
    print("=" * 80)


if __name__ == "__main__":
    main()
