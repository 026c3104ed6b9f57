"""
Command-line verbs: phantom | simulate | fdk | sart | train | infer | eval,
plus gradcheck and export.

Every verb prints a banner, ✓ status lines and the elapsed time, and exits
with status 1 after printing ✗ Error: ... when the library raises.
"""

import argparse
import json
from pathlib import Path
import sys
import time

from cbct_lab.backprojection import STRATEGIES
from cbct_lab.classical import (
    FILTERS, VIEW_ORDERS, FdkOptions, SartOptions, fdk_reconstruct, sart_iterations,
)
from cbct_lab.config import (
    DEFAULT_I1, DEFAULT_LOG_EPS, DOWNSAMPLE, EPOCHS, FD_STEP, GEOMETRY_PRESETS, LAMBDA_GRAD,
    LAMBDA_PROJ, LEARNING_RATE, LR_DECAY, LR_DECAY_EVERY, MAX_WORKERS, RAY_BATCH, SPHERE_MU,
)
from cbct_lab.errors import CbctError
from cbct_lab.io_formats import (
    export_slice_png, load_checkpoint, load_view_matrices, read_projections, read_volume,
    save_checkpoint, write_projections, write_volume,
)
from cbct_lab.manifest import load_manifest, preset_manifest, write_manifest
from cbct_lab.metrics import metrics_frame, metrics_record
from cbct_lab.network import DecoderConfig, EncoderConfig, ModelConfig, init_model_state, predict
from cbct_lab.phantoms import DEFAULT_ELLIPSOIDS, PHANTOM_KINDS, make_phantom
from cbct_lab.projector import (
    ProjectionStack, flat_dark_correct, render_stack, simulate_photon_counts,
)
from cbct_lab.training import (
    PROJ_TARGETS, TrainConfig, TrainingCase, gradient_check, projection_stats, synthetic_cases, train,
)
from cbct_lab.volume import Volume

MANIFEST_NAME = "manifest.json"


def banner(title):
    print("=" * 80)
    print(title)
    print("=" * 80)


def done(start, what):
    print(f"\n✓ {what} in {time.time() - start:.1f}s")


# ---------------------------------------------------------------------------
# Shared argument helpers
# ---------------------------------------------------------------------------

def _add_geometry_args(p, views=True):
    p.add_argument("--manifest", help="geometry manifest (JSON)")
    p.add_argument("--preset", default="desk", choices=sorted(GEOMETRY_PRESETS),
                   help="geometry preset used when no manifest is given")
    if views:
        p.add_argument("--views", type=int, default=20, help="number of uniformly spaced views")
        p.add_argument("--start-angle", type=float, default=0.0, help="first view angle in degrees")


def _manifest(args, default_dir=None):
    if args.manifest:
        return load_manifest(args.manifest)
    if default_dir is not None and (Path(default_dir) / MANIFEST_NAME).exists():
        return load_manifest(Path(default_dir) / MANIFEST_NAME)
    return preset_manifest(args.preset, getattr(args, "views", 20), getattr(args, "start_angle", 0.0))


def _grid_of(manifest):
    return tuple(manifest.volume_shape), tuple(manifest.volume_spacing)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    start = time.time()
    banner(f"PHANTOM: {args.kind}")
    manifest = _manifest(args)
    shape, spacing = _grid_of(manifest)
    vol = make_phantom(args.kind, shape, spacing, seed=args.seed, k=args.k, radius=args.radius,
                       mu=args.mu)
    write_volume(vol, args.out)
    print(f"Grid: {shape} @ {spacing} mm")
    print(f"Attenuation range: [{vol.values.min():.5f}, {vol.values.max():.5f}] mm^-1")
    print(f"Written: {args.out}")
    done(start, "Phantom written")


def cmd_simulate(args):
    start = time.time()
    manifest = _manifest(args)
    poses = manifest.poses()
    banner(f"SIMULATE: {len(poses)} views from {args.volume}")
    vol = read_volume(args.volume)
    if manifest.is_circular:
        print(f"Orbit: {manifest.scan.delta_theta:g}° steps from {manifest.scan.start_angle:g}°")
    stack = render_stack(vol, poses, step=args.step, workers=args.workers, progress=True)

    photon = None
    if args.noise_i0 is not None:
        images, below_dark = [], 0
        for v, img in enumerate(stack.images):
            raster = simulate_photon_counts(img, args.noise_i0, args.noise_i1, seed=args.seed + v)
            below_dark += raster.below_dark
            images.append(flat_dark_correct(raster, args.log_eps))
        stack = ProjectionStack(stack.poses, images)
        photon = {"i0": args.noise_i0, "i1": args.noise_i1, "log_eps": args.log_eps,
                  "seed": args.seed, "below_dark": below_dark}
        print(f"Photon noise: I0={args.noise_i0:g} I1={args.noise_i1:g} seed={args.seed}")
        if below_dark:
            print(f"  ⚠ {below_dark:,} pixel(s) counted below the dark field")

    write_projections(stack, args.out, photon)
    write_manifest(manifest, Path(args.out) / MANIFEST_NAME)
    print(f"Written: {args.out} ({len(stack)} x {stack.detector_shape})")
    done(start, "Simulation finished")


def cmd_fdk(args):
    start = time.time()
    banner(f"FDK: {args.projections}")
    stack = read_projections(args.projections)
    shape, spacing = _grid_of(_manifest(args, args.projections))
    vol = fdk_reconstruct(stack, shape, spacing, FdkOptions(args.filter, args.padding), progress=True)
    write_volume(vol, args.out)
    print(f"Written: {args.out}")
    done(start, "FDK finished")


def cmd_sart(args):
    start = time.time()
    banner(f"SART: {args.projections}")
    stack = read_projections(args.projections)
    shape, spacing = _grid_of(_manifest(args, args.projections))
    opts = SartOptions(args.iterations, args.relaxation, args.order, args.seed, not args.allow_negative,
                       args.step)
    matrices = None
    if args.matrix_dir:
        matrices = load_view_matrices(args.matrix_dir, len(stack), shape, stack.detector_shape)
        print(f"Loaded {len(matrices)} precomputed system matrices from {args.matrix_dir}")
    initial = read_volume(args.init) if args.init else None
    x = None
    for iteration, x, residual in sart_iterations(stack, shape, spacing, opts, initial, matrices,
                                                  progress=True):
        print(f"  iteration {iteration:3d}: mean |residual| = {residual:.6g}")
    vol = Volume(x.reshape(shape), spacing)
    write_volume(vol, args.out)
    print(f"Written: {args.out}")
    done(start, "SART finished")


def _model_config(args, norm_mean=0.0, norm_std=1.0):
    encoder = EncoderConfig(levels=args.levels, base_channels=args.base_channels)
    decoder = DecoderConfig.for_downsample(args.downsample, args.residual_blocks, args.width)
    return ModelConfig(encoder, decoder, args.downsample, args.fusion, norm_mean, norm_std)


def _train_config(args):
    return TrainConfig(lr=args.lr, lr_decay=args.lr_decay, decay_every=args.decay_every,
                       epochs=args.epochs, lambda_grad=args.lambda_grad, lambda_proj=args.lambda_proj,
                       ray_batch=args.ray_batch, seed=args.seed, proj_target=args.proj_target,
                       step=args.step)


def _load_cases(args):
    if args.cases:
        cases = []
        for case_dir in args.cases:
            case_dir = Path(case_dir)
            cases.append(TrainingCase(read_volume(case_dir / "volume.raw"),
                                      read_projections(case_dir / "projections"), case_dir.name))
        return cases
    manifest = _manifest(args)
    shape, spacing = _grid_of(manifest)
    print(f"Generating {args.synthetic} ellipsoid phantoms at {shape} with {manifest.n_views} views")
    return synthetic_cases(args.synthetic, manifest.poses(), shape, spacing, first_seed=args.seed,
                           k=args.k, step=args.step, progress=True)


def cmd_train(args):
    start = time.time()
    banner("TRAIN: desk-scale encoder / fusion / decoder")
    cases = _load_cases(args)
    manifest = _manifest(args) if args.manifest else None
    if manifest is not None and manifest.normalization is not None:
        mean, std = manifest.normalization
    else:
        mean, std = projection_stats(cases)
    model_cfg = _model_config(args, mean, std)
    train_cfg = _train_config(args)
    print(f"Cases: {len(cases)}  C={model_cfg.encoder.channels}  S={model_cfg.downsample}  "
          f"fusion={model_cfg.strategy}")
    print(f"Input normalization: mean={mean:.5g} std={std:.5g}")

    state, history = train(cases, model_cfg, train_cfg, max_steps=args.max_steps, progress=True)
    first, last = history["total"][0], history["total"][-1]
    print(f"Steps: {len(history)}  loss {first:.5g} -> {last:.5g}")
    save_checkpoint(args.out, state, model_cfg, train_cfg)
    print(f"Checkpoint: {args.out}")
    if args.history:
        history.write_parquet(args.history)
        print(f"History: {args.history}")
    done(start, "Training finished")


def cmd_infer(args):
    start = time.time()
    banner(f"INFER: {args.checkpoint}")
    state, model_cfg, _ = load_checkpoint(args.checkpoint)
    if args.downsample is not None and args.downsample != model_cfg.downsample:
        raise ValueError(
            f"checkpoint decoder has {model_cfg.decoder.upsample_blocks} upsampling blocks "
            f"(S={model_cfg.downsample}); S={args.downsample} needs a decoder trained for it")
    if args.fusion is not None:
        model_cfg = ModelConfig(model_cfg.encoder, model_cfg.decoder, model_cfg.downsample,
                                args.fusion, model_cfg.norm_mean, model_cfg.norm_std)
    stack = read_projections(args.projections)
    shape, spacing = _grid_of(_manifest(args, args.projections))
    vol = predict(stack, shape, spacing, model_cfg, state)
    write_volume(vol, args.out)
    print(f"Views: {len(stack)}  grid: {shape}  S={model_cfg.downsample}")
    print(f"Written: {args.out}")
    done(start, "Inference finished")


def cmd_eval(args):
    start = time.time()
    banner(f"EVAL: reference {args.reference}")
    reference = read_volume(args.reference)
    methods = args.method or [Path(p).stem for p in args.estimate]
    if len(methods) != len(args.estimate):
        raise ValueError("--method must be given once per --estimate")
    records = []
    for path, method in zip(args.estimate, methods):
        record = metrics_record(args.case_id or Path(args.reference).stem, args.views, reference,
                                read_volume(path), method, args.data_range)
        records.append(record)
        print(json.dumps(record))
    if args.out:
        metrics_frame(records).write_parquet(args.out)
        print(f"Written: {args.out}")
    done(start, "Evaluation finished")


def cmd_gradcheck(args):
    start = time.time()
    banner("GRADCHECK: analytic vs central finite differences")
    manifest = _manifest(args)
    shape, spacing = _grid_of(manifest)
    case = synthetic_cases(1, manifest.poses(), shape, spacing, first_seed=args.seed)[0]
    if args.checkpoint:
        state, model_cfg, _ = load_checkpoint(args.checkpoint)
    else:
        model_cfg = _model_config(args)
        state = init_model_state(model_cfg, args.seed)
    report = gradient_check(state, case, model_cfg, TrainConfig(ray_batch=args.ray_batch),
                            sample_count=args.samples, h=args.h, seed=args.seed)
    for row in report.modules:
        mark = "✓" if row.max_rel_error < args.tol else "✗"
        print(f"  {mark} {row.module:8s} samples={row.samples:3d} "
              f"max={row.max_rel_error:.3e} mean={row.mean_rel_error:.3e}")
    done(start, "Gradient check finished")
    return 0 if report.passed(args.tol) else 1


def cmd_export(args):
    start = time.time()
    banner(f"EXPORT: {args.volume}")
    vol = read_volume(args.volume)
    window = tuple(args.window) if args.window else None
    export_slice_png(vol, args.out, axis=args.axis, index=args.index, window=window, hu=args.hu)
    print(f"Written: {args.out}")
    done(start, "Export finished")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--downsample", type=int, default=DOWNSAMPLE, help="sparse sampling rate S")
    p.add_argument("--fusion", default="adaptive", choices=STRATEGIES)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--residual-blocks", type=int, default=2)
    p.add_argument("--width", type=int, default=8, help="decoder channel width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbct.py", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("phantom", help="write a test phantom volume")
    _add_geometry_args(p, views=False)
    p.add_argument("--kind", default="sphere", choices=PHANTOM_KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=DEFAULT_ELLIPSOIDS, help="number of ellipsoids")
    p.add_argument("--radius", type=float, help="sphere radius in mm")
    p.add_argument("--mu", type=float, default=SPHERE_MU, help="sphere attenuation in mm^-1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="render DRR projections of a volume")
    _add_geometry_args(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--step", type=float, help="ray sampling step in mm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-i0", type=float, help="flat-field counts; enables photon noise")
    p.add_argument("--noise-i1", type=float, default=DEFAULT_I1, help="dark-field counts")
    p.add_argument("--log-eps", type=float, default=DEFAULT_LOG_EPS,
                   help="clamp for the log transform, as a fraction of I0 - I1")
    p.add_argument("--workers", type=int, default=MAX_WORKERS)
    p.add_argument("--out", required=True, help="output projection directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fdk", help="FDK reconstruction")
    _add_geometry_args(p, views=False)
    p.add_argument("--projections", required=True)
    p.add_argument("--filter", default="ram-lak", choices=FILTERS)
    p.add_argument("--padding", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fdk)

    p = sub.add_parser("sart", help="SART reconstruction")
    _add_geometry_args(p, views=False)
    p.add_argument("--projections", required=True)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--relaxation", type=float, default=0.5)
    p.add_argument("--order", default="sequential", choices=VIEW_ORDERS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float)
    p.add_argument("--allow-negative", action="store_true")
    p.add_argument("--matrix-dir", help="precomputed per-view system matrices")
    p.add_argument("--init", help="initial volume (e.g. an FDK result)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sart)

    p = sub.add_parser("train", help="train the encoder / fusion / decoder")
    _add_geometry_args(p)
    _add_model_args(p)
    p.add_argument("--cases", nargs="*", help="case directories with volume.raw and projections/")
    p.add_argument("--synthetic", type=int, default=40, help="ellipsoid phantoms when no --cases")
    p.add_argument("--k", type=int, default=DEFAULT_ELLIPSOIDS)
    p.add_argument("--epochs", type=int, default=EPOCHS)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float, default=LEARNING_RATE)
    p.add_argument("--lr-decay", type=float, default=LR_DECAY)
    p.add_argument("--decay-every", type=int, default=LR_DECAY_EVERY)
    p.add_argument("--lambda-grad", type=float, default=LAMBDA_GRAD)
    p.add_argument("--lambda-proj", type=float, default=LAMBDA_PROJ)
    p.add_argument("--ray-batch", type=int, default=RAY_BATCH)
    p.add_argument("--proj-target", default="simulated", choices=PROJ_TARGETS)
    p.add_argument("--step", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", help="per-step loss table (parquet)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct with a trained checkpoint")
    _add_geometry_args(p, views=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--projections", required=True)
    p.add_argument("--downsample", type=int, help="must match the checkpoint decoder")
    p.add_argument("--fusion", choices=STRATEGIES, help="override the checkpoint fusion strategy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR / SSIM against a reference volume")
    p.add_argument("--reference", required=True)
    p.add_argument("--estimate", required=True, nargs="+")
    p.add_argument("--method", nargs="+")
    p.add_argument("--case-id")
    p.add_argument("--views", type=int)
    p.add_argument("--data-range", type=float, help="default: reference max - min")
    p.add_argument("--out", help="metrics table (parquet)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_geometry_args(p)
    _add_model_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--h", type=float, default=FD_STEP)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--ray-batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="8-bit PNG slice of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", type=int, default=2, choices=(0, 1, 2))
    p.add_argument("--index", type=int)
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--hu", action="store_true", help="window in display HU")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        status = args.func(args)
    except (CbctError, ValueError, IndexError) as exc:
        print(f"\n✗ Error: {exc}", file=sys.stderr)
        return 1
    return 0 if status is None else int(status)
