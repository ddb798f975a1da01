"""Command-line interface.

Subcommands: run (one attribution), batch (images x models sweep),
verify (self-checks on a model), train, curate, compare (cross-model
consensus/difference), rf (receptive field). Every command that fills
an output directory writes a single manifest.json recording the exact
invocation, config, seed, tool version, and input digests; reruns with
the same flags reproduce all other outputs byte for byte.

Exit codes: 0 success, 1 failure (one line ``error[Kind]: message`` on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import area_of_interest, correlate, diffusion_stats, kde_heatmap, normalize_for_viz, psnr
from .attribution import (
    PatchDetector,
    PathConfig,
    lam_with_diagnostics,
    support_window,
    vanilla_gradient,
)
from .dataset import downsample, enumerate_candidates, curate, load_image, save_image
from .engine import Tensor, gradcheck
from .errors import ConfigError, DataError, LamError, NumericError
from .zoo import (
    TrainConfig,
    build_linear_upsampler,
    build_plain_cnn,
    build_residual_net,
    load_weights,
    probe_receptive_field,
    receptive_field,
    save_weights,
    train_tiny,
)

# CSV schema v1. Headers are fixed constants; a header change means a new
# schema version, recorded here and in the manifest's tool version.
CSV_SCHEMA_VERSION = 1
RESULTS_CSV_COLUMNS = ["image_id", "model_id", "di", "gini", "psnr_db",
                       "completeness_rel", "d_input", "d_baseline", "m", "sigma",
                       "patch", "x", "y"]
STATS_CSV_COLUMNS = ["di", "gini", "completeness_rel", "d_input", "d_baseline",
                     "degenerate"]
DIAGNOSTICS_CSV_COLUMNS = ["step", "alpha", "detector", "path_speed",
                           "cumulative_attribution"]
CURATE_CSV_COLUMNS = ["id", "mean_psnr_db", "var_psnr", "rank", "selected"]

_MODEL_SUFFIX = ".lamw"
_IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except LamError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


# -------------------------------------------------------------------- parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lamsr",
        description="Local attribution maps for super-resolution networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="attribute one patch of one image under one model")
    run.add_argument("--model", required=True, help="weight file")
    run.add_argument("--image", required=True, help="LR input image (PNG/PPM)")
    run.add_argument("--out", required=True, help="output directory")
    _add_attribution_flags(run)
    run.set_defaults(handler=cmd_run)

    batch = sub.add_parser("batch", help="sweep a directory of images against a directory of models")
    batch.add_argument("--images", required=True, help="directory of LR input images")
    batch.add_argument("--models", required=True, help=f"directory of {_MODEL_SUFFIX} weight files")
    batch.add_argument("--hr", default=None, help="directory of matching HR images for PSNR")
    batch.add_argument("--out", required=True, help="output directory")
    batch.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    _add_attribution_flags(batch)
    batch.set_defaults(handler=cmd_batch)

    verify = sub.add_parser("verify", help="run self-checks against a model")
    verify.add_argument("--model", required=True, help="weight file")
    verify.add_argument("--size", type=int, default=16, help="LR test image side (default 16)")
    verify.add_argument("--seed", type=int, default=0)
    verify.set_defaults(handler=cmd_verify)

    train = sub.add_parser("train", help="desk-scale training on a directory of HR images")
    train.add_argument("--images", required=True, help="directory of HR training images")
    train.add_argument("--out", required=True, help="output weight file")
    train.add_argument("--model", default=None, help="existing weight file to continue from")
    train.add_argument("--arch", choices=["plain", "residual"], default=None,
                       help="fresh architecture to build when --model is absent")
    train.add_argument("--depth", type=int, default=4, help="plain CNN conv+prelu pairs")
    train.add_argument("--blocks", type=int, default=2, help="residual blocks")
    train.add_argument("--width", type=int, default=16)
    train.add_argument("--scale", type=int, default=4)
    train.add_argument("--iterations", type=int, default=1000)
    train.add_argument("--patch-size", type=int, default=32, help="LR training patch side")
    train.add_argument("--minibatch", type=int, default=16)
    train.add_argument("--learning-rate", type=float, default=1e-4)
    train.add_argument("--seed", type=int, default=0)
    train.set_defaults(handler=cmd_train)

    cur = sub.add_parser("curate", help="select hard, divisive crops from an HR corpus")
    cur.add_argument("--images", required=True, help="directory of HR images")
    cur.add_argument("--models", required=True, nargs="+", help="two or more weight files")
    cur.add_argument("--out", required=True, help="output directory")
    cur.add_argument("--count", type=int, default=20)
    cur.add_argument("--sub-image", type=int, default=96, help="HR crop side")
    cur.add_argument("--seed", type=int, default=0)
    cur.set_defaults(handler=cmd_curate)

    comp = sub.add_parser("compare", help="consensus/difference heat maps across models")
    comp.add_argument("--models", required=True, nargs="+", help="weight files")
    comp.add_argument("--image", required=True, help="LR input image")
    comp.add_argument("--out", required=True, help="output directory")
    comp.add_argument("--threshold", type=float, default=0.1,
                      help="normalized-attribution threshold (default 0.1)")
    comp.add_argument("--bandwidth", type=float, default=2.0, help="KDE bandwidth in LR pixels")
    _add_attribution_flags(comp)
    comp.set_defaults(handler=cmd_compare)

    rf = sub.add_parser("rf", help="print a model's receptive-field side length")
    group = rf.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", help="weight file")
    group.add_argument("--arch", choices=["plain", "residual", "linear"])
    rf.add_argument("--depth", type=int, default=8)
    rf.add_argument("--blocks", type=int, default=2)
    rf.add_argument("--width", type=int, default=16)
    rf.add_argument("--scale", type=int, default=4)
    rf.add_argument("--seed", type=int, default=0)
    rf.set_defaults(handler=cmd_rf)

    return parser


def _add_attribution_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--patch", type=int, default=16,
                        help="detector patch side in SR pixels (default 16)")
    parser.add_argument("--x", type=int, default=None,
                        help="patch top row, SR coordinates (default: centered)")
    parser.add_argument("--y", type=int, default=None,
                        help="patch left column, SR coordinates (default: centered)")
    parser.add_argument("--lr-coords", action="store_true",
                        help="interpret --x/--y as LR coordinates (multiplied by scale)")
    parser.add_argument("--sigma", type=float, default=4.0,
                        help="baseline blur width in LR pixels (default 4.0)")
    parser.add_argument("--steps", type=int, default=100,
                        help="path integration steps (default 100)")
    parser.add_argument("--baseline", choices=["gaussian_blur", "black"],
                        default="gaussian_blur")
    parser.add_argument("--path", choices=["progressive_blur", "linear"],
                        default="progressive_blur")
    parser.add_argument("--seed", type=int, default=0, help="recorded in the manifest")


# ------------------------------------------------------------------- helpers


def _sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def _write_manifest(out_dir: Path, args: argparse.Namespace, inputs: list) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    manifest = {
        "tool": "lamsr",
        "version": __version__,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in sorted(str(i) for i in inputs)},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _write_csv(path: Path, columns: list[str], rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _load_lr_for(net, path) -> np.ndarray:
    image = load_image(path)
    want = net.input_channels
    if image.shape[0] == 1 and want == 3:
        image = np.repeat(image, 3, axis=0)
    if image.shape[0] != want:
        raise DataError(f"{path}: {image.shape[0]} channels, model expects {want}")
    return image


def _detector_for(args, net, lr_shape) -> PatchDetector:
    scale = net.scale
    sr_h, sr_w = lr_shape[1] * scale, lr_shape[2] * scale
    side = args.patch
    x, y = args.x, args.y
    if x is None:
        x = (sr_h - side) // 2
    elif args.lr_coords:
        x *= scale
    if y is None:
        y = (sr_w - side) // 2
    elif args.lr_coords:
        y *= scale
    return PatchDetector(x=x, y=y, side=side)


def _path_config(args) -> PathConfig:
    return PathConfig(baseline=args.baseline, path=args.path,
                      sigma=args.sigma, steps=args.steps)


def _luminance(lr: np.ndarray) -> np.ndarray:
    return lr.mean(axis=0)


def _render_attribution_png(viz: np.ndarray, degenerate: bool, path: Path) -> None:
    # Ink rendering: darker pixel = larger attribution. A degenerate
    # (all-zero) map renders black so "no signal" is never mistaken for a
    # blank page of valid zeros.
    if degenerate:
        save_image(np.zeros_like(viz), path)
    else:
        save_image(1.0 - viz, path)


def _render_overlay_png(lr: np.ndarray, viz: np.ndarray, path: Path) -> None:
    base = _luminance(lr)
    alpha = 0.6 * viz
    rgb = np.stack([base * (1.0 - alpha) + alpha, base * (1.0 - alpha),
                    base * (1.0 - alpha)])
    save_image(rgb, path)


def _render_heat_png(grid: np.ndarray, channel: int, path: Path) -> None:
    peak = grid.max()
    intensity = grid / peak if peak > 0 else grid
    rgb = np.zeros((3,) + grid.shape)
    rgb[channel] = intensity
    save_image(rgb, path)


# ------------------------------------------------------------------ commands


def cmd_run(args) -> int:
    net = load_weights(args.model)
    lr = _load_lr_for(net, args.image)
    det = _detector_for(args, net, lr.shape)
    cfg = _path_config(args)
    attribution, diag = lam_with_diagnostics(net, lr, det, cfg)

    stats = diffusion_stats(attribution)
    degenerate = not np.any(attribution.reduced)
    viz = normalize_for_viz(attribution)

    out = _out_dir(args)
    _render_attribution_png(viz, degenerate, out / "attribution.png")
    _render_overlay_png(lr, viz, out / "overlay.png")
    _write_csv(out / "stats.csv", STATS_CSV_COLUMNS, [[
        stats.di, stats.gini, attribution.completeness_residual,
        attribution.d_input, attribution.d_baseline, degenerate,
    ]])
    diag_rows = [
        [k, diag.alphas[k], diag.detector_curve[k], diag.path_speed[k],
         diag.cumulative_attribution[k]]
        for k in range(diag.alphas.size)
    ]
    _write_csv(out / "diagnostics.csv", DIAGNOSTICS_CSV_COLUMNS, diag_rows)
    _write_manifest(out, args, [args.model, args.image])
    return 0


def _evaluate_pair(job: dict):
    """One (image, model) cell of a batch sweep; runs in a worker process."""
    net = load_weights(job["model_path"])
    lr = _load_lr_for(net, job["image_path"])
    det_args = argparse.Namespace(**job["det"])
    det = _detector_for(det_args, net, lr.shape)
    cfg = PathConfig(**job["cfg"])
    attribution, _ = lam_with_diagnostics(net, lr, det, cfg)
    stats = diffusion_stats(attribution)
    psnr_db = None
    if job["hr_path"] is not None:
        hr = load_image(job["hr_path"])
        if hr.shape[0] == 1 and net.input_channels == 3:
            hr = np.repeat(hr, 3, axis=0)
        sr = np.clip(net.forward(Tensor(lr)).data, 0.0, 1.0)
        psnr_db = psnr(sr, hr)
    return {
        "image_id": job["image_id"],
        "model_id": job["model_id"],
        "di": stats.di,
        "gini": stats.gini,
        "psnr_db": psnr_db,
        "completeness_rel": attribution.completeness_residual,
        "d_input": attribution.d_input,
        "d_baseline": attribution.d_baseline,
        "m": cfg.steps,
        "sigma": cfg.sigma,
        "patch": det.side,
        "x": det.x,
        "y": det.y,
    }


def cmd_batch(args) -> int:
    image_paths = sorted(p for p in Path(args.images).iterdir()
                         if p.suffix.lower() in _IMAGE_SUFFIXES)
    model_paths = sorted(Path(args.models).glob(f"*{_MODEL_SUFFIX}"))
    if not image_paths:
        raise DataError(f"no images found under {args.images}")
    if not model_paths:
        raise DataError(f"no {_MODEL_SUFFIX} files found under {args.models}")
    hr_lookup = {}
    if args.hr is not None:
        hr_lookup = {p.stem: p for p in Path(args.hr).iterdir()
                     if p.suffix.lower() in _IMAGE_SUFFIXES}

    det_flags = {"patch": args.patch, "x": args.x, "y": args.y,
                 "lr_coords": args.lr_coords}
    cfg_flags = {"baseline": args.baseline, "path": args.path,
                 "sigma": args.sigma, "steps": args.steps}
    jobs = [
        {
            "image_id": img.stem, "model_id": mdl.stem,
            "image_path": str(img), "model_path": str(mdl),
            "hr_path": str(hr_lookup[img.stem]) if img.stem in hr_lookup else None,
            "det": det_flags, "cfg": cfg_flags,
        }
        for img in image_paths for mdl in model_paths
    ]

    rows = []
    failures = 0
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_evaluate_pair_safe, jobs))
    else:
        outcomes = [_evaluate_pair_safe(job) for job in jobs]
    for job, outcome in zip(jobs, outcomes):
        if isinstance(outcome, str):
            failures += 1
            print(f"warning: skipped {job['image_id']} x {job['model_id']}: {outcome}",
                  file=sys.stderr)
        else:
            rows.append(outcome)
    if not rows:
        raise DataError(f"all {failures} batch items failed")

    rows.sort(key=lambda r: (r["image_id"], r["model_id"]))
    table = [[r[c] for c in RESULTS_CSV_COLUMNS] for r in rows]
    table.extend(_summary_rows(rows))

    out = _out_dir(args)
    _write_csv(out / "results.csv", RESULTS_CSV_COLUMNS, table)
    _write_manifest(out, args, [*image_paths, *model_paths])
    return 0


def _evaluate_pair_safe(job: dict):
    try:
        return _evaluate_pair(job)
    except (LamError, OSError) as exc:
        return f"error[{type(exc).__name__}]: {exc}"


def _summary_rows(rows: list) -> list:
    """DI-vs-PSNR correlation across models, averaged over the image set.

    Emitted as two trailing rows with the coefficient in the ``di``
    column; requires at least 3 models with PSNR values.
    """
    by_model: dict = {}
    for row in rows:
        if row["psnr_db"] is not None and math.isfinite(row["psnr_db"]):
            by_model.setdefault(row["model_id"], []).append((row["di"], row["psnr_db"]))
    if len(by_model) < 3:
        return []
    mean_di = [float(np.mean([d for d, _ in pairs])) for pairs in by_model.values()]
    mean_psnr = [float(np.mean([p for _, p in pairs])) for pairs in by_model.values()]
    try:
        pearson, spearman = correlate(mean_di, mean_psnr)
    except NumericError:
        return []
    blank = [""] * (len(RESULTS_CSV_COLUMNS) - 3)
    return [
        ["summary:pearson_di_psnr", "all", pearson, *blank],
        ["summary:spearman_di_psnr", "all", spearman, *blank],
    ]


def cmd_verify(args) -> int:
    net = load_weights(args.model)
    for name, tensor in net.weights():
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError(f"non-finite values in weight tensor {name}")

    rng = np.random.default_rng(args.seed)
    checks: list[tuple[str, bool, str]] = []

    from .engine import conv2d, pixel_shuffle, prelu, relu  # local names for probes

    kernel = Tensor(rng.standard_normal((2, 3, 3, 3)).astype(np.float32) * 0.5)
    bias = Tensor(rng.standard_normal(2).astype(np.float32) * 0.1)
    slope = Tensor(np.asarray([0.3], np.float32))
    flat = rng.standard_normal((3, 8, 8)).astype(np.float32)
    op_probes = [
        ("op conv2d", lambda t: conv2d(t, kernel, bias, 1).sum(), flat),
        ("op pixel_shuffle", lambda t: pixel_shuffle(t, 2).sum(),
         rng.standard_normal((4, 8, 8)).astype(np.float32)),
        ("op relu", lambda t: relu(t).sum(), flat),
        ("op prelu", lambda t: prelu(t, slope).sum(), flat),
        ("op abs+sum", lambda t: abs(t).sum(), flat),
    ]
    for name, fn, probe_input in op_probes:
        report = gradcheck(fn, probe_input, num_coords=50, rng=rng)
        checks.append((name, report.ok,
                       f"max rel err {report.max_rel_err:.2e}, {report.checked} coords"))

    size = args.size
    lr = _smooth_test_image(net.input_channels, size, args.seed)
    det = PatchDetector(x=(size * net.scale - 8) // 2, y=(size * net.scale - 8) // 2, side=8)

    def composite(t: Tensor):
        from .attribution import detect
        return detect(net.forward(t), det)

    report = gradcheck(composite, lr, num_coords=80, rng=rng)
    checks.append(("detector gradient vs finite differences", report.ok,
                   f"max rel err {report.max_rel_err:.2e}, {report.checked} coords"))

    residuals = {}
    for steps in (25, 50, 100, 200):
        cfg = PathConfig(sigma=2.0, steps=steps)
        attribution, _ = lam_with_diagnostics(net, lr, det, cfg)
        residuals[steps] = attribution.completeness_residual
    ladder = " ".join(f"m={m}:{residuals[m]:.4f}" for m in sorted(residuals))
    checks.append(("completeness residual at m=100 within 2%",
                   residuals[100] <= 0.02, ladder))
    checks.append(("completeness residual shrinks from m=25 to m=200",
                   residuals[200] <= residuals[25] + 1e-6, ladder))

    analytic = receptive_field(net)
    measured = probe_receptive_field(net, analytic + 8, seed=args.seed)
    checks.append(("receptive field matches impulse probe",
                   analytic == measured, f"analytic {analytic}, probe {measured}"))

    vmap = vanilla_gradient(net, lr, det)
    r0, r1, c0, c1 = support_window(det, net.scale, analytic, lr.shape)
    outside = np.abs(vmap.values).sum(axis=0)
    outside[r0:r1, c0:c1] = 0.0
    checks.append(("attribution confined to receptive-field window",
                   not np.any(outside), f"window rows {r0}:{r1} cols {c0}:{c1}"))

    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        if not ok:
            failed += 1
    return 1 if failed else 0


def _smooth_test_image(channels: int, size: int, seed: int) -> np.ndarray:
    """A deterministic smooth texture for self-checks."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((channels, size, size), dtype=np.float64)
    for c in range(channels):
        for _ in range(3):
            fy, fx = rng.uniform(0.05, 0.35, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[c] += rng.uniform(0.1, 0.35) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    out = (out - out.min()) / max(out.max() - out.min(), 1e-9)
    return out.astype(np.float32)


def cmd_train(args) -> int:
    if args.model is not None:
        net = load_weights(args.model)
    elif args.arch == "plain":
        net = build_plain_cnn(args.depth, args.width, args.scale, args.seed)
    elif args.arch == "residual":
        net = build_residual_net(args.blocks, args.width, args.scale, args.seed)
    else:
        raise ConfigError("cmd_train needs either --model or --arch")
    image_paths = sorted(p for p in Path(args.images).iterdir()
                         if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not image_paths:
        raise DataError(f"no images found under {args.images}")
    hr_images = []
    for path in image_paths:
        image = load_image(path)
        if image.shape[0] == 1 and net.input_channels == 3:
            image = np.repeat(image, 3, axis=0)
        hr_images.append(image)
    cfg = TrainConfig(learning_rate=args.learning_rate, iterations=args.iterations,
                      patch_size=args.patch_size, minibatch=args.minibatch,
                      seed=args.seed)
    train_tiny(net, hr_images, cfg)
    save_weights(net, args.out)
    return 0


def cmd_curate(args) -> int:
    models = [load_weights(p) for p in args.models]
    scales = {m.scale for m in models}
    if len(scales) != 1:
        raise ConfigError(f"curation models disagree on scale: {sorted(scales)}")
    scale = scales.pop()
    report = curate(args.images, models, args.count, args.sub_image, scale, args.seed)

    out = _out_dir(args)
    rows = [[c.image_id, c.mean_psnr_db, c.var_psnr, c.rank, c.selected]
            for c in report.candidates]
    _write_csv(out / "report.csv", CURATE_CSV_COLUMNS, rows)

    chosen = set(report.selected_ids)
    (out / "hr").mkdir(exist_ok=True)
    (out / "lr").mkdir(exist_ok=True)
    for image_id, crop in enumerate_candidates(args.images, args.sub_image, scale,
                                               args.seed):
        if image_id in chosen:
            save_image(crop, out / "hr" / f"{image_id}.png")
            save_image(downsample(crop, scale), out / "lr" / f"{image_id}.png")
    _write_manifest(out, args, list(args.models))
    return 0


def cmd_compare(args) -> int:
    nets = [load_weights(p) for p in args.models]
    scales = {net.scale for net in nets}
    if len(scales) != 1:
        raise ConfigError(f"compared models disagree on scale: {sorted(scales)}")
    cfg = _path_config(args)
    maps = []
    for net in nets:
        lr = _load_lr_for(net, args.image)
        det = _detector_for(args, net, lr.shape)
        attribution, _ = lam_with_diagnostics(net, lr, det, cfg)
        maps.append(normalize_for_viz(attribution))
    consensus, difference = area_of_interest(maps, args.threshold)

    out = _out_dir(args)
    _render_heat_png(kde_heatmap(consensus, args.bandwidth).grid, 0, out / "consensus.png")
    _render_heat_png(kde_heatmap(difference, args.bandwidth).grid, 2, out / "difference.png")
    _write_manifest(out, args, [*args.models, args.image])
    return 0


def cmd_rf(args) -> int:
    if args.model is not None:
        net = load_weights(args.model)
    elif args.arch == "plain":
        net = build_plain_cnn(args.depth, args.width, args.scale, args.seed)
    elif args.arch == "residual":
        net = build_residual_net(args.blocks, args.width, args.scale, args.seed)
    else:
        net = build_linear_upsampler(args.scale)
    print(receptive_field(net))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
