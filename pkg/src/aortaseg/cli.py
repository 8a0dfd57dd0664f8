"""Command-line entry point tying the pipeline together.

Subcommands: phantom, split, train, infer, evaluate, mesh, report.
Usage/config errors exit with status 2, runtime failures with 1; every
run writes a JSON manifest (config snapshot, seeds, versions, timings)
beside its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path


def _manifest(path: Path, command: str, args: dict, started: float, **extra) -> None:
    import numpy
    import torch

    from . import __version__

    payload = {
        "command": command,
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in args.items()},
        "versions": {
            "aortaseg": __version__,
            "python": sys.version.split()[0],
            "numpy": numpy.__version__,
            "torch": torch.__version__,
        },
        "started_unix": started,
        "duration_s": time.time() - started,
    }
    payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=str)
        f.write("\n")


def _parse_triple(text: str, cast=int) -> tuple:
    parts = [cast(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(parts)


def cmd_phantom(args) -> int:
    from .phantom import PhantomSpec, generate_dataset

    started = time.time()
    spec = PhantomSpec.for_shape(args.shape)
    generate_dataset(args.n, args.out, seed=args.seed, spec=spec, offset_fraction=args.offset_fraction)
    _manifest(
        Path(args.out) / "manifest.json", "phantom",
        {"n": args.n, "out": args.out, "seed": args.seed, "shape": args.shape,
         "offset_fraction": args.offset_fraction},
        started,
    )
    print(f"wrote {args.n} phantom cases + dataset.json to {args.out}")
    return 0


def cmd_split(args) -> int:
    from .train import load_datalist, make_folds, save_datalist

    started = time.time()
    entries = load_datalist(args.datalist)
    folds = make_folds([e["image"] for e in entries], args.k, args.seed)
    for entry, fold in zip(entries, folds):
        entry["fold"] = fold
    out = Path(args.out)
    save_datalist(entries, out)
    _manifest(
        out.with_suffix(".manifest.json"), "split",
        {"datalist": args.datalist, "k": args.k, "seed": args.seed, "out": args.out},
        started,
    )
    print(f"assigned {len(entries)} cases to {args.k} folds -> {out}")
    return 0


def cmd_train(args) -> int:
    from .train import experiment_config_snapshot, load_datalist, load_experiment_config, train_all

    started = time.time()
    config = load_experiment_config(args.config)
    datalist = load_datalist(config["datalist"])
    out_dir = Path(args.out)
    paths = train_all(config["train"], datalist, out_dir, dataroot=config["dataroot"], resume=args.resume)
    _manifest(
        out_dir / "manifest.json", "train",
        {"config": args.config, "out": args.out, "resume": args.resume},
        started,
        experiment=experiment_config_snapshot(config),
        checkpoints=[str(p) for p in paths],
    )
    print(f"trained {len(paths)} checkpoints -> {out_dir}")
    return 0


def cmd_infer(args) -> int:
    from .infer import InferConfig, two_stage_predict
    from .volume import load_volume, save_volume

    started = time.time()
    ckpt_dir = Path(args.ckpt_dir)
    checkpoints = sorted(ckpt_dir.glob("fold*_rep*/best.ckpt"))
    if not checkpoints:
        raise ValueError(f"no checkpoints under {ckpt_dir} (expected fold*_rep*/best.ckpt)")
    cfg = InferConfig(roi_size=args.roi, overlap=args.overlap)
    raw = load_volume(args.input)
    mask, report = two_stage_predict(
        checkpoints, raw, cfg,
        post_filter=not args.no_postfilter,
        paper_literal=args.paper_literal,
    )
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(mask, out)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2, default=str)
            f.write("\n")
    _manifest(
        out.parent / (out.name.split(".")[0] + ".manifest.json"), "infer",
        {"ckpt_dir": args.ckpt_dir, "input": args.input, "output": args.output,
         "roi": args.roi, "overlap": args.overlap, "paper_literal": args.paper_literal,
         "no_postfilter": args.no_postfilter},
        started,
        infer_config=asdict(cfg),
        report=report,
    )
    print(f"mask -> {out} (fallback={report['fallback']}, bounds={report['bounds']})")
    return 0


def cmd_evaluate(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .metrics import EvalResult, dice_score, hd95, write_eval_report
    from .volume import load_volume

    started = time.time()
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = sorted(p for p in pred_dir.iterdir() if p.name.endswith((".nii", ".nii.gz", ".vol")))
    if not pred_files:
        raise ValueError(f"no volumes found in {pred_dir}")

    def one(pred_path: Path) -> EvalResult:
        gt_path = gt_dir / pred_path.name
        if not gt_path.is_file():
            raise IOError(f"missing ground truth for {pred_path.name}")
        pred = load_volume(pred_path)
        gt = load_volume(gt_path)
        case_id = pred_path.name.split(".")[0]
        return EvalResult(case_id, dice_score(pred, gt), hd95(pred, gt))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(one, pred_files))
    else:
        results = [one(p) for p in pred_files]

    out = Path(args.out)
    write_eval_report(results, out)
    _manifest(
        out.with_suffix(".manifest.json"), "evaluate",
        {"pred": args.pred, "gt": args.gt, "out": args.out, "jobs": args.jobs},
        started,
        n_cases=len(results),
    )
    mean_dice = sum(r.dice for r in results) / len(results)
    print(f"evaluated {len(results)} cases -> {out} (mean dice {mean_dice:.4f})")
    return 0


def cmd_mesh(args) -> int:
    from .mesh import marching_cubes, mesh_stats, save_mesh
    from .volume import load_volume

    started = time.time()
    mask = load_volume(args.input)
    mesh = marching_cubes(mask, smooth_iters=args.smooth_iters)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out, format=args.format)
    stats = mesh_stats(mesh)
    _manifest(
        out.parent / (out.stem + ".manifest.json"), "mesh",
        {"input": args.input, "output": args.output, "format": args.format,
         "smooth_iters": args.smooth_iters},
        started,
        stats=stats,
    )
    print(
        f"mesh -> {out} ({len(mesh.triangles)} triangles, watertight={stats['watertight']}, "
        f"volume={stats['volume']:.1f} mm^3)"
    )
    return 0


def cmd_report(args) -> int:
    import csv

    rows = []
    with open(args.eval) as f:
        for row in csv.DictReader(f):
            rows.append(row)
    if not rows:
        raise ValueError(f"{args.eval}: empty evaluation report")
    cases = [r for r in rows if r["case_id"] not in ("mean", "median", "std")]
    summary = {r["case_id"]: r for r in rows if r["case_id"] in ("mean", "median", "std")}
    print(f"evaluation report: {args.eval}")
    print(f"{'case':<24} {'dice':>8} {'hd95 (mm)':>12}")
    for r in cases:
        print(f"{r['case_id']:<24} {float(r['dice']):>8.4f} {float(r['hd95']):>12.4f}")
    for name in ("mean", "median", "std"):
        if name in summary:
            r = summary[name]
            print(f"{name:<24} {float(r['dice']):>8.4f} {float(r['hd95']):>12.4f}")
    if args.infer_report:
        for path in args.infer_report:
            with open(path) as f:
                rep = json.load(f)
            print(f"inference report {path}: fallback={rep.get('fallback')}, bounds={rep.get('bounds')}, "
                  f"timings={ {k: round(v, 3) for k, v in rep.get('timings', {}).items()} }")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aortaseg",
        description="Desk-scale 3D aorta segmentation pipeline (train, ensemble inference, evaluation, meshing).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic vessel phantoms with ground truth")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=lambda s: _parse_triple(s, int), default=(64, 64, 64),
                   help="volume shape, e.g. 64 or 64,64,64")
    p.add_argument("--offset-fraction", type=float, default=0.0,
                   help="fraction of cases exported with a +1024 intensity offset")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("split", help="assign k-fold splits to a datalist")
    p.add_argument("--datalist", required=True, help="input JSON with a 'training' list")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="dataset.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the folds x repeats checkpoint grid")
    p.add_argument("--config", required=True, help="experiment YAML (modality/datalist/dataroot + overrides)")
    p.add_argument("--out", default="ckpt", help="checkpoint directory")
    p.add_argument("--no-resume", dest="resume", action="store_false",
                   help="retrain even if checkpoints exist")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="two-stage ensemble prediction on one volume")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--roi", type=lambda s: _parse_triple(s, int), default=None,
                   help="sliding-window size (default: training crop)")
    p.add_argument("--overlap", type=float, default=0.25)
    p.add_argument("--paper-literal", action="store_true",
                   help="stage-2 models are z-score repeats run on the renormalized image")
    p.add_argument("--no-postfilter", action="store_true", help="skip largest-component filtering")
    p.add_argument("--report", default=None, help="write the JSON inference report here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="dice + hd95 report over prediction/ground-truth directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default="evaluation.csv")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mesh", help="marching-cubes surface from a binary mask")
    p.add_argument("--input", required=True, help="binary mask volume")
    p.add_argument("--output", required=True)
    p.add_argument("--format", choices=("stl_binary", "obj"), default="stl_binary")
    p.add_argument("--smooth-iters", type=int, default=0)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("report", help="render an evaluation CSV (and inference reports) as text")
    p.add_argument("--eval", required=True, help="evaluation CSV from the evaluate subcommand")
    p.add_argument("--infer-report", action="append", default=None,
                   help="inference report JSON (repeatable)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI failure surface
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
