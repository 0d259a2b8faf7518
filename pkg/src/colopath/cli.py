"""``colopath`` command line: synth, ingest, stats, train, sweep, calibrate, eval, explain, report.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema

from . import ingest
from .calibrate import CalibrationResult, apply_temperature, expected_calibration_error, fit_temperature
from .config import ConfigError, ModalityConfig, RunConfig, config_hash, default_output_root
from .logits import LogitMatrix
from .metrics import (
    classification_report,
    confidence_report,
    video_accuracy,
    video_truths,
    aggregate_video,
    write_metrics_json,
    write_videos_csv,
)
from .trainer import RunResult, run_seed_sweep, seed_score, summarize_scores, train

log = logging.getLogger("colopath")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["name", "modality", "metric", "config_hash", "seeds", "mean", "std"],
    "properties": {
        "name": {"type": "string"},
        "modality": {"enum": ["histology", "colonoscopy"]},
        "metric": {"enum": ["test_accuracy", "video_accuracy"]},
        "config_hash": {"type": "string"},
        "mean": {"type": "number", "minimum": 0, "maximum": 1},
        "std": {"type": "number", "minimum": 0},
        "seeds": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed", "score", "temperature"],
                "properties": {
                    "seed": {"type": "integer"},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "temperature": {"type": "number", "exclusiveMinimum": 0},
                    "stop_reason": {"enum": ["early_stop", "max_epochs"]},
                    "epochs": {"type": "integer", "minimum": 1},
                    "best_epoch": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _run_config(args) -> RunConfig:
    """Merge ``--config`` file (if any) with command-line overrides."""
    file_data: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if isinstance(file_data.get("modality"), dict):
        modality_data = dict(file_data["modality"])
        run_data = {k: v for k, v in file_data.items() if k != "modality"}
    else:
        modality_data = {k: v for k, v in file_data.items()
                         if k not in ("manifest", "name", "output_root", "stats_path")}
        run_data = {k: file_data[k] for k in ("manifest", "name", "output_root", "stats_path") if k in file_data}

    overrides: dict = {}
    flag_map = {
        "modality": "modality", "backbone": "architecture", "pretrained": "pretrained",
        "epochs": "max_epochs", "batch_size": "batch_size", "input_side": "input_side",
        "lr": "lr_init", "threads": "num_threads", "workers": "num_workers", "seeds": "seeds",
        "patience": "early_stop_patience",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = _parse_value(value)
    if "modality" in overrides and "modality" in modality_data and overrides["modality"] != modality_data["modality"]:
        raise ConfigError("--modality conflicts with the config file")
    modality_data.update(overrides)
    if "modality" not in modality_data:
        raise ConfigError("a modality is required (--modality or config file)")
    manifest_path = args.manifest or run_data.get("manifest")
    if not manifest_path:
        raise ConfigError("a manifest is required (--manifest or config file)")
    name = args.name or run_data.get("name")
    if not name:
        raise ConfigError("a run name is required (--name or config file)")
    if not Path(manifest_path).is_file():
        raise ConfigError(f"manifest not found: {manifest_path}")
    return RunConfig(
        modality=ModalityConfig.from_dict(modality_data),
        manifest=str(Path(manifest_path).resolve()),
        name=name,
        output_root=str(args.output_root or run_data.get("output_root") or default_output_root()),
        stats_path=args.stats or run_data.get("stats_path"),
        overrides=overrides,
    )


def _load_stats(rc: RunConfig):
    from .transforms import NormalizationStats

    if rc.stats_path is None:
        return None
    path = Path(rc.stats_path)
    if not path.is_file():
        raise ConfigError(f"stats file not found: {path}")
    return NormalizationStats.from_json(path)


def _seed_dirs(run: Path, seed: int | None) -> list[Path]:
    if not run.is_dir():
        raise ConfigError(f"run directory not found: {run}")
    if seed is not None:
        d = run / str(seed)
        if not d.is_dir():
            raise ConfigError(f"seed directory not found: {d}")
        return [d]
    dirs = sorted((d for d in run.iterdir() if d.is_dir() and d.name.lstrip("-").isdigit()),
                  key=lambda d: int(d.name))
    if not dirs:
        if (run / "config.json").is_file() and run.name.lstrip("-").isdigit():
            return [run]
        raise ConfigError(f"no seed directories under {run}")
    return dirs


def _require(path: Path) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing file: {path}")
    return path


def _seed_config(seed_dir: Path) -> RunConfig:
    return RunConfig.read(_require(seed_dir / "config.json"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    val = args.val_per_class if args.val_per_class is not None else max(1, args.per_class // 5)
    test = args.test_per_class if args.test_per_class is not None else max(1, args.per_class // 5)
    try:
        spec = ingest.SyntheticSpec(
            num_classes=args.classes, samples_per_class=(args.per_class, val, test),
            image_side=args.side, noise_std=args.noise, frames_per_video=args.frames_per_video,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = Path(args.out)
    payload = {
        "command": "synth", "seed": args.seed, "num_classes": spec.num_classes,
        "samples_per_class": list(spec.samples_per_class), "image_side": spec.image_side,
        "noise_std": spec.noise_std, "square_frac": spec.square_frac,
        "frames_per_video": spec.frames_per_video,
    }
    _write_json(out / "config.json", {**payload, "config_hash": config_hash(payload)})
    manifest = ingest.generate_synthetic(spec, args.seed, out)
    print(f"wrote {len(manifest.records)} images to {out} (manifest {out / 'manifest.csv'})")
    return 0


def cmd_ingest(args) -> int:
    out = Path(args.out)
    payload = {"command": "ingest", "modality": args.modality, "root": str(args.root),
               "ratios": args.ratios, "seed": args.seed, "class_names": args.class_names}
    _write_json(out.with_name(out.stem + ".config.json"), {**payload, "config_hash": config_hash(payload)})
    if args.modality == "histology":
        names = args.class_names or list(ingest.PATHMNIST_CLASSES)
        manifest = ingest.build_histology_manifest(args.root, names)
    else:
        names = args.class_names or list(ingest.COLONOSCOPY_CLASSES)
        root = Path(args.root)
        frames_out = Path(args.frames_out or out.parent / "frames")
        records = []
        for label, name in enumerate(names):
            class_dir = root / name
            if not class_dir.is_dir():
                raise ConfigError(f"missing class directory: {class_dir}")
            for video in sorted(p for p in class_dir.iterdir() if p.is_file()):
                records.extend(ingest.extract_frames(video, frames_out, label))
        manifest = ingest.split_videos(records, args.ratios, args.seed, names)
    manifest.to_csv(out)
    print(json.dumps(ingest.summarize(manifest), indent=2))
    return 0


def cmd_stats(args) -> int:
    from .transforms import compute_stats

    manifest = ingest.DatasetManifest.from_csv(args.manifest)
    stats = compute_stats(manifest, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stats.to_json(out)
    print(f"mean={stats.mean} std={stats.std} -> {out}")
    return 0


def _train_one(rc_dict: dict, seed: int) -> str:
    """Process-pool entry point; returns the result.json path."""
    rc = RunConfig.from_dict(rc_dict)
    manifest = ingest.DatasetManifest.from_csv(rc.manifest)
    seed_dir = rc.seed_dir(seed)
    train(rc.modality, manifest, seed, seed_dir, _load_stats(rc), rc.config_hash)
    return str(seed_dir / "result.json")


def _prepare_run(rc: RunConfig, seeds) -> None:
    rc.write(rc.run_dir / "config.json")
    for seed in seeds:
        rc.write(rc.seed_dir(seed) / "config.json", seed=seed)


def cmd_train(args) -> int:
    rc = _run_config(args)
    _prepare_run(rc, [args.seed])
    _train_one(rc.to_dict(), args.seed)
    res = RunResult.from_json(rc.seed_dir(args.seed) / "result.json")
    print(f"seed {args.seed}: {res.stop_reason} after {len(res.logs)} epochs, best epoch {res.best_epoch}; "
          f"test logits {res.test_logits_path}")
    return 0


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    seeds = rc.modality.seeds
    _prepare_run(rc, seeds)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_train_one, [rc.to_dict()] * len(seeds), seeds))
        results = [RunResult.from_json(rc.seed_dir(s) / "result.json") for s in seeds]
        scores = {r.seed: seed_score(LogitMatrix.from_csv(r.test_logits_path), rc.modality.modality,
                                     rc.modality.aggregation) for r in results}
        summary = {"modality": rc.modality.modality,
                   "metric": "video_accuracy" if rc.modality.modality == "colonoscopy" else "test_accuracy",
                   **summarize_scores(scores)}
    else:
        manifest = ingest.DatasetManifest.from_csv(rc.manifest)
        _, summary = run_seed_sweep(rc.modality, manifest, rc.run_dir, _load_stats(rc), rc.config_hash)
    _write_json(rc.run_dir / "sweep.json", summary)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_calibrate(args) -> int:
    for seed_dir in _seed_dirs(Path(args.run), args.seed):
        val = LogitMatrix.from_csv(_require(seed_dir / "logits" / "val.csv"))
        result = fit_temperature(val, args.bins)
        result.to_json(seed_dir / "calibration.json")
        print(f"{seed_dir.name}: T={result.temperature:.4f} NLL {result.nll_before:.4f} -> "
              f"{result.nll_after:.4f} ECE {result.ece_before:.4f} -> {result.ece_after:.4f}")
    return 0


def _temperature(seed_dir: Path) -> float:
    path = seed_dir / "calibration.json"
    return CalibrationResult.from_json(path).temperature if path.is_file() else 1.0


def evaluate_seed_dir(seed_dir: Path, aggregation: str | None = None, bins: int = 15) -> dict:
    """Write ``metrics.json`` (and ``videos.csv`` for video data) for one seed directory."""
    from .model import read_checkpoint_meta

    rc = _seed_config(seed_dir)
    test = LogitMatrix.from_csv(_require(seed_dir / "logits" / "test.csv"))
    T = _temperature(seed_dir)
    raw_probs = apply_temperature(test, 1.0)
    probs = apply_temperature(test, T)
    report = classification_report(probs, test.labels)
    payload = {
        **report.to_dict(),
        "temperature": T,
        "num_bins": bins,
        "ece_uncalibrated": expected_calibration_error(raw_probs, test.labels, bins),
        "ece_calibrated": expected_calibration_error(probs, test.labels, bins),
        "num_samples": len(test),
    }
    ckpt = seed_dir / "checkpoints" / "best.pt"
    if ckpt.is_file():
        meta = read_checkpoint_meta(ckpt)
        if meta.get("config_hash") != rc.config_hash:
            payload["warnings"].append(
                f"checkpoint config_hash {meta.get('config_hash')!r} does not match run config {rc.config_hash!r}"
            )
    if rc.modality.modality == "colonoscopy" or any(test.video_ids):
        rule = aggregation or rc.modality.aggregation
        truths = video_truths(test.labels, test.video_ids)
        rows = confidence_report(probs, test.video_ids, truths, rule)
        write_videos_csv(rows, seed_dir / "videos.csv")
        payload["aggregation"] = rule
        payload["video_accuracy"] = video_accuracy(aggregate_video(probs, test.video_ids, rule), truths)
        payload["num_videos"] = len(rows)
    write_metrics_json(payload, seed_dir / "metrics.json")
    return payload


def cmd_eval(args) -> int:
    for seed_dir in _seed_dirs(Path(args.run), args.seed):
        payload = evaluate_seed_dir(seed_dir, args.aggregation, args.bins)
        line = (f"{seed_dir.name}: accuracy {payload['accuracy']:.4f} macro F1 {payload['macro_f1']:.4f} "
                f"macro AUC {payload['macro_auc']} ECE {payload['ece_uncalibrated']:.4f} -> "
                f"{payload['ece_calibrated']:.4f}")
        if "video_accuracy" in payload:
            line += f" video accuracy {payload['video_accuracy']:.4f}"
        print(line)
    return 0


def cmd_explain(args) -> int:
    import torch

    from .explain import grad_cam, overlay
    from .model import load_checkpoint
    from .transforms import NormalizationStats, make_pipeline, resize_bilinear, to_tensor

    (seed_dir,) = _seed_dirs(Path(args.run), args.seed)[:1]
    rc = _seed_config(seed_dir)
    manifest = ingest.DatasetManifest.from_csv(rc.manifest)
    by_id = {r.sample_id: r for r in manifest.records}
    missing = [s for s in args.samples if s not in by_id]
    if missing:
        raise ConfigError(f"unknown sample id(s): {', '.join(missing)}")
    model, _ = load_checkpoint(_require(seed_dir / "checkpoints" / "best.pt"), rc.config_hash)
    stats = NormalizationStats.from_json(_require(seed_dir / "stats.json"))
    pipe = make_pipeline(stats, model.input_side)
    out_dir = seed_dir / "heatmaps"
    for sid in args.samples:
        raw = ingest.load_image(by_id[sid].source_path)
        x = pipe(raw)
        with torch.no_grad():
            pred = int(model(x.unsqueeze(0)).argmax())
        target = pred if args.target_class is None else args.target_class
        heat = grad_cam(model, x, target)
        img = resize_bilinear(to_tensor(raw), model.input_side).permute(1, 2, 0).numpy()
        path = out_dir / f"{sid}_{target}.png"
        overlay(img, heat, args.alpha, path)
        if args.csv:
            heat.to_csv(out_dir / f"{sid}_{target}.csv")
        print(f"{sid}: predicted {pred}, explained class {target} -> {path}")
    return 0


def build_report(run: Path) -> dict:
    """Collate a seed sweep from the run directory alone."""
    seed_dirs = _seed_dirs(run, None)
    rc = _seed_config(seed_dirs[0])
    modality = rc.modality.modality
    rows = []
    for d in seed_dirs:
        test = LogitMatrix.from_csv(_require(d / "logits" / "test.csv"))
        T = _temperature(d)
        row = {"seed": int(d.name), "score": seed_score(test, modality, rc.modality.aggregation, T),
               "temperature": T}
        if (d / "result.json").is_file():
            res = RunResult.from_json(d / "result.json")
            row.update(stop_reason=res.stop_reason, epochs=len(res.logs), best_epoch=res.best_epoch)
        rows.append(row)
    summary = summarize_scores({r["seed"]: r["score"] for r in rows})
    report = {
        "name": rc.name,
        "modality": modality,
        "metric": "video_accuracy" if modality == "colonoscopy" else "test_accuracy",
        "config_hash": rc.config_hash,
        "seeds": rows,
        "mean": summary["mean"],
        "std": summary["std"],
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    return report


def format_report(report: dict) -> str:
    lines = [f"run {report['name']} ({report['modality']}, {report['metric']})",
             f"{'seed':>6}  {'accuracy':>9}  {'stop':>10}  {'epochs':>6}"]
    for r in report["seeds"]:
        lines.append(f"{r['seed']:>6}  {100 * r['score']:>8.1f}%  {r.get('stop_reason', '-'):>10}  "
                     f"{r.get('epochs', '-'):>6}")
    lines.append(f"{'mean':>6}  {100 * report['mean']:>8.2f}%  std {100 * report['std']:.2f} pp")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    run = Path(args.run)
    report = build_report(run)
    _write_json(run / "report.json", report)
    text = format_report(report)
    (run / "report.txt").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run or modality config")
    p.add_argument("--modality", choices=["histology", "colonoscopy"])
    p.add_argument("--manifest")
    p.add_argument("--name")
    p.add_argument("--output-root", help="defaults to $COLOPATH_OUTPUT_ROOT or ./runs")
    p.add_argument("--stats", help="precomputed stats.json")
    p.add_argument("--backbone", choices=["resnet50", "tiny"])
    p.add_argument("--pretrained", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-side", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="colopath", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-pattern dataset")
    p.add_argument("--out", default="data/synthetic")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=40, help="train images per class")
    p.add_argument("--val-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--frames-per-video", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a manifest (and extract 1 fps frames)")
    p.add_argument("--modality", choices=["histology", "colonoscopy"], required=True)
    p.add_argument("--root", required=True, help="histology split root, or folder of <class>/ video dirs")
    p.add_argument("--out", required=True, help="manifest CSV path")
    p.add_argument("--frames-out", help="frame directory (colonoscopy)")
    p.add_argument("--class-names", nargs="+")
    p.add_argument("--ratios", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="per-channel normalization stats of a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train", choices=ingest.SPLITS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train one seed")
    _add_run_options(p)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_train, seeds=None)

    p = sub.add_parser("sweep", help="train every configured seed")
    _add_run_options(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="fit temperature on validation logits")
    p.add_argument("--run", required=True, help="runs/<name> or runs/<name>/<seed>")
    p.add_argument("--seed", type=int)
    p.add_argument("--bins", type=int, default=15)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="metrics, video aggregation and confidence bands")
    p.add_argument("--run", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--aggregation", choices=["majority", "mean"])
    p.add_argument("--bins", type=int, default=15)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="Grad-CAM overlays for selected samples")
    p.add_argument("--run", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", nargs="+", required=True)
    p.add_argument("--class", dest="target_class", type=int, help="default: predicted class")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--csv", action="store_true", help="also write raw heatmap grids")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="collate a seed sweep")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ingest.ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
