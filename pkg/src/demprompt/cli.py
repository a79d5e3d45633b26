"""Command-line entry point: synth, train, classify, infer, mosaic, hydro, eval.

Each subcommand checks its inputs before it creates any output so a bad
invocation leaves nothing half-written.  JSON manifests and reports carry a
``schema_version``; figures are rendered next to them.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import hydrology, plotting
from .evaluation import StreamConfig, compare_report
from .model import SceneClassifier, WeightFileError, classify_scene, load_weights, save_weights
from .mosaic import BlendAccumulator, accumulate_patch, coverage_report, finalize
from .pipeline import (
    PipelineConfig,
    PipelineError,
    infer_patches,
    load_dataset,
    read_patch_set,
    read_rgb,
    save_sample,
    source_like,
    write_patch_set,
)
from .raster import RasterError, bilinear_resample, export_png, read_raster, write_raster
from .terrain import (
    SceneClass,
    carve_void,
    degrade_to_prompt,
    generate_terrain,
    hillshade,
    hole_mask,
    scene_params,
)
from .training import (
    MissingInitError,
    PromptKind,
    classifier_dataset,
    macro_f1,
    fit_classifier,
    train_from_samples,
)

log = logging.getLogger("demprompt")

EXIT_USAGE = 2
EXIT_NOT_IMPROVED = 3


class CommandError(Exception):
    """Raised for invalid invocations; reported as exit status 2."""


def thread_count(deterministic: bool) -> int:
    if deterministic:
        return 1
    raw = os.environ.get("P2D_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise CommandError(f"P2D_THREADS must be an integer, got {raw!r}")


@contextlib.contextmanager
def thread_limits(n: int):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CommandError(f"input {p} does not exist")


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _sample_seed(cfg: PipelineConfig, scene: SceneClass, k: int) -> int:
    return cfg.seed * 100_000 + scene.index * 10_000 + k


def _make_sample(cfg: PipelineConfig, scene: SceneClass, seed: int, size: int):
    params = dataclasses.replace(scene_params(scene, seed, size), **cfg.terrain)
    params.validate()
    return generate_terrain(params)


# ------------------------------------------------------------------ subcommands


def cmd_synth(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    n = args.n if args.n is not None else cfg.samples_per_class
    if n < 1:
        raise CommandError("--n must be >= 1")
    if out.exists() and not out.is_dir():
        raise CommandError(f"{out} exists and is not a directory")
    scenes = [SceneClass(s) for s in cfg.scenes]
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise CommandError(f"{out} is not writable")
    entries = []
    for scene in scenes:
        for k in range(n):
            seed = _sample_seed(cfg, scene, k)
            sample = _make_sample(cfg, scene, seed, cfg.sample_size)
            rel = f"{scene.value.lower()}/{k:05d}"
            manifest = save_sample(sample, out / rel)
            entries.append({"path": rel, "seed": seed, "scene_class": manifest["scene_class"]})
    if cfg.scene_size:
        for scene in scenes:
            _write_scene(cfg, scene, out / "scenes" / scene.value.lower())
    counts = {s.value: sum(e["scene_class"] == s.value for e in entries) for s in scenes}
    _write_json(out / "manifest.json", {"schema_version": 1, "seed": cfg.seed, "counts": counts,
                                        "samples": entries, "config": cfg.to_dict()})
    print(f"wrote {len(entries)} samples to {out} ({counts})")
    return 0


def _write_scene(cfg: PipelineConfig, scene: SceneClass, out: Path) -> None:
    """One large scene with every prompt regime and its upsampled baseline."""
    tc = cfg.train_config()
    seed = _sample_seed(cfg, scene, 9_999)
    sample = _make_sample(cfg, scene, seed, cfg.scene_size)
    save_sample(sample, out)
    spec = tc.prompt
    low = degrade_to_prompt(sample.dsm, spec.factor, spec.bias_sigma, spec.canopy_bias, sample.canopy_mask, seed)
    write_raster(low, out / "prompt_lowres.r32g")
    up = sample.dsm.with_values(bilinear_resample(low, sample.dsm.rows, sample.dsm.cols).values)
    write_raster(up, out / "baseline_lowres.r32g")
    void = carve_void(sample.dsm, low, spec.hole_fraction)
    write_raster(void, out / "prompt_void.r32g")
    write_raster(void, out / "baseline_void.r32g")
    mask = hole_mask(sample.dsm.shape, spec.hole_fraction)
    write_raster(sample.dsm.with_values(mask.astype(np.float32)), out / "hole.r32g")
    write_raster(sample.dtm, out / "prompt_update.r32g")
    write_raster(sample.dtm, out / "baseline_update.r32g")


def cmd_train(cfg: PipelineConfig, args) -> int:
    task = PromptKind(args.task).value
    scene = SceneClass(args.scene)
    tc = cfg.train_config()
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    registry = cfg.open_registry()
    init = None
    if task != PromptKind.LOW_RES.value:
        key = registry.key(PromptKind.LOW_RES.value, scene)
        if key not in registry.entries:
            raise MissingInitError(f"task {task!r} must start from a low-res checkpoint; registry has no {key}")
        _require_files(registry.path(PromptKind.LOW_RES.value, scene))
        init = registry.load(PromptKind.LOW_RES.value, scene)
    samples = load_dataset(args.data, scene)
    out = Path(args.out)
    result = train_from_samples(task, samples, tc, init)
    out.mkdir(parents=True, exist_ok=True)
    wpath = out / f"{task}_{scene.value.lower()}.p2dw"
    save_weights(result.model, wpath)
    manifest = result.manifest(tc, task, scene, str(wpath))
    _write_json(out / f"{task}_{scene.value.lower()}.json", manifest)
    if not args.no_figures:
        plotting.loss_curves(result.history, str(out / f"{task}_{scene.value.lower()}_loss.png"))
    registry.register(task, scene, wpath.resolve())
    Path(cfg.registry).parent.mkdir(parents=True, exist_ok=True)
    registry.save(cfg.registry)
    last = result.history[-1]
    print(f"trained {task}/{scene.value}: val loss {result.history[0]['val_loss']:.5f} -> "
          f"{last['val_loss']:.5f}; weights {wpath}")
    return 0


def cmd_classify(cfg: PipelineConfig, args) -> int:
    if args.train:
        if not args.data:
            raise CommandError("classify --train needs --data")
        samples = [s for scene in SceneClass for s in load_dataset(args.data, scene)]
        rgb = np.stack([np.stack([ch.values for ch in s.rgb]) for s in samples]).astype(np.float32)
        labels = np.array([s.scene_class.index for s in samples])
        out = Path(args.out or cfg.classifier)
        model, curve = fit_classifier(cfg.model_config(), rgb, labels,
                                      epochs=args.epochs or cfg.classifier_epochs, seed=cfg.seed)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_weights(model, out)
        _write_json(out.with_suffix(".json"), {"schema_version": 1, "loss": curve, "weights": str(out)})
        print(f"classifier trained on {len(labels)} scenes; weights {out}")
        return 0
    if args.rgb:
        weights = args.weights or cfg.classifier
        _require_files(weights, *args.rgb)
        model = load_weights(weights)
        planes = read_rgb(args.rgb)
        scene, probs = classify_scene(np.stack([p.values for p in planes]), model)
        print(json.dumps({"scene_class": scene.value,
                          "probabilities": dict(zip([c.value for c in SceneClass], map(float, probs)))}))
        return 0
    if args.eval:
        weights = args.weights or cfg.classifier
        _require_files(weights)
        model = load_weights(weights)
        rgb, labels = classifier_dataset(range(args.eval_seed, args.eval_seed + args.eval), cfg.sample_size)
        pred = np.concatenate([np.argmax(model.probabilities(rgb[i : i + 32]), -1) for i in range(0, len(rgb), 32)])
        f1, per_class = macro_f1(pred, labels)
        print(json.dumps({"macro_f1": f1, "per_class": dict(zip([c.value for c in SceneClass], per_class))}))
        return 0
    raise CommandError("classify needs one of --train, --rgb or --eval")


def cmd_infer(cfg: PipelineConfig, args) -> int:
    task = PromptKind(args.task).value
    _require_files(args.prompt, *args.rgb)
    rgb = read_rgb(args.rgb)
    prompt = read_raster(args.prompt)
    if rgb[0].rows < cfg.tile_size or rgb[0].cols < cfg.tile_size:
        raise CommandError(f"input grid {rgb[0].shape} is smaller than tile_size {cfg.tile_size}")
    mc = cfg.model_config()
    if cfg.tile_size != mc.input_size:
        raise CommandError(f"tile_size {cfg.tile_size} must equal the model input size {mc.input_size}")
    registry = cfg.open_registry()
    force = SceneClass(args.force_class) if args.force_class else None
    wanted = [force] if force else list(SceneClass)
    models = {}
    for scene in wanted:
        key = registry.key(task, scene)
        if key in registry.entries:
            _require_files(registry.path(task, scene))
            models[scene] = registry.load(task, scene)
    if not models:
        raise CommandError(f"no weights registered for task {task!r}; available: {sorted(registry.entries)}")
    classifier = None
    if force is None:
        _require_files(cfg.classifier)
        classifier = load_weights(cfg.classifier)
        if not isinstance(classifier, SceneClassifier):
            raise CommandError(f"{cfg.classifier} is not a scene classifier")
    threads = thread_count(cfg.deterministic)
    results = infer_patches(rgb, prompt, models, cfg.tile_size, cfg.overlap, classifier, force,
                            threads=threads, norm_scale=cfg.train_config().norm_scale)
    manifest = write_patch_set(results, rgb[0], Path(args.out), task, cfg.tile_size, cfg.overlap)
    routed = {}
    for e in manifest["patches"]:
        routed[e["scene_class"]] = routed.get(e["scene_class"], 0) + 1
    print(f"predicted {len(results)} patches into {args.out} (routing {routed})")
    return 0


def cmd_mosaic(cfg: PipelineConfig, args) -> int:
    manifest, patches = read_patch_set(args.patches)
    like = source_like(manifest)
    out = Path(args.out)
    acc = BlendAccumulator.like(like)
    for patch, entry in zip(patches, manifest["patches"]):
        accumulate_patch(acc, patch, tuple(entry["placement"]))
    dem = finalize(acc)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_raster(dem, out)
    export_png(hillshade(dem), out.with_suffix(".png"))
    report = {"schema_version": 1, **coverage_report(acc), "patches": len(patches)}
    _write_json(out.with_suffix(".coverage.json"), report)
    print(json.dumps(report))
    return 0


def _stream_config(cfg: PipelineConfig, args) -> StreamConfig:
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    radii = args.radii if args.radii is not None else cfg.radii
    if threshold is not None and threshold < 1:
        raise CommandError("--threshold must be >= 1")
    if any(r < 0 for r in radii):
        raise CommandError("--radii must be >= 0")
    return StreamConfig(threshold=threshold, radii_cells=tuple(radii))


def cmd_hydro(cfg: PipelineConfig, args) -> int:
    _require_files(args.dem, args.truth)
    sc = _stream_config(cfg, args)
    dem = read_raster(args.dem)
    truth = read_raster(args.truth) if args.truth else None
    if truth is not None and truth.shape != dem.shape:
        raise CommandError(f"truth {truth.shape} and dem {dem.shape} differ in shape")
    out = Path(args.out)
    threshold = sc.threshold_for(dem.rows * dem.cols)
    filled = hydrology.fill_depressions(dem)
    directions = hydrology.d8_flow_direction(filled)
    acc = hydrology.flow_accumulation(directions)
    streams = hydrology.extract_streams(acc, threshold)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(filled, out / "filled.r32g")
    write_raster(dem.with_values(directions.astype(np.float32)), out / "d8.r32g")
    write_raster(dem.with_values(acc.astype(np.float32)), out / "accumulation.r32g")
    write_raster(dem.with_values(streams.astype(np.float32)), out / "streams.r32g")
    report = {"schema_version": 1, "threshold": threshold, "stream_cells": int(streams.sum()), "metrics": []}
    if truth is not None:
        t_streams = hydrology.stream_network(truth, threshold)
        for r in sc.radii_cells:
            rm = float(r) * dem.cell_size
            m = hydrology.segmentation_metrics(hydrology.buffer_mask(streams, rm, dem.cell_size),
                                               hydrology.buffer_mask(t_streams, rm, dem.cell_size))
            report["metrics"].append({"radius_cells": float(r), "radius_m": rm, **m})
        if not args.no_figures:
            plotting.stream_overlay(dem, t_streams, streams, str(out / "streams.png"))
    _write_json(out / "hydro.json", report)
    print(json.dumps({k: v for k, v in report.items() if k != "metrics"}))
    for m in report["metrics"]:
        print(f"r={m['radius_cells']:g} cells: IoU {m['iou']:.4f} precision {m['precision']:.4f} "
              f"recall {m['recall']:.4f} F1 {m['f1']:.4f}")
    return 0


def cmd_eval(cfg: PipelineConfig, args) -> int:
    _require_files(args.truth, args.candidate, args.baseline, args.region)
    truth = read_raster(args.truth)
    cand = read_raster(args.candidate)
    base = read_raster(args.baseline)
    for name, g in (("candidate", cand), ("baseline", base)):
        if g.shape != truth.shape:
            raise CommandError(f"{name} {g.shape} is not aligned with truth {truth.shape}")
    region = None
    if args.region:
        mask = read_raster(args.region)
        if mask.shape != truth.shape:
            raise CommandError(f"region mask {mask.shape} is not aligned with truth {truth.shape}")
        region = mask.valid_mask & (mask.values > 0.5)
    sc = _stream_config(cfg, args) if args.streams else None
    report = compare_report(truth, cand, base, region, sc,
                            region_name=Path(args.region).stem if args.region else None,
                            circular_aspect=not args.linear_aspect)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table() + "\n")
    if not args.no_figures:
        plotting.dem_panels({"truth": truth, "candidate": cand, "baseline": base}, str(out / "dems.png"))
        plotting.error_map(truth, cand, base, str(out / "errors.png"))
        plotting.metric_bars(report.errors, str(out / "metrics.png"))
    print(report.table())
    if args.require_improvement and not report.improved():
        print("candidate does not beat the baseline elevation RMSE", file=sys.stderr)
        return EXIT_NOT_IMPROVED
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible execution")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="demprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scene samples")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="samples per scene class")

    p = sub.add_parser("train", parents=[common], help="train one task/scene model")
    p.add_argument("--task", choices=[k.value for k in PromptKind], default="lowres")
    p.add_argument("--scene", choices=[c.value for c in SceneClass], required=True)
    p.add_argument("--data", required=True, help="directory written by synth")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("classify", parents=[common], help="train, apply or evaluate the scene classifier")
    p.add_argument("--train", action="store_true")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--rgb", nargs=3, metavar="PLANE")
    p.add_argument("--weights")
    p.add_argument("--eval", type=int, metavar="N", help="score on N fresh scenes per class")
    p.add_argument("--eval-seed", type=int, default=900_000)

    p = sub.add_parser("infer", parents=[common], help="tile, route and predict patches")
    p.add_argument("--task", choices=[k.value for k in PromptKind], default="lowres")
    p.add_argument("--rgb", nargs=3, required=True, metavar="PLANE")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force-class", choices=[c.value for c in SceneClass])

    p = sub.add_parser("mosaic", parents=[common], help="blend patch predictions into one DEM")
    p.add_argument("--patches", required=True)
    p.add_argument("--out", required=True, help="output .r32g (hillshade PNG written alongside)")

    p = sub.add_parser("hydro", parents=[common], help="fill, D8, accumulation and streams")
    p.add_argument("--dem", required=True)
    p.add_argument("--truth")
    p.add_argument("--threshold", type=int)
    p.add_argument("--radii", type=float, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="compare candidate and baseline DEMs with truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--region", help="mask raster; cells > 0.5 form the region")
    p.add_argument("--streams", action="store_true", help="add buffered stream metrics")
    p.add_argument("--threshold", type=int)
    p.add_argument("--radii", type=float, nargs="+")
    p.add_argument("--linear-aspect", action="store_true", help="non-circular aspect differences")
    p.add_argument("--require-improvement", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "classify": cmd_classify,
    "infer": cmd_infer,
    "mosaic": cmd_mosaic,
    "hydro": cmd_hydro,
    "eval": cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.deterministic = cfg.deterministic or args.deterministic
        with thread_limits(thread_count(cfg.deterministic)):
            return COMMANDS[args.command](cfg, args)
    except (CommandError, PipelineError, MissingInitError, RasterError, WeightFileError,
            KeyError, ValueError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"demprompt {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
