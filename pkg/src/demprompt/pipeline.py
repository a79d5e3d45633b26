"""Pipeline plumbing shared by the command line: configuration, on-disk sample
sets, prompt windows and routed patch inference."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .model import (
    DEFAULT_SCALE,
    ModelConfig,
    NormRecord,
    PromptDepthNet,
    SceneClassifier,
    WeightRegistry,
    classify_scene,
    denormalize,
    normalize_io,
)
from .raster import RasterGrid, extract_tile, make_tile_plan, read_raster, write_raster
from .terrain import SceneClass, SceneSample, TerrainParams, sample_manifest
from .training import TrainConfig

SCHEMA_VERSION = 1


class PipelineError(ValueError):
    """Bad configuration or inputs; raised before any output is written."""


@dataclass
class PipelineConfig:
    seed: int = 0
    deterministic: bool = False
    samples_per_class: int = 10
    sample_size: int = 64
    scene_size: int = 0                 # >0 also writes one large evaluation scene per class
    scenes: List[str] = field(default_factory=lambda: [c.value for c in SceneClass])
    terrain: Dict[str, object] = field(default_factory=dict)   # TerrainParams overrides
    model: Dict[str, object] = field(default_factory=dict)
    train: Dict[str, object] = field(default_factory=dict)
    classifier_epochs: int = 5
    tile_size: int = 64
    overlap: int = 16
    threshold: Optional[int] = None     # stream threshold in cells; None -> 0.5% of the grid
    radii: List[float] = field(default_factory=lambda: [1, 2, 5])   # cells (x cell_size = meters)
    registry: str = "weights/registry.json"
    classifier: str = "weights/classifier.p2dw"
    weights: Dict[str, str] = field(default_factory=dict)     # "task/Class" -> path overrides

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile_size:
            raise PipelineError(f"overlap must satisfy 0 <= overlap < tile_size, got {self.overlap}/{self.tile_size}")
        if self.samples_per_class < 1:
            raise PipelineError("samples_per_class must be >= 1")
        for name in self.scenes:
            SceneClass(name)
        keys = set(self.terrain)
        bad = (keys - {f.name for f in fields(TerrainParams)}) | (keys & {"seed", "size"})
        if bad:
            raise PipelineError(f"terrain overrides not allowed: {sorted(bad)}")
        if any(r < 0 for r in self.radii):
            raise PipelineError("buffer radii must be >= 0")

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise PipelineError(f"config file {path} does not exist")
        data = json.loads(p.read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"schema_version"}
        if unknown:
            raise PipelineError(f"unknown config keys {sorted(unknown)}")
        data.pop("schema_version", None)
        cfg = cls(**data)
        base = p.resolve().parent
        for name in ("registry", "classifier"):
            v = getattr(cfg, name)
            if not os.path.isabs(v):
                setattr(cfg, name, str(base / v))
        return cfg

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        d.setdefault("sample_size", self.sample_size)
        d["model"] = {**asdict(self.model_config()), **d.get("model", {})}
        return TrainConfig.from_dict(d)

    def open_registry(self) -> WeightRegistry:
        reg = WeightRegistry.open(self.registry)
        reg.entries.update(self.weights)
        return reg

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


# ------------------------------------------------------------------ sample sets

_PLANES = ("dsm", "dtm", "rgb_0", "rgb_1", "rgb_2")


def save_sample(sample: SceneSample, directory: Path) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    write_raster(sample.dsm, directory / "dsm.r32g")
    write_raster(sample.dtm, directory / "dtm.r32g")
    for k, ch in enumerate(sample.rgb):
        write_raster(ch, directory / f"rgb_{k}.r32g")
    extra = sample.dsm.with_values(sample.building_labels.astype(np.float32))
    write_raster(extra, directory / "buildings.r32g")
    write_raster(sample.dsm.with_values(sample.canopy_mask.astype(np.float32)), directory / "canopy.r32g")
    manifest = sample_manifest(sample)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_sample(directory: Path) -> SceneSample:
    directory = Path(directory)
    missing = [p for p in _PLANES if not (directory / f"{p}.r32g").exists()]
    if missing or not (directory / "manifest.json").exists():
        raise PipelineError(f"{directory}: incomplete sample (missing {missing or ['manifest.json']})")
    manifest = json.loads((directory / "manifest.json").read_text())
    params = dict(manifest["params"])
    for k in ("building_height_range", "building_size_range", "canopy_height_range", "canopy_radius_range"):
        if k in params:
            params[k] = tuple(params[k])
    return SceneSample(
        dsm=read_raster(directory / "dsm.r32g"),
        dtm=read_raster(directory / "dtm.r32g"),
        scene_class=SceneClass(manifest["scene_class"]),
        params=TerrainParams(**params),
        building_labels=read_raster(directory / "buildings.r32g").values.astype(np.int32),
        canopy_mask=read_raster(directory / "canopy.r32g").values > 0.5,
        rgb=[read_raster(directory / f"rgb_{k}.r32g") for k in range(3)],
    )


def dataset_index(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise PipelineError(f"no dataset at {data_dir} (missing manifest.json); run `synth` first")
    return json.loads(path.read_text())


def load_dataset(data_dir, scene: SceneClass) -> List[SceneSample]:
    index = dataset_index(data_dir)
    entries = [e for e in index["samples"] if e["scene_class"] == SceneClass(scene).value]
    if not entries:
        raise PipelineError(f"dataset {data_dir} has no {SceneClass(scene).value} samples")
    return [load_sample(Path(data_dir) / e["path"]) for e in entries]


def read_rgb(paths: Sequence[str]) -> List[RasterGrid]:
    if len(paths) != 3:
        raise PipelineError(f"need exactly 3 RGB planes, got {len(paths)}")
    planes = [read_raster(p) for p in paths]
    if not all(planes[0].same_georeference(p) for p in planes[1:]):
        raise PipelineError("RGB planes are not co-registered")
    return planes


# ------------------------------------------------------------------ inference


def prompt_window(prompt: RasterGrid, tile: RasterGrid, factor: int) -> RasterGrid:
    """Sample ``prompt`` on the coarse grid (``factor`` x tile cells) covering ``tile``.

    Cell centres are located in map coordinates and read bilinearly from the
    prompt (edge-clamped), so aligned grids return the prompt cells exactly.
    """
    if tile.rows % factor or tile.cols % factor:
        raise PipelineError(f"tile {tile.shape} not divisible by prompt factor {factor}")
    rows, cols = tile.rows // factor, tile.cols // factor
    cell = tile.cell_size * factor
    xs = tile.origin_x + (np.arange(cols) + 0.5) * cell
    ys = tile.origin_y - (np.arange(rows) + 0.5) * cell
    ci = (xs - prompt.origin_x) / prompt.cell_size - 0.5
    ri = (prompt.origin_y - ys) / prompt.cell_size - 0.5
    rr, cc = np.meshgrid(ri, ci, indexing="ij")
    vals = prompt.values.astype(np.float64)
    valid = prompt.valid_mask
    if not valid.all():
        vals = np.where(valid, vals, np.mean(vals[valid]) if valid.any() else 0.0)
    out = ndimage.map_coordinates(vals, [rr, cc], order=1, mode="nearest")
    # snap to the exact cell value when the sample falls on a cell centre
    on_grid = np.isclose(rr, np.round(rr), atol=1e-9) & np.isclose(cc, np.round(cc), atol=1e-9)
    if on_grid.any():
        r_i = np.clip(np.round(rr).astype(int), 0, prompt.rows - 1)
        c_i = np.clip(np.round(cc).astype(int), 0, prompt.cols - 1)
        out = np.where(on_grid, vals[r_i, c_i], out)
    return RasterGrid(out.astype(np.float32), cell, tile.origin_x, tile.origin_y, prompt.nodata)


def prompt_factor(rgb: RasterGrid, prompt: RasterGrid) -> int:
    ratio = prompt.cell_size / rgb.cell_size
    f = int(round(ratio))
    if f < 1 or abs(ratio - f) > 1e-6:
        raise PipelineError(f"prompt cell size {prompt.cell_size} is not an integer multiple of {rgb.cell_size}")
    return f


@dataclass
class PatchResult:
    placement: Tuple[int, int]
    scene: SceneClass
    probabilities: Optional[List[float]]
    norm: NormRecord
    prediction: RasterGrid


def infer_patches(
    rgb: Sequence[RasterGrid],
    prompt: RasterGrid,
    models: Dict[SceneClass, PromptDepthNet],
    tile_size: int,
    overlap: int,
    classifier: Optional[SceneClassifier] = None,
    force_class: Optional[SceneClass] = None,
    threads: int = 1,
    norm_scale: float = DEFAULT_SCALE,
) -> List[PatchResult]:
    """Tile, route each tile to a scene-class model, predict and denormalise."""
    base = rgb[0]
    if base.rows < tile_size or base.cols < tile_size:
        raise PipelineError(f"grid {base.shape} is smaller than tile_size {tile_size}")
    if force_class is None and classifier is None:
        raise PipelineError("no scene classifier available; pass a classifier or force a class")
    factor = prompt_factor(base, prompt)
    plan = make_tile_plan(base, tile_size, overlap)

    def run(placement):
        tiles = [extract_tile(ch, placement, tile_size) for ch in rgb]
        stack = np.stack([t.values for t in tiles]).astype(np.float32)
        probs = None
        if force_class is not None:
            scene = SceneClass(force_class)
        else:
            scene, p = classify_scene(stack, classifier)
            probs = [float(v) for v in p]
        if scene not in models:
            raise PipelineError(f"no weights for scene class {scene.value}; available: "
                                f"{sorted(c.value for c in models)}")
        window = prompt_window(prompt, tiles[0], factor)
        p_norm, _, norm = normalize_io(window, None, norm_scale)
        pred = models[scene].predict(stack[None], p_norm[None, None])[0, 0]
        return PatchResult(placement, scene, probs, norm, tiles[0].with_values(denormalize(pred, norm)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, plan.placements))
    return [run(pl) for pl in plan.placements]


def write_patch_set(results: Sequence[PatchResult], source: RasterGrid, out_dir: Path, task: str,
                    tile_size: int, overlap: int) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, res in enumerate(results):
        name = f"patch_{k:04d}.r32g"
        write_raster(res.prediction, out_dir / name)
        entries.append({
            "file": name,
            "placement": list(res.placement),
            "scene_class": res.scene.value,
            "probabilities": res.probabilities,
            "norm": asdict(res.norm),
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "task": task,
        "tile_size": tile_size,
        "overlap": overlap,
        "source": {"rows": source.rows, "cols": source.cols, "cell_size": source.cell_size,
                   "origin_x": source.origin_x, "origin_y": source.origin_y, "nodata": source.nodata},
        "patches": entries,
    }
    (out_dir / "patches.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_patch_set(patch_dir) -> Tuple[dict, List[RasterGrid]]:
    path = Path(patch_dir) / "patches.json"
    if not path.exists():
        raise PipelineError(f"{patch_dir}: no patches.json; run `infer` first")
    manifest = json.loads(path.read_text())
    if not manifest.get("patches"):
        raise PipelineError(f"{patch_dir}: patch set is empty")
    patches = [read_raster(Path(patch_dir) / e["file"]) for e in manifest["patches"]]
    return manifest, patches


def source_like(manifest: dict) -> RasterGrid:
    s = manifest["source"]
    return RasterGrid(np.zeros((s["rows"], s["cols"]), np.float32), s["cell_size"], s["origin_x"],
                      s["origin_y"], s["nodata"])
