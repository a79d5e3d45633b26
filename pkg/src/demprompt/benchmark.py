"""Desk-scale benchmarks on held-out synthetic scenes.

Training and test scenes come from disjoint generator seed ranges.  Every
comparison is against the prompt brought to full resolution by bilinear
upsampling, the same baseline a user would get without the network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import hydrology
from .evaluation import rmse
from .model import ModelConfig, PromptDepthNet
from .mosaic import mosaic_patches
from .pipeline import infer_patches
from .raster import bilinear_resample
from .terrain import SceneClass, degrade_to_prompt, generate_scene
from .training import (
    PromptKind,
    PromptSpec,
    TrainConfig,
    predict,
    scene_dataset,
    train,
)

TEST_SEED0 = 10_000      # held-out scenes start here; training uses 0..n_samples-1
MOSAIC_SEED0 = 20_000


def benchmark_config(epochs: int = 20, seed: int = 0, **overrides) -> TrainConfig:
    """200 training + 50 validation scenes, cosine-decayed Adam from 1e-3."""
    kw = dict(lr=1e-3, lr_schedule="cosine", epochs=epochs, n_samples=250, seed=seed,
              model=ModelConfig(), prompt=PromptSpec())
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class ImprovementResult:
    scene: SceneClass
    model_rmse: float
    baseline_rmse: float
    model_mae: float
    baseline_mae: float
    seconds: float = 0.0
    history: List[dict] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.model_rmse / self.baseline_rmse


def _pooled(errors: List[np.ndarray]):
    e = np.concatenate([x.ravel() for x in errors]).astype(np.float64)
    return float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e)))


def improvement(model: PromptDepthNet, scene: SceneClass, spec: PromptSpec, n_test: int = 50,
                region: str = "all") -> ImprovementResult:
    """Pooled RMSE/MAE of model and baseline over ``n_test`` held-out scenes.

    ``region="hole"`` restricts both to the void mask (void-filling task).
    """
    test = scene_dataset(scene, range(TEST_SEED0, TEST_SEED0 + n_test), spec)
    preds = predict(model, test)
    em, eb = [], []
    for p, ex in zip(preds, test):
        sel = ex.hole if region == "hole" else np.ones(p.shape, bool)
        em.append((p - ex.truth.values)[sel])
        eb.append((ex.baseline.values - ex.truth.values)[sel])
    mr, mm = _pooled(em)
    br, bm = _pooled(eb)
    return ImprovementResult(SceneClass(scene), mr, br, mm, bm)


def train_and_measure(scene: SceneClass, config: Optional[TrainConfig] = None, n_test: int = 50):
    config = config or benchmark_config()
    t0 = time.perf_counter()
    result = train(PromptKind.LOW_RES, scene, config)
    res = improvement(result.model, scene, config.prompt, n_test)
    res.seconds = time.perf_counter() - t0
    res.history = result.history
    return result.model, res


@dataclass
class StreamCase:
    seed: int
    model_iou: float
    baseline_iou: float

    @property
    def model_wins(self) -> bool:
        return self.model_iou > self.baseline_iou


def stream_benchmark(model: PromptDepthNet, n_scenes: int = 20, size: int = 112, tile: int = 64,
                     overlap: int = 16, threshold_fraction: float = 0.005, radius_cells: float = 2.0,
                     spec: PromptSpec = PromptSpec(), scene: SceneClass = SceneClass.VEGETATED) -> List[StreamCase]:
    """Stream IoU of mosaicked predictions vs upsampled prompts on larger scenes."""
    cases = []
    for k in range(n_scenes):
        seed = MOSAIC_SEED0 + k
        sample = generate_scene(scene, seed, size)
        dsm = sample.dsm
        low = degrade_to_prompt(dsm, spec.factor, spec.bias_sigma, spec.canopy_bias, sample.canopy_mask, seed)
        baseline = dsm.with_values(bilinear_resample(low, dsm.rows, dsm.cols).values)
        patches = infer_patches(sample.rgb, low, {scene: model}, tile, overlap, force_class=scene)
        pred = mosaic_patches([p.prediction for p in patches], [p.placement for p in patches], dsm)
        threshold = max(1, int(np.ceil(threshold_fraction * dsm.rows * dsm.cols)))
        truth_s = hydrology.buffer_mask(hydrology.stream_network(dsm, threshold), radius_cells, dsm.cell_size)
        ious = []
        for cand in (pred, baseline):
            s = hydrology.buffer_mask(hydrology.stream_network(cand, threshold), radius_cells, dsm.cell_size)
            ious.append(hydrology.segmentation_metrics(s, truth_s)["iou"])
        cases.append(StreamCase(seed, ious[0], ious[1]))
    return cases


def summary(results: Dict[SceneClass, ImprovementResult]) -> str:
    lines = [f"{'class':10s}{'model RMSE':>12s}{'prompt RMSE':>13s}{'ratio':>8s}{'model MAE':>11s}{'prompt MAE':>12s}"]
    for scene, r in results.items():
        lines.append(f"{scene.value:10s}{r.model_rmse:12.3f}{r.baseline_rmse:13.3f}{r.ratio:8.3f}"
                     f"{r.model_mae:11.3f}{r.baseline_mae:12.3f}")
    return "\n".join(lines)


__all__ = ["benchmark_config", "improvement", "train_and_measure", "stream_benchmark", "summary",
           "ImprovementResult", "StreamCase", "rmse"]
