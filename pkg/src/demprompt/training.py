"""Edge-aware loss, prompt regimes and the training loops."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    DEFAULT_SCALE,
    ModelConfig,
    NormRecord,
    PromptDepthNet,
    SceneClassifier,
    classifier_config,
    denormalize,
    normalize_io,
)
from .raster import RasterGrid, bilinear_resample
from .terrain import (
    SceneClass,
    SceneSample,
    carve_void,
    degrade_to_prompt,
    generate_scene,
    hole_mask,
    terrain_only_prompt,
)

log = logging.getLogger(__name__)


class PromptKind(str, enum.Enum):
    LOW_RES = "lowres"
    VOID_FILLED = "void"
    TERRAIN_ONLY = "update"


@dataclass(frozen=True)
class PromptSpec:
    kind: PromptKind = PromptKind.LOW_RES
    factor: int = 8
    hole_fraction: float = 0.5
    bias_sigma: float = 2.0
    canopy_bias: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PromptKind(self.kind))
        if self.factor < 2:
            raise ValueError(f"factor must be >= 2, got {self.factor}")
        if not 0.0 < self.hole_fraction < 1.0:
            raise ValueError(f"hole_fraction must lie in (0, 1), got {self.hole_fraction}")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 2
    epochs: int = 10
    lambda_edge: float = 0.9
    lr_schedule: str = "constant"   # or "cosine": decays to lr_floor * lr at the last step
    lr_floor: float = 0.05
    seed: int = 0
    n_samples: int = 250          # split 80/20 into train/validation by seed
    seed_offset: int = 0
    sample_size: int = 64
    norm_scale: float = DEFAULT_SCALE
    model: ModelConfig = field(default_factory=ModelConfig)
    prompt: PromptSpec = field(default_factory=PromptSpec)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.lambda_edge < 0:
            raise ValueError(f"lambda_edge must be >= 0, got {self.lambda_edge}")
        if self.n_samples < 1:
            raise ValueError("empty dataset: n_samples must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "constant" or total <= 1:
            return self.lr
        frac = min(step / (total - 1), 1.0)
        return self.lr * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt"]["kind"] = self.prompt.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "prompt" in d:
            d["prompt"] = PromptSpec(**d["prompt"])
        return cls(**d)


# ------------------------------------------------------------------ loss


def edge_loss(e_gt: Tensor, e_hat: Tensor, lam: float = 0.9) -> Tensor:
    """mean|d| + lam * (mean|d/dx d| + mean|d/dy d|) with d = e_hat - e_gt and
    forward differences along the last two axes."""
    if e_gt.shape != e_hat.shape:
        raise ad.ShapeError(f"edge_loss: shapes differ {e_gt.shape} vs {e_hat.shape}")
    d = e_hat - e_gt
    l1 = ad.mean(ad.tabs(d))
    if lam == 0:
        return l1
    dx = d[..., :, 1:] - d[..., :, :-1]
    dy = d[..., 1:, :] - d[..., :-1, :]
    return l1 + lam * (ad.mean(ad.tabs(dx)) + ad.mean(ad.tabs(dy)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), np.asarray(labels)]
    return -ad.mean(picked)


# ------------------------------------------------------------------ examples


@dataclass
class Example:
    rgb: np.ndarray                 # [3, S, S] in [0, 1]
    prompt: np.ndarray              # [1, h, w] normalised
    target: np.ndarray              # [1, S, S] normalised
    norm: NormRecord
    truth: RasterGrid               # absolute target
    baseline: RasterGrid            # prompt brought to target resolution, absolute
    hole: Optional[np.ndarray] = None


def make_prompt(sample: SceneSample, spec: PromptSpec, seed: int) -> Tuple[RasterGrid, Optional[np.ndarray]]:
    """The raw (absolute-metre) prompt for a regime, plus the hole mask for voids."""
    if spec.kind == PromptKind.TERRAIN_ONLY:
        return terrain_only_prompt(sample), None
    low = degrade_to_prompt(sample.dsm, spec.factor, spec.bias_sigma, spec.canopy_bias,
                            sample.canopy_mask, seed=seed)
    if spec.kind == PromptKind.LOW_RES:
        return low, None
    return carve_void(sample.dsm, low, spec.hole_fraction), hole_mask(sample.dsm.shape, spec.hole_fraction)


def build_example(sample: SceneSample, spec: PromptSpec, seed: int, scale: float = DEFAULT_SCALE) -> Example:
    dsm = sample.dsm
    if sample.rgb is None or len(sample.rgb) != 3:
        raise ValueError("sample has no rendered RGB planes")
    prompt, hole = make_prompt(sample, spec, seed)
    p, t, norm = normalize_io(prompt, dsm, scale)
    if prompt.shape == dsm.shape:
        baseline = prompt
    else:
        baseline = bilinear_resample(prompt, dsm.rows, dsm.cols)
        baseline = dsm.with_values(baseline.values)
    rgb = np.stack([ch.values for ch in sample.rgb]).astype(np.float32)
    return Example(rgb, p[None], t[None], norm, dsm, baseline, hole)


def scene_dataset(scene: SceneClass, seeds: Sequence[int], spec: PromptSpec, size: int = 64,
                  scale: float = DEFAULT_SCALE) -> List[Example]:
    return [build_example(generate_scene(scene, s, size), spec, seed=s, scale=scale) for s in seeds]


def _stack(examples: Sequence[Example]):
    return (np.stack([e.rgb for e in examples]), np.stack([e.prompt for e in examples]),
            np.stack([e.target for e in examples]))


def predict(model: PromptDepthNet, examples: Sequence[Example], batch: int = 8) -> List[np.ndarray]:
    """Absolute-metre predictions [S, S] for each example."""
    out = []
    for i in range(0, len(examples), batch):
        chunk = examples[i : i + batch]
        rgb, prompt, _ = _stack(chunk)
        pred = model.predict(rgb, prompt)
        out.extend(denormalize(pred[k, 0], e.norm) for k, e in enumerate(chunk))
    return out


def evaluate_loss(model: PromptDepthNet, examples: Sequence[Example], lam: float, batch: int = 8) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(examples), batch):
            chunk = examples[i : i + batch]
            rgb, prompt, target = _stack(chunk)
            loss = edge_loss(Tensor(target), model.forward(rgb, prompt), lam)
            total += loss.item() * len(chunk)
    return total / len(examples)


# ------------------------------------------------------------------ training


class MissingInitError(ValueError):
    """Fine-tuning regimes need the low-res checkpoint to start from."""


@dataclass
class TrainResult:
    model: PromptDepthNet
    history: List[Dict[str, float]]
    train_seeds: List[int]
    val_seeds: List[int]

    def manifest(self, config: TrainConfig, task: str, scene: SceneClass, weights_path: str = "") -> dict:
        return {
            "schema_version": 1,
            "task": task,
            "scene": SceneClass(scene).value,
            "config": config.to_dict(),
            "history": self.history,
            "weights": weights_path,
            "train_seeds": [min(self.train_seeds), max(self.train_seeds)],
            "val_seeds": [min(self.val_seeds), max(self.val_seeds)] if self.val_seeds else [],
        }


def split_seeds(config: TrainConfig) -> Tuple[List[int], List[int]]:
    seeds = list(range(config.seed_offset, config.seed_offset + config.n_samples))
    n_train = max(1, int(round(0.8 * len(seeds))))
    return seeds[:n_train], seeds[n_train:]


def train_on_examples(model, train: Sequence[Example], val: Sequence[Example], config: TrainConfig,
                      epochs: Optional[int] = None, on_epoch=None) -> List[Dict[str, float]]:
    """Adam over shuffled mini-batches; ``on_epoch(epoch, model)`` runs after each epoch."""
    if not train:
        raise ValueError("empty training set")
    epochs = config.epochs if epochs is None else epochs
    params = model.parameters()
    state = ad.AdamState(lr=config.lr)
    per_epoch = -(-len(train) // config.batch_size)
    total = per_epoch * epochs
    history = [{"epoch": 0, "train_loss": float("nan"),
                "val_loss": evaluate_loss(model, val, config.lambda_edge) if val else float("nan")}]
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        losses = []
        for i in range(0, len(order), config.batch_size):
            batch = [train[j] for j in order[i : i + config.batch_size]]
            rgb, prompt, target = _stack(batch)
            ad.zero_grad(params)
            loss = edge_loss(Tensor(target), model.forward(rgb, prompt), config.lambda_edge)
            ad.backward(loss)
            state.lr = config.lr_at(state.step, total)
            ad.adam_step(params, state)
            losses.append(loss.item())
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_loss": evaluate_loss(model, val, config.lambda_edge) if val else float("nan")}
        log.info("epoch %d train %.5f val %.5f", epoch, rec["train_loss"], rec["val_loss"])
        history.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return history


def _spec_for(task, config: TrainConfig) -> PromptSpec:
    p = config.prompt
    return PromptSpec(PromptKind(task), p.factor, p.hole_fraction, p.bias_sigma, p.canopy_bias)


def _start_model(task, config: TrainConfig, init: Optional[PromptDepthNet]) -> PromptDepthNet:
    kind = PromptKind(task)
    if kind != PromptKind.LOW_RES and init is None:
        raise MissingInitError(f"task {kind.value!r} must be initialised from a low-res checkpoint")
    if init is not None:
        model = PromptDepthNet(init.config)
        model.load_state(init.state())
        return model
    return PromptDepthNet(config.model, seed=config.seed)


def train(task, scene: SceneClass, config: TrainConfig, init: Optional[PromptDepthNet] = None) -> TrainResult:
    """Train one (task, scene) model on freshly generated synthetic scenes.

    Low-res models start from random weights; void-filling and updating models
    must be given the low-res checkpoint as ``init``.
    """
    train_seeds, val_seeds = split_seeds(config)
    spec = _spec_for(task, config)
    model = _start_model(task, config, init)
    train_set = scene_dataset(scene, train_seeds, spec, config.sample_size, config.norm_scale)
    val_set = scene_dataset(scene, val_seeds, spec, config.sample_size, config.norm_scale)
    history = train_on_examples(model, train_set, val_set, config)
    return TrainResult(model, history, train_seeds, val_seeds)


def train_from_samples(task, samples: Sequence[SceneSample], config: TrainConfig,
                       init: Optional[PromptDepthNet] = None) -> TrainResult:
    """Same as :func:`train` but on given scenes (split 80/20 in order)."""
    if not samples:
        raise ValueError("empty dataset")
    spec = _spec_for(task, config)
    model = _start_model(task, config, init)
    n_train = max(1, int(round(0.8 * len(samples))))
    examples = [build_example(s, spec, seed=s.params.seed, scale=config.norm_scale) for s in samples]
    history = train_on_examples(model, examples[:n_train], examples[n_train:], config)
    seeds = [s.params.seed for s in samples]
    return TrainResult(model, history, seeds[:n_train], seeds[n_train:])


# ------------------------------------------------------------------ scene classifier


def classifier_dataset(seeds: Sequence[int], size: int = 64):
    """Class-balanced RGB stacks and labels; seed ``s`` yields one scene per class."""
    rgbs, labels = [], []
    for s in seeds:
        for scene in SceneClass:
            sample = generate_scene(scene, s, size)
            rgbs.append(np.stack([ch.values for ch in sample.rgb]))
            labels.append(sample.scene_class.index)
    return np.stack(rgbs).astype(np.float32), np.asarray(labels)


def train_classifier(
    model_config: ModelConfig,
    seeds: Sequence[int],
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    size: int = 64,
) -> Tuple[SceneClassifier, List[float]]:
    rgb, labels = classifier_dataset(seeds, size)
    return fit_classifier(model_config, rgb, labels, epochs, lr, batch_size, seed)


def fit_classifier(model_config: ModelConfig, rgb: np.ndarray, labels: np.ndarray, epochs: int = 5,
                   lr: float = 1e-3, batch_size: int = 8, seed: int = 0) -> Tuple[SceneClassifier, List[float]]:
    """Cross-entropy training of the scene classifier; returns it and the loss per epoch."""
    if len(labels) == 0:
        raise ValueError("empty dataset")
    model = SceneClassifier(classifier_config(model_config), seed=seed)
    params = model.parameters()
    state = ad.AdamState(lr=lr)
    curve = []
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch, 7]).permutation(len(labels))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            ad.zero_grad(params)
            loss = cross_entropy(model.logits(rgb[idx]), labels[idx])
            ad.backward(loss)
            ad.adam_step(params, state)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        log.info("classifier epoch %d loss %.4f", epoch, curve[-1])
    return model, curve


def macro_f1(pred: np.ndarray, truth: np.ndarray, n_classes: int = 3) -> Tuple[float, List[float]]:
    scores = []
    for k in range(n_classes):
        tp = np.sum((pred == k) & (truth == k))
        fp = np.sum((pred == k) & (truth != k))
        fn = np.sum((pred != k) & (truth == k))
        denom = 2 * tp + fp + fn
        scores.append(float(2 * tp / denom) if denom else 0.0)
    return float(np.mean(scores)), scores
