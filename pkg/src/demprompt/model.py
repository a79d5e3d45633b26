"""Prompt-fusion depth network, scene classifier and weight persistence.

The depth network is a small ViT encoder whose intermediate token grids feed a
DPT-style decoder.  At every fused decoder stage the elevation prompt is
resized to the stage resolution, passed through a shallow conv net and a
zero-initialised 1x1 projection, and added to the decoder features.  Because
the projection starts at exactly zero the untrained network ignores the
prompt entirely.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .raster import RasterGrid
from .terrain import SceneClass

WEIGHT_MAGIC = b"P2DW"
WEIGHT_VERSION = 1


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    vit_patch: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    tap_layers: Tuple[int, ...] = (1, 2, 3, 4)
    decoder_channels: Tuple[int, ...] = (64, 64, 64, 64)
    fusion_stages: Tuple[int, ...] = (1, 2, 3, 4)
    prompt_channels: int = 16
    head_channels: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if self.input_size % self.vit_patch:
            raise ValueError(f"input_size {self.input_size} not divisible by vit_patch {self.vit_patch}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        taps = tuple(self.tap_layers)
        if list(taps) != sorted(taps) or not taps or taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"tap_layers {taps} must be sorted and within 1..{self.depth}")
        if len(self.decoder_channels) != len(taps):
            raise ValueError("decoder_channels must have one entry per tap layer")
        if any(s < 1 or s > len(taps) for s in self.fusion_stages):
            raise ValueError(f"fusion_stages {self.fusion_stages} out of range")
        if self.input_size % 2 ** len(taps):
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2**{len(taps)} for a {len(taps)}-stage decoder"
            )
        for name in ("tap_layers", "decoder_channels", "fusion_stages"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @property
    def grid(self) -> int:
        return self.input_size // self.vit_patch

    def stage_size(self, stage: int) -> int:
        """Spatial size of decoder stage ``stage`` (1 = coarsest); the finest
        stage runs at half the input size and the head doubles it."""
        return self.input_size // 2 ** (len(self.tap_layers) - stage + 1)

    def to_text(self, kind: str) -> str:
        lines = [f"kind={kind}"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> Tuple[str, "ModelConfig"]:
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        kind = kv.pop("kind", "depth")
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name in ("tap_layers", "decoder_channels", "fusion_stages"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
            else:
                kwargs[f.name] = int(raw)
        return kind, cls(**kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})


def classifier_config(config: ModelConfig) -> ModelConfig:
    """Same token geometry, two transformer blocks."""
    return ModelConfig(
        input_size=config.input_size, vit_patch=config.vit_patch, embed_dim=config.embed_dim,
        depth=2, heads=config.heads, mlp_ratio=config.mlp_ratio, tap_layers=(1, 2),
        decoder_channels=config.decoder_channels[:2], fusion_stages=(1,),
        prompt_channels=config.prompt_channels, head_channels=config.head_channels,
        in_channels=config.in_channels,
    )


# ------------------------------------------------------------------ parameter helpers


class _Builder:
    def __init__(self, params: "OrderedDict[str, Tensor]", seed: int):
        self.params = params
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value: np.ndarray):
        self.params[name] = Tensor(value.astype(np.float32), requires_grad=True)

    def normal(self, name, shape, std):
        self.add(name, self.rng.normal(0.0, std, shape))

    def zeros(self, name, shape):
        self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        self.add(name, np.ones(shape))

    def conv(self, name, out_c, in_c, k, zero=False):
        if zero:
            self.zeros(f"{name}.w", (out_c, in_c, k, k))
        else:
            self.normal(f"{name}.w", (out_c, in_c, k, k), math.sqrt(2.0 / (in_c * k * k)))
        self.zeros(f"{name}.b", (out_c,))

    def linear(self, name, in_f, out_f, std=None):
        self.normal(f"{name}.w", (in_f, out_f), std if std is not None else 1.0 / math.sqrt(in_f))
        self.zeros(f"{name}.b", (out_f,))


def _conv(p, name, x, pad=0, pad_mode="zeros", stride=1):
    if pad and pad_mode == "edge":
        x = ad.pad2d(x, pad, "edge")
        pad = 0
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)


def _linear(p, name, x):
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def _layer_norm(p, name, x):
    return ad.layer_norm(x, axis=-1) * p[f"{name}.g"] + p[f"{name}.b"]


def _init_vit(b: _Builder, cfg: ModelConfig, prefix: str = "vit"):
    d = cfg.embed_dim
    n_tokens = cfg.grid * cfg.grid
    b.conv(f"{prefix}.patch", d, cfg.in_channels, cfg.vit_patch)
    b.normal(f"{prefix}.pos", (1, n_tokens, d), 0.02)
    hidden = d * cfg.mlp_ratio
    for i in range(cfg.depth):
        blk = f"{prefix}.block{i}"
        b.ones(f"{blk}.ln1.g", (d,))
        b.zeros(f"{blk}.ln1.b", (d,))
        b.linear(f"{blk}.qkv", d, 3 * d)
        b.linear(f"{blk}.proj", d, d, std=0.5 / math.sqrt(d))
        b.ones(f"{blk}.ln2.g", (d,))
        b.zeros(f"{blk}.ln2.b", (d,))
        b.linear(f"{blk}.fc1", d, hidden)
        b.linear(f"{blk}.fc2", hidden, d, std=0.5 / math.sqrt(hidden))


def attention(p, blk: str, x: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention on [B, N, D] tokens."""
    B, N, D = x.shape
    dh = D // heads
    qkv = _linear(p, f"{blk}.qkv", x).reshape(B, N, 3, heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ ad.transpose(k)) * (1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    out = (attn @ v).permute(0, 2, 1, 3).reshape(B, N, D)
    return _linear(p, f"{blk}.proj", out)


def transformer_block(p, blk: str, x: Tensor, heads: int) -> Tensor:
    x = x + attention(p, blk, _layer_norm(p, f"{blk}.ln1", x), heads)
    h = ad.gelu(_linear(p, f"{blk}.fc1", _layer_norm(p, f"{blk}.ln2", x)))
    return x + _linear(p, f"{blk}.fc2", h)


def _run_vit(p, cfg: ModelConfig, rgb: Tensor, prefix: str = "vit") -> List[Tensor]:
    """Token sequences [B, N, D] after every block."""
    if rgb.ndim != 4 or rgb.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ad.ShapeError(
            f"vit_encode: expected input [B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}],"
            f" got {rgb.shape}"
        )
    B = rgb.shape[0]
    tokens = _conv(p, f"{prefix}.patch", rgb, stride=cfg.vit_patch)  # [B, D, g, g]
    x = tokens.reshape(B, cfg.embed_dim, -1).permute(0, 2, 1) + p[f"{prefix}.pos"]
    outs = []
    for i in range(cfg.depth):
        x = transformer_block(p, f"{prefix}.block{i}", x, cfg.heads)
        outs.append(x)
    return outs


def _batched(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 3:
        t = t.reshape(1, *t.shape)
    return t


# ------------------------------------------------------------------ depth network


def _shuffle_factor(cfg: ModelConfig, stage: int) -> int:
    size = cfg.stage_size(stage)
    return size // cfg.grid if size > cfg.grid and size % cfg.grid == 0 else 1


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """[B, C*r*r, H, W] -> [B, C, H*r, W*r]; channel c*r*r + i*r + j lands at (i, j)."""
    B, CR, H, W = x.shape
    c = CR // (r * r)
    y = x.reshape(B, c, r, r, H, W).permute(0, 1, 4, 2, 5, 3)
    return y.reshape(B, c, H * r, W * r)


class PromptDepthNet:
    """ViT encoder + DPT decoder with prompt fusion."""

    kind = "depth"

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init(seed)

    def _init(self, seed: int):
        cfg = self.config
        b = _Builder(self.params, seed)
        _init_vit(b, cfg)
        chans = cfg.decoder_channels
        for s, c in enumerate(chans, start=1):
            b.conv(f"dec.reassemble{s}", c * _shuffle_factor(cfg, s) ** 2, cfg.embed_dim, 1)
            if s > 1 and chans[s - 2] != c:
                b.conv(f"dec.adapt{s}", c, chans[s - 2], 1)
            b.conv(f"dec.fuse{s}.conv1", c, c, 3)
            b.conv(f"dec.fuse{s}.conv2", c, c, 3)
            # residual branch starts small so the stack begins near identity
            self.params[f"dec.fuse{s}.conv2.w"].data *= 0.1
            if s in cfg.fusion_stages:
                pc = cfg.prompt_channels
                b.conv(f"prompt{s}.conv1", pc, 1, 3)
                b.conv(f"prompt{s}.conv2", pc, pc, 3)
                b.conv(f"prompt{s}.proj", c, pc, 1, zero=True)
        last = chans[-1]
        b.conv("head.conv1", max(last // 2, 1), last, 3)
        b.conv("head.conv2", cfg.head_channels, max(last // 2, 1), 3)
        b.conv("head.out", 1, cfg.head_channels, 1)
        # targets are O(0.1) in normalised units; start the output at that scale
        self.params["head.out.w"].data *= 0.02

    # -- parameter plumbing
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        ad.zero_grad(self.parameters())

    def astype(self, dtype) -> "PromptDepthNet":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def state(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state(self, state: Dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    # -- network pieces
    def vit_encode(self, rgb) -> List[Tensor]:
        """Token grids at the tap layers, each [B, D, g, g]."""
        cfg = self.config
        rgb = _batched(rgb)
        outs = _run_vit(self.params, cfg, rgb)
        B = rgb.shape[0]
        feats = []
        for layer in cfg.tap_layers:
            t = outs[layer - 1]
            feats.append(t.permute(0, 2, 1).reshape(B, cfg.embed_dim, cfg.grid, cfg.grid))
        return feats

    def prompt_fusion_inject(self, prompt: Tensor, stage: int, stage_dims: Tuple[int, int, int]) -> Tensor:
        """Resize -> 2-layer 3x3 conv (GELU) -> zero-initialised 1x1 projection."""
        c, h, w = stage_dims
        p = self.params
        if not np.all(np.isfinite(prompt.data)):
            raise ValueError("prompt contains non-finite values")
        r = ad.bilinear_resize(prompt, h, w)
        f = ad.gelu(_conv(p, f"prompt{stage}.conv1", r, pad=1, pad_mode="edge"))
        f = _conv(p, f"prompt{stage}.conv2", f, pad=1, pad_mode="edge")
        out = _conv(p, f"prompt{stage}.proj", f)
        if out.shape[1] != c:
            raise ad.ShapeError(f"prompt_fusion_inject: projection gives {out.shape[1]} channels, stage needs {c}")
        return out

    def _reassemble(self, stage: int, feat: Tensor) -> Tensor:
        """1x1 projection, then resize to the stage grid.  Upsampling is learned
        (a kernel-equals-stride transposed conv, written as 1x1 + depth-to-space)
        so each token can paint its own sub-patch detail."""
        cfg = self.config
        x = _conv(self.params, f"dec.reassemble{stage}", feat)
        size = cfg.stage_size(stage)
        r = _shuffle_factor(cfg, stage)
        if r > 1:
            x = depth_to_space(x, r)
        elif size < cfg.grid and cfg.grid % size == 0:
            x = ad.avg_pool(x, cfg.grid // size)
        elif size != cfg.grid:
            x = ad.bilinear_resize(x, size, size)
        return x

    def fusion_stage(self, s: int, feat: Tensor, prev: Optional[Tensor], prompt: Optional[Tensor]) -> Tensor:
        """One decoder stage: reassembled tokens + upsampled coarser output +
        prompt injection, then a residual pair of 3x3 convs."""
        cfg = self.config
        p = self.params
        x = self._reassemble(s, feat)
        size = cfg.stage_size(s)
        if prev is not None:
            up = ad.bilinear_resize(prev, size, size)
            if f"dec.adapt{s}.w" in p:
                up = _conv(p, f"dec.adapt{s}", up)
            x = x + up
        if prompt is not None and s in cfg.fusion_stages:
            x = x + self.prompt_fusion_inject(prompt, s, (x.shape[1], size, size))
        r = _conv(p, f"dec.fuse{s}.conv1", ad.gelu(x), pad=1, pad_mode="edge")
        r = _conv(p, f"dec.fuse{s}.conv2", ad.gelu(r), pad=1, pad_mode="edge")
        return x + r

    def dpt_decode(self, features: Sequence[Tensor], prompt=None) -> Tensor:
        cfg = self.config
        p = self.params
        if prompt is not None:
            prompt = _batched(prompt)
            if prompt.ndim != 4 or prompt.shape[1] != 1 or min(prompt.shape[2:]) < 1:
                raise ad.ShapeError(f"dpt_decode: prompt must be [B, 1, h, w], got {prompt.shape}")
            prompt = Tensor(prompt.data.astype(p["head.out.w"].dtype)) if not prompt.requires_grad else prompt
        h = None
        for s, feat in enumerate(features, start=1):
            h = self.fusion_stage(s, feat, h, prompt)
        y = _conv(p, "head.conv1", h, pad=1, pad_mode="edge")
        y = ad.bilinear_resize(y, cfg.input_size, cfg.input_size)
        y = ad.gelu(_conv(p, "head.conv2", y, pad=1, pad_mode="edge"))
        return _conv(p, "head.out", y)

    def forward(self, rgb, prompt=None) -> Tensor:
        """Elevation in normalised units, [B, 1, S, S]."""
        return self.dpt_decode(self.vit_encode(rgb), prompt)

    __call__ = forward

    def predict(self, rgb: np.ndarray, prompt: Optional[np.ndarray]) -> np.ndarray:
        with ad.no_grad():
            return self.forward(rgb, prompt).data


def forward(rgb, prompt, model: PromptDepthNet) -> Tensor:
    return model.forward(rgb, prompt)


# ------------------------------------------------------------------ scene classifier


class SceneClassifier:
    """Two-block ViT, mean-pooled tokens, linear head over the three classes."""

    kind = "classifier"

    def __init__(self, config: ModelConfig = classifier_config(ModelConfig()), seed: int = 0):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        b = _Builder(self.params, seed)
        _init_vit(b, config)
        b.ones("cls.ln.g", (config.embed_dim,))
        b.zeros("cls.ln.b", (config.embed_dim,))
        b.linear("cls.head", config.embed_dim, len(SceneClass), std=0.02)

    parameters = PromptDepthNet.parameters
    zero_grad = PromptDepthNet.zero_grad
    astype = PromptDepthNet.astype
    state = PromptDepthNet.state
    load_state = PromptDepthNet.load_state

    def logits(self, rgb) -> Tensor:
        rgb = _batched(rgb)
        tokens = _run_vit(self.params, self.config, rgb)[-1]
        pooled = _layer_norm(self.params, "cls.ln", tokens.mean(axis=1))
        return _linear(self.params, "cls.head", pooled)

    def probabilities(self, rgb) -> np.ndarray:
        with ad.no_grad():
            return ad.softmax(self.logits(rgb), axis=-1).data.astype(np.float64)


def classify_scene(rgb, model: SceneClassifier) -> Tuple[SceneClass, np.ndarray]:
    probs = model.probabilities(rgb)[0]
    probs = probs / probs.sum()
    return list(SceneClass)[int(np.argmax(probs))], probs


# ------------------------------------------------------------------ normalisation


@dataclass(frozen=True)
class NormRecord:
    mean: float
    scale: float


DEFAULT_SCALE = 100.0


def normalize_io(prompt: RasterGrid, hr_target: Optional[RasterGrid] = None, scale: float = DEFAULT_SCALE):
    """Subtract the prompt's mean and divide by a global scale.

    Returns ``(prompt_norm, target_norm_or_None, NormRecord)`` with float32 arrays.
    """
    valid = prompt.valid_mask
    if not valid.any():
        raise ValueError("prompt has no valid pixels")
    mean = float(prompt.values[valid].astype(np.float64).mean())
    p = np.where(valid, (prompt.values.astype(np.float64) - mean) / scale, 0.0).astype(np.float32)
    t = None
    if hr_target is not None:
        t = ((hr_target.values.astype(np.float64) - mean) / scale).astype(np.float32)
    return p, t, NormRecord(mean, scale)


def denormalize(values: np.ndarray, record: NormRecord) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) * record.scale + record.mean).astype(np.float32)


# ------------------------------------------------------------------ weight files


class WeightFileError(Exception):
    pass


class WeightVersionError(WeightFileError):
    pass


class MissingTensorError(WeightFileError):
    pass


class TensorShapeError(WeightFileError):
    pass


class ConfigMismatchError(WeightFileError):
    pass


@dataclass
class WeightStore:
    kind: str
    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"
    version: int = WEIGHT_VERSION

    def build(self):
        cls = PromptDepthNet if self.kind == "depth" else SceneClassifier
        model = cls(self.config)
        for name, t in model.params.items():
            if name not in self.tensors:
                raise MissingTensorError(f"weight file has no tensor {name!r}")
            arr = self.tensors[name]
            if arr.shape != t.shape:
                raise TensorShapeError(f"tensor {name!r}: file shape {arr.shape}, model expects {t.shape}")
            t.data = np.array(arr, dtype=np.float32)
        return model


Model = Union[PromptDepthNet, SceneClassifier]


def save_weights(model: Model, path) -> None:
    text = model.config.to_text(model.kind).encode("utf-8")
    chunks = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(text)), text]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weight_store(path) -> WeightStore:
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, tlen = struct.unpack_from("<II", blob, 4)
        if version != WEIGHT_VERSION:
            raise WeightVersionError(f"{path}: format version {version}, expected {WEIGHT_VERSION}")
        off = 12
        kind, config = ModelConfig.from_text(blob[off : off + tlen].decode("utf-8"))
        off += tlen
        tensors = OrderedDict()
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 4 * count > len(blob):
                raise WeightFileError(f"{path}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(blob, "<f4", count, off).reshape(dims).astype(np.float32)
            off += 4 * count
    except struct.error as exc:
        raise WeightFileError(f"{path}: truncated weight file") from exc
    return WeightStore(kind, config, tensors, version)


def load_weights(path, expected_config: Optional[ModelConfig] = None) -> Model:
    store = read_weight_store(path)
    if expected_config is not None and store.config != expected_config:
        raise ConfigMismatchError(f"{path}: stored config {store.config} != expected {expected_config}")
    return store.build()


# ------------------------------------------------------------------ registry

TASKS = ("lowres", "void", "update")


class WeightRegistry:
    """JSON map from (task, scene class) to weight files."""

    def __init__(self, entries: Optional[Dict[str, str]] = None, root: Optional[Path] = None):
        self.entries: Dict[str, str] = dict(entries or {})
        self.root = Path(root) if root is not None else None

    @staticmethod
    def key(task: str, scene: SceneClass) -> str:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        return f"{task}/{SceneClass(scene).value}"

    def register(self, task: str, scene: SceneClass, path) -> None:
        self.entries[self.key(task, scene)] = str(path)

    def path(self, task: str, scene: SceneClass) -> Path:
        k = self.key(task, scene)
        if k not in self.entries:
            raise KeyError(f"no weights for {k}; available: {sorted(self.entries)}")
        p = Path(self.entries[k])
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, task: str, scene: SceneClass) -> PromptDepthNet:
        return load_weights(self.path(task, scene))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"schema_version": 1, "entries": self.entries}, indent=2, sort_keys=True))

    @classmethod
    def open(cls, path) -> "WeightRegistry":
        path = Path(path)
        if not path.exists():
            return cls(root=path.parent)
        data = json.loads(path.read_text())
        return cls(data.get("entries", {}), root=path.parent)

    def __len__(self):
        return len(self.entries)
