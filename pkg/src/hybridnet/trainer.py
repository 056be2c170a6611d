"""
Optimization, staged training, checkpoint persistence and evaluation.

The staged recipe is: train the depth path (features + global +
refinement), train the segmentation path (features + ASPP), transplant
global/refinement weights from the first run and features/ASPP weights
from the second, then train everything end to end on the hybrid loss.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .datakit import FormatError, SceneSample, assemble_tiles, extract_tiles, make_tile_layout
from .losses import IGNORE_LABEL, LossBreakdown, hybrid_loss, valid_depth_mask
from .metrics import DepthAccumulator, DepthMetricsReport, SegMetricsReport, confusion_accumulate, seg_metrics
from .nets import BLOCKS, HybridNet, ModelConfig, layer_shapes
from .runtime import pinned_blas, worker_count

log = logging.getLogger(__name__)

STAGES = ("depth", "seg", "hybrid")
STAGE_BLOCKS = {
    "depth": ("features", "global", "refine"),
    "seg": ("features", "aspp"),
    "hybrid": BLOCKS,
}
MAGIC = b"HYBN"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1000.0
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 500
    seed: int = 0
    stage: str = "hybrid"
    reduction: str = "mean"
    log_every: int = 10
    ignore_label: int = IGNORE_LABEL

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be sum or mean, got {self.reduction!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0 <= self.lr < float("inf"):
            raise ConfigError("lr must be finite and >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        return self


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    iteration: int = 0
    stage: str = "init"
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: HybridNet, iteration: int = 0, stage: str = "init") -> "Checkpoint":
        return cls(ModelConfig.from_dict(model.cfg.to_dict()),
                   {n: p.data.copy() for n, p in model.named_parameters()}, iteration, stage)

    def to_model(self) -> HybridNet:
        model = HybridNet(ModelConfig.from_dict(self.model_config.to_dict()))
        if set(self.params) != set(model.params):
            raise CheckpointError("checkpoint parameter names do not match its config")
        for name, p in model.named_parameters():
            p.assign(self.params[name])
        return model


@dataclass
class StepLog:
    iteration: int
    losses: LossBreakdown

    def line(self) -> str:
        return self.losses.line(self.iteration)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[StepLog] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [s.line() for s in self.log]


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(params: Sequence[ad.Parameter], state: dict[str, np.ndarray], cfg: TrainConfig):
    """v ← momentum·v + grad + decay·w ; w ← w - lr·v ; grads are then zeroed."""
    for p in params:
        v = state.get(p.name)
        if v is None:
            v = state[p.name] = np.zeros_like(p.data)
        v *= cfg.momentum
        v += p.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * p.data
        p.data -= cfg.lr * v
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# training

def sample_order(n: int, iterations: int, seed: int) -> list[int]:
    """Seeded epoch-wise shuffles, concatenated and cut to ``iterations``."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    while len(order) < iterations:
        order.extend(int(i) for i in rng.permutation(n))
    return order[:iterations]


def _stage_loss(model: HybridNet, sample: SceneSample, cfg: TrainConfig, logged: bool):
    stage = cfg.stage
    want_depth = stage in ("depth", "hybrid")
    want_seg = stage in ("seg", "hybrid")
    out = model.forward(sample.rgb, depth=want_depth, seg=want_seg)
    valid = valid_depth_mask(sample.depth_gt)
    alpha = cfg.alpha if stage == "hybrid" else (1.0 if stage == "seg" else 0.0)
    objective = hybrid_loss(out.class_scores, sample.labels_gt, out.depth, sample.depth_gt, valid,
                            alpha=alpha, ignore_label=cfg.ignore_label, reduction=cfg.reduction)
    report = None
    if logged:
        depth, scores = out.depth, out.class_scores
        if depth is None or scores is None:
            with ad.no_grad():
                extra = model.forward(sample.rgb, depth=depth is None, seg=scores is None)
            depth = depth if depth is not None else extra.depth
            scores = scores if scores is not None else extra.class_scores
        with ad.no_grad():
            full = hybrid_loss(scores, sample.labels_gt, depth, sample.depth_gt, valid,
                               alpha=cfg.alpha, ignore_label=cfg.ignore_label, reduction=cfg.reduction)
        report = dataclasses.replace(full, total=None)
    return objective.total, report


def train_stage(model: HybridNet, dataset: Sequence[SceneSample], cfg: TrainConfig,
                on_log: Callable[[StepLog], None] | None = None, start_iteration: int = 0) -> TrainResult:
    """Run ``cfg.iterations`` SGD steps (batch of one image) on the stage objective.

    depth: L_DL + L_DN on features/global/refine; seg: L_S on
    features/aspp; hybrid: alpha·L_S + L_DL + L_DN on all parameters.
    Logged breakdowns always report all four scalars with ``cfg.alpha``.
    """
    cfg.validate()
    if not dataset:
        raise ConfigError("empty dataset")
    for s in dataset:
        if s.size != (model.cfg.input_h, model.cfg.input_w):
            raise ConfigError(f"sample {s.id} is {s.size[0]}×{s.size[1]}, model expects "
                              f"{model.cfg.input_h}×{model.cfg.input_w}")
    params = model.parameters(*STAGE_BLOCKS[cfg.stage])
    state: dict[str, np.ndarray] = {}
    history: list[StepLog] = []
    model.zero_grads()
    with pinned_blas():
        for it, idx in enumerate(sample_order(len(dataset), cfg.iterations, cfg.seed), start=1):
            logged = it == 1 or it % cfg.log_every == 0 or it == cfg.iterations
            loss, report = _stage_loss(model, dataset[idx], cfg, logged)
            ad.backward(loss)
            sgd_step(params, state, cfg)
            if report is not None:
                entry = StepLog(start_iteration + it, report)
                history.append(entry)
                if on_log is not None:
                    on_log(entry)
                log.debug(entry.line())
    ckpt = Checkpoint.from_model(model, start_iteration + cfg.iterations, cfg.stage)
    return TrainResult(ckpt, history)


def merge_checkpoints(depth_ckpt: Checkpoint, seg_ckpt: Checkpoint) -> Checkpoint:
    """Global/refine weights from ``depth_ckpt``; features/ASPP weights from ``seg_ckpt``."""
    # the init seed does not shape the network, so it may differ
    arch = lambda c: {k: v for k, v in c.model_config.to_dict().items() if k != "seed"}
    if arch(depth_ckpt) != arch(seg_ckpt):
        raise CheckpointError("cannot merge checkpoints with different model configs")
    if set(depth_ckpt.params) != set(seg_ckpt.params):
        raise CheckpointError("checkpoint parameter name sets differ")
    merged = {}
    for name in depth_ckpt.params:
        src = depth_ckpt if name.split(".", 1)[0] in ("global", "refine") else seg_ckpt
        merged[name] = src.params[name].copy()
    return Checkpoint(ModelConfig.from_dict(depth_ckpt.model_config.to_dict()), merged, 0, "hybrid")


# ---------------------------------------------------------------------------
# checkpoint format

def _config_block(ckpt: Checkpoint) -> bytes:
    doc = {"model": ckpt.model_config.to_dict(), "iteration": ckpt.iteration, "stage": ckpt.stage}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    order = [n for n, _ in layer_shapes(ckpt.model_config)]
    if sorted(order) != sorted(ckpt.params):
        raise CheckpointError("checkpoint parameters do not match its model config")
    block = _config_block(ckpt)
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(block)), block,
             struct.pack("<I", len(order))]
    for name in order:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes", self.pos, self.path)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes, path=None) -> Checkpoint:
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected HYBN", 0, path)
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    (blen,) = r.unpack("<I", "config length")
    at = r.pos
    try:
        doc = json.loads(r.take(blen, "config block").decode("utf-8"))
        cfg = ModelConfig.from_dict(doc["model"])
        iteration, stage = int(doc["iteration"]), str(doc["stage"])
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad config block: {e}", at, path) from None
    (count,) = r.unpack("<I", "entry count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", at + 2, path) from None
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", at, path)
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(8 * n, f"data of {name}"), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last entry", r.pos, path)
    ckpt = Checkpoint(cfg, params, iteration, stage, version)
    expected = dict(layer_shapes(cfg))
    if set(expected) != set(params):
        raise CheckpointError("checkpoint parameters do not match its model config")
    for name, dims in expected.items():
        if params[name].shape != dims:
            raise CheckpointError(f"{name}: dims {params[name].shape} != {dims}")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# inference and evaluation

def predict(model: HybridNet, rgb: np.ndarray, tiles: tuple[int, int] | None = None):
    """Depth (1×H×W) and class scores (K×H×W), optionally via tiling + averaging."""
    rgb = np.asarray(rgb, dtype=np.float64)
    _, h, w = rgb.shape
    mh, mw = model.cfg.input_h, model.cfg.input_w
    with ad.no_grad():
        if tiles is None:
            if (h, w) != (mh, mw):
                raise ConfigError(f"image is {h}×{w} but the model takes {mh}×{mw}; use tiling")
            out = model.forward(rgb)
            return out.depth.data.copy(), out.class_scores.data.copy()
        layout = make_tile_layout(h, w, *tiles)
        if (layout.tile_h, layout.tile_w) != (mh, mw):
            raise ConfigError(
                f"{tiles[0]}x{tiles[1]} tiles of a {h}×{w} image are {layout.tile_h}×{layout.tile_w}, "
                f"but the model takes {mh}×{mw}")
        depths, scores = [], []
        for crop in extract_tiles(rgb, layout):
            out = model.forward(crop)
            depths.append(out.depth.data)
            scores.append(out.class_scores.data)
        return assemble_tiles(depths, layout), assemble_tiles(scores, layout)


def _score_sample(model, sample: SceneSample, tiles, num_classes, ignore_label, oracle: bool):
    valid = valid_depth_mask(sample.depth_gt)
    if oracle:
        depth = sample.depth_gt
        labels = np.where(sample.labels_gt == ignore_label, 0, sample.labels_gt)
    else:
        depth, scores = predict(model, sample.rgb, tiles)
        labels = scores.argmax(axis=0)
    cm = confusion_accumulate(labels, sample.labels_gt, num_classes, ignore_label)
    return depth, valid, cm


def evaluate(model: HybridNet | Checkpoint | None, dataset: Sequence[SceneSample],
             tiles: tuple[int, int] | None = None, *, num_classes: int | None = None,
             ignore_label: int = IGNORE_LABEL, oracle: bool = False
             ) -> tuple[DepthMetricsReport, SegMetricsReport]:
    """Pixel-pooled depth metrics and confusion-matrix segmentation metrics.

    ``oracle=True`` scores the ground truth against itself without a model.
    Images are processed by ``HYBRIDNET_THREADS`` workers and merged in
    dataset order.
    """
    if isinstance(model, Checkpoint):
        model = model.to_model()
    if not dataset:
        raise ConfigError("empty dataset")
    if num_classes is None:
        if model is None:
            raise ConfigError("num_classes is required without a model")
        num_classes = model.cfg.num_classes
    if model is None and not oracle:
        raise ConfigError("a model is required unless oracle=True")

    def work(sample):
        return _score_sample(model, sample, tiles, num_classes, ignore_label, oracle)

    with pinned_blas():
        n = min(worker_count(), len(dataset))
        if n > 1:
            with ThreadPoolExecutor(max_workers=n) as pool:
                results = list(pool.map(work, dataset))
        else:
            results = [work(s) for s in dataset]

    acc = DepthAccumulator()
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for sample, (depth, valid, sample_cm) in zip(dataset, results):
        acc.add(depth, sample.depth_gt, valid)
        cm += sample_cm
    return acc.report(), seg_metrics(cm)
