"""
Scene samples, the synthetic scene generator, tiled crop/reassembly and
the on-disk formats (PPM, PGM, DMAP, manifest).
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import IGNORE_LABEL

MANIFEST = "manifest.txt"


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte {offset})")
        self.offset = offset
        self.path = path


@dataclass
class SceneSample:
    id: str
    rgb: np.ndarray        # 3×H×W in [0, 1]
    depth_gt: np.ndarray   # 1×H×W, 0 marks invalid
    labels_gt: np.ndarray  # H×W, ignore_label for unlabeled
    objects: list = field(default_factory=list, compare=False, repr=False)

    @property
    def size(self) -> tuple[int, int]:
        return self.labels_gt.shape

    def validate(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        h, w = self.labels_gt.shape
        if self.rgb.shape != (3, h, w) or self.depth_gt.shape != (1, h, w):
            raise ConfigError(f"{self.id}: rasters disagree on size")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise ConfigError(f"{self.id}: rgb outside [0, 1]")
        if not np.all(np.isfinite(self.depth_gt)) or np.any(self.depth_gt < 0):
            raise ConfigError(f"{self.id}: depth must be finite and >= 0")
        lab = self.labels_gt
        if np.any((lab != ignore_label) & ((lab < 0) | (lab >= num_classes))):
            raise ConfigError(f"{self.id}: label out of range")
        return self


@dataclass
class GenConfig:
    h: int = 64
    w: int = 128
    num_classes: int = 5
    objects_min: int = 2
    objects_max: int = 4
    depth_near: float = 2.0
    depth_far: float = 10.0
    ignore_border: int = 2
    ignore_label: int = IGNORE_LABEL
    seed: int = 0

    def validate(self):
        if self.h < 4 or self.w < 4:
            raise ConfigError(f"image too small: {self.h}×{self.w}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ConfigError("need 0 <= objects_min <= objects_max")
        if not 0 < self.depth_near < self.depth_far:
            raise ConfigError("need 0 < depth_near < depth_far")
        if self.ignore_border < 0 or 2 * self.ignore_border >= min(self.h, self.w):
            raise ConfigError("ignore_border leaves no labeled pixels")
        if 0 <= self.ignore_label < self.num_classes or not 0 <= self.ignore_label <= 255:
            raise ConfigError("ignore_label must be in 0..255 and not a class id")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        return self


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed, well separated base colors (num_classes×3)."""
    hues = np.arange(num_classes) / num_classes
    # hue wheel at full saturation, evaluated with the standard piecewise ramps
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6.0) % 6.0
    rgb = 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return 0.15 + 0.85 * rgb


def synth_scene(cfg: GenConfig, sample_id: str | None = None) -> SceneSample:
    """Ground plane background (class 0) plus occluding constant-depth boxes.

    The background recedes from ``depth_far`` at the bottom row to
    ``2·depth_far`` at the top, so every box (depth in [near, far)) lies in
    front of it. Colors are the class base color shaded by near/depth and
    quantized to 8 bits; depth is rounded to float32 so both survive a disk
    round trip bit-exactly.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w, near, far = cfg.h, cfg.w, cfg.depth_near, cfg.depth_far

    rows = np.arange(h, dtype=np.float64)
    bg_depth = far * (2.0 - rows / max(h - 1, 1))
    depth = np.repeat(bg_depth[:, None], w, axis=1)
    labels = np.zeros((h, w), dtype=np.int64)

    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    boxes = []
    for _ in range(n_obj):
        bh = int(rng.integers(max(2, h // 5), max(3, h // 2) + 1))
        bw = int(rng.integers(max(2, w // 8), max(3, w // 3) + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        cls = int(rng.integers(1, cfg.num_classes)) if cfg.num_classes > 1 else 0
        z = float(rng.uniform(near, far))
        boxes.append((float(np.float32(z)), y0, x0, bh, bw, cls))
    # painter's order: far to near, so nearer boxes overwrite
    for z, y0, x0, bh, bw, cls in sorted(boxes, key=lambda b: -b[0]):
        depth[y0:y0 + bh, x0:x0 + bw] = z
        labels[y0:y0 + bh, x0:x0 + bw] = cls

    depth = depth.astype(np.float32).astype(np.float64)
    palette = class_palette(cfg.num_classes)
    shade = 0.35 + 0.65 * (near / depth)
    rgb = palette[labels].transpose(2, 0, 1) * shade[None]
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0

    b = cfg.ignore_border
    if b:
        labels[:b, :] = cfg.ignore_label
        labels[-b:, :] = cfg.ignore_label
        labels[:, :b] = cfg.ignore_label
        labels[:, -b:] = cfg.ignore_label
    sid = sample_id if sample_id is not None else f"scene{cfg.seed:06d}"
    return SceneSample(sid, rgb, depth[None], labels, boxes)


def synth_dataset(cfg: GenConfig, count: int, prefix: str = "scene") -> list[SceneSample]:
    """``count`` scenes; scene i uses seed ``cfg.seed + i``."""
    out = []
    for i in range(count):
        sub = GenConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        out.append(synth_scene(sub, f"{prefix}{i:04d}"))
    return out


def disparity_to_depth(disparity_raw, baseline: float, focal: float) -> np.ndarray:
    """Cityscapes-style 16-bit disparity to depth; raw 0 (and raw 1) become invalid (0)."""
    if baseline <= 0 or focal <= 0:
        raise ConfigError("baseline and focal must be positive")
    p = np.asarray(disparity_raw, dtype=np.float64)
    d = (p - 1.0) / 256.0
    depth = np.zeros_like(p)
    ok = (p > 0) & (d > 0)
    depth[ok] = focal * baseline / d[ok]
    return depth


# ---------------------------------------------------------------------------
# tiling

@dataclass
class TileLayout:
    height: int
    width: int
    rows: int
    cols: int
    tile_h: int
    tile_w: int
    origins: list

    def __len__(self):
        return len(self.origins)


def _spread(i: int, n: int, extent: int, tile: int) -> int:
    if n == 1:
        return 0
    # round half up
    return int(math.floor(i * (extent - tile) / (n - 1) + 0.5))


def make_tile_layout(h: int, w: int, rows: int = 3, cols: int = 6) -> TileLayout:
    """rows×cols evenly spread tiles of ceil(h/rows)×ceil(w/cols) covering the image."""
    if h < 1 or w < 1 or rows < 1 or cols < 1 or rows > h or cols > w:
        raise ConfigError(f"cannot tile {h}×{w} into {rows}×{cols}")
    th, tw = -(-h // rows), -(-w // cols)
    origins = [(_spread(i, rows, h, th), _spread(j, cols, w, tw))
               for i in range(rows) for j in range(cols)]
    return TileLayout(h, w, rows, cols, th, tw, origins)


def extract_tiles(raster: np.ndarray, layout: TileLayout) -> list[np.ndarray]:
    """Crops of the trailing two axes at every layout origin."""
    raster = np.asarray(raster)
    if raster.shape[-2:] != (layout.height, layout.width):
        raise ConfigError(f"raster {raster.shape[-2:]} does not match layout {layout.height}×{layout.width}")
    return [raster[..., y:y + layout.tile_h, x:x + layout.tile_w].copy() for y, x in layout.origins]


def coverage_count(layout: TileLayout) -> np.ndarray:
    count = np.zeros((layout.height, layout.width), dtype=np.int64)
    for y, x in layout.origins:
        count[y:y + layout.tile_h, x:x + layout.tile_w] += 1
    return count


def assemble_tiles(crops, layout: TileLayout, blend: str = "average") -> np.ndarray:
    """Average overlapping per-tile maps (C×tile_h×tile_w) back into C×H×W."""
    if blend != "average":
        raise ConfigError(f"unsupported blend {blend!r}")
    if len(crops) != len(layout.origins):
        raise ConfigError(f"{len(crops)} crops for {len(layout.origins)} tiles")
    crops = [np.asarray(c, dtype=np.float64) for c in crops]
    lead = crops[0].shape[:-2]
    out = np.zeros(lead + (layout.height, layout.width))
    count = np.zeros((layout.height, layout.width))
    # running mean: overlaps of identical values reproduce them exactly
    for c, (y, x) in zip(crops, layout.origins):
        if c.shape != lead + (layout.tile_h, layout.tile_w):
            raise ConfigError(f"crop dims {c.shape} do not match tile {layout.tile_h}×{layout.tile_w}")
        win = (..., slice(y, y + layout.tile_h), slice(x, x + layout.tile_w))
        count[win[1:]] += 1.0
        out[win] += (c - out[win]) / count[win[1:]]
    return out


# ---------------------------------------------------------------------------
# file formats

def _write_atomic(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ConfigError(f"rgb must be 3×H×W, got {rgb.shape}")
    _, h, w = rgb.shape
    q = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + q.transpose(1, 2, 0).tobytes()


def encode_pgm(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ConfigError(f"label map must be H×W, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ConfigError("label values must fit in 0..255")
    h, w = labels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes()


def encode_dmap(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3 and depth.shape[0] == 1:
        depth = depth[0]
    if depth.ndim != 2:
        raise ConfigError(f"depth must be H×W or 1×H×W, got {depth.shape}")
    h, w = depth.shape
    return b"DMAP" + struct.pack("<BII", 1, h, w) + depth.astype("<f4").tobytes()


def _parse_pnm(buf: bytes, magic: bytes, channels: int, path=None) -> np.ndarray:
    if buf[:2] != magic:
        raise FormatError(f"expected {magic.decode()} header", 0, path)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header field", start, path)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", pos, path)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported (need 255)", pos - 1, path)
    if w < 1 or h < 1:
        raise FormatError(f"bad dimensions {w}×{h}", pos - 1, path)
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf), path)
    if len(buf) - pos > need:
        raise FormatError("trailing bytes after pixel data", pos + need, path)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, channels)


def decode_ppm(buf: bytes, path=None) -> np.ndarray:
    px = _parse_pnm(buf, b"P6", 3, path)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def decode_pgm(buf: bytes, path=None) -> np.ndarray:
    return _parse_pnm(buf, b"P5", 1, path)[..., 0].astype(np.int64)


def decode_dmap(buf: bytes, path=None) -> np.ndarray:
    if buf[:4] != b"DMAP":
        raise FormatError("bad magic, expected DMAP", 0, path)
    if len(buf) < 13:
        raise FormatError("truncated header", len(buf), path)
    version, h, w = struct.unpack_from("<BII", buf, 4)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4, path)
    need = 13 + 4 * h * w
    if len(buf) < need:
        raise FormatError(f"truncated data: need {need} bytes, have {len(buf)}", len(buf), path)
    if len(buf) > need:
        raise FormatError("trailing bytes after depth data", need, path)
    return np.frombuffer(buf, dtype="<f4", count=h * w, offset=13).astype(np.float64).reshape(1, h, w)


def _read(path) -> bytes:
    return Path(path).read_bytes()


def write_ppm(path, rgb):
    _write_atomic(path, encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(_read(path), path)


def write_pgm(path, labels):
    _write_atomic(path, encode_pgm(labels))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(_read(path), path)


def write_dmap(path, depth):
    _write_atomic(path, encode_dmap(depth))


def read_dmap(path) -> np.ndarray:
    return decode_dmap(_read(path), path)


def write_sample(directory, sample: SceneSample):
    d = Path(directory)
    write_ppm(d / f"{sample.id}.ppm", sample.rgb)
    write_pgm(d / f"{sample.id}_labels.pgm", sample.labels_gt)
    write_dmap(d / f"{sample.id}_depth.dmap", sample.depth_gt)


def read_sample(directory, sample_id: str) -> SceneSample:
    d = Path(directory)
    return SceneSample(sample_id,
                       read_ppm(d / f"{sample_id}.ppm"),
                       read_dmap(d / f"{sample_id}_depth.dmap"),
                       read_pgm(d / f"{sample_id}_labels.pgm"))


def write_dataset(directory, samples):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        if not s.id or any(ch.isspace() for ch in s.id) or "/" in s.id:
            raise ConfigError(f"invalid sample id {s.id!r}")
        write_sample(d, s)
    _write_atomic(d / MANIFEST, "".join(f"{s.id}\n" for s in samples).encode("utf-8"))


def read_manifest(directory) -> list[str]:
    text = (Path(directory) / MANIFEST).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def read_dataset(directory) -> list[SceneSample]:
    return [read_sample(directory, sid) for sid in read_manifest(directory)]
