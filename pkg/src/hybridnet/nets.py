"""
HybridNet: a shared VGG-style features trunk feeding a depth path
(global coarse network + refinement network) and an ASPP segmentation head.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

BLOCKS = ("features", "global", "refine", "aspp")
# softplus underflows to exactly 0 below about -745; keeps depth strictly positive
DEPTH_FLOOR = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_h: int = 64
    input_w: int = 128
    num_classes: int = 5
    feature_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    aspp_rates: list[int] = field(default_factory=lambda: [1, 2, 4])
    aspp_channels: int = 64
    global_channels: list[int] = field(default_factory=lambda: [16, 16, 32, 32])
    global_fc_dim: int = 128
    refine_channels: int = 32
    seed: int = 0

    @property
    def stride(self) -> int:
        """Downsampling factor of the features map (one 2×2 pool per block)."""
        return 2 ** len(self.feature_channels)

    @property
    def global_stride(self) -> int:
        return 2 ** len(self.global_channels)

    def validate(self):
        if not self.feature_channels or any(c < 1 for c in self.feature_channels):
            raise ConfigError(f"feature_channels must be positive: {self.feature_channels}")
        if not self.global_channels or any(c < 1 for c in self.global_channels):
            raise ConfigError(f"global_channels must be positive: {self.global_channels}")
        for size in (self.input_h, self.input_w):
            if size < 1 or size % max(self.global_stride, self.stride):
                raise ConfigError(f"input {self.input_h}×{self.input_w} must be divisible by "
                                  f"{max(self.global_stride, self.stride)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError(f"aspp rates must be >= 1: {self.aspp_rates}")
        for name in ("aspp_channels", "global_fc_dim", "refine_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


class HybridOutput(NamedTuple):
    depth: Tensor          # 1×H×W, strictly positive
    class_scores: Tensor   # K×H×W logits


def layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, dims) of every parameter implied by ``cfg``."""
    shapes = []

    def conv(prefix, cin, cout, k=3):
        shapes.append((f"{prefix}.weight", (cout, cin, k, k)))
        shapes.append((f"{prefix}.bias", (cout,)))

    cin = 3
    for b, c in enumerate(cfg.feature_channels, start=1):
        conv(f"features.block{b}.conv0", cin, c)
        conv(f"features.block{b}.conv1", c, c)
        cin = c
    cin = 3
    for s, c in enumerate(cfg.global_channels, start=1):
        conv(f"global.stage{s}.conv", cin, c)
        cin = c
    flat = cin * (cfg.input_h // cfg.global_stride) * (cfg.input_w // cfg.global_stride)
    coarse = (cfg.input_h // cfg.stride) * (cfg.input_w // cfg.stride)
    shapes += [("global.fc0.weight", (cfg.global_fc_dim, flat)), ("global.fc0.bias", (cfg.global_fc_dim,)),
               ("global.fc1.weight", (coarse, cfg.global_fc_dim)), ("global.fc1.bias", (coarse,))]
    cf = cfg.feature_channels[-1]
    conv("refine.conv0", 3 + cf + 1, cfg.refine_channels)
    conv("refine.conv1", cfg.refine_channels, cfg.refine_channels)
    conv("refine.conv2", cfg.refine_channels, 1)
    for r in cfg.aspp_rates:
        conv(f"aspp.rate{r}.conv", cf, cfg.aspp_channels)
        conv(f"aspp.rate{r}.score", cfg.aspp_channels, cfg.num_classes, k=1)
    return shapes


def init_model(cfg: ModelConfig) -> dict[str, Parameter]:
    """He-normal weights (std = sqrt(2/fan_in)), zero biases, seeded."""
    cfg.validate()
    if len(set(cfg.aspp_rates)) != len(cfg.aspp_rates):
        raise ConfigError(f"duplicate aspp rates: {cfg.aspp_rates}")
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, dims in layer_shapes(cfg):
        if name.endswith(".bias"):
            value = np.zeros(dims)
        else:
            fan_in = int(np.prod(dims[1:]))
            value = rng.standard_normal(dims) * np.sqrt(2.0 / fan_in)
        params[name] = Parameter(name, value)
    return params


def _as_batch(image) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(image)
    if t.ndim == 3:
        t = ad.reshape(t, (1,) + t.dims)
    if t.ndim != 4 or t.dims[0] != 1 or t.dims[1] != 3:
        raise ad.ShapeError(f"expected a 3×H×W image, got {t.dims}")
    return t


class HybridNet:
    """Parameters plus the four forward blocks; batch size is one image."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Parameter] | None = None):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_model(cfg)
        expected = [n for n, _ in layer_shapes(cfg)]
        if sorted(self.params) != sorted(expected):
            raise ConfigError("parameter names do not match the config")
        for name, dims in layer_shapes(cfg):
            if self.params[name].dims != dims:
                raise ConfigError(f"{name}: dims {self.params[name].dims} != {dims}")

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self, *blocks: str) -> list[Parameter]:
        blocks = blocks or BLOCKS
        return [p for n, p in self.params.items() if n.split(".", 1)[0] in blocks]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self):
        ad.zero_grads(self.params.values())

    def _conv(self, prefix, x, padding=1, dilation=1):
        return ad.conv2d(x, self.params[prefix + ".weight"], self.params[prefix + ".bias"],
                         padding=padding, dilation=dilation)

    def _check_input(self, x: Tensor):
        _, _, h, w = x.dims
        if (h, w) != (self.cfg.input_h, self.cfg.input_w):
            raise ad.ShapeError(f"model expects {self.cfg.input_h}×{self.cfg.input_w} input, got {h}×{w}")

    def features(self, image) -> Tensor:
        x = _as_batch(image)
        self._check_input(x)
        for b in range(1, len(self.cfg.feature_channels) + 1):
            x = ad.relu(self._conv(f"features.block{b}.conv0", x))
            x = ad.relu(self._conv(f"features.block{b}.conv1", x))
            x = ad.max_pool2d(x, 2, 2)
        return x

    def global_depth(self, image) -> Tensor:
        x = _as_batch(image)
        self._check_input(x)
        for s in range(1, len(self.cfg.global_channels) + 1):
            x = ad.max_pool2d(ad.relu(self._conv(f"global.stage{s}.conv", x)), 2, 2)
        x = ad.reshape(x, (1, -1))
        x = ad.relu(ad.linear(x, self.params["global.fc0.weight"], self.params["global.fc0.bias"]))
        x = ad.linear(x, self.params["global.fc1.weight"], self.params["global.fc1.bias"])
        s = self.cfg.stride
        return ad.reshape(x, (1, 1, self.cfg.input_h // s, self.cfg.input_w // s))

    def refine_depth(self, image, features: Tensor, coarse: Tensor) -> Tensor:
        x = _as_batch(image)
        self._check_input(x)
        h, w = self.cfg.input_h, self.cfg.input_w
        if features.ndim != 4 or coarse.ndim != 4 or features.dims[2:] != coarse.dims[2:] \
                or coarse.dims[1] != 1 or features.dims[1] != self.cfg.feature_channels[-1]:
            raise ad.ShapeError(f"refine: features {features.dims} / coarse {coarse.dims} mismatch")
        up_f = ad.bilinear_resize(features, h, w)
        up_c = ad.bilinear_resize(coarse, h, w)
        y = ad.concat_channels(x, up_f, up_c)
        y = ad.relu(self._conv("refine.conv0", y))
        y = ad.relu(self._conv("refine.conv1", y))
        return ad.softplus(self._conv("refine.conv2", y)) + DEPTH_FLOOR

    def aspp(self, features: Tensor, rates=None) -> Tensor:
        if features.ndim != 4 or features.dims[1] != self.cfg.feature_channels[-1]:
            raise ad.ShapeError(f"aspp: unexpected features dims {features.dims}")
        total = None
        for r in rates if rates is not None else self.cfg.aspp_rates:
            y = ad.relu(self._conv(f"aspp.rate{r}.conv", features, padding=r, dilation=r))
            y = self._conv(f"aspp.rate{r}.score", y, padding=0)
            total = y if total is None else total + y
        _, _, fh, fw = features.dims
        s = self.cfg.stride
        return ad.bilinear_resize(total, fh * s, fw * s)

    def forward(self, image, *, depth: bool = True, seg: bool = True):
        """Run the shared trunk once and the requested task paths.

        Returns a :class:`HybridOutput`; a path that was not requested is None.
        """
        x = _as_batch(image)
        feats = self.features(x)
        d = s = None
        if depth:
            d = self.refine_depth(x, feats, self.global_depth(x))
            d = ad.reshape(d, d.dims[1:])
        if seg:
            s = self.aspp(feats)
            s = ad.reshape(s, s.dims[1:])
        return HybridOutput(d, s)

    __call__ = forward


def hybrid_forward(model: HybridNet, image) -> HybridOutput:
    return model.forward(image)
