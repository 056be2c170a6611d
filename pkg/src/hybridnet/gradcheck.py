"""Finite-difference gradient suites for ops, losses and the full model."""
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datakit import GenConfig, synth_scene
from .losses import (depth_linear_loss, depth_normalized_loss, hybrid_loss,
                     mean_variance_normalize, seg_cross_entropy)
from .nets import HybridNet, ModelConfig

EPSILON = 1e-4
OPS_TOL = 1e-6
LOSSES_TOL = 1e-6
MODEL_TOL = 1e-4
SCOPES = ("ops", "losses", "model")


class CheckResult(NamedTuple):
    scope: str
    target: str
    error: float
    threshold: float
    skipped: int = 0

    @property
    def ok(self):
        return self.error < self.threshold


def _leaf(a):
    return Tensor(a, requires_grad=True)


def _off_kink(a, gap=1e-2):
    # finite differences are meaningless within epsilon of a relu kink
    return np.where(np.abs(a) < gap, np.copysign(gap, a), a)


def _probed(fn, rng):
    probe = Tensor(rng.standard_normal(fn().dims))
    return lambda: ad.tsum(fn() * probe)


def op_cases(seed=0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = []

    def add(name, fn, leaves):
        cases.append((name, _probed(fn, rng), leaves))

    x = _leaf(rng.standard_normal((2, 3, 8, 10)))
    for pad, dil in ((1, 1), (2, 2), (4, 4), (0, 2)):
        w, b = _leaf(rng.standard_normal((4, 3, 3, 3))), _leaf(rng.standard_normal(4))
        add(f"conv2d p{pad} d{dil}", lambda w=w, b=b, p=pad, d=dil: ad.conv2d(x, w, b, 1, p, d), [x, w, b])
    x9 = _leaf(rng.standard_normal((1, 3, 9, 11)))
    w9, b9 = _leaf(rng.standard_normal((2, 3, 3, 3))), _leaf(rng.standard_normal(2))
    add("conv2d s2 p1 d1", lambda: ad.conv2d(x9, w9, b9, 2, 1, 1), [x9, w9, b9])
    w1, b1 = _leaf(rng.standard_normal((5, 3, 1, 1))), _leaf(rng.standard_normal(5))
    add("conv2d 1x1", lambda: ad.conv2d(x, w1, b1), [x, w1, b1])

    # distinct values keep every pool window's argmax stable under the probe
    pool_in = _leaf(rng.permutation(2 * 3 * 8 * 10).reshape(2, 3, 8, 10) * 0.01)
    add("max_pool2d", lambda: ad.max_pool2d(pool_in, 2, 2), [pool_in])
    add("max_pool2d k3 s1", lambda: ad.max_pool2d(pool_in, 3, 1), [pool_in])

    add("bilinear_resize up", lambda: ad.bilinear_resize(x, 13, 21), [x])
    add("bilinear_resize down", lambda: ad.bilinear_resize(x, 3, 4), [x])

    xf, wf, bf = _leaf(rng.standard_normal((3, 7))), _leaf(rng.standard_normal((4, 7))), _leaf(rng.standard_normal(4))
    add("linear", lambda: ad.linear(xf, wf, bf), [xf, wf, bf])

    r = _leaf(_off_kink(rng.standard_normal((3, 4, 5))))
    add("relu", lambda: ad.relu(r), [r])
    s = _leaf(rng.standard_normal((3, 4, 5)) * 4)
    add("softplus", lambda: ad.softplus(s), [s])
    pos = _leaf(rng.uniform(0.5, 3.0, (3, 4, 5)))
    add("log", lambda: ad.log(pos), [pos])
    add("exp", lambda: ad.exp(s * 0.25), [s])
    add("safe_sqrt", lambda: ad.safe_sqrt(pos), [pos])
    add("square", lambda: ad.square(s), [s])

    a, bb = _leaf(rng.standard_normal((2, 3, 4))), _leaf(rng.uniform(0.5, 2.0, (1, 3, 1)))
    add("broadcast arithmetic", lambda: (a + bb) * a / bb - bb, [a, bb])
    add("sum over axis", lambda: ad.tsum(a, axis=1), [a])
    add("mean", lambda: ad.mean(a) * a, [a])

    y = _leaf(rng.standard_normal((2, 2, 8, 10)))
    add("concat_channels", lambda: ad.concat_channels(x, y), [x, y])

    v = _leaf(rng.standard_normal(10))
    idx = np.array([1, 4, 7])
    add("take/index_put", lambda: ad.index_put(v, idx, ad.take(v, idx) * 3.0), [v])
    return cases


def loss_cases(seed=0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    k, h, w = 4, 6, 7
    scores = _leaf(rng.standard_normal((k, h, w)) * 2)
    labels = rng.integers(0, k, (h, w))
    labels[rng.random((h, w)) < 0.2] = 255
    pred = _leaf(rng.uniform(1.0, 5.0, (1, h, w)))
    gt = rng.uniform(1.0, 5.0, (1, h, w))
    gt[0, 0, :2] = 0.0
    valid = gt[0] > 0
    probe = Tensor(rng.standard_normal((1, h, w)))
    return [
        ("cross_entropy mean", lambda: seg_cross_entropy(scores, labels), [scores]),
        ("cross_entropy sum", lambda: seg_cross_entropy(scores, labels, reduction="sum"), [scores]),
        ("mean_variance_normalize", lambda: ad.tsum(mean_variance_normalize(pred, valid)[0] * probe), [pred]),
        ("depth_linear", lambda: depth_linear_loss(pred, gt), [pred]),
        ("depth_normalized", lambda: depth_normalized_loss(pred, gt), [pred]),
        ("hybrid alpha=1000", lambda: hybrid_loss(scores, labels, pred, gt, alpha=1000.0).total, [scores, pred]),
    ]


def toy_model_config():
    return ModelConfig(input_h=32, input_w=64)


def model_case(seed=0):
    """The toy model on one synthetic scene, scored by the hybrid loss."""
    cfg = toy_model_config()
    model = HybridNet(cfg)
    sample = synth_scene(GenConfig(h=cfg.input_h, w=cfg.input_w, num_classes=cfg.num_classes, seed=seed))

    def fn():
        out = model.forward(sample.rgb)
        return hybrid_loss(out.class_scores, sample.labels_gt, out.depth, sample.depth_gt, alpha=1000.0).total

    return fn, model.parameters()


def run_scope(scope, samples_per_param=3) -> list[CheckResult]:
    """Each parameter tensor of the model is probed at ``samples_per_param`` elements."""
    if scope in ("ops", "losses"):
        cases, tol = (op_cases(), OPS_TOL) if scope == "ops" else (loss_cases(), LOSSES_TOL)
        out = []
        for name, fn, params in cases:
            err, skipped = ad.grad_check_details(fn, params, EPSILON)
            out.append(CheckResult(scope, name, err, tol, skipped))
        return out
    if scope == "model":
        fn, params = model_case()
        err, skipped = ad.grad_check_details(fn, params, EPSILON, samples_per_param=samples_per_param)
        return [CheckResult(scope, "toy model through hybrid loss", err, MODEL_TOL, skipped)]
    raise ValueError(f"unknown scope {scope!r}; expected one of {', '.join(SCOPES)}")
