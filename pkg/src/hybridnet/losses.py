"""
Task losses: per-pixel softmax cross-entropy for segmentation, two
Euclidean depth terms (linear and mean-variance normalized) and their
weighted hybrid sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_EPS = 1e-6
IGNORE_LABEL = 255


class DataError(ValueError):
    pass


@dataclass
class NormStats:
    mu: float
    sigma: float
    epsilon: float = DEFAULT_EPS


@dataclass
class LossBreakdown:
    l_s: float
    l_dl: float
    l_dn: float
    l_h: float
    total: Tensor | None = None  # differentiable l_h

    def line(self, iteration: int) -> str:
        return (f"iter {iteration} l_s {self.l_s!r} l_dl {self.l_dl!r} "
                f"l_dn {self.l_dn!r} l_h {self.l_h!r}")


def valid_depth_mask(gt: np.ndarray) -> np.ndarray:
    """Pixels with finite, strictly positive ground truth."""
    gt = np.asarray(gt, dtype=float)
    with np.errstate(invalid="ignore"):
        return np.isfinite(gt) & (gt > 0)


def seg_cross_entropy(scores: Tensor, labels, ignore_label: int = IGNORE_LABEL,
                      reduction: str = "mean") -> Tensor:
    """Cross-entropy of K×H×W logits against an H×W label map."""
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    labels = np.asarray(labels)
    if scores.ndim != 3 or labels.shape != scores.dims[1:]:
        raise ad.ShapeError(f"scores {scores.dims} vs labels {labels.shape}")
    k = scores.dims[0]
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise DataError(f"labels outside 0..{k - 1} (and not {ignore_label})")

    z = scores.data.reshape(k, -1)
    idx = np.flatnonzero(valid)
    lab = labels.reshape(-1)[idx].astype(np.intp)
    n = idx.size
    if n == 0:
        return ad.make_op(np.array(0.0), (scores,), lambda g: (np.zeros(scores.dims),))
    zv = z[:, idx]
    zmax = zv.max(axis=0)
    shifted = zv - zmax
    lse = np.log(np.exp(shifted).sum(axis=0))
    per_pixel = lse - shifted[lab, np.arange(n)]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = per_pixel.sum() * scale

    def bw(g):
        soft = np.exp(shifted - lse)
        soft[lab, np.arange(n)] -= 1.0
        full = np.zeros_like(z)
        full[:, idx] = soft * (g * scale)
        return (full.reshape(scores.dims),)
    return ad.make_op(np.array(value), (scores,), bw)


def _valid_index(valid, shape) -> np.ndarray:
    valid = np.asarray(valid, dtype=bool)
    if valid.size != int(np.prod(shape)):
        raise ad.ShapeError(f"mask of {valid.shape} does not fit depth {shape}")
    idx = np.flatnonzero(valid.reshape(-1))
    if idx.size == 0:
        raise DataError("no valid depth pixels")
    return idx


def _standardize(v: Tensor, eps: float) -> tuple[Tensor, Tensor, Tensor]:
    mu = ad.mean(v)
    centered = v - mu
    sigma = ad.safe_sqrt(ad.mean(ad.square(centered)))
    return centered / (sigma + eps), mu, sigma


def mean_variance_normalize(depth, valid, epsilon: float = DEFAULT_EPS) -> tuple[Tensor, NormStats]:
    """Standardize ``depth`` over its valid pixels; invalid pixels pass through."""
    depth = ad.as_tensor(depth)
    idx = _valid_index(valid, depth.dims)
    flat = ad.reshape(depth, (-1,))
    normed, mu, sigma = _standardize(ad.take(flat, idx), epsilon)
    out = ad.reshape(ad.index_put(flat, idx, normed), depth.dims)
    return out, NormStats(mu.item(), sigma.item(), epsilon)


def _half_mse(a: Tensor, b) -> Tensor:
    diff = a - b
    return ad.tsum(ad.square(diff)) * (0.5 / a.data.size)


def depth_linear_loss(pred, gt, valid=None) -> Tensor:
    """(1/2N) Σ_valid (pred - gt)²."""
    pred = ad.as_tensor(pred)
    gt_arr = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=float)
    if gt_arr.shape != pred.dims:
        raise ad.ShapeError(f"pred {pred.dims} vs gt {gt_arr.shape}")
    if valid is None:
        valid = valid_depth_mask(gt_arr)
    idx = _valid_index(valid, pred.dims)
    p = ad.take(ad.reshape(pred, (-1,)), idx)
    return _half_mse(p, gt_arr.reshape(-1)[idx])


def depth_normalized_loss(pred, gt, valid=None, epsilon: float = DEFAULT_EPS) -> Tensor:
    """Half-MSE between the standardized prediction and standardized ground truth."""
    pred = ad.as_tensor(pred)
    gt_arr = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=float)
    if gt_arr.shape != pred.dims:
        raise ad.ShapeError(f"pred {pred.dims} vs gt {gt_arr.shape}")
    if valid is None:
        valid = valid_depth_mask(gt_arr)
    idx = _valid_index(valid, pred.dims)
    p, _, _ = _standardize(ad.take(ad.reshape(pred, (-1,)), idx), epsilon)
    with ad.no_grad():
        g, _, _ = _standardize(Tensor(gt_arr.reshape(-1)[idx]), epsilon)
    return _half_mse(p, g.data)


def combine_losses(l_s: float, l_dl: float, l_dn: float, alpha: float = 1000.0) -> float:
    # same association order as the differentiable total below
    return float(alpha) * l_s + l_dl + l_dn


def hybrid_loss(scores, labels, pred_depth, gt_depth, valid=None, alpha: float = 1000.0,
                ignore_label: int = IGNORE_LABEL, reduction: str = "mean",
                epsilon: float = DEFAULT_EPS) -> LossBreakdown:
    """alpha·L_S + L_DL + L_DN with a differentiable total.

    Either task may be None (its terms are then reported as 0 and
    contribute nothing to the total).
    """
    terms = []
    l_s = l_dl = l_dn = 0.0
    if scores is not None:
        ls = seg_cross_entropy(scores, labels, ignore_label, reduction)
        l_s = ls.item()
        if alpha != 0:
            terms.append(ls * float(alpha))
    if pred_depth is not None:
        if valid is None:
            valid = valid_depth_mask(gt_depth)
        ldl = depth_linear_loss(pred_depth, gt_depth, valid)
        ldn = depth_normalized_loss(pred_depth, gt_depth, valid, epsilon)
        l_dl, l_dn = ldl.item(), ldn.item()
        terms += [ldl, ldn]
    total = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        total = total + t
    return LossBreakdown(l_s, l_dl, l_dn, combine_losses(l_s, l_dl, l_dn, alpha), total)
