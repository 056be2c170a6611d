"""Brute-force reference implementations used only by the tests."""
import math

import numpy as np


def conv2d_loop(x, w, b, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[oc]
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                yy = y * stride - padding + i * dilation
                                xs = xx * stride - padding + j * dilation
                                if 0 <= yy < h and 0 <= xs < wd:
                                    acc += x[bi, ci, yy, xs] * w[oc, ci, i, j]
                    out[bi, oc, y, xx] = acc
    return out


def max_pool_loop(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    out[a, ch, y, xx] = max(x[a, ch, y * s + i, xx * s + j] for i in range(k) for j in range(k))
    return out


def bilinear_point(img, sy, sx):
    h, w = img.shape
    y0, x0 = min(int(math.floor(sy)), h - 1), min(int(math.floor(sx)), w - 1)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_loop(img, oh, ow):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = 0.0 if oh == 1 else i * (h - 1) / (oh - 1)
            sx = 0.0 if ow == 1 else j * (w - 1) / (ow - 1)
            out[i, j] = bilinear_point(img, sy, sx)
    return out


def depth_metrics_loop(pred, gt):
    """Per-pixel loop over already-valid pixel lists; exact sums via fsum."""
    p, g = list(map(float, pred)), list(map(float, gt))
    n = len(p)
    ratios = [max(a / b, b / a) for a, b in zip(p, g)]
    d = [math.log(a) - math.log(b) for a, b in zip(p, g)]
    mean_d = math.fsum(d) / n
    return {
        "delta1": sum(r < 1.25 for r in ratios) / n,
        "delta2": sum(r < 1.25 ** 2 for r in ratios) / n,
        "delta3": sum(r < 1.25 ** 3 for r in ratios) / n,
        "ard": math.fsum(abs(a - b) / b for a, b in zip(p, g)) / n,
        "srd": math.fsum((a - b) ** 2 / b for a, b in zip(p, g)) / n,
        "rmse_linear": math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(p, g)) / n),
        "rmse_log": math.sqrt(math.fsum(v * v for v in d) / n),
        "sie": math.fsum(v * v for v in d) / n - mean_d * mean_d,
    }


def seg_metrics_loop(pred, gt, k, ignore):
    correct = total = 0
    tp = [0] * k
    gt_count = [0] * k
    pred_count = [0] * k
    for a, b in zip(np.ravel(pred), np.ravel(gt)):
        if b == ignore:
            continue
        total += 1
        gt_count[b] += 1
        pred_count[a] += 1
        if a == b:
            correct += 1
            tp[b] += 1
    accs = [tp[c] / gt_count[c] for c in range(k) if gt_count[c]]
    ious = [tp[c] / (gt_count[c] + pred_count[c] - tp[c]) for c in range(k)
            if gt_count[c] + pred_count[c] - tp[c]]
    return {"global_acc": correct / total, "class_acc": sum(accs) / len(accs),
            "mean_iou": sum(ious) / len(ious)}


def cross_entropy_loop(scores, labels, ignore, reduction="mean"):
    k = scores.shape[0]
    terms = []
    for y in range(labels.shape[0]):
        for x in range(labels.shape[1]):
            lab = labels[y, x]
            if lab == ignore:
                continue
            z = [scores[c, y, x] for c in range(k)]
            m = max(z)
            terms.append(m + math.log(math.fsum(math.exp(v - m) for v in z)) - z[lab])
    if not terms:
        return 0.0
    s = math.fsum(terms)
    return s / len(terms) if reduction == "mean" else s


def standardize_loop(values, eps=1e-6):
    n = len(values)
    mu = math.fsum(values) / n
    sigma = math.sqrt(math.fsum((v - mu) ** 2 for v in values) / n)
    return [(v - mu) / (sigma + eps) for v in values]


def half_mse_loop(a, b):
    return math.fsum((x - y) ** 2 for x, y in zip(a, b)) / (2 * len(a))


def random_metric_case(seed):
    """A random prediction/gt pair for both tasks, with some invalid and ignored pixels."""
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(4, 24)), int(rng.integers(4, 24))
    k = int(rng.integers(2, 7))
    gt = rng.uniform(0.5, 80.0, (h, w))
    gt[rng.random((h, w)) < 0.1] = 0.0
    if not (gt > 0).any():
        gt[0, 0] = 1.0
    pred = gt * np.exp(rng.normal(0.0, rng.uniform(0.05, 0.8), (h, w)))
    labels = rng.integers(0, k, (h, w))
    labels[rng.random((h, w)) < 0.1] = 255
    flip = rng.random((h, w)) < rng.uniform(0.0, 0.7)
    pred_labels = np.where(flip, rng.integers(0, k, (h, w)), np.where(labels == 255, 0, labels))
    return pred, gt, pred_labels, labels, k
