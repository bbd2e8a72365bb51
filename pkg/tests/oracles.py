"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (explicit loops, scalar
accumulation, no shared code with the package) so that agreement with the
library is evidence and not tautology.
"""

from __future__ import annotations

import math

import numpy as np


# -- scalar layer forward ----------------------------------------------------


def conv2d_ref(x, weight, bias=None, stride=1, padding=1):
    """Cross-correlation with explicit loops; NCHW input, OIHW kernel."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    padded = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    padded[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += (
                                    padded[i, c, y * stride + dy, xx * stride + dx]
                                    * weight[o, c, dy, dx]
                                )
                    if bias is not None:
                        acc += bias[o]
                    out[i, o, y, xx] = acc
    return out


def bn_train_ref(x, gamma, beta, eps=1e-5):
    """Batch-statistics normalization (biased variance), channel by channel."""
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ch in range(c):
        values = [x[i, ch, y, xx] for i in range(n) for y in range(h) for xx in range(w)]
        mu = sum(values) / len(values)
        var = sum((v - mu) ** 2 for v in values) / len(values)
        denom = math.sqrt(var + eps)
        for i in range(n):
            for y in range(h):
                for xx in range(w):
                    out[i, ch, y, xx] = gamma[ch] * (x[i, ch, y, xx] - mu) / denom + beta[ch]
    return out


def linear_ref(x, weight, bias=None):
    n, f = x.shape
    o = weight.shape[0]
    out = np.zeros((n, o))
    for i in range(n):
        for j in range(o):
            acc = 0.0
            for k in range(f):
                acc += x[i, k] * weight[j, k]
            if bias is not None:
                acc += bias[j]
            out[i, j] = acc
    return out


def relu_ref(x):
    return np.where(x > 0.0, x, 0.0)


def sigmoid_ref(x):
    out = np.zeros_like(x)
    flat_in = x.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_in.size):
        z = flat_in[i]
        if z >= 0:
            flat_out[i] = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            flat_out[i] = e / (1.0 + e)
    return out


def gap_ref(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1))
    for i in range(n):
        for ch in range(c):
            out[i, ch, 0, 0] = x[i, ch].sum() / (h * w)
    return out


# -- scalar block forward ----------------------------------------------------


def channel_attention_ref(x, w_squeeze, w_excite):
    pooled = gap_ref(x)
    hidden = relu_ref(conv2d_ref(pooled, w_squeeze, stride=1, padding=0))
    gate = sigmoid_ref(conv2d_ref(hidden, w_excite, stride=1, padding=0))
    return x * gate


def residual_block_ref(x, w_reduce, g1, b1, w_conv, g2, b2, w_expand, eps=1e-5):
    mid = bn_train_ref(conv2d_ref(x, w_reduce, stride=1, padding=0), g1, b1, eps)
    mid = relu_ref(mid)
    mid = bn_train_ref(conv2d_ref(mid, w_conv, stride=1, padding=1), g2, b2, eps)
    return x + conv2d_ref(mid, w_expand, stride=1, padding=0)


def domain_head_ref(x, params):
    """params maps trunk_a/trunk_b/att_a/att_b to (weight, bias), fc likewise."""
    wa, ba = params["trunk_a"]
    wb, bb = params["trunk_b"]
    trunk = relu_ref(conv2d_ref(x, wa, ba, stride=1, padding=3))
    trunk = relu_ref(conv2d_ref(trunk, wb, bb, stride=1, padding=2))
    wa, ba = params["att_a"]
    wb, bb = params["att_b"]
    att = relu_ref(conv2d_ref(trunk, wa, ba, stride=1, padding=3))
    att = relu_ref(conv2d_ref(att, wb, bb, stride=1, padding=2))
    fused = gap_ref(trunk) * gap_ref(att)
    wf, bf = params["fc"]
    return linear_ref(fused[:, :, 0, 0], wf, bf)


# -- postprocess / metrics ---------------------------------------------------


def iou_ref(a, b) -> float:
    ax0, ay0, ax1, ay1 = a.x_min, a.y_min, a.x_max, a.y_max
    bx0, by0, bx1, by1 = b.x_min, b.y_min, b.x_max, b.y_max
    ix = min(ax1, bx1) - max(ax0, bx0)
    iy = min(ay1, by1) - max(ay0, by0)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms_brute(dets, thr: float):
    """Forward-marking greedy suppression; same contract, different shape."""
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, dets[i].class_id, dets[i].bbox.as_tuple()),
    )
    suppressed = [False] * len(dets)
    kept = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(dets[i])
        for j in order[pos + 1 :]:
            if suppressed[j] or dets[j].class_id != dets[i].class_id:
                continue
            if iou_ref(dets[i].bbox, dets[j].bbox) >= thr:
                suppressed[j] = True
    return kept


def ap_brute(labeled, num_gt: int, interpolation: str = "all_point") -> float:
    """PR curve walked point by point, envelope via explicit suffix maxima."""
    if num_gt == 0 or not labeled:
        return 0.0
    points = []
    tp = 0
    fp = 0
    for _, is_tp in labeled:
        if is_tp:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    envelope = [max(p for _, p in points[i:]) for i in range(len(points))]
    if interpolation == "all_point":
        area = 0.0
        prev = 0.0
        for (recall, _), env in zip(points, envelope):
            area += (recall - prev) * env
            prev = recall
        return area
    total = 0.0
    for k in range(11):
        t = k / 10.0
        best = 0.0
        for (recall, _), env in zip(points, envelope):
            if recall >= t - 1e-12 and env > best:
                best = env
        total += best
    return total / 11.0


# -- parameter inventory -----------------------------------------------------


def _conv_count(cin: int, cout: int, k: int, bias: bool) -> int:
    return cout * cin * k * k + (cout if bias else 0)


def _cbl_count(cin: int, cout: int, k: int) -> int:
    # bias-free conv plus batchnorm gamma/beta
    return _conv_count(cin, cout, k, False) + 2 * cout


def parameter_count_ref(
    stage_widths,
    blocks_per_stage,
    num_classes: int,
    use_residual: bool = False,
    use_channel_attention: bool = False,
    use_domain: bool = False,
    num_domains: int = 2,
    reduction_ratio: int = 16,
) -> int:
    """Predicted trainable-parameter total from the configuration arithmetic."""
    total = 0
    stem = max(1, stage_widths[0] // 2)
    total += _cbl_count(3, stem, 3)
    prev = stem
    for width, count in zip(stage_widths, blocks_per_stage):
        total += _cbl_count(prev, width, 3)
        half = max(1, width // 2)
        total += count * (_cbl_count(width, half, 1) + _cbl_count(half, width, 3))
        prev = width
    c8, c16, c32 = stage_widths[2], stage_widths[3], stage_widths[4]
    out_channels = 3 * (5 + num_classes)

    def head_count(cin: int, feat: int):
        half = max(1, feat // 2)
        subtotal = (
            _cbl_count(cin, half, 1)
            + _cbl_count(half, feat, 3)
            + _conv_count(feat, out_channels, 1, True)
        )
        return subtotal, half
    got, route32 = head_count(c32, c32)
    total += got
    got, route16 = head_count(c16 + route32, c16)
    total += got
    got, _ = head_count(c8 + route16, c8)
    total += got

    for feat in (c32, c16, c8):
        if use_residual:
            mid = max(1, feat // 2)
            total += (
                _conv_count(feat, mid, 1, False)
                + 2 * mid
                + _conv_count(mid, mid, 3, False)
                + 2 * mid
                + _conv_count(mid, feat, 1, False)
            )
        if use_channel_attention:
            hidden = max(1, feat // reduction_ratio)
            total += _conv_count(feat, hidden, 1, False) + _conv_count(hidden, feat, 1, False)
        if use_domain:
            total += 2 * (_conv_count(feat, feat, 7, True) + _conv_count(feat, feat, 5, True))
            total += num_domains * feat + num_domains
    return total


# -- numeric gradient --------------------------------------------------------


def numeric_gradient(fn, array: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Dense central differences of a scalar-valued fn over every element."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        plus = fn()
        flat[i] = orig - epsilon
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * epsilon)
    return grad
