"""Target assignment, composite loss, Adam, and the reproducible epoch loop."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .datasets import DatasetManifest, load_image, parse_label_file, resize_letterbox
from .network import (
    MultiScaleOutput,
    Network,
    NetworkSpec,
    forward_multiscale,
    save_checkpoint,
)
from .tensor import (
    Tensor,
    bce_with_logits,
    narrow,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    tsum,
    zero_grads,
)

METRICS_HEADER = "epoch,coord,obj,noobj,cls,domain,total,seconds"

# floor for w/h-to-anchor ratios before the log encode
_MIN_EXTENT_RATIO = 1e-6
_MIN_CELL_FRACTION = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 300
    input_width: int = 416
    lambda_coord: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    lambda_cls: float = 1.0
    lambda_domain: float = 0.1
    grl_lambda: float = 0.1
    ignore_iou: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        # lr 0 is allowed so the null-update property is expressible
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.input_width < 32 or self.input_width % 32 != 0:
            raise ValueError(
                f"input_width must be a positive multiple of 32, got {self.input_width}"
            )
        for name in ("lambda_coord", "lambda_obj", "lambda_noobj", "lambda_cls", "lambda_domain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.grl_lambda < 0:
            raise ValueError(f"grl_lambda must be >= 0, got {self.grl_lambda}")
        if not 0.0 <= self.ignore_iou <= 1.0:
            raise ValueError(f"ignore_iou must lie in [0, 1], got {self.ignore_iou}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


TRAIN_CONFIG_KEYS = (
    "learning_rate",
    "batch_size",
    "epochs",
    "input_width",
    "lambda_coord",
    "lambda_obj",
    "lambda_noobj",
    "lambda_cls",
    "lambda_domain",
    "grl_lambda",
    "ignore_iou",
    "seed",
    "checkpoint_every",
)


def train_config_from_mapping(mapping: dict) -> TrainConfig:
    kwargs = {}
    for key, value in mapping.items():
        if key not in TRAIN_CONFIG_KEYS:
            continue
        if key in ("batch_size", "epochs", "input_width", "seed", "checkpoint_every"):
            try:
                kwargs[key] = int(value)
            except ValueError:
                raise ValueError(f"{key}: expected an integer, got {value!r}") from None
        else:
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ValueError(f"{key}: expected a number, got {value!r}") from None
    return TrainConfig(**kwargs)


def train_config_to_mapping(cfg: TrainConfig) -> dict:
    out = {}
    for key in TRAIN_CONFIG_KEYS:
        value = getattr(cfg, key)
        out[key] = repr(value) if isinstance(value, float) else str(value)
    return out


@dataclass(frozen=True)
class LossBreakdown:
    coord: float
    obj: float
    noobj: float
    cls: float
    domain: float
    total: float


class NumericAbort(RuntimeError):
    """Training hit a nonfinite loss; carries the offending epoch and batch."""

    def __init__(self, epoch: int, batch_index: int, detail: str = "nonfinite loss"):
        super().__init__(f"epoch {epoch}, batch {batch_index}: {detail}")
        self.epoch = epoch
        self.batch_index = batch_index


# -- target assignment -------------------------------------------------------


@dataclass
class ScaleTargets:
    t_box: np.ndarray       # [N, 3, 4, S, S] logit/log encoded (tx, ty, tw, th)
    obj_mask: np.ndarray    # [N, 3, S, S] 1 at assigned anchors
    ignore_mask: np.ndarray # [N, 3, S, S] 1 at unassigned anchors excused from noobj
    t_cls: np.ndarray       # [N, 3, K, S, S] one-hot at assigned anchors


@dataclass
class Targets:
    scales: tuple           # per head, ordered coarse, mid, fine
    num_assigned: int
    clamp_warnings: int


def shape_iou(wh_a, wh_b) -> float:
    """IoU of two boxes sharing a corner: pure width/height overlap."""
    inter = min(wh_a[0], wh_b[0]) * min(wh_a[1], wh_b[1])
    union = wh_a[0] * wh_a[1] + wh_b[0] * wh_b[1] - inter
    return inter / union if union > 0 else 0.0


def encode_box(gt, anchor, grid: int, input_width: int):
    """Logit/log encode one GT against one anchor on one grid.

    Returns (tx, ty, tw, th, row, col, clamp_count).
    """
    clamps = 0
    gx = gt.cx * grid
    gy = gt.cy * grid
    col = min(grid - 1, int(gx))
    row = min(grid - 1, int(gy))
    fx = min(max(gx - col, _MIN_CELL_FRACTION), 1.0 - _MIN_CELL_FRACTION)
    fy = min(max(gy - row, _MIN_CELL_FRACTION), 1.0 - _MIN_CELL_FRACTION)
    tx = math.log(fx / (1.0 - fx))
    ty = math.log(fy / (1.0 - fy))
    rw = gt.w * input_width / anchor[0]
    rh = gt.h * input_width / anchor[1]
    if rw < _MIN_EXTENT_RATIO:
        rw = _MIN_EXTENT_RATIO
        clamps += 1
    if rh < _MIN_EXTENT_RATIO:
        rh = _MIN_EXTENT_RATIO
        clamps += 1
    return tx, ty, math.log(rw), math.log(rh), row, col, clamps


def build_targets(
    gts_per_image,
    spec: NetworkSpec,
    ignore_iou: float = 0.5,
) -> Targets:
    """Assign each GT to its best shape-IoU anchor across all nine.

    ``gts_per_image`` is a list (length N) of GroundTruthBox lists in
    letterboxed coordinates.  Anchors whose shape-IoU with some GT exceeds
    ``ignore_iou`` without being its assignment are excused from the
    no-object loss at that GT's cell.
    """
    n = len(gts_per_image)
    w = spec.input_width
    grids = (w // 32, w // 16, w // 8)
    k = spec.num_classes
    scales = [
        ScaleTargets(
            t_box=np.zeros((n, 3, 4, s, s)),
            obj_mask=np.zeros((n, 3, s, s)),
            ignore_mask=np.zeros((n, 3, s, s)),
            t_cls=np.zeros((n, 3, k, s, s)),
        )
        for s in grids
    ]
    num_assigned = 0
    clamp_warnings = 0
    for i, gts in enumerate(gts_per_image):
        for gt in gts:
            if gt.class_id >= k:
                raise ValueError(
                    f"image {i}: class {gt.class_id} out of range for {k} classes"
                )
            wh = (gt.w * w, gt.h * w)
            ious = [shape_iou(wh, anchor) for anchor in spec.anchors]
            best = int(np.argmax(ious))
            head_idx = 2 - best // 3
            within = best % 3
            grid = grids[head_idx]
            tx, ty, tw, th, row, col, clamps = encode_box(
                gt, spec.anchors[best], grid, w
            )
            clamp_warnings += clamps
            st = scales[head_idx]
            st.t_box[i, within, :, row, col] = (tx, ty, tw, th)
            st.obj_mask[i, within, row, col] = 1.0
            st.t_cls[i, within, :, row, col] = 0.0
            st.t_cls[i, within, gt.class_id, row, col] = 1.0
            num_assigned += 1
            for j, iou_j in enumerate(ious):
                if j == best or iou_j <= ignore_iou:
                    continue
                head_j = 2 - j // 3
                grid_j = grids[head_j]
                col_j = min(grid_j - 1, int(gt.cx * grid_j))
                row_j = min(grid_j - 1, int(gt.cy * grid_j))
                scales[head_j].ignore_mask[i, j % 3, row_j, col_j] = 1.0
    for st in scales:
        st.ignore_mask *= 1.0 - st.obj_mask
    return Targets(tuple(scales), num_assigned, clamp_warnings)


# -- losses ------------------------------------------------------------------


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def yolo_loss(output: MultiScaleOutput, targets: Targets, cfg: TrainConfig):
    """Detection loss, each component averaged over its own element count.

    Returns (loss_tensor, LossBreakdown); the breakdown's domain slot is 0.
    """
    coord_num = _zero()
    obj_num = _zero()
    noobj_num = _zero()
    cls_num = _zero()
    coord_count = 0.0
    obj_count = 0.0
    noobj_count = 0.0
    cls_count = 0.0
    for head, st in zip(output.heads, targets.scales):
        n, channels, s, _ = head.shape
        k = channels // 3 - 5
        h5 = reshape(head, (n, 3, 5 + k, s, s))
        obj_mask = st.obj_mask[:, :, None]          # [N,3,1,S,S]
        noobj_mask = (1.0 - st.obj_mask) * (1.0 - st.ignore_mask)

        pred_xy = sigmoid(narrow(h5, 2, 0, 2))
        pred_wh = narrow(h5, 2, 2, 2)
        tgt_xy = _sigmoid_np(st.t_box[:, :, 0:2])
        tgt_wh = st.t_box[:, :, 2:4]
        dxy = pred_xy - Tensor(tgt_xy)
        dwh = pred_wh - Tensor(tgt_wh)
        coord_num = coord_num + tsum((dxy * dxy) * Tensor(obj_mask))
        coord_num = coord_num + tsum((dwh * dwh) * Tensor(obj_mask))
        coord_count += 4.0 * st.obj_mask.sum()

        to = reshape(narrow(h5, 2, 4, 1), (n, 3, s, s))
        obj_num = obj_num + tsum(bce_with_logits(to, np.ones_like(st.obj_mask)) * Tensor(st.obj_mask))
        obj_count += st.obj_mask.sum()
        noobj_num = noobj_num + tsum(
            bce_with_logits(to, np.zeros_like(st.obj_mask)) * Tensor(noobj_mask)
        )
        noobj_count += noobj_mask.sum()

        tcls = narrow(h5, 2, 5, k)
        cls_num = cls_num + tsum(bce_with_logits(tcls, st.t_cls) * Tensor(obj_mask))
        cls_count += k * st.obj_mask.sum()

    coord = coord_num * (1.0 / coord_count) if coord_count > 0 else _zero()
    obj = obj_num * (1.0 / obj_count) if obj_count > 0 else _zero()
    noobj = noobj_num * (1.0 / noobj_count) if noobj_count > 0 else _zero()
    cls = cls_num * (1.0 / cls_count) if cls_count > 0 else _zero()
    total = (
        cfg.lambda_coord * coord
        + cfg.lambda_obj * obj
        + cfg.lambda_noobj * noobj
        + cfg.lambda_cls * cls
    )
    breakdown = LossBreakdown(
        coord=float(coord.data),
        obj=float(obj.data),
        noobj=float(noobj.data),
        cls=float(cls.data),
        domain=0.0,
        total=float(total.data),
    )
    return total, breakdown


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def domain_loss(domain_logits, domain_ids, lambda_domain: float):
    """Mean softmax cross-entropy over the three scale heads, lambda-weighted.

    Returns (term_tensor, raw_mean_ce).  A zero lambda contributes a constant
    zero with no gradient path at all.
    """
    ids = np.asarray(domain_ids, dtype=np.int64)
    num_domains = domain_logits[0].shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= num_domains):
        raise ValueError(f"domain id out of range for {num_domains} domains")
    if lambda_domain == 0.0:
        return _zero(), 0.0
    ce = None
    for logits in domain_logits:
        head_ce = softmax_cross_entropy(logits, ids)
        ce = head_ce if ce is None else ce + head_ce
    raw = ce * (1.0 / len(domain_logits))
    return lambda_domain * raw, float(raw.data)


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def init_adam_state(params) -> AdamState:
    arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
    return AdamState(
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        t=0,
    )


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam, updating param arrays in place; t advances once."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    state.t += 1
    t = state.t
    for idx, (p, g) in enumerate(zip(params, grads)):
        arr = p.data if isinstance(p, Tensor) else p
        grad = np.zeros_like(arr) if g is None else np.asarray(g)
        if grad.shape != arr.shape:
            raise ValueError(
                f"adam_step: grad shape {grad.shape} does not match param {arr.shape}"
            )
        m = state.m[idx]
        v = state.v[idx]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = init_adam_state(self.params)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def domain_accuracy(net: Network, manifest: DatasetManifest, input_width: int,
                    batch_size: int = 8) -> float:
    """Fraction of samples whose head-averaged softmax argmax hits the domain id."""
    if not net.spec.use_domain:
        raise ValueError("network has no domain heads")
    entries = _load_training_set(manifest, input_width)
    correct = 0
    for lo in range(0, len(entries), batch_size):
        chunk = entries[lo : lo + batch_size]
        images = np.stack([e[0] for e in chunk])
        ids = np.array([e[2] for e in chunk])
        output = forward_multiscale(net, Tensor(images), "eval")
        probs = sum(_softmax_np(t.data) for t in output.domain_logits) / 3.0
        correct += int((probs.argmax(axis=1) == ids).sum())
    return correct / len(entries)


# -- the epoch loop ----------------------------------------------------------


@dataclass
class TrainResult:
    breakdowns: list            # one LossBreakdown per epoch (batch means)
    seconds: list               # wall time per epoch
    checkpoint_paths: list
    metrics_path: str | None
    clamp_warnings: int


def _load_training_set(manifest: DatasetManifest, input_width: int):
    entries = []
    for sample in manifest.samples:
        image_path, label_path = manifest.resolve(sample)
        image = load_image(image_path)
        boxes = parse_label_file(label_path)
        canvas, transform = resize_letterbox(image, input_width)
        entries.append((canvas, [transform.apply(b) for b in boxes], sample.domain_id))
    return entries


def _format_metric(value: float) -> str:
    return repr(float(value))


def train(
    net: Network,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir=None,
    log=None,
) -> TrainResult:
    """Run the seeded epoch loop; optionally write metrics CSV and checkpoints.

    The metrics file carries one row per epoch
    (``epoch,coord,obj,noobj,cls,domain,total,seconds``); every column except
    ``seconds`` is reproducible bit-for-bit given the same seed and platform.
    """
    spec = net.spec
    if not manifest.samples:
        raise ValueError("manifest has no samples")
    if cfg.input_width != spec.input_width:
        raise ValueError(
            f"config input_width {cfg.input_width} does not match network {spec.input_width}"
        )
    if spec.use_domain:
        bad = [s.domain_id for s in manifest.samples if s.domain_id >= spec.num_domains]
        if bad:
            raise ValueError(
                f"manifest domain ids {sorted(set(bad))} out of range for "
                f"{spec.num_domains} domains"
            )

    entries = _load_training_set(manifest, cfg.input_width)
    params = list(net.parameters())
    optimizer = Adam(params, cfg.learning_rate)

    metrics_path = None
    metrics_fh = None
    checkpoint_paths = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        metrics_fh = open(metrics_path, "w", encoding="utf-8")
        metrics_fh.write(METRICS_HEADER + "\n")

    breakdowns = []
    seconds = []
    clamp_total = 0
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(entries))
            sums = np.zeros(6)
            batches = 0
            for batch_index, lo in enumerate(range(0, len(order), cfg.batch_size)):
                chosen = order[lo : lo + cfg.batch_size]
                images = np.stack([entries[i][0] for i in chosen])
                gts = [entries[i][1] for i in chosen]
                domains = [entries[i][2] for i in chosen]
                targets = build_targets(gts, spec, cfg.ignore_iou)
                clamp_total += targets.clamp_warnings
                try:
                    output = forward_multiscale(net, Tensor(images), "train")
                    det_total, det_bd = yolo_loss(output, targets, cfg)
                    if output.domain_logits is not None:
                        dom_term, dom_raw = domain_loss(
                            output.domain_logits, domains, cfg.lambda_domain
                        )
                        total = det_total + dom_term
                    else:
                        dom_raw = 0.0
                        total = det_total
                except ValueError as err:
                    # exploded weights surface as a nonfinite-input rejection
                    # somewhere inside the forward pass
                    if "nonfinite" in str(err) or "finite" in str(err):
                        raise NumericAbort(epoch, batch_index, str(err)) from err
                    raise
                if not np.isfinite(total.data):
                    raise NumericAbort(epoch, batch_index)
                total.backward()
                optimizer.step()
                optimizer.zero_grad()
                sums += (
                    det_bd.coord,
                    det_bd.obj,
                    det_bd.noobj,
                    det_bd.cls,
                    dom_raw,
                    float(total.data),
                )
                batches += 1
            means = sums / batches
            breakdown = LossBreakdown(*(float(v) for v in means))
            breakdowns.append(breakdown)
            elapsed = time.perf_counter() - start
            seconds.append(elapsed)
            if log is not None:
                log(
                    f"epoch {epoch}: total {breakdown.total:.6f} "
                    f"(coord {breakdown.coord:.6f}, obj {breakdown.obj:.6f}, "
                    f"noobj {breakdown.noobj:.6f}, cls {breakdown.cls:.6f}, "
                    f"domain {breakdown.domain:.6f}) in {elapsed:.2f}s"
                )
            if metrics_fh is not None:
                row = ",".join(
                    [str(epoch)]
                    + [
                        _format_metric(v)
                        for v in (
                            breakdown.coord,
                            breakdown.obj,
                            breakdown.noobj,
                            breakdown.cls,
                            breakdown.domain,
                            breakdown.total,
                        )
                    ]
                    + [f"{elapsed:.6f}"]
                )
                metrics_fh.write(row + "\n")
                metrics_fh.flush()
            if (
                out_dir is not None
                and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0
            ):
                path = os.path.join(out_dir, f"model-epoch{epoch + 1:04d}.ckpt")
                save_checkpoint(net, path)
                checkpoint_paths.append(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        path = os.path.join(out_dir, "model-final.ckpt")
        save_checkpoint(net, path)
        checkpoint_paths.append(path)
    return TrainResult(breakdowns, seconds, checkpoint_paths, metrics_path, clamp_total)
