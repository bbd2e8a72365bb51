"""Detector graph assembly: backbone, three-scale heads, toggles, checkpoints.

The network is a configurable Darknet-flavored trunk (stride-1 stem plus five
stride-2 stages) with detection heads at strides 32, 16 and 8.  The coarse
head reads the deepest stage; each finer head concatenates a 2x nearest
upsample of the previous head's route tensor with the matching backbone tap.
Optional per-scale residual and channel-attention blocks sit immediately
before each detection convolution, and optional domain-classifier heads tap
the same pre-detection features.

Construction draws initial weights from three independent seeded streams
(trunk, extra blocks, domain heads) so that toggling a block on or off never
perturbs the shared trunk's initial values.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .blocks import ChannelAttentionBlock, DomainClassifierHead, ResidualBlock
from .layers import Conv2d, ConvBNLeaky, Module, ModuleList
from .tensor import (
    Tensor,
    concat_channels,
    read_tensor,
    upsample_nearest2x,
    write_tensor,
)

NUM_STAGES = 5
SCALE_NAMES = ("coarse", "mid", "fine")
SCALE_STRIDES = (32, 16, 8)

# Classic 416-pixel anchor priors; scaled linearly for other input widths.
BASE_ANCHORS = (
    (10.0, 13.0),
    (16.0, 30.0),
    (33.0, 23.0),
    (30.0, 61.0),
    (62.0, 45.0),
    (59.0, 119.0),
    (116.0, 90.0),
    (156.0, 198.0),
    (373.0, 326.0),
)

CHECKPOINT_MAGIC = b"ADODCKPT"
CHECKPOINT_FORMAT_VERSION = 1


def default_anchors(input_width: int) -> tuple:
    scale = input_width / 416.0
    return tuple((w * scale, h * scale) for w, h in BASE_ANCHORS)


@dataclass(frozen=True)
class NetworkSpec:
    input_width: int = 416
    stage_widths: tuple = (8, 16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 2, 2, 1)
    num_classes: int = 5
    anchors: tuple = ()
    use_residual: bool = False
    use_channel_attention: bool = False
    use_domain: bool = False
    num_domains: int = 2
    reduction_ratio: int = 16
    grl_lambda: float = 0.1
    domain_reversal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if not self.anchors:
            object.__setattr__(self, "anchors", default_anchors(self.input_width))
        else:
            object.__setattr__(
                self, "anchors", tuple((float(w), float(h)) for w, h in self.anchors)
            )


def validate_network_spec(spec: NetworkSpec) -> None:
    if spec.input_width < 32 or spec.input_width % 32 != 0:
        raise ValueError(f"input_width must be a positive multiple of 32, got {spec.input_width}")
    if len(spec.stage_widths) != NUM_STAGES:
        raise ValueError(
            f"expected {NUM_STAGES} stage widths (strides 2..32), got {len(spec.stage_widths)}"
        )
    if len(spec.blocks_per_stage) != NUM_STAGES:
        raise ValueError(
            f"expected {NUM_STAGES} block counts, got {len(spec.blocks_per_stage)}"
        )
    if any(w < 1 for w in spec.stage_widths):
        raise ValueError(f"stage widths must be >= 1, got {spec.stage_widths}")
    if any(b < 0 for b in spec.blocks_per_stage):
        raise ValueError(f"block counts must be >= 0, got {spec.blocks_per_stage}")
    if spec.num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {spec.num_classes}")
    if len(spec.anchors) != 9:
        raise ValueError(f"expected 9 anchors (3 per scale), got {len(spec.anchors)}")
    for i, (w, h) in enumerate(spec.anchors):
        if not (0 < w <= spec.input_width and 0 < h <= spec.input_width):
            raise ValueError(
                f"anchor {i} = ({w}, {h}) must have positive extents at most input_width"
            )
    if spec.num_domains < 2:
        raise ValueError(f"num_domains must be >= 2, got {spec.num_domains}")
    if spec.reduction_ratio < 1:
        raise ValueError(f"reduction_ratio must be >= 1, got {spec.reduction_ratio}")
    if spec.grl_lambda < 0:
        raise ValueError(f"grl_lambda must be >= 0, got {spec.grl_lambda}")


def anchors_for_scale(spec: NetworkSpec, scale: str) -> tuple:
    """The 3 anchor pairs feeding one head; anchors are listed fine-first."""
    idx = SCALE_NAMES.index(scale)
    lo = (2 - idx) * 3
    return spec.anchors[lo : lo + 3]


@dataclass
class MultiScaleOutput:
    heads: tuple          # (coarse, mid, fine) raw [N, 3*(5+K), S, S] tensors
    feats: tuple          # matching pre-detection feature tensors
    grid_sizes: tuple
    domain_logits: tuple | None = None

    strides = SCALE_STRIDES
    scale_names = SCALE_NAMES


class _DarknetUnit(Module):
    def __init__(self, width: int, rng):
        super().__init__()
        half = max(1, width // 2)
        self.reduce = ConvBNLeaky(width, half, 1, rng)
        self.expand = ConvBNLeaky(half, width, 3, rng, padding=1)

    def forward(self, x):
        return x + self.expand(self.reduce(x))


class _Stage(Module):
    def __init__(self, in_channels: int, width: int, count: int, rng):
        super().__init__()
        self.down = ConvBNLeaky(in_channels, width, 3, rng, stride=2, padding=1)
        self.units = ModuleList(_DarknetUnit(width, rng) for _ in range(count))

    def forward(self, x):
        x = self.down(x)
        for unit in self.units:
            x = unit(x)
        return x


class Backbone(Module):
    def __init__(self, spec: NetworkSpec, rng):
        super().__init__()
        widths = spec.stage_widths
        stem_width = max(1, widths[0] // 2)
        self.stem = ConvBNLeaky(3, stem_width, 3, rng, padding=1)
        stages = []
        prev = stem_width
        for width, count in zip(widths, spec.blocks_per_stage):
            stages.append(_Stage(prev, width, count, rng))
            prev = width
        self.stages = ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        taps = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 2:
                taps.append(x)
        return tuple(taps)  # strides 8, 16, 32


class _ScaleHead(Module):
    """Route 1x1, feature 3x3, optional extras, then the detection 1x1."""

    def __init__(self, in_channels: int, feat_channels: int, out_channels: int, rng):
        super().__init__()
        half = max(1, feat_channels // 2)
        self.route_channels = half
        self.feat_channels = feat_channels
        self.route = ConvBNLeaky(in_channels, half, 1, rng)
        self.feat = ConvBNLeaky(half, feat_channels, 3, rng, padding=1)
        self.detect = Conv2d(feat_channels, out_channels, 1, rng, bias=True)
        self.residual = None
        self.attention = None

    def forward(self, x):
        route = self.route(x)
        feat = self.feat(route)
        if self.residual is not None:
            feat = self.residual(feat)
        if self.attention is not None:
            feat = self.attention(feat)
        return route, feat, self.detect(feat)


class Network(Module):
    def __init__(self, spec: NetworkSpec, seed: int):
        super().__init__()
        validate_network_spec(spec)
        self.spec = spec
        rng_trunk = np.random.default_rng([0, seed])
        rng_extra = np.random.default_rng([1, seed])
        rng_domain = np.random.default_rng([2, seed])

        out_channels = 3 * (5 + spec.num_classes)
        c8, c16, c32 = spec.stage_widths[2], spec.stage_widths[3], spec.stage_widths[4]
        self.backbone = Backbone(spec, rng_trunk)
        self.head_coarse = _ScaleHead(c32, c32, out_channels, rng_trunk)
        self.head_mid = _ScaleHead(
            c16 + self.head_coarse.route_channels, c16, out_channels, rng_trunk
        )
        self.head_fine = _ScaleHead(
            c8 + self.head_mid.route_channels, c8, out_channels, rng_trunk
        )

        heads = (self.head_coarse, self.head_mid, self.head_fine)
        if spec.use_residual:
            for head in heads:
                head.residual = ResidualBlock(head.feat_channels, rng_extra)
        if spec.use_channel_attention:
            for head in heads:
                head.attention = ChannelAttentionBlock(
                    head.feat_channels, rng_extra, ratio=spec.reduction_ratio
                )
        if spec.use_domain:
            self.domain_coarse = DomainClassifierHead(
                c32, spec.num_domains, rng_domain, spec.grl_lambda, spec.domain_reversal
            )
            self.domain_mid = DomainClassifierHead(
                c16, spec.num_domains, rng_domain, spec.grl_lambda, spec.domain_reversal
            )
            self.domain_fine = DomainClassifierHead(
                c8, spec.num_domains, rng_domain, spec.grl_lambda, spec.domain_reversal
            )

        seen = set()
        for name, _ in self.named_parameters():
            if name in seen:
                raise ValueError(f"parameter name collision: {name}")
            seen.add(name)

    def forward(self, images: Tensor) -> MultiScaleOutput:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images [N, 3, W, W], got {x.shape}")
        w = self.spec.input_width
        if x.shape[2] != w or x.shape[3] != w:
            raise ValueError(
                f"input is {x.shape[2]}x{x.shape[3]} but the network expects {w}x{w}"
            )
        if not np.isfinite(x.data).all():
            raise ValueError("input pixels must be finite")
        if x.data.size and (x.data.min() < 0.0 or x.data.max() > 1.0):
            raise ValueError("input pixels must lie in [0, 1]")

        tap8, tap16, tap32 = self.backbone(x)
        route32, feat32, head32 = self.head_coarse(tap32)
        mid_in = concat_channels(upsample_nearest2x(route32), tap16)
        route16, feat16, head16 = self.head_mid(mid_in)
        fine_in = concat_channels(upsample_nearest2x(route16), tap8)
        _, feat8, head8 = self.head_fine(fine_in)

        domain_logits = None
        if self.spec.use_domain:
            domain_logits = (
                self.domain_coarse(feat32),
                self.domain_mid(feat16),
                self.domain_fine(feat8),
            )
        return MultiScaleOutput(
            heads=(head32, head16, head8),
            feats=(feat32, feat16, feat8),
            grid_sizes=(w // 32, w // 16, w // 8),
            domain_logits=domain_logits,
        )


def build_network(spec: NetworkSpec, seed: int) -> Network:
    return Network(spec, seed)


def forward_multiscale(net: Network, images, mode: str = "train") -> MultiScaleOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    net.train(mode == "train")
    return net(images)


def count_parameters(net: Network) -> int:
    return sum(p.data.size for p in net.parameters())


# -- flat key = value config format ------------------------------------------

NETWORK_CONFIG_KEYS = (
    "input_width",
    "stage_widths",
    "blocks_per_stage",
    "num_classes",
    "anchors",
    "use_residual",
    "use_channel_attention",
    "use_domain",
    "num_domains",
    "reduction_ratio",
    "grl_lambda",
    "domain_reversal",
)


def parse_kv_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{key}: expected an integer, got {value!r}") from None


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValueError(f"{key}: expected a number, got {value!r}") from None


def _parse_int_list(key: str, value: str) -> tuple:
    return tuple(_parse_int(key, part.strip()) for part in value.split(",") if part.strip())


def network_spec_from_mapping(mapping: dict) -> NetworkSpec:
    """Build a NetworkSpec from string key-values, applying defaults for absent keys."""
    spec = NetworkSpec()
    kwargs = {}
    for key, value in mapping.items():
        if key not in NETWORK_CONFIG_KEYS:
            continue
        if key in ("use_residual", "use_channel_attention", "use_domain", "domain_reversal"):
            kwargs[key] = _parse_bool(key, value)
        elif key in ("input_width", "num_classes", "num_domains", "reduction_ratio"):
            kwargs[key] = _parse_int(key, value)
        elif key == "grl_lambda":
            kwargs[key] = _parse_float(key, value)
        elif key in ("stage_widths", "blocks_per_stage"):
            kwargs[key] = _parse_int_list(key, value)
        elif key == "anchors":
            flat = [
                _parse_float(key, part.strip()) for part in value.split(",") if part.strip()
            ]
            if len(flat) % 2 != 0:
                raise ValueError(f"anchors: expected an even count of numbers, got {len(flat)}")
            kwargs[key] = tuple(
                (flat[i], flat[i + 1]) for i in range(0, len(flat), 2)
            )
    if "anchors" not in kwargs and "input_width" in kwargs:
        kwargs["anchors"] = default_anchors(kwargs["input_width"])
    spec = replace(spec, **kwargs)
    validate_network_spec(spec)
    return spec


def network_spec_to_mapping(spec: NetworkSpec) -> dict:
    return {
        "input_width": str(spec.input_width),
        "stage_widths": ",".join(str(w) for w in spec.stage_widths),
        "blocks_per_stage": ",".join(str(b) for b in spec.blocks_per_stage),
        "num_classes": str(spec.num_classes),
        "anchors": ",".join(repr(v) for pair in spec.anchors for v in pair),
        "use_residual": "true" if spec.use_residual else "false",
        "use_channel_attention": "true" if spec.use_channel_attention else "false",
        "use_domain": "true" if spec.use_domain else "false",
        "num_domains": str(spec.num_domains),
        "reduction_ratio": str(spec.reduction_ratio),
        "grl_lambda": repr(spec.grl_lambda),
        "domain_reversal": "true" if spec.domain_reversal else "false",
    }


def serialize_network_spec(spec: NetworkSpec) -> str:
    mapping = network_spec_to_mapping(spec)
    return "".join(f"{key} = {mapping[key]}\n" for key in sorted(mapping))


def spec_hash(spec: NetworkSpec) -> bytes:
    return hashlib.sha256(serialize_network_spec(spec).encode("utf-8")).digest()


# -- checkpoints -------------------------------------------------------------


def _named_state(net: Network):
    yield from net.named_parameters()
    yield from net.named_buffers()


def save_checkpoint(net: Network, path) -> None:
    entries = [(name, np.asarray(value.data if isinstance(value, Tensor) else value))
               for name, value in _named_state(net)]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_FORMAT_VERSION))
    buf.write(spec_hash(net.spec))
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        write_tensor(buf, value)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exactly(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated checkpoint: while reading {what}")
    return data


def load_checkpoint(path, spec: NetworkSpec) -> Network:
    with open(path, "rb") as fh:
        magic = _read_exactly(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exactly(fh, 4, "version"))
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        stored_hash = _read_exactly(fh, 32, "spec hash")
        if stored_hash != spec_hash(spec):
            raise ValueError(
                "checkpoint was saved with a different network configuration (spec hash mismatch)"
            )
        (count,) = struct.unpack("<I", _read_exactly(fh, 4, "entry count"))
        loaded = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exactly(fh, 2, "name length"))
            name = _read_exactly(fh, name_len, "name").decode("utf-8")
            loaded[name] = read_tensor(fh)
        trailing = fh.read(1)
        if trailing:
            raise ValueError("checkpoint has trailing bytes after the last entry")

    net = Network(spec, seed=0)
    expected = dict(_named_state(net))
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise ValueError(f"checkpoint entries mismatch: missing {missing}, unexpected {extra}")
    for name, value in expected.items():
        target = value.data if isinstance(value, Tensor) else value
        if loaded[name].shape != target.shape:
            raise ValueError(
                f"checkpoint entry {name} has shape {loaded[name].shape}, expected {target.shape}"
            )
        np.copyto(target, loaded[name])
    return net


# -- anchor clustering -------------------------------------------------------


def _shape_iou_matrix(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(
        wh[:, None, 1], centroids[None, :, 1]
    )
    union = wh[:, 0] * wh[:, 1]
    union = union[:, None] + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return inter / union


def kmeans_anchors(
    wh: np.ndarray, k: int = 9, iterations: int = 100, seed: int = 0
) -> tuple:
    """Cluster box extents (pixels) under 1 - shape-IoU distance; returns k pairs
    sorted by area ascending (fine anchors first)."""
    wh = np.asarray(wh, dtype=np.float64)
    if wh.ndim != 2 or wh.shape[1] != 2:
        raise ValueError(f"expected an [M, 2] array of extents, got {wh.shape}")
    if (wh <= 0).any():
        raise ValueError("box extents must be positive")
    if wh.shape[0] < k:
        raise ValueError(f"need at least {k} boxes to fit {k} anchors, got {wh.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = wh[rng.choice(wh.shape[0], size=k, replace=False)].copy()
    assignment = np.full(wh.shape[0], -1)
    for _ in range(iterations):
        new_assignment = np.argmax(_shape_iou_matrix(wh, centroids), axis=1)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = wh[assignment == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    return tuple((float(w), float(h)) for w, h in centroids[order])
