"""Image and label ingestion plus the deterministic synthetic dataset generator.

Images are binary netpbm only (P6 color, P5 gray), labels are YOLO-style
normalized center-format text, and manifests are tab-separated
``image<TAB>label<TAB>domain`` lines with paths kept relative to the manifest
file so a generated tree is relocatable and byte-stable.

The generator renders one colored shape silhouette per object (shape and hue
keyed to the class index) over a noisy seabed-toned background, then pushes
each image through a per-domain water cast: a channel gain/offset, a vertical
attenuation that darkens lower rows, a contrast pull toward mid-gray, and a
box blur.  Domain 0 is the uncast original; domain d >= 1 uses preset
``type{d}``.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

from .evaluation import DEFAULT_CLASS_NAMES
from .postprocess import BBox
from .tensor import Tensor

PRESET_IDS = (
    "identity",
    "type1",
    "type2",
    "type3",
    "type4",
    "type5",
    "type6",
    "type7",
    "type8",
)


# -- ground truth ------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    def to_corner(self) -> BBox:
        return BBox(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ).clamped()


def parse_label_file(path) -> list:
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(
                    f"{path}: line {lineno}: expected 'class cx cy w h', got {len(parts)} fields"
                )
            try:
                class_id = int(parts[0])
                values = [float(v) for v in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric token") from None
            if class_id < 0:
                raise ValueError(f"{path}: line {lineno}: class out of range: {class_id}")
            for name, v in zip(("cx", "cy", "w", "h"), values):
                ok = 0.0 <= v <= 1.0 if name in ("cx", "cy") else 0.0 < v <= 1.0
                if not ok:
                    raise ValueError(
                        f"{path}: line {lineno}: {name} out of range: {v}"
                    )
            boxes.append(GroundTruthBox(class_id, *values))
    return boxes


def write_label_file(path, boxes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for box in boxes:
            fh.write(
                f"{box.class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}\n"
            )


# -- netpbm ------------------------------------------------------------------


def _read_token(fh, path) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError(f"{path}: truncated netpbm header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_netpbm(path):
    """Binary P6/P5 reader: returns (channels-last uint8 array [H, W, C], maxval)."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P6", b"P5"):
            raise ValueError(f"{path}: not a binary PPM/PGM file (magic {magic!r})")
        try:
            width = int(_read_token(fh, path))
            height = int(_read_token(fh, path))
            maxval = int(_read_token(fh, path))
        except ValueError as err:
            raise ValueError(f"{path}: malformed netpbm header ({err})") from None
        if width < 1 or height < 1:
            raise ValueError(f"{path}: bad image size {width}x{height}")
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval} (only 255)")
        channels = 3 if magic == b"P6" else 1
        expected = width * height * channels
        raster = fh.read(expected)
        if len(raster) != expected:
            raise ValueError(
                f"{path}: truncated pixel data ({len(raster)} of {expected} bytes)"
            )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return pixels, maxval


def read_netpbm_size(path):
    """Header-only peek: (width, height)."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P6", b"P5"):
            raise ValueError(f"{path}: not a binary PPM/PGM file (magic {magic!r})")
        width = int(_read_token(fh, path))
        height = int(_read_token(fh, path))
    return width, height


def load_image(path) -> Tensor:
    """Channel-major float64 tensor in [0, 1]; grayscale replicates to 3 channels."""
    pixels, _ = read_netpbm(path)
    data = pixels.astype(np.float64) / 255.0
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return Tensor(np.ascontiguousarray(data.transpose(2, 0, 1)))


def write_ppm(path, image) -> None:
    """Write a [3, H, W] float array in [0, 1] as binary P6."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {data.shape}")
    quantized = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def write_pgm(path, image) -> None:
    """Write a [H, W] float array in [0, 1] as binary P5."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 2:
        raise ValueError(f"expected a [H, W] image, got {data.shape}")
    quantized = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


# -- letterbox ---------------------------------------------------------------


@dataclass(frozen=True)
class BoxTransform:
    """Affine map from source normalized coords to letterboxed normalized coords."""

    sx: float
    sy: float
    ox: float
    oy: float

    def apply(self, box: GroundTruthBox) -> GroundTruthBox:
        return GroundTruthBox(
            box.class_id,
            box.cx * self.sx + self.ox,
            box.cy * self.sy + self.oy,
            box.w * self.sx,
            box.h * self.sy,
        )

    def invert(self, box: GroundTruthBox) -> GroundTruthBox:
        return GroundTruthBox(
            box.class_id,
            (box.cx - self.ox) / self.sx,
            (box.cy - self.oy) / self.sy,
            box.w / self.sx,
            box.h / self.sy,
        )

    def invert_corner(self, box: BBox) -> BBox:
        return BBox(
            (box.x_min - self.ox) / self.sx,
            (box.y_min - self.oy) / self.sy,
            (box.x_max - self.ox) / self.sx,
            (box.y_max - self.oy) / self.sy,
        )


def resize_letterbox(img, target: int):
    """Aspect-preserving nearest resize onto a target x target gray canvas.

    Returns (letterboxed [3, target, target] array, BoxTransform).
    """
    if target < 32 or target % 32 != 0:
        raise ValueError(f"target width must be a positive multiple of 32, got {target}")
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {data.shape}")
    _, height, width = data.shape
    scale = target / max(height, width)
    new_h = max(1, round(height * scale))
    new_w = max(1, round(width * scale))
    rows = np.minimum((np.arange(new_h) * height) // new_h, height - 1)
    cols = np.minimum((np.arange(new_w) * width) // new_w, width - 1)
    resized = data[:, rows[:, None], cols[None, :]]
    top = (target - new_h) // 2
    left = (target - new_w) // 2
    canvas = np.full((3, target, target), 0.5)
    canvas[:, top : top + new_h, left : left + new_w] = resized
    transform = BoxTransform(
        sx=new_w / target,
        sy=new_h / target,
        ox=left / target,
        oy=top / target,
    )
    return canvas, transform


# -- water casts -------------------------------------------------------------


@dataclass(frozen=True)
class WaterCastParams:
    gains: tuple
    offsets: tuple
    attenuation: float
    blur_radius: int
    contrast: float
    preset_id: str = "custom"

    def __post_init__(self):
        if len(self.gains) != 3 or any(g <= 0 for g in self.gains):
            raise ValueError(f"gains must be 3 positive floats, got {self.gains}")
        if len(self.offsets) != 3:
            raise ValueError(f"offsets must be 3 floats, got {self.offsets}")
        if self.attenuation < 0:
            raise ValueError(f"attenuation must be >= 0, got {self.attenuation}")
        if self.blur_radius < 0:
            raise ValueError(f"blur_radius must be >= 0, got {self.blur_radius}")
        if self.contrast <= 0:
            raise ValueError(f"contrast must be > 0, got {self.contrast}")


_PRESETS = {
    "identity": WaterCastParams((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.0, 0, 1.0, "identity"),
    "type1": WaterCastParams((0.95, 1.0, 1.02), (0.0, 0.0, 0.01), 0.05, 0, 0.98, "type1"),
    "type2": WaterCastParams((0.88, 0.98, 1.05), (0.0, 0.005, 0.02), 0.1, 0, 0.95, "type2"),
    "type3": WaterCastParams((0.8, 0.96, 1.08), (0.0, 0.01, 0.03), 0.18, 1, 0.92, "type3"),
    "type4": WaterCastParams((0.7, 0.95, 1.1), (0.0, 0.015, 0.04), 0.25, 1, 0.88, "type4"),
    "type5": WaterCastParams((0.6, 0.92, 1.12), (0.005, 0.02, 0.05), 0.35, 1, 0.84, "type5"),
    "type6": WaterCastParams((0.5, 0.9, 1.15), (0.005, 0.03, 0.06), 0.45, 2, 0.8, "type6"),
    "type7": WaterCastParams((0.42, 0.88, 1.15), (0.01, 0.035, 0.07), 0.6, 2, 0.75, "type7"),
    "type8": WaterCastParams((0.35, 0.85, 1.18), (0.01, 0.04, 0.08), 0.75, 3, 0.7, "type8"),
}


def water_cast_preset(preset_id: str) -> WaterCastParams:
    try:
        return _PRESETS[preset_id]
    except KeyError:
        raise ValueError(
            f"unknown water cast preset {preset_id!r}; known: {', '.join(PRESET_IDS)}"
        ) from None


def _box_blur(data: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return data
    k = 2 * radius + 1
    padded = np.pad(data, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    _, height, width = data.shape
    acc = np.zeros_like(data)
    for dy in range(k):
        for dx in range(k):
            acc += padded[:, dy : dy + height, dx : dx + width]
    return acc / (k * k)


def apply_water_cast(img, params: WaterCastParams):
    """Channel gain/offset, vertical attenuation, contrast pull, then box blur."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {data.shape}")
    _, height, _ = data.shape
    att = np.exp(-params.attenuation * np.arange(height) / height)[None, :, None]
    gains = np.asarray(params.gains)[:, None, None]
    offsets = np.asarray(params.offsets)[:, None, None]
    cast = params.contrast * (gains * data * att + offsets) + (1.0 - params.contrast) * 0.5
    cast = np.clip(cast, 0.0, 1.0)
    out = _box_blur(cast, params.blur_radius)
    return Tensor(out) if isinstance(img, Tensor) else out


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    image_path: str   # as written in the manifest (typically relative)
    label_path: str
    domain_id: int
    width: int = 0
    height: int = 0


@dataclass(frozen=True)
class DatasetManifest:
    path: str
    root: str
    samples: tuple

    def resolve(self, sample: Sample):
        image = os.path.join(self.root, sample.image_path)
        label = os.path.join(self.root, sample.label_path)
        return image, label


def load_manifest(path) -> DatasetManifest:
    root = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(
                    f"{path}: line {lineno}: expected image<TAB>label<TAB>domain, "
                    f"got {len(parts)} fields"
                )
            image_rel, label_rel, domain_text = parts
            try:
                domain_id = int(domain_text)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad domain id {domain_text!r}") from None
            if domain_id < 0:
                raise ValueError(f"{path}: line {lineno}: domain id must be >= 0")
            image_abs = os.path.join(root, image_rel)
            label_abs = os.path.join(root, label_rel)
            if not os.path.isfile(image_abs):
                raise ValueError(f"{path}: line {lineno}: missing image file {image_rel}")
            if not os.path.isfile(label_abs):
                raise ValueError(f"{path}: line {lineno}: missing label file {label_rel}")
            width, height = read_netpbm_size(image_abs)
            samples.append(Sample(image_rel, label_rel, domain_id, width, height))
    return DatasetManifest(os.path.abspath(path), root, tuple(samples))


def save_manifest(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(f"{sample.image_path}\t{sample.label_path}\t{sample.domain_id}\n")


def read_class_names(path) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        names = [line.strip() for line in fh]
    while names and not names[-1]:
        names.pop()
    if not names:
        raise ValueError(f"{path}: empty class-name file")
    return tuple(names)


def write_class_names(path, names) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in names:
            fh.write(name + "\n")


def class_names_for(num_classes: int) -> tuple:
    names = list(DEFAULT_CLASS_NAMES[:num_classes])
    while len(names) < num_classes:
        names.append(f"class{len(names)}")
    return tuple(names)


# -- synthetic generator -----------------------------------------------------


def _class_color(class_id: int, num_classes: int) -> np.ndarray:
    hue = (class_id / num_classes) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))


def _shape_mask(kind: int, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    if kind == 0:  # disc
        return dx * dx + dy * dy <= radius * radius
    if kind == 1:  # square
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius
    if kind == 2:  # upward triangle
        return (np.abs(dy) <= radius) & (np.abs(dx) <= (dy + radius) / 2.0)
    if kind == 3:  # ring
        rsq = dx * dx + dy * dy
        return (rsq <= radius * radius) & (rsq >= (radius / 2.0) ** 2)
    # cross
    arm = radius / 3.0
    inside = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    return inside & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))


def _render_image(
    rng: np.random.Generator,
    size: int,
    num_classes: int,
    objects_low: int,
    objects_high: int,
    radius_range,
    noise: float,
):
    base = np.array([0.16, 0.32, 0.42]) + rng.uniform(-0.06, 0.06, size=3)
    image = np.clip(
        base[:, None, None] + rng.normal(0.0, noise, size=(3, size, size)), 0.0, 1.0
    )
    boxes = []
    count = int(rng.integers(objects_low, objects_high + 1))
    for _ in range(count):
        class_id = int(rng.integers(0, num_classes))
        radius = float(rng.uniform(*radius_range)) * size
        margin = radius + 2.0
        cx = float(rng.uniform(margin, size - margin))
        cy = float(rng.uniform(margin, size - margin))
        mask = _shape_mask(class_id % 5, size, cx, cy, radius)
        if not mask.any():
            continue
        color = _class_color(class_id, num_classes)
        image[:, mask] = color[:, None]
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        boxes.append(
            GroundTruthBox(
                class_id,
                (cols[0] + cols[-1] + 1) / 2.0 / size,
                (rows[0] + rows[-1] + 1) / 2.0 / size,
                (cols[-1] - cols[0] + 1) / size,
                (rows[-1] - rows[0] + 1) / size,
            )
        )
    return image, boxes


def generate_synthetic_dataset(
    seed: int,
    n_images: int,
    num_classes: int,
    num_domains: int,
    out_dir,
    image_size: int = 96,
    objects_per_image=(1, 2),
    radius_range=(0.12, 0.26),
    noise: float = 0.05,
    domain_presets=None,
) -> DatasetManifest:
    """Render a reproducible shape-detection dataset with per-domain water casts.

    Domain d = image_index mod num_domains; domain 0 keeps the clean render,
    domain d >= 1 applies preset ``type{d}``.  ``domain_presets`` overrides
    that mapping with one preset id per domain.  Everything (pixels, labels,
    manifest, class names) is a pure function of the arguments.
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if not 1 <= num_domains <= len(PRESET_IDS):
        raise ValueError(
            f"num_domains must lie in 1..{len(PRESET_IDS)}, got {num_domains}"
        )
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    low, high = objects_per_image
    if not 1 <= low <= high:
        raise ValueError(f"objects_per_image must be 1 <= low <= high, got {objects_per_image}")
    if domain_presets is not None:
        if len(domain_presets) != num_domains:
            raise ValueError(
                f"domain_presets must name {num_domains} presets, got {len(domain_presets)}"
            )
        presets = [water_cast_preset(p) for p in domain_presets]
    else:
        presets = [
            water_cast_preset("identity" if d == 0 else f"type{d}")
            for d in range(num_domains)
        ]

    out_dir = os.path.abspath(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)

    samples = []
    for index in range(n_images):
        rng = np.random.default_rng([seed, index])
        image, boxes = _render_image(
            rng, image_size, num_classes, low, high, radius_range, noise
        )
        domain_id = index % num_domains
        preset = presets[domain_id]
        if preset.preset_id != "identity":
            image = apply_water_cast(image, preset)
        image_rel = f"images/img_{index:05d}.ppm"
        label_rel = f"labels/img_{index:05d}.txt"
        write_ppm(os.path.join(out_dir, image_rel), image)
        write_label_file(os.path.join(out_dir, label_rel), boxes)
        samples.append(Sample(image_rel, label_rel, domain_id, image_size, image_size))

    manifest_path = os.path.join(out_dir, "manifest.tsv")
    save_manifest(manifest_path, samples)
    write_class_names(os.path.join(out_dir, "classes.txt"), class_names_for(num_classes))
    return DatasetManifest(manifest_path, out_dir, tuple(samples))
