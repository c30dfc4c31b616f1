"""Sonar-like samples: synthetic generation, disk ingestion and preprocessing.

Boxes are pixel-edge coordinates ``(x_min, y_min, x_max, y_max)`` with
``x_max = last column + 1``, so a box is always non-degenerate and scales
proportionally under resizing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, IngestionError, ParseError, UsageError, ValidationError
from .kvtext import parse_assignments
from .metrics import CLASS_NAMES
from .tensor import bilinear_matrix

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
MIN_COMPONENT_PIXELS = 4

Box = tuple[int, int, int, int]


@dataclass(frozen=True, eq=False)
class SampleObject:
    class_id: int
    box: Box
    mask: np.ndarray  # bool (H, W)


@dataclass(frozen=True, eq=False)
class Sample:
    """Grayscale image in [0, 1] (H, W) or replicated (3, H, W), label map and objects."""

    sample_id: str
    image: np.ndarray
    label_map: np.ndarray
    objects: tuple[SampleObject, ...]

    @property
    def size(self) -> tuple[int, int]:
        return self.label_map.shape


def tight_box(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValidationError("empty mask has no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _first_pixel(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def _canonical(objects) -> tuple[SampleObject, ...]:
    """Order objects by their first pixel in raster order."""
    return tuple(sorted(objects, key=lambda o: (_first_pixel(o.mask), o.class_id)))


def components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components of a binary mask in raster order of first pixel."""
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    return [labels == i for i in range(1, n + 1)]


def boxes_from_mask(mask: np.ndarray, min_pixels: int = MIN_COMPONENT_PIXELS) -> list[Box]:
    """One tight box per 8-connected component; components under ``min_pixels`` dropped."""
    return [tight_box(c) for c in components(np.asarray(mask, bool)) if c.sum() >= min_pixels]


def objects_from_label_map(label_map: np.ndarray) -> tuple[SampleObject, ...]:
    objs = []
    for c in np.unique(label_map):
        if c == 0:
            continue
        for comp in components(label_map == c):
            objs.append(SampleObject(int(c), tight_box(comp), comp))
    return _canonical(objs)


# ---------------------------------------------------------------------------
# synthetic generation

FAMILIES = (
    "capsule",  # bottle
    "rectangle",  # can
    "chain",
    "square",  # drink carton
    "hook",
    "propeller",
    "ellipse",  # shampoo bottle
    "upright",  # standing bottle
    "ring",  # tire
    "cross",  # valve
    "wall",
)


@dataclass(frozen=True)
class SynthSpec:
    """Catalogue and nuisance parameters of the synthetic generator.

    Class ``k`` (1-based) uses ``FAMILIES[k - 1]`` and a reflectivity that
    rises linearly with ``k`` across ``object_intensity``.
    """

    num_classes: int = 11
    image_size: int = 128
    instances: tuple[int, int] = (1, 3)
    object_size: tuple[float, float] = (26.0, 44.0)
    object_intensity: tuple[float, float] = (0.45, 0.95)
    background_intensity: tuple[float, float] = (0.04, 0.14)
    speckle: float = 0.25  # std of the unit-mean multiplicative noise
    shadow_prob: float = 0.5
    shadow_length: tuple[int, int] = (6, 16)
    min_object_pixels: int = 60

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(FAMILIES):
            raise ConfigurationError(f"num_classes must be in [1, {len(FAMILIES)}]")
        if not 0.0 <= self.shadow_prob <= 1.0:
            raise ConfigurationError("shadow_prob must lie in [0, 1]")
        if self.speckle < 0:
            raise ConfigurationError("speckle must be >= 0")
        lo, hi = self.instances
        if not 1 <= lo <= hi:
            raise ConfigurationError("instances must be a range with 1 <= min <= max")
        if not self.background_intensity[1] < self.object_intensity[0]:
            raise ConfigurationError("objects must be brighter than the background")
        if self.image_size < 32:
            raise ConfigurationError("image_size must be >= 32")

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[: self.num_classes]

    def reflectivity(self, class_id: int) -> float:
        lo, hi = self.object_intensity
        if self.num_classes == 1:
            return hi
        return lo + (hi - lo) * (class_id - 1) / (self.num_classes - 1)


def _rotate(xx, yy, angle):
    c, s = np.cos(angle), np.sin(angle)
    return c * xx + s * yy, -s * xx + c * yy


def _shape_mask(family: str, xx, yy, r: float, rng) -> np.ndarray:
    """Binary shape of nominal radius ``r`` centred at the origin of (xx, yy)."""
    u, v = _rotate(xx, yy, rng.uniform(0, np.pi))
    if family == "ellipse":
        return (u / r) ** 2 + (v / (0.6 * r)) ** 2 <= 1
    if family == "capsule":
        body = (u / r) ** 2 + (v / (0.42 * r)) ** 2 <= 1
        neck = (u >= 0.6 * r) & (u <= 1.35 * r) & (np.abs(v) <= 0.16 * r)
        return body | neck
    if family == "upright":
        u, v = _rotate(xx, yy, rng.uniform(-0.2, 0.2))
        return (np.abs(u) <= 0.38 * r) & (np.abs(v) <= r)
    if family == "rectangle":
        return (np.abs(u) <= 0.75 * r) & (np.abs(v) <= 0.45 * r)
    if family == "square":
        return (np.abs(u) <= 0.62 * r) & (np.abs(v) <= 0.62 * r)
    if family == "ring":
        d = np.hypot(xx, yy)
        return (d <= r * 0.9) & (d >= r * 0.5)
    if family == "cross":
        arm = 0.24 * r
        bar = ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
        return bar | (np.hypot(u, v) <= 0.42 * r)
    if family == "propeller":
        theta = np.arctan2(v, u)
        d = np.hypot(u, v)
        blade = d <= r * (0.35 + 0.65 * np.abs(np.cos(1.5 * theta)) ** 3)
        return blade | (d <= 0.3 * r)
    if family == "hook":
        d = np.hypot(u, v + 0.35 * r)
        arc = (d <= 0.7 * r) & (d >= 0.3 * r) & (v + 0.35 * r >= -0.05 * r)
        stem = (np.abs(u - 0.5 * r) <= 0.2 * r) & (v <= -0.3 * r) & (v >= -1.1 * r)
        return arc | stem
    if family == "chain":
        out = np.zeros(xx.shape, bool)
        for t in np.linspace(-r, r, 4):
            link = ((u - t) / (0.42 * r)) ** 2 + (v / (0.26 * r)) ** 2
            out |= (link <= 1) & (link >= 0.2)
        return out
    if family == "wall":
        return (np.abs(u) <= 2.2 * r) & (np.abs(v) <= 0.2 * r)
    raise ConfigurationError(f"unknown shape family {family!r}")


def _place(spec: SynthSpec, class_id: int, occupied: np.ndarray, rng) -> np.ndarray | None:
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    halo = ndimage.binary_dilation(occupied, EIGHT_CONNECTED)
    family = FAMILIES[class_id - 1]
    for _ in range(40):
        r = rng.uniform(*spec.object_size) / 2 * (S / 128)
        cx, cy = rng.uniform(0.15 * S, 0.85 * S, size=2)
        mask = _shape_mask(family, xx - cx, yy - cy, r, rng)
        if mask.sum() < spec.min_object_pixels or (mask & halo).any():
            continue
        if len(components(mask)) != 1:
            continue
        return mask
    return None


def _render(spec: SynthSpec, objects, rng) -> np.ndarray:
    S = spec.image_size
    yy = np.arange(S, dtype=np.float64)[:, None] / S
    lo, hi = spec.background_intensity
    # darker with range (down the image), plus a random tilt
    bg = lo + (hi - lo) * (1.0 - yy) * rng.uniform(0.6, 1.0) + np.zeros((1, S))
    img = bg.copy()
    occupied = np.zeros((S, S), bool)
    for obj in objects:
        img[obj.mask] = spec.reflectivity(obj.class_id) * rng.uniform(0.93, 1.07)
        occupied |= obj.mask
    for obj in objects:
        if rng.random() < spec.shadow_prob:
            length = int(rng.integers(spec.shadow_length[0], spec.shadow_length[1] + 1))
            shadow = np.zeros_like(obj.mask)
            for k in range(1, length + 1):
                shadow[k:] |= obj.mask[:-k]
            img[shadow & ~occupied] *= 0.25
    if spec.speckle > 0:
        shape = 1.0 / spec.speckle**2
        img = img * rng.gamma(shape, 1.0 / shape, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize so the in-memory image equals its 8-bit on-disk form
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def synth_sample(spec: SynthSpec, seed: int, index: int) -> Sample:
    """The ``index``-th sample of stream ``seed``; independent of other indices."""
    rng = np.random.default_rng([seed, index])
    S = spec.image_size
    while True:
        n = int(rng.integers(spec.instances[0], spec.instances[1] + 1))
        occupied = np.zeros((S, S), bool)
        objs = []
        for _ in range(n):
            c = int(rng.integers(1, spec.num_classes + 1))
            mask = _place(spec, c, occupied, rng)
            if mask is None:
                continue
            occupied |= mask
            objs.append(SampleObject(c, tight_box(mask), mask))
        if objs:
            break
    label_map = np.zeros((S, S), np.uint8)
    for o in objs:
        label_map[o.mask] = o.class_id
    image = _render(spec, objs, rng)
    return Sample(f"synth_{seed}_{index:05d}", image, label_map, _canonical(objs))


def synth_generate(spec: SynthSpec, seed: int, n: int, start: int = 0) -> list[Sample]:
    if n < 1:
        raise UsageError("n must be >= 1")
    return [synth_sample(spec, seed, i) for i in range(start, start + n)]


def parse_synth_spec(text: str) -> SynthSpec:
    """``key = value`` lines; tuple fields are written ``lo, hi``."""
    kwargs = {}
    fields_ = {f.name: f for f in dataclasses.fields(SynthSpec)}
    defaults = SynthSpec()
    for lineno, key, value in parse_assignments(text):
        if key not in fields_:
            raise ParseError(f"unknown key {key!r}; valid keys: {sorted(fields_)}", lineno)
        current = getattr(defaults, key)
        try:
            if isinstance(current, tuple):
                kind = type(current[0])
                kwargs[key] = tuple(kind(p) for p in value.split(","))
            else:
                kwargs[key] = type(current)(value)
        except (ValueError, TypeError):
            raise ParseError(f"malformed value {value!r} for {key}", lineno) from None
    try:
        return SynthSpec(**kwargs)
    except ConfigurationError as exc:
        raise ParseError(str(exc)) from None


# ---------------------------------------------------------------------------
# disk layout


def write_dataset(samples, root, class_names: tuple[str, ...] = CLASS_NAMES) -> Path:
    """Write ``root/images``, ``root/masks`` (8-bit PNG) and ``root/classes.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in class_names), encoding="utf-8")
    for s in samples:
        if s.image.ndim != 2:
            raise UsageError("write_dataset expects grayscale (H, W) samples")
        u8 = np.round(np.clip(s.image, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(u8, mode="L").save(root / "images" / f"{s.sample_id}.png")
        Image.fromarray(s.label_map.astype(np.uint8), mode="L").save(root / "masks" / f"{s.sample_id}.png")
    return root


def read_class_names(root) -> tuple[str, ...]:
    path = Path(root) / "classes.txt"
    if not path.exists():
        raise IngestionError(f"{path} not found")
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    return tuple(n for n in names if n)


def load_dataset(root) -> list[Sample]:
    """Read the disk layout; instances are 8-connected components per class."""
    root = Path(root)
    names = read_class_names(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise IngestionError(f"{image_dir} not found")
    samples = []
    for img_path in sorted(image_dir.glob("*.png")):
        mask_path = root / "masks" / img_path.name
        if not mask_path.exists():
            raise IngestionError(f"missing mask for image {img_path.name}: expected {mask_path}")
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        with Image.open(mask_path) as im:
            label_map = np.asarray(im, dtype=np.uint8)
        if label_map.ndim != 2 or label_map.shape != image.shape:
            raise ValidationError(f"{mask_path.name}: mask shape {label_map.shape} vs image {image.shape}")
        if label_map.max(initial=0) > len(names):
            raise ValidationError(
                f"{mask_path.name}: class index {int(label_map.max())} exceeds the {len(names)} classes in classes.txt"
            )
        samples.append(Sample(img_path.stem, image, label_map.copy(), objects_from_label_map(label_map)))
    return samples


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple
    seed: int
    ratios: tuple[int, int, int] = field(default=(6, 2, 2))


def largest_remainder(n: int, ratios=(6, 2, 2)) -> list[int]:
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(ids, seed: int) -> DatasetSplit:
    ids = list(ids)
    if len(ids) < 5:
        raise UsageError("need at least 5 ids to split 6:2:2")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b, _ = largest_remainder(len(ids))
    return DatasetSplit(tuple(shuffled[:a]), tuple(shuffled[a : a + b]), tuple(shuffled[a + b :]), seed)


# ---------------------------------------------------------------------------
# preprocessing and augmentation


def _resize_nearest(a: np.ndarray, size: int) -> np.ndarray:
    H, W = a.shape
    ys = np.minimum(((np.arange(size) + 0.5) * H / size).astype(int), H - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * W / size).astype(int), W - 1)
    return a[np.ix_(ys, xs)]


def preprocess(sample: Sample, target_size: int) -> Sample:
    """Replicate to 3 channels and resize to ``target_size`` square.

    Images are resized bilinearly, label maps and instance masks by nearest
    neighbour, and boxes scaled by the resize factors.
    """
    gray = sample.image if sample.image.ndim == 2 else sample.image[0]
    H, W = gray.shape
    if (H, W) != (target_size, target_size):
        ry, rx = bilinear_matrix(H, target_size), bilinear_matrix(W, target_size)
        gray = ry @ gray.astype(np.float64) @ rx.T
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
    image = np.repeat(gray[None], 3, axis=0)
    sy, sx = target_size / H, target_size / W
    objects = tuple(
        SampleObject(
            o.class_id,
            (o.box[0] * sx, o.box[1] * sy, o.box[2] * sx, o.box[3] * sy),
            o.mask if (H, W) == (target_size, target_size) else _resize_nearest(o.mask, target_size),
        )
        for o in sample.objects
    )
    label_map = sample.label_map if (H, W) == (target_size,) * 2 else _resize_nearest(sample.label_map, target_size)
    return Sample(sample.sample_id, image, label_map, objects)


def flip_sample(sample: Sample) -> Sample:
    """Mirror left-right; boxes are mirrored in pixel-edge coordinates, object order kept."""
    W = sample.label_map.shape[1]
    objects = tuple(
        SampleObject(o.class_id, (W - o.box[2], o.box[1], W - o.box[0], o.box[3]), o.mask[:, ::-1].copy())
        for o in sample.objects
    )
    return Sample(
        sample.sample_id,
        sample.image[..., ::-1].copy(),
        sample.label_map[:, ::-1].copy(),
        objects,
    )


def jitter(image: np.ndarray, contrast: float, brightness: float) -> np.ndarray:
    """``clip(u * image + b, 0, 1)``; ``u = 1, b = 0`` returns the input unchanged."""
    if contrast == 1.0 and brightness == 0.0:
        return image
    return np.clip(image * np.float32(contrast) + np.float32(brightness), 0.0, 1.0).astype(np.float32)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Horizontal flip with probability 0.5, then brightness/contrast jitter."""
    if rng.random() < 0.5:
        sample = flip_sample(sample)
    u = rng.uniform(0.8, 1.2)
    b = rng.uniform(-0.1, 0.1)
    return dataclasses.replace(sample, image=jitter(sample.image, u, b))
