"""Synthetic image-caption-KE corpus: procedural shapes on textured backgrounds.

Stands in for a web-scraped captioning corpus at desk scale. Every byte on
disk is a pure function of (DatasetSpec, seed): per-sample RNG streams are
derived from (seed, sample_index) so generation order does not matter.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1

DEFAULT_SHAPES = ["circle", "square", "triangle", "ellipse"]
DEFAULT_COLORS = ["red", "green", "blue", "yellow"]
DEFAULT_BACKGROUNDS = ["plain", "striped", "dotted", "checker"]

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.05),
}


class ManifestError(ValueError):
    """Raised when a manifest file violates the JSON Lines schema."""


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate a corpus byte-for-byte."""

    num_samples: int
    image_size: int = 64
    num_categories: int = 16
    shapes: tuple = tuple(DEFAULT_SHAPES)
    colors: tuple = tuple(DEFAULT_COLORS)
    backgrounds: tuple = tuple(DEFAULT_BACKGROUNDS)
    seed: int = 0
    labeled: bool = True  # category regime when True, per-pair regime when False

    def __post_init__(self):
        if self.num_samples < 0:
            raise ValueError(f"num_samples must be >= 0, got {self.num_samples}")
        if not self.shapes or not self.colors or not self.backgrounds:
            raise ValueError("shapes, colors and backgrounds must be non-empty")
        if self.num_categories < 1 or self.num_categories > len(self.shapes) * len(self.colors):
            raise ValueError(
                f"num_categories must be in [1, {len(self.shapes) * len(self.colors)}], "
                f"got {self.num_categories}"
            )
        for color in self.colors:
            if color not in COLOR_RGB:
                raise ValueError(f"unknown color {color!r}")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")

    def category_attrs(self, category_id):
        """(shape, color) pair defining a category; categories enumerate the cross product."""
        shape = self.shapes[category_id % len(self.shapes)]
        color = self.colors[category_id // len(self.shapes)]
        return shape, color


@dataclass
class Sample:
    """One image-caption pair with optional category label and KE list."""

    id: str
    image_path: str
    caption: str
    category_id: int | None = None
    kes: list = field(default_factory=list)
    poisoned: bool = False
    attack_tag: str | None = None

    def to_json(self):
        rec = dataclasses.asdict(self)
        rec["schema_version"] = SCHEMA_VERSION
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_dict(cls, rec):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in rec.items() if k in known})


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape, size, cx, cy, extent, rng):
    """Boolean mask of one shape; hard edges, no antialiasing."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= extent**2
    if shape == "square":
        return (np.abs(xx - cx) <= extent) & (np.abs(yy - cy) <= extent)
    if shape == "ellipse":
        b = max(3.0, extent * 0.55)
        return ((xx - cx) / extent) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if shape == "triangle":
        # upright isoceles triangle, apex at (cx, cy - extent)
        top, bottom = cy - extent, cy + extent
        frac = np.clip((yy - top) / (bottom - top), 0.0, 1.0)
        inside_y = (yy >= top) & (yy <= bottom)
        return inside_y & (np.abs(xx - cx) <= frac * extent)
    raise ValueError(f"unknown shape {shape!r}")


def _background(kind, size, rng):
    """Muted grayscale texture in [0,1]; low contrast so shapes dominate."""
    # Background grays sit on the 8-level luminance lattice (k/7), so
    # low-bit-depth re-quantization of large flat regions is near-lossless,
    # as it is for natively quantized web imagery at full scale.
    base = (2 + int(rng.integers(0, 3))) / 7
    img = np.full((size, size, 3), base, dtype=np.float64)
    delta = 1 / 7
    yy, xx = np.mgrid[0:size, 0:size]
    phase = int(rng.integers(0, 8))
    if kind == "plain":
        pass
    elif kind == "striped":
        img += delta * (((yy + phase) // 8) % 2)[..., None]
    elif kind == "dotted":
        dots = (((yy + phase) % 12 < 3) & ((xx + phase) % 12 < 3))
        img += delta * dots[..., None]
    elif kind == "checker":
        img += delta * ((((yy + phase) // 16) + ((xx + phase) // 16)) % 2)[..., None]
    else:
        raise ValueError(f"unknown background {kind!r}")
    return np.clip(img, 0.0, 1.0)


def _place(rng, size, extent):
    lo, hi = extent + 2, size - extent - 3
    if hi <= lo:
        lo, hi = size // 2, size // 2 + 1
    cx = float(rng.integers(lo, hi))
    cy = float(rng.integers(lo, hi))
    return cx, cy


def _position_phrase(cx, cy, size):
    third = size / 3.0
    row = "top" if cy < third else ("bottom" if cy >= 2 * third else "")
    col = "left" if cx < third else ("right" if cx >= 2 * third else "")
    if not row and not col:
        return "near the center"
    return "near the " + " ".join(p for p in (row, col) if p)


def render_sample(spec, index):
    """Render one sample; returns (image float64 HxWx3 in [0,1], caption, category_id, kes).

    Deterministic: the RNG stream is seeded by (spec.seed, index) only.
    """
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    category_id = index % spec.num_categories
    shape, color = spec.category_attrs(category_id)
    background = spec.backgrounds[int(rng.integers(0, len(spec.backgrounds)))]

    img = _background(background, size, rng)

    # distractor shapes first so the primary shape stays on top
    num_distractors = int(rng.integers(0, 3))
    distractors = []
    for _ in range(num_distractors):
        d_cat = int(rng.integers(0, spec.num_categories))
        d_shape, d_color = spec.category_attrs(d_cat)
        if (d_shape, d_color) == (shape, color):
            continue
        d_extent = float(rng.integers(size // 12, size // 8))
        d_cx, d_cy = _place(rng, size, d_extent)
        mask = _shape_mask(d_shape, size, d_cx, d_cy, d_extent, rng)
        img[mask] = COLOR_RGB[d_color]
        distractors.append((d_shape, d_color))

    extent = float(rng.integers(size // 6, size // 4))
    cx, cy = _place(rng, size, extent)
    mask = _shape_mask(shape, size, cx, cy, extent, rng)
    img[mask] = COLOR_RGB[color]

    caption = f"a {color} {shape} on a {background} background {_position_phrase(cx, cy, size)}"
    if distractors:
        d_shape, d_color = distractors[0]
        caption += f" with a small {d_color} {d_shape} nearby"

    # KEs are a pure function of the caption: only attributes the caption
    # states are described, so regenerating KEs from text alone agrees.
    kes = list(category_kes(shape, color))
    kes.append(f"{background} background texture")
    if distractors:
        kes.append(f"small {distractors[0][1]} accent shape")

    return img, caption, category_id, kes


def category_kes(shape, color):
    """Canonical KE strings for a (shape, color) category.

    The vocabulary is deliberately shared across categories: edge/outline KEs
    are shared between shapes, fill KEs between colors, and the last KE by all.
    """
    edge = "curved edges" if shape in ("circle", "ellipse") else "straight edges"
    outline = {
        "circle": "round outline",
        "ellipse": "elongated oval outline",
        "square": "four equal corners",
        "triangle": "three pointed corners",
    }[shape]
    return (
        f"{color} fill",
        edge,
        outline,
        f"solid {color} region",
        "single dominant shape",
    )


# ---------------------------------------------------------------------------
# corpus i/o


def save_image(img, path):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path):
    """Image file -> float32 HxWx3 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_manifest(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(sample.to_json() + "\n")


def generate_dataset(spec, out_dir):
    """Write one image per sample plus manifest.jsonl under out_dir.

    Returns the generated samples. Existing files are overwritten.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    for index in range(spec.num_samples):
        img, caption, category_id, kes = render_sample(spec, index)
        sample_id = f"s{index:05d}"
        image_path = f"images/{sample_id}.png"
        save_image(img, out_dir / image_path)
        samples.append(
            Sample(
                id=sample_id,
                image_path=image_path,
                caption=caption,
                category_id=category_id if spec.labeled else None,
                kes=kes,
            )
        )
    save_manifest(samples, out_dir / "manifest.jsonl")
    return samples


def load_manifest(path):
    """Parse a JSON Lines manifest into Sample records, in file order.

    Unknown fields are ignored. Raises ManifestError naming the 1-based line
    number for malformed lines; missing image files surface later, at access.
    """
    required = ("id", "image_path", "caption", "kes", "poisoned")
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise ManifestError(
                    f"{path}: line {lineno}: unsupported schema_version "
                    f"{rec.get('schema_version')!r}"
                )
            missing = [k for k in required if k not in rec]
            if missing:
                raise ManifestError(f"{path}: line {lineno}: missing fields {missing}")
            samples.append(Sample.from_dict(rec))
    return samples


def _largest_remainder(total, fractions):
    """Integer part sizes summing to total, proportional to fractions."""
    quotas = [total * f for f in fractions]
    sizes = [int(np.floor(q)) for q in quotas]
    leftover = total - sum(sizes)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split(samples, fractions, seed):
    """Deterministic (train, val, test) split, stratified by category when labeled.

    Fractions must sum to 1 within 1e-9. Splits are disjoint, exhaustive, and
    each preserves the original manifest order. Stratification deals samples
    round-robin across categories so every split of at least num_categories
    samples covers all categories.
    """
    if len(fractions) != 3:
        raise ValueError("fractions must be a (train, val, test) triple")
    if any(f < 0 or f > 1 for f in fractions):
        raise ValueError(f"fractions out of range: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    labeled = bool(samples) and all(s.category_id is not None for s in samples)
    if labeled:
        groups = {}
        for pos, sample in enumerate(samples):
            groups.setdefault(sample.category_id, []).append(pos)
        group_list = [groups[c] for c in sorted(groups)]
    else:
        group_list = [list(range(len(samples)))]

    rng = np.random.default_rng([seed, 2**32])
    shuffled = [[positions[i] for i in rng.permutation(len(positions))] for positions in group_list]

    # interleave categories so contiguous cuts stay stratified
    stream = []
    depth = 0
    while any(depth < len(g) for g in shuffled):
        for g in shuffled:
            if depth < len(g):
                stream.append(g[depth])
        depth += 1

    n_train, n_val, _ = _largest_remainder(len(stream), fractions)
    members = (stream[:n_train], stream[n_train : n_train + n_val], stream[n_train + n_val :])
    return tuple([samples[i] for i in sorted(part)] for part in members)
