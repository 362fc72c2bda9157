"""Dataset poisoning: backdoor triggers and label-swap attacks.

Three trigger families (checkerboard patch, bit-depth squeeze with error
diffusion, smooth warp fields) plus single- and multi-target caption swaps.
All trigger transforms are pure functions over float images in [0, 1];
sample selection is driven by a single RNG stream seeded from the attack
spec, so a poisoned dataset is reproducible byte for byte.
"""

import dataclasses
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import data

BACKDOOR_KINDS = ("patch", "bpp", "wanet")
LABEL_KINDS = ("single_target", "multi_target")
ATTACK_KINDS = BACKDOOR_KINDS + LABEL_KINDS

# Poisoning beyond this fraction leaves the low-rate regime the defense
# is meant for; refuse rather than silently run a different experiment.
MAX_POISON_RATE = 0.05

DEFAULT_PATCH_SIZE = 8
DEFAULT_BPP_BITS = 3
DEFAULT_WARP_GRID = 4
DEFAULT_WARP_STRENGTH = 0.5


@dataclass(frozen=True)
class AttackSpec:
    """What to poison, how much, and with which trigger."""

    kind: str
    poison_rate: float
    target_class: int | None = None
    source_class: int | None = None
    pairs: tuple = ()
    trigger_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.poison_rate <= MAX_POISON_RATE:
            raise ValueError(
                f"poison_rate must be in [0, {MAX_POISON_RATE}], got {self.poison_rate}"
            )
        if self.kind in BACKDOOR_KINDS or self.kind == "single_target":
            if self.target_class is None:
                raise ValueError(f"{self.kind} attack needs a target_class")
        if self.kind == "single_target":
            if self.source_class is None:
                raise ValueError("single_target attack needs a source_class")
            if self.source_class == self.target_class:
                raise ValueError("source_class and target_class must differ")
        if self.kind == "multi_target":
            if len(self.pairs) < 2:
                raise ValueError("multi_target needs at least 2 (source, target) pairs")
            flat = [c for pair in self.pairs for c in pair]
            if len(set(flat)) != len(flat):
                raise ValueError("multi_target pairs must use pairwise-distinct classes")

    def tag(self):
        """Short label stored on poisoned samples, e.g. 'patch@8' or 'single:3→9'."""
        p = self.trigger_params
        if self.kind == "patch":
            return f"patch@{p.get('size', DEFAULT_PATCH_SIZE)}"
        if self.kind == "bpp":
            return f"bpp@{p.get('bits', DEFAULT_BPP_BITS)}"
        if self.kind == "wanet":
            k = p.get("grid_size", DEFAULT_WARP_GRID)
            s = p.get("strength", DEFAULT_WARP_STRENGTH)
            return f"wanet@k{k}s{s:g}"
        if self.kind == "single_target":
            return f"single:{self.source_class}→{self.target_class}"
        return "multi:" + ",".join(f"{s}→{t}" for s, t in self.pairs)


@dataclass(frozen=True)
class WarpField:
    """Dense per-pixel (dx, dy) offsets, smooth by construction."""

    grid_size: int
    strength: float
    flow: np.ndarray  # H×W×2, pixels

    def __post_init__(self):
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ValueError(f"flow must be H×W×2, got shape {self.flow.shape}")


def make_warp_field(image_size, grid_size=DEFAULT_WARP_GRID,
                    strength=DEFAULT_WARP_STRENGTH, seed=0):
    """Cubic-upsampled k×k control grid; offsets bounded by strength·size/k."""
    rng = np.random.default_rng(seed)
    control = rng.uniform(-1.0, 1.0, size=(grid_size, grid_size, 2))
    zoom = image_size / grid_size
    up = np.stack(
        [ndimage.zoom(control[:, :, c], zoom, order=3, mode="nearest", grid_mode=True)
         for c in range(2)],
        axis=-1,
    )
    bound = strength * image_size / grid_size
    flow = np.clip(strength * up, -bound, bound)
    return WarpField(grid_size=grid_size, strength=strength, flow=flow)


def apply_patch_trigger(image, size_px=DEFAULT_PATCH_SIZE, position=None):
    """Overwrite a square region with a fixed black/white checkerboard.

    position is the (row, col) of the patch's top-left corner; default is
    the bottom-right corner of the image.
    """
    h, w = image.shape[:2]
    if size_px < 0 or size_px > min(h, w):
        raise ValueError(f"patch size {size_px} does not fit a {h}×{w} image")
    out = image.copy()
    if size_px == 0:
        return out
    if position is None:
        position = (h - size_px, w - size_px)
    r0, c0 = position
    if r0 < 0 or c0 < 0 or r0 + size_px > h or c0 + size_px > w:
        raise ValueError(f"patch at {position} exceeds a {h}×{w} image")
    yy, xx = np.mgrid[0:size_px, 0:size_px]
    cells = ((yy // 2 + xx // 2) % 2).astype(image.dtype)  # 2-px checker cells
    out[r0:r0 + size_px, c0:c0 + size_px] = cells[:, :, None]
    return out


def apply_bpp(image, bits=DEFAULT_BPP_BITS, dither=True):
    """Squeeze each channel onto a 2^bits-level lattice, optionally dithered.

    Dithering diffuses the quantization residual to unvisited neighbors in
    raster order (7/16 right, 3/16 down-left, 5/16 down, 1/16 down-right),
    which keeps every output value within one lattice step of the input.
    """
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    levels = (1 << bits) - 1
    if not dither:
        squeezed = np.round(image.astype(np.float64) * levels) / levels
        return squeezed.astype(image.dtype)
    work = image.astype(np.float64).copy()
    out = np.empty_like(work)
    h, w = work.shape[:2]
    for y in range(h):
        for x in range(w):
            old = np.clip(work[y, x], 0.0, 1.0)
            new = np.round(old * levels) / levels
            out[y, x] = new
            err = old - new
            if x + 1 < w:
                work[y, x + 1] += err * (7 / 16)
            if y + 1 < h:
                if x > 0:
                    work[y + 1, x - 1] += err * (3 / 16)
                work[y + 1, x] += err * (5 / 16)
                if x + 1 < w:
                    work[y + 1, x + 1] += err * (1 / 16)
    return out.astype(image.dtype)


def apply_wanet(image, warp):
    """Bilinear resample through the warp's flow; border samples clamp."""
    h, w = image.shape[:2]
    if warp.flow.shape[:2] != (h, w):
        raise ValueError(
            f"warp field {warp.flow.shape[:2]} does not match image {(h, w)}"
        )
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [ys + warp.flow[:, :, 1], xs + warp.flow[:, :, 0]]
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(
            image[:, :, c].astype(np.float64), coords, order=1, mode="nearest"
        )
    return out


def psnr(original, attacked):
    """Peak signal-to-noise ratio in dB for float images in [0, 1]."""
    mse = float(np.mean((original.astype(np.float64) - attacked.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def build_trigger(spec, image_size):
    """Bind a trigger transform (image, rng) -> image for one backdoor spec.

    The warp field is built once from spec.seed, so poisoning and later
    eval-time triggering apply the identical deformation.
    """
    p = spec.trigger_params
    if spec.kind == "patch":
        size = p.get("size", DEFAULT_PATCH_SIZE)
        placement = p.get("position", "bottom-right")

        def trigger(image, rng):
            if placement == "random":
                h, w = image.shape[:2]
                pos = (int(rng.integers(0, h - size + 1)),
                       int(rng.integers(0, w - size + 1)))
            else:
                pos = None
            return apply_patch_trigger(image, size, pos)

        return trigger
    if spec.kind == "bpp":
        bits = p.get("bits", DEFAULT_BPP_BITS)
        dither = p.get("dither", True)
        return lambda image, rng: apply_bpp(image, bits, dither)
    warp = make_warp_field(
        image_size,
        p.get("grid_size", DEFAULT_WARP_GRID),
        p.get("strength", DEFAULT_WARP_STRENGTH),
        seed=spec.seed,
    )
    return lambda image, rng: apply_wanet(image, warp)


def _poison_plan(samples, spec, rng):
    """Map poisoned sample index -> donor sample index (caption source)."""
    n = len(samples)
    m = int(round(spec.poison_rate * n))
    if m == 0:
        raise ValueError(
            f"poison_rate {spec.poison_rate} of {n} samples rounds to zero"
        )
    by_cat = {}
    for i, s in enumerate(samples):
        by_cat.setdefault(s.category_id, []).append(i)

    def donors(target, count):
        pool = by_cat.get(target, [])
        if not pool:
            raise ValueError(f"no samples of target class {target}")
        return rng.choice(pool, size=count, replace=True).tolist()

    plan = {}
    if spec.kind in BACKDOOR_KINDS:
        chosen = sorted(rng.choice(n, size=m, replace=False).tolist())
        for i, d in zip(chosen, donors(spec.target_class, m)):
            plan[i] = d
        return plan

    def take_from_source(source, target, count):
        pool = by_cat.get(source, [])
        if len(pool) < count:
            raise ValueError(
                f"source class {source} has {len(pool)} samples, need {count}"
            )
        chosen = sorted(rng.choice(pool, size=count, replace=False).tolist())
        for i, d in zip(chosen, donors(target, count)):
            plan[i] = d

    if spec.kind == "single_target":
        take_from_source(spec.source_class, spec.target_class, m)
    else:
        base, extra = divmod(m, len(spec.pairs))
        for j, (source, target) in enumerate(spec.pairs):
            take_from_source(source, target, base + (1 if j < extra else 0))
    return plan


def poison_dataset(samples, spec, root, out_dir):
    """Write a poisoned copy of a dataset; untouched samples stay byte-identical.

    Exactly round(poison_rate · N) samples are rewritten: backdoor kinds get
    a triggered image plus a caption (and its KEs and category) drawn from a
    target-class sample; label kinds keep their image and swap only the
    caption side. Order and ids are preserved.
    """
    root, out_dir = Path(root), Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    plan = _poison_plan(samples, spec, rng)

    image_size = None
    if spec.kind in BACKDOOR_KINDS and plan:
        first = data.load_image(root / samples[next(iter(plan))].image_path)
        image_size = first.shape[0]
    trigger = build_trigger(spec, image_size) if spec.kind in BACKDOOR_KINDS else None

    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    tag = spec.tag()
    poisoned = []
    for i, sample in enumerate(samples):
        src = root / sample.image_path
        dst = out_dir / sample.image_path
        if i not in plan:
            shutil.copyfile(src, dst)
            poisoned.append(sample)
            continue
        donor = samples[plan[i]]
        if spec.kind in BACKDOOR_KINDS:
            data.save_image(trigger(data.load_image(src), rng), dst)
        else:
            shutil.copyfile(src, dst)
        poisoned.append(dataclasses.replace(
            sample,
            caption=donor.caption,
            kes=list(donor.kes),
            category_id=donor.category_id,
            poisoned=True,
            attack_tag=tag,
        ))
    data.save_manifest(poisoned, out_dir / "manifest.jsonl")
    return poisoned
