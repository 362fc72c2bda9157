"""Attack-success and utility metrics, attention diagnostics, and sweeps.

Attack success is measured as Hit@k: the share of attacked query images
whose top-k retrieved captions belong to the attacker's target category.
Utility is standard Recall@k on clean pairs in either retrieval direction.
Both are deterministic given a checkpoint and an eval set: embeddings are
computed in fixed-size shards and ties always break toward the lower index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps

from . import data, objectives
from .training import _pad_bank

DEFAULT_KS = (1, 5, 10)
DIRECTIONS = ("TR", "IR")
SWEEP_AXES = ("poison_rate", "epoch", "ke_count")
SWEEP_COLUMNS = ("axis", "value", "hit_at_1", "hit_at_5", "hit_at_10",
                 "recall_at_10")

_EVAL_BATCH = 256  # fixed shard size so reductions see identical batching


# ---------------------------------------------------------------------------
# embedding helpers


def encode_images(model, images, batch_size=_EVAL_BATCH):
    """(patch_emb, image_emb, attention) over all images, fixed shard order."""
    patches, embs, attns = [], [], []
    with torch.no_grad():
        for lo in range(0, len(images), batch_size):
            p, e, a = model.encode_image(images[lo: lo + batch_size])
            patches.append(p)
            embs.append(e)
            attns.append(a)
    return torch.cat(patches), torch.cat(embs), torch.cat(attns)


def encode_texts(model, texts, batch_size=_EVAL_BATCH):
    outs = []
    with torch.no_grad():
        for lo in range(0, len(texts), batch_size):
            outs.append(model.encode_text(texts[lo: lo + batch_size]))
    return torch.cat(outs)


def _ranked(scores):
    """Descending argsort per row; equal scores keep the lower index first."""
    return np.argsort(-scores, axis=1, kind="stable")


# ---------------------------------------------------------------------------
# metrics


def hit_at_k(model, attacked_images, caption_pool, target_category,
             ks=DEFAULT_KS, batch_size=_EVAL_BATCH):
    """Percent of attacked images retrieving a target-category caption.

    caption_pool is a sequence of (caption, category_id) pairs; an image
    scores a hit at k when any of its top-k pool captions has
    category_id == target_category.
    """
    pool = list(caption_pool)
    if len(attacked_images) == 0:
        raise ValueError("no attacked images to evaluate")
    if not pool:
        raise ValueError("empty caption pool")
    if max(ks) > len(pool):
        raise ValueError(f"k={max(ks)} exceeds pool size {len(pool)}")
    is_target = np.array([cat == target_category for _, cat in pool])
    if not is_target.any():
        raise ValueError("caption pool contains no target-category caption")

    _, img_emb, _ = encode_images(model, attacked_images, batch_size)
    txt_emb = encode_texts(model, [c for c, _ in pool], batch_size)
    order = _ranked((img_emb @ txt_emb.T).numpy())
    hit_rank = np.where(is_target[order], np.arange(len(pool)), len(pool))
    first_hit = hit_rank.min(axis=1)
    n = len(first_hit)
    return {k: 100.0 * int((first_hit < k).sum()) / n for k in ks}


def recall_at_k(model, images, captions, direction="TR", ks=DEFAULT_KS,
                batch_size=_EVAL_BATCH):
    """Percent of queries whose own pair is in the top-k, over clean pairs.

    TR retrieves captions for image queries; IR retrieves images for
    caption queries. Pair i is the only relevant item for query i.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    n = len(images)
    if n == 0 or n != len(captions):
        raise ValueError("need equally many images and captions, at least one")
    if max(ks) > n:
        raise ValueError(f"k={max(ks)} exceeds pool size {n}")

    _, img_emb, _ = encode_images(model, images, batch_size)
    txt_emb = encode_texts(model, captions, batch_size)
    if direction == "TR":
        scores = (img_emb @ txt_emb.T).numpy()
    else:
        scores = (txt_emb @ img_emb.T).numpy()
    order = _ranked(scores)
    rank = np.argmax(order == np.arange(n)[:, None], axis=1)
    return {k: 100.0 * int((rank < k).sum()) / n for k in ks}


def trigger_region_mask(image_size, patch_size, trigger_size, position=None):
    """Boolean mask (raster patch order) of patches overlapping the trigger.

    position is the trigger's top-left pixel; default is the bottom-right
    corner placement used by the patch attack.
    """
    if position is None:
        position = (image_size - trigger_size, image_size - trigger_size)
    y0, x0 = position
    grid = image_size // patch_size
    mask = np.zeros(grid * grid, dtype=bool)
    for r in range(grid):
        for c in range(grid):
            py, px = r * patch_size, c * patch_size
            overlaps = (py < y0 + trigger_size and py + patch_size > y0
                        and px < x0 + trigger_size and px + patch_size > x0)
            mask[r * grid + c] = overlaps
    return mask


def attention_trigger_mass(model, attacked_images, trigger_mask,
                           batch_size=_EVAL_BATCH):
    """Mean attention fraction falling on trigger-overlapping patches."""
    trigger_mask = np.asarray(trigger_mask, dtype=bool)
    if not trigger_mask.any():
        raise ValueError("trigger mask selects no patches")
    if len(attacked_images) == 0:
        raise ValueError("no attacked images to evaluate")
    _, _, attention = encode_images(model, attacked_images, batch_size)
    if trigger_mask.shape != (attention.shape[1],):
        raise ValueError("mask length must equal the patch count")
    mass = attention[:, torch.as_tensor(trigger_mask)].sum(dim=1)
    return float(mass.mean())


def lambda_statistics(model, samples, images, ke_table, regime="category",
                      batch_size=_EVAL_BATCH):
    """Mean/std of the per-sample weight λ, split by the poisoned flag.

    Uses the static KE table (category regime scores every sample against
    all category KE sets; per_pair scores each shard against its own sets).
    """
    patch_emb, _, _ = encode_images(model, images, batch_size)
    dtype = patch_emb.dtype
    lams = []
    if regime == "category":
        keys = sorted(ke_table.kes)
        bank, mask = _pad_bank([ke_table.embeddings[k] for k in keys], dtype)
        row_of = {key: i for i, key in enumerate(keys)}
        own = torch.tensor([row_of[s.category_id] for s in samples])
        scores = objectives.omega_scores(patch_emb, bank, mask, own)
        labels = torch.zeros(len(samples), len(keys), dtype=dtype)
        labels[torch.arange(len(samples)), own] = 1.0
        lams = objectives.sample_weights(scores.omega, labels)
    elif regime == "per_pair":
        for lo in range(0, len(samples), batch_size):
            shard = samples[lo: lo + batch_size]
            bank, mask = _pad_bank(
                [ke_table.embeddings[s.id] for s in shard], dtype)
            own = torch.arange(len(shard))
            scores = objectives.omega_scores(
                patch_emb[lo: lo + batch_size], bank, mask, own)
            lams.append(objectives.sample_weights(
                scores.omega, torch.eye(len(shard), dtype=dtype)))
        lams = torch.cat(lams)
    else:
        raise ValueError(f"unknown regime {regime!r}")

    flags = np.array([bool(s.poisoned) for s in samples])
    values = lams.numpy()
    stats = {}
    for name, member in (("clean", ~flags), ("poisoned", flags)):
        if member.any():
            stats[name] = {
                "mean": float(values[member].mean()),
                "std": float(values[member].std()),
                "count": int(member.sum()),
            }
    return stats


def export_attention_map(model, image, out_path):
    """Write an attention overlay PNG plus the raw α vector.

    The α vector goes to <out>.alpha.bin (float32) with a JSON sidecar
    <out>.alpha.json recording shape, dtype and patch grid. Returns the
    three paths.
    """
    out_path = Path(out_path)
    image = np.asarray(image, dtype=np.float32)
    _, _, attention = encode_images(model, image[None])
    alpha = attention[0].numpy().astype(np.float32)

    grid = int(round(len(alpha) ** 0.5))
    scale = image.shape[0] // grid
    heat = np.kron(alpha.reshape(grid, grid), np.ones((scale, scale)))
    heat = heat / heat.max()
    overlay = 0.45 * image + 0.55 * colormaps["magma"](heat)[..., :3]

    raw_path = out_path.with_suffix(".alpha.bin")
    meta_path = out_path.with_suffix(".alpha.json")
    data.save_image(overlay, out_path)
    raw_path.write_bytes(alpha.tobytes())
    meta_path.write_text(json.dumps(
        {"shape": list(alpha.shape), "dtype": "float32",
         "grid": [grid, grid]}, sort_keys=True) + "\n")
    return {"heatmap": out_path, "raw": raw_path, "meta": meta_path}


def load_attention_map(raw_path):
    """Read back an exported α vector (exact float32 round trip)."""
    raw_path = Path(raw_path)
    meta = json.loads(raw_path.with_suffix(".json").read_text())
    arr = np.frombuffer(raw_path.read_bytes(), dtype=meta["dtype"])
    return arr.reshape(meta["shape"])


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    """One evaluation's numbers plus enough metadata to reproduce them."""

    hit_at_k: dict = field(default_factory=dict)
    recall_at_k: dict = field(default_factory=dict)  # direction -> {k: pct}
    trigger_attention_mass: float | None = None
    lambda_stats: dict | None = None
    metadata: dict = field(default_factory=dict)

    def check(self):
        for table in [self.hit_at_k, *self.recall_at_k.values()]:
            last = 0.0
            for k in sorted(table):
                pct = table[k]
                if not 0.0 <= pct <= 100.0:
                    raise ValueError(f"percentage {pct} outside [0, 100]")
                if pct < last:
                    raise ValueError("metric must be nondecreasing in k")
                last = pct
        return self

    def to_dict(self):
        return {
            "hit_at_k": {str(k): v for k, v in self.hit_at_k.items()},
            "recall_at_k": {d: {str(k): v for k, v in t.items()}
                            for d, t in self.recall_at_k.items()},
            "trigger_attention_mass": self.trigger_attention_mass,
            "lambda_stats": self.lambda_stats,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            hit_at_k={int(k): v for k, v in payload["hit_at_k"].items()},
            recall_at_k={d: {int(k): v for k, v in t.items()}
                         for d, t in payload["recall_at_k"].items()},
            trigger_attention_mass=payload.get("trigger_attention_mass"),
            lambda_stats=payload.get("lambda_stats"),
            metadata=payload.get("metadata", {}),
        )

    def save(self, path):
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# sweeps


def sweep(axis, values, base_config, out_csv=None, runner=None):
    """Evaluate a config along one axis; returns (and optionally writes) rows.

    Each row pairs an axis value with Hit@1/5/10 and clean Recall@10 (TR).
    The default runner retrains per value, except along the epoch axis
    where one training run is probed at every requested epoch.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if runner is None:
        from . import pipeline
        runner = pipeline.sweep_runner
    rows = []
    for value, report in runner(axis, values, base_config):
        rows.append({
            "axis": axis,
            "value": value,
            "hit_at_1": report.hit_at_k.get(1),
            "hit_at_5": report.hit_at_k.get(5),
            "hit_at_10": report.hit_at_k.get(10),
            "recall_at_10": report.recall_at_k.get("TR", {}).get(10),
        })
    if out_csv is not None:
        write_sweep_csv(rows, out_csv)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
