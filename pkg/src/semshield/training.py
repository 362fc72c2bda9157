"""Two-phase training: clean contrastive pretrain, then defended training.

Determinism contract: everything a run does is a function of (config, data,
seed). Weight init and batch shuffling draw from two separately named RNG
streams derived from the seed, so either can be held fixed in experiments.
Checkpoints are written as deterministic zip containers (fixed timestamps,
stored entries) so identical runs produce byte-identical files.
"""

import copy
import dataclasses
import json
import math
import sys
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data, encoders, knowledge, objectives

CHECKPOINT_VERSION = 1

# named sub-streams of the run seed
_STREAMS = {"init": 0, "shuffle": 1}


def stream_seed(seed, name):
    """A child seed for one of the run's named RNG streams."""
    return int(np.random.SeedSequence([int(seed), _STREAMS[name]]).generate_state(1)[0])


def shuffle_rng(seed):
    return np.random.default_rng([int(seed), _STREAMS["shuffle"]])


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and objective selection for one run."""

    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 1e-4
    weight_decay: float = 0.2
    loss: objectives.LossConfig = field(default_factory=objectives.LossConfig)
    seed: int = 0
    pretrain_epochs: int = 10
    pretrain_mode: str = "cl_ke"  # warmup objective; KEs embed via the live text tower
    ke_encoder: str = "frozen_snapshot"  # or "live"
    force_unit_weights: bool = False  # diagnostic: bypass λ, keep the weighted path

    def __post_init__(self):
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.pretrain_mode not in objectives.MODES:
            raise ValueError(f"unknown pretrain_mode {self.pretrain_mode!r}")
        if self.ke_encoder not in ("live", "frozen_snapshot"):
            raise ValueError(f"unknown ke_encoder {self.ke_encoder!r}")


@dataclass
class TrainingHistory:
    """Per-step loss records plus optional per-epoch evaluation snapshots."""

    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def append_step(self, record):
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValueError("step index must increase")
        self.steps.append(record)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.steps:
                fh.write(json.dumps({"kind": "step", **record}, sort_keys=True) + "\n")
            for record in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **record}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        history = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                record = json.loads(line)
                kind = record.pop("kind")
                (history.steps if kind == "step" else history.epochs).append(record)
        return history


def cosine_lr(step, total_steps, base_lr):
    """base_lr at step 0, decaying to 0 at total_steps along a half cosine."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, extra=None):
    """Deterministic single-file container: meta.json plus row-major float32."""
    entries = []
    payload = bytearray()
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        entries.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes(order="C")
    cfg = dataclasses.asdict(model.config)
    cfg["vocab"] = list(cfg["vocab"])
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "encoder": cfg,
        "params": entries,
        "extra": extra if extra is not None else {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for arcname, blob in (
            ("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode()),
            ("params.bin", bytes(payload)),
        ):
            info = zipfile.ZipInfo(arcname, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, blob)
    return path


def load_checkpoint(path):
    """Rebuild the model a checkpoint describes. Returns (model, meta)."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        raw = zf.read("params.bin")
    if meta["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
    cfg = dict(meta["encoder"])
    cfg["vocab"] = tuple(cfg["vocab"])
    model = encoders.DualEncoder(encoders.EncoderConfig(**cfg))
    state = {}
    offset = 0
    for entry in meta["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype=np.float32, count=count, offset=offset)
        state[entry["name"]] = torch.as_tensor(arr.copy()).reshape(entry["shape"])
        offset += count * 4
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------------------
# batch assembly


def load_images(samples, root):
    """Stack every sample's pixels into one N×H×W×3 float32 array."""
    root = Path(root)
    return np.stack([data.load_image(root / s.image_path) for s in samples])


def _pad_bank(row_groups, dtype):
    """Stack variable-length (m_i × d) groups into a padded bank plus mask."""
    m = max(len(rows) for rows in row_groups)
    d = row_groups[0].shape[1]
    emb = torch.zeros(len(row_groups), m, d, dtype=dtype)
    mask = torch.zeros(len(row_groups), m, dtype=torch.bool)
    for i, rows in enumerate(row_groups):
        emb[i, : len(rows)] = torch.as_tensor(rows, dtype=dtype)
        mask[i, : len(rows)] = True
    return emb, mask


class _KEBank:
    """Per-step KE embedding source: static table rows or the live text tower."""

    def __init__(self, ke_table, config, model):
        self.table = ke_table
        self.live = config.ke_encoder == "live"
        self.regime = config.loss.regime
        self.model = model
        if self.regime == "category":
            self.keys = sorted(ke_table.kes)  # bank row i holds keys[i]

    def _rows(self, keys):
        if self.live:
            flat = [ke for k in keys for ke in self.table.kes[k]]
            with torch.no_grad():
                emb = self.model.encode_kes(flat)
            groups, offset = [], 0
            for k in keys:
                count = len(self.table.kes[k])
                groups.append(emb[offset: offset + count])
                offset += count
            return groups
        return [self.table.embeddings[k] for k in keys]

    def category_bank(self, dtype):
        return _pad_bank(self._rows(self.keys), dtype)

    def pair_bank(self, batch_samples, dtype):
        return _pad_bank(self._rows([s.id for s in batch_samples]), dtype)


# ---------------------------------------------------------------------------
# loops


def _run_epochs(model, samples, images, config, ke_table, history, out_dir,
                epoch_hook=None, quiet=True):
    n = len(samples)
    loss_cfg = config.loss
    captions = [s.caption for s in samples]
    poisoned = torch.tensor([bool(s.poisoned) for s in samples])
    use_kes = ke_table is not None and loss_cfg.mode != "cl"
    if use_kes:
        bank_source = _KEBank(ke_table, config, model)
        if loss_cfg.regime == "category":
            if any(s.category_id is None for s in samples):
                raise ValueError("category regime needs category ids on every sample")
            row_of = {key: i for i, key in enumerate(bank_source.keys)}
            missing = {s.category_id for s in samples} - set(row_of)
            if missing:
                raise ValueError(f"KE table lacks categories {sorted(missing)}")
            categories = torch.tensor([row_of[s.category_id] for s in samples])
            num_classes = len(bank_source.keys)
            static_bank = None if bank_source.live else bank_source.category_bank(model.dtype)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay
    )
    rng = shuffle_rng(config.seed)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    step = 0

    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            lr = cosine_lr(step, total_steps, config.base_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr

            patch_emb, image_emb, attention = model.encode_image(images[idx])
            text_emb = model.encode_text([captions[i] for i in idx])
            if not use_kes:
                args = (None, None, None, None)
            elif loss_cfg.regime == "category":
                bank, bank_mask = (static_bank if static_bank is not None
                                   else bank_source.category_bank(model.dtype))
                own = categories[idx]
                y = torch.zeros(len(idx), num_classes, dtype=model.dtype)
                y[torch.arange(len(idx)), own] = 1.0
                args = (bank, bank_mask, own, y)
            else:
                batch_samples = [samples[i] for i in idx]
                emb, mask = bank_source.pair_bank(batch_samples, model.dtype)
                own = torch.arange(len(idx))
                args = (emb, mask, own, torch.eye(len(idx), dtype=model.dtype))

            total, comps, lam, _ = objectives.compute_losses(
                image_emb, text_emb, patch_emb, attention, *args, loss_cfg
            )
            if config.force_unit_weights and "weighted_cl" in comps:
                comps["weighted_cl"] = objectives.weighted_contrastive_loss(
                    image_emb, text_emb, loss_cfg.temperature,
                    torch.ones(len(idx), dtype=model.dtype),
                )
                total = objectives.total_loss(comps, loss_cfg)
            if not math.isfinite(total.item()):
                raise RuntimeError(
                    f"training diverged: non-finite loss at step {step}"
                )

            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            record = {"step": step, "epoch": epoch, "lr": lr,
                      "total": total.item()}
            record.update({k: v.item() for k, v in comps.items()})
            if lam is not None:
                flags = poisoned[idx]
                if (~flags).any():
                    record["lam_clean"] = lam[~flags].mean().item()
                if flags.any():
                    record["lam_poisoned"] = lam[flags].mean().item()
            history.append_step(record)
            step += 1
        if epoch_hook is not None:
            history.epochs.append({"epoch": epoch, **epoch_hook(model, epoch)})
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / "last.zip")
        if not quiet:
            print(f"epoch {epoch + 1}/{config.epochs} "
                  f"loss {history.steps[-1]['total']:.4f}", file=sys.stderr)
    return history


def frozen_ke_encoder(model):
    """Snapshot the current text tower as a fixed KE-embedding function."""
    snapshot = copy.deepcopy(model)
    snapshot.eval()
    snapshot.requires_grad_(False)

    def encode(texts):
        with torch.no_grad():
            return snapshot.encode_kes(texts).numpy()

    return encode


def live_ke_encoder(model):
    """KE embeddings follow the training text tower (ablation mode).

    Targets are detached: KE losses shape the image tower against the
    current text space, not the reverse.
    """

    def encode(texts):
        with torch.no_grad():
            return model.encode_kes(texts).numpy()

    return encode


def pretrain_clean(model, samples, root, config, out_dir=None, images=None,
                   quiet=True):
    """Warmup on clean pairs; returns (history, ke_encode).

    The warmup objective is config.pretrain_mode with fresh loss scalars,
    independent of the downstream run's mode and weights, so arms that only
    differ after this phase can share its checkpoint. KE-dependent warmup
    modes organize the patch embeddings against the category KE strings as
    the live text tower embeds them; without that phase, patch-KE alignment
    carries no signal when later stages consume it. When config.ke_encoder
    is frozen_snapshot, ke_encode embeds KE strings with a copy of the text
    tower frozen at the end of this phase.
    """
    bad = [s.id for s in samples if s.poisoned]
    if bad:
        raise ValueError(f"clean split contains poisoned samples, e.g. {bad[0]!r}")
    phase_cfg = dataclasses.replace(
        config,
        epochs=config.pretrain_epochs,
        ke_encoder="live",
        loss=objectives.LossConfig(mode=config.pretrain_mode),
    )
    table = None
    if config.pretrain_mode != "cl":
        table = knowledge.KETable(kes=knowledge.ke_strings(samples))
    if images is None:
        images = load_images(samples, root)
    history = TrainingHistory()
    _run_epochs(model, samples, images, phase_cfg, table, history, out_dir,
                quiet=quiet)
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "pretrain.zip",
                        extra={"phase": "pretrain", "train_config": config_dict(config)})
        history.save(Path(out_dir) / "pretrain_history.jsonl")
    if config.ke_encoder == "frozen_snapshot":
        ke_encode = frozen_ke_encoder(model)
    else:
        ke_encode = live_ke_encoder(model)
    return history, ke_encode


def train(model, samples, root, config, ke_table=None, out_dir=None,
          images=None, epoch_hook=None, quiet=True):
    """Train with the configured defense mode; returns a TrainingHistory.

    KE-dependent modes need a ke_table built against the (usually frozen)
    KE encoder; plain contrastive mode runs without one. Writes model.zip
    and history.jsonl when out_dir is given, and a rolling last.zip per epoch.
    """
    if config.loss.mode != "cl" and ke_table is None:
        raise ValueError(f"mode {config.loss.mode!r} needs a KE table")
    if images is None:
        images = load_images(samples, root)
    history = TrainingHistory()
    _run_epochs(model, samples, images, config, ke_table, history, out_dir,
                epoch_hook=epoch_hook, quiet=quiet)
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "model.zip",
                        extra={"phase": "train", "train_config": config_dict(config)})
        history.save(Path(out_dir) / "history.jsonl")
    return history


def config_dict(config):
    """TrainConfig -> plain JSON-ready dict (nested LossConfig included)."""
    return dataclasses.asdict(config)
