"""End-to-end experiment arms: corpus -> poison -> pretrain -> train -> metrics.

One ExperimentConfig pins everything an arm depends on, so two runs with
equal configs (and equal platform) produce bit-identical reports. Corpus
generation and the clean pretrain phase can be shared across arms that
only differ downstream (attack, defense mode, KE count).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, data, encoders, evaluation, knowledge, objectives, training

KE_SOURCES = ("oracle", "llm")


def _default_dataset():
    return data.DatasetSpec(num_samples=2000)


@dataclass(frozen=True)
class ExperimentConfig:
    """Inputs of one experiment arm, JSON-serializable via experiment_dict."""

    dataset: data.DatasetSpec = field(default_factory=_default_dataset)
    attack: attacks.AttackSpec | None = None
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    encoder: dict = field(default_factory=dict)  # EncoderConfig overrides
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    ke_source: str = "oracle"
    ke_count: int | None = None
    eval_ks: tuple = (1, 5, 10)
    attacked_eval_count: int = 100

    def __post_init__(self):
        if self.ke_source not in KE_SOURCES:
            raise ValueError(f"ke_source must be one of {KE_SOURCES}")
        if self.ke_count is not None and self.ke_count < 1:
            raise ValueError(f"ke_count must be >= 1, got {self.ke_count}")
        if self.attacked_eval_count < 1:
            raise ValueError("attacked_eval_count must be >= 1")


def experiment_dict(config):
    """Nested plain-dict echo of a config, for manifests and report metadata."""
    return dataclasses.asdict(config)


def config_from_dict(overrides):
    """Build an ExperimentConfig from a (possibly partial) nested dict.

    Inverse of experiment_dict: unknown keys raise, lists turn back into
    the tuples the dataclasses expect, and a falsy attack section means no
    attack. Missing keys keep their defaults.
    """
    overrides = dict(overrides or {})

    def _take(section):
        part = overrides.pop(section, None)
        return dict(part) if part else {}

    ds = _take("dataset")
    for key in ("shapes", "colors", "backgrounds"):
        if key in ds:
            ds[key] = tuple(ds[key])
    ds.setdefault("num_samples", 2000)
    dataset = data.DatasetSpec(**ds)

    atk = _take("attack")
    if "pairs" in atk:
        atk["pairs"] = tuple(tuple(p) for p in atk["pairs"])
    attack = attacks.AttackSpec(**atk) if atk else None

    tr = _take("train")
    loss = objectives.LossConfig(**tr.pop("loss", {}))
    train = training.TrainConfig(loss=loss, **tr)

    rest = {}
    for key in ("split", "eval_ks"):
        if key in overrides:
            rest[key] = tuple(overrides.pop(key))
    for key in ("encoder", "split_seed", "ke_source", "ke_count",
                "attacked_eval_count"):
        if key in overrides:
            rest[key] = overrides.pop(key)
    if overrides:
        raise ValueError(f"unknown config keys: {sorted(overrides)}")
    return ExperimentConfig(dataset=dataset, attack=attack, train=train,
                            **rest)


@dataclass
class EvalAssets:
    """Fixed eval inputs: clean test pairs plus attacked query images."""

    images: np.ndarray
    captions: list
    pool: list  # (caption, category_id)
    attack_jobs: list  # (target_class, images)
    trigger_mask: np.ndarray | None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    work_dir: Path
    data_root: Path
    train_root: Path
    splits: dict
    model: object
    pretrain_history: training.TrainingHistory
    history: training.TrainingHistory
    ke_table: knowledge.KETable
    report: evaluation.MetricsReport
    epoch_reports: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# stage helpers


def build_ke_table(config, train_samples, ke_encode, cache_dir=None):
    """KE strings per category (or per pair) embedded by the KE encoder.

    The oracle source reads the manifest's caption-derived lists; the llm
    source asks the configured endpoint (category-name prompts in the
    category regime, caption prompts otherwise) through the JSONL cache.
    """
    per_sample = config.train.loss.regime == "per_pair"
    if config.ke_source == "oracle":
        return knowledge.build_ke_table(train_samples, ke_encode,
                                        per_sample=per_sample,
                                        ke_count=config.ke_count)

    cache = Path(cache_dir) / "ke_cache.jsonl" if cache_dir is not None else None
    client = knowledge.LLMClient(cache_path=cache)
    count = max(5, config.ke_count or 5)
    if per_sample:
        requests = [knowledge.KERequest(caption=s.caption, count_requested=count)
                    for s in train_samples]
        keys = [s.id for s in train_samples]
    else:
        keys = sorted({s.category_id for s in train_samples})
        names = [" ".join(reversed(config.dataset.category_attrs(c)))
                 for c in keys]  # (shape, color) -> "color shape"
        requests = [knowledge.KERequest(caption=n, category_name=n,
                                        count_requested=count,
                                        prompt_kind="category")
                    for n in names]
    lists = knowledge.llm_kes_many(requests, client)
    if config.ke_count is not None:
        lists = [kes[: config.ke_count] for kes in lists]
    return knowledge.KETable(
        kes=dict(zip(keys, lists)),
        embeddings={k: np.asarray(ke_encode(kes)) for k, kes in zip(keys, lists)},
    )


def eval_assets(config, test_samples, data_root, patch_size):
    """Load the clean test set and derive the attacked query images."""
    images = training.load_images(test_samples, data_root)
    pool = [(s.caption, s.category_id) for s in test_samples]
    captions = [s.caption for s in test_samples]
    spec = config.attack
    jobs, mask = [], None
    if spec is not None:
        limit = config.attacked_eval_count
        if spec.kind in attacks.BACKDOOR_KINDS:
            idx = [i for i, s in enumerate(test_samples)
                   if s.category_id != spec.target_class][:limit]
            trigger = attacks.build_trigger(spec, images.shape[1])
            rng = np.random.default_rng(spec.seed)
            attacked = np.stack([trigger(images[i], rng) for i in idx])
            jobs.append((spec.target_class, attacked.astype(np.float32)))
            if (spec.kind == "patch"
                    and spec.trigger_params.get("position", "bottom-right")
                    != "random"):
                mask = evaluation.trigger_region_mask(
                    images.shape[1], patch_size,
                    spec.trigger_params.get("size", attacks.DEFAULT_PATCH_SIZE))
        else:
            pairs = (spec.pairs if spec.kind == "multi_target"
                     else ((spec.source_class, spec.target_class),))
            for source, target in pairs:
                idx = [i for i, s in enumerate(test_samples)
                       if s.category_id == source][:limit]
                jobs.append((target, images[idx]))
    return EvalAssets(images=images, captions=captions, pool=pool,
                      attack_jobs=jobs, trigger_mask=mask)


def compute_metrics(model, assets, ks):
    """Hit@k over the attack jobs plus clean Recall@k both directions."""
    recall = {d: evaluation.recall_at_k(model, assets.images, assets.captions,
                                        direction=d, ks=ks)
              for d in evaluation.DIRECTIONS}
    hit = {}
    mass = None
    if assets.attack_jobs:
        sized = [(len(imgs),
                  evaluation.hit_at_k(model, imgs, assets.pool, target, ks))
                 for target, imgs in assets.attack_jobs]
        total = sum(n for n, _ in sized)
        hit = {k: sum(n * h[k] for n, h in sized) / total for k in ks}
        if assets.trigger_mask is not None:
            attacked = np.concatenate([imgs for _, imgs in assets.attack_jobs])
            mass = evaluation.attention_trigger_mass(model, attacked,
                                                     assets.trigger_mask)
    return evaluation.MetricsReport(hit_at_k=hit, recall_at_k=recall,
                                    trigger_attention_mass=mass).check()


# ---------------------------------------------------------------------------
# the full arm


def run_experiment(config, work_dir, data_dir=None, pretrain_dir=None,
                   probe_epochs=None, quiet=True):
    """Run one arm end to end; returns an ExperimentResult.

    data_dir reuses an existing corpus instead of regenerating; pretrain_dir
    shares the clean warmup checkpoint across arms that only differ after
    it. probe_epochs evaluates attack/utility metrics after those epochs
    (1-based) into result.epoch_reports.
    """
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)

    if data_dir is None:
        data_root = work / "data"
        samples = data.generate_dataset(config.dataset, data_root)
    else:
        data_root = Path(data_dir)
        samples = data.load_manifest(data_root / "manifest.jsonl")
    train_clean, val_s, test_s = data.split(samples, config.split,
                                            config.split_seed)

    if config.attack is not None:
        train_root = work / "poisoned"
        train_samples = attacks.poison_dataset(train_clean, config.attack,
                                               data_root, train_root)
    else:
        train_root, train_samples = data_root, list(train_clean)

    texts = [s.caption for s in samples] + [k for s in samples for k in s.kes]
    enc_over = {"image_size": config.dataset.image_size, **config.encoder}
    enc_cfg = encoders.EncoderConfig(vocab=encoders.build_vocab(texts).tokens,
                                     **enc_over)

    pre_dir = Path(pretrain_dir) if pretrain_dir is not None else work / "pretrain"
    checkpoint = pre_dir / "pretrain.zip"
    if pretrain_dir is not None and checkpoint.exists():
        model, _ = training.load_checkpoint(checkpoint)
        hist_path = pre_dir / "pretrain_history.jsonl"
        pre_history = (training.TrainingHistory.load(hist_path)
                       if hist_path.exists() else training.TrainingHistory())
        ke_encode = training.frozen_ke_encoder(model)
    else:
        model = encoders.make_dual_encoder(
            enc_cfg, seed=training.stream_seed(config.train.seed, "init"))
        pre_history, ke_encode = training.pretrain_clean(
            model, train_clean, data_root, config.train, out_dir=pre_dir,
            quiet=quiet)

    ke_table = build_ke_table(config, train_samples, ke_encode, cache_dir=work)
    assets = eval_assets(config, test_s, data_root, enc_cfg.patch_size)

    epoch_reports = {}
    hook = None
    if probe_epochs:
        want = {int(e) for e in probe_epochs}

        def hook(m, epoch):
            if epoch + 1 not in want:
                return {}
            probe = compute_metrics(m, assets, config.eval_ks)
            epoch_reports[epoch + 1] = probe
            return {"hit_at_1": probe.hit_at_k.get(1),
                    "recall_at_10": probe.recall_at_k["TR"].get(10)}

    train_images = training.load_images(train_samples, train_root)
    history = training.train(model, train_samples, train_root, config.train,
                             ke_table=ke_table, out_dir=work / "train",
                             images=train_images, epoch_hook=hook, quiet=quiet)

    report = compute_metrics(model, assets, config.eval_ks)
    report.lambda_stats = evaluation.lambda_statistics(
        model, train_samples, train_images, ke_table,
        regime=config.train.loss.regime)
    report.metadata = {
        "config": experiment_dict(config),
        "seed": config.train.seed,
        "counts": {"train": len(train_samples), "val": len(val_s),
                   "test": len(test_s),
                   "poisoned": sum(1 for s in train_samples if s.poisoned)},
        "attacked_counts": {str(t): len(imgs)
                            for t, imgs in assets.attack_jobs},
        "attack_tag": config.attack.tag() if config.attack else None,
    }
    report.check()
    report.save(work / "report.json")

    return ExperimentResult(
        config=config, work_dir=work, data_root=data_root,
        train_root=train_root,
        splits={"train": train_samples, "val": val_s, "test": test_s},
        model=model, pretrain_history=pre_history, history=history,
        ke_table=ke_table, report=report, epoch_reports=epoch_reports,
    )


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepBase:
    """What a sweep holds fixed: the base config and where to work."""

    config: ExperimentConfig
    work_dir: Path
    data_dir: Path | None = None


def sweep_runner(axis, values, base):
    """Yield (value, MetricsReport) along one axis of a SweepBase.

    poison_rate and ke_count retrain per value (sharing the corpus and the
    clean pretrain); the epoch axis trains once and probes each requested
    epoch. Values on the epoch axis are 1-based epoch counts.
    """
    cfg = base.config
    work = Path(base.work_dir)
    data_dir = base.data_dir
    if data_dir is None:
        data_dir = work / "data"
        data.generate_dataset(cfg.dataset, data_dir)
    pretrain_dir = work / "pretrain"

    if axis == "poison_rate":
        if cfg.attack is None:
            raise ValueError("poison_rate sweep needs an attack in the base config")
        for value in values:
            sub = dataclasses.replace(
                cfg, attack=dataclasses.replace(cfg.attack,
                                                poison_rate=float(value)))
            result = run_experiment(sub, work / f"rate_{value:g}",
                                    data_dir=data_dir,
                                    pretrain_dir=pretrain_dir)
            yield value, result.report
    elif axis == "ke_count":
        for value in values:
            sub = dataclasses.replace(cfg, ke_count=int(value))
            result = run_experiment(sub, work / f"ke_{value}",
                                    data_dir=data_dir,
                                    pretrain_dir=pretrain_dir)
            yield value, result.report
    else:  # epoch
        epochs = [int(v) for v in values]
        if min(epochs) < 1 or max(epochs) > cfg.train.epochs:
            raise ValueError(
                f"epoch values must lie in [1, {cfg.train.epochs}]")
        result = run_experiment(cfg, work / "epoch_run", data_dir=data_dir,
                                pretrain_dir=pretrain_dir,
                                probe_epochs=set(epochs))
        for value in values:
            yield value, result.epoch_reports[int(value)]
