"""Command-line entry point: data, poison, gen-ke, train, eval, sweep, report.

Each command writes its artifacts under one output directory together with
a run.json manifest recording the command, the fully resolved config, and
content hashes of its inputs, so any table or plot can be traced back to
exact inputs. Exit codes: 0 success, 2 validation error, 3 numeric abort,
4 I/O or endpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import yaml

from . import attacks, data, evaluation, knowledge, pipeline, training

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DEFENSE_MODES = {
    "none": "cl",
    "ke": "cl_ke",
    "attention": "cl_attention",
    "weighted-attention": "weighted_cl_attention",
    "weighted-ke": "weighted_cl_ke",
    "weighted-attention-ke": "weighted_cl_attention_ke",
}
ATTACK_NAMES = {
    "patch": "patch",
    "bpp": "bpp",
    "wanet": "wanet",
    "single": "single_target",
    "multi": "multi_target",
}


# ---------------------------------------------------------------------------
# manifests and small helpers


def _hash_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_inputs(paths):
    """name -> {path, sha256}; directories hash their manifest.jsonl."""
    out = {}
    for name, path in paths.items():
        path = Path(path)
        target = path / "manifest.jsonl" if path.is_dir() else path
        out[name] = {"path": str(path), "sha256": _hash_file(target)}
    return out


def write_run_manifest(out_dir, command, config, inputs=None, outputs=(),
                       seed=None):
    payload = {
        "command": command,
        "config": config,
        "inputs": inputs or {},
        "outputs": sorted(str(o) for o in outputs),
        "seed": seed,
    }
    path = Path(out_dir) / "run.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _claim_out_dir(out_dir, force):
    """Refuse to clobber a previous run unless --force is given."""
    out = Path(out_dir)
    if (out / "run.json").exists() and not force:
        raise ValueError(
            f"{out} already holds a run (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_scalar(text):
    return yaml.safe_load(text)


def _load_config_file(path):
    """Nested YAML/JSON mapping, or flat dotted key=value lines."""
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if lines and all("=" in ln for ln in lines):
        nested = {}
        for ln in lines:
            key, _, value = ln.partition("=")
            node = nested
            *parents, leaf = key.strip().split(".")
            for part in parents:
                node = node.setdefault(part, {})
            node[leaf] = _parse_scalar(value.strip())
        return nested
    loaded = yaml.safe_load(text)
    if not isinstance(loaded, dict):
        raise ValueError(f"config file {path} is not a mapping")
    return loaded


def _deep_merge(base, extra):
    merged = dict(base)
    for key, value in extra.items():
        if (isinstance(value, dict) and isinstance(merged.get(key), dict)):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _csv_numbers(text, cast):
    return tuple(cast(part) for part in text.split(",") if part != "")


def _parse_pairs(text):
    pairs = []
    for chunk in text.split(","):
        source, _, target = chunk.partition(":")
        pairs.append((int(source), int(target)))
    return tuple(pairs)


# ---------------------------------------------------------------------------
# flag -> config assembly (defaults < config file < flags)


def _attack_overrides(args):
    if getattr(args, "attack", None) in (None, "none"):
        return {} if getattr(args, "attack", None) is None else {"attack": None}
    atk = {"kind": ATTACK_NAMES[args.attack]}
    if args.rate is not None:
        atk["poison_rate"] = args.rate
    if args.target is not None:
        atk["target_class"] = args.target
    if args.source is not None:
        atk["source_class"] = args.source
    if args.pairs is not None:
        atk["pairs"] = _parse_pairs(args.pairs)
    if args.attack_seed is not None:
        atk["seed"] = args.attack_seed
    trigger = {}
    if args.trigger_size is not None:
        trigger["size"] = args.trigger_size
    if args.position is not None:
        trigger["position"] = args.position
    if args.bits is not None:
        trigger["bits"] = args.bits
    if args.grid_size is not None:
        trigger["grid_size"] = args.grid_size
    if args.strength is not None:
        trigger["strength"] = args.strength
    if trigger:
        atk["trigger_params"] = trigger
    return {"attack": atk}


def _experiment_overrides(args):
    """Collect explicitly-set flags into a nested override dict."""
    over = {}
    dataset = {}
    for flag, key in (("n", "num_samples"), ("cats", "num_categories"),
                      ("image_size", "image_size"), ("data_seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            dataset[key] = value
    if dataset:
        over["dataset"] = dataset

    over = _deep_merge(over, _attack_overrides(args))

    train = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"),
                      ("batch_size", "batch_size"), ("lr", "base_lr"),
                      ("weight_decay", "weight_decay"),
                      ("pretrain_epochs", "pretrain_epochs"),
                      ("pretrain_mode", "pretrain_mode"),
                      ("ke_encoder", "ke_encoder"),
                      ("force_unit_weights", "force_unit_weights")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    loss = {}
    if getattr(args, "defense", None) is not None:
        loss["mode"] = DEFENSE_MODES[args.defense]
    for flag, key in (("temperature", "temperature"), ("mu1", "mu1"),
                      ("mu2", "mu2"), ("regime", "regime"),
                      ("alpha_target", "alpha_target")):
        value = getattr(args, flag, None)
        if value is not None:
            loss[key] = value
    if loss:
        train["loss"] = loss
    if train:
        over["train"] = train

    for flag, key, cast in (("split", "split", float),
                            ("eval_ks", "eval_ks", int)):
        value = getattr(args, flag, None)
        if value is not None:
            over[key] = _csv_numbers(value, cast)
    for flag, key in (("split_seed", "split_seed"),
                      ("ke_source", "ke_source"), ("ke_count", "ke_count"),
                      ("attacked_count", "attacked_eval_count")):
        value = getattr(args, flag, None)
        if value is not None:
            over[key] = value
    return over


def resolve_config(args):
    """defaults < --config file < explicit flags, as an ExperimentConfig."""
    layered = {}
    if getattr(args, "config", None):
        layered = _deep_merge(layered, _load_config_file(args.config))
    layered = _deep_merge(layered, _experiment_overrides(args))
    return pipeline.config_from_dict(layered)


def _add_attack_flags(sub):
    sub.add_argument("--attack", choices=["none", *ATTACK_NAMES])
    sub.add_argument("--rate", type=float, help="poison rate in [0, 0.05]")
    sub.add_argument("--target", type=int, help="target category id")
    sub.add_argument("--source", type=int, help="source category id")
    sub.add_argument("--pairs", help="multi-target pairs, e.g. 1:4,6:11")
    sub.add_argument("--attack-seed", type=int, dest="attack_seed")
    sub.add_argument("--trigger-size", type=int, dest="trigger_size")
    sub.add_argument("--position", choices=["bottom-right", "random"])
    sub.add_argument("--bits", type=int, help="bit depth kept by bpp")
    sub.add_argument("--grid-size", type=int, dest="grid_size")
    sub.add_argument("--strength", type=float, help="warp strength")


def _add_dataset_flags(sub):
    sub.add_argument("--n", type=int, help="number of image-caption pairs")
    sub.add_argument("--cats", type=int, help="number of categories")
    sub.add_argument("--image-size", type=int, dest="image_size")
    sub.add_argument("--data-seed", type=int, dest="data_seed")


def _add_split_flags(sub):
    sub.add_argument("--split", help="train,val,test fractions")
    sub.add_argument("--split-seed", type=int, dest="split_seed")


def _add_train_flags(sub):
    sub.add_argument("--defense", choices=sorted(DEFENSE_MODES))
    sub.add_argument("--seed", type=int, help="training seed")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--lr", type=float)
    sub.add_argument("--weight-decay", type=float, dest="weight_decay")
    sub.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    sub.add_argument("--pretrain-mode", choices=list(objectives.MODES),
                     dest="pretrain_mode", help="warmup objective")
    sub.add_argument("--ke-encoder", choices=["frozen_snapshot", "live"],
                     dest="ke_encoder")
    sub.add_argument("--force-unit-weights", action="store_const", const=True,
                     default=None, dest="force_unit_weights")
    sub.add_argument("--temperature", type=float)
    sub.add_argument("--mu1", type=float)
    sub.add_argument("--mu2", type=float)
    sub.add_argument("--regime", choices=["category", "per_pair"])
    sub.add_argument("--alpha-target", choices=["patch", "scalar"],
                     dest="alpha_target")
    sub.add_argument("--ke-source", choices=["oracle", "llm"],
                     dest="ke_source")
    sub.add_argument("--ke-count", type=int, dest="ke_count")
    sub.add_argument("--eval-ks", dest="eval_ks",
                     help="comma-separated ranks, default 1,5,10")
    sub.add_argument("--attacked-count", type=int, dest="attacked_count")
    sub.add_argument("--config", help="YAML/JSON or key=value config file")
    sub.add_argument("--progress", action="store_true",
                     help="print per-epoch progress to stderr")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    out = _claim_out_dir(args.out, args.force)
    spec = data.DatasetSpec(
        num_samples=args.n if args.n is not None else 2000,
        num_categories=args.cats if args.cats is not None else 16,
        image_size=args.image_size if args.image_size is not None else 64,
        seed=args.data_seed if args.data_seed is not None else 0,
    )
    samples = data.generate_dataset(spec, out)
    split = (_csv_numbers(args.split, float) if args.split
             else (0.8, 0.1, 0.1))
    split_seed = args.split_seed if args.split_seed is not None else 0
    parts = data.split(samples, split, split_seed)
    splits = {name: [s.id for s in part]
              for name, part in zip(("train", "val", "test"), parts)}
    (out / "splits.json").write_text(
        json.dumps(splits, indent=2, sort_keys=True) + "\n")
    write_run_manifest(
        out, "gen-data",
        {"dataset": dataclasses.asdict(spec), "split": list(split),
         "split_seed": split_seed},
        outputs=["manifest.jsonl", "images/", "splits.json"], seed=spec.seed)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_poison(args):
    out = _claim_out_dir(args.out, args.force)
    overrides = _attack_overrides(args).get("attack")
    if not overrides:
        raise ValueError("poison needs --attack")
    spec = attacks.AttackSpec(**overrides)
    samples = data.load_manifest(Path(args.data) / "manifest.jsonl")
    poisoned = attacks.poison_dataset(samples, spec, args.data, out)
    count = sum(1 for s in poisoned if s.poisoned)
    write_run_manifest(
        out, "poison", {"attack": dataclasses.asdict(spec)},
        inputs=hash_inputs({"data": args.data}),
        outputs=["manifest.jsonl", "images/"], seed=spec.seed)
    print(f"poisoned {count} of {len(poisoned)} samples "
          f"({spec.tag()}) into {out}")
    return EXIT_OK


def cmd_gen_ke(args):
    out = _claim_out_dir(args.out, args.force)
    samples = data.load_manifest(Path(args.data) / "manifest.jsonl")
    if args.source == "oracle":
        lists = [knowledge.oracle_kes(s) for s in samples]
    else:
        client = knowledge.LLMClient(
            model=args.model or "vicuna-13b",
            cache_path=args.cache or out / "ke_cache.jsonl")
        requests = [knowledge.KERequest(caption=s.caption,
                                        count_requested=args.count)
                    for s in samples]
        lists = knowledge.llm_kes_many(requests, client,
                                       max_workers=args.max_workers)
    if args.k is not None:
        lists = [kes[: args.k] for kes in lists]
    augmented = [dataclasses.replace(s, kes=list(kes))
                 for s, kes in zip(samples, lists)]
    data.save_manifest(augmented, out / "manifest.jsonl")
    write_run_manifest(
        out, "gen-ke",
        {"source": args.source, "k": args.k, "count": args.count,
         "model": args.model},
        inputs=hash_inputs({"data": args.data}),
        outputs=["manifest.jsonl"])
    print(f"wrote KE lists for {len(augmented)} samples to {out}")
    return EXIT_OK


def cmd_train(args):
    out = _claim_out_dir(args.out, args.force)
    config = resolve_config(args)
    inputs = hash_inputs({"data": args.data}) if args.data else {}
    result = pipeline.run_experiment(
        config, out, data_dir=args.data,
        probe_epochs=(_csv_numbers(args.probe_epochs, int)
                      if args.probe_epochs else None),
        quiet=not args.progress)
    write_run_manifest(
        out, "train", pipeline.experiment_dict(config), inputs=inputs,
        outputs=["pretrain/", "train/", "report.json"],
        seed=config.train.seed)
    hits = result.report.hit_at_k
    recall = result.report.recall_at_k["TR"]
    print(f"run complete: hit@1 {hits.get(1, float('nan')):.2f}  "
          f"recall@10 (TR) {recall.get(10, float('nan')):.2f}  -> {out}")
    return EXIT_OK


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "run.json").read_text())
    if manifest.get("command") != "train":
        raise ValueError(f"{run_dir} is not a train run")
    return manifest


def cmd_eval(args):
    run_dir = Path(args.run)
    manifest = _load_run(run_dir)
    config = pipeline.config_from_dict(manifest["config"])
    data_path = manifest["inputs"].get("data", {}).get("path")
    data_root = Path(data_path) if data_path else run_dir / "data"

    samples = data.load_manifest(data_root / "manifest.jsonl")
    _, _, test_s = data.split(samples, config.split, config.split_seed)
    model, _ = training.load_checkpoint(run_dir / "train" / "model.zip")
    assets = pipeline.eval_assets(config, test_s, data_root,
                                  model.config.patch_size)
    report = pipeline.compute_metrics(model, assets, config.eval_ks)
    report.metadata = {"config": pipeline.experiment_dict(config),
                       "seed": config.train.seed}
    out = Path(args.out) if args.out else run_dir / "eval.json"
    report.save(out)
    print(f"wrote metrics to {out}")
    return EXIT_OK


def cmd_sweep(args):
    out = _claim_out_dir(args.out, args.force)
    config = resolve_config(args)
    values_cast = int if args.axis in ("epoch", "ke_count") else float
    values = list(_csv_numbers(args.values, values_cast))
    base = pipeline.SweepBase(config=config, work_dir=out,
                              data_dir=args.data)
    rows = evaluation.sweep(args.axis, values, base,
                            out_csv=out / "sweep.csv")
    write_run_manifest(
        out, "sweep",
        {"axis": args.axis, "values": values,
         "base": pipeline.experiment_dict(config)},
        inputs=hash_inputs({"data": args.data}) if args.data else {},
        outputs=["sweep.csv"], seed=config.train.seed)
    print(f"swept {args.axis} over {len(rows)} values -> {out / 'sweep.csv'}")
    return EXIT_OK


def _report_table_rows(paths):
    rows = []
    for path in paths:
        report = evaluation.MetricsReport.load(path)
        rows.append({
            "name": Path(path).stem,
            "hit_at_1": report.hit_at_k.get(1, ""),
            "hit_at_5": report.hit_at_k.get(5, ""),
            "hit_at_10": report.hit_at_k.get(10, ""),
            "recall_tr_at_10": report.recall_at_k.get("TR", {}).get(10, ""),
            "recall_ir_at_10": report.recall_at_k.get("IR", {}).get(10, ""),
            "trigger_mass": (report.trigger_attention_mass
                             if report.trigger_attention_mass is not None
                             else ""),
        })
    return rows


def _plot_sweep(csv_path, out_png):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = evaluation.read_sweep_csv(csv_path)
    xs = [float(r["value"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for column in ("hit_at_1", "hit_at_5", "hit_at_10"):
        ys = [float(r[column]) for r in rows if r[column]]
        if len(ys) == len(xs):
            ax.plot(xs, ys, marker="o", label=column.replace("_at_", "@"))
    ax.set_xlabel(rows[0]["axis"] if rows else "value")
    ax.set_ylabel("percent")
    ax.set_ylim(-2, 102)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, metadata={"Software": None})
    plt.close(fig)


def cmd_report(args):
    out = _claim_out_dir(args.out, args.force)
    json_inputs = [p for p in args.inputs if p.endswith(".json")]
    csv_inputs = [p for p in args.inputs if p.endswith(".csv")]
    if not json_inputs and not csv_inputs:
        raise ValueError("report needs at least one report.json or sweep.csv")
    outputs = []
    if json_inputs:
        rows = _report_table_rows(json_inputs)
        import csv as _csv
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        outputs.append("summary.csv")
    for path in csv_inputs:
        png = out / (Path(path).stem + ".png")
        _plot_sweep(path, png)
        outputs.append(png.name)
    write_run_manifest(
        out, "report", {"inputs": [str(p) for p in args.inputs]},
        inputs=hash_inputs({Path(p).name: p for p in args.inputs}),
        outputs=outputs)
    print(f"wrote {', '.join(outputs)} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semshield",
        description="Knowledge-guided defense lab for contrastive "
                    "image-text models")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("gen-data", help="generate a synthetic corpus")
    sub.add_argument("--out", required=True)
    sub.add_argument("--force", action="store_true")
    _add_dataset_flags(sub)
    _add_split_flags(sub)
    sub.set_defaults(func=cmd_gen_data)

    sub = commands.add_parser("poison", help="poison a copy of a manifest")
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--force", action="store_true")
    _add_attack_flags(sub)
    sub.set_defaults(func=cmd_poison)

    sub = commands.add_parser("gen-ke",
                              help="attach knowledge elements to a manifest")
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--force", action="store_true")
    sub.add_argument("--source", choices=["oracle", "llm"], default="oracle")
    sub.add_argument("--k", type=int, help="keep first k KEs per sample")
    sub.add_argument("--count", type=int, default=25,
                     help="KEs requested per llm prompt")
    sub.add_argument("--model", help="llm model name")
    sub.add_argument("--cache", help="llm response cache path")
    sub.add_argument("--max-workers", type=int, default=4,
                     dest="max_workers")
    sub.set_defaults(func=cmd_gen_ke)

    sub = commands.add_parser("train", help="run one experiment arm")
    sub.add_argument("--out", required=True)
    sub.add_argument("--data", help="reuse an existing corpus directory")
    sub.add_argument("--force", action="store_true")
    sub.add_argument("--probe-epochs", dest="probe_epochs",
                     help="evaluate after these 1-based epochs, e.g. 1,5,30")
    _add_dataset_flags(sub)
    _add_attack_flags(sub)
    _add_split_flags(sub)
    _add_train_flags(sub)
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("eval", help="re-evaluate a finished train run")
    sub.add_argument("--run", required=True)
    sub.add_argument("--out")
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser("sweep", help="sweep one axis of an experiment")
    sub.add_argument("--axis", required=True,
                     choices=list(evaluation.SWEEP_AXES))
    sub.add_argument("--values", required=True,
                     help="comma-separated axis values")
    sub.add_argument("--out", required=True)
    sub.add_argument("--data", help="reuse an existing corpus directory")
    sub.add_argument("--force", action="store_true")
    _add_dataset_flags(sub)
    _add_attack_flags(sub)
    _add_split_flags(sub)
    _add_train_flags(sub)
    sub.set_defaults(func=cmd_sweep)

    sub = commands.add_parser("report",
                              help="tables and plots from reports/sweeps")
    sub.add_argument("inputs", nargs="+",
                     help="report.json and/or sweep.csv files")
    sub.add_argument("--out", required=True)
    sub.add_argument("--force", action="store_true")
    sub.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except knowledge.KEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
