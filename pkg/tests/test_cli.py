"""Command-line contract: artifact layout, run manifests, config layering,
exit codes, and byte-level reproducibility of every stage."""
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from semshield import cli, data, evaluation, knowledge

TINY = ["--n", "96", "--cats", "4", "--image-size", "32", "--data-seed", "11"]
TINY_TRAIN = [*TINY, "--epochs", "2", "--batch-size", "32",
              "--pretrain-epochs", "1", "--eval-ks", "1,2,4",
              "--attacked-count", "8"]


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file() and path.name != "run.json":
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run_cli("gen-data", "--out", out, *TINY) == 0
    return out


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_data):
    out = tmp_path_factory.mktemp("cli_run") / "run"
    code = run_cli("train", "--out", out, "--data", tiny_data,
                   "--attack", "patch", "--rate", "0.04", "--target", "1",
                   "--defense", "weighted-attention", *TINY_TRAIN)
    assert code == 0
    return out


class TestGenData:
    def test_reruns_are_tree_identical(self, tiny_data, tmp_path):
        again = tmp_path / "again"
        assert run_cli("gen-data", "--out", again, *TINY) == 0
        assert tree_hash(again) == tree_hash(tiny_data)

    def test_manifest_and_splits_written(self, tiny_data):
        manifest = json.loads((tiny_data / "run.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["config"]["dataset"]["num_samples"] == 96
        assert manifest["seed"] == 11
        splits = json.loads((tiny_data / "splits.json").read_text())
        assert sorted(splits) == ["test", "train", "val"]
        total = sum(len(v) for v in splits.values())
        assert total == 96
        assert len(set().union(*map(set, splits.values()))) == total

    def test_zero_samples_gives_empty_manifest(self, tmp_path):
        out = tmp_path / "empty"
        assert run_cli("gen-data", "--out", out, "--n", "0") == 0
        assert (out / "manifest.jsonl").read_text() == ""

    def test_refuses_overwrite_without_force(self, tiny_data, capsys):
        assert run_cli("gen-data", "--out", tiny_data, *TINY) == 2
        assert "--force" in capsys.readouterr().err

    def test_force_overwrites(self, tmp_path):
        out = tmp_path / "f"
        assert run_cli("gen-data", "--out", out, "--n", "8", "--cats", "2") == 0
        assert run_cli("gen-data", "--out", out, "--n", "8", "--cats", "2",
                       "--force") == 0


class TestPoison:
    def test_poisoned_row_count_matches_rate(self, tmp_path):
        src = tmp_path / "d"
        assert run_cli("gen-data", "--out", src, "--n", "2000") == 0
        out = tmp_path / "p"
        assert run_cli("poison", "--data", src, "--out", out, "--attack",
                       "patch", "--rate", "0.01", "--target", "3") == 0
        rows = data.load_manifest(out / "manifest.jsonl")
        assert sum(1 for s in rows if s.poisoned) == 20
        assert len(rows) == 2000

    def test_single_target_audit(self, tiny_data, tmp_path):
        out = tmp_path / "p"
        assert run_cli("poison", "--data", tiny_data, "--out", out,
                       "--attack", "single", "--source", "2", "--target", "3",
                       "--rate", "0.05") == 0
        originals = {s.id: s for s in
                     data.load_manifest(tiny_data / "manifest.jsonl")}
        poisoned = [s for s in data.load_manifest(out / "manifest.jsonl")
                    if s.poisoned]
        assert poisoned
        for s in poisoned:
            assert s.category_id == 3  # caption and KEs follow the donor
            assert originals[s.id].category_id == 2  # image stays source class
            assert s.attack_tag == "single:2→3"

    def test_zero_rate_is_a_validation_error(self, tiny_data, tmp_path, capsys):
        code = run_cli("poison", "--data", tiny_data, "--out", tmp_path / "p",
                       "--attack", "patch", "--rate", "0", "--target", "3")
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_needs_attack_flag(self, tiny_data, tmp_path):
        assert run_cli("poison", "--data", tiny_data,
                       "--out", tmp_path / "p") == 2

    def test_missing_data_dir_is_io_error(self, tmp_path):
        code = run_cli("poison", "--data", tmp_path / "nope",
                       "--out", tmp_path / "p",
                       "--attack", "patch", "--rate", "0.01", "--target", "3")
        assert code == 4


class TestGenKE:
    def test_oracle_is_deterministic(self, tiny_data, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("gen-ke", "--data", tiny_data, "--out", out,
                           "--source", "oracle") == 0
            outs.append((out / "manifest.jsonl").read_bytes())
        assert outs[0] == outs[1]

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_k_truncates_lists(self, tiny_data, tmp_path, k):
        out = tmp_path / f"k{k}"
        assert run_cli("gen-ke", "--data", tiny_data, "--out", out,
                       "--source", "oracle", "--k", k) == 0
        rows = data.load_manifest(out / "manifest.jsonl")
        assert all(len(s.kes) <= k for s in rows)
        assert any(len(s.kes) == k for s in rows)

    def test_llm_cache_hit_makes_no_network_calls(self, tmp_path, monkeypatch):
        src = tmp_path / "d"
        assert run_cli("gen-data", "--out", src, "--n", "6", "--cats", "2",
                       "--image-size", "32") == 0
        calls = []

        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return {"text": "glossy face, thin rim, soft glow, "
                                "flat side, small notch"}

        def fake_post(url, json=None, headers=None, timeout=None):
            calls.append(url)
            return FakeResponse()

        monkeypatch.setenv("SHIELD_LLM_URL", "http://llm.test/v1")
        monkeypatch.setattr("requests.post", fake_post)
        cache = tmp_path / "cache.jsonl"
        assert run_cli("gen-ke", "--data", src, "--out", tmp_path / "o1",
                       "--source", "llm", "--cache", cache, "--count", "5") == 0
        assert calls  # cold cache had to ask the endpoint
        first = (tmp_path / "o1" / "manifest.jsonl").read_bytes()

        calls.clear()
        monkeypatch.setattr("requests.post", fake_post)
        assert run_cli("gen-ke", "--data", src, "--out", tmp_path / "o2",
                       "--source", "llm", "--cache", cache, "--count", "5") == 0
        assert calls == []  # warm cache answers everything
        assert (tmp_path / "o2" / "manifest.jsonl").read_bytes() == first


class TestTrain:
    def test_artifacts_and_manifest(self, tiny_run, tiny_data):
        assert (tiny_run / "report.json").exists()
        assert (tiny_run / "train" / "model.zip").exists()
        manifest = json.loads((tiny_run / "run.json").read_text())
        assert manifest["command"] == "train"
        cfg = manifest["config"]
        assert cfg["train"]["loss"]["mode"] == "weighted_cl_attention"
        assert cfg["attack"]["poison_rate"] == 0.04
        assert manifest["inputs"]["data"]["sha256"]

    def test_defense_none_history_lacks_ke_terms(self, tiny_data, tmp_path):
        out = tmp_path / "plain"
        assert run_cli("train", "--out", out, "--data", tiny_data,
                       "--defense", "none", *TINY_TRAIN) == 0
        rows = [json.loads(ln) for ln in
                (out / "train" / "history.jsonl").read_text().splitlines()]
        assert rows
        assert all("cl" in row for row in rows)
        assert all("ke" not in row and "attention" not in row for row in rows)

    def test_seed_determinism(self, tiny_data, tmp_path, tiny_run):
        out = tmp_path / "again"
        assert run_cli("train", "--out", out, "--data", tiny_data,
                       "--attack", "patch", "--rate", "0.04", "--target", "1",
                       "--defense", "weighted-attention", *TINY_TRAIN) == 0
        assert (out / "report.json").read_bytes() == \
            (tiny_run / "report.json").read_bytes()

    def test_nonfinite_loss_aborts_with_exit_3(self, tiny_data, tmp_path,
                                               monkeypatch, capsys):
        import torch

        from semshield import objectives

        real = objectives.compute_losses

        def poisoned_maths(*args, **kw):
            total, comps, lam, scores = real(*args, **kw)
            return total * torch.nan, comps, lam, scores

        monkeypatch.setattr(objectives, "compute_losses", poisoned_maths)
        code = run_cli("train", "--out", tmp_path / "nan", "--data", tiny_data,
                       "--defense", "none", *TINY_TRAIN)
        assert code == 3
        assert "error" in capsys.readouterr().err

    def test_refuses_overwrite_without_force(self, tiny_run, tiny_data):
        assert run_cli("train", "--out", tiny_run, "--data", tiny_data,
                       "--defense", "none", *TINY_TRAIN) == 2

    def test_bad_defense_flag_exits_via_argparse(self, tiny_data, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run_cli("train", "--out", tmp_path / "x", "--data", tiny_data,
                    "--defense", "voodoo", *TINY_TRAIN)
        assert exc.value.code == 2


class TestConfigLayering:
    def test_file_overrides_defaults_and_flags_override_file(self, tmp_path):
        config = tmp_path / "run.yaml"
        config.write_text(
            "train:\n  epochs: 7\n  batch_size: 16\n"
            "dataset:\n  num_samples: 48\n")
        args = cli.build_parser().parse_args(
            ["train", "--out", "x", "--config", str(config), "--epochs", "9"])
        resolved = cli.resolve_config(args)
        assert resolved.train.epochs == 9  # flag wins
        assert resolved.train.batch_size == 16  # file beats default
        assert resolved.dataset.num_samples == 48
        assert resolved.train.base_lr == 1e-4  # untouched default

    def test_flat_key_value_config_files_work(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text(
            "# comment lines are skipped\n"
            "train.loss.mode = weighted_cl_ke\n"
            "train.loss.mu1 = 0.5\n"
            "dataset.num_categories = 4\n"
            "eval_ks = [1, 2]\n")
        args = cli.build_parser().parse_args(
            ["train", "--out", "x", "--config", str(config)])
        resolved = cli.resolve_config(args)
        assert resolved.train.loss.mode == "weighted_cl_ke"
        assert resolved.train.loss.mu1 == 0.5
        assert resolved.dataset.num_categories == 4
        assert resolved.eval_ks == (1, 2)

    def test_defense_flag_maps_onto_modes(self):
        for flag, mode in cli.DEFENSE_MODES.items():
            args = cli.build_parser().parse_args(
                ["train", "--out", "x", "--defense", flag])
            assert cli.resolve_config(args).train.loss.mode == mode

    def test_attack_none_clears_config_file_attack(self, tmp_path):
        config = tmp_path / "run.yaml"
        config.write_text(
            "attack:\n  kind: patch\n  poison_rate: 0.01\n  target_class: 3\n")
        args = cli.build_parser().parse_args(
            ["train", "--out", "x", "--config", str(config),
             "--attack", "none"])
        assert cli.resolve_config(args).attack is None

    def test_non_mapping_config_rejected(self, tmp_path):
        config = tmp_path / "bad.yaml"
        config.write_text("- just\n- a\n- list\n")
        with pytest.raises(ValueError, match="mapping"):
            cli._load_config_file(config)


class TestEval:
    def test_eval_matches_training_report(self, tiny_run, tmp_path):
        out = tmp_path / "eval.json"
        assert run_cli("eval", "--run", tiny_run, "--out", out) == 0
        fresh = evaluation.MetricsReport.load(out)
        trained = evaluation.MetricsReport.load(tiny_run / "report.json")
        assert fresh.hit_at_k == trained.hit_at_k
        assert fresh.recall_at_k == trained.recall_at_k
        assert fresh.trigger_attention_mass == trained.trigger_attention_mass

    def test_eval_requires_a_train_run(self, tiny_data):
        assert run_cli("eval", "--run", tiny_data) == 2


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory, tiny_data):
    out = tmp_path_factory.mktemp("sweep") / "s"
    code = run_cli("sweep", "--axis", "poison_rate", "--values",
                   "0.02,0.04", "--out", out, "--data", tiny_data,
                   "--attack", "patch", "--rate", "0.04", "--target", "1",
                   "--defense", "none", *TINY_TRAIN)
    assert code == 0
    return out


class TestSweepAndReport:
    def test_sweep_csv_rows_match_values(self, sweep_dir):
        rows = evaluation.read_sweep_csv(sweep_dir / "sweep.csv")
        assert [r["value"] for r in rows] == ["0.02", "0.04"]
        assert all(r["axis"] == "poison_rate" for r in rows)

    def test_report_builds_tables_and_plots(self, sweep_dir, tiny_run,
                                            tmp_path):
        out = tmp_path / "rep"
        code = run_cli("report", tiny_run / "report.json",
                       sweep_dir / "sweep.csv", "--out", out)
        assert code == 0
        summary = (out / "summary.csv").read_text().splitlines()
        assert len(summary) == 2  # header + one report row
        assert (out / "sweep.png").stat().st_size > 0

    def test_report_regeneration_is_byte_identical(self, sweep_dir, tiny_run,
                                                   tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert run_cli("report", tiny_run / "report.json",
                           sweep_dir / "sweep.csv", "--out", out) == 0
            outs.append(out)
        for filename in ("summary.csv", "sweep.png"):
            assert (outs[0] / filename).read_bytes() == \
                (outs[1] / filename).read_bytes()

    def test_report_needs_known_inputs(self, tmp_path):
        assert run_cli("report", tmp_path / "nothing.txt",
                       "--out", tmp_path / "rep") == 2


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "semshield.cli", "gen-data", "--help"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "--n" in proc.stdout
