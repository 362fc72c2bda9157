import dataclasses
import hashlib
import math

import numpy as np
import pytest
import torch

from semshield import data, encoders, knowledge, objectives, training


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    spec = data.DatasetSpec(num_samples=128, num_categories=16, seed=3)
    samples = data.generate_dataset(spec, root)
    return root, samples


def _fresh_model(samples, seed=0):
    texts = [s.caption for s in samples] + [k for s in samples for k in s.kes]
    cfg = encoders.EncoderConfig(vocab=encoders.build_vocab(texts).tokens)
    return encoders.make_dual_encoder(cfg, seed=training.stream_seed(seed, "init"))


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert training.cosine_lr(0, 100, 1e-4) == 1e-4
        assert training.cosine_lr(100, 100, 1e-4) == pytest.approx(0.0, abs=1e-20)
        assert training.cosine_lr(50, 100, 1e-4) == pytest.approx(5e-5, rel=1e-12)

    def test_zero_total_rejected(self):
        with pytest.raises(ValueError):
            training.cosine_lr(0, 0, 1e-4)

    def test_step_bounds(self):
        with pytest.raises(ValueError):
            training.cosine_lr(-1, 10, 1e-4)
        with pytest.raises(ValueError):
            training.cosine_lr(11, 10, 1e-4)


class TestTrainConfig:
    def test_defaults_match_contract(self):
        cfg = training.TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.base_lr) == (30, 128, 1e-4)
        assert cfg.weight_decay == 0.2
        assert cfg.pretrain_epochs == 10

    def test_validation(self):
        with pytest.raises(ValueError):
            training.TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            training.TrainConfig(base_lr=0)
        with pytest.raises(ValueError):
            training.TrainConfig(ke_encoder="what")


class TestTrainingHistory:
    def test_monotone_steps_enforced(self):
        h = training.TrainingHistory()
        h.append_step({"step": 0, "total": 1.0})
        h.append_step({"step": 1, "total": 0.9})
        with pytest.raises(ValueError):
            h.append_step({"step": 1, "total": 0.8})

    def test_save_load_round_trip(self, tmp_path):
        h = training.TrainingHistory()
        h.append_step({"step": 0, "total": 1.25, "lr": 1e-4})
        h.epochs.append({"epoch": 0, "hit_at_1": 0.5})
        h.save(tmp_path / "h.jsonl")
        back = training.TrainingHistory.load(tmp_path / "h.jsonl")
        assert back.steps == h.steps
        assert back.epochs == h.epochs


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, small_corpus, tmp_path):
        _, samples = small_corpus
        model = _fresh_model(samples)
        a = tmp_path / "a.zip"
        training.save_checkpoint(model, a, extra={"note": 1})
        back, meta = training.load_checkpoint(a)
        b = tmp_path / "b.zip"
        training.save_checkpoint(back, b, extra=meta["extra"])
        assert _sha(a) == _sha(b)

    def test_loaded_model_reproduces_outputs(self, small_corpus, tmp_path):
        root, samples = small_corpus
        model = _fresh_model(samples)
        training.save_checkpoint(model, tmp_path / "m.zip")
        back, _ = training.load_checkpoint(tmp_path / "m.zip")
        img = data.load_image(root / samples[0].image_path)[None]
        _, ie_a, _ = model.encode_image(img)
        _, ie_b, _ = back.encode_image(img)
        assert torch.equal(ie_a, ie_b)

    def test_version_gate(self, small_corpus, tmp_path):
        _, samples = small_corpus
        model = _fresh_model(samples)
        path = tmp_path / "m.zip"
        training.save_checkpoint(model, path)
        import json
        import zipfile
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            params = zf.read("params.bin")
        meta["format_version"] = 99
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("meta.json", json.dumps(meta))
            zf.writestr("params.bin", params)
        with pytest.raises(ValueError, match="version"):
            training.load_checkpoint(path)


def _quick_cfg(**kwargs):
    defaults = dict(epochs=2, batch_size=32, pretrain_epochs=1, seed=0)
    defaults.update(kwargs)
    return training.TrainConfig(**defaults)


class TestPretrainClean:
    def test_zero_epochs_keeps_initialization(self, small_corpus, tmp_path):
        root, samples = small_corpus
        model = _fresh_model(samples)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        cfg = _quick_cfg(pretrain_epochs=0)
        history, _ = training.pretrain_clean(model, samples, root, cfg)
        assert history.steps == []
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v)

    def test_rejects_poisoned_samples(self, small_corpus):
        root, samples = small_corpus
        tainted = [dataclasses.replace(samples[0], poisoned=True)] + samples[1:]
        with pytest.raises(ValueError, match="poisoned"):
            training.pretrain_clean(_fresh_model(samples), tainted, root, _quick_cfg())

    def test_same_seed_bit_identical_checkpoints(self, small_corpus, tmp_path):
        root, samples = small_corpus
        cfg = _quick_cfg()
        for sub in ("x", "y"):
            model = _fresh_model(samples, seed=5)
            training.pretrain_clean(model, samples, root, cfg,
                                    out_dir=tmp_path / sub)
        assert _sha(tmp_path / "x" / "pretrain.zip") == _sha(tmp_path / "y" / "pretrain.zip")

    def test_default_warmup_trains_knowledge_alignment(self, small_corpus):
        root, samples = small_corpus
        model = _fresh_model(samples)
        history, _ = training.pretrain_clean(model, samples, root, _quick_cfg())
        assert history.steps
        for record in history.steps:
            assert set(record) == {"step", "epoch", "lr", "total", "cl", "ke",
                                   "attention", "weighted_cl", "lam_clean"}

    def test_contrastive_only_warmup_history(self, small_corpus):
        root, samples = small_corpus
        model = _fresh_model(samples)
        cfg = _quick_cfg(pretrain_mode="cl")
        history, _ = training.pretrain_clean(model, samples, root, cfg)
        assert history.steps
        for record in history.steps:
            assert set(record) == {"step", "epoch", "lr", "total", "cl"}

    def test_lr_schedule_starts_at_base(self, small_corpus):
        root, samples = small_corpus
        model = _fresh_model(samples)
        history, _ = training.pretrain_clean(model, samples, root, _quick_cfg())
        assert history.steps[0]["lr"] == pytest.approx(1e-4)


class TestTrain:
    def _table(self, samples, model, **kwargs):
        return knowledge.build_ke_table(samples, training.frozen_ke_encoder(model),
                                        **kwargs)

    def test_cl_mode_history_has_no_ke_entries(self, small_corpus):
        root, samples = small_corpus
        model = _fresh_model(samples)
        cfg = _quick_cfg(loss=objectives.LossConfig(mode="cl"))
        history = training.train(model, samples, root, cfg,
                                 ke_table=self._table(samples, model))
        for record in history.steps:
            assert "ke" not in record and "attention" not in record

    def test_defended_mode_logs_lambda_split(self, small_corpus):
        root, samples = small_corpus
        tainted = [dataclasses.replace(s, poisoned=(i % 8 == 0))
                   for i, s in enumerate(samples)]
        model = _fresh_model(samples)
        cfg = _quick_cfg(loss=objectives.LossConfig(mode="weighted_cl_attention"))
        history = training.train(model, tainted, root, cfg,
                                 ke_table=self._table(samples, model))
        assert any("lam_poisoned" in r for r in history.steps)
        assert all("lam_clean" in r for r in history.steps)

    def test_missing_table_rejected_for_ke_modes(self, small_corpus):
        root, samples = small_corpus
        model = _fresh_model(samples)
        cfg = _quick_cfg(loss=objectives.LossConfig(mode="cl_ke"))
        with pytest.raises(ValueError, match="KE table"):
            training.train(model, samples, root, cfg)

    def test_unit_weight_ablation_matches_plain_contrastive(self, small_corpus):
        root, samples = small_corpus
        cfg_w = _quick_cfg(
            loss=objectives.LossConfig(mode="weighted_cl_attention", mu2=0.0),
            force_unit_weights=True)
        cfg_cl = _quick_cfg(loss=objectives.LossConfig(mode="cl"))
        model_w = _fresh_model(samples, seed=1)
        table = self._table(samples, model_w)
        hist_w = training.train(model_w, samples, root, cfg_w, ke_table=table)
        model_cl = _fresh_model(samples, seed=1)
        hist_cl = training.train(model_cl, samples, root, cfg_cl)
        assert len(hist_w.steps) == len(hist_cl.steps)
        for a, b in zip(hist_w.steps, hist_cl.steps):
            assert abs(a["total"] - b["total"]) <= 1e-6

    def test_identical_runs_are_identical(self, small_corpus, tmp_path):
        root, samples = small_corpus
        cfg = _quick_cfg(loss=objectives.LossConfig(mode="weighted_cl_attention_ke"))
        results = []
        for sub in ("r1", "r2"):
            model = _fresh_model(samples, seed=2)
            table = self._table(samples, model)
            history = training.train(model, samples, root, cfg, ke_table=table,
                                     out_dir=tmp_path / sub)
            results.append((history, model))
        h1, m1 = results[0]
        h2, m2 = results[1]
        assert h1.steps == h2.steps
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)
        assert _sha(tmp_path / "r1" / "model.zip") == _sha(tmp_path / "r2" / "model.zip")

    def test_per_pair_regime_runs(self, small_corpus):
        root, samples = small_corpus
        model = _fresh_model(samples)
        table = self._table(samples, model, per_sample=True)
        cfg = _quick_cfg(loss=objectives.LossConfig(mode="cl_ke", regime="per_pair"))
        history = training.train(model, samples, root, cfg, ke_table=table)
        assert all(math.isfinite(r["total"]) for r in history.steps)

    def test_live_ke_encoder_runs_and_differs(self, small_corpus):
        root, samples = small_corpus
        cfg_live = _quick_cfg(ke_encoder="live",
                              loss=objectives.LossConfig(mode="cl_ke"))
        cfg_frozen = _quick_cfg(loss=objectives.LossConfig(mode="cl_ke"))
        outs = {}
        for name, cfg in (("live", cfg_live), ("frozen", cfg_frozen)):
            model = _fresh_model(samples, seed=3)
            table = self._table(samples, model)
            outs[name] = training.train(model, samples, root, cfg, ke_table=table)
        live_ke = [r["ke"] for r in outs["live"].steps]
        frozen_ke = [r["ke"] for r in outs["frozen"].steps]
        assert live_ke[0] == pytest.approx(frozen_ke[0], rel=1e-6)  # same start point
        assert live_ke[-1] != pytest.approx(frozen_ke[-1], rel=1e-6)

    def test_divergence_guard(self, small_corpus, monkeypatch):
        root, samples = small_corpus
        model = _fresh_model(samples)

        def exploding(*args, **kwargs):
            bad = torch.tensor(float("nan"), requires_grad=True)
            return bad, {"cl": bad}, None, None

        monkeypatch.setattr(objectives, "compute_losses", exploding)
        with pytest.raises(RuntimeError, match="diverged"):
            training.train(model, samples, root, _quick_cfg())

    def test_epoch_hook_snapshots(self, small_corpus):
        root, samples = small_corpus
        model = _fresh_model(samples)
        history = training.train(model, samples, root, _quick_cfg(),
                                 epoch_hook=lambda m, e: {"probe": e * 10})
        assert [r["probe"] for r in history.epochs] == [0, 10]
