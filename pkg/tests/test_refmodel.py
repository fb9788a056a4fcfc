import json

import numpy as np
import pytest

from potvit.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from potvit.dataset import DatasetConfig, make_dataset
from potvit.numerics import Rng
from potvit.refmodel import (
    ModelConfig,
    accuracy,
    forward,
    init_model,
    loss_and_gradient,
    train,
    weight_layer_names,
)


class TestModelConfig:
    def test_head_dim_must_be_power_of_four(self):
        ModelConfig(dim=32, heads=2)  # head_dim 16 = 4^2
        with pytest.raises(ValueError):
            ModelConfig(dim=16, heads=2)  # head_dim 8

    def test_dim_divisible_by_heads(self):
        with pytest.raises(ValueError):
            ModelConfig(dim=30, heads=4)

    def test_json_roundtrip(self, tmp_path):
        cfg = ModelConfig(layers=1, heads=2, dim=32)
        cfg.to_json(tmp_path / "m.json")
        assert ModelConfig.from_json(tmp_path / "m.json") == cfg

    def test_weight_layer_names_order(self):
        names = weight_layer_names(ModelConfig(layers=1))
        assert names[0] == "embed.w" and names[-1] == "head.w"
        assert len(names) == 8


class TestForward:
    def test_trace_covers_every_quantization_point(self, model):
        x = np.zeros((16, 16), np.float32)
        logits, trace = forward(model, x)
        assert logits.shape == (4,)
        for key in (
            "embed.in",
            "embed.out",
            "block0.ln1.in",
            "block0.ln1.out",
            "block0.q",
            "block0.attn.logits",
            "block0.attn.map",
            "block0.attn.out",
            "block0.msa.out",
            "block0.res1",
            "block0.ln2.out",
            "block0.fc1.out",
            "block0.gelu.out",
            "block0.fc2.out",
            "block0.res2",
            "final_ln.in",
            "final_ln.out",
            "logits",
        ):
            assert key in trace

    def test_batched_matches_single(self, model, rng):
        xs = rng.normal(size=(3, 16, 16)).astype(np.float32)
        batch_logits, _ = forward(model, xs)
        for i in range(3):
            single, _ = forward(model, xs[i])
            assert np.allclose(batch_logits[i], single, atol=1e-5)

    def test_rejects_bad_shape(self, model):
        with pytest.raises(ValueError):
            forward(model, np.zeros((5, 7)))

    def test_softmax_rows_sum_to_one(self, model, rng):
        _, trace = forward(model, rng.normal(size=(16, 16)).astype(np.float32))
        sums = trace["block0.attn.map"].sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-6)


class TestGradient:
    def test_finite_difference(self, dataset):
        cfg = ModelConfig(layers=1)
        model = init_model(cfg, Rng(1))
        x, y = dataset.train[0][:8], dataset.train[1][:8]
        _, grads = loss_and_gradient(model, x, y)
        rng = np.random.default_rng(0)
        for name in ("embed.w", "block0.wq", "block0.fc2", "head.w", "block0.ln1.gamma"):
            w = model.params[name]
            idx = tuple(rng.integers(0, s) for s in w.shape)
            eps = 1e-4
            orig = w[idx]
            w[idx] = orig + eps
            lp, _ = loss_and_gradient(model, x, y)
            w[idx] = orig - eps
            lm, _ = loss_and_gradient(model, x, y)
            w[idx] = orig
            fd = (lp - lm) / (2 * eps)
            rel = abs(fd - grads[name][idx]) / max(abs(fd), 1e-8)
            assert rel < 1e-2, f"{name}: fd {fd} vs {grads[name][idx]}"


class TestTrain:
    def test_reaches_high_validation_accuracy(self, model, dataset):
        assert model.meta["val_acc"] >= 0.95

    def test_deterministic(self, dataset):
        cfg = ModelConfig(layers=1)
        a = train(cfg, dataset, epochs=2, seed=11)
        b = train(cfg, dataset, epochs=2, seed=11)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_accuracy_helper(self, model, dataset):
        vx, vy = dataset.val
        assert accuracy(model, vx, vy) == model.meta["val_acc"]


class TestCheckpoint:
    def test_roundtrip_exact(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == model.config
        assert loaded.meta == model.meta
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_corrupt_manifest(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "c")
        (tmp_path / "c" / "manifest.json").write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")

    def test_truncated_blob(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "c")
        blob = (tmp_path / "c" / "weights.bin").read_bytes()
        (tmp_path / "c" / "weights.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")

    def test_unsupported_dtype(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "c")
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        manifest["tensors"][0]["dtype"] = "f64"
        (tmp_path / "c" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")
