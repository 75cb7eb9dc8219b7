# tests/test_transfer.py
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from t3d.architectures import build, get_preset
from t3d.autograd import NodeGraph, backward
from t3d.checkpoint import save_checkpoint
from t3d.common import SpecError
from t3d.config import load_config
from t3d.data import generate_dataset, make_pairs
from t3d.models.network import Network3D
from t3d.schemas import ArchSpec, PoolSpec, StageSpec, StemSpec, TrainConfig, TransferConfig
from t3d.transfer import (
    FrameEncoder2D,
    TransferHead,
    finetune,
    load_teacher,
    pair_accuracy,
    pair_logits,
    parameter_digest,
    pretrain_teacher,
    save_teacher,
    summarize,
    teacher_embed,
    transfer_train,
    write_comparison,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def frame_spec():
    return ArchSpec(
        name="micro-2d",
        growth=2,
        bottleneck_factor=2,
        stem=StemSpec(channels=4, spatial=3, pool=PoolSpec(mode="max", kernel=(1, 2, 2), stride=(1, 2, 2))),
        stages=[StageSpec(layers=1, transition="transition"), StageSpec(layers=1)],
        num_classes=4,
        input_shape=(3, 1, 16, 16),
        spatial_only=True,
    )


@pytest.fixture
def teacher(frame_spec):
    return FrameEncoder2D(Network3D(frame_spec, np.random.default_rng(0)), embed_dim=8).freeze().eval()


@pytest.fixture
def xcfg():
    return TransferConfig(
        embed_dim=8,
        fc_sizes=(6, 4),
        num_pairs=16,
        eval_pairs=8,
        train=TrainConfig(lr0=0.05, batch_size=8, max_epochs=2, quiet=True),
    )


class TestTeacherEmbed:
    def test_identical_frames(self, teacher, rng):
        frame = rng.standard_normal((3, 1, 16, 16)).astype(np.float32)
        repeated = np.repeat(frame, 4, axis=1)
        np.testing.assert_allclose(teacher_embed(repeated, teacher), teacher_embed(frame, teacher), rtol=1e-5, atol=1e-6)

    def test_order_invariant(self, teacher, rng):
        frames = rng.standard_normal((2, 3, 4, 16, 16)).astype(np.float32)
        shuffled = frames[:, :, [2, 0, 3, 1]]
        np.testing.assert_allclose(teacher_embed(shuffled, teacher), teacher_embed(frames, teacher), rtol=1e-5, atol=1e-6)

    def test_single_frame_is_encoder_output(self, teacher, rng):
        frame = rng.standard_normal((1, 3, 1, 16, 16)).astype(np.float32)
        g = NodeGraph()
        direct = teacher(g, g.leaf(frame)).value
        np.testing.assert_allclose(teacher_embed(frame, teacher), direct, rtol=1e-6)

    def test_shapes(self, teacher, rng):
        assert teacher_embed(rng.standard_normal((3, 2, 16, 16)).astype(np.float32), teacher).shape == (8,)
        assert teacher_embed(rng.standard_normal((5, 3, 2, 16, 16)).astype(np.float32), teacher).shape == (5, 8)

    def test_requires_spatial_only(self, micro_spec):
        with pytest.raises(SpecError):
            FrameEncoder2D(build(micro_spec), embed_dim=8)

    def test_save_and_load(self, tmp_path, teacher, rng):
        path = save_teacher(teacher, tmp_path / "teacher.ckpt")
        again = load_teacher(path)
        frames = rng.standard_normal((2, 3, 3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(teacher_embed(frames, again), teacher_embed(frames, teacher))
        assert all(not p.requires_grad for p in again.parameters())

    def test_load_rejects_plain_checkpoint(self, tmp_path, micro_spec):
        path = save_checkpoint(build(micro_spec), tmp_path / "plain.ckpt")
        with pytest.raises(SpecError):
            load_teacher(path)

    def test_pretrain_freezes(self, store, sampler, frame_spec, monkeypatch, xcfg):
        monkeypatch.setattr("t3d.transfer.get_preset", lambda name: frame_spec)
        cfg = xcfg.model_copy(update={"teacher_epochs": 1})
        trained, hist = pretrain_teacher(store, sampler, cfg, seed=0)
        assert len(hist.records) == 1
        assert not trained.training
        assert all(not p.requires_grad for p in trained.parameters())


class TestTransfer:
    def test_teacher_untouched(self, teacher, micro_spec, store, sampler, rng, xcfg):
        student = build(micro_spec, seed=0)
        pairs = make_pairs(store, 2, rng, 16, sampler, split="train")
        before_t, before_s = parameter_digest(teacher), parameter_digest(student)
        result = transfer_train(teacher, student, pairs, xcfg, max_steps=3)
        assert result.steps == 3
        assert parameter_digest(teacher) == before_t
        assert parameter_digest(student) != before_s

    def test_teacher_gets_no_gradient(self, teacher, micro_spec, store, sampler, rng):
        student = build(micro_spec, seed=0)
        head = TransferHead(student.feature_dim, teacher.embed_dim, (6, 4), rng)
        frames, clips, labels = make_pairs(store, 2, rng, 4, sampler).arrays()
        g = NodeGraph()
        loss = g.softmax_cross_entropy(pair_logits(g, teacher, student, head, frames, clips), labels)
        backward(g, loss)
        assert all(not np.any(g.grad_of(p)) for p in teacher.parameters())
        assert any(np.any(g.grad_of(p)) for p in student.parameters())
        assert any(np.any(g.grad_of(p)) for p in head.parameters())

    def test_history_and_csv(self, tmp_path, teacher, micro_spec, store, sampler, rng, xcfg):
        pairs = make_pairs(store, 2, rng, 16, sampler, split="train")
        evals = make_pairs(store, 2, rng, 8, sampler, split="val")
        result = transfer_train(teacher, build(micro_spec), pairs, xcfg, eval_pairs=evals, out_dir=tmp_path)
        assert [r.split for r in result.history.records] == ["train", "val", "train", "val"]
        assert result.steps == 4
        with (tmp_path / "pair_accuracy.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) == 4

    def test_fresh_head_near_chance(self, teacher, micro_spec, store, sampler, rng):
        pairs = make_pairs(store, 2, rng, 64, sampler)
        assert pairs.labels.mean() == 0.5
        accs = []
        for seed in range(5):
            student = build(micro_spec, seed=seed)
            head = TransferHead(student.feature_dim, teacher.embed_dim, (6, 4), np.random.default_rng(seed))
            loss, acc = pair_accuracy(teacher, student, head, pairs)
            assert np.isfinite(loss)
            assert student.training
            accs.append(acc)
        assert 0.35 <= float(np.mean(accs)) <= 0.65

    @pytest.mark.slow
    def test_teacher_untouched_over_200_steps(self, teacher, micro_spec, store, sampler, rng, xcfg):
        student = build(micro_spec, seed=0)
        pairs = make_pairs(store, 2, rng, 16, sampler, split="train")
        cfg = xcfg.model_copy(update={"train": xcfg.train.model_copy(update={"max_epochs": 100})})
        before = parameter_digest(teacher)
        result = transfer_train(teacher, student, pairs, cfg, max_steps=200)
        assert result.steps == 200
        assert parameter_digest(teacher) == before


class TestFinetune:
    def test_zero_epochs_unchanged(self, micro_spec, store, sampler):
        model = build(micro_spec, seed=3)
        before = parameter_digest(model)
        out, hist = finetune(model, store, TrainConfig(max_epochs=0), sampler)
        assert out is model and not hist.records
        assert parameter_digest(model) == before

    def test_class_mismatch(self, micro_spec, store, sampler):
        with pytest.raises(SpecError):
            finetune(build(micro_spec), store, TrainConfig(max_epochs=1), sampler, num_classes=5)

    def test_new_head(self, micro_spec, store, sampler, quick_train):
        model = build(micro_spec.model_copy(update={"num_classes": 2}), seed=0)
        model, hist = finetune(model, store, quick_train, sampler)
        assert model.num_classes == 8 and model.spec.num_classes == 8
        assert hist.init == "transfer" and hist.final("val") is not None

    def test_new_head_keeps_transferred_norm(self, micro_spec):
        model = build(micro_spec.model_copy(update={"num_classes": 2}), seed=0)
        norm = model.classifier.norm
        norm.gamma.data[...] = 2.0
        norm.stats.mean[...] = 0.3
        old_fc = model.classifier.fc
        model.reset_classifier(8, np.random.default_rng(1))
        assert model.classifier.norm is norm
        np.testing.assert_array_equal(norm.gamma.data, 2.0)
        np.testing.assert_array_equal(norm.stats.mean, 0.3)
        assert model.classifier.fc is not old_fc and model.classifier.fc.out_features == 8
        np.testing.assert_array_equal(model.classifier.fc.bias.data, 0.0)
        assert model.num_parameters() == build(micro_spec, seed=0).num_parameters()

    def test_comparison_file(self, tmp_path, micro_spec, store, sampler, quick_train):
        _, a = finetune(build(micro_spec, seed=0), store, quick_train, sampler)
        _, b = finetune(build(micro_spec, seed=1), store, quick_train, sampler, init="scratch")
        path = write_comparison({"transfer": a, "scratch": b}, tmp_path / "cmp.csv")
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert {r["init"] for r in rows} == {"transfer", "scratch"}
        assert [r["init"] for r in summarize({"transfer": a, "scratch": b})] == ["transfer", "scratch"]


@pytest.mark.slow
def test_toy_transfer_reaches_pair_accuracy(tmp_path):
    cfg = load_config(CONFIGS / "tiny.toml")
    store = generate_dataset(cfg.data, root=tmp_path / "data")
    sampler = cfg.sampler
    xcfg = cfg.transfer
    rng = np.random.default_rng(0)
    teacher, _ = pretrain_teacher(store, sampler, xcfg, seed=0)
    student = build(get_preset("tiny-t3d"), seed=0)
    X = xcfg.frames or sampler.clip_len
    pairs = make_pairs(store, X, rng, xcfg.num_pairs, sampler, split="train")
    evals = make_pairs(store, X, rng, xcfg.eval_pairs, sampler, split="val")
    result = transfer_train(teacher, student, pairs, xcfg.model_copy(update={"train": xcfg.train.model_copy(update={"quiet": True})}), eval_pairs=evals)
    assert result.history.best_accuracy >= 0.9
