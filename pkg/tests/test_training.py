# tests/test_training.py
from __future__ import annotations

import csv
import math
import threading
from pathlib import Path

import numpy as np
import pytest

import t3d.training as training
from t3d.architectures import BASELINES, build, get_preset
from t3d.autograd import NodeGraph
from t3d.common import NumericError, SpecError
from t3d.config import load_config
from t3d.data import generate_dataset
from t3d.models.layers import Parameter
from t3d.schemas import TrainConfig
from t3d.training import (
    METRIC_FIELDS,
    PREFETCH_THREAD,
    Plateau,
    SGDState,
    StepEvery,
    compare_architectures,
    make_schedule,
    prefetched,
    sgd_step,
    train,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _prefetch_threads():
    return sum(t.name == PREFETCH_THREAD and t.is_alive() for t in threading.enumerate())


def _param(value, decay=True):
    return Parameter(np.array([value], dtype=np.float64), decay=decay, name="w")


class TestSGD:
    def test_nesterov_first_step(self):
        p = _param(0.0)
        state = SGDState.zeros([p])
        sgd_step([p], [np.array([1.0])], state, TrainConfig(weight_decay=0.0, momentum=0.9), lr=0.1)
        assert state.velocity[0][0] == pytest.approx(1.0)
        assert p.data[0] == pytest.approx(-0.19)

    def test_zero_momentum_is_vanilla(self):
        p = _param(2.0)
        cfg = TrainConfig(weight_decay=0.0, momentum=0.0)
        sgd_step([p], [np.array([0.5])], SGDState.zeros([p]), cfg, lr=0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.05)

    def test_plain_momentum(self):
        p = _param(0.0)
        cfg = TrainConfig(weight_decay=0.0, momentum=0.9, nesterov=False)
        state = SGDState.zeros([p])
        sgd_step([p], [np.array([1.0])], state, cfg, lr=0.1)
        sgd_step([p], [np.array([1.0])], state, cfg, lr=0.1)
        assert p.data[0] == pytest.approx(-0.1 - 0.19)

    def test_weight_decay_only(self):
        p = _param(1.0)
        cfg = TrainConfig(weight_decay=1e-4, momentum=0.0)
        sgd_step([p], [np.array([0.0])], SGDState.zeros([p]), cfg, lr=0.1)
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 1e-4, rel=0, abs=1e-15)

    def test_decay_shrinks_unused_weight(self):
        p = _param(-3.0)
        cfg = TrainConfig(weight_decay=1e-2)
        state = SGDState.zeros([p])
        last = abs(p.data[0])
        for _ in range(20):
            sgd_step([p], [np.zeros(1)], state, cfg, lr=0.1)
            assert abs(p.data[0]) < last
            last = abs(p.data[0])

    def test_bn_parameters_not_decayed(self):
        p = _param(1.0, decay=False)
        sgd_step([p], [np.zeros(1)], SGDState.zeros([p]), TrainConfig(weight_decay=0.5), lr=0.1)
        assert p.data[0] == 1.0

    def test_zero_lr_bit_identical(self, micro_spec, rng):
        model = build(micro_spec, seed=0)
        params = model.parameters()
        before = [p.data.copy() for p in params]
        state = SGDState([rng.standard_normal(p.shape).astype(p.data.dtype) for p in params])
        grads = [rng.standard_normal(p.shape).astype(p.data.dtype) for p in params]
        sgd_step(params, grads, state, TrainConfig(), lr=0.0)
        for b, p in zip(before, params):
            assert np.array_equal(b, p.data)

    def test_nan_gradient_moves_nothing(self):
        a, b = _param(1.0), _param(2.0)
        with pytest.raises(NumericError) as err:
            sgd_step([a, b], [np.array([0.1]), np.array([np.nan])], SGDState.zeros([a, b]), TrainConfig(), lr=0.1)
        assert a.data[0] == 1.0 and b.data[0] == 2.0
        assert err.value.detail["nonfinite"] == 1

    def test_frozen_parameter_skipped(self):
        p = _param(1.0)
        p.requires_grad = False
        sgd_step([p], [np.array([5.0])], SGDState.zeros([p]), TrainConfig(), lr=0.1)
        assert p.data[0] == 1.0

    def test_length_mismatch(self):
        p = _param(1.0)
        with pytest.raises(SpecError):
            sgd_step([p], [], SGDState.zeros([p]), TrainConfig(), lr=0.1)


class TestSchedules:
    def test_step_every(self):
        s = StepEvery(0.1, 30)
        assert [s.lr(e) for e in (0, 29, 30, 60)] == pytest.approx([0.1, 0.1, 0.01, 0.001])

    def test_plateau(self):
        s = Plateau(0.1, patience=2)
        lrs = []
        for loss in [1.0, 0.9, 0.9, 0.9]:
            lrs.append(s.lr(len(lrs)))
            s.observe(loss)
        assert lrs == [0.1, 0.1, 0.1, 0.1]
        assert s.lr(4) == pytest.approx(0.01)

    def test_plateau_small_gain_is_no_gain(self):
        s = Plateau(0.1, patience=1, threshold=1e-2)
        s.observe(1.0)
        s.observe(0.995)
        assert s.lr(2) == pytest.approx(0.01)

    def test_make_schedule(self):
        assert isinstance(make_schedule(TrainConfig(schedule="plateau")), Plateau)
        assert isinstance(make_schedule(TrainConfig()), StepEvery)


class TestLoss:
    @pytest.mark.parametrize("classes", [2, 8, 400])
    def test_uniform_logits(self, classes):
        g = NodeGraph()
        loss = g.softmax_cross_entropy(g.leaf(np.zeros((3, classes))), np.array([0, 1, 1]))
        assert float(loss.value.reshape(-1)[0]) == pytest.approx(math.log(classes), rel=1e-6)


class TestPrefetch:
    def test_order_kept(self):
        assert list(prefetched(iter(range(10)), 2)) == list(range(10))

    def test_error_surfaces(self):
        def broken():
            yield 1
            raise ValueError("bad clip")

        with pytest.raises(ValueError):
            list(prefetched(broken(), 1))

    def test_early_close_stops_producer(self):
        it = prefetched(iter(range(100)), 2, poll=0.01)
        assert next(it) == 0
        assert _prefetch_threads() == 1
        it.close()
        assert _prefetch_threads() == 0


class TestTrainLoop:
    def test_outputs(self, tmp_path, micro_spec, store, sampler, quick_train):
        model = build(micro_spec, seed=0)
        hist = train(model, store, quick_train, sampler, out_dir=tmp_path)
        assert [r.split for r in hist.records] == ["train", "val"]
        assert hist.best_epoch == 0
        assert (tmp_path / "best.ckpt").is_file() and (tmp_path / "last.ckpt").is_file()
        with (tmp_path / "metrics.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == METRIC_FIELDS
        assert [r["split"] for r in rows] == ["train", "val"]

    def test_reproducible(self, micro_spec, store, sampler, quick_train):
        cfg = quick_train.model_copy(update={"max_epochs": 2})
        a = train(build(micro_spec, seed=0), store, cfg, sampler)
        b = train(build(micro_spec, seed=0), store, cfg, sampler)
        for ra, rb in zip(a.records, b.records):
            assert ra.loss == pytest.approx(rb.loss, abs=1e-6)
            assert ra.accuracy == rb.accuracy

    def test_prefetch_matches_inline(self, micro_spec, store, sampler, quick_train):
        a = train(build(micro_spec, seed=0), store, quick_train, sampler)
        b = train(build(micro_spec, seed=0), store, quick_train.model_copy(update={"prefetch": 2}), sampler)
        assert a.final("val").loss == pytest.approx(b.final("val").loss, abs=1e-6)

    def test_class_mismatch(self, micro_spec, store, sampler, quick_train):
        model = build(micro_spec.model_copy(update={"num_classes": 3}), seed=0)
        with pytest.raises(SpecError):
            train(model, store, quick_train, sampler)

    @pytest.mark.parametrize("prefetch", [0, 1])
    def test_divergence_keeps_last_good(self, tmp_path, monkeypatch, micro_spec, store, sampler, quick_train, prefetch):
        model = build(micro_spec, seed=0)
        start = model.state_dict()
        real = training.sgd_step
        calls = []

        def flaky(params, grads, state, cfg, lr):
            calls.append(1)
            if len(calls) == 2:
                grads = [np.full_like(g, np.nan) for g in grads]
            real(params, grads, state, cfg, lr)

        monkeypatch.setattr(training, "sgd_step", flaky)
        with pytest.raises(NumericError) as err:
            train(model, store, quick_train.model_copy(update={"prefetch": prefetch}), sampler, out_dir=tmp_path)
        assert err.value.detail["epoch"] == 0 and err.value.detail["step"] == 1
        assert _prefetch_threads() == 0
        assert (tmp_path / "last_good.ckpt").is_file()
        after = model.state_dict()
        assert all(np.array_equal(start[k], after[k]) for k in start)

    def test_compare_architectures(self, tmp_path, micro_spec, store, sampler, quick_train):
        rows = compare_architectures({"micro": micro_spec}, store, quick_train, sampler, seeds=[0, 1], out_dir=tmp_path)
        assert [r["seed"] for r in rows] == [0, 1, "mean"]
        assert rows[-1]["final_val_accuracy"] == pytest.approx(np.mean([r["final_val_accuracy"] for r in rows[:2]]))
        assert (tmp_path / "summary.csv").is_file()
        assert (tmp_path / "micro-seed1" / "metrics.csv").is_file()


@pytest.mark.slow
def test_tiny_t3d_learns_synthetic_motion(tmp_path):
    cfg = load_config(CONFIGS / "tiny.toml")
    store = generate_dataset(cfg.data, root=tmp_path / "data")
    model = build(get_preset("tiny-t3d"), seed=0)
    hist = train(model, store, cfg.train.model_copy(update={"quiet": True}), cfg.sampler)
    assert max(r.accuracy for r in hist.split("train")) >= 0.9
    assert hist.best_accuracy >= 0.8
    assert len(hist.split("val")) <= 50


@pytest.mark.slow
def test_ttl_ablation_three_seeds(tmp_path):
    cfg = load_config(CONFIGS / "ablation.toml")
    store = generate_dataset(cfg.data.model_copy(update={"directions": ["right"]}), root=tmp_path / "data")
    assert store.num_classes == 2
    runs = {"tiny-t3d": get_preset("tiny-t3d"), BASELINES["tiny-t3d"]: get_preset(BASELINES["tiny-t3d"])}
    rows = compare_architectures(
        runs, store, cfg.train.model_copy(update={"quiet": True}), cfg.sampler, seeds=[0, 1, 2], out_dir=tmp_path / "runs"
    )
    for name in runs:
        mine = [r for r in rows if r["arch"] == name]
        assert [r["seed"] for r in mine] == [0, 1, 2, "mean"]
        assert mine[-1]["final_val_accuracy"] >= 0.7, name
    assert (tmp_path / "runs" / "summary.csv").is_file()
