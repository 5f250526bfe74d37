"""Optimizer, schedule, training loop, evaluation, checkpoints, metrics."""

import math

import numpy as np
import pytest

from emograph.errors import DimensionError, EmographError, NumericError, ParseError
from emograph.ingestion import DatasetConfig, split_dataset, synthesize
from emograph.model import FULL_MODE, AblationMode, Model, ModelDims, forward, sample_loss
from emograph.numerics import ParamTensor
from emograph.training import (TrainConfig, adam_step, clone_config, evaluate,
                               load_checkpoint, load_metrics, lr_schedule,
                               save_checkpoint, train, write_metrics)

DESK = DatasetConfig.desk_scale()
DIMS = ModelDims(n=DESK.n, d1=DESK.d1, d2=DESK.d2, d_a=24, depth=2, num_classes=4)


def make_split(n_samples=160, seed=3):
    data = synthesize(DESK, rng_seed=seed, n_samples=n_samples)
    return split_dataset(data.samples, (0.8, 0.1, 0.1), rng_seed=0)


def scalar_param(value, grad):
    p = ParamTensor("w", np.array([float(value)]))
    p.grad[:] = grad
    return p


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        # with fresh moments the bias-corrected ratio m/sqrt(v) is g/|g|
        cfg = TrainConfig(lr=0.01, weight_decay=0.0)
        p = scalar_param(5.0, 3.7)
        adam_step([p], cfg, step_index=1)
        assert abs(p.value[0] - (5.0 - 0.01)) <= 1e-9
        q = scalar_param(5.0, -3.7)
        adam_step([q], cfg, step_index=1)
        assert abs(q.value[0] - (5.0 + 0.01)) <= 1e-9

    def test_matches_scalar_reference_over_four_steps(self):
        cfg = TrainConfig(lr=0.05, weight_decay=0.02)
        p = ParamTensor("w", np.array([1.5]))
        grads = [0.8, -0.3, 0.25, 1.0]
        # textbook update replayed with plain floats
        theta, m, v = 1.5, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p.zero_grad()
            p.grad[:] = g
            adam_step([p], cfg, step_index=t)
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            theta = theta - cfg.lr * m_hat / (math.sqrt(v_hat) + cfg.eps)
            theta = theta * (1.0 - cfg.lr * cfg.weight_decay)
            assert abs(p.value[0] - theta) <= 1e-12

    def test_decay_is_decoupled_and_multiplicative(self):
        with_wd = TrainConfig(lr=0.05, weight_decay=0.1)
        no_wd = TrainConfig(lr=0.05, weight_decay=0.0)
        a = scalar_param(2.0, 0.7)
        b = scalar_param(2.0, 0.7)
        adam_step([a], with_wd, step_index=1)
        adam_step([b], no_wd, step_index=1)
        assert a.value[0] == b.value[0] * (1.0 - 0.05 * 0.1)

    def test_zero_gradient_leaves_value_alone(self):
        cfg = TrainConfig(lr=0.05, weight_decay=0.0)
        p = scalar_param(3.25, 0.0)
        adam_step([p], cfg, step_index=1)
        assert p.value[0] == 3.25

    def test_zero_rate_is_a_noop_but_decay_free(self):
        cfg = TrainConfig(lr=0.05, weight_decay=0.3)
        p = scalar_param(1.75, 2.0)
        adam_step([p], cfg, step_index=1, lr=0.0)
        assert p.value[0] == 1.75

    def test_explicit_rate_overrides_config(self):
        p = scalar_param(1.0, 4.0)
        q = scalar_param(1.0, 4.0)
        adam_step([p], TrainConfig(lr=0.123, weight_decay=0.0), step_index=1)
        adam_step([q], TrainConfig(lr=9.0, weight_decay=0.0), step_index=1, lr=0.123)
        assert p.value[0] == q.value[0]

    def test_step_index_is_one_based(self):
        with pytest.raises(DimensionError):
            adam_step([scalar_param(1.0, 1.0)], TrainConfig(), step_index=0)

    def test_non_finite_gradient_rejected(self):
        p = scalar_param(1.0, float("nan"))
        with pytest.raises(NumericError):
            adam_step([p], TrainConfig(), step_index=1)


class TestSchedule:
    def test_default_schedule_steps_down_every_five_epochs(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 5e-5
        for e in range(5):
            assert lr_schedule(e, cfg) == lr_schedule(0, cfg)
        for e in range(5, 10):
            assert lr_schedule(e, cfg) == lr_schedule(5, cfg)
        assert abs(lr_schedule(5, cfg) / lr_schedule(0, cfg) - 0.1) <= 1e-15
        assert abs(lr_schedule(10, cfg) / lr_schedule(5, cfg) - 0.1) <= 1e-15

    def test_custom_interval_and_factor(self):
        cfg = TrainConfig(lr=1.0, decay_factor=0.5, decay_every=3)
        assert [lr_schedule(e, cfg) for e in range(7)] == [1.0, 1.0, 1.0,
                                                           0.5, 0.5, 0.5, 0.25]

    def test_config_validation(self):
        with pytest.raises(DimensionError):
            TrainConfig(epochs=-1)
        with pytest.raises(DimensionError):
            TrainConfig(batch_size=0)
        with pytest.raises(DimensionError):
            TrainConfig(decay_every=0)
        with pytest.raises(DimensionError):
            TrainConfig(lr=-1e-5)


class TestTrainLoop:
    def test_loss_decreases_and_smoke_convergence(self):
        tr, va, te = make_split()
        cfg = TrainConfig(lr=2e-3, weight_decay=1e-5, decay_factor=0.5,
                          decay_every=10, epochs=15, batch_size=16, seed=1)
        res = train(tr, va, DIMS, cfg)
        assert len(res.metrics) == 15
        assert res.metrics[-1].train_loss < 0.5 * res.metrics[0].train_loss
        assert res.metrics[-1].train_acc >= 0.9
        assert res.best_epoch is not None and res.best_val_acc >= 0.75
        res.restore_best()
        assert evaluate(res.model, te).accuracy >= 0.5

    def test_same_seed_is_bit_identical(self):
        tr, va, _ = make_split(n_samples=64)
        cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=16, seed=9)
        a = train(tr, va, DIMS, cfg)
        b = train(tr, va, DIMS, cfg)
        for ta, tb in zip(a.model.tensors(), b.model.tensors()):
            assert np.array_equal(ta.value, tb.value)
        assert [m.to_json() for m in a.metrics] == [m.to_json() for m in b.metrics]

    def test_different_seed_differs(self):
        tr, va, _ = make_split(n_samples=64)
        a = train(tr, va, DIMS, TrainConfig(lr=1e-3, epochs=2, batch_size=16, seed=9))
        b = train(tr, va, DIMS, TrainConfig(lr=1e-3, epochs=2, batch_size=16, seed=10))
        assert not np.array_equal(a.model.cls_w.value, b.model.cls_w.value)

    def test_zero_epochs_changes_nothing(self):
        tr, va, _ = make_split(n_samples=32)
        cfg = TrainConfig(epochs=0, seed=4)
        res = train(tr, va, DIMS, cfg)
        assert res.metrics == [] and res.best_epoch is None
        fresh = Model.build(DIMS, cfg.mode, seed=4)
        for got, want in zip(res.restore_best().tensors(), fresh.tensors()):
            assert np.array_equal(got.value, want.value)

    def test_zero_rate_keeps_validation_flat_and_best_is_first(self):
        tr, va, _ = make_split(n_samples=48)
        res = train(tr, va, DIMS, TrainConfig(lr=0.0, weight_decay=0.0,
                                              epochs=4, batch_size=16, seed=2))
        accs = [m.val_acc for m in res.metrics]
        assert len(set(accs)) == 1
        assert res.best_epoch == 0
        assert res.best_val_acc == accs[0]

    def test_no_validation_set_keeps_final_weights(self):
        tr, _, _ = make_split(n_samples=32)
        res = train(tr, [], DIMS, TrainConfig(lr=1e-3, epochs=2, batch_size=16, seed=5))
        assert res.best_val_acc is None
        assert res.best_epoch == 1
        final = {t.name: t.value.copy() for t in res.model.tensors()}
        res.restore_best()
        for t in res.model.tensors():
            assert np.array_equal(t.value, final[t.name])

    def test_empty_train_set_rejected(self):
        with pytest.raises(EmographError):
            train([], [], DIMS, TrainConfig())

    def test_non_finite_parameters_abort(self):
        tr, _, _ = make_split(n_samples=16)
        model = Model.build(DIMS, FULL_MODE, seed=0)
        model.cls_w.value[0, 0] = float("nan")
        with pytest.raises(NumericError):
            train(tr, [], DIMS, TrainConfig(epochs=1, batch_size=16), model=model)

    def test_progress_callback_sees_every_epoch(self):
        tr, va, _ = make_split(n_samples=32)
        seen = []
        res = train(tr, va, DIMS, TrainConfig(lr=1e-3, epochs=3, batch_size=16, seed=6),
                    progress=seen.append)
        assert seen == res.metrics

    def test_metrics_file_written_during_training(self, tmp_path):
        tr, va, _ = make_split(n_samples=32)
        path = tmp_path / "metrics.jsonl"
        res = train(tr, va, DIMS, TrainConfig(lr=1e-3, epochs=3, batch_size=16, seed=6),
                    metrics_path=path)
        assert load_metrics(path) == res.metrics


@pytest.fixture(scope="module")
def setup():
    data = synthesize(DESK, rng_seed=11, n_samples=24)
    model = Model.build(DIMS, FULL_MODE, seed=1)
    return model, data.samples


class TestEvaluate:

    def test_confusion_matrix_accounts_for_every_sample(self, setup):
        model, samples = setup
        res = evaluate(model, samples)
        assert int(res.confusion.sum()) == len(samples)
        assert res.accuracy == int(np.trace(res.confusion)) / len(samples)
        for k in range(DIMS.num_classes):
            row = int(res.confusion[k].sum())
            if row:
                assert res.per_class[k] == res.confusion[k, k] / row
            else:
                assert math.isnan(res.per_class[k])

    def test_losses_match_forward_pass_exactly(self, setup):
        model, samples = setup
        res = evaluate(model, samples)
        want = [sample_loss(forward(s, model).probs, s.label) for s in samples]
        assert res.losses == want
        assert res.mean_loss == float(np.mean(want))

    def test_missing_gold_class_yields_nan_row(self, setup):
        model, samples = setup
        kept = [s for s in samples if s.label != 2][:8]
        assert kept
        res = evaluate(model, kept)
        assert math.isnan(res.per_class[2])

    def test_threaded_run_matches_serial_bitwise(self, setup, monkeypatch):
        model, samples = setup
        serial = evaluate(model, samples)
        monkeypatch.setenv("EMOGRAPH_THREADS", "4")
        threaded = evaluate(model, samples)
        assert np.array_equal(serial.confusion, threaded.confusion)
        assert serial.losses == threaded.losses

    def test_empty_sample_set_rejected(self, setup):
        model, _ = setup
        with pytest.raises(EmographError):
            evaluate(model, [])

    def test_out_of_range_label_rejected(self, setup):
        model, samples = setup
        s = samples[0]
        bad = type(s)(image_id=s.image_id, concepts=s.concepts,
                      confidences=s.confidences, visual=s.visual,
                      semantic=s.semantic, scene=s.scene, label=9)
        with pytest.raises(DimensionError):
            evaluate(model, [bad])

    def test_mode_override_is_honored(self, setup):
        # an override must reach every forward call; use_mask is the one
        # toggle that keeps the classifier width unchanged
        model, samples = setup
        unmasked = AblationMode(use_mask=False)
        res = evaluate(model, samples, mode=unmasked)
        want = [sample_loss(forward(s, model, unmasked).probs, s.label)
                for s in samples]
        assert res.losses == want


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = Model.build(DIMS, FULL_MODE, seed=3)
        path = tmp_path / "model.bin"
        save_checkpoint(path, model, meta={"note": "unit", "k": 3})
        loaded, meta = load_checkpoint(path)
        assert meta == {"note": "unit", "k": 3}
        assert loaded.dims == model.dims and loaded.mode == model.mode
        for got, want in zip(loaded.tensors(), model.tensors()):
            assert got.name == want.name
            assert np.array_equal(got.value, want.value)

    def test_save_is_deterministic(self, tmp_path):
        model = Model.build(DIMS, FULL_MODE, seed=3)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(p1, model)
        save_checkpoint(p2, model)
        assert p1.read_bytes() == p2.read_bytes()

    def test_evaluation_survives_round_trip(self, tmp_path):
        data = synthesize(DESK, rng_seed=12, n_samples=16)
        model = Model.build(DIMS, FULL_MODE, seed=4)
        before = evaluate(model, data.samples)
        path = tmp_path / "model.bin"
        save_checkpoint(path, model)
        loaded, _ = load_checkpoint(path)
        after = evaluate(loaded, data.samples)
        assert np.array_equal(before.confusion, after.confusion)
        assert before.losses == after.losses

    def test_reduced_mode_checkpoints_only_its_tensors(self, tmp_path):
        from emograph.model import MODE_NAMES
        model = Model.build(DIMS, MODE_NAMES["scene"], seed=5)
        path = tmp_path / "scene.bin"
        save_checkpoint(path, model)
        loaded, _ = load_checkpoint(path)
        assert [t.name for t in loaded.tensors()] == ["cls_w"]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOT-A-CHECKPOINT" + b"\x00" * 64)
        with pytest.raises(ParseError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        model = Model.build(DIMS, FULL_MODE, seed=3)
        path = tmp_path / "model.bin"
        save_checkpoint(path, model)
        clipped = tmp_path / "clipped.bin"
        clipped.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(ParseError, match="truncated"):
            load_checkpoint(clipped)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = Model.build(DIMS, FULL_MODE, seed=3)
        path = tmp_path / "model.bin"
        save_checkpoint(path, model)
        padded = tmp_path / "padded.bin"
        padded.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ParseError, match="trailing"):
            load_checkpoint(padded)

    def test_garbled_header_rejected(self, tmp_path):
        from emograph.training import CHECKPOINT_MAGIC
        import struct
        model = Model.build(DIMS, FULL_MODE, seed=3)
        path = tmp_path / "model.bin"
        save_checkpoint(path, model)
        data = bytearray(path.read_bytes())
        off = len(CHECKPOINT_MAGIC)
        (hlen,) = struct.unpack_from("<I", data, off)
        data[off + 4:off + 4 + hlen] = b"x" * hlen
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(data))
        with pytest.raises(ParseError, match="header"):
            load_checkpoint(bad)

    def test_trained_weights_round_trip(self, tmp_path):
        tr, va, _ = make_split(n_samples=32)
        res = train(tr, va, DIMS, TrainConfig(lr=1e-3, epochs=2, batch_size=16, seed=7))
        path = tmp_path / "trained.bin"
        save_checkpoint(path, res.model, meta={"best_epoch": res.best_epoch})
        loaded, meta = load_checkpoint(path)
        assert meta["best_epoch"] == res.best_epoch
        for got, want in zip(loaded.tensors(), res.model.tensors()):
            assert np.array_equal(got.value, want.value)


class TestMetricsIO:
    def test_write_then_load_round_trips(self, tmp_path):
        tr, va, _ = make_split(n_samples=32)
        res = train(tr, va, DIMS, TrainConfig(lr=1e-3, epochs=3, batch_size=16, seed=8))
        path = tmp_path / "metrics.jsonl"
        write_metrics(res.metrics, path)
        assert load_metrics(path) == res.metrics

    def test_none_validation_column_round_trips(self, tmp_path):
        tr, _, _ = make_split(n_samples=16)
        res = train(tr, [], DIMS, TrainConfig(lr=1e-3, epochs=1, batch_size=16, seed=8))
        assert res.metrics[0].val_acc is None
        path = tmp_path / "metrics.jsonl"
        write_metrics(res.metrics, path)
        assert load_metrics(path)[0].val_acc is None

    def test_malformed_row_names_the_line(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        path.write_text('{"epoch": 0, "lr": 1.0, "train_loss": 1.0, '
                        '"train_acc": 0.5, "val_acc": null}\n{"epoch": 1}\n')
        with pytest.raises(ParseError, match=":2:"):
            load_metrics(path)


def test_clone_config_overrides_without_mutating():
    base = TrainConfig(lr=1e-3, epochs=10)
    override = clone_config(base, epochs=2, seed=42)
    assert override.epochs == 2 and override.seed == 42 and override.lr == 1e-3
    assert base.epochs == 10 and base.seed == 0
