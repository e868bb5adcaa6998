import dataclasses

import numpy as np
import pytest

from resdistill.distill import (ABLATION_COLUMNS, DistillConfig, ImageSource, PhaseResult, TrainConfig,
                                accumulate_step, distill_loss, distill_student, fine_tune, predict, run_ablation,
                                train_supervised, write_ablation, write_trace)
from resdistill.model import ModelConfig, ModelOutput, build_model
from resdistill.optim import AdamConfig
from resdistill.resize import ResizeMode
from resdistill.tensor import Tensor, backward

TINY = ModelConfig(stage_widths=(8, 16), num_groups=4)
QUICK = dict(epochs=2, teacher_mag=1.0, student_mag=0.5, precision="f64")


@pytest.fixture(scope="module")
def teacher():
    return build_model(TINY, 123, np.float64)


def _unlabeled(ds, split="aux_v2"):
    return [r.unlabeled() for r in ds.split(split)]


def _output(logits, fmap):
    return ModelOutput(Tensor(np.asarray(fmap, dtype=np.float64)), Tensor(np.asarray(logits, dtype=np.float64)))


class TestDistillLoss:
    def test_identical_outputs_zero(self):
        out = _output([[0.3, -1.0, 2.0]], np.random.default_rng(0).normal(size=(1, 4, 2, 2)))
        total, soft, pixel = distill_loss(out, out, DistillConfig())
        assert soft.item() == 0.0
        assert total.item() == pytest.approx(0.0, abs=1e-12)

    def test_composed_example(self):
        t = _output([[2.0, 0.0]], np.ones((1, 1, 2, 2)))
        s = _output([[0.0, 2.0]], np.zeros((1, 1, 1, 1)))
        total, soft, pixel = distill_loss(t, s, DistillConfig(temperature=1.0, resize_mode=ResizeMode.MP_AND_INT))
        assert soft.item() == pytest.approx(2 * np.tanh(1.0), abs=1e-6)
        assert pixel.item() == pytest.approx(1.0, abs=1e-12)
        assert total.item() == pytest.approx(2.5232, abs=1e-4)
        assert total.item() == pytest.approx(2 * np.tanh(1.0) + 1.0, abs=1e-6)

    def test_none_mode_is_soft_only(self):
        t = _output([[1.0, 0.0, 0.5]], np.ones((1, 2, 4, 4)))
        s = _output([[0.0, 0.2, 0.1]], np.zeros((1, 2, 2, 2)))
        total, soft, pixel = distill_loss(t, s, DistillConfig(resize_mode="NONE"))
        assert pixel.item() == 0.0
        assert total.item() == soft.item()

    def test_weights(self):
        t = _output([[2.0, 0.0]], np.ones((1, 1, 2, 2)))
        s = _output([[0.0, 2.0]], np.zeros((1, 1, 1, 1)))
        total, soft, pixel = distill_loss(t, s, DistillConfig(temperature=1.0, soft_weight=0.5, pixel_weight=3.0))
        assert total.item() == pytest.approx(0.5 * soft.item() + 3.0 * pixel.item(), abs=1e-12)

    def test_gradient_reaches_student_only(self):
        t_logits = Tensor(np.array([[1.0, -1.0]]), requires_grad=True)
        t = ModelOutput(Tensor(np.ones((1, 1, 2, 2))), t_logits)
        s_logits = Tensor(np.array([[0.0, 0.5]]), requires_grad=True)
        s_map = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        total, _, _ = distill_loss(t, ModelOutput(s_map, s_logits), DistillConfig())
        backward(total)
        assert t_logits.grad is None
        assert s_logits.grad is not None and s_map.grad is not None

    @pytest.mark.parametrize("kw", [{"temperature": 0}, {"soft_weight": -1}, {"teacher_mag": 0.1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            DistillConfig(**kw)

    def test_config_round_trip(self):
        cfg = DistillConfig(temperature=2.0, resize_mode="INT", adam=AdamConfig(learning_rate=0.01))
        assert DistillConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.size_ratio == 8.0


class TestAccumulation:
    @pytest.mark.parametrize("batch", [2, 4, 8])
    def test_equals_full_batch(self, tiny_dataset, teacher, batch):
        student = build_model(TINY, 9, np.float64)
        recs = tiny_dataset.split("train")[:batch]
        ids = [r.id for r in recs]
        t_src = ImageSource.from_dataset(tiny_dataset, recs, 1.0, np.float64)
        s_src = ImageSource.from_dataset(tiny_dataset, recs, 0.5, np.float64)
        cfg = DistillConfig(teacher_mag=1.0, student_mag=0.5)

        def loss_fn(chunk):
            t_out = teacher(t_src.batch(chunk))
            return distill_loss(ModelOutput(t_out.feature_map.data, t_out.logits.data), student(s_src.batch(chunk)),
                                cfg)

        accumulate_step(student, ids, batch, loss_fn)
        full = {n: p.grad.copy() for n, p in student.named_parameters()}
        student.zero_grad()
        accumulate_step(student, ids, 1, loss_fn)
        for n, p in student.named_parameters():
            err = np.abs(p.grad - full[n]).max() / max(np.abs(full[n]).max(), 1e-30)
            assert err < 1e-6, n


class TestDistillStudent:
    def test_fixed_point(self, tiny_dataset, teacher):
        cfg = DistillConfig(warm_start=True, teacher_mag=0.5, student_mag=0.5, augment=False, epochs=1,
                            precision="f64")
        unl = _unlabeled(tiny_dataset)
        res = distill_student(teacher, tiny_dataset, unl, cfg)
        assert res.trace[0]["soft_loss"] < 1e-12
        assert res.trace[0]["pixel_loss"] <= 1e-10
        for n, p in res.model.named_parameters():
            assert np.abs(p.data - teacher.params[n].data).max() < 1e-7, n

    def test_teacher_untouched(self, tiny_dataset, teacher):
        before = teacher.state_bytes()
        distill_student(teacher, tiny_dataset, _unlabeled(tiny_dataset), DistillConfig(**QUICK))
        assert teacher.state_bytes() == before

    def test_label_blind(self, tiny_dataset, teacher):
        recs = tiny_dataset.split("train")
        labels = [r.class_label for r in recs]
        perm = np.random.default_rng(0).permutation(labels)
        shuffled = [dataclasses.replace(r, class_label=int(y)) for r, y in zip(recs, perm)]
        assert [r.class_label for r in shuffled] != labels
        a = distill_student(teacher, tiny_dataset, [r.unlabeled() for r in recs], DistillConfig(**QUICK))
        b = distill_student(teacher, tiny_dataset, [r.unlabeled() for r in shuffled], DistillConfig(**QUICK))
        assert a.model.state_bytes() == b.model.state_bytes()

    def test_rejects_labelled_records(self, tiny_dataset, teacher):
        with pytest.raises(TypeError):
            distill_student(teacher, tiny_dataset, tiny_dataset.split("train"), DistillConfig(**QUICK))

    def test_missing_level(self, tiny_dataset, teacher):
        with pytest.raises(KeyError):
            distill_student(teacher, tiny_dataset, _unlabeled(tiny_dataset),
                            DistillConfig(**{**QUICK, "student_mag": 0.25}))

    def test_deterministic_and_shared_cache(self, tiny_dataset, teacher):
        cache = {}
        a = distill_student(teacher, tiny_dataset, _unlabeled(tiny_dataset), DistillConfig(**QUICK), teacher_cache=cache)
        assert cache
        b = distill_student(teacher, tiny_dataset, _unlabeled(tiny_dataset), DistillConfig(**QUICK), teacher_cache=cache)
        c = distill_student(teacher, tiny_dataset, _unlabeled(tiny_dataset), DistillConfig(**QUICK))
        assert a.model.state_bytes() == b.model.state_bytes() == c.model.state_bytes()
        assert a.fingerprint == b.fingerprint
        assert a.loss_trace == c.loss_trace

    def test_trace_shape(self, tiny_dataset, teacher, tmp_path):
        res = distill_student(teacher, tiny_dataset, _unlabeled(tiny_dataset), DistillConfig(**{**QUICK, "epochs": 3}),
                              tiny_dataset.split("development"))
        assert len(res.trace) == 3 and len(res.metric_trace) == 3
        assert all(0 <= a <= 100 for a in res.metric_trace)
        write_trace(res.trace, tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "epoch,soft_loss,pixel_loss,total_loss,dev_accuracy" and len(lines) == 4

    def test_loss_decreases_to_best_epoch(self, tiny_dataset):
        t = train_supervised(tiny_dataset, tiny_dataset.split("train"), tiny_dataset.split("validation"), TINY,
                             TrainConfig(epochs=15, augment=False, precision="f64",
                                         adam=AdamConfig(learning_rate=0.01))).model
        cfg = DistillConfig(epochs=20, teacher_mag=1.0, student_mag=0.5, precision="f64", augment=False)
        res = distill_student(t, tiny_dataset, _unlabeled(tiny_dataset), cfg, tiny_dataset.split("development"))
        assert res.loss_trace[res.best_epoch] <= res.loss_trace[0]
        assert res.metric_trace[res.best_epoch] == max(res.metric_trace)
        assert res.loss_trace[-1] < 0.75 * res.loss_trace[0]  # observed ratio 0.58


class TestSupervised:
    def test_memorises_ten_samples(self, tiny_dataset):
        recs = (tiny_dataset.split("train") + tiny_dataset.split("validation"))[:10]
        cfg = TrainConfig(mag=0.5, epochs=200, augment=False, precision="f64")
        res = train_supervised(tiny_dataset, recs, [], TINY, cfg)
        assert res.loss_trace[-1] < 0.05

    def test_same_seed_same_trace(self, tiny_dataset):
        cfg = TrainConfig(mag=0.5, epochs=2)
        a = train_supervised(tiny_dataset, tiny_dataset.split("train"), tiny_dataset.split("validation"), TINY, cfg)
        b = train_supervised(tiny_dataset, tiny_dataset.split("train"), tiny_dataset.split("validation"), TINY, cfg)
        assert a.loss_trace == b.loss_trace
        assert a.model.state_bytes() == b.model.state_bytes()

    def test_validation_unaugmented(self, tiny_dataset):
        model = build_model(TINY, 0)
        src = ImageSource.from_dataset(tiny_dataset, tiny_dataset.split("validation"), 0.5)
        ids = [r.id for r in tiny_dataset.split("validation")]
        _, a = predict(model, src, ids)
        _, b = predict(model, src, ids)
        np.testing.assert_array_equal(a, b)

    def test_empty_split(self, tiny_dataset):
        with pytest.raises(ValueError):
            train_supervised(tiny_dataset, [], [], TINY, TrainConfig())

    def test_unlabelled_rejected(self, tiny_dataset):
        with pytest.raises(ValueError):
            train_supervised(tiny_dataset, tiny_dataset.split("aux_v1"), [], TINY, TrainConfig(mag=0.5))


class TestFineTune:
    def test_only_head_moves(self, tiny_dataset, teacher):
        cfg = TrainConfig(mag=0.5, epochs=1, precision="f64")
        res = fine_tune(teacher, tiny_dataset, tiny_dataset.split("train"), tiny_dataset.split("validation"), cfg,
                        patience=2, max_epochs=3)
        changed = False
        for n, p in res.model.named_parameters():
            if n.startswith("head."):
                changed |= p.data.tobytes() != teacher.params[n].data.tobytes()
            else:
                assert p.data.tobytes() == teacher.params[n].data.tobytes(), n
        assert changed

    def test_input_model_untouched(self, tiny_dataset, teacher):
        before = teacher.state_bytes()
        fine_tune(teacher, tiny_dataset, tiny_dataset.split("train"), tiny_dataset.split("validation"),
                  TrainConfig(mag=0.5), patience=1, max_epochs=2)
        assert teacher.state_bytes() == before

    def test_linearly_separable_features(self, tiny_dataset, teacher):
        # relabel the images with a linear rule on the frozen pooled features
        recs = tiny_dataset.split("train") + tiny_dataset.split("validation")
        src = ImageSource.from_dataset(tiny_dataset, recs, 0.5, np.float64)
        fmap = teacher(src.batch([r.id for r in recs])).feature_map.data
        feats = fmap.mean(axis=(2, 3))
        feats = feats - feats.mean(axis=0)
        w = np.random.default_rng(1).normal(size=(feats.shape[1], 3))
        labels = (feats @ w).argmax(axis=1)
        relabelled = [dataclasses.replace(r, class_label=int(y)) for r, y in zip(recs, labels)]
        cfg = TrainConfig(mag=0.5, augment=False, precision="f64", adam=AdamConfig(learning_rate=0.05))
        res = fine_tune(teacher, tiny_dataset, relabelled, relabelled, cfg, patience=100, max_epochs=400)
        pred, _ = predict(res.model, src, [r.id for r in recs])
        np.testing.assert_array_equal(pred, labels)

    def test_stops_on_patience(self, tiny_dataset, teacher):
        res = fine_tune(teacher, tiny_dataset, tiny_dataset.split("train"), tiny_dataset.split("validation"),
                        TrainConfig(mag=0.5, adam=AdamConfig(learning_rate=0.5)), patience=2, max_epochs=50)
        assert len(res.trace) <= 50
        assert len(res.trace) - 1 - res.best_epoch <= 2


class TestAblation:
    def test_grid_shape(self, tiny_dataset, teacher, tmp_path):
        base = DistillConfig(epochs=1, precision="f64")
        rows = run_ablation(tiny_dataset, teacher, [0.5], seeds=(0, 1), base=base, unlabeled_split="aux_v1")
        assert len(rows) == 4 * 1 * 2
        assert {r["mode"] for r in rows} == {m.value for m in ResizeMode}
        for r in rows:
            cfg = DistillConfig.from_dict(__import__("json").loads(r["config"]))
            assert cfg.seed == r["seed"] and cfg.resize_mode.value == r["mode"]
        path = write_ablation(rows, tmp_path / "ablation.csv")
        assert path.read_text().splitlines()[0] == ",".join(ABLATION_COLUMNS)

    def test_none_rows_equal_plain_kd(self, tiny_dataset, teacher):
        base = DistillConfig(epochs=2, precision="f64")
        (row,) = run_ablation(tiny_dataset, teacher, [0.5], modes=["NONE"], base=base)
        plain = distill_student(teacher, tiny_dataset, _unlabeled(tiny_dataset, "aux_v1"),
                                DistillConfig(epochs=2, precision="f64", student_mag=0.5, resize_mode="NONE"),
                                tiny_dataset.split("development"))
        assert row["fingerprint"] == plain.fingerprint
        assert row["dev_accuracy"] == plain.trace[plain.best_epoch]["dev_accuracy"]
        assert row["best_epoch"] == plain.best_epoch


def test_phase_result_save(tmp_path, teacher):
    res = PhaseResult(teacher, [{"epoch": 0, "soft_loss": 1.0, "pixel_loss": 0.5, "total_loss": 1.5,
                                 "dev_accuracy": None}], 0, 0.1, {"phase": "x"}, "abc")
    ckpt = res.save(tmp_path / "run")
    assert ckpt.exists() and (tmp_path / "run" / "trace.csv").exists()
    assert (tmp_path / "run" / "phase_config.json").exists()
