import numpy as np
import pandas as pd
import pytest

from hessian_loss import ProjectionConfig
from oracles import generate_dataset, low_fidelity_of
from potential import DescriptorConfig, ModelSurface, NeuralPotential
from trainer import (
    CurriculumSchedule, Phase, ScheduleMode, TrainConfig, TrainHistory, TrainingError, combine_loss,
    curriculum_weight, evaluate, split_validation, total_loss, train_phase,
)


@pytest.fixture
def model():
    return NeuralPotential(DescriptorConfig(cutoff=4.0, n_basis=6), ("S", "H"), (8,))


@pytest.fixture
def low_data(hosted):
    return generate_dataset(low_fidelity_of(hosted), 16, 0.08, np.random.default_rng(3))


@pytest.fixture
def high_data(hosted):
    return generate_dataset(hosted, 12, 0.08, np.random.default_rng(4), hessian_fraction=0.25)


def _config(epochs=3, **schedule):
    return TrainConfig(CurriculumSchedule(**schedule), ProjectionConfig("rademacher", 2),
                       learning_rate=1e-2, batch_size=4, epochs=epochs, seed=0, validation_fraction=0.25)


class TestCurriculum:
    def test_linear_ramp(self):
        sched = CurriculumSchedule(w_0=0.0, w_H=1.0, t_start=10, t_end=20)
        assert curriculum_weight(5, sched) == 0.0
        assert curriculum_weight(10, sched) == 0.0
        assert curriculum_weight(15, sched) == pytest.approx(0.5)
        assert curriculum_weight(20, sched) == 1.0
        assert curriculum_weight(50, sched) == 1.0

    def test_fixed_mode(self):
        sched = CurriculumSchedule(w_0=0.0, w_H=0.3, mode="fixed")
        assert sched.mode == ScheduleMode.FIXED
        assert curriculum_weight(0, sched) == 0.3

    def test_default_breakpoints(self):
        sched = CurriculumSchedule().resolved(100)
        assert (sched.t_start, sched.t_end) == (10, 60)

    def test_unresolved_linear_schedule(self):
        with pytest.raises(ValueError):
            curriculum_weight(3, CurriculumSchedule())

    def test_bad_breakpoints(self):
        with pytest.raises(ValueError):
            CurriculumSchedule(t_start=5, t_end=5)


def test_combine_loss():
    sched = CurriculumSchedule(w_E=2.0, w_F=3.0)
    assert combine_loss(1.0, 1.0, 4.0, 0.5, sched) == pytest.approx(7.0)


def test_total_loss_uses_schedule_weight(model, high_data):
    cfg = _config(epochs=10, w_0=0.0, w_H=1.0, t_start=2, t_end=4)
    params = model.init_params(0)
    early = total_loss(model, params, list(high_data)[:4], 0, cfg)
    late = total_loss(model, params, list(high_data)[:4], 9, cfg)
    assert late.total - early.total == pytest.approx(late.hessian, rel=1e-8, abs=1e-12)


class TestEvaluate:
    def test_oracle_against_itself(self, hosted, high_data):
        metrics = evaluate(hosted.surface, high_data)
        assert metrics["energy_mae"] == pytest.approx(0.0, abs=1e-12)
        assert metrics["force_mae"] == pytest.approx(0.0, abs=1e-12)
        assert metrics["hessian_mae"] == pytest.approx(0.0, abs=1e-10)
        assert metrics["n_hessian"] == 3

    def test_empty_dataset_gives_nan(self, hosted, low_data):
        metrics = evaluate(hosted.surface, low_data.subset([]))
        assert np.isnan(metrics["energy_mae"])
        assert np.isnan(metrics["hessian_mae"])


def test_split_validation(high_data):
    train, val = split_validation(high_data, 0.25, seed=1)
    assert len(train) == 9 and len(val) == 3
    tags = {id(s) for s in train}
    assert not any(id(s) in tags for s in val)
    same_train, same_val = split_validation(high_data, 0.0, seed=1)
    assert same_train is high_data and same_val is high_data


@pytest.mark.parametrize("seed", range(30))
def test_split_keeps_a_hessian_sample_for_training(hosted, seed):
    data = generate_dataset(hosted, 20, 0.08, np.random.default_rng(5), hessian_fraction=0.05)
    assert data.n_hessian == 1
    train, val = split_validation(data, 0.1, seed=seed)
    assert train.n_hessian == 1
    assert len(val) == 2


def test_split_all_labeled(low_data):
    train, val = split_validation(low_data, 0.25, seed=2)
    assert (len(train), len(val)) == (12, 4)
    assert train.n_hessian == 12


class TestTrainPhase:
    def test_history_records(self, model, low_data):
        params, history = train_phase(model, low_data, _config(epochs=3), Phase.PRETRAIN, progress=False)
        frame = history.to_frame()
        assert len(history) == 3
        for column in ("epoch", "lambda", "loss_total", "loss_hessian", "val_loss", "val_hessian_mae"):
            assert column in frame
        assert np.all(np.isfinite(frame["loss_total"]))

    def test_training_reduces_validation_loss(self, model, low_data):
        _, history = train_phase(model, low_data, _config(epochs=20), Phase.PRETRAIN, progress=False)
        val = history.to_frame()["val_loss"].to_numpy()
        assert val[5:].min() < val[0]

    def test_seeded_runs_are_identical(self, model, low_data):
        _, a = train_phase(model, low_data, _config(epochs=2), Phase.PRETRAIN, progress=False)
        _, b = train_phase(model, low_data, _config(epochs=2), Phase.PRETRAIN, progress=False)
        assert a.to_frame()["loss_total"].tolist() == b.to_frame()["loss_total"].tolist()

    def test_wrong_fidelity_is_rejected(self, model, low_data):
        with pytest.raises(TrainingError):
            train_phase(model, low_data, _config(), Phase.FINETUNE, progress=False)

    def test_zero_epochs_returns_start(self, model, high_data):
        start = model.init_params(1)
        params, history = train_phase(model, high_data, _config(epochs=0), Phase.FINETUNE,
                                      init_params=start, progress=False)
        assert params is start
        assert len(history) == 0

    def test_finetune_with_explicit_validation(self, model, low_data, high_data):
        pre, _ = train_phase(model, low_data, _config(epochs=2), Phase.PRETRAIN, progress=False)
        cfg = _config(epochs=4, w_0=0.0, w_H=0.1)
        params, history = train_phase(model, high_data, cfg, Phase.FINETUNE, init_params=pre,
                                      validation=high_data.subset([0, 1, 2]), progress=False)
        lambdas = history.to_frame()["lambda"].tolist()
        assert lambdas[0] == 0.0
        assert lambdas[-1] == pytest.approx(0.1)
        assert np.isfinite(evaluate(ModelSurface(model, params), high_data)["hessian_mae"])


def test_history_save(tmp_path):
    history = TrainHistory([{"epoch": 0, "val_loss": 1.0}, {"epoch": 1, "val_loss": 0.5}])
    csv_path, json_path = history.save(str(tmp_path / "run" / "history"))
    assert pd.read_csv(csv_path)["val_loss"].tolist() == [1.0, 0.5]
    assert json_path.endswith(".json")
