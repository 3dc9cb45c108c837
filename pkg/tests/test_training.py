import numpy as np
import pytest

from mtdistill.model import ConfigError, NetworkConfig, TaskHeadSpec, build_student
from mtdistill.tasks import ImbalancedDataset, SampleSet, build_synth_segmentation, sample_toy_dataset, toy_f2
from mtdistill.training import TrainingConfig, TrainingHistory, evaluate, train

# mean of f2(z)^2 over the 1000-point grid on [0, 1], from mpmath
F2_SQUARED_GRID_MEAN = 5.00046004651176637828476425874


def student(heads=("f1", "f2"), width=16, seed=0):
    return build_student(NetworkConfig([1], [width, width], [TaskHeadSpec(h) for h in heads], init_seed=seed))


def test_zero_predictor_mse():
    ds = sample_toy_dataset(40, 10)
    net = student(("f2",))
    net.params.flat[:] = 0.0
    rep = evaluate(net, ds)
    assert rep.get("f2", "mse") == pytest.approx(F2_SQUARED_GRID_MEAN, rel=1e-13)
    assert rep.get("f2", "mse") == pytest.approx(np.mean(toy_f2(ds.eval_set.z[:, 0]) ** 2), rel=1e-14)
    assert rep.point_std[("f2", "mse")] == pytest.approx(np.std(toy_f2(ds.eval_set.z[:, 0]) ** 2), rel=1e-12)


def test_exact_predictor_metrics():
    # constant targets; a zero-weight net whose head biases equal them is exact
    z = np.linspace(0, 1, 9)[:, None].repeat(2, axis=1)
    ev = SampleSet(z, [np.full(9, 2.0), np.full(9, 1.0)], [np.ones(9, bool)] * 2)
    ds = ImbalancedDataset(ev, ev, ["regression", "classification"], ["depth", "seg"], {1: 3})
    net = build_student(NetworkConfig([2], [4], [TaskHeadSpec("depth"), TaskHeadSpec("seg", "classification", 3)]))
    net.params.flat[:] = 0.0
    net.params["head.depth.b"][:] = 2.0
    net.params["head.seg.b"][:] = [0.0, 5.0, 0.0]
    rep = evaluate(net, ds, {"depth": ["mse", "rmse"], "seg": ["miou"]})
    assert rep.get("depth", "mse") == 0.0
    assert rep.get("depth", "rmse") == 0.0
    assert rep.get("seg", "miou") == 1.0
    assert evaluate(net, ds).values == evaluate(net, ds).values


def test_history_lengths_and_finite():
    ds = sample_toy_dataset(64, 16)
    _, hist = train(student(), ds, TrainingConfig(epochs=5, batch_size=16, learning_rate=1e-3))
    assert len(hist) == 5
    assert all(len(v) == 5 for v in hist.per_task.values())
    assert np.all(np.isfinite(hist.total))


def test_zero_learning_rate_changes_nothing():
    ds = sample_toy_dataset(64, 16)
    net = student()
    before = net.params.flat.copy()
    train(net, ds, TrainingConfig(epochs=1, learning_rate=0.0))
    assert np.array_equal(net.params.flat, before)


def test_epochs_validated():
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=-1.0)


def test_training_is_deterministic():
    ds = sample_toy_dataset(64, 16, seed=4)
    a, _ = train(student(), ds, TrainingConfig(epochs=4, batch_size=8, seed=9))
    b, _ = train(student(), ds, TrainingConfig(epochs=4, batch_size=8, seed=9))
    assert np.array_equal(a.params.flat, b.params.flat)


def test_absent_task_head_stays_at_init():
    ds = sample_toy_dataset(64, 0)
    net = student()
    init = {k: net.params[k].copy() for k in net.params}
    train(net, ds, TrainingConfig(epochs=3, batch_size=16, learning_rate=1e-2))
    for k in net.head_param_names("f2"):
        assert np.array_equal(net.params[k], init[k])
    assert not np.array_equal(net.params["backbone.0.w"], init["backbone.0.w"])


def test_head_kind_mismatch():
    ds = build_synth_segmentation(3, 30, 10)
    net = build_student(NetworkConfig([2], [4], [TaskHeadSpec("depth"), TaskHeadSpec("seg")]))
    with pytest.raises(ConfigError):
        train(net, ds, TrainingConfig(epochs=1))


def test_classification_training_learns():
    ds = build_synth_segmentation(3, 200, 200, seed=0)
    net = build_student(NetworkConfig([2], [32, 32], [TaskHeadSpec("depth"), TaskHeadSpec("seg", "classification", 3)]))
    before = evaluate(net, ds).get("seg", "miou")
    train(net, ds, TrainingConfig(epochs=400, batch_size=200, learning_rate=1e-2))
    assert evaluate(net, ds).get("seg", "miou") > max(before, 0.6)


def test_history_csv(tmp_path):
    h = TrainingHistory([1.0, 0.5], {"f1": [0.6, 0.3], "f2": [0.4, 0.2]})
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == ["epoch,total,f1,f2", "1,1,0.6,0.4", "2,0.5,0.3,0.2"]


def test_empty_eval_set():
    ds = sample_toy_dataset(10, 5)
    empty = SampleSet(np.zeros((0, 1)), [np.zeros(0)] * 2, [np.zeros(0, bool)] * 2)
    with pytest.raises(ValueError):
        evaluate(student(), ds, eval_set=empty)
