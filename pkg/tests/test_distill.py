import numpy as np
import pytest

from mtdistill.distill import (
    ComparisonReport,
    DistillConfig,
    IntegrityError,
    PseudoLabelSet,
    decide,
    fingerprint,
    generate_pseudo_labels,
    merge_with_pseudo,
    run_seed,
    run_teacher_student,
    select_confident,
    train_teacher,
)
from mtdistill.metrics import MetricsReport
from mtdistill.model import ConfigError
from mtdistill.tasks import build_synth_segmentation, sample_toy_dataset
from mtdistill.training import TrainingConfig

FAST = TrainingConfig(epochs=3, batch_size=64, learning_rate=1e-3)


def small(**kw):
    return DistillConfig(teacher=FAST, student=FAST, backbone=[16, 16], **kw)


@pytest.fixture(scope="module")
def toy():
    return sample_toy_dataset(640, 160, seed=0)


@pytest.fixture(scope="module")
def seg_teacher():
    ds = build_synth_segmentation(4, 500, 250, seed=1)
    cfg = DistillConfig(teacher=TrainingConfig(epochs=60, batch_size=250, learning_rate=1e-2),
                        student=FAST, backbone=[32, 32])
    teacher, _ = train_teacher(ds, cfg, seed=0)
    return ds, cfg, teacher


def test_toy_pseudo_count(toy):
    cfg = small()
    teacher, _ = train_teacher(toy, cfg, seed=0)
    ps = generate_pseudo_labels(teacher, toy, cfg)
    assert ps.n_generated == 480
    assert ps.n_generated + ps.skipped == toy.count_A - toy.count_B
    assert ps.n_retained == 480
    assert np.all(np.isnan(ps.confidence))
    assert not toy.train.masks[1][ps.ids].any()
    merged = merge_with_pseudo(toy, ps)
    assert merged.count_B == 640
    assert int(merged.train.pseudo[1].sum()) == 480


def test_merge_never_touches_ground_truth(toy):
    cfg = small()
    teacher, _ = train_teacher(toy, cfg, seed=0)
    merged = merge_with_pseudo(toy, generate_pseudo_labels(teacher, toy, cfg))
    for t in (0, 1):
        gt = toy.train.masks[t]
        assert np.array_equal(merged.train.labels[t][gt], toy.train.labels[t][gt])
    assert np.array_equal(merged.train.labels[0], toy.train.labels[0])


def test_merge_collision(toy):
    gt_id = toy.train.ids[toy.train.masks[1]][0]
    ps = PseudoLabelSet(1, np.array([gt_id]), np.array([0.0]), np.array([np.nan]), np.array([True]), 0.9)
    with pytest.raises(IntegrityError):
        merge_with_pseudo(toy, ps)
    ps.ids = np.array([10**6])
    with pytest.raises(IntegrityError):
        merge_with_pseudo(toy, ps)


def test_merge_empty_is_identity(toy):
    assert merge_with_pseudo(toy, PseudoLabelSet.empty(1, 0.9)) is toy


def test_select_confident_rows():
    labels, conf, keep = select_confident(np.array([[0.95, 0.05], [0.6, 0.4], [0.1, 0.9]]), 0.9)
    assert labels.tolist() == [0.0, 0.0, 1.0]
    assert conf.tolist() == [0.95, 0.6, 0.9]
    # the threshold is strict
    assert keep.tolist() == [True, False, False]


def test_classification_threshold_soundness(seg_teacher):
    ds, cfg, teacher = seg_teacher
    ps = generate_pseudo_labels(teacher, ds, cfg)
    assert ps.n_generated == 250
    _, _, conf = ps.kept()
    assert np.all(conf > 0.9)
    assert np.all(ps.confidence[~ps.retained] <= 0.9)
    merged = merge_with_pseudo(ds, ps)
    assert merged.count_B == ds.count_B + ps.n_retained


def test_retained_count_monotone_in_tau(seg_teacher):
    from dataclasses import replace
    ds, cfg, teacher = seg_teacher
    counts = [generate_pseudo_labels(teacher, ds, replace(cfg, tau=t)).n_retained
              for t in np.linspace(0, 1, 21)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 0
    assert counts[0] == 250


def test_teacher_needs_both_labeled():
    ds = sample_toy_dataset(50, 0)
    with pytest.raises(ConfigError):
        train_teacher(ds, small())


def test_teacher_deterministic(toy):
    a, _ = train_teacher(toy, small(), seed=3)
    b, _ = train_teacher(toy, small(), seed=3)
    assert fingerprint(a) == fingerprint(b)


def test_teacher_trains_on_both_labeled_only(toy):
    _, hist = train_teacher(toy, small(), seed=0)
    assert len(hist) == FAST.epochs


def test_degenerate_equivalence():
    ds = sample_toy_dataset(96, 96, seed=2)
    assert ds.count_A == ds.count_B
    res = run_seed(ds, small(), seed=5, keep_nets=True)
    assert res["pseudo"]["generated"] == 0
    mtl, ts = res["nets"]["mtl"], res["nets"]["ts"]
    for k in mtl.params:
        assert np.array_equal(mtl.params[k], ts.params[k])


def test_run_teacher_student_report(toy):
    rep = run_teacher_student(lambda s: sample_toy_dataset(64, 16, seed=s), small(), seeds=[0, 1])
    assert rep.ok_seeds == [0, 1]
    assert rep.values("st", "f2", "mse").shape == (2,)
    m, s = rep.summary("ts", "f2", "mse")
    assert s >= 0 and np.isfinite(m)
    assert rep.pseudo_counts[0]["generated"] == 48


def _report(mtl, ts):
    rep = ComparisonReport("task1_as_input", "f2", "f1", list(range(len(mtl))))
    for s, (a, b) in enumerate(zip(mtl, ts)):
        rep.add(s, {"reports": {"mtl": MetricsReport({("f2", "mse"): a}),
                                "ts": MetricsReport({("f2", "mse"): b})}})
    return rep


def test_improvement_is_ratio_of_means():
    rep = _report([1.0, 3.0], [1.0, 1.0])
    assert rep.improvement("mse") == 0.5
    assert rep.per_seed_improvements("mse").tolist() == [0.0, 2 / 3]


@pytest.mark.parametrize("imp12, imp21, verdict", [
    (0.2, 0.3, ("Cond1", None)),
    (0.2, 0.01, ("Cond2", "1->2")),
    (-0.5, 0.06, ("Cond2Mirror", "2->1")),
    (0.05, 0.05, ("Cond3", None)),
])
def test_decision_rule(imp12, imp21, verdict):
    assert decide(imp12, imp21, 0.05) == verdict
