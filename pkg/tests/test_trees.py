import itertools
import random

import numpy as np
import pytest

from metrochoice.choices import ChoiceLabel, ChoiceRecord, DelayPeriod
from metrochoice.delays import DelayType
from metrochoice.trees import (
    DecisionTree,
    FeatureEncoder,
    Hyperparams,
    MajorityBaseline,
    TrainingError,
    best_gini_split,
    fit_tree_ensemble,
    predict_with_model,
)


def _record(i, p1=30.0, p2=False, p3=5.0, v1=DelayType.OTHERS, v2=DelayPeriod.MORNING_PEAK, label=None):
    return ChoiceRecord(f"c{i}", 1, v1, v2, p1, p2, p3, label)


def _labeled(i, label, **kwargs):
    return _record(i, label=label, **kwargs)


def test_separable_toy_set_reaches_training_accuracy_one():
    # Label equals the started flag exactly.
    train = [
        _labeled(i, ChoiceLabel.ABANDON if i % 2 == 0 else ChoiceLabel.WAIT, p2=i % 2 == 0)
        for i in range(20)
    ]
    for kind in ("RandomForest", "GradientBoosted"):
        model = fit_tree_ensemble(train, kind, Hyperparams(n_trees=10), seed=1)
        preds = predict_with_model(model, train)
        truth = [r.label for r in train]
        assert [p.label for p in preds] == truth, kind


def _gini(labels):
    n = len(labels)
    if n == 0:
        return 0.0
    p1 = sum(labels) / n
    return 1.0 - p1 * p1 - (1 - p1) * (1 - p1)


def _exhaustive_gini_oracle(x, y):
    """Try literally every (feature, midpoint) split and return the best
    (gain, feature, threshold) with first-wins tie-breaking."""
    n, d = x.shape
    parent = _gini(list(y))
    best = None
    for j in range(d):
        values = sorted(set(x[:, j]))
        for a, b in zip(values, values[1:]):
            t = (a + b) / 2
            left = [y[i] for i in range(n) if x[i, j] <= t]
            right = [y[i] for i in range(n) if x[i, j] > t]
            gain = parent - (len(left) * _gini(left) + len(right) * _gini(right)) / n
            if best is None or gain > best[0] + 1e-12:
                best = (gain, j, t)
    return best


def test_depth_one_split_equals_exhaustive_gini_search_on_four_point_fixtures():
    fixtures = [
        np.array([[1.0], [2.0], [3.0], [4.0]]),
        np.array([[1.0, 10.0], [2.0, 9.0], [3.0, -1.0], [4.0, -2.0]]),
        np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]),
    ]
    label_sets = [list(c) for c in itertools.product([0, 1], repeat=4) if 0 < sum(c) < 4]
    for x in fixtures:
        for labels in label_sets:
            y = np.array(labels)
            got = best_gini_split(x, y)
            expected = _exhaustive_gini_oracle(x, y)
            if expected is None or expected[0] <= 1e-12:
                assert got is None
            else:
                assert got is not None
                assert got[0] == expected[1]
                assert got[1] == pytest.approx(expected[2])
                assert got[2] == pytest.approx(expected[0])


def test_forest_of_one_tree_without_bagging_equals_single_tree():
    rng = random.Random(8)
    train = [
        _labeled(
            i,
            ChoiceLabel.ABANDON if rng.random() < 0.4 else ChoiceLabel.WAIT,
            p1=rng.uniform(10, 60),
            p3=rng.uniform(0, 10),
            p2=rng.random() < 0.5,
        )
        for i in range(30)
    ]
    hp = Hyperparams(n_trees=1, bagging=False, max_depth=6)
    forest = fit_tree_ensemble(train, "RandomForest", hp, seed=3)
    encoder = forest.encoder
    x = encoder.transform(train)
    y = np.array([1 if r.label is ChoiceLabel.ABANDON else 0 for r in train])
    single = DecisionTree(max_depth=6).fit(x, y)

    probe = [
        _record(1000 + i, p1=rng.uniform(10, 60), p3=rng.uniform(0, 10), p2=rng.random() < 0.5)
        for i in range(50)
    ]
    forest_preds = [p.label for p in predict_with_model(forest, probe)]
    xp = encoder.transform(probe)
    tree_preds = [
        ChoiceLabel.ABANDON if v == 1 else ChoiceLabel.WAIT for v in single.predict(xp)
    ]
    assert forest_preds == tree_preds
    assert forest.trees[0].structure() == single.structure()


def test_fixed_seed_training_is_bit_stable():
    rng = random.Random(12)
    train = [
        _labeled(
            i,
            ChoiceLabel.ABANDON if rng.random() < 0.3 else ChoiceLabel.WAIT,
            p1=rng.uniform(10, 60),
            p3=rng.uniform(0, 10),
            p2=rng.random() < 0.5,
            v2=rng.choice(list(DelayPeriod)),
        )
        for i in range(60)
    ]
    probe = train[:20]
    for kind in ("RandomForest", "GradientBoosted"):
        m1 = fit_tree_ensemble(train, kind, Hyperparams(n_trees=12), seed=99)
        m2 = fit_tree_ensemble(train, kind, Hyperparams(n_trees=12), seed=99)
        assert m1.structure() == m2.structure(), kind
        p1 = [p.label for p in predict_with_model(m1, probe)]
        p2 = [p.label for p in predict_with_model(m2, probe)]
        assert p1 == p2


def test_all_wait_training_set_gives_degenerate_constant_model():
    train = [_labeled(i, ChoiceLabel.WAIT) for i in range(10)]
    model = fit_tree_ensemble(train, "RandomForest", seed=0)
    assert model.degenerate
    preds = predict_with_model(model, [_record(99)])
    assert preds[0].label is ChoiceLabel.WAIT


def test_empty_training_set_rejected():
    with pytest.raises(TrainingError):
        fit_tree_ensemble([], "RandomForest")


def test_unknown_kind_rejected():
    with pytest.raises(TrainingError):
        fit_tree_ensemble([_labeled(0, ChoiceLabel.WAIT)], "Boosted")


def test_unlabeled_record_rejected():
    with pytest.raises(TrainingError):
        fit_tree_ensemble([_record(0)], "RandomForest")


def test_unseen_category_encodes_all_zero(caplog):
    train = [
        _labeled(i, ChoiceLabel.WAIT if i % 2 else ChoiceLabel.ABANDON, v1=DelayType.OTHERS)
        for i in range(10)
    ]
    encoder = FeatureEncoder.fit(train)
    probe = [_record(0, v1=DelayType.POWER_FAULT)]
    with caplog.at_level("WARNING"):
        x = encoder.transform(probe)
    n1 = len(encoder.v1_categories)
    assert x[0, :n1].sum() == 0.0
    assert any("unseen" in rec.message for rec in caplog.records)


def test_gradient_boosting_learns_threshold_rule():
    rng = random.Random(5)
    train = []
    for i in range(80):
        p3 = rng.uniform(0, 12)
        label = ChoiceLabel.ABANDON if p3 < 6 else ChoiceLabel.WAIT
        train.append(_labeled(i, label, p3=p3))
    model = fit_tree_ensemble(train, "GradientBoosted", Hyperparams(n_trees=30), seed=2)
    preds = predict_with_model(model, train)
    acc = sum(p.label == r.label for p, r in zip(preds, train)) / len(train)
    assert acc >= 0.95


def test_majority_baseline_predicts_most_frequent_class():
    train = [_labeled(i, ChoiceLabel.WAIT) for i in range(8)] + [
        _labeled(9, ChoiceLabel.ABANDON)
    ]
    baseline = MajorityBaseline.fit(train)
    preds = baseline.predict([_record(1), _record(2)])
    assert all(p.label is ChoiceLabel.WAIT for p in preds)
    assert all(p.backend_id == "majority" for p in preds)
