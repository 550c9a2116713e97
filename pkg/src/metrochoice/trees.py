"""From-scratch tree ensembles over choice records.

Random forest: bagged depth-limited Gini trees with majority vote.
Gradient boosting: additive shallow regression trees on logistic loss
with shrinkage and Newton leaf values. Categorical features are one-hot
encoded against the training vocabulary; categories unseen at prediction
time encode as all zeros (logged once). Everything is deterministic
under a fixed seed, including split tie-breaks (lowest feature index,
then lowest threshold).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .choices import ChoiceLabel, ChoiceRecord
from .llm import Prediction

log = logging.getLogger(__name__)

POSITIVE = ChoiceLabel.ABANDON  # class 1


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class FeatureEncoder:
    """One-hot map for the two categorical features, numeric passthrough."""

    v1_categories: tuple[str, ...]
    v2_categories: tuple[str, ...]

    @classmethod
    def fit(cls, records: Sequence[ChoiceRecord]) -> "FeatureEncoder":
        return cls(
            v1_categories=tuple(sorted({r.v1.value for r in records})),
            v2_categories=tuple(sorted({r.v2.value for r in records})),
        )

    @property
    def feature_names(self) -> tuple[str, ...]:
        return (
            tuple(f"v1={c}" for c in self.v1_categories)
            + tuple(f"v2={c}" for c in self.v2_categories)
            + ("p1", "p2", "p3")
        )

    def transform(self, records: Sequence[ChoiceRecord]) -> np.ndarray:
        rows = np.zeros((len(records), len(self.feature_names)), dtype=float)
        unseen: set[str] = set()
        n1, n2 = len(self.v1_categories), len(self.v2_categories)
        for i, r in enumerate(records):
            if r.v1.value in self.v1_categories:
                rows[i, self.v1_categories.index(r.v1.value)] = 1.0
            else:
                unseen.add(f"v1={r.v1.value}")
            if r.v2.value in self.v2_categories:
                rows[i, n1 + self.v2_categories.index(r.v2.value)] = 1.0
            else:
                unseen.add(f"v2={r.v2.value}")
            rows[i, n1 + n2 + 0] = r.p1
            rows[i, n1 + n2 + 1] = 1.0 if r.p2 else 0.0
            rows[i, n1 + n2 + 2] = r.p3
        for cat in sorted(unseen):
            log.warning("category %s unseen in training, encoded as all-zero", cat)
        return rows


def labels_to_array(records: Sequence[ChoiceRecord]) -> np.ndarray:
    y = np.zeros(len(records), dtype=int)
    for i, r in enumerate(records):
        if r.label is None:
            raise TrainingError(f"record {r.key} has no label")
        y[i] = 1 if r.label == POSITIVE else 0
    return y


# ---------------------------------------------------------------------------
# Decision trees


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0  # majority class for classification, leaf value for regression

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def structure(self) -> str:
        if self.is_leaf:
            return f"leaf({self.value:.6g})"
        return f"[x{self.feature}<={self.threshold:.6g} {self.left.structure()} {self.right.structure()}]"


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return 1.0 - float((p * p).sum())


def best_gini_split(
    x: np.ndarray, y: np.ndarray, min_samples_leaf: int = 1
) -> tuple[int, float, float] | None:
    """Exhaustive Gini split search: (feature, threshold, gain) or None.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values per feature. Ties keep the first candidate found scanning
    features ascending, thresholds ascending.
    """
    n, d = x.shape
    parent_counts = np.bincount(y, minlength=2).astype(float)
    parent_impurity = _gini(parent_counts)
    best: tuple[int, float, float] | None = None
    for j in range(d):
        order = np.argsort(x[:, j], kind="stable")
        xs, ys = x[order, j], y[order]
        left_counts = np.zeros(2)
        right_counts = parent_counts.copy()
        for i in range(n - 1):
            left_counts[ys[i]] += 1
            right_counts[ys[i]] -= 1
            if xs[i] == xs[i + 1]:
                continue
            n_left = i + 1
            n_right = n - n_left
            if n_left < min_samples_leaf or n_right < min_samples_leaf:
                continue
            weighted = (n_left * _gini(left_counts) + n_right * _gini(right_counts)) / n
            gain = parent_impurity - weighted
            if gain > 1e-12 and (best is None or gain > best[2] + 1e-12):
                threshold = (xs[i] + xs[i + 1]) / 2.0
                best = (j, threshold, gain)
    return best


def _grow_classifier(
    x: np.ndarray, y: np.ndarray, depth: int, max_depth: int, min_samples_leaf: int
) -> TreeNode:
    counts = np.bincount(y, minlength=2)
    majority = 0 if counts[0] >= counts[1] else 1
    if depth >= max_depth or counts.min() == 0 or len(y) < 2 * min_samples_leaf:
        return TreeNode(value=float(majority))
    split = best_gini_split(x, y, min_samples_leaf)
    if split is None:
        return TreeNode(value=float(majority))
    j, t, _ = split
    mask = x[:, j] <= t
    return TreeNode(
        feature=j,
        threshold=t,
        left=_grow_classifier(x[mask], y[mask], depth + 1, max_depth, min_samples_leaf),
        right=_grow_classifier(x[~mask], y[~mask], depth + 1, max_depth, min_samples_leaf),
        value=float(majority),
    )


def _predict_node(node: TreeNode, row: np.ndarray) -> float:
    while not node.is_leaf:
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.value


@dataclass
class DecisionTree:
    max_depth: int = 8
    min_samples_leaf: int = 1
    root: TreeNode | None = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "DecisionTree":
        self.root = _grow_classifier(x, y, 0, self.max_depth, self.min_samples_leaf)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.array([_predict_node(self.root, row) for row in x], dtype=int)

    def structure(self) -> str:
        return self.root.structure()


def best_variance_split(
    x: np.ndarray, target: np.ndarray, min_samples_leaf: int = 1
) -> tuple[int, float, float] | None:
    """Exhaustive MSE-reduction split for regression trees."""
    n, d = x.shape
    total_sum = target.sum()
    total_sq = (target**2).sum()
    parent_sse = total_sq - total_sum**2 / n
    best: tuple[int, float, float] | None = None
    for j in range(d):
        order = np.argsort(x[:, j], kind="stable")
        xs, ts = x[order, j], target[order]
        left_sum = 0.0
        left_sq = 0.0
        for i in range(n - 1):
            left_sum += ts[i]
            left_sq += ts[i] ** 2
            if xs[i] == xs[i + 1]:
                continue
            n_left = i + 1
            n_right = n - n_left
            if n_left < min_samples_leaf or n_right < min_samples_leaf:
                continue
            right_sum = total_sum - left_sum
            right_sq = total_sq - left_sq
            sse = (left_sq - left_sum**2 / n_left) + (right_sq - right_sum**2 / n_right)
            gain = parent_sse - sse
            if gain > 1e-12 and (best is None or gain > best[2] + 1e-12):
                best = (j, (xs[i] + xs[i + 1]) / 2.0, gain)
    return best


def _grow_regressor(
    x: np.ndarray,
    residual: np.ndarray,
    hessian: np.ndarray,
    depth: int,
    max_depth: int,
    min_samples_leaf: int,
) -> TreeNode:
    # Newton step per leaf: sum of gradients over sum of hessians.
    leaf_value = float(residual.sum() / max(hessian.sum(), 1e-12))
    if depth >= max_depth or len(residual) < 2 * min_samples_leaf:
        return TreeNode(value=leaf_value)
    split = best_variance_split(x, residual, min_samples_leaf)
    if split is None:
        return TreeNode(value=leaf_value)
    j, t, _ = split
    mask = x[:, j] <= t
    return TreeNode(
        feature=j,
        threshold=t,
        left=_grow_regressor(x[mask], residual[mask], hessian[mask], depth + 1, max_depth, min_samples_leaf),
        right=_grow_regressor(x[~mask], residual[~mask], hessian[~mask], depth + 1, max_depth, min_samples_leaf),
        value=leaf_value,
    )


# ---------------------------------------------------------------------------
# Ensembles


@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = 50
    max_depth: int = 8
    min_samples_leaf: int = 1
    bagging: bool = True
    learning_rate: float = 0.1  # boosting only
    boost_depth: int = 3  # boosting trees stay shallow


@dataclass
class TreeEnsembleModel:
    kind: str  # "RandomForest" | "GradientBoosted"
    encoder: FeatureEncoder
    seed: int
    hyperparams: Hyperparams
    trees: list[DecisionTree | TreeNode] = field(default_factory=list)
    base_score: float = 0.0  # boosting log-odds init
    degenerate: bool = False
    constant_class: int = 0

    def structure(self) -> str:
        parts = [t.structure() for t in self.trees]
        return f"{self.kind}(base={self.base_score:.6g};{';'.join(parts)})"


def fit_tree_ensemble(
    train: Sequence[ChoiceRecord],
    kind: str = "RandomForest",
    hyperparams: Hyperparams | None = None,
    seed: int = 0,
) -> TreeEnsembleModel:
    """Train a forest or boosted ensemble; reproducible given the seed.

    A single-class training set produces a constant model flagged
    degenerate instead of failing.
    """
    if not train:
        raise TrainingError("empty training set")
    if kind not in ("RandomForest", "GradientBoosted"):
        raise TrainingError(f"unknown ensemble kind {kind!r}")
    hp = hyperparams or Hyperparams()
    encoder = FeatureEncoder.fit(train)
    x = encoder.transform(train)
    y = labels_to_array(train)
    model = TreeEnsembleModel(kind=kind, encoder=encoder, seed=seed, hyperparams=hp)

    if y.min() == y.max():
        model.degenerate = True
        model.constant_class = int(y[0])
        log.warning("single-class training set: constant %s model", kind)
        return model

    rng = np.random.default_rng(seed)
    if kind == "RandomForest":
        for _ in range(hp.n_trees):
            if hp.bagging:
                idx = rng.integers(0, len(y), size=len(y))
                xt, yt = x[idx], y[idx]
                if yt.min() == yt.max():
                    # Degenerate bootstrap: a stump predicting its only class.
                    tree = DecisionTree(hp.max_depth, hp.min_samples_leaf)
                    tree.root = TreeNode(value=float(yt[0]))
                    model.trees.append(tree)
                    continue
            else:
                xt, yt = x, y
            model.trees.append(DecisionTree(hp.max_depth, hp.min_samples_leaf).fit(xt, yt))
    else:
        pos = float(y.mean())
        model.base_score = math.log(pos / (1.0 - pos))
        scores = np.full(len(y), model.base_score)
        for _ in range(hp.n_trees):
            p = 1.0 / (1.0 + np.exp(-scores))
            residual = y - p
            hessian = p * (1.0 - p)
            root = _grow_regressor(x, residual, hessian, 0, hp.boost_depth, hp.min_samples_leaf)
            model.trees.append(root)
            scores = scores + hp.learning_rate * np.array([_predict_node(root, row) for row in x])
    return model


def _model_scores(model: TreeEnsembleModel, x: np.ndarray) -> np.ndarray:
    if model.kind == "RandomForest":
        votes = np.zeros(len(x))
        for tree in model.trees:
            votes += tree.predict(x)
        return votes / len(model.trees)
    scores = np.full(len(x), model.base_score)
    for root in model.trees:
        scores = scores + model.hyperparams.learning_rate * np.array(
            [_predict_node(root, row) for row in x]
        )
    return 1.0 / (1.0 + np.exp(-scores))


def predict_with_model(
    model: TreeEnsembleModel, records: Sequence[ChoiceRecord], backend_id: str | None = None
) -> list[Prediction]:
    """Pure, deterministic predictions with empty rationales.

    Vote and probability ties resolve to the negative class (Wait).
    """
    backend_id = backend_id or ("rf" if model.kind == "RandomForest" else "gbt")
    if model.degenerate:
        label = POSITIVE if model.constant_class == 1 else ChoiceLabel.WAIT
        return [Prediction(r.card_id, r.event_id, label, "", backend_id) for r in records]
    x = model.encoder.transform(records)
    scores = _model_scores(model, x)
    out = []
    for r, s in zip(records, scores):
        label = POSITIVE if s > 0.5 else ChoiceLabel.WAIT
        out.append(Prediction(r.card_id, r.event_id, label, "", backend_id))
    return out


@dataclass
class MajorityBaseline:
    """Always predicts the most frequent training class (ties favor Wait)."""

    majority: ChoiceLabel = ChoiceLabel.WAIT

    @classmethod
    def fit(cls, train: Sequence[ChoiceRecord]) -> "MajorityBaseline":
        y = labels_to_array(train)
        return cls(majority=POSITIVE if y.sum() * 2 > len(y) else ChoiceLabel.WAIT)

    def predict(self, records: Sequence[ChoiceRecord]) -> list[Prediction]:
        return [
            Prediction(r.card_id, r.event_id, self.majority, "", "majority") for r in records
        ]
