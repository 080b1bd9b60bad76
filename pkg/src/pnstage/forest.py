"""Random forest over slide feature vectors, written from scratch.

Bagged CART trees: each tree trains on a bootstrap resample, each split
considers a small random subset of features and picks the threshold (a
midpoint between consecutive distinct sorted values) minimizing weighted
Gini impurity. Left branch takes ``feature <= threshold``. Prediction
averages leaf class histograms across trees; ties go to the lower class
index (severity order). Every tree draws from its own RNG stream derived
from (seed, tree index), so parallel and serial training agree.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .staging import NodeClass

N_CLASSES = 4
FEATURE_COUNT = 11
MODEL_FORMAT = "pnstage-forest"
MODEL_VERSION = 1
_GINI_EPS = 1e-12


class EmptyTrainingSet(Exception):
    """No samples to train on."""


class TooFewPatients(Exception):
    """Fewer distinct patients than requested folds."""


class CorruptModel(Exception):
    """Model file unreadable or structurally invalid."""


class VersionMismatch(Exception):
    """Model file written by an incompatible format version."""


class DimensionMismatch(Exception):
    """Input feature vector length differs from the model's."""


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: int = 3
    class_weight: str | None = None  # None or "balanced"


@dataclass
class DecisionTree:
    """Nodes as dicts: internal {"f", "t", "l", "r"}, leaf {"p": [probs]}."""

    nodes: list


@dataclass
class ForestModel:
    trees: list
    seed: int
    params: ForestParams
    n_classes: int = N_CLASSES
    feature_count: int = FEATURE_COUNT


def gini(counts: np.ndarray) -> float:
    """Gini impurity of a (possibly weighted) class count vector."""
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p * p).sum())


def _leaf(hist: np.ndarray) -> dict:
    total = hist.sum()
    p = hist / total if total > 0 else np.full(len(hist), 1.0 / len(hist))
    return {"p": [float(v) for v in p]}


def _best_split(X, y, w, idx, feats, min_leaf):
    """Best (score, feature, threshold, left_idx, right_idx) over feats.

    Features are visited in ascending order and thresholds in ascending
    order, and a candidate must be strictly better to replace the current
    best, so ties resolve to the lower feature index, then threshold.
    """
    best = None
    for f in np.sort(feats):
        order = idx[np.argsort(X[idx, f], kind="stable")]
        xs = X[order, f]
        if xs[0] == xs[-1]:
            continue
        onehot = np.zeros((len(order), N_CLASSES))
        onehot[np.arange(len(order)), y[order]] = w[order]
        cum = np.cumsum(onehot, axis=0)
        total = cum[-1]
        left_w = cum.sum(axis=1)
        right_w = left_w[-1] - left_w
        left_sq = (cum * cum).sum(axis=1)
        rightc = total - cum
        right_sq = (rightc * rightc).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = ((left_w - left_sq / left_w)
                     + (right_w - right_sq / right_w)) / left_w[-1]
        cut = np.arange(1, len(order))  # left takes order[:cut]
        valid = (xs[1:] > xs[:-1]) & (cut >= min_leaf) \
            & (len(order) - cut >= min_leaf)
        if not valid.any():
            continue
        scores = score[:-1]
        cand = np.where(valid, scores, np.inf)
        pos = int(np.argmin(cand))
        sc = float(cand[pos])
        if best is None or sc < best[0]:
            thr = (xs[pos] + xs[pos + 1]) / 2.0
            if not xs[pos] <= thr < xs[pos + 1]:
                thr = xs[pos]
            best = (sc, int(f), float(thr), order[:pos + 1], order[pos + 1:])
    return best


def _build(nodes, X, y, w, idx, depth, rng, params):
    hist = np.bincount(y[idx], weights=w[idx], minlength=N_CLASSES)
    node_id = len(nodes)
    nodes.append(None)
    parent_gini = gini(hist)
    done = (parent_gini == 0.0
            or len(idx) < 2 * params.min_samples_leaf
            or (params.max_depth is not None and depth >= params.max_depth))
    if not done:
        k = min(params.features_per_split, X.shape[1])
        feats = rng.choice(X.shape[1], size=k, replace=False)
        best = _best_split(X, y, w, idx, feats, params.min_samples_leaf)
        if best is not None and best[0] < parent_gini - _GINI_EPS:
            _, f, thr, left, right = best
            l_id = _build(nodes, X, y, w, left, depth + 1, rng, params)
            r_id = _build(nodes, X, y, w, right, depth + 1, rng, params)
            nodes[node_id] = {"f": f, "t": thr, "l": l_id, "r": r_id}
            return node_id
    nodes[node_id] = _leaf(hist)
    return node_id


def _as_matrix(samples):
    X = np.empty((len(samples), 0))
    ys = []
    rows = []
    for fv, cls in samples:
        vec = fv.as_array() if hasattr(fv, "as_array") else np.asarray(fv, float)
        rows.append(vec)
        ys.append(int(cls))
    if rows:
        X = np.vstack(rows)
    return X, np.array(ys, dtype=np.int64)


def train_forest(samples: list, params: ForestParams | None = None,
                 seed: int = 0) -> ForestModel:
    """Train on (feature_vector, NodeClass) pairs.

    Degenerate inputs (a single sample, or a single class) yield a
    constant model with a warning rather than an error.
    """
    params = params or ForestParams()
    if not samples:
        raise EmptyTrainingSet("no training samples")
    X, y = _as_matrix(samples)
    n, d = X.shape
    if n < 2 or len(np.unique(y)) < 2:
        warnings.warn("degenerate training set; returning a constant model",
                      stacklevel=2)
        hist = np.bincount(y, minlength=N_CLASSES).astype(float)
        tree = DecisionTree(nodes=[_leaf(hist)])
        return ForestModel(trees=[tree], seed=seed, params=params,
                           feature_count=d)

    if params.class_weight == "balanced":
        counts = np.bincount(y, minlength=N_CLASSES).astype(float)
        present = counts > 0
        w_class = np.zeros(N_CLASSES)
        w_class[present] = n / (present.sum() * counts[present])
        w = w_class[y]
    elif params.class_weight is None:
        w = np.ones(n)
    else:
        raise ValueError(f"unknown class_weight {params.class_weight!r}")

    trees = []
    for i in range(params.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        boot = rng.integers(0, n, size=n)
        nodes: list = []
        _build(nodes, X, y, w, boot, 0, rng, params)
        trees.append(DecisionTree(nodes=nodes))
    return ForestModel(trees=trees, seed=seed, params=params, feature_count=d)


def _tree_probs(tree: DecisionTree, x: np.ndarray) -> np.ndarray:
    node = tree.nodes[0]
    while "p" not in node:
        node = tree.nodes[node["l"] if x[node["f"]] <= node["t"] else node["r"]]
    return np.asarray(node["p"])


def predict(model: ForestModel, fv) -> tuple:
    """(NodeClass, class probabilities) for one feature vector."""
    x = fv.as_array() if hasattr(fv, "as_array") else np.asarray(fv, float)
    if x.shape != (model.feature_count,):
        raise DimensionMismatch(
            f"feature vector shape {x.shape}, model expects "
            f"({model.feature_count},)")
    probs = np.zeros(model.n_classes)
    for tree in model.trees:
        probs += _tree_probs(tree, x)
    probs /= len(model.trees)
    return NodeClass(int(np.argmax(probs))), probs


def predict_batch(model: ForestModel, fvs: list) -> list:
    return [predict(model, fv)[0] for fv in fvs]


@dataclass
class CVResult:
    fold_accuracies: list
    mean_accuracy: float
    predictions: list  # NodeClass per sample, from its held-out fold
    folds: list  # list of patient-id lists


def cross_validate(samples: list, patient_ids: list, k: int = 5,
                   params: ForestParams | None = None, seed: int = 0) -> CVResult:
    """k-fold cross-validation with patient-level folds.

    Folds are stratified by each patient's worst (most severe) class so
    rare classes spread across folds; all slides of a patient land in the
    same fold. Reports slide-level accuracy per fold plus the held-out
    prediction for every sample.
    """
    if len(samples) != len(patient_ids):
        raise ValueError("samples and patient_ids length mismatch")
    X, y = _as_matrix(samples)
    severity: dict = {}
    for pid, cls in zip(patient_ids, y):
        severity[pid] = max(severity.get(pid, 0), int(cls))
    patients = sorted(severity)
    if k < 2 or k > len(patients):
        raise TooFewPatients(f"k={k} with {len(patients)} distinct patients")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CF01D]))
    folds: list = [[] for _ in range(k)]
    slot = 0
    for sev in sorted(set(severity.values())):
        group = [p for p in patients if severity[p] == sev]
        for j in rng.permutation(len(group)):
            folds[slot % k].append(group[j])
            slot += 1

    fold_of = {p: i for i, ps in enumerate(folds) for p in ps}
    sample_fold = np.array([fold_of[p] for p in patient_ids])
    predictions: list = [None] * len(samples)
    accuracies = []
    for i in range(k):
        test = np.where(sample_fold == i)[0]
        train = np.where(sample_fold != i)[0]
        model = train_forest([(X[j], y[j]) for j in train], params,
                             seed=seed + i + 1)
        preds = [predict(model, X[j])[0] for j in test]
        for j, p in zip(test, preds):
            predictions[j] = p
        accuracies.append(float(np.mean([int(p) == y[j]
                                         for j, p in zip(test, preds)])))
    return CVResult(fold_accuracies=accuracies,
                    mean_accuracy=float(np.mean(accuracies)),
                    predictions=predictions,
                    folds=folds)


def save_model(path, model: ForestModel) -> None:
    """Versioned JSON with explicit node arrays; bytes are deterministic
    for a given model (sorted keys, repr-exact floats)."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "seed": model.seed,
        "n_classes": model.n_classes,
        "feature_count": model.feature_count,
        "params": asdict(model.params),
        "trees": [{"nodes": t.nodes} for t in model.trees],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_model(path) -> ForestModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptModel(f"cannot read model {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise CorruptModel(f"{path} is not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatch(
            f"model version {doc.get('version')}, supported {MODEL_VERSION}")
    try:
        params = ForestParams(**doc["params"])
        trees = [DecisionTree(nodes=t["nodes"]) for t in doc["trees"]]
        return ForestModel(trees=trees, seed=doc["seed"], params=params,
                           n_classes=doc["n_classes"],
                           feature_count=doc["feature_count"])
    except (KeyError, TypeError) as exc:
        raise CorruptModel(f"model {path} is structurally invalid: {exc}") from exc
