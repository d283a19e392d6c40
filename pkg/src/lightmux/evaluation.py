"""Repeated stratified train/test evaluation of an illumination matrix.

Noise for repeat ``r``, model ``i`` and acquisition column ``j`` is drawn
from stream ``(base_seed, r, i, j)``. Streams therefore do not depend on
which other columns are present, so comparisons between candidate matrices
that share a prefix see identical noise on the shared columns.
"""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ._rng import counter_normal, derive_seed
from ._validation import check_matrix
from .errors import ParameterError, StratificationError
from .features import HOGTransformer, hog_layout
from .noise import generalize
from .relight import intensity_scale
from .svm import OneVsOneLinearSVC


@dataclass
class SplitAccuracy:
    """Outcome of repeated train/test evaluation of one matrix."""

    mean: float
    per_class: np.ndarray
    per_repeat: np.ndarray
    class_counts: np.ndarray
    classes: list
    gain: float = float("nan")

    @property
    def std_error(self):
        r = len(self.per_repeat)
        return float(self.per_repeat.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0


class FeatureCache:
    """Bounded FIFO store of per-column rendered features."""

    def __init__(self, max_bytes=1 << 30):
        self.max_bytes = max_bytes
        self._store = OrderedDict()
        self._bytes = 0
        self.hits = 0
        self.misses = 0

    def get(self, key):
        value = self._store.get(key)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def put(self, key, value):
        self._store[key] = value
        self._bytes += value.nbytes
        while self._bytes > self.max_bytes and len(self._store) > 1:
            _, old = self._store.popitem(last=False)
            self._bytes -= old.nbytes


def default_featurizer(shape):
    """Full-size HOG (120 px, 12 px cells, 10-cell blocks) when it fits, else a coarser grid."""
    side = min(120, shape[0], shape[1])
    cell = max(side // 10, 1)
    try:
        hog_layout((side, side), cell, 10, 9)
        return HOGTransformer(side=side, cell=cell, block=10, bins=9)
    except ParameterError:
        return HOGTransformer(side=side, cell=max(side // 4, 1), block=4, bins=9)


def _stack(dataset):
    stack = getattr(dataset, "_L_stack", None)
    if stack is None:
        stack = np.stack([m.L for m in dataset.models])
        dataset._L_stack = stack
    return stack


def render_column(dataset, w, settings, noise, seeds, gray_max=255):
    """Noisy images of every model under one illumination state, ``(n, H, W)``."""
    L = _stack(dataset)
    scale = np.array([intensity_scale(m, settings) for m in dataset.models])
    mean = (L @ np.asarray(w, dtype=np.float64)) * scale[:, None]
    local = generalize(noise, settings)
    var = local.sigma_p2 * mean + local.sigma_r2
    z = counter_normal(np.asarray(seeds, dtype=np.uint64)[:, None], np.arange(mean.shape[1])[None, :])
    pixels = np.rint(np.clip(mean + np.sqrt(var) * z, 0, gray_max))
    return pixels.reshape((len(dataset.models),) + dataset.shape)


def render_seeds(base_seed, repeat, column, n_models):
    return [derive_seed(base_seed, "render", repeat, i, column) for i in range(n_models)]


def column_features(dataset, w, column, settings, noise, repeats, base_seed,
                    featurizer, gray_max=255, cache=None):
    """Features of acquisition `column` under state `w` for every repeat, ``(R, n, F)``."""
    key = None
    if cache is not None:
        key = (column, np.asarray(w, dtype=np.float64).tobytes(), settings.gain,
               settings.exposure, repeats, base_seed)
        hit = cache.get(key)
        if hit is not None:
            return hit
    n = len(dataset.models)
    out = []
    for r in range(repeats):
        imgs = render_column(dataset, w, settings, noise, render_seeds(base_seed, r, column, n), gray_max)
        out.append(featurizer.fit(imgs[:, None]).transform(imgs[:, None]).astype(np.float32))
    out = np.stack(out)
    if cache is not None:
        cache.put(key, out)
    return out


def stratified_split(labels, train_frac, seed):
    """Per-class random split; each class keeps at least one sample on each side."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise StratificationError(f"class index {c} has {len(idx)} sample(s); need >= 2")
        n_test = min(max(int(round(len(idx) * (1.0 - train_frac))), 1), len(idx) - 1)
        perm = rng.permutation(idx)
        test.append(perm[:n_test])
        train.append(perm[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def repeated_split_accuracy(
    dataset,
    W,
    noise,
    settings,
    repeats=400,
    train_frac=0.75,
    base_seed=0,
    featurizer=None,
    C=1.0,
    gray_max=255,
    cache=None,
):
    """Mean test accuracy over `repeats` re-rendered stratified splits.

    Every repeat draws fresh noise for all samples, splits each class at
    `train_frac`, trains a one-vs-one linear SVM and scores the held-out part.
    """
    W = check_matrix(W, dataset.n_illuminants)
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    if not 0 < train_frac < 1:
        raise ParameterError("train_frac must lie in (0, 1)")
    if featurizer is None:
        featurizer = default_featurizer(dataset.shape)
    labels = dataset.labels
    n_classes = len(dataset.classes)
    # validate stratification before rendering anything
    stratified_split(labels, train_frac, 0)
    blocks = [
        column_features(dataset, W[:, j], j, settings, noise, repeats, base_seed,
                        featurizer, gray_max, cache)
        for j in range(W.shape[1])
    ]
    correct = np.zeros(n_classes)
    tested = np.zeros(n_classes)
    per_repeat = np.empty(repeats)
    for r in range(repeats):
        X = np.concatenate([b[r] for b in blocks], axis=1).astype(np.float64)
        train, test = stratified_split(labels, train_frac, derive_seed(base_seed, "split", r))
        clf = OneVsOneLinearSVC(C=C, random_state=derive_seed(base_seed, "svm", r))
        pred = clf.fit(X[train], labels[train]).predict(X[test])
        hit = pred == labels[test]
        per_repeat[r] = hit.mean()
        np.add.at(correct, labels[test], hit)
        np.add.at(tested, labels[test], 1)
    return SplitAccuracy(
        float(per_repeat.mean()),
        np.divide(correct, tested, out=np.full(n_classes, np.nan), where=tested > 0),
        per_repeat,
        tested,
        list(dataset.classes),
        float(settings.gain),
    )


def train_final_classifier(dataset, W, noise, settings, base_seed, featurizer=None,
                           C=1.0, gray_max=255):
    """Classifier fit on one rendering of the whole dataset (for later inference)."""
    W = check_matrix(W, dataset.n_illuminants)
    if featurizer is None:
        featurizer = default_featurizer(dataset.shape)
    n = len(dataset.models)
    seq = np.stack([
        render_column(dataset, W[:, j], settings, noise,
                      [derive_seed(base_seed, "final", i, j) for i in range(n)], gray_max)
        for j in range(W.shape[1])
    ], axis=1)
    featurizer.fit(seq)
    X = featurizer.transform(seq).astype(np.float32).astype(np.float64)
    clf = OneVsOneLinearSVC(C=C, random_state=derive_seed(base_seed, "final-svm"))
    clf.fit(X, np.array(dataset.classes)[dataset.labels])
    clf.layout_ = featurizer.layout_
    return clf
