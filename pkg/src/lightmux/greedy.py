"""Greedy, accuracy-driven growth of an illumination matrix."""
import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import LightmuxError, ParameterError
from .evaluation import FeatureCache, default_featurizer, repeated_split_accuracy, train_final_classifier
from .multiplex import IlluminationMatrix
from .noise import CameraSettings
from .relight import DEFAULT_GAIN_BOUNDS, DEFAULT_TARGET_FRACTION, select_gain


def binary_candidates(n):
    """Every non-zero state in {0, 1}^n, in lexicographic order."""
    return [np.array(bits, dtype=np.float64)
            for bits in itertools.product((0, 1), repeat=n) if any(bits)]


def candidate_key(accuracy, w):
    """Sort key: higher accuracy, then fewer lit illuminants, then lexicographic."""
    return (-accuracy, int(np.sum(w)), tuple(int(v) for v in w))


@dataclass
class GreedyTrace:
    columns: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    improved: list = field(default_factory=list)
    classifiers: list = field(default_factory=list)
    candidate_scores: list = field(default_factory=list)
    candidate_evaluations: int = 0

    def __len__(self):
        return len(self.columns)

    @property
    def matrix(self):
        return IlluminationMatrix(np.column_stack(self.columns), binary=True)

    def save(self, dir_path, comments=()):
        """Write matrix.csv, trace.csv and one classifier container per prefix."""
        dir_path = Path(dir_path)
        (dir_path / "classifiers").mkdir(parents=True, exist_ok=True)
        self.matrix.to_csv(dir_path / "matrix.csv", comments)
        with open(dir_path / "trace.csv", "w", newline="", encoding="utf-8") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["prefix", "accuracy", "improved", "gain_db"])
            for k, (acc, imp, g) in enumerate(zip(self.accuracies, self.improved, self.gains), 1):
                out.writerow([k, f"{acc:.6f}", int(imp), f"{g:.6f}"])
        with open(dir_path / "candidates.csv", "w", newline="", encoding="utf-8") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["prefix", "candidate", "accuracy", "gain_db"])
            for k, scores in enumerate(self.candidate_scores, 1):
                for w, acc, g in scores:
                    out.writerow([k, "".join(str(int(v)) for v in w), f"{acc:.6f}", f"{g:.6f}"])
        for k, clf in enumerate(self.classifiers, 1):
            clf.save(dir_path / "classifiers" / f"prefix_{k:02d}.npz", getattr(clf, "layout_", None))


def effective_prefix(trace):
    """Length of the prefix ending at the last column that improved accuracy."""
    flags = trace.improved if isinstance(trace, GreedyTrace) else list(trace)
    if not flags:
        raise ParameterError("empty trace")
    last = [k for k, f in enumerate(flags, 1) if f]
    return max(last) if last else 1


def _score(dataset, W, noise, exposure, repeats, train_frac, base_seed, featurizer, C,
           gray_max, target_fraction, gain_bounds, cache):
    gain = select_gain(dataset, W, exposure, target_fraction, gain_bounds, gray_max)
    res = repeated_split_accuracy(
        dataset, W, noise, CameraSettings(gain, exposure), repeats, train_frac,
        base_seed, featurizer, C, gray_max, cache,
    )
    return res


def greedy_select(
    dataset,
    noise,
    exposure,
    n_max,
    repeats=400,
    base_seed=0,
    min_improvement=0.0,
    train_frac=0.75,
    featurizer=None,
    C=1.0,
    gray_max=255,
    target_fraction=DEFAULT_TARGET_FRACTION,
    gain_bounds=DEFAULT_GAIN_BOUNDS,
    n_jobs=1,
    keep_classifiers=True,
    progress=None,
):
    """Grow a binary illumination matrix one column at a time.

    Every non-zero binary state is appended to the current prefix and scored
    by repeated-split accuracy, with the gain re-selected for each candidate
    matrix. All candidates share the same noise streams. The best candidate
    is kept even if it does not beat the best earlier prefix; its
    ``improved`` flag records whether it did by more than `min_improvement`.
    """
    if not len(dataset):
        raise ParameterError("dataset is empty")
    if n_max < 1:
        raise ParameterError("n_max must be >= 1")
    if featurizer is None:
        featurizer = default_featurizer(dataset.shape)
    n = dataset.n_illuminants
    candidates = binary_candidates(n)
    trace = GreedyTrace()
    best_so_far = 0.0
    cache = FeatureCache() if n_jobs == 1 else None
    for k in range(1, n_max + 1):
        prefix = trace.columns

        def run(w):
            W = np.column_stack(prefix + [w])
            try:
                return _score(dataset, W, noise, exposure, repeats, train_frac, base_seed,
                              featurizer, C, gray_max, target_fraction, gain_bounds, cache)
            except LightmuxError as exc:
                raise type(exc)(f"column {k}, candidate {w.astype(int).tolist()}: {exc}") from exc

        if n_jobs == 1:
            results = [run(w) for w in candidates]
        else:
            results = Parallel(n_jobs=n_jobs)(delayed(run)(w) for w in candidates)
        trace.candidate_evaluations += len(candidates)
        scores = [(w, r.mean, r.gain) for w, r in zip(candidates, results)]
        trace.candidate_scores.append(scores)
        best = min(range(len(candidates)), key=lambda i: candidate_key(results[i].mean, candidates[i]))
        acc = results[best].mean
        trace.columns.append(candidates[best])
        trace.accuracies.append(acc)
        trace.gains.append(results[best].gain)
        trace.improved.append(bool(acc > best_so_far + min_improvement))
        best_so_far = max(best_so_far, acc)
        if keep_classifiers:
            W = np.column_stack(trace.columns)
            trace.classifiers.append(train_final_classifier(
                dataset, W, noise, CameraSettings(results[best].gain, exposure),
                base_seed, featurizer, C, gray_max,
            ))
        if progress is not None:
            progress(k, candidates[best], acc)
    return trace


def evaluate_matrix(
    dataset,
    W,
    noise,
    exposure,
    repeats=400,
    base_seed=0,
    train_frac=0.75,
    featurizer=None,
    C=1.0,
    gray_max=255,
    target_fraction=DEFAULT_TARGET_FRACTION,
    gain_bounds=DEFAULT_GAIN_BOUNDS,
):
    """Repeated-split accuracy of every prefix ``W[:, :m]``, m = 1..M."""
    W = W.W if isinstance(W, IlluminationMatrix) else np.asarray(W, dtype=np.float64)
    if featurizer is None:
        featurizer = default_featurizer(dataset.shape)
    cache = FeatureCache()
    return [
        _score(dataset, W[:, :m], noise, exposure, repeats, train_frac, base_seed, featurizer,
               C, gray_max, target_fraction, gain_bounds, cache)
        for m in range(1, W.shape[1] + 1)
    ]


class GreedyPatternSelector(ClassifierMixin, BaseEstimator):
    """Jointly select binary illumination patterns and a classifier.

    `fit` takes a :class:`~lightmux.scene.Dataset`; `predict` takes captured
    image sequences ``(n_samples, m, H, W)`` acquired with the first ``m``
    columns of `matrix_`, and uses the classifier trained for that prefix.
    """

    def __init__(
        self,
        noise=None,
        exposure=22.5,
        n_max=8,
        repeats=400,
        train_frac=0.75,
        min_improvement=0.0,
        C=1.0,
        random_state=0,
        featurizer=None,
        gray_max=255,
        target_fraction=DEFAULT_TARGET_FRACTION,
        gain_bounds=DEFAULT_GAIN_BOUNDS,
        n_jobs=1,
    ):
        self.noise = noise
        self.exposure = exposure
        self.n_max = n_max
        self.repeats = repeats
        self.train_frac = train_frac
        self.min_improvement = min_improvement
        self.C = C
        self.random_state = random_state
        self.featurizer = featurizer
        self.gray_max = gray_max
        self.target_fraction = target_fraction
        self.gain_bounds = gain_bounds
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        if self.noise is None:
            raise ParameterError("a NoiseModel is required")
        self.featurizer_ = self.featurizer or default_featurizer(X.shape)
        self.trace_ = greedy_select(
            X, self.noise, self.exposure, self.n_max, self.repeats, self.random_state,
            self.min_improvement, self.train_frac, self.featurizer_, self.C, self.gray_max,
            self.target_fraction, self.gain_bounds, self.n_jobs,
        )
        self.matrix_ = self.trace_.matrix
        self.classes_ = np.array(X.classes)
        self.effective_prefix_ = effective_prefix(self.trace_)
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = np.asarray(X)
        m = X.shape[1]
        if not 1 <= m <= len(self.trace_):
            raise ParameterError(f"sequences of {m} images; trained prefixes are 1..{len(self.trace_)}")
        feats = self.featurizer_.fit(X).transform(X).astype(np.float32).astype(np.float64)
        return self.trace_.classifiers[m - 1].predict(feats)
