"""One-vs-one linear soft-margin SVM trained by dual coordinate ascent."""
import json
from itertools import combinations
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import derive_seed
from .errors import ContainerError, ParameterError

CONTAINER_FORMAT = "lightmux-ovo-linear-svc"
CONTAINER_VERSION = 1


def dual_cd_hinge(X, y, C=1.0, tol=1e-3, max_iter=1000, seed=0):
    """Solve the bias-augmented L1-loss SVM dual by coordinate ascent.

    Works on the Gram matrix, so cost per sweep is O(n^2) regardless of the
    feature dimension. Stops when the spread of projected gradients falls
    below `tol`. Returns ``(w, b, alpha, n_sweeps)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    K = X @ X.T + 1.0
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    f = np.zeros(n)  # f = K @ (alpha * y)
    rng = np.random.default_rng(seed)
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        pg_max, pg_min = -np.inf, np.inf
        for i in rng.permutation(n):
            g = y[i] * f[i] - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= C:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0 and diag[i] > 0:
                new = min(max(a - g / diag[i], 0.0), C)
                if new != a:
                    alpha[i] = new
                    f += ((new - a) * y[i]) * K[:, i]
        if pg_max - pg_min < tol:
            break
    coef = alpha * y
    return coef @ X, float(coef.sum()), alpha, sweeps


class OneVsOneLinearSVC(ClassifierMixin, BaseEstimator):
    """Multi-class linear SVM: one hyperplane per class pair, majority vote.

    Features are standardized with training-set statistics before solving.
    Vote ties go to the class with the larger summed signed margin, then to
    the lower class index.

    Parameters
    ----------
    C : float
        Soft-margin penalty.
    tol : float
        Stopping tolerance on the projected-gradient spread (KKT violation).
    max_iter : int
        Maximum sweeps over each pairwise problem.
    random_state : int
        Seeds the coordinate visiting order.
    """

    def __init__(self, C=1.0, tol=1e-3, max_iter=1000, random_state=0):
        self.C = C
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ParameterError("X must be (n_samples, n_features) matching y")
        if not np.all(np.isfinite(X)):
            raise ParameterError("features must be finite")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ParameterError("training data must contain at least two classes")
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        self.scale_ = scale
        Z = (X - self.mean_) / self.scale_

        self.pairs_ = np.array(list(combinations(range(len(self.classes_)), 2)), dtype=np.int64)
        coef = np.empty((len(self.pairs_), X.shape[1]))
        intercept = np.empty(len(self.pairs_))
        self.n_iter_ = np.empty(len(self.pairs_), dtype=np.int64)
        for p, (a, b) in enumerate(self.pairs_):
            mask = (y == self.classes_[a]) | (y == self.classes_[b])
            target = np.where(y[mask] == self.classes_[a], 1.0, -1.0)
            w, bias, _, sweeps = dual_cd_hinge(
                Z[mask], target, self.C, self.tol, self.max_iter,
                derive_seed(self.random_state, int(a), int(b)),
            )
            coef[p], intercept[p], self.n_iter_[p] = w, bias, sweeps
        self.coef_ = coef
        self.intercept_ = intercept
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        """Signed margin of every pairwise hyperplane, shape ``(n, n_pairs)``."""
        check_is_fitted(self)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ParameterError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        return ((X - self.mean_) / self.scale_) @ self.coef_.T + self.intercept_

    def vote(self, X):
        """Vote counts and summed signed margins per class."""
        return self._tally(self.decision_function(X))

    def _tally(self, margins):
        n, k = margins.shape[0], len(self.classes_)
        votes = np.zeros((n, k), dtype=np.int64)
        msum = np.zeros((n, k))
        for p, (a, b) in enumerate(self.pairs_):
            m = margins[:, p]
            first = m >= 0
            votes[:, a] += first
            votes[:, b] += ~first
            msum[:, a] += m
            msum[:, b] -= m
        return votes, msum

    def predict(self, X):
        votes, msum = self.vote(X)
        tied = votes == votes.max(axis=1, keepdims=True)
        # argmax returns the lowest index among equal margin sums
        winner = np.argmax(np.where(tied, msum, -np.inf), axis=1)
        return self.classes_[winner]

    def save(self, path, layout=None):
        """Write a versioned ``.npz`` container, optionally with a feature layout."""
        check_is_fitted(self)
        header = {
            "format": CONTAINER_FORMAT,
            "version": CONTAINER_VERSION,
            "params": self.get_params(),
            "classes": [c.item() if hasattr(c, "item") else c for c in self.classes_],
            "layout": None if layout is None else [int(v) for v in layout.as_array()],
        }
        with open(path, "wb") as fh:
            np.savez(
                fh,
                header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                coef=self.coef_, intercept=self.intercept_, pairs=self.pairs_,
                mean=self.mean_, scale=self.scale_,
            )

    @classmethod
    def load(cls, path, expected_layout=None):
        try:
            with np.load(Path(path)) as data:
                header = json.loads(bytes(data["header"]).decode())
                arrays = {k: data[k] for k in ("coef", "intercept", "pairs", "mean", "scale")}
        except (OSError, KeyError, ValueError) as exc:
            raise ContainerError(f"{path}: not a classifier container ({exc})") from None
        if header.get("format") != CONTAINER_FORMAT or header.get("version") != CONTAINER_VERSION:
            raise ContainerError(
                f"{path}: unsupported container {header.get('format')} v{header.get('version')}"
            )
        if expected_layout is not None and header["layout"] != [int(v) for v in expected_layout.as_array()]:
            raise ContainerError(
                f"{path}: stored layout {header['layout']} != expected {list(expected_layout.as_array())}"
            )
        est = cls(**header["params"])
        est.classes_ = np.array(header["classes"])
        est.coef_, est.intercept_ = arrays["coef"], arrays["intercept"]
        est.pairs_, est.mean_, est.scale_ = arrays["pairs"], arrays["mean"], arrays["scale"]
        est.n_features_in_ = est.coef_.shape[1]
        est.layout_ = header["layout"]
        return est
