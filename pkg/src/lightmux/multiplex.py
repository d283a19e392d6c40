"""Multiplexed-illumination noise analysis, demultiplexing and SNR-optimal codes.

An illumination matrix ``W`` is ``N x M``: row ``i`` is illuminant ``i``,
column ``j`` is acquisition ``j``. A pixel's coded measurements are
``y = W.T @ x`` for single-illuminant intensities ``x``.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin

from ._rng import derive_seed
from ._validation import check_matrix
from .errors import ConditioningError, ParameterError

DEFAULT_COND_THRESHOLD = 1e6


@dataclass(frozen=True, eq=False)
class IlluminationMatrix:
    W: np.ndarray
    binary: bool = False

    def __post_init__(self):
        W = check_matrix(self.W).copy()
        if self.binary and not np.all((W == 0) | (W == 1)):
            raise ParameterError("binary illumination matrix has entries outside {0, 1}")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def n_illuminants(self):
        return self.W.shape[0]

    @property
    def n_acquisitions(self):
        return self.W.shape[1]

    def prefix(self, m):
        return IlluminationMatrix(self.W[:, :m], self.binary)

    def __eq__(self, other):
        if not isinstance(other, IlluminationMatrix):
            return NotImplemented
        return self.binary == other.binary and np.array_equal(self.W, other.W)

    __hash__ = None

    def to_csv(self, path, comments=()):
        n, m = self.W.shape
        lines = [f"# N={n} M={m} binary={int(self.binary)}\n"]
        lines += [f"# {c}\n" for c in comments]
        lines += [",".join(f"{v:.6f}" for v in row) + "\n" for row in self.W]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def from_csv(cls, path):
        text = Path(path).read_text(encoding="utf-8").splitlines()
        if not text or not text[0].startswith("# N="):
            raise ParameterError(f"{path}: missing '# N=<n> M=<m> binary=<0|1>' header")
        header = dict(tok.split("=", 1) for tok in text[0][1:].split())
        rows = [
            [float(v) for v in line.split(",")]
            for line in text[1:]
            if line.strip() and not line.startswith("#")
        ]
        W = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
        if W.shape != (int(header["N"]), int(header["M"])):
            raise ParameterError(f"{path}: header declares {header}, data is {W.shape}")
        return cls(W, bool(int(header["binary"])))


def _as_array(W):
    return W.W if isinstance(W, IlluminationMatrix) else check_matrix(W)


@dataclass(frozen=True)
class MuxNoiseEstimate:
    """Diagonal of the per-acquisition noise covariance (gray levels squared)."""

    diag: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.any(np.asarray(self.diag) < 0):
            raise ParameterError("noise variances must be non-negative")

    @property
    def matrix(self):
        return np.diag(self.diag)

    def scaled(self, c):
        return MuxNoiseEstimate(np.asarray(self.diag) * c)


def sigma_w(W, r_bar, noise):
    """Expected variance of each acquisition, from its total illuminant drive."""
    if r_bar < 0:
        raise ParameterError("average reflectance must be non-negative")
    W = _as_array(W)
    return MuxNoiseEstimate(noise.sigma_p2 * r_bar * W.sum(axis=0) + noise.sigma_r2)


def _normal_matrix(W, diag, cond_threshold):
    n, m = W.shape
    if m < n:
        raise ConditioningError(f"{m} acquisitions cannot resolve {n} illuminants")
    if np.any(diag <= 0):
        raise ConditioningError("an acquisition has zero predicted variance")
    A = (W / diag) @ W.T
    eig = np.linalg.eigvalsh(A)
    if eig[0] <= 0 or eig[-1] / eig[0] > cond_threshold:
        raise ConditioningError(
            f"normal matrix condition number {eig[-1] / max(eig[0], 1e-300):.3g} "
            f"exceeds {cond_threshold:.3g}"
        )
    return A, eig


def predicted_mse(W, sigma, cond_threshold=DEFAULT_COND_THRESHOLD):
    """Mean variance of the weighted-least-squares single-illuminant estimates."""
    W = _as_array(W)
    _, eig = _normal_matrix(W, np.asarray(sigma.diag, dtype=np.float64), cond_threshold)
    return float(np.sum(1.0 / eig) / W.shape[0])


def demultiplex(images, W, sigma, cond_threshold=DEFAULT_COND_THRESHOLD):
    """Per-pixel weighted least squares: recover ``N`` images from ``M`` coded ones."""
    W = _as_array(W)
    diag = np.asarray(sigma.diag, dtype=np.float64)
    Y = np.asarray(images, dtype=np.float64)
    if Y.shape[0] != W.shape[1]:
        raise ParameterError(f"got {Y.shape[0]} images for {W.shape[1]} acquisitions")
    A, _ = _normal_matrix(W, diag, cond_threshold)
    rhs = (W / diag) @ Y.reshape(Y.shape[0], -1)
    return np.linalg.solve(A, rhs).reshape((W.shape[0],) + Y.shape[1:])


def encode(images, W):
    """Noise-free coded measurements of single-illuminant `images` (N, ...)."""
    W = _as_array(W)
    X = np.asarray(images, dtype=np.float64)
    return (W.T @ X.reshape(X.shape[0], -1)).reshape((W.shape[1],) + X.shape[1:])


def _perturb(W, rng, binary):
    n, m = W.shape
    C = W.copy()
    u = rng.random()
    if u < 0.4:
        i, j = rng.integers(n), rng.integers(m)
        C[i, j] = 1.0 - C[i, j] if binary else rng.random()
    elif u < 0.8:
        j = rng.integers(m)
        if binary:
            C[:, j] = rng.integers(0, 2, n)
        else:
            C[:, j] = np.clip(C[:, j] + rng.normal(0.0, 0.1, n), 0.0, 1.0)
    else:
        # block flip: escapes the identity's local basin
        rate = 10.0 ** rng.uniform(-2.0, 0.0)
        mask = rng.random((n, m)) < rate
        C[mask] = 1.0 - C[mask]
    return C


def _mse_or_inf(W, noise, r_bar, cond_threshold):
    diag = noise.sigma_p2 * r_bar * W.sum(axis=0) + noise.sigma_r2
    try:
        _, eig = _normal_matrix(W, diag, cond_threshold)
    except ConditioningError:
        return np.inf
    return float(np.sum(1.0 / eig) / W.shape[0])


def _hill_climb(n, m, noise, r_bar, iterations, seed, cond_threshold, binary):
    rng = np.random.default_rng(seed)
    W = np.eye(n, m)
    best = _mse_or_inf(W, noise, r_bar, cond_threshold)
    history = [best]
    for _ in range(iterations):
        cand = _perturb(W, rng, binary)
        value = _mse_or_inf(cand, noise, r_bar, cond_threshold)
        if value < best:
            W, best = cand, value
        history.append(best)
    return W, best, np.array(history)


class SNROptimalMultiplexer(TransformerMixin, BaseEstimator):
    """Stochastic hill-climbing search for a minimum-MSE multiplexing matrix.

    Starts at the identity; each iteration perturbs the incumbent, drops
    candidates whose normal matrix is too ill-conditioned, and keeps the
    candidate only if the predicted MSE strictly decreases.

    After `fit`, `transform` demultiplexes coded stacks shaped ``(M, ...)``.
    """

    def __init__(
        self,
        n_illuminants=8,
        n_acquisitions=None,
        noise=None,
        r_bar=100.0,
        iterations=10_000,
        random_state=0,
        cond_threshold=DEFAULT_COND_THRESHOLD,
        binary=False,
        n_restarts=1,
        n_jobs=1,
    ):
        self.n_illuminants = n_illuminants
        self.n_acquisitions = n_acquisitions
        self.noise = noise
        self.r_bar = r_bar
        self.iterations = iterations
        self.random_state = random_state
        self.cond_threshold = cond_threshold
        self.binary = binary
        self.n_restarts = n_restarts
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        n = self.n_illuminants
        m = n if self.n_acquisitions is None else self.n_acquisitions
        if m < n:
            raise ParameterError("need at least as many acquisitions as illuminants")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.noise is None:
            raise ParameterError("a NoiseModel is required")
        runs = Parallel(n_jobs=self.n_jobs)(
            delayed(_hill_climb)(
                n, m, self.noise, self.r_bar, self.iterations,
                derive_seed(self.random_state, "snr", r), self.cond_threshold, self.binary,
            )
            for r in range(self.n_restarts)
        )
        best = min(range(len(runs)), key=lambda r: (runs[r][1], r))
        W, mse, history = runs[best]
        self.matrix_ = IlluminationMatrix(W, self.binary)
        self.mse_ = mse
        self.mse_history_ = history
        self.identity_mse_ = history[0]
        self.sigma_ = sigma_w(W, self.r_bar, self.noise)
        return self

    def transform(self, X):
        return demultiplex(X, self.matrix_, self.sigma_, self.cond_threshold)

    def inverse_transform(self, X):
        return encode(X, self.matrix_)


def optimize_snr(
    n,
    m,
    noise,
    r_bar,
    iterations,
    seed,
    cond_threshold=DEFAULT_COND_THRESHOLD,
    binary=False,
):
    """Functional form of :class:`SNROptimalMultiplexer`; returns the matrix."""
    est = SNROptimalMultiplexer(
        n, m, noise, r_bar, iterations, seed, cond_threshold, binary
    ).fit()
    return est.matrix_
