"""Affine camera noise: calibration, cross-setting generalization, synthesis.

Pixel variance follows ``var = sigma_p2 * mean + sigma_r2`` at a reference
gain/exposure. Gains are in amplitude dB, so the squared gain ratio between
two settings is ``10 ** (delta_db / 10)``.
"""
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._rng import counter_normal, derive_seed
from ._validation import check_image
from .errors import DegenerateFitError, ParameterError

SATURATION_FRACTION = 0.92


@dataclass(frozen=True)
class CameraSettings:
    gain: float
    exposure: float

    def __post_init__(self):
        if not self.exposure > 0:
            raise ParameterError(f"exposure must be > 0 ms, got {self.exposure}")


def power_ratio(gain_db, gain0_db):
    """Squared amplitude ratio G**2 / G0**2 for gains given in dB."""
    return 10.0 ** ((gain_db - gain0_db) / 10.0)


@dataclass(frozen=True)
class NoiseModel:
    sigma_p2: float
    sigma_r2: float
    gain0: float
    exposure0: float
    clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.sigma_p2 < 0 or self.sigma_r2 < 0:
            raise ParameterError("noise variances must be non-negative")
        if not self.exposure0 > 0:
            raise ParameterError("reference exposure must be > 0 ms")

    @property
    def settings(self):
        return CameraSettings(self.gain0, self.exposure0)

    def to_file(self, path, comments=()):
        text = "".join(f"# {c}\n" for c in comments) + (
            f"sigma_p2={self.sigma_p2!r}\n"
            f"sigma_r2={self.sigma_r2!r}\n"
            f"gain0_db={self.gain0!r}\n"
            f"exposure0_ms={self.exposure0!r}\n"
        )
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def from_file(cls, path):
        values = _read_key_values(path)
        try:
            return cls(
                float(values["sigma_p2"]),
                float(values["sigma_r2"]),
                float(values["gain0_db"]),
                float(values["exposure0_ms"]),
            )
        except KeyError as exc:
            raise ParameterError(f"{path}: missing key {exc.args[0]}") from None


def _read_key_values(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParameterError(f"{path}: malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class NoiseObservation:
    """Per-pixel sample means and variances (one entry per retained pixel)."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.variance):
            raise ParameterError("mean and variance must have equal length")
        if np.any(np.asarray(self.variance) < 0):
            raise ParameterError("variances must be non-negative")

    def __len__(self):
        return len(self.mean)

    @classmethod
    def concatenate(cls, observations):
        observations = list(observations)
        return cls(
            np.concatenate([np.ravel(o.mean) for o in observations]),
            np.concatenate([np.ravel(o.variance) for o in observations]),
        )

    def to_csv(self, path):
        rows = np.column_stack([self.mean, self.variance])
        np.savetxt(path, rows, delimiter=",", header="mean,variance", comments="", fmt="%.6f")

    @classmethod
    def from_csv(cls, path):
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(rows[:, 0], rows[:, 1])


def characterize_stack(images, saturation_cutoff=SATURATION_FRACTION * 255):
    """Per-pixel mean and unbiased variance over a stack of exposures.

    Pixels whose mean exceeds `saturation_cutoff` are dropped.
    """
    stack = np.asarray(images, dtype=np.float64)
    if stack.ndim < 2 or stack.shape[0] < 2:
        raise ParameterError("need at least two images to estimate variance")
    stack = stack.reshape(stack.shape[0], -1)
    mean = stack.mean(axis=0)
    var = stack.var(axis=0, ddof=1)
    keep = mean <= saturation_cutoff
    return NoiseObservation(mean[keep], var[keep])


def fit_affine(observations, settings):
    """Least-squares line ``variance = sigma_p2 * mean + sigma_r2``.

    Negative coefficients are clamped to zero; the returned model then has
    ``clamped=True`` and a warning is issued.
    """
    if isinstance(observations, NoiseObservation):
        mean, var = np.asarray(observations.mean, float), np.asarray(observations.variance, float)
    else:
        observations = list(observations)
        mean = np.array([o.mean for o in observations], dtype=float)
        var = np.array([o.variance for o in observations], dtype=float)
    if mean.size < 2 or np.ptp(mean) == 0:
        raise DegenerateFitError("affine fit needs at least two distinct mean levels")
    design = np.column_stack([mean, np.ones_like(mean)])
    (slope, intercept), *_ = np.linalg.lstsq(design, var, rcond=None)
    # rounding-level negatives are zeros, not fit failures
    tol = 1e-9 * max(1.0, float(np.abs(var).max()))
    clamped = slope < -tol or intercept < -tol
    if clamped:
        warnings.warn(
            f"negative noise coefficient clamped to 0 (slope={slope:.4g}, intercept={intercept:.4g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return NoiseModel(
        max(float(slope), 0.0),
        max(float(intercept), 0.0),
        float(settings.gain),
        float(settings.exposure),
        clamped=bool(clamped),
    )


def generalize(model, settings):
    """Re-reference `model` to another gain/exposure.

    Photon noise scales with gain squared and exposure; read noise with gain
    squared only.
    """
    g2 = power_ratio(settings.gain, model.gain0)
    return NoiseModel(
        g2 * (settings.exposure / model.exposure0) * model.sigma_p2,
        g2 * model.sigma_r2,
        float(settings.gain),
        float(settings.exposure),
    )


def predict_variance(model, mean_image):
    mean_image = check_image(np.atleast_2d(mean_image), "mean image")
    if np.any(mean_image < 0):
        raise ParameterError("mean intensities must be non-negative")
    return model.sigma_p2 * mean_image + model.sigma_r2


def synthesize(mean_image, variance_image, seed, gray_max=255, pixel_index=None):
    """Draw one noisy integer image.

    Each pixel is ``Normal(mean, variance)`` clipped to ``[0, gray_max]`` and
    rounded. Pixel ``k`` consumes counter ``k`` of stream `seed`; pass
    `pixel_index` (flat global indices) when rendering a tile of a larger image.
    """
    mean_image = np.asarray(mean_image, dtype=np.float64)
    variance_image = np.asarray(variance_image, dtype=np.float64)
    if mean_image.shape != variance_image.shape:
        raise ParameterError(
            f"mean shape {mean_image.shape} != variance shape {variance_image.shape}"
        )
    if np.any(variance_image < 0):
        raise ParameterError("variances must be non-negative")
    if pixel_index is None:
        pixel_index = np.arange(mean_image.size)
    elif np.shape(pixel_index) != mean_image.shape:
        raise ParameterError("pixel_index must match the image shape")
    z = counter_normal(seed, pixel_index).reshape(mean_image.shape)
    draw = mean_image + np.sqrt(variance_image) * z
    return np.rint(np.clip(draw, 0, gray_max)).astype(np.int32)


def synthetic_calibration_stacks(model, levels, n_images, shape, seed, gray_max=255):
    """Flat-field exposure stacks at each mean level, one array per level."""
    stacks = []
    for li, level in enumerate(levels):
        mean = np.full(shape, float(level))
        var = predict_variance(model, mean)
        stacks.append(np.stack([
            synthesize(mean, var, seed=derive_seed(seed, "calibration", li, k), gray_max=gray_max)
            for k in range(n_images)
        ]))
    return stacks


class AffineNoiseCalibrator(BaseEstimator):
    """Fit an affine noise model from exposure stacks at several intensities.

    Parameters
    ----------
    saturation_fraction : float
        Pixels brighter than ``saturation_fraction * gray_max`` are ignored.
    gray_max : int
        Top of the camera's gray-level range.
    """

    def __init__(self, saturation_fraction=SATURATION_FRACTION, gray_max=255):
        self.saturation_fraction = saturation_fraction
        self.gray_max = gray_max

    def fit(self, stacks, settings):
        cutoff = self.saturation_fraction * self.gray_max
        per_level = [characterize_stack(s, cutoff) for s in stacks]
        # spread of per-pixel means within one level is noise, not a lever arm
        if sum(len(o) > 0 for o in per_level) < 2:
            raise DegenerateFitError("need at least two unsaturated intensity levels")
        self.observations_ = NoiseObservation.concatenate(per_level)
        self.noise_model_ = fit_affine(self.observations_, settings)
        return self

    def predict(self, mean_image):
        return predict_variance(self.noise_model_, mean_image)
