"""Rendering relit images from relightable models."""
import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_matrix, check_weights
from .errors import DegenerateFitError, ParameterError
from .noise import CameraSettings, generalize, power_ratio, predict_variance, synthesize

DEFAULT_TARGET_FRACTION = 0.9
DEFAULT_GAIN_BOUNDS = (0.0, 24.0)


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray
    settings: CameraSettings
    state: np.ndarray
    seed: int


def intensity_scale(model, settings):
    """Factor taking the model's captured intensities to `settings`."""
    return (settings.exposure / model.capture_exposure) * power_ratio(
        settings.gain, model.capture_gain
    )


def render_clean(model, w, settings=None):
    """Noise-free mean image ``L @ w`` expressed at `settings` (unclipped)."""
    w = check_weights(w, model.n_illuminants)
    img = (model.L @ w).reshape(model.shape)
    if settings is not None:
        img = img * intensity_scale(model, settings)
    return img


def render_noisy(model, w, settings, noise, seed, gray_max=255):
    mean = render_clean(model, w, settings)
    var = predict_variance(generalize(noise, settings), mean)
    pixels = synthesize(mean, var, seed, gray_max)
    return RenderedImage(pixels, settings, np.asarray(w, dtype=np.float64), seed)


def render_sequence(model, W, settings, noise, seeds, gray_max=255):
    """Noisy images for every column of `W`, shape ``(M, H, W)``."""
    W = check_matrix(W, model.n_illuminants)
    scale = intensity_scale(model, settings)
    local = generalize(noise, settings)
    means = (model.L @ W) * scale
    out = np.empty((W.shape[1],) + model.shape, dtype=np.int32)
    for j in range(W.shape[1]):
        mean = means[:, j].reshape(model.shape)
        out[j] = synthesize(mean, local.sigma_p2 * mean + local.sigma_r2, seeds[j], gray_max)
    return out


def peak_intensity(models, W):
    """Brightest clean pixel of each model over all columns of `W`, at capture settings."""
    W = check_matrix(W)
    return np.array([float((m.L @ W).max(initial=0.0)) for m in models])


def select_gain(
    dataset,
    W,
    exposure,
    target_fraction=DEFAULT_TARGET_FRACTION,
    gain_bounds=DEFAULT_GAIN_BOUNDS,
    gray_max=255,
):
    """Single gain (dB) putting the brightest clean pixel at ``target_fraction * gray_max``.

    The brightest pixel is taken over every model and every column of `W`;
    the result is clamped to `gain_bounds`.
    """
    if not 0 < target_fraction <= 1:
        raise ParameterError("target_fraction must lie in (0, 1]")
    models = getattr(dataset, "models", dataset)
    W = check_matrix(W, models[0].n_illuminants)
    target = target_fraction * gray_max
    best = math.inf
    for m, peak in zip(models, peak_intensity(models, W)):
        if peak <= 0:
            continue
        # peak * (E / E0) * 10**((G - G0) / 10) == target
        g = m.capture_gain + 10.0 * math.log10(target * m.capture_exposure / (peak * exposure))
        best = min(best, g)
    if not math.isfinite(best):
        raise DegenerateFitError("every rendered pixel is dark; no gain reaches the target")
    lo, hi = gain_bounds
    return float(min(max(best, lo), hi))
