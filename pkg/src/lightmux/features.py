"""Grid HOG features over downscaled multi-image sequences."""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image
from .errors import ParameterError

HOG_EPS = 1e-6


def _area_matrix(src, dst):
    # row i averages source pixels over [i * src/dst, (i+1) * src/dst)
    edges = np.arange(dst + 1) * (src / dst)
    k = np.arange(src)
    lo = np.maximum(k[None, :], edges[:-1, None])
    hi = np.minimum(k[None, :] + 1, edges[1:, None])
    return np.clip(hi - lo, 0.0, None) * (dst / src)


def downscale(image, side):
    """Area-average resample to ``side x side``."""
    return downscale_batch(check_image(image)[None], side)[0]


def downscale_batch(images, side):
    """:func:`downscale` over a stack shaped ``(n, H, W)``."""
    images = np.asarray(images, dtype=np.float64)
    h, w = images.shape[-2:]
    if side < 1 or h < side or w < side:
        raise ParameterError(f"cannot downscale {w}x{h} image to {side}x{side}")
    if h == side and w == side:
        return images.copy()
    return np.einsum("ih,nhw,jw->nij", _area_matrix(h, side), images, _area_matrix(w, side),
                     optimize=True)


@dataclass(frozen=True)
class FeatureLayout:
    n_images: int
    cells_x: int
    cells_y: int
    block: int
    bins: int

    @property
    def blocks_per_image(self):
        return (self.cells_x - self.block + 1) * (self.cells_y - self.block + 1)

    @property
    def per_image(self):
        return self.blocks_per_image * self.block**2 * self.bins

    @property
    def length(self):
        return self.n_images * self.per_image

    def with_images(self, n):
        return FeatureLayout(n, self.cells_x, self.cells_y, self.block, self.bins)

    def as_array(self):
        return np.array([self.n_images, self.cells_x, self.cells_y, self.block, self.bins])


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        if self.values.shape != (self.layout.length,):
            raise ParameterError(
                f"feature length {self.values.shape} does not match layout ({self.layout.length},)"
            )


def hog_layout(shape, cell=12, block=10, bins=9):
    h, w = shape
    if cell < 1 or block < 1 or bins < 1:
        raise ParameterError("cell, block and bins must be positive")
    cx, cy = w // cell, h // cell
    if cx < block or cy < block:
        raise ParameterError(
            f"{w}x{h} image holds {cx}x{cy} cells of {cell}px, fewer than one {block}x{block} block"
        )
    return FeatureLayout(1, cx, cy, block, bins)


def hog(image, cell=12, block=10, bins=9):
    """Histogram of oriented gradients on a regular grid.

    Centered-difference gradients (zero on the border), unsigned orientations
    with bin ``b`` centered on ``b * pi / bins``, magnitude-weighted votes
    shared linearly between the two nearest bins, and overlapping
    ``block x block``-cell blocks at a one-cell stride, each L2-normalized.
    """
    image = check_image(image)
    layout = hog_layout(image.shape, cell, block, bins)
    return FeatureVector(hog_batch(image[None], cell, block, bins)[0], layout)


def hog_batch(images, cell=12, block=10, bins=9):
    """:func:`hog` descriptors for a stack ``(n, H, W)``, returned as ``(n, F)``."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    layout = hog_layout(images.shape[1:], cell, block, bins)
    cx, cy = layout.cells_x, layout.cells_y
    hh, ww = cy * cell, cx * cell

    # gradients use the whole image; only pixels inside full cells vote
    gx = np.zeros_like(images)
    gy = np.zeros_like(images)
    gx[:, :, 1:-1] = images[:, :, 2:] - images[:, :, :-2]
    gy[:, 1:-1, :] = images[:, 2:, :] - images[:, :-2, :]
    gx, gy = gx[:, :hh, :ww], gy[:, :hh, :ww]
    mag = np.sqrt(gx * gx + gy * gy)
    theta = np.arctan2(gy, gx)
    # fold (-pi, pi] onto [0, pi]; pi itself wraps to bin 0 below
    theta += np.where(theta < 0, np.pi, 0.0)
    pos = theta * (bins / np.pi)
    lo = pos.astype(np.intp)
    frac = pos - lo
    lo[lo == bins] = 0
    hi = lo + 1
    hi[hi == bins] = 0

    rows = np.arange(hh) // cell
    cols = np.arange(ww) // cell
    per = cx * cy * bins
    cell_idx = (
        np.arange(n)[:, None, None] * per + (rows[:, None] * cx + cols[None, :])[None] * bins
    )
    upper = mag * frac
    lo += cell_idx
    hi += cell_idx
    hist = (
        np.bincount(lo.ravel(), (mag - upper).ravel(), minlength=n * per)
        + np.bincount(hi.ravel(), upper.ravel(), minlength=n * per)
    ).reshape(n, cy, cx, bins)

    nby, nbx = cy - block + 1, cx - block + 1
    out = np.empty((n, nby, nbx, block * block * bins))
    for by in range(nby):
        for bx in range(nbx):
            v = hist[:, by : by + block, bx : bx + block].reshape(n, -1)
            out[:, by, bx] = v / np.sqrt(np.einsum("ij,ij->i", v, v) + HOG_EPS**2)[:, None]
    return out.reshape(n, -1)


def concat_sequence(features):
    """Join per-image descriptors in acquisition order."""
    features = list(features)
    if not features:
        raise ParameterError("nothing to concatenate")
    geom = features[0].layout.with_images(1)
    for f in features:
        if f.layout.with_images(1) != geom:
            raise ParameterError(f"layout mismatch: {f.layout} vs {features[0].layout}")
    n = sum(f.layout.n_images for f in features)
    return FeatureVector(np.concatenate([f.values for f in features]), geom.with_images(n))


class HOGTransformer(TransformerMixin, BaseEstimator):
    """Downscale each image of a sequence and concatenate its HOG descriptors.

    Parameters
    ----------
    side : int or None
        Images are area-averaged to ``side x side`` first; ``None`` keeps them.
    cell, block, bins : int
        Cell size in pixels, block size in cells, orientation bins.

    Input to :meth:`transform` is ``(n_samples, M, H, W)``.
    """

    def __init__(self, side=120, cell=12, block=10, bins=9):
        self.side = side
        self.cell = cell
        self.block = block
        self.bins = bins

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 4:
            raise ParameterError("expected (n_samples, M, H, W) image sequences")
        shape = X.shape[2:] if self.side is None else (self.side, self.side)
        self.layout_ = hog_layout(shape, self.cell, self.block, self.bins).with_images(X.shape[1])
        return self

    def transform(self, X):
        X = np.asarray(X)
        if X.ndim != 4:
            raise ParameterError("expected (n_samples, M, H, W) image sequences")
        n, m = X.shape[:2]
        flat = X.reshape((n * m,) + X.shape[2:])
        if self.side is not None:
            flat = downscale_batch(flat, self.side)
        return hog_batch(flat, self.cell, self.block, self.bins).reshape(n, -1)
