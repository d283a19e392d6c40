"""Relightable scene models, their on-disk format, and synthetic scene families."""
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._rng import derive_seed
from .errors import ConsistencyError, ModelLoadError, ParameterError
from .imageio import read_image, write_image
from .noise import _read_key_values

MANIFEST = "manifest.txt"
DEFAULT_SCALE = 256
INDEX_FILE = "index.tsv"


@dataclass(frozen=True, eq=False)
class RelightableModel:
    """Per-illuminant images of one sample/pose, stacked as columns of `L`.

    `L` has shape ``(height * width, N)`` and holds linear mean gray levels at
    the capture gain (dB) and exposure (ms).
    """

    L: np.ndarray
    width: int
    height: int
    class_label: str
    pose_id: int = 0
    capture_gain: float = 15.0
    capture_exposure: float = 30.0

    def __post_init__(self):
        L = np.array(self.L, dtype=np.float64)
        if L.ndim == 1:
            L = L[:, None]
        if L.ndim != 2 or L.shape[1] < 1:
            raise ParameterError(f"L must be N_pix x N with N >= 1, got shape {L.shape}")
        if L.shape[0] != self.width * self.height:
            raise ParameterError(
                f"L has {L.shape[0]} rows but width*height = {self.width * self.height}"
            )
        if not np.all(np.isfinite(L)) or np.any(L < 0):
            raise ParameterError("L entries must be finite and non-negative")
        if not self.capture_exposure > 0:
            raise ParameterError("capture exposure must be > 0 ms")
        L.setflags(write=False)
        object.__setattr__(self, "L", L)

    @property
    def n_illuminants(self):
        return self.L.shape[1]

    @property
    def shape(self):
        return (self.height, self.width)

    def image(self, i):
        """Image under illuminant `i` (0-based) at full drive."""
        return self.L[:, i].reshape(self.height, self.width)

    def __eq__(self, other):
        if not isinstance(other, RelightableModel):
            return NotImplemented
        return (
            (self.width, self.height, self.class_label, self.pose_id,
             self.capture_gain, self.capture_exposure)
            == (other.width, other.height, other.class_label, other.pose_id,
                other.capture_gain, other.capture_exposure)
            and np.array_equal(self.L, other.L)
        )

    __hash__ = None


def save_model(model, dir_path, fmt="pgm", scale=DEFAULT_SCALE):
    """Write one 16-bit image per illuminant plus a key=value manifest.

    Intensities are stored as ``round(L * scale)``, so values must stay below
    ``65535 / scale`` gray levels.
    """
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    coded = np.rint(model.L * scale)
    if coded.max(initial=0) > 65535:
        raise ParameterError(
            f"intensity {model.L.max():.3f} exceeds the 16-bit container range "
            f"({65535 / scale:.3f} at scale {scale})"
        )
    coded = coded.astype(np.uint16)
    for i in range(model.n_illuminants):
        write_image(dir_path / f"illum_{i:03d}.{fmt}", coded[:, i].reshape(model.shape))
    manifest = {
        "class": model.class_label,
        "pose": model.pose_id,
        "num_illuminants": model.n_illuminants,
        "width": model.width,
        "height": model.height,
        "gain_db": repr(float(model.capture_gain)),
        "exposure_ms": repr(float(model.capture_exposure)),
        "scale": scale,
    }
    text = "".join(f"{k}={v}\n" for k, v in manifest.items())
    (dir_path / MANIFEST).write_text(text, encoding="utf-8")


def load_model(dir_path):
    dir_path = Path(dir_path)
    manifest_path = dir_path / MANIFEST
    if not manifest_path.is_file():
        raise ModelLoadError("missing manifest", manifest_path)
    try:
        meta = _read_key_values(manifest_path)
        n = int(meta["num_illuminants"])
        width, height = int(meta["width"]), int(meta["height"])
        scale = float(meta.get("scale", DEFAULT_SCALE))
    except (KeyError, ValueError) as exc:
        raise ModelLoadError(f"bad manifest ({exc})", manifest_path) from None
    files = sorted(p for p in dir_path.glob("illum_*") if p.suffix.lower() in (".pgm", ".png"))
    if len(files) != n:
        raise ConsistencyError(
            f"{dir_path}: manifest declares {n} illuminants but {len(files)} images found"
        )
    columns = []
    for f in files:
        img = read_image(f)
        if img.shape != (height, width):
            raise ModelLoadError(
                f"image is {img.shape[1]}x{img.shape[0]}, manifest says {width}x{height}", f
            )
        columns.append(img.astype(np.float64).ravel() / scale)
    return RelightableModel(
        np.column_stack(columns),
        width,
        height,
        meta.get("class", ""),
        int(meta.get("pose", 0)),
        float(meta.get("gain_db", 15.0)),
        float(meta.get("exposure_ms", 30.0)),
    )


@dataclass
class Dataset:
    models: list
    classes: list = None

    def __post_init__(self):
        self.models = list(self.models)
        if self.classes is None:
            self.classes = sorted({m.class_label for m in self.models})
        self.classes = list(self.classes)
        known = set(self.classes)
        for m in self.models:
            if m.class_label not in known:
                raise ParameterError(f"model label {m.class_label!r} not in classes")
        if self.models:
            ref = (self.models[0].width, self.models[0].height, self.models[0].n_illuminants)
            for m in self.models:
                if (m.width, m.height, m.n_illuminants) != ref:
                    raise ParameterError("all models must share width, height and N")

    def __len__(self):
        return len(self.models)

    @property
    def n_illuminants(self):
        return self.models[0].n_illuminants

    @property
    def shape(self):
        return self.models[0].shape

    @property
    def labels(self):
        """Integer class index of every model."""
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[m.class_label] for m in self.models], dtype=np.int64)

    def save(self, dir_path, fmt="pgm", comments=()):
        dir_path = Path(dir_path)
        dir_path.mkdir(parents=True, exist_ok=True)
        lines = [f"# {c}\n" for c in comments]
        for m in self.models:
            rel = f"{m.class_label}_pose{m.pose_id:03d}"
            save_model(m, dir_path / rel, fmt=fmt)
            lines.append(f"{m.class_label}\t{rel}\n")
        (dir_path / INDEX_FILE).write_text("".join(lines), encoding="utf-8")
        return dir_path / INDEX_FILE


def load_dataset(index_path):
    """Read a ``label<TAB>path`` index; relative paths resolve against its folder."""
    index_path = Path(index_path)
    if index_path.is_dir():
        index_path = index_path / INDEX_FILE
    if not index_path.is_file():
        raise ModelLoadError("dataset index not found", index_path)
    models, classes = [], []
    for lineno, line in enumerate(index_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        label, sep, rel = line.partition("\t")
        if not sep:
            raise ModelLoadError(f"line {lineno} is not label<TAB>path", index_path)
        path = Path(rel)
        model = load_model(path if path.is_absolute() else index_path.parent / path)
        if model.class_label != label:
            raise ConsistencyError(
                f"{rel}: index label {label!r} != manifest class {model.class_label!r}"
            )
        models.append(model)
        if label not in classes:
            classes.append(label)
    return Dataset(models, classes)


@dataclass(frozen=True)
class SceneFamilySpec:
    """Recipe for a family of visually similar synthetic classes.

    `discriminant_illuminants` uses 1-based illuminant indices. Each class
    carries a ring-shaped reflectance feature at a class-specific radius that
    brightens under discriminant illuminants and darkens under the others, so
    the classes differ only by ``4 * (1 - similarity)`` gray levels at most
    when every illuminant is on.
    """

    num_classes: int = 5
    poses_per_class: int = 20
    num_illuminants: int = 8
    image_side: int = 120
    base_seed: int = 0
    similarity: float = 0.9
    discriminant_illuminants: frozenset = field(default_factory=lambda: frozenset({3}))
    contrast: float = 40.0
    brightness: float = 160.0
    capture_gain: float = 15.0
    capture_exposure: float = 30.0
    max_translation: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "discriminant_illuminants",
                           frozenset(int(i) for i in self.discriminant_illuminants))
        if self.num_illuminants < 1:
            raise ParameterError("need at least one illuminant")
        if self.num_classes < 1 or self.poses_per_class < 1:
            raise ParameterError("need at least one class and one pose")
        if self.image_side < 8:
            raise ParameterError("image_side must be >= 8 pixels")
        if not 0.0 <= self.similarity <= 1.0:
            raise ParameterError("similarity must lie in [0, 1]")
        bad = [i for i in self.discriminant_illuminants if not 1 <= i <= self.num_illuminants]
        if bad:
            raise ParameterError(f"discriminant illuminants {bad} outside 1..{self.num_illuminants}")
        if self.discriminant_illuminants and len(self.discriminant_illuminants) == self.num_illuminants:
            raise ParameterError("at least one non-discriminant illuminant is needed to balance the classes")


def _smooth_field(rng, side, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma, mode="wrap")
    return (f - f.min()) / (np.ptp(f) or 1.0)


def _light_directions(n):
    dirs = []
    for i in range(n):
        az = 2 * math.pi * i / n
        el = math.radians(35.0 if i % 2 == 0 else 65.0)
        dirs.append((math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)))
    return np.array(dirs)


def _ring_coefficients(spec):
    n = spec.num_illuminants
    disc = sorted(i - 1 for i in spec.discriminant_illuminants)
    coef = np.full(n, 4.0 * (1.0 - spec.similarity) / n)
    if disc:
        others = n - len(disc)
        coef -= spec.contrast * len(disc) / others
        coef[disc] += spec.contrast + spec.contrast * len(disc) / others
    return coef


def class_prototypes(spec):
    """Un-posed per-class images, shape ``(C, side, side, N)``."""
    side = spec.image_side
    rng = np.random.default_rng(derive_seed(spec.base_seed, "prototype"))
    c = (side - 1) / 2.0
    y, x = np.mgrid[0:side, 0:side].astype(np.float64) - c
    a, b, depth = 0.38 * side, 0.30 * side, 0.30 * side
    u = (x / a) ** 2 + (y / b) ** 2
    inside = u < 1.0
    z = depth * np.sqrt(np.clip(1.0 - u, 0.0, None))
    normal = np.stack([x / a**2, y / b**2, z / depth**2], axis=-1)
    normal[~inside] = (0.0, 0.0, 1.0)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)

    albedo = np.where(inside, 0.7 + 0.2 * _smooth_field(rng, side, side / 10.0), 0.15)
    lambert = np.clip(normal @ _light_directions(spec.num_illuminants).T, 0.0, None)
    base = spec.brightness * albedo[..., None] * (0.4 + 0.6 * lambert)

    r = np.hypot(x, y)
    width = max(0.025 * side, 1.0)
    coef = _ring_coefficients(spec)
    span = 0.2 * spec.image_side / max(spec.num_classes - 1, 1)
    protos = []
    for k in range(spec.num_classes):
        radius = 0.06 * side + k * span
        # annulus with ~1 px soft edges: strong, rotation-invariant gradients
        ring = np.clip(width - np.abs(r - radius) + 0.5, 0.0, 1.0) * inside
        protos.append(base + ring[..., None] * coef)
    protos = np.stack(protos)
    if protos.min() < 0:
        raise ParameterError(
            "contrast too large for the scene brightness: balancing illuminants would go negative"
        )
    return protos


def _pose_image(img, angle, shift):
    side = img.shape[0]
    c = (side - 1) / 2.0
    cos, sin = math.cos(angle), math.sin(angle)
    rot = np.array([[cos, -sin], [sin, cos]])
    center = np.array([c, c])
    offset = center - rot @ (center + np.asarray(shift))
    return ndimage.affine_transform(img, rot, offset=offset, order=1, mode="nearest")


def pose_transform(spec, class_index, pose):
    """Rotation (radians, a multiple of 18 degrees) and translation (pixels) of one model."""
    rng = np.random.default_rng(derive_seed(spec.base_seed, "pose", class_index, pose))
    angle = math.radians(18.0 * int(rng.integers(20)))
    t = spec.max_translation * spec.image_side
    return angle, tuple(rng.uniform(-t, t, size=2))


def posed_columns(prototype, transform, jitter=None):
    """Apply a pose (and optional albedo jitter) to a ``(side, side, N)`` prototype."""
    angle, shift = transform
    if jitter is not None:
        prototype = prototype * jitter[..., None]
    cols = [_pose_image(prototype[:, :, i], angle, shift) for i in range(prototype.shape[-1])]
    return np.clip(np.stack([c.ravel() for c in cols], axis=1), 0.0, None)


def generate_scene_family(spec):
    """Build ``num_classes * poses_per_class`` models, deterministic in `spec`.

    Every model gets its own random pose and a small multiplicative albedo
    perturbation, drawn from streams keyed by (base_seed, class, pose).
    """
    protos = class_prototypes(spec)
    side = spec.image_side
    classes = [f"class{k}" for k in range(spec.num_classes)]
    models = []
    for k, label in enumerate(classes):
        for p in range(spec.poses_per_class):
            rng = np.random.default_rng(derive_seed(spec.base_seed, "nuisance", k, p))
            jitter = 1.0 + 0.03 * (2.0 * _smooth_field(rng, side, side / 8.0) - 1.0)
            L = posed_columns(protos[k], pose_transform(spec, k, p), jitter)
            # snap to the storage grid so save/load round-trips exactly
            L = np.rint(L * DEFAULT_SCALE) / DEFAULT_SCALE
            models.append(RelightableModel(
                L, side, side, label, p, spec.capture_gain, spec.capture_exposure,
            ))
    return Dataset(models, classes)


def average_reflectance(dataset):
    """Mean of every L entry over all models, pixels and illuminants."""
    models = dataset.models if isinstance(dataset, Dataset) else list(dataset)
    if not models:
        raise ParameterError("average reflectance of an empty dataset")
    total = math.fsum(float(m.L.sum()) for m in models)
    return total / sum(m.L.size for m in models)


def worker_count(default=1):
    """Worker processes requested via the LIGHTMUX_WORKERS environment variable."""
    try:
        return max(1, int(os.environ.get("LIGHTMUX_WORKERS", default)))
    except ValueError:
        return default
