"""Experiment orchestration behind the command-line verbs.

Configs are JSON objects; `DEFAULT_CONFIG` lists every recognized key.
Each verb writes deterministic CSV/text artifacts whose header comments echo
the full config, and keeps wall-clock timings in separate JSON files.
"""
import copy
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import __version__
from ._rng import derive_seed
from .errors import ParameterError
from .evaluation import default_featurizer, render_column, train_final_classifier
from .greedy import effective_prefix, evaluate_matrix, greedy_select
from .imageio import read_image
from .multiplex import IlluminationMatrix, SNROptimalMultiplexer
from .noise import AffineNoiseCalibrator, CameraSettings, NoiseModel, generalize
from .relight import intensity_scale, select_gain
from .scene import SceneFamilySpec, average_reflectance, generate_scene_family, load_dataset, worker_count

METHODS = ("greedy", "snr", "naive")
CURVE_COLUMNS = ["method", "setting", "image_count", "accuracy"]

DEFAULT_CONFIG = {
    "seed": 0,
    "scene": {
        "num_classes": 5,
        "poses_per_class": 20,
        "num_illuminants": 8,
        "image_side": 120,
        "similarity": 0.9,
        "discriminant_illuminants": [3],
        "contrast": 40.0,
    },
    "dataset": None,
    "eval_dataset": None,
    "noise_model": None,
    "output": "lightmux-run",
    "settings": [
        {"name": "S1", "gain": 6.0, "exposure": 84.0},
        {"name": "S2", "gain": 12.0, "exposure": 42.0},
        {"name": "S3", "gain": 17.5, "exposure": 22.5},
    ],
    "methods": ["greedy", "snr", "naive"],
    "m_max": 8,
    "repeats": 400,
    "train_frac": 0.75,
    "min_improvement": 0.0,
    "svm_c": 1.0,
    "plateau_tolerance": 0.01,
    "snr": {"iterations": 100000, "restarts": 1, "binary": False, "n_acquisitions": None},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at `path`, then `overrides` (a nested dict)."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ParameterError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ParameterError(f"{path}: top level must be an object")
        unknown = sorted(set(user) - set(DEFAULT_CONFIG))
        if unknown:
            raise ParameterError(f"{path}: unknown config keys {unknown}")
        config = _merge(config, user)
    if overrides:
        config = _merge(config, {k: v for k, v in overrides.items() if v is not None})
    validate_config(config)
    return config


def validate_config(config):
    if not isinstance(config["seed"], int):
        raise ParameterError("seed must be an explicit integer")
    for key in ("m_max", "repeats"):
        if not isinstance(config[key], int) or config[key] < 1:
            raise ParameterError(f"{key} must be a positive integer")
    bad = [m for m in config["methods"] if m not in METHODS]
    if bad or not config["methods"]:
        raise ParameterError(f"methods must be drawn from {list(METHODS)}, got {config['methods']}")
    names = set()
    for s in config["settings"]:
        if not {"name", "gain", "exposure"} <= set(s):
            raise ParameterError(f"setting {s} needs name, gain and exposure")
        if s["name"] in names:
            raise ParameterError(f"duplicate setting name {s['name']!r}")
        names.add(s["name"])
        CameraSettings(float(s["gain"]), float(s["exposure"]))
    if not config["settings"]:
        raise ParameterError("at least one camera setting is required")


def config_echo(config):
    """Header comment lines that make an artifact reproducible on its own."""
    # the output location is not a run parameter, so reruns elsewhere stay byte-identical
    echoed = {k: v for k, v in config.items() if k != "output"}
    return [f"lightmux {__version__}",
            "config " + json.dumps(echoed, sort_keys=True, separators=(",", ":"))]


def _require(config, key):
    value = config.get(key)
    if value is None:
        raise ParameterError(f"config key {key!r} is required for this command")
    if not Path(value).exists():
        raise ParameterError(f"{key} path does not exist: {value}")
    return Path(value)


def _write_csv(path, header, rows, comments):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def read_csv_rows(path):
    """Rows of a lightmux CSV as dicts, skipping ``#`` comment lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------- generate

def run_generate(config):
    params = dict(config["scene"])
    params["discriminant_illuminants"] = frozenset(params.get("discriminant_illuminants", ()))
    spec = SceneFamilySpec(base_seed=config["seed"], **params)
    out = Path(config["output"])
    dataset = generate_scene_family(spec)
    return dataset.save(out, comments=config_echo(config))


# --------------------------------------------------------------- calibrate

def read_stacks(stack_dir):
    """One stack per sub-directory (sorted by name) of PGM/PNG frames."""
    stack_dir = Path(stack_dir)
    levels = sorted(p for p in stack_dir.iterdir() if p.is_dir())
    if not levels:
        raise ParameterError(f"{stack_dir}: expected one sub-directory per intensity level")
    stacks = []
    for level in levels:
        frames = sorted(p for p in level.iterdir() if p.suffix.lower() in (".pgm", ".png"))
        stacks.append(np.stack([read_image(f) for f in frames]).astype(np.float64))
    return [p.name for p in levels], stacks


def run_calibrate(stack_dir, settings, output, saturation_fraction=0.92, gray_max=255):
    names, stacks = read_stacks(stack_dir)
    est = AffineNoiseCalibrator(saturation_fraction, gray_max).fit(stacks, settings)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    comments = [f"lightmux {__version__}",
                f"calibrated at gain_db={settings.gain!r} exposure_ms={settings.exposure!r}"
                f" from {len(stacks)} levels"]
    est.noise_model_.to_file(output, comments)
    cutoff = saturation_fraction * gray_max
    rows = []
    for name, stack in zip(names, stacks):
        mean = stack.mean(axis=0)
        var = stack.var(axis=0, ddof=1)
        keep = mean <= cutoff
        rows.append([name, f"{mean[keep].mean() if keep.any() else float('nan'):.6f}",
                     f"{var[keep].mean() if keep.any() else float('nan'):.6f}", int(keep.sum())])
    _write_csv(output.with_suffix(".levels.csv"), ["level", "mean", "variance", "pixels"],
               rows, comments)
    return est.noise_model_


# ---------------------------------------------------------------- optimize

def _settings(config):
    return [(s["name"], CameraSettings(float(s["gain"]), float(s["exposure"])))
            for s in config["settings"]]


def _method_dir(out, setting, method):
    return Path(out) / "optimize" / setting / method


def _optimize_one(config, dataset, noise, name, cam, method, n_jobs):
    out = _method_dir(config["output"], name, method)
    out.mkdir(parents=True, exist_ok=True)
    echo = config_echo(config) + [f"setting {name} method {method}"]
    n = dataset.n_illuminants
    start = time.perf_counter()
    info = {"candidate_evaluations": 0}
    if method == "greedy":
        trace = greedy_select(
            dataset, noise, cam.exposure, config["m_max"], config["repeats"], config["seed"],
            config["min_improvement"], config["train_frac"], C=config["svm_c"], n_jobs=n_jobs,
        )
        trace.save(out, echo)
        info["candidate_evaluations"] = trace.candidate_evaluations
        info["effective_prefix"] = effective_prefix(trace)
    elif method == "snr":
        snr = config["snr"]
        # pixel-level mean reflectance at this setting
        r_bar = average_reflectance(dataset) * intensity_scale(dataset.models[0], cam)
        est = SNROptimalMultiplexer(
            n, snr.get("n_acquisitions") or n, generalize(noise, cam), r_bar,
            snr["iterations"], derive_seed(config["seed"], "snr", name),
            binary=bool(snr["binary"]), n_restarts=snr["restarts"], n_jobs=n_jobs,
        ).fit()
        est.matrix_.to_csv(out / "matrix.csv", echo)
        _write_csv(out / "snr.csv", ["r_bar", "predicted_mse", "identity_mse"],
                   [[f"{r_bar:.6f}", f"{est.mse_:.9g}", f"{est.identity_mse_:.9g}"]], echo)
    else:
        IlluminationMatrix(np.ones((n, 1)), binary=True).to_csv(out / "matrix.csv", echo)
    info["wall_ms"] = 1000.0 * (time.perf_counter() - start)
    return name, method, info


def run_optimize(config, progress=print):
    dataset = load_dataset(_require(config, "dataset"))
    noise = NoiseModel.from_file(_require(config, "noise_model"))
    workers = worker_count()
    timing = {}
    for name, cam in _settings(config):
        for method in config["methods"]:
            _, _, info = _optimize_one(config, dataset, noise, name, cam, method, workers)
            timing[f"{name}/{method}"] = info
            if progress is not None:
                progress(f"{name} {method}: {info['candidate_evaluations']} candidate evaluations, "
                         f"{info['wall_ms'] / 1000:.1f} s")
    path = Path(config["output"]) / "optimize" / "timing.json"
    path.write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return timing


# ---------------------------------------------------------------- evaluate

def plateau_count(accuracies, tolerance=0.01):
    """Smallest image count whose accuracy is within `tolerance` of the best."""
    accuracies = list(accuracies)
    if not accuracies:
        raise ParameterError("no accuracies")
    peak = max(accuracies)
    return next(m for m, a in enumerate(accuracies, 1) if a >= peak - tolerance)


@dataclass
class EvalReport:
    """Accuracy-vs-image-count curves, per-class peak table and timings."""

    curves: list = field(default_factory=list)
    per_class: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def curve(self, method, setting):
        rows = sorted((r for r in self.curves if r[0] == method and r[1] == setting),
                      key=lambda r: r[2])
        return [r[3] for r in rows]

    def check(self):
        for r in self.curves:
            if not 0.0 <= r[3] <= 1.0:
                raise ParameterError(f"accuracy {r[3]} outside [0, 1]")
        for row in self.per_class:
            counts, accs = np.array(row["counts"]), np.array(row["per_class"])
            pooled = float(np.sum(counts * accs) / counts.sum())
            if abs(pooled - row["overall"]) > 1e-9:
                raise ParameterError("per-class accuracies disagree with the overall accuracy")

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        echo = config_echo(self.config)
        _write_csv(out_dir / "accuracy_vs_count.csv", CURVE_COLUMNS,
                   [[m, s, k, f"{a:.6f}"] for m, s, k, a in self.curves], echo)
        _write_csv(
            out_dir / "per_class.csv",
            ["setting", "method", "image_count"] + list(self.classes) + ["overall"],
            [[r["setting"], r["method"], r["image_count"]]
             + [f"{a:.6f}" for a in r["per_class"]] + [f"{r['overall']:.6f}"]
             for r in self.per_class],
            echo,
        )
        plot_accuracy_csv(out_dir / "accuracy_vs_count.csv", out_dir / "accuracy_vs_count.svg")
        report = {
            "version": __version__,
            "config": {k: v for k, v in self.config.items() if k != "output"},
            "curves": [dict(zip(CURVE_COLUMNS, r)) for r in self.curves],
            "per_class": [{k: v for k, v in r.items() if k != "counts"} for r in self.per_class],
            "plateau": {f"{m}/{s}": plateau_count(self.curve(m, s), self.config["plateau_tolerance"])
                        for m, s in sorted({(r[0], r[1]) for r in self.curves})},
            "timings_ms": self.timings,
        }
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")


def _evaluate_one(config, train_set, eval_set, noise, name, cam, method, eval_seed):
    W = IlluminationMatrix.from_csv(_method_dir(config["output"], name, method) / "matrix.csv").W
    results = evaluate_matrix(eval_set, W, noise, cam.exposure, config["repeats"], eval_seed,
                              config["train_frac"], C=config["svm_c"])
    accs = [r.mean for r in results]
    best = int(np.argmax(accs))
    peak = results[best]

    # timing: final classifier fit on training data, feature + predict per evaluation sample
    prefix = W[:, : best + 1]
    gain = select_gain(train_set, prefix, cam.exposure)
    settings = CameraSettings(gain, cam.exposure)
    start = time.perf_counter()
    clf = train_final_classifier(train_set, prefix, noise, settings, config["seed"], C=config["svm_c"])
    fit_ms = 1000.0 * (time.perf_counter() - start)
    eval_gain = select_gain(eval_set, prefix, cam.exposure)
    eval_cam = CameraSettings(eval_gain, cam.exposure)
    n = len(eval_set)
    seq = np.stack([
        render_column(eval_set, prefix[:, j], eval_cam, noise,
                      [derive_seed(eval_seed, "infer", i, j) for i in range(n)])
        for j in range(prefix.shape[1])
    ], axis=1)
    featurizer = default_featurizer(eval_set.shape)
    start = time.perf_counter()
    feats = featurizer.fit(seq).transform(seq).astype(np.float32).astype(np.float64)
    clf.predict(feats)
    infer_ms = 1000.0 * (time.perf_counter() - start) / n
    return {
        "setting": name, "method": method, "accuracies": accs,
        "per_class": [float(a) for a in peak.per_class], "counts": list(peak.class_counts),
        "overall": peak.mean, "image_count": best + 1,
        "fit_ms": fit_ms, "infer_ms": infer_ms,
    }


def run_evaluate(config, progress=print):
    train_set = load_dataset(_require(config, "dataset"))
    eval_path = config.get("eval_dataset")
    eval_set = load_dataset(_require(config, "eval_dataset")) if eval_path else train_set
    noise = NoiseModel.from_file(_require(config, "noise_model"))
    eval_seed = derive_seed(config["seed"], "evaluate")
    # evaluation must never replay training noise streams
    assert eval_seed != config["seed"], "evaluation seed collides with the training seed"
    for name, method in [(n, m) for n, _ in _settings(config) for m in config["methods"]]:
        _require({"m": str(_method_dir(config["output"], name, method) / "matrix.csv")}, "m")

    jobs = [(name, cam, method) for name, cam in _settings(config) for method in config["methods"]]
    results = Parallel(n_jobs=worker_count())(
        delayed(_evaluate_one)(config, train_set, eval_set, noise, name, cam, method, eval_seed)
        for name, cam, method in jobs
    )
    timing_path = Path(config["output"]) / "optimize" / "timing.json"
    opt_timing = json.loads(timing_path.read_text()) if timing_path.is_file() else {}

    report = EvalReport(classes=list(eval_set.classes), config=config)
    for res in results:
        key = f"{res['setting']}/{res['method']}"
        for k, a in enumerate(res["accuracies"], 1):
            report.curves.append((res["method"], res["setting"], k, a))
        report.per_class.append({k: res[k] for k in
                                 ("setting", "method", "image_count", "per_class", "counts", "overall")})
        search_ms = opt_timing.get(key, {}).get("wall_ms", 0.0)
        report.timings[key] = {"train_ms": search_ms + res["fit_ms"], "infer_ms": res["infer_ms"]}
        if progress is not None:
            progress(f"{key}: peak {res['overall']:.4f} at {res['image_count']} image(s)")
    report.check()
    report.write(Path(config["output"]) / "evaluate")
    return report


# -------------------------------------------------------------------- plot

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
_DASH = {"greedy": "", "snr": "6,4", "naive": "2,3"}


def render_svg(rows, width=640, height=400):
    """Line plot of accuracy vs image count, one polyline per (method, setting)."""
    series = {}
    for r in rows:
        series.setdefault((r["method"], r["setting"]), []).append(
            (int(r["image_count"]), float(r["accuracy"])))
    max_k = max((k for pts in series.values() for k, _ in pts), default=1)
    left, right, top, bottom = 60, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom

    def xy(k, a):
        x = left + (pw * (k - 1) / (max_k - 1) if max_k > 1 else pw / 2)
        return f"{x:.2f},{top + ph * (1.0 - a):.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    for t in range(11):
        y = top + ph * (1 - t / 10)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{t / 10:.1f}</text>')
    for k in range(1, max_k + 1):
        x = xy(k, 0).split(",")[0]
        parts.append(f'<text x="{x}" y="{top + ph + 16}" text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" text-anchor="middle">image count</text>')
    parts.append(f'<text x="15" y="{top + ph / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {top + ph / 2:.2f})">accuracy</text>')
    settings = sorted({s for _, s in series})
    for i, ((method, setting), pts) in enumerate(sorted(series.items())):
        color = _PALETTE[settings.index(setting) % len(_PALETTE)]
        dash = _DASH.get(method, "")
        pts = sorted(pts)
        style = f' stroke-dasharray="{dash}"' if dash else ""
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2"{style} '
                     f'points="{" ".join(xy(k, a) for k, a in pts)}"/>')
        ly = top + 14 + 16 * i
        lx = left + pw + 10
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="2"{style}/>')
        parts.append(f'<text x="{lx + 30}" y="{ly}">{method} {setting}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_accuracy_csv(csv_path, svg_path):
    Path(svg_path).write_text(render_svg(read_csv_rows(csv_path)), encoding="utf-8")
