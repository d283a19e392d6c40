"""Command-line entry point: ``lightmux <verb> [--config FILE] [overrides]``.

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures (ill-conditioned matrices, degenerate fits).
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConditioningError, DegenerateFitError, LightmuxError
from .harness import load_config, run_calibrate, run_evaluate, run_generate, run_optimize
from .imageio import read_image, write_image
from .multiplex import IlluminationMatrix, demultiplex, sigma_w
from .noise import CameraSettings, NoiseModel, generalize
from .relight import render_clean, render_noisy
from .scene import load_model

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output", help="output directory")


def _add_run_flags(p):
    p.add_argument("--dataset", help="dataset index.tsv or its directory")
    p.add_argument("--noise", dest="noise_model", help="noise model file")
    p.add_argument("--method", dest="methods", action="append", choices=["greedy", "snr", "naive"],
                   help="repeat to run several methods")
    p.add_argument("--m-max", type=int)
    p.add_argument("--repeats", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="lightmux", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lightmux {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="write a synthetic scene family to disk")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--poses", type=int)
    p.add_argument("--illuminants", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--similarity", type=float)
    p.add_argument("--discriminant", type=_ints, help="comma-separated 1-based illuminants")

    p = sub.add_parser("calibrate", help="fit an affine noise model from exposure stacks")
    p.add_argument("--stacks", required=True, help="directory with one sub-directory per level")
    p.add_argument("--gain", type=float, required=True, help="gain (dB) of the stacks")
    p.add_argument("--exposure", type=float, required=True, help="exposure (ms) of the stacks")
    p.add_argument("--out", default="noise.txt", help="noise model file to write")
    p.add_argument("--saturation", type=float, default=0.92,
                   help="drop pixels brighter than this fraction of full scale")

    p = sub.add_parser("optimize", help="search illumination matrices per camera setting")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--iterations", type=int, help="SNR hill-climbing iterations")

    p = sub.add_parser("evaluate", help="accuracy vs image count for optimized matrices")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--eval-dataset", help="dataset to evaluate on (default: training dataset)")

    p = sub.add_parser("demux", help="recover single-illuminant images from coded captures")
    p.add_argument("--matrix", required=True, help="illumination matrix CSV")
    p.add_argument("--noise", required=True, help="noise model file")
    p.add_argument("--gain", type=float, required=True)
    p.add_argument("--exposure", type=float, required=True)
    p.add_argument("--r-bar", type=float, required=True, help="average scene reflectance (gray levels)")
    p.add_argument("--images", nargs="+", required=True, help="one image per matrix column, in order")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("render", help="render one relit image from a model directory")
    p.add_argument("--model", required=True)
    p.add_argument("--state", type=_floats, required=True, help="comma-separated drive levels")
    p.add_argument("--gain", type=float)
    p.add_argument("--exposure", type=float)
    p.add_argument("--noise", help="noise model file; omit for a clean render")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output image (.pgm or .png)")
    return parser


def _overrides(args):
    o = {"seed": args.seed, "output": args.output}
    if args.verb == "generate":
        scene = {
            "num_classes": args.classes, "poses_per_class": args.poses,
            "num_illuminants": args.illuminants, "image_side": args.side,
            "similarity": args.similarity, "discriminant_illuminants": args.discriminant,
        }
        o["scene"] = {k: v for k, v in scene.items() if v is not None}
    else:
        o.update(dataset=args.dataset, noise_model=args.noise_model, methods=args.methods,
                 m_max=args.m_max, repeats=args.repeats)
        if args.verb == "optimize" and args.iterations is not None:
            o["snr"] = {"iterations": args.iterations}
        if args.verb == "evaluate":
            o["eval_dataset"] = args.eval_dataset
    return o


def _demux(args):
    W = IlluminationMatrix.from_csv(args.matrix)
    cam = CameraSettings(args.gain, args.exposure)
    noise = generalize(NoiseModel.from_file(args.noise), cam)
    images = np.stack([read_image(p).astype(np.float64) for p in args.images])
    recovered = demultiplex(images, W, sigma_w(W, args.r_bar, noise))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "demux.npy", recovered)
    for i, img in enumerate(recovered):
        write_image(out / f"illum_{i:03d}.png", np.clip(np.rint(img), 0, 255).astype(np.uint8))
    print(f"wrote {len(recovered)} demultiplexed images to {out}")


def _render(args):
    model = load_model(args.model)
    gain = model.capture_gain if args.gain is None else args.gain
    exposure = model.capture_exposure if args.exposure is None else args.exposure
    cam = CameraSettings(gain, exposure)
    if args.noise:
        pixels = render_noisy(model, args.state, cam, NoiseModel.from_file(args.noise), args.seed).pixels
    else:
        pixels = np.rint(np.clip(render_clean(model, args.state, cam), 0, 255))
    write_image(args.out, pixels.astype(np.uint8))
    print(f"wrote {args.out}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "generate":
            print(f"wrote {run_generate(load_config(args.config, _overrides(args)))}")
        elif args.verb == "calibrate":
            model = run_calibrate(args.stacks, CameraSettings(args.gain, args.exposure), args.out,
                                  args.saturation)
            print(f"sigma_p2={model.sigma_p2:.6g} sigma_r2={model.sigma_r2:.6g} -> {args.out}")
        elif args.verb == "optimize":
            run_optimize(load_config(args.config, _overrides(args)))
        elif args.verb == "evaluate":
            run_evaluate(load_config(args.config, _overrides(args)))
        elif args.verb == "demux":
            _demux(args)
        else:
            _render(args)
    except (ConditioningError, DegenerateFitError) as exc:
        print(f"lightmux {args.verb}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (LightmuxError, OSError) as exc:
        print(f"lightmux {args.verb}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
