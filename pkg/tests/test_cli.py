import json

import numpy as np
import pytest

from lightmux.cli import main
from lightmux.harness import plateau_count, read_csv_rows, render_svg
from lightmux.imageio import read_image, write_image
from lightmux.multiplex import IlluminationMatrix
from lightmux.noise import NoiseModel, fit_affine, NoiseObservation, synthetic_calibration_stacks, CameraSettings
from lightmux.scene import load_dataset, load_model


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_noise(path, sp2=0.7, sr2=66.0):
    NoiseModel(sp2, sr2, 15.0, 30.0).to_file(path)
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_noise(root / "noise.txt")
    config = {
        "seed": 2, "dataset": str(root / "ds"), "noise_model": str(root / "noise.txt"),
        "output": str(root / "run"), "m_max": 3, "repeats": 3,
        "settings": [{"name": "S3", "gain": 17.5, "exposure": 22.5}],
        "snr": {"iterations": 500},
        "scene": {"num_classes": 3, "poses_per_class": 4, "num_illuminants": 4, "image_side": 40},
    }
    (root / "cfg.json").write_text(json.dumps(config))
    assert main(["generate", "--config", str(root / "cfg.json"), "--out", str(root / "ds")]) == 0
    assert main(["optimize", "--config", str(root / "cfg.json")]) == 0
    assert main(["evaluate", "--config", str(root / "cfg.json")]) == 0
    return root


class TestGenerate:
    def test_counts(self, tmp_path):
        assert main(["generate", "--classes", "2", "--poses", "4", "--side", "24",
                     "--illuminants", "3", "--out", str(tmp_path / "d")]) == 0
        ds = load_dataset(tmp_path / "d")
        assert len(ds) == 8 and ds.n_illuminants == 3

    def test_rerun_is_bit_identical(self, tmp_path):
        args = ["generate", "--classes", "2", "--poses", "2", "--side", "24", "--seed", "9"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_default_structure(self):
        from lightmux.harness import DEFAULT_CONFIG
        scene = DEFAULT_CONFIG["scene"]
        assert (scene["num_classes"], scene["poses_per_class"], scene["num_illuminants"]) == (5, 20, 8)


def _write_stacks(root, model, levels, n_images=120, shape=(16, 16), seed=0):
    stacks = synthetic_calibration_stacks(model, levels, n_images, shape, seed)
    for li, stack in enumerate(stacks):
        d = root / f"level_{li:02d}"
        d.mkdir(parents=True)
        for k, frame in enumerate(stack):
            write_image(d / f"frame_{k:03d}.pgm", frame.astype(np.uint8))
    return stacks


class TestCalibrate:
    def test_recovers_model(self, tmp_path):
        _write_stacks(tmp_path / "stacks", NoiseModel(0.7, 66.0, 15.0, 30.0), np.linspace(20, 200, 6))
        out = tmp_path / "noise.txt"
        assert main(["calibrate", "--stacks", str(tmp_path / "stacks"), "--gain", "15",
                     "--exposure", "30", "--out", str(out)]) == 0
        model = NoiseModel.from_file(out)
        assert model.sigma_p2 == pytest.approx(0.7, rel=0.05)
        assert model.sigma_r2 == pytest.approx(66.0, rel=0.05)
        rows = read_csv_rows(out.with_suffix(".levels.csv"))
        assert len(rows) == 6 and float(rows[0]["mean"]) == pytest.approx(20, abs=1)

    def test_single_level_is_degenerate(self, tmp_path):
        _write_stacks(tmp_path / "stacks", NoiseModel(0.7, 66.0, 15.0, 30.0), [100.0], n_images=10)
        assert main(["calibrate", "--stacks", str(tmp_path / "stacks"), "--gain", "15",
                     "--exposure", "30", "--out", str(tmp_path / "n.txt")]) == 3

    def test_saturated_level_excluded(self, tmp_path):
        model = NoiseModel(0.7, 66.0, 15.0, 30.0)
        levels = list(np.linspace(20, 200, 6))
        clean = _write_stacks(tmp_path / "clean", model, levels, seed=1)
        _write_stacks(tmp_path / "sat", model, levels + [252.0], seed=1)
        assert main(["calibrate", "--stacks", str(tmp_path / "sat"), "--gain", "15",
                     "--exposure", "30", "--out", str(tmp_path / "n.txt")]) == 0
        with_sat = NoiseModel.from_file(tmp_path / "n.txt")
        from lightmux.noise import characterize_stack
        only = fit_affine(NoiseObservation.concatenate(
            characterize_stack(s.astype(float), 0.92 * 255) for s in clean), CameraSettings(15, 30))
        assert with_sat.sigma_p2 == pytest.approx(only.sigma_p2, rel=0.02)

    def test_missing_directory(self, tmp_path):
        assert main(["calibrate", "--stacks", str(tmp_path / "none"), "--gain", "15",
                     "--exposure", "30"]) == 2


class TestOptimize:
    def test_greedy_candidate_count(self, workspace, capsys):
        timing = json.loads((workspace / "run" / "optimize" / "timing.json").read_text())
        assert timing["S3/greedy"]["candidate_evaluations"] == 3 * 15
        rows = read_csv_rows(workspace / "run" / "optimize" / "S3" / "greedy" / "trace.csv")
        assert [int(r["prefix"]) for r in rows] == [1, 2, 3]

    def test_naive_is_single_all_on_column(self, workspace):
        W = IlluminationMatrix.from_csv(workspace / "run" / "optimize" / "S3" / "naive" / "matrix.csv")
        np.testing.assert_array_equal(W.W, np.ones((4, 1)))

    def test_artifacts_echo_config(self, workspace):
        text = (workspace / "run" / "optimize" / "S3" / "snr" / "matrix.csv").read_text()
        assert '"seed":2' in text and "# lightmux" in text

    def test_snr_read_noise_reaches_s_matrix_bound(self, tmp_path):
        write_noise(tmp_path / "noise.txt", 0.0, 1.0)
        assert main(["generate", "--classes", "2", "--poses", "2", "--side", "24",
                     "--illuminants", "7", "--out", str(tmp_path / "ds")]) == 0
        cfg = {"settings": [{"name": "ref", "gain": 15.0, "exposure": 30.0}],
               "snr": {"iterations": 30000}}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert main(["optimize", "--config", str(tmp_path / "cfg.json"), "--method", "snr",
                     "--dataset", str(tmp_path / "ds"), "--noise", str(tmp_path / "noise.txt"),
                     "--out", str(tmp_path / "run")]) == 0
        row = read_csv_rows(tmp_path / "run" / "optimize" / "ref" / "snr" / "snr.csv")[0]
        assert float(row["predicted_mse"]) <= 0.5

    def test_config_errors_exit_2(self, tmp_path, workspace):
        (tmp_path / "bad.json").write_text("{not json")
        assert main(["optimize", "--config", str(tmp_path / "bad.json")]) == 2
        (tmp_path / "unknown.json").write_text('{"sed": 1}')
        assert main(["optimize", "--config", str(tmp_path / "unknown.json")]) == 2
        assert main(["optimize", "--config", str(workspace / "cfg.json"), "--repeats", "0"]) == 2
        assert main(["optimize", "--dataset", str(tmp_path / "missing")]) == 2


class TestEvaluate:
    def test_outputs(self, workspace):
        ev = workspace / "run" / "evaluate"
        rows = read_csv_rows(ev / "accuracy_vs_count.csv")
        assert list(rows[0]) == ["method", "setting", "image_count", "accuracy"]
        methods = {r["method"] for r in rows}
        assert methods == {"greedy", "snr", "naive"}
        assert all(0 <= float(r["accuracy"]) <= 1 for r in rows)
        report = json.loads((ev / "report.json").read_text())
        assert set(report["timings_ms"]["S3/greedy"]) == {"train_ms", "infer_ms"}

    def test_per_class_average_to_overall(self, workspace):
        rows = read_csv_rows(workspace / "run" / "evaluate" / "per_class.csv")
        for r in rows:
            per = [float(r[c]) for c in ("class0", "class1", "class2")]
            # equal class sizes, so the count-weighted mean is the plain mean
            assert np.mean(per) == pytest.approx(float(r["overall"]), abs=2e-6)

    def test_rerun_identical(self, workspace, tmp_path, monkeypatch):
        cfg = json.loads((workspace / "cfg.json").read_text())
        before = tree(workspace / "run" / "evaluate")
        monkeypatch.setenv("LIGHTMUX_WORKERS", "2")
        assert main(["evaluate", "--config", str(workspace / "cfg.json")]) == 0
        after = tree(workspace / "run" / "evaluate")
        for name in ("accuracy_vs_count.csv", "per_class.csv", "accuracy_vs_count.svg"):
            assert before[name] == after[name]
        assert cfg["seed"] == 2

    def test_svg_regenerates_from_csv(self, workspace):
        ev = workspace / "run" / "evaluate"
        svg = render_svg(read_csv_rows(ev / "accuracy_vs_count.csv"))
        assert svg == (ev / "accuracy_vs_count.svg").read_text()
        assert svg.startswith("<svg") and svg.count("<polyline") == 3

    def test_missing_artifacts(self, workspace, tmp_path):
        assert main(["evaluate", "--config", str(workspace / "cfg.json"),
                     "--out", str(tmp_path / "empty")]) == 2


@pytest.mark.parametrize("accs, tol, expected", [
    ([0.5, 0.9, 0.91, 0.905], 0.01, 2), ([0.9], 0.01, 1), ([0.2, 0.4, 0.6], 0.0, 3),
])
def test_plateau_count(accs, tol, expected):
    assert plateau_count(accs, tol) == expected


class TestRenderDemux:
    def test_round_trip(self, workspace, tmp_path):
        model_dir = workspace / "ds" / "class0_pose000"
        model = load_model(model_dir)
        W = np.array([[1, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1], [1, 1, 1, 0]], dtype=float)
        IlluminationMatrix(W, binary=True).to_csv(tmp_path / "w.csv")
        images = []
        for j in range(4):
            path = tmp_path / f"coded_{j}.png"
            state = ",".join(str(v) for v in W[:, j])
            assert main(["render", "--model", str(model_dir), "--state", state,
                         "--gain", "6", "--exposure", "30", "--out", str(path)]) == 0
            images.append(str(path))
        write_noise(tmp_path / "noise.txt", 0.0, 1.0)
        assert main(["demux", "--matrix", str(tmp_path / "w.csv"), "--noise", str(tmp_path / "noise.txt"),
                     "--gain", "15", "--exposure", "30", "--r-bar", "50",
                     "--images", *images, "--out", str(tmp_path / "out")]) == 0
        recovered = np.load(tmp_path / "out" / "demux.npy")
        scale = 10 ** (-0.9)
        for i in range(4):
            truth = model.image(i) * scale
            # rounding each coded image by <= 0.5 bounds the recovery error
            assert np.abs(recovered[i] - truth).max() <= 0.5 * np.abs(np.linalg.inv(W.T)).sum(axis=1)[i] + 1e-9
        assert read_image(tmp_path / "out" / "illum_000.png").shape == model.shape

    def test_singular_matrix_exit_3(self, tmp_path, workspace):
        IlluminationMatrix(np.ones((2, 2)), binary=True).to_csv(tmp_path / "w.csv")
        write_noise(tmp_path / "noise.txt")
        img = tmp_path / "a.pgm"
        write_image(img, np.zeros((4, 4), dtype=np.uint8))
        assert main(["demux", "--matrix", str(tmp_path / "w.csv"), "--noise", str(tmp_path / "noise.txt"),
                     "--gain", "15", "--exposure", "30", "--r-bar", "10",
                     "--images", str(img), str(img), "--out", str(tmp_path / "o")]) == 3

    def test_bad_state_exit_2(self, workspace, tmp_path):
        assert main(["render", "--model", str(workspace / "ds" / "class0_pose000"),
                     "--state", "1,1", "--out", str(tmp_path / "x.png")]) == 2
