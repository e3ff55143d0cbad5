import logging

import numpy as np
import pytest

from akfhdr.cli import INCOMPLETE, main
from akfhdr.events import EventArray
from akfhdr.frames import CrfTable, FrameObservation, fit_crf
from akfhdr.io import (read_crf, read_events, read_exposure_stack, read_float_sequence,
                       read_frame_manifest, write_crf, write_events, write_float_sequence,
                       write_frame_manifest, write_gray8)

SIM_FLAGS = ["--set", "width=16", "--set", "height=16", "--set", "duration=1.0",
             "--set", "samples=201", "--set", "speed=12", "--n-frames", "6",
             "--c-true", "0.05", "--event-noise-rate", "1.0", "--seed", "3"]


@pytest.fixture
def tiny_dataset(tmp_path):
    rng = np.random.default_rng(0)
    frames = [FrameObservation(0.005, 0.01, rng.integers(110, 150, (8, 8)).astype(np.uint8)),
              FrameObservation(0.105, 0.01, rng.integers(110, 150, (8, 8)).astype(np.uint8))]
    write_frame_manifest(tmp_path, frames)
    t = np.sort(rng.choice(np.arange(11_000, 99_000), 10, replace=False))
    write_events(tmp_path / "events.csv",
                 EventArray(t, rng.integers(0, 8, 10), rng.integers(0, 8, 10),
                            rng.choice([-1, 1], 10)))
    write_crf(tmp_path / "crf.csv", CrfTable.linear())
    return tmp_path


def reconstruct_args(d, out, *extra):
    return ["reconstruct", "--events", str(d / "events.csv"), "--frames", str(d / "frames.csv"),
            "--crf", str(d / "crf.csv"), "--output", str(out), *extra]


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--output", str(d), *SIM_FLAGS]) == 0
    return d


# -- reconstruct -------------------------------------------------------------------------------

def test_reconstruct_tiny_dataset(tiny_dataset):
    out = tiny_dataset / "out"
    assert main(reconstruct_args(tiny_dataset, out)) == 0
    seq = read_float_sequence(out / "manifest.csv")
    assert seq.frames.shape == (2, 8, 8)
    np.testing.assert_array_equal(seq.timestamps_us, [5000, 105000])
    assert (out / "frame_00000.pgm").exists() and (out / "frame_00001.f32").exists()
    assert not (out / INCOMPLETE).exists()
    log = (out / "run_log.txt").read_text()
    assert "sha256=" in log and "sigma2_im = 1.0" in log and "mode = akf" in log


def test_missing_crf_reports_path(tiny_dataset, caplog):
    missing = tiny_dataset / "nowhere" / "crf.csv"
    args = reconstruct_args(tiny_dataset, tiny_dataset / "out")
    args[args.index("--crf") + 1] = str(missing)
    with caplog.at_level(logging.ERROR):
        assert main(args) != 0
    assert str(missing) in caplog.text
    assert not (tiny_dataset / "out").exists()


def test_malformed_events_report_line(tiny_dataset, caplog):
    (tiny_dataset / "events.csv").write_text("t_us,x,y,p\n10,0,0,1\n12,0,0,7\n")
    with caplog.at_level(logging.ERROR):
        assert main(reconstruct_args(tiny_dataset, tiny_dataset / "out")) == 1
    assert "events.csv:3" in caplog.text


def test_event_outside_sensor_rejected(tiny_dataset):
    (tiny_dataset / "events.csv").write_text("t_us,x,y,p\n20000,9,0,1\n")
    assert main(reconstruct_args(tiny_dataset, tiny_dataset / "out")) == 1


def test_output_rate_flag(tiny_dataset):
    out = tiny_dataset / "rate"
    assert main(reconstruct_args(tiny_dataset, out, "--output-rate", "50")) == 0
    assert len(read_float_sequence(out / "manifest.csv").frames) == 6


def test_constant_gain_differs_on_saturated_pixels(simulated):
    akf, cg = simulated / "akf", simulated / "cg"
    flags = ["--set", "c_nominal=0.05"]
    assert main(reconstruct_args(simulated, akf, *flags)) == 0
    assert main(reconstruct_args(simulated, cg, "--mode", "constant-gain", "--k", "2.0",
                                 *flags)) == 0
    a = read_float_sequence(akf / "manifest.csv").frames
    b = read_float_sequence(cg / "manifest.csv").frames
    raw = np.stack([f.raw for f in read_frame_manifest(simulated / "frames.csv")])
    saturated = (raw <= 100) | (raw >= 160)
    assert saturated.any()
    assert np.max(np.abs(a - b)[saturated]) > 1e-4


def test_threads_flag_is_bit_identical(simulated):
    one, many = simulated / "t1", simulated / "t4"
    assert main(reconstruct_args(simulated, one, "--threads", "1")) == 0
    assert main(reconstruct_args(simulated, many, "--threads", "4")) == 0
    for name in ("frame_00000.f32", "frame_00005.f32", "frame_00003.pgm"):
        assert (one / name).read_bytes() == (many / name).read_bytes()


# -- simulate --------------------------------------------------------------------------------

def test_simulate_layout(simulated):
    for name in ("events.csv", "frames.csv", "gt/manifest.csv", "crf.csv", "sim_manifest.txt",
                 "run_log.txt", "ground_truth.png"):
        assert (simulated / name).exists(), name
    manifest = (simulated / "sim_manifest.txt").read_text()
    assert "seed = 3" in manifest
    read_crf(simulated / "crf.csv")


def test_simulate_same_seed_is_byte_identical(simulated, tmp_path):
    assert main(["simulate", "--output", str(tmp_path), *SIM_FLAGS]) == 0
    assert (tmp_path / "events.csv").read_bytes() == (simulated / "events.csv").read_bytes()


def test_simulate_static_video_gives_header_only(tmp_path):
    frames = np.full((11, 6, 5), 0.4, dtype=np.float32)
    write_float_sequence(tmp_path / "video", np.arange(11) * 100_000, frames)
    out = tmp_path / "sim"
    assert main(["simulate", "--video", str(tmp_path / "video" / "manifest.csv"),
                 "--output", str(out), "--n-frames", "4"]) == 0
    assert (out / "events.csv").read_text() == "# t_us,x,y,p\n"
    assert main(reconstruct_args(out, out / "rec")) == 0


def test_simulate_rejects_bad_parameters(tmp_path):
    assert main(["simulate", "--output", str(tmp_path), "--c-true", "-1"]) == 1
    assert main(["simulate", "--output", str(tmp_path), "--scene", "nope"]) == 1


# -- evaluate --------------------------------------------------------------------------------

def test_evaluate_identity(simulated, capsys):
    gt = simulated / "gt" / "manifest.csv"
    out = simulated / "eval_id"
    assert main(["evaluate", "--reconstruction", str(gt), "--reference", str(gt),
                 "--output", str(out)]) == 0
    text = capsys.readouterr().out
    assert "MSE(x1e-2)" in text and "SSIM" in text
    assert "0.0000" in text and "1.0000" in text
    csv = (out / "metrics.csv").read_text().splitlines()
    assert csv[0] == "frame,timestamp_us,mse,ssim"
    assert all(line.split(",")[3] == "1.000000" for line in csv[1:-1])


def test_evaluate_reconstruction_report(simulated, capsys):
    rec = simulated / "eval_rec"
    assert main(reconstruct_args(simulated, rec, "--set", "c_nominal=0.05")) == 0
    out = simulated / "eval_out"
    assert main(["evaluate", "--reconstruction", str(rec / "manifest.csv"), "--reference",
                 str(simulated / "gt" / "manifest.csv"), "--output", str(out)]) == 0
    assert "# summary frames=6" in (out / "metrics.csv").read_text()
    assert (out / "metrics.png").exists()


def test_evaluate_skips_shuffled_reference(simulated, tmp_path, caplog):
    """Reference frames listed out of step with the reconstruction are skipped, not scored."""
    gt = read_float_sequence(simulated / "gt" / "manifest.csv")
    shuffled = tmp_path / "shuffled"
    # swap the first two frames' timestamps 2 ms past their neighbours
    ts = gt.timestamps_us.copy()
    ts[0], ts[1] = ts[1] - 2000, ts[2] - 2000
    write_float_sequence(shuffled, ts, gt.frames[[1, 2, 2, 3, 4, 5]])
    with caplog.at_level(logging.WARNING):
        assert main(["evaluate", "--reconstruction", str(simulated / "gt" / "manifest.csv"),
                     "--reference", str(shuffled / "manifest.csv"),
                     "--output", str(tmp_path / "out")]) == 0
    assert caplog.text.count("skipping frame") == 2
    report = (tmp_path / "out" / "metrics.csv").read_text()
    assert "frames=4 skipped=2" in report and "ssim=1.0000" in report


def test_evaluate_rejects_unordered_manifest(simulated, tmp_path):
    lines = (simulated / "gt" / "manifest.csv").read_text().splitlines()
    body = lines[1:]
    body[0], body[1] = body[1], body[0]
    gt_dir = simulated / "gt"
    (gt_dir / "unordered.csv").write_text("\n".join([lines[0]] + body) + "\n")
    assert main(["evaluate", "--reconstruction", str(gt_dir / "manifest.csv"),
                 "--reference", str(gt_dir / "unordered.csv"),
                 "--output", str(tmp_path / "out")]) == 1


def test_evaluate_size_mismatch(tmp_path):
    write_float_sequence(tmp_path / "a", [0], np.zeros((1, 12, 12)))
    write_float_sequence(tmp_path / "b", [0], np.zeros((1, 12, 13)))
    assert main(["evaluate", "--reconstruction", str(tmp_path / "a" / "manifest.csv"),
                 "--reference", str(tmp_path / "b" / "manifest.csv"),
                 "--output", str(tmp_path / "out")]) == 1


# -- fit-crf ---------------------------------------------------------------------------------

def write_stack(directory, exposures):
    scene = np.geomspace(1e-3, 1.0, 100 * 120).reshape(100, 120)
    lines = ["exposure_us,filename"]
    for i, t in enumerate(exposures):
        write_gray8(directory / f"s{i}.pgm", np.round(255 * np.clip(scene * t, 0, 1)))
        lines.append(f"{int(t * 1e6)},s{i}.pgm")
    (directory / "stack.csv").write_text("\n".join(lines) + "\n")
    return directory / "stack.csv"


def test_fit_crf_linear_stack(tmp_path):
    stack = write_stack(tmp_path, (0.3, 0.7, 1.3, 3.1, 7.0))
    assert main(["fit-crf", "--stack", str(stack), "--output", str(tmp_path / "out")]) == 0
    crf = read_crf(tmp_path / "out" / "crf.csv")
    irr = np.linspace(0.05, 0.95, 19)
    assert np.max(np.abs(crf.response_of_irradiance(irr) - irr)) < 0.02


def test_fit_crf_single_exposure_fails(tmp_path):
    stack = write_stack(tmp_path, (1.0,))
    assert main(["fit-crf", "--stack", str(stack), "--output", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out").exists()


def test_fitted_crf_reloads_like_library_fit(tmp_path):
    stack = write_stack(tmp_path, (0.3, 0.7, 1.3, 3.1, 7.0))
    assert main(["fit-crf", "--stack", str(stack), "--output", str(tmp_path / "out")]) == 0
    direct = fit_crf(read_exposure_stack(stack))
    back = read_crf(tmp_path / "out" / "crf.csv")
    grid = np.linspace(0, 1, 256)
    np.testing.assert_allclose(back.inverse_response(grid), direct.inverse_response(grid),
                               atol=1e-8)


# -- general ---------------------------------------------------------------------------------

def test_config_file_and_set_flag(tiny_dataset):
    cfg = tiny_dataset / "run.cfg"
    cfg.write_text("mode = constant-gain\nk = 9\n")
    out = tiny_dataset / "cfg_out"
    assert main(reconstruct_args(tiny_dataset, out, "--config", str(cfg), "--k", "4",
                                 "--set", "p0=0.5")) == 0
    log = (out / "run_log.txt").read_text()
    assert "mode = constant-gain" in log and "k = 4.0" in log and "p0 = 0.5" in log


def test_unknown_set_key(tiny_dataset):
    assert main(reconstruct_args(tiny_dataset, tiny_dataset / "o", "--set", "nope=1")) == 1


def test_incomplete_marker_left_on_failure(tiny_dataset, monkeypatch):
    import akfhdr.filter

    def boom(*args, **kwargs):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(akfhdr.filter, "reconstruct", boom)
    out = tiny_dataset / "fail"
    assert main(reconstruct_args(tiny_dataset, out)) == 2
    assert (out / INCOMPLETE).exists()


def test_events_file_round_trips_through_simulate(simulated):
    ev = read_events(simulated / "events.csv")
    ev.validate(16, 16)
    assert len(ev) > 0
