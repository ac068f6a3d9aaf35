import json
import subprocess
import sys

import numpy as np
import pytest

from fiducial_attitude.camera import DEFAULT_CONFIG_PATH, default_config, project_all
from fiducial_attitude.cli import main
from fiducial_attitude.imaging import read_pgm, render_points, write_pgm
from fiducial_attitude.io import read_attitudes, read_observations
from fiducial_attitude.rotation import params_to_quat, quat_mul, quat_to_params, rotation_angle
from fiducial_attitude.simulation import sample_poses


def _write_poses(path, poses, start=0):
    lines = ["frame_id,p1,p2,p3"] + [f"{start + j},{p[0]!r},{p[1]!r},{p[2]!r}" for j, p in enumerate(poses.tolist())]
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """render -> centroid -> calibrate on 30 random poses."""
    d = tmp_path_factory.mktemp("cli")
    poses = sample_poses(30, 20.0, np.random.default_rng(21))
    _write_poses(d / "poses.csv", poses)
    assert main(["render", "--poses", str(d / "poses.csv"), "--out", str(d / "frames"), "--seed", "3"]) == 0
    assert main(["centroid", "--frames", str(d / "frames"), "--out", str(d / "obs.csv")]) == 0
    assert main(["calibrate", "--observations", str(d / "obs.csv"), "--out", str(d / "cal.json")]) == 0
    return d, poses


def test_render_outputs(pipeline):
    d, poses = pipeline
    frames = sorted((d / "frames").glob("*.pgm"))
    assert [f.name for f in frames[:2]] == ["frame_000000.pgm", "frame_000001.pgm"]
    assert len(frames) == len(poses)
    m = json.loads((d / "frames" / "manifest.json").read_text())
    assert m["command"] == "render" and m["seed"] == 3 and len(m["outputs"]["frames"]) == 30


def test_centroid_ids_match_truth(pipeline):
    d, poses = pipeline
    cfg = default_config()
    obs = read_observations(d / "obs.csv")
    assert [o.frame_id for o in obs] == list(range(30))
    for o, p in zip(obs, poses):
        np.testing.assert_array_equal(o.marker_ids, np.arange(1, 21))
        assert np.max(np.abs(o.pixels - project_all(cfg.geometry, cfg.intrinsics, p))) < 0.1


def test_calibration_file(pipeline):
    d, _ = pipeline
    doc = json.loads((d / "cal.json").read_text())
    assert doc["converged"] and doc["m"] == 1200 and doc["p"] == 13 + 9 + 90
    assert doc["frame_ids"] == list(range(30))
    assert 0 < doc["residual_sq_px2"] < 1.0
    assert (d / "cal.json.manifest.json").exists()


def test_calibrate_rerun_identical_bytes(pipeline, tmp_path):
    d, _ = pipeline
    out = tmp_path / "again.json"
    assert main(["calibrate", "--observations", str(d / "obs.csv"), "--out", str(out)]) == 0
    assert out.read_bytes() == (d / "cal.json").read_bytes()


def test_render_deterministic(pipeline, tmp_path):
    d, _ = pipeline
    assert main(["render", "--poses", str(d / "poses.csv"), "--out", str(tmp_path / "f"), "--seed", "3"]) == 0
    for f in sorted((d / "frames").glob("*.pgm"))[:5]:
        assert (tmp_path / "f" / f.name).read_bytes() == f.read_bytes()


def test_estimate_cold_and_warm(pipeline, tmp_path):
    d, poses = pipeline
    # a slow sequence: 0.01 deg per frame about a fixed axis
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    dq = np.concatenate([[np.cos(np.radians(0.005))], np.sin(np.radians(0.005)) * axis])
    seq = [poses[0]]
    for _ in range(29):
        seq.append(quat_to_params(quat_mul(params_to_quat(seq[-1]), dq), canonical=True))
    _write_poses(tmp_path / "seq.csv", np.array(seq))
    assert main(["render", "--poses", str(tmp_path / "seq.csv"), "--out", str(tmp_path / "sf"), "--seed", "5"]) == 0
    assert main(["centroid", "--frames", str(tmp_path / "sf"), "--out", str(tmp_path / "so.csv")]) == 0
    args = ["estimate", "--calibration", str(d / "cal.json"), "--observations", str(tmp_path / "so.csv")]
    assert main(args + ["--out", str(tmp_path / "cold.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "warm.csv"), "--warm-start"]) == 0
    cold, warm = read_attitudes(tmp_path / "cold.csv"), read_attitudes(tmp_path / "warm.csv")
    assert len(cold) == len(warm) == 30
    for (fc, c), (fw, w), p in zip(cold, warm, seq):
        assert fc == fw and c.converged and w.converged
        assert rotation_angle(c.q_nb, w.q_nb) < 1e-9
        # calibrated on 30 frames only, so allow a few arcmin
        assert np.degrees(rotation_angle(params_to_quat(p), w.q_nb)) < 0.05
    it_c = np.array([c.iterations for _, c in cold])
    it_w = np.array([w.iterations for _, w in warm])
    assert it_w[0] == it_c[0]  # the first frame has no prior and is cold-started
    assert it_w[1:].max() <= 3 and it_w[1:].mean() <= it_c[1:].mean()


def test_estimate_skips_unknown_ids(pipeline, tmp_path, capsys):
    d, _ = pipeline
    text = (d / "obs.csv").read_text().splitlines()
    obs = "\n".join(text[:41] + ["1,99,1.0,2.0"]) + "\n"
    (tmp_path / "o.csv").write_text(obs)
    rc = main(["estimate", "--calibration", str(d / "cal.json"), "--observations", str(tmp_path / "o.csv"), "--out", str(tmp_path / "a.csv")])
    assert rc == 0
    assert [f for f, _ in read_attitudes(tmp_path / "a.csv")] == [0]
    assert "frame 1 skipped" in capsys.readouterr().err


def test_centroid_flags_incomplete_frame(pipeline, tmp_path, capsys):
    d, poses = pipeline
    fdir = tmp_path / "frames"
    fdir.mkdir()
    cfg = default_config()
    for j in range(3):
        (fdir / f"frame_{j:06d}.pgm").write_bytes((d / "frames" / f"frame_{j:06d}.pgm").read_bytes())
    pts = project_all(cfg.geometry, cfg.intrinsics, poses[3])[1:]
    write_pgm(fdir / "frame_000003.pgm", render_points(pts, 2048, 1536))
    assert main(["centroid", "--frames", str(fdir), "--out", str(tmp_path / "o.csv")]) == 0
    assert [o.frame_id for o in read_observations(tmp_path / "o.csv")] == [0, 1, 2]
    assert "frame 3 skipped" in capsys.readouterr().err
    assert read_pgm(fdir / "frame_000003.pgm").width == 2048


def test_empty_inputs(tmp_path):
    (tmp_path / "poses.csv").write_text("frame_id,p1,p2,p3\n")
    assert main(["render", "--poses", str(tmp_path / "poses.csv"), "--out", str(tmp_path / "f")]) == 0
    assert list((tmp_path / "f").glob("*.pgm")) == []
    assert main(["centroid", "--frames", str(tmp_path / "f"), "--out", str(tmp_path / "o.csv")]) == 0
    assert (tmp_path / "o.csv").read_text() == "frame_id,marker_id,u_px,v_px\n"


def test_bad_config_exit_2_names_key(tmp_path, capsys):
    d = json.loads(DEFAULT_CONFIG_PATH.read_text())
    del d["intrinsics"]["cy"]
    (tmp_path / "bad.json").write_text(json.dumps(d))
    (tmp_path / "poses.csv").write_text("frame_id,p1,p2,p3\n0,1,0,0\n")
    rc = main(["render", "--config", str(tmp_path / "bad.json"), "--poses", str(tmp_path / "poses.csv"), "--out", str(tmp_path / "f")])
    assert rc == 2
    assert "intrinsics.cy" in capsys.readouterr().err


def test_exit_codes(tmp_path, pipeline):
    d, _ = pipeline
    assert main(["bogus"]) == 2
    assert main(["render", "--poses", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "f")]) == 4
    (tmp_path / "short.csv").write_text("frame_id,p1,p2,p3\n0,1.0,x,0\n")
    assert main(["render", "--poses", str(tmp_path / "short.csv"), "--out", str(tmp_path / "f")]) == 2
    (tmp_path / "bad.csv").write_text("nope\n")
    assert main(["calibrate", "--observations", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "c.json")]) == 2
    # non-convergence within one iteration -> numerical failure
    assert main(["calibrate", "--observations", str(d / "obs.csv"), "--max-iter", "1", "--out", str(tmp_path / "c.json")]) == 3


def test_calibrate_underdetermined_exit_2(tmp_path, rng):
    # a four-marker rig: each frame adds 8 measurements and 3 unknowns on top of 13
    cfg = {
        "intrinsics": {"fx": 3478, "fy": 3478, "cx": 1024, "cy": 768, "w": [0, 0, 0]},
        "geometry": {
            "r_bn_m": [0, 0, 0.042],
            "r_nc_m": [0, 0, 1.27],
            "patterns": [{"r_skb_m": [0, 0, 0], "p_bsk": [1, 0, 0], "markers_m": [[0.1, 0, 0], [0, 0.1, 0], [-0.1, -0.05, 0], [0.05, -0.1, 0]]}],
        },
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    from fiducial_attitude.camera import config_from_dict
    from fiducial_attitude.io import write_observations
    from fiducial_attitude.estimator import ObservationSet

    c = config_from_dict(cfg)
    obs = [ObservationSet.complete(j, project_all(c.geometry, c.intrinsics, p)) for j, p in enumerate(sample_poses(2, 20, rng))]
    write_observations(tmp_path / "o.csv", obs)
    rc = main(["calibrate", "--config", str(tmp_path / "cfg.json"), "--observations", str(tmp_path / "o.csv"), "--out", str(tmp_path / "c.json")])
    assert rc == 2


def test_simulate_twice_identical(tmp_path):
    spec = {"n_calib": 40, "n_eval": 20}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    for k in (1, 2):
        rc = main(["simulate", "--spec", str(tmp_path / "spec.json"), "--trials", "1", "--seed", "42", "--out", str(tmp_path / f"t{k}.csv"), "--aggregate", str(tmp_path / f"a{k}.csv")])
        assert rc == 0
    assert (tmp_path / "t1.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()
    assert (tmp_path / "a1.csv").read_bytes() == (tmp_path / "a2.csv").read_bytes()
    header = (tmp_path / "t1.csv").read_text().splitlines()[0]
    assert header == "trial,sigma_i_px,sigma_p_mm,r2_px2,sigma_yaw_as,sigma_pitch_as,sigma_roll_as,ratio_yaw,ratio_pitch,ratio_roll,converged"


def test_simulate_bad_spec_key(tmp_path, capsys):
    (tmp_path / "spec.json").write_text(json.dumps({"trails": 3}))
    assert main(["simulate", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "t.csv")]) == 2
    assert "trails" in capsys.readouterr().err


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "fiducial_attitude", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("render", "centroid", "calibrate", "estimate", "simulate"):
        assert cmd in out.stdout
