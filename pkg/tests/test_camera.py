import json

import numpy as np
import pytest

from conftest import central_diff, rel_err
from fiducial_attitude.camera import (
    CN,
    ConfigError,
    Intrinsics,
    Pattern,
    ProjectionError,
    SystemGeometry,
    body_to_inertial,
    camera_to_inertial,
    config_from_dict,
    d_pixel_d_camera,
    d_pixel_d_intrinsics,
    default_config,
    inertial_to_camera,
    load_config,
    marker_body_coords,
    project,
    project_all,
    project_marker,
    project_trace,
    undistort,
)
from fiducial_attitude.rotation import params_to_matrix
from fiducial_attitude.simulation import sample_poses

HALF_TURN_3 = np.diag([-1.0, -1.0, 1.0])


def _single(r_skb=(0, 0, 0), p_bsk=(1, 0, 0), markers=((0, 0, 0),), r_bn=(0, 0, 0.042), r_nc=(0, 0, 1.27)):
    pats = [Pattern(np.zeros(3), [1, 0, 0], [[0, 0, 0]])]
    if r_skb is not None:
        pats.append(Pattern(r_skb, p_bsk, markers))
    return SystemGeometry(r_bn, r_nc, pats)


def test_marker_body_coords_examples(geom):
    np.testing.assert_array_equal(marker_body_coords(geom, 0, 3), geom.patterns[0].markers[3])
    g = _single((0.1, 0, 0), (1, 0, 0), [(0, 0.2, 0)])
    np.testing.assert_allclose(marker_body_coords(g, 1, 0), [0.1, 0.2, 0])
    g = _single((0, 0, 0), (0, 0, 0), [(1, 0, 0)])  # p = 0 is a half turn about axis 3
    np.testing.assert_allclose(marker_body_coords(g, 1, 0), [-1, 0, 0], atol=1e-15)
    with pytest.raises(KeyError):
        marker_body_coords(g, 1, 5)


def test_frame_transforms(rng, geom):
    np.testing.assert_allclose(body_to_inertial([1, 2, 3], [0.1, 0, 0], np.eye(3)), [1.1, 2, 3])
    np.testing.assert_allclose(body_to_inertial([1, 0, 0], [0, 0, 0], HALF_TURN_3), [-1, 0, 0])
    for _ in range(100):
        r, t = rng.normal(size=3), rng.normal(size=3)
        nb = params_to_matrix(rng.normal(size=3))
        assert abs(np.linalg.norm(body_to_inertial(r, t, nb)) - np.linalg.norm(r + t)) < 1e-12
        np.testing.assert_allclose(camera_to_inertial(inertial_to_camera(r, geom), geom), r, atol=1e-12)
    np.testing.assert_array_equal(inertial_to_camera(np.zeros(3), geom), geom.r_nc)
    np.testing.assert_allclose(inertial_to_camera([0, 0, 1.0], geom), [0, 0, 0.27], atol=1e-15)
    np.testing.assert_array_equal(CN, np.diag([1.0, -1, -1]))


def test_project_examples():
    intr = Intrinsics(3478, 3478, 1024, 768)
    np.testing.assert_allclose(project([0, 0, 1.0], intr), [1024, 768])
    intr = Intrinsics(1000, 1000, 512, 384)
    np.testing.assert_allclose(project([0.1, 0, 1.0], intr), [612, 384])
    intr = Intrinsics(1000, 1000, 512, 384, (0.1, 0, 0))
    np.testing.assert_allclose(project([0.1, 0, 1.0], intr), [612.1, 384], atol=1e-12)
    with pytest.raises(ProjectionError):
        project([0, 0, -1.0], intr)
    with pytest.raises(ProjectionError):
        project([0, 0, 0.0], intr)


def test_distortion_vanishes_on_axis(rng):
    for _ in range(10):
        intr = Intrinsics(3000, 3100, 1000, 700, tuple(rng.normal(size=3)))
        np.testing.assert_allclose(project([0, 0, 2.0], intr), [1000, 700], atol=1e-12)


def test_project_marker_on_axis():
    g = _single(None)
    intr = Intrinsics(3478, 3478, 1024, 768)
    np.testing.assert_allclose(project_marker(g, intr, [1, 0, 0], 0, 0), [1024, 768], atol=1e-12)


def test_project_marker_is_composition(rng, geom, intr):
    p = rng.normal(size=3) * 0.1 + [1, 0, 0]
    nb = params_to_matrix(p)
    for mid in (1, 7, 20):
        k, i = geom.locate(mid)
        manual = project(inertial_to_camera(body_to_inertial(marker_body_coords(geom, k, i), geom.r_bn, nb), geom), intr)
        np.testing.assert_array_equal(project_marker(geom, intr, p, k, i), manual)
        np.testing.assert_allclose(project_all(geom, intr, p)[mid - 1], manual, atol=1e-12)


def test_small_attitude_step_moves_pixel_by_lever_arm():
    # a marker at the body origin sits h = r_bn_z above the CoR; a small tilt
    # about body axis 1 moves it by about f h / depth per radian
    g = _single(None)
    intr = Intrinsics(3478, 3478, 1024, 768)
    d = 1e-6
    p = [1.0, 0.0, 0.0]
    # tilt about axis 1 by angle d: q = (cos d/2, sin d/2, 0, 0) -> p = q[:3] / (1 + q[3])
    p_step = [np.cos(d / 2), np.sin(d / 2), 0.0]
    du = project_marker(g, intr, p_step, 0, 0) - project_marker(g, intr, p, 0, 0)
    expected = 3478 * 0.042 / (1.27 - 0.042) * d
    assert abs(np.linalg.norm(du) - expected) / expected < 1e-3


def test_undistort_examples(rng, intr):
    pts = rng.uniform([0, 0], [2048, 1536], (1000, 2))
    np.testing.assert_allclose(undistort(pts, intr), pts, atol=1e-12)
    for _ in range(20):
        w = rng.uniform(-1, 1, 3) * [0.15, 0.15, 0.15]
        d = Intrinsics(3478, 3478, 1024, 768, tuple(w))
        np.testing.assert_allclose(undistort([1024.0, 768.0], d), [1024, 768], atol=0)
        # distort known undistorted points, then invert
        x = rng.uniform([-0.29, -0.22], [0.29, 0.22], (50, 2))
        r = np.column_stack([x, np.ones(len(x))])
        distorted = project(r, d)
        back = undistort(distorted, d)
        np.testing.assert_allclose(back, x * 3478 + [1024, 768], atol=1e-9)
        np.testing.assert_allclose(project(np.column_stack([(back - [1024, 768]) / 3478, np.ones(len(x))]), d), distorted, atol=1e-9)


def test_d_pixel_d_camera_matches_finite_differences(rng):
    intr = Intrinsics(3478, 3470, 1020, 770, (0.1, -0.12, 0.14))
    r = np.column_stack([rng.uniform(-0.3, 0.3, (50, 2)), rng.uniform(1.1, 1.4, 50)])
    J = d_pixel_d_camera(project_trace(r, intr), intr)
    for n in range(len(r)):
        fd = central_diff(lambda x: project(x, intr), r[n])
        assert rel_err(J[n], fd) < 1e-6


def test_d_pixel_d_intrinsics_matches_finite_differences(rng):
    base = np.array([3478, 3470, 1020, 770, 0.1, -0.12, 0.14])
    r = np.column_stack([rng.uniform(-0.3, 0.3, (50, 2)), rng.uniform(1.1, 1.4, 50)])
    J = d_pixel_d_intrinsics(project_trace(r, Intrinsics.from_array(base)), Intrinsics.from_array(base))
    fd = central_diff(lambda a: project(r, Intrinsics.from_array(a)), base)
    J = J.reshape(-1, 7)
    for c in range(7):
        assert rel_err(J[:, c], fd[:, c]) < 1e-6


def test_projection_finite_within_envelope(rng, geom, intr):
    for p in sample_poses(500, 22.0, rng):
        pix = project_all(geom, intr, p)
        assert np.all(np.isfinite(pix))


def test_default_config_units_and_layout(cfg):
    g = cfg.geometry
    assert g.n_markers == 20 and g.n_extra_patterns == 3
    np.testing.assert_allclose(g.r_nc, [0, 0, 1.27])
    # the file stores markers in mm; internally everything is metres
    assert np.max(np.abs(g.pattern_coords())) < 0.3
    np.testing.assert_array_equal(g.marker_ids, np.arange(1, 21))


def _cfg_dict():
    return json.loads(default_config_json())


def default_config_json():
    from fiducial_attitude.camera import DEFAULT_CONFIG_PATH

    return DEFAULT_CONFIG_PATH.read_text()


def test_units_converted_at_load():
    d = _cfg_dict()
    d["geometry"]["r_nc_cm"] = [0, 0, 127.0]
    del d["geometry"]["r_nc_m"]
    d["geometry"]["r_bn_cm"] = [0, 0, 4.2]
    del d["geometry"]["r_bn_m"]
    g = config_from_dict(d).geometry
    np.testing.assert_allclose(g.r_nc, [0, 0, 1.27])
    np.testing.assert_allclose(g.r_bn, [0, 0, 0.042])


@pytest.mark.parametrize(
    "mutate, key",
    [
        (lambda d: d["intrinsics"].pop("fx"), "intrinsics.fx"),
        (lambda d: d["geometry"].pop("r_nc_m"), "r_nc_m"),
        (lambda d: d["geometry"]["patterns"][1].pop("p_bsk"), "patterns[1].p_bsk"),
        (lambda d: d["geometry"].__setitem__("r_bn_m", [0, 0]), "r_bn_m"),
        (lambda d: d.pop("geometry"), "geometry"),
    ],
)
def test_config_errors_name_the_key(mutate, key):
    d = _cfg_dict()
    mutate(d)
    with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace("]", r"\]")):
        config_from_dict(d)


def test_config_invariants(tmp_path):
    d = _cfg_dict()
    d["geometry"]["patterns"][0]["p_bsk"] = [0.9, 0, 0]
    with pytest.raises(ConfigError, match="pattern 0"):
        config_from_dict(d)
    d = _cfg_dict()
    d["intrinsics"]["fx"] = -1.0
    with pytest.raises(ConfigError):
        config_from_dict(d)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
