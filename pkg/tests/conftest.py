import numpy as np
import pytest

from fiducial_attitude.camera import Intrinsics, Pattern, SystemGeometry, default_config, project_all
from fiducial_attitude.estimator import ObservationSet
from fiducial_attitude.simulation import sample_poses


def central_diff(f, x, h=1e-6):
    """Column-wise central differences of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (np.asarray(f(x + e)) - np.asarray(f(x - e))).reshape(-1) / (2 * h)
    return J


def rel_err(A, B, floor=1e-9):
    """max |A - B| relative to max |B| (absolute floor ``floor``)."""
    A, B = np.asarray(A), np.asarray(B)
    return float(np.max(np.abs(A - B)) / max(np.max(np.abs(B)), floor))


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def geom(cfg):
    return cfg.geometry


@pytest.fixture(scope="session")
def intr(cfg):
    return cfg.intrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_pattern_rig(tilted: bool = False) -> tuple[SystemGeometry, Intrinsics]:
    """Small rig: body pattern plus one offset pattern (optionally out of plane)."""
    cfg = default_config()
    g = cfg.geometry
    p1 = g.patterns[1]
    r = p1.r_skb.copy()
    p = p1.p_bsk.copy()
    if tilted:
        r[2] = 0.004
        p = p + np.array([0.0, 0.02, -0.015])
    pats = (g.patterns[0], Pattern(r, p, p1.markers))
    geom = SystemGeometry(g.r_bn, g.r_nc, pats)
    intr = Intrinsics(cfg.intrinsics.fx, cfg.intrinsics.fy, cfg.intrinsics.cx, cfg.intrinsics.cy, (0.05, -0.2, 0.4))
    return geom, intr


def synth_frames(geom, intr, poses, sigma=0.0, rng=None) -> list:
    out = []
    for j, p in enumerate(poses):
        pix = project_all(geom, intr, p)
        if sigma > 0:
            pix = pix + rng.normal(0.0, sigma, pix.shape)
        out.append(ObservationSet.complete(j, pix))
    return out


def random_poses(n, rng, tilt=20.0):
    return sample_poses(n, tilt, rng)


def calibration_blocks(v) -> dict:
    """Column ranges of each Jacobian block of a parameter vector."""
    blocks = {"intrinsics": range(0, 4), "distortion": range(4, 7), "r_bn": range(7, 10), "r_nc": range(10, 13)}
    nt = 2 if v.coplanar else 3
    i = 13
    for k in range(1, v.n_extra_patterns + 1):
        blocks[f"pattern{k}_translation"] = range(i, i + nt)
        i += nt
        blocks[f"pattern{k}_rotation"] = range(i, i + v.per_pattern - nt)
        i += v.per_pattern - nt
    blocks["attitudes"] = range(i, v.size)
    return blocks


def calibration_fd_errors(v, frames, h=1e-6) -> dict:
    """Per-block relative error of the analytic calibration Jacobian vs central differences."""
    from fiducial_attitude.calibration import calibration_jacobian, stack_residuals

    J = calibration_jacobian(v, frames).toarray()
    x0 = v.pack()
    fd = central_diff(lambda x: stack_residuals(v.unpack(x), frames), x0, h)
    return {name: rel_err(J[:, list(cols)], fd[:, list(cols)]) for name, cols in calibration_blocks(v).items()}


def calibration_recovery(v_est, v_true) -> tuple[float, float]:
    """(max relative error of the non-attitude parameters, max attitude angle in rad).

    Attitudes are compared as rotations: the chart covers each rotation twice,
    so equal rotations can carry different parameter triples.
    """
    from fiducial_attitude.rotation import params_to_quat, rotation_angle

    off = v_true.attitude_offset
    x, t = v_est.pack()[:off], v_true.pack()[:off]
    rel = float(np.max(np.abs(x - t) / np.maximum(np.abs(t), 1.0)))
    ang = max(rotation_angle(params_to_quat(a), params_to_quat(b)) for a, b in zip(v_est.attitudes, v_true.attitudes))
    return rel, float(ang)
