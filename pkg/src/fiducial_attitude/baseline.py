"""Single-frame planar pose from a DLT homography.

This is the six-degree-of-freedom comparator: it recovers rotation *and*
translation of the marker plane relative to the camera, ignoring that the
platform can only rotate about a fixed point.  It also seeds the iterative
solvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CN, Intrinsics, SystemGeometry, normalize_pixels, undistort
from .rotation import matrix_to_quat, quat_to_matrix


class HomographyError(ValueError):
    """Degenerate correspondences or an implausible decomposition."""


@dataclass
class PosePnP:
    rotation: np.ndarray  # unit quaternion of [C B] (passive, body -> camera)
    translation: np.ndarray  # body origin in the camera frame (m)
    reprojection_rms: float  # in normalized-image units scaled by the mean focal length (pixel)


def _hartley(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d <= 0:
        raise HomographyError("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _check_not_collinear(pts: np.ndarray, what: str):
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0 or sv[1] / sv[0] < 1e-6:
        raise HomographyError(f"{what} points are collinear")


def homography_dlt(src, dst) -> np.ndarray:
    """Normalized DLT: ``dst ~ H @ [src, 1]``; ``H[2, 2]`` scaled to unit Frobenius norm."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) < 4 or len(src) != len(dst):
        raise HomographyError("need at least four correspondences")
    _check_not_collinear(src, "plane")
    _check_not_collinear(dst, "image")
    Ts, Td = _hartley(src), _hartley(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    n = len(s)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1.0
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1.0
    A[1::2, 6:8] = -d[:, 1:] * s
    A[1::2, 8] = -d[:, 1]
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] < 1e-12 * sv[0]:
        raise HomographyError("rank-deficient homography system")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    return H / np.linalg.norm(H)


def apply_homography(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    h = pts @ H[:, :2].T + H[:, 2]
    return h[:, :2] / h[:, 2:3]


def estimate_homography(world, pixels, intr: Intrinsics) -> np.ndarray:
    """Homography from plane coordinates (m) to undistorted normalized image coordinates."""
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    x = normalize_pixels(undistort(pix, intr), intr)
    return homography_dlt(world, x)


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def pose_from_homography(H, world=None, image=None, focal: float = 1.0) -> PosePnP:
    """Decompose a plane-to-normalized-image homography into rotation and translation.

    ``world``/``image`` (plane and normalized image points) are used to rank
    the two sign hypotheses by reprojection error; ``focal`` converts that
    error to pixels for reporting.
    """
    H = np.asarray(H, dtype=float)
    if abs(np.linalg.det(H)) < 1e-300:
        raise HomographyError("singular homography")
    s = 0.5 * (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    best = None
    for sign in (1.0, -1.0):
        h = sign * H / s
        t = h[:, 2]
        if t[2] <= 0:
            continue
        r1, r2 = h[:, 0], h[:, 1]
        R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
        if world is not None and image is not None:
            w = np.asarray(world, dtype=float).reshape(-1, 2)
            pc = w @ R[:, :2].T + t
            if np.any(pc[:, 2] <= 0):
                continue
            err = pc[:, :2] / pc[:, 2:3] - np.asarray(image, dtype=float).reshape(-1, 2)
            rms = float(np.sqrt(np.mean(np.sum(err**2, axis=1)))) * focal
        else:
            rms = np.nan
        cand = PosePnP(matrix_to_quat(R), t.copy(), rms)
        if best is None or (np.isfinite(rms) and rms < best.reprojection_rms):
            best = cand
    if best is None:
        raise HomographyError("both decomposition hypotheses place the plane behind the camera")
    return best


def planar_pose(world, pixels, intr: Intrinsics) -> PosePnP:
    world = np.asarray(world, dtype=float).reshape(-1, 2)
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    x = normalize_pixels(undistort(pix, intr), intr)
    H = homography_dlt(world, x)
    return pose_from_homography(H, world, x, focal=0.5 * (intr.fx + intr.fy))


def baseline_attitude(geom: SystemGeometry, intr: Intrinsics, obs) -> np.ndarray:
    """Platform attitude quaternion ``q_NB`` from the planar baseline.

    All patterns are merged into one body-frame point set (the baseline is
    given the exact inter-pattern geometry); body-frame z is ignored.
    """
    if len(obs) < 4:
        raise HomographyError("the planar baseline needs at least four markers")
    body = geom.body_points()[np.asarray(obs.marker_ids) - 1]
    pose = planar_pose(body[:, :2], obs.pixels, intr)
    cb = quat_to_matrix(pose.rotation)
    # [CB] = [CN][NB]  ->  [NB] = [CN]^T [CB]
    return matrix_to_quat(CN.T @ cb)
