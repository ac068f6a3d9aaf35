"""Online attitude solve: three rotation parameters, everything else known."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import (
    SystemGeometry,
    Intrinsics,
    CN,
    body_to_inertial,
    d_pixel_d_camera,
    inertial_to_camera,
    project_trace,
)
from .rotation import (
    d_quat_d_params,
    d_rotated_vecs_d_quat,
    params_to_matrix,
    params_to_quat,
    quat_to_params,
)

MAX_ITER = 50
STEP_TOL = 1e-10
REL_RESIDUAL_TOL = 1e-12
MAX_HALVINGS = 8
COND_LIMIT = 1e12


class SolverError(RuntimeError):
    """Numerical failure (singular normal equations, non-convergence)."""


@dataclass
class ObservationSet:
    frame_id: int
    marker_ids: np.ndarray  # (n,)
    pixels: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.marker_ids = np.asarray(self.marker_ids, dtype=int).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(self.marker_ids) != len(self.pixels):
            raise ValueError("marker_ids and pixels differ in length")
        if len(np.unique(self.marker_ids)) != len(self.marker_ids):
            raise ValueError(f"duplicate marker id in frame {self.frame_id}")

    def __len__(self):
        return len(self.marker_ids)

    @classmethod
    def complete(cls, frame_id: int, pixels) -> "ObservationSet":
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return cls(frame_id, np.arange(1, len(pixels) + 1), pixels)


@dataclass
class AttitudeSolution:
    p_nb: np.ndarray
    q_nb: np.ndarray
    residual_sq: float
    iterations: int
    converged: bool


def _body_points_for(geom: SystemGeometry, marker_ids) -> np.ndarray:
    ids = np.asarray(marker_ids, dtype=int)
    if ids.size and (ids.min() < 1 or ids.max() > geom.n_markers):
        bad = ids[(ids < 1) | (ids > geom.n_markers)]
        raise KeyError(f"unknown marker id(s) {bad.tolist()}")
    return geom.body_points()[ids - 1]


def reprojection_residuals(geom: SystemGeometry, intr: Intrinsics, p_nb, obs: ObservationSet) -> np.ndarray:
    """Predicted minus observed pixels, stacked (u1, v1, u2, v2, ...)."""
    r_ib = _body_points_for(geom, obs.marker_ids)
    r_ic = inertial_to_camera(body_to_inertial(r_ib, geom.r_bn, params_to_matrix(p_nb)), geom)
    return (project_trace(r_ic, intr).R - obs.pixels).reshape(-1)


def _residuals_and_jacobian(geom, intr, p_nb, r_ib, observed):
    q = params_to_quat(p_nb)
    nb = params_to_matrix(p_nb)
    u = r_ib + geom.r_bn
    r_ic = inertial_to_camera(body_to_inertial(r_ib, geom.r_bn, nb), geom)
    tr = project_trace(r_ic, intr)
    eps = (tr.R - observed).reshape(-1)
    # d pixel / d r_ic . [CN] . d(NB u)/dq . dq/dp
    G = d_pixel_d_camera(tr, intr) @ CN @ d_rotated_vecs_d_quat(q, u) @ d_quat_d_params(p_nb)
    return eps, G.reshape(-1, 3)


def attitude_jacobian(geom: SystemGeometry, intr: Intrinsics, p_nb, obs: ObservationSet) -> np.ndarray:
    """(2n, 3) analytic Jacobian of :func:`reprojection_residuals` w.r.t. ``p_nb``."""
    r_ib = _body_points_for(geom, obs.marker_ids)
    return _residuals_and_jacobian(geom, intr, np.asarray(p_nb, dtype=float), r_ib, obs.pixels)[1]


def solve_attitude(
    geom: SystemGeometry,
    intr: Intrinsics,
    obs: ObservationSet,
    p0,
    max_iter: int = MAX_ITER,
    step_tol: float = STEP_TOL,
) -> AttitudeSolution:
    """Gauss-Newton on the three attitude parameters.

    Steps that increase the squared residual are halved up to eight times.
    Convergence needs a step below ``step_tol`` and a residual change below
    1e-12 relative or below the roundoff level of the residual itself.
    ``iterations`` counts the updates made before the convergence test
    passed; the final sub-tolerance step is applied but not counted.

    Raises:
        ValueError: fewer than three observed markers or non-finite guess.
        SolverError: singular normal equations.
    """
    if len(obs) < 3:
        raise ValueError("at least three markers are required")
    p = np.asarray(p0, dtype=float).copy()
    if not np.all(np.isfinite(p)):
        raise ValueError("initial guess must be finite")
    r_ib = _body_points_for(geom, obs.marker_ids)
    observed = obs.pixels

    eps, J = _residuals_and_jacobian(geom, intr, p, r_ib, observed)
    cost = eps @ eps
    converged = False
    iterations = 0
    for _ in range(max_iter):
        JtJ = J.T @ J
        if np.linalg.cond(JtJ) > COND_LIMIT:
            raise SolverError("singular normal equations in attitude solve")
        step = -np.linalg.solve(JtJ, J.T @ eps)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            p_try = p + t * step
            eps_try, J_try = _residuals_and_jacobian(geom, intr, p_try, r_ib, observed)
            cost_try = eps_try @ eps_try
            if cost_try <= cost:
                break
            t *= 0.5
        else:
            # no descent along the step: at the floating-point floor of the cost
            converged = bool(np.linalg.norm(step) < 1e-6)
            break
        step_norm = t * np.linalg.norm(step)
        change = abs(cost - cost_try)
        p, eps, J, cost = p_try, eps_try, J_try, cost_try
        # each residual is a difference of ~1e3 px values, so the cost itself is
        # only known to about eps * sum|e||R|; smaller changes are roundoff
        floor = 8.0 * np.finfo(float).eps * np.abs(eps) @ np.abs(observed).reshape(-1)
        settled = change < max(REL_RESIDUAL_TOL * cost, floor) or cost < 1e-20
        if step_norm < step_tol and settled:
            # this step only confirmed convergence; it is applied but not counted
            converged = True
            break
        iterations += 1
    return AttitudeSolution(p, params_to_quat(p), float(cost), iterations, bool(converged))


def cold_start_attitude(geom: SystemGeometry, intr: Intrinsics, obs: ObservationSet) -> np.ndarray:
    """Seed attitude parameters from the planar homography baseline.

    The baseline's translation is discarded; only its rotation is kept.
    """
    from .baseline import baseline_attitude

    q_nb = baseline_attitude(geom, intr, obs)
    return quat_to_params(q_nb, canonical=True)


class AttitudeSession:
    """Streaming solver that warm-starts each frame from the previous solution.

    Not thread-safe; use one session per stream.
    """

    def __init__(self, geom: SystemGeometry, intr: Intrinsics, warm_start: bool = True):
        self.geom = geom
        self.intr = intr
        self.warm_start = warm_start
        self._last = None

    def reset(self):
        self._last = None

    def process(self, obs: ObservationSet) -> AttitudeSolution:
        if self.warm_start and self._last is not None:
            p0 = self._last
        else:
            p0 = cold_start_attitude(self.geom, self.intr, obs)
        sol = solve_attitude(self.geom, self.intr, obs, p0)
        if sol.converged:
            self._last = quat_to_params(sol.q_nb, canonical=True)
        return sol
