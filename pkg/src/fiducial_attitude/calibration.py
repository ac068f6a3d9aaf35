"""Batch calibration of optics, rig geometry and per-image attitudes.

The parameter vector is laid out as

    (fx, fy, cx, cy, w1, w2, w3, r_bn, r_nc,
     [r_skb, p_bsk] for each additional pattern,
     p_NB for each image)

In coplanar mode only the in-plane translation (x, y) and the first rotation
parameter of each additional pattern are free; the remaining components are
held at their initial values.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .camera import (
    CN,
    Intrinsics,
    Pattern,
    SystemGeometry,
    d_pixel_d_camera,
    d_pixel_d_intrinsics,
    geometry_to_dict,
    intrinsics_to_dict,
    project_trace,
)
from .estimator import ObservationSet, SolverError
from .rotation import (
    d_quat_d_params,
    d_rotated_vecs_d_quat,
    params_to_quat,
    quat_to_params,
    quats_to_matrices,
)

log = logging.getLogger(__name__)

N_GLOBAL = 13
MAX_ITER = 30
STEP_TOL = 1e-8  # RMS predicted pixel change of an accepted step
REL_COST_TOL = 1e-12
LAMBDA0 = 1e-6
COND_LIMIT = 1e12


class IncompleteFrameError(ValueError):
    pass


class UnderdeterminedError(ValueError):
    """Fewer measurements than unknowns (m < p)."""


class DegenerateCalibrationError(SolverError):
    """Normal equations are rank deficient, typically because the poses lack variety."""


def _pattern_cols(coplanar: bool) -> tuple[list, list]:
    """Which components of (r_skb, p_bsk) are free."""
    return ([0, 1], [0]) if coplanar else ([0, 1, 2], [0, 1, 2])


@dataclass
class ParameterVector:
    """Structured view of the calibration unknowns.

    ``geometry`` also carries the (known) marker coordinates and, in coplanar
    mode, the held components of each additional pattern pose.
    """

    intrinsics: Intrinsics
    geometry: SystemGeometry
    attitudes: np.ndarray  # (N_i, 3)
    coplanar: bool = True

    def __post_init__(self):
        self.attitudes = np.asarray(self.attitudes, dtype=float).reshape(-1, 3)

    @property
    def n_images(self) -> int:
        return len(self.attitudes)

    @property
    def n_extra_patterns(self) -> int:
        return self.geometry.n_extra_patterns

    @property
    def per_pattern(self) -> int:
        return 3 if self.coplanar else 6

    @property
    def size(self) -> int:
        return N_GLOBAL + self.per_pattern * self.n_extra_patterns + 3 * self.n_images

    @property
    def attitude_offset(self) -> int:
        return N_GLOBAL + self.per_pattern * self.n_extra_patterns

    def pack(self) -> np.ndarray:
        g = self.geometry
        tcols, rcols = _pattern_cols(self.coplanar)
        parts = [self.intrinsics.as_array(), g.r_bn, g.r_nc]
        for pat in g.patterns[1:]:
            parts += [pat.r_skb[tcols], pat.p_bsk[rcols]]
        parts.append(self.attitudes.reshape(-1))
        return np.concatenate(parts)

    def unpack(self, x) -> "ParameterVector":
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {x.shape}")
        tcols, rcols = _pattern_cols(self.coplanar)
        intr = Intrinsics.from_array(x[:7])
        pats = [self.geometry.patterns[0]]
        i = N_GLOBAL
        for pat in self.geometry.patterns[1:]:
            r = pat.r_skb.copy()
            r[tcols] = x[i : i + len(tcols)]
            i += len(tcols)
            p = pat.p_bsk.copy()
            p[rcols] = x[i : i + len(rcols)]
            i += len(rcols)
            pats.append(Pattern(r, p, pat.markers))
        geom = replace(self.geometry, r_bn=x[7:10], r_nc=x[10:13], patterns=tuple(pats))
        return ParameterVector(intr, geom, x[i:].reshape(-1, 3), self.coplanar)

    def names(self) -> list:
        out = ["fx", "fy", "cx", "cy", "w1", "w2", "w3"]
        out += [f"r_bn[{a}]" for a in range(3)] + [f"r_nc[{a}]" for a in range(3)]
        tcols, rcols = _pattern_cols(self.coplanar)
        for k in range(1, self.n_extra_patterns + 1):
            out += [f"r_s{k}b[{a}]" for a in tcols] + [f"p_bs{k}[{a}]" for a in rcols]
        for j in range(self.n_images):
            out += [f"p_nb{j}[{a}]" for a in range(3)]
        return out

    def units(self) -> list:
        out = ["px"] * 4 + ["-"] * 3 + ["m"] * 6
        tcols, rcols = _pattern_cols(self.coplanar)
        for _ in range(self.n_extra_patterns):
            out += ["m"] * len(tcols) + ["-"] * len(rcols)
        return out + ["-"] * (3 * self.n_images)


# -- residuals and Jacobian -----------------------------------------------------


def _frame_pixels(frames, n_markers: int) -> np.ndarray:
    """(N_i, N_m, 2) observed pixels in marker-id order; every frame must be complete."""
    out = np.empty((len(frames), n_markers, 2))
    for j, fr in enumerate(frames):
        ids = np.asarray(fr.marker_ids)
        if len(ids) != n_markers or set(ids.tolist()) != set(range(1, n_markers + 1)):
            raise IncompleteFrameError(f"frame {fr.frame_id} does not observe all {n_markers} markers")
        out[j, ids - 1] = fr.pixels
    return out


def _predict(v: ParameterVector, with_trace: bool = False):
    g = v.geometry
    body = g.body_points()  # (N_m, 3)
    u = body + g.r_bn
    Q = params_to_quat(v.attitudes)
    NB = quats_to_matrices(Q)  # (N_i, 3, 3)
    r_in = np.einsum("jab,ib->jia", NB, u)
    r_ic = g.r_nc + r_in @ CN.T
    tr = project_trace(r_ic.reshape(-1, 3), v.intrinsics)
    if with_trace:
        return tr, Q, NB, u
    return tr.R


def stack_residuals(v: ParameterVector, frames) -> np.ndarray:
    """All per-frame reprojection residuals, frame-major, marker ids ascending."""
    if len(frames) != v.n_images:
        raise ValueError("one attitude per frame is required")
    obs = _frame_pixels(frames, v.geometry.n_markers)
    return (_predict(v) - obs.reshape(-1, 2)).reshape(-1)


def calibration_jacobian(v: ParameterVector, frames=None) -> sp.csr_matrix:
    """Sparse (m, p) Jacobian of :func:`stack_residuals`.

    ``frames`` is accepted for interface symmetry; the Jacobian does not depend
    on the observations.
    """
    return _jacobian(v)[0]


def _jacobian(v: ParameterVector):
    g = v.geometry
    n_i, n_m = v.n_images, g.n_markers
    M = n_i * n_m
    tr, Q, NB, u = _predict(v, with_trace=True)
    NBr = np.repeat(NB, n_m, axis=0)  # (M, 3, 3), row = j * n_m + i
    dPdr = d_pixel_d_camera(tr, v.intrinsics)  # (M, 2, 3)
    A = dPdr @ CN
    B = A @ NBr  # derivative w.r.t. a body-frame displacement

    blocks = [d_pixel_d_intrinsics(tr, v.intrinsics), B, dPdr]  # 7 + 3 + 3 global columns
    glob = np.concatenate(blocks, axis=2)  # (M, 2, 13)

    Qr = np.repeat(Q, n_m, axis=0)
    Ur = np.tile(u, (n_i, 1))
    att = A @ d_rotated_vecs_d_quat(Qr, Ur) @ np.repeat(d_quat_d_params(v.attitudes), n_m, axis=0)

    rows_base = 2 * np.arange(M)
    rows, cols, vals = [], [], []

    def add(block, col_idx, sel=None):
        # block (n, 2, c); col_idx (n, c); sel selects observations
        r = rows_base if sel is None else rows_base[sel]
        nb, _, c = block.shape
        rr = np.repeat(np.stack([r, r + 1], axis=1)[:, :, None], c, axis=2)
        cc = np.repeat(col_idx[:, None, :], 2, axis=1)
        rows.append(rr.reshape(-1))
        cols.append(cc.reshape(-1))
        vals.append(block.reshape(-1))

    add(glob, np.broadcast_to(np.arange(N_GLOBAL), (M, N_GLOBAL)))
    att_cols = v.attitude_offset + 3 * np.repeat(np.arange(n_i), n_m)[:, None] + np.arange(3)
    add(att, att_cols)

    tcols, rcols = _pattern_cols(v.coplanar)
    mpat = np.tile(g.marker_pattern, n_i)
    pcoords = np.tile(g.pattern_coords(), (n_i, 1))
    col = N_GLOBAL
    for k, pat in enumerate(g.patterns[1:], start=1):
        sel = np.nonzero(mpat == k)[0]
        Bk = B[sel]
        # d r_ib / d r_skb is the identity: the offset is already in body axes
        trans = Bk[:, :, tcols]
        rot = (Bk @ d_rotated_vecs_d_quat(params_to_quat(pat.p_bsk), pcoords[sel]) @ d_quat_d_params(pat.p_bsk))[
            :, :, rcols
        ]
        blk = np.concatenate([trans, rot], axis=2)
        ncol = blk.shape[2]
        add(blk, np.broadcast_to(col + np.arange(ncol), (len(sel), ncol)), sel)
        col += ncol

    J = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * M, v.size)
    )
    return J, tr.R


# -- solver ------------------------------------------------------------------


@dataclass
class CalibrationResult:
    params: ParameterVector
    residual_sq: float
    sigma2_hat: float
    covariance: np.ndarray
    sigmas: np.ndarray
    iterations: int
    converged: bool
    m: int
    p: int
    history: list = field(default_factory=list)
    condition: float = float("nan")

    def to_dict(self) -> dict:
        v = self.params
        names, units = v.names(), v.units()
        n_fixed = v.attitude_offset
        return {
            "coplanar": v.coplanar,
            "m": self.m,
            "p": self.p,
            "residual_sq_px2": self.residual_sq,
            "sigma2_hat_px2": self.sigma2_hat,
            "iterations": self.iterations,
            "converged": self.converged,
            "condition_scaled": self.condition,
            "intrinsics": intrinsics_to_dict(v.intrinsics),
            "geometry": geometry_to_dict(v.geometry),
            "parameters": [
                {"name": names[i], "unit": units[i], "value": float(x), "sigma": float(self.sigmas[i])}
                for i, x in enumerate(v.pack()[:n_fixed])
            ],
            "attitudes": [
                {"p": a.tolist(), "sigma": self.sigmas[n_fixed + 3 * j : n_fixed + 3 * j + 3].tolist()}
                for j, a in enumerate(v.attitudes)
            ],
            "iteration_log": self.history,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _scaled_normal(J: sp.csr_matrix, eta: np.ndarray):
    JtJ = (J.T @ J).toarray()
    g = J.T @ eta
    d = np.sqrt(np.diag(JtJ))
    d[d == 0] = 1.0
    S = JtJ / np.outer(d, d)
    return S, g / d, d


def _condition(S: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(S)
    return float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")


def _check_condition(S: np.ndarray) -> float:
    cond = _condition(S)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise DegenerateCalibrationError(
            f"normal equations are rank deficient (scaled condition {cond:.3g}); use more varied poses"
        )
    return cond


def calibrate(
    v0: ParameterVector,
    frames,
    max_iter: int = MAX_ITER,
    step_tol: float = STEP_TOL,
) -> CalibrationResult:
    """Levenberg-Marquardt refinement of all calibration parameters.

    The damping is applied to the diagonal of the normal matrix (lambda starts
    at 1e-6, x10 after a rejected step, /10 after an accepted one).
    Convergence is declared when an accepted step changes the predictions by
    less than ``step_tol`` pixels RMS or the cost stops decreasing relatively
    by more than 1e-12.
    """
    obs = _frame_pixels(frames, v0.geometry.n_markers).reshape(-1)
    if len(frames) != v0.n_images:
        raise ValueError("one initial attitude per frame is required")
    m, p = obs.size, v0.size
    if m < p:
        raise UnderdeterminedError(f"{m} measurements for {p} unknowns")

    v = v0
    x = v.pack()
    J, pred = _jacobian(v)
    eta = pred.reshape(-1) - obs
    cost = float(eta @ eta)
    lam = LAMBDA0
    history = [{"iteration": 0, "cost": cost, "lambda": lam}]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        S, gs, d = _scaled_normal(J, eta)
        if it == 1:
            # checked up front as well: damping would otherwise let the solver
            # wander off an exactly singular start
            _check_condition(S)
        accepted = False
        while lam < 1e16:
            try:
                c, low = scipy.linalg.cho_factor(S + lam * np.eye(p), check_finite=False)
                step = -scipy.linalg.cho_solve((c, low), gs, check_finite=False) / d
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            v_try = v.unpack(x + step)
            try:
                J_try, pred_try = _jacobian(v_try)
            except ValueError:
                lam *= 10.0
                continue
            eta_try = pred_try.reshape(-1) - obs
            cost_try = float(eta_try @ eta_try)
            if cost_try <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # no further descent possible at any damping
            history.append({"iteration": it, "cost": cost, "lambda": lam, "accepted": False})
            break
        moved = float(np.sqrt(np.mean((J @ step) ** 2)))
        rel = (cost - cost_try) / max(cost, 1e-300)
        v, x, J, eta, cost = v_try, x + step, J_try, eta_try, cost_try
        lam = max(lam / 10.0, 1e-12)
        history.append({"iteration": it, "cost": cost, "lambda": lam, "step_px_rms": moved})
        log.debug("calibrate it=%d cost=%.6g step=%.3g", it, cost, moved)
        if moved < step_tol or rel < REL_COST_TOL or cost < 1e-24 * m:
            converged = True
            break

    S, _, d = _scaled_normal(J, eta)
    cond = _check_condition(S)
    dof = m - p - 1
    sigma2 = cost / dof if dof > 0 else float("nan")
    c, low = scipy.linalg.cho_factor(S, check_finite=False)
    Sinv = scipy.linalg.cho_solve((c, low), np.eye(p), check_finite=False)
    cov = sigma2 * Sinv / np.outer(d, d)
    sig = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return CalibrationResult(v, cost, sigma2, cov, sig, it, converged, m, p, history, cond)


def initialize_guess(frames, geometry: SystemGeometry, intrinsics: Intrinsics, coplanar: bool = True) -> ParameterVector:
    """Nominal rig and optics plus per-frame attitudes from the planar baseline."""
    from .baseline import baseline_attitude

    if not frames:
        raise ValueError("no frames to initialize from")
    att = np.array([quat_to_params(baseline_attitude(geometry, intrinsics, fr), canonical=True) for fr in frames])
    return ParameterVector(intrinsics, geometry, att, coplanar)
