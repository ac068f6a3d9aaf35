"""Monte Carlo accuracy campaigns.

Each trial perturbs a nominal rig, runs a virtual calibration on ``n_calib``
random poses, then estimates ``n_eval`` fresh poses with the calibrated model
and with the planar homography baseline (which is handed the true optics
and pattern poses).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .baseline import HomographyError, baseline_attitude
from .calibration import calibrate, initialize_guess
from .camera import Intrinsics, Pattern, SystemConfig, SystemGeometry, default_config, load_config, project_all
from .estimator import ObservationSet, SolverError, cold_start_attitude, solve_attitude
from .rotation import (
    attitude_error_euler,
    matrix_from_euler321,
    matrix_to_quat,
    params_to_quat,
    quat_to_params,
    rotation_angle,
)

log = logging.getLogger(__name__)

ARCSEC = 180.0 / np.pi * 3600.0

# Table of sampling half-ranges around the nominal rig (metres, pixels, unitless)
DEFAULT_HALF_RANGES = {
    "fx": 50.0,
    "fy": 50.0,
    "cx": 50.0,
    "cy": 50.0,
    "w": [0.15, 0.15, 0.15],
    "r_bn_m": [0.01, 0.01, 0.01],
    "r_nc_m": [0.05, 0.05, 0.05],
    "r_skb_m": [0.005, 0.005, 0.0],
    "p_bsk": [8.73e-3, 0.0, 0.0],
}

TRIAL_COLUMNS = [
    "trial",
    "sigma_i_px",
    "sigma_p_mm",
    "r2_px2",
    "sigma_yaw_as",
    "sigma_pitch_as",
    "sigma_roll_as",
    "ratio_yaw",
    "ratio_pitch",
    "ratio_roll",
    "converged",
]


def _zero_ranges() -> dict:
    return {k: (np.zeros_like(v).tolist() if isinstance(v, list) else 0.0) for k, v in DEFAULT_HALF_RANGES.items()}


@dataclass
class McSpec:
    trials: int = 20
    seed: int = 0
    n_calib: int = 350
    n_eval: int = 500
    sigma_i_px: tuple = (0.12, 0.12)  # sampled uniformly per trial
    sigma_p_mm: tuple = (0.05, 0.05)
    half_ranges: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_HALF_RANGES)))
    tilt_limit_deg: float = 20.0
    mode: str = "direct"  # or "image"
    coplanar: bool = True
    config: str | None = None  # nominal rig; None means the packaged default
    bins: tuple = (1, 1)  # aggregate bins over (sigma_i, sigma_p)

    def __post_init__(self):
        self.sigma_i_px = tuple(float(x) for x in np.broadcast_to(self.sigma_i_px, 2))
        self.sigma_p_mm = tuple(float(x) for x in np.broadcast_to(self.sigma_p_mm, 2))
        self.bins = tuple(int(b) for b in np.broadcast_to(self.bins, 2))
        # keys left out keep their default ranges
        self.half_ranges = {**json.loads(json.dumps(DEFAULT_HALF_RANGES)), **self.half_ranges}
        self.validate()

    def validate(self):
        if self.trials < 0:
            raise ValueError("trials must be non-negative")
        for name in ("sigma_i_px", "sigma_p_mm"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative range (lo <= hi)")
        for k, v in self.half_ranges.items():
            if k not in DEFAULT_HALF_RANGES:
                raise ValueError(f"unknown half-range key {k!r}")
            if np.any(np.asarray(v, dtype=float) < 0):
                raise ValueError(f"half-range {k!r} must be non-negative")
        if self.mode not in ("direct", "image"):
            raise ValueError(f"mode must be 'direct' or 'image', got {self.mode!r}")
        if not 0 <= self.tilt_limit_deg < 90:
            raise ValueError("tilt_limit_deg must lie in [0, 90)")
        if self.n_eval < 2:
            raise ValueError("n_eval must be at least 2")
        if min(self.bins) < 1:
            raise ValueError("bins must be positive")

    def nominal(self) -> SystemConfig:
        return default_config() if self.config is None else load_config(self.config)

    def check_size(self, geom: SystemGeometry):
        per = 3 if self.coplanar else 6
        m = 2 * self.n_calib * geom.n_markers
        p = 13 + per * geom.n_extra_patterns + 3 * self.n_calib
        if m < p:
            raise ValueError(f"n_calib={self.n_calib} gives {m} measurements for {p} unknowns")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_i_px"] = list(self.sigma_i_px)
        d["sigma_p_mm"] = list(self.sigma_p_mm)
        d["bins"] = list(self.bins)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "McSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown campaign key(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "McSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class TrialReport:
    trial: int
    sigma_i_px: float
    sigma_p_mm: float
    r2_px2: float = float("nan")
    sigma2_hat_px2: float = float("nan")
    converged: bool = False
    sigma_yaw_as: float = float("nan")
    sigma_pitch_as: float = float("nan")
    sigma_roll_as: float = float("nan")
    ratio_yaw: float = float("nan")
    ratio_pitch: float = float("nan")
    ratio_roll: float = float("nan")
    mean_error_as: float = float("nan")
    max_error_as: float = float("nan")
    calib_iterations: int = 0
    n_eval_solved: int = 0
    note: str = ""


# -- sampling -----------------------------------------------------------------


def _uniform(rng, half) -> np.ndarray:
    half = np.asarray(half, dtype=float)
    return rng.uniform(-1.0, 1.0, half.shape) * half


def sample_system(nominal: SystemConfig, half_ranges: dict, sigma_p_m: float, rng):
    """True rig: every nominal quantity shifted uniformly within its half-range.

    Marker coordinates get isotropic 3-D Gaussian noise of ``sigma_p_m``.
    Returns (true geometry, true intrinsics, perturbed marker coordinates in
    pattern frames).  Zero ranges and zero ``sigma_p_m`` give back the nominal
    rig exactly.
    """
    hr = {**_zero_ranges(), **half_ranges}
    ni, g = nominal.intrinsics, nominal.geometry
    intr = Intrinsics(
        ni.fx + _uniform(rng, hr["fx"]),
        ni.fy + _uniform(rng, hr["fy"]),
        ni.cx + _uniform(rng, hr["cx"]),
        ni.cy + _uniform(rng, hr["cy"]),
        tuple(np.asarray(ni.w) + _uniform(rng, hr["w"])),
    )
    pats = [g.patterns[0]]
    for pat in g.patterns[1:]:
        pats.append(Pattern(pat.r_skb + _uniform(rng, hr["r_skb_m"]), pat.p_bsk + _uniform(rng, hr["p_bsk"]), pat.markers))
    geom = replace(
        g,
        r_bn=g.r_bn + _uniform(rng, hr["r_bn_m"]),
        r_nc=g.r_nc + _uniform(rng, hr["r_nc_m"]),
        patterns=tuple(pats),
    )
    coords = g.pattern_coords()
    if sigma_p_m > 0:
        coords = coords + rng.normal(0.0, sigma_p_m, coords.shape)
    return geom.with_markers(coords), intr, coords


def sample_pose(tilt_limit_deg: float, rng) -> np.ndarray:
    """Yaw uniform on [0, 2 pi); pitch and roll uniform within the tilt limit."""
    lim = np.radians(tilt_limit_deg)
    roll, pitch = rng.uniform(-lim, lim, 2)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    bn = matrix_from_euler321(roll, pitch, yaw)
    return quat_to_params(matrix_to_quat(bn.T), canonical=True)


def sample_poses(n: int, tilt_limit_deg: float, rng) -> np.ndarray:
    return np.array([sample_pose(tilt_limit_deg, rng) for _ in range(n)]).reshape(-1, 3)


# -- observation generation ------------------------------------------------------


def _direct_observations(geom, intr, poses, sigma_i, rng) -> list:
    out = []
    for j, p in enumerate(poses):
        pix = project_all(geom, intr, p)
        if sigma_i > 0:
            pix = pix + rng.normal(0.0, sigma_i, pix.shape)
        out.append(ObservationSet.complete(j, pix))
    return out


def _image_observations(geom, intr, poses, layout, size, rng) -> list:
    from .imaging import IdentificationError, detect, render_frame

    out = []
    for j, p in enumerate(poses):
        frame = render_frame(geom, intr, p, size=size, rng=rng)
        try:
            out.append(detect(frame, layout, j))
        except IdentificationError as exc:
            log.debug("frame %d dropped: %s", j, exc)
    return out


# -- one trial ---------------------------------------------------------------------


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))


def _euler_errors(q_true, q_est) -> np.ndarray:
    return np.array([attitude_error_euler(a, b) for a, b in zip(q_true, q_est)])


def run_trial(spec: McSpec, trial: int, nominal: SystemConfig | None = None) -> TrialReport:
    with threadpool_limits(limits=1):
        return _run_trial(spec, trial, nominal or spec.nominal())


def _run_trial(spec: McSpec, trial: int, nominal: SystemConfig) -> TrialReport:
    rng = trial_rng(spec.seed, trial)
    sigma_i = float(rng.uniform(*spec.sigma_i_px))
    sigma_p_mm = float(rng.uniform(*spec.sigma_p_mm))
    rep = TrialReport(trial, sigma_i, sigma_p_mm)
    spec.check_size(nominal.geometry)

    geom_true, intr_true, _ = sample_system(nominal, spec.half_ranges, 1e-3 * sigma_p_mm, rng)
    calib_poses = sample_poses(spec.n_calib, spec.tilt_limit_deg, rng)
    eval_poses = sample_poses(spec.n_eval, spec.tilt_limit_deg, rng)

    if spec.mode == "image":
        from .imaging import MarkerLayout

        layout = MarkerLayout.from_system(nominal.geometry, nominal.intrinsics)
        size = nominal.image_size
        frames = _image_observations(geom_true, intr_true, calib_poses, layout, size, rng)
        evals = _image_observations(geom_true, intr_true, eval_poses, layout, size, rng)
        eval_poses = eval_poses[[o.frame_id for o in evals]]
    else:
        frames = _direct_observations(geom_true, intr_true, calib_poses, sigma_i, rng)
        evals = _direct_observations(geom_true, intr_true, eval_poses, sigma_i, rng)

    try:
        v0 = initialize_guess(frames, nominal.geometry, nominal.intrinsics, spec.coplanar)
        res = calibrate(v0, frames)
    except (SolverError, HomographyError, ValueError) as exc:
        rep.note = f"calibration failed: {exc}"
        return rep
    rep.r2_px2 = res.residual_sq
    rep.sigma2_hat_px2 = res.sigma2_hat
    rep.converged = res.converged
    rep.calib_iterations = res.iterations
    geom_hat, intr_hat = res.params.geometry, res.params.intrinsics
    # the baseline knows the true optics and pattern poses, but like every
    # method it only has the nominal (as-designed) marker coordinates
    geom_base = geom_true.with_markers(nominal.geometry.pattern_coords())

    q_true, q_est, q_base = [], [], []
    for p_true, obs in zip(eval_poses, evals):
        try:
            sol = solve_attitude(geom_hat, intr_hat, obs, cold_start_attitude(geom_hat, intr_hat, obs))
            qb = baseline_attitude(geom_base, intr_true, obs)
        except (SolverError, HomographyError, ValueError) as exc:
            log.debug("trial %d: evaluation frame skipped: %s", trial, exc)
            continue
        q_true.append(params_to_quat(p_true))
        q_est.append(sol.q_nb)
        q_base.append(qb)
    rep.n_eval_solved = len(q_true)
    if rep.n_eval_solved < 2:
        rep.note = "too few evaluation frames solved"
        return rep

    err = _euler_errors(q_true, q_est) * ARCSEC
    err_b = _euler_errors(q_true, q_base) * ARCSEC
    s = err.std(axis=0, ddof=1)
    sb = err_b.std(axis=0, ddof=1)
    rep.sigma_roll_as, rep.sigma_pitch_as, rep.sigma_yaw_as = (float(x) for x in s)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = sb / s
    rep.ratio_roll, rep.ratio_pitch, rep.ratio_yaw = (float(x) for x in ratio)
    ang = np.array([rotation_angle(a, b) for a, b in zip(q_true, q_est)]) * ARCSEC
    rep.mean_error_as = float(ang.mean())
    rep.max_error_as = float(ang.max())
    return rep


# -- campaigns ---------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def trials_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for r in sorted(reports, key=lambda r: r.trial):
        w.writerow([_fmt(getattr(r, c)) for c in TRIAL_COLUMNS])
    return buf.getvalue()


AGG_COLUMNS = [
    "sigma_i_lo_px",
    "sigma_i_hi_px",
    "sigma_p_lo_mm",
    "sigma_p_hi_mm",
    "n_trials",
    "n_converged",
    "mean_r2_px2",
    "mean_sigma_yaw_as",
    "mean_sigma_pitch_as",
    "mean_sigma_roll_as",
    "mean_ratio_yaw",
    "mean_ratio_pitch",
    "mean_ratio_roll",
    "min_ratio",
]


def _edges(rng_pair, n):
    lo, hi = rng_pair
    return np.linspace(lo, hi, n + 1) if hi > lo else np.array([lo, hi])


def aggregate(reports, spec: McSpec) -> list[dict]:
    """Per-bin means over converged trials; bins split the sampled sigma ranges."""
    ei = _edges(spec.sigma_i_px, spec.bins[0])
    ep = _edges(spec.sigma_p_mm, spec.bins[1])
    rows = []
    for a in range(len(ei) - 1):
        for b in range(len(ep) - 1):

            def inside(x, e, k):
                last = k == len(e) - 2
                return (e[k] <= x < e[k + 1]) or (last and x == e[k + 1])

            sel = [r for r in reports if inside(r.sigma_i_px, ei, a) and inside(r.sigma_p_mm, ep, b)]
            ok = [r for r in sel if r.converged and np.isfinite(r.sigma_yaw_as)]

            def mean(attr):
                return float(np.mean([getattr(r, attr) for r in ok])) if ok else float("nan")

            ratios = [min(r.ratio_yaw, r.ratio_pitch, r.ratio_roll) for r in ok]
            rows.append(
                {
                    "sigma_i_lo_px": ei[a],
                    "sigma_i_hi_px": ei[a + 1],
                    "sigma_p_lo_mm": ep[b],
                    "sigma_p_hi_mm": ep[b + 1],
                    "n_trials": len(sel),
                    "n_converged": len(ok),
                    "mean_r2_px2": mean("r2_px2"),
                    "mean_sigma_yaw_as": mean("sigma_yaw_as"),
                    "mean_sigma_pitch_as": mean("sigma_pitch_as"),
                    "mean_sigma_roll_as": mean("sigma_roll_as"),
                    "mean_ratio_yaw": mean("ratio_yaw"),
                    "mean_ratio_pitch": mean("ratio_pitch"),
                    "mean_ratio_roll": mean("ratio_roll"),
                    "min_ratio": float(min(ratios)) if ratios else float("nan"),
                }
            )
    return rows


def aggregate_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in AGG_COLUMNS])
    return buf.getvalue()


def _worker(args):
    spec_dict, trial = args
    spec = McSpec.from_dict(spec_dict)
    return run_trial(spec, trial)


def run_campaign(spec: McSpec, threads: int = 1, trial_ids=None) -> list:
    """Run every trial; results are sorted by trial id and independent of ``threads``."""
    ids = list(range(spec.trials)) if trial_ids is None else list(trial_ids)
    nominal = spec.nominal()
    spec.check_size(nominal.geometry)
    if threads <= 1 or len(ids) <= 1:
        reports = [run_trial(spec, t, nominal) for t in ids]
    else:
        payload = [(spec.to_dict(), t) for t in ids]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            reports = list(ex.map(_worker, payload))
    return sorted(reports, key=lambda r: r.trial)


def write_campaign(reports, spec: McSpec, trials_path, aggregate_path=None):
    from .io import atomic_write_text

    atomic_write_text(trials_path, trials_csv(reports))
    if aggregate_path is not None:
        atomic_write_text(aggregate_path, aggregate_csv(aggregate(reports, spec)))


def summarize(reports) -> dict:
    ok = [r for r in reports if r.converged and np.isfinite(r.sigma_yaw_as)]
    out = {"n_trials": len(reports), "n_converged": len(ok)}
    for k in ("r2_px2", "sigma_yaw_as", "sigma_pitch_as", "sigma_roll_as", "ratio_yaw", "ratio_pitch", "ratio_roll"):
        out["mean_" + k] = float(np.mean([getattr(r, k) for r in ok])) if ok else float("nan")
    return out


def load_spec(path) -> McSpec:
    return McSpec.from_json(Path(path).read_text())
