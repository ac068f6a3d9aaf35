"""Pinhole camera with polynomial radial distortion and the platform geometry.

Frames: N is inertial (origin at the centre of rotation), B is the body frame
(defined by pattern 0), S_k is the frame of additional pattern k and C is the
camera frame.  All lengths are metres; pixel coordinates follow the
convention that pixel (0, 0) spans [0, 1) x [0, 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rotation import params_to_matrix

CN = np.diag([1.0, -1.0, -1.0])
BEHIND_CAMERA_TOL = 1e-9
IDENTITY_PARAMS = (1.0, 0.0, 0.0)

_UNIT_SCALE = {"m": 1.0, "cm": 1e-2, "mm": 1e-3}


class ProjectionError(ValueError):
    """A point is behind (or on) the camera plane."""


class ConfigError(ValueError):
    """Malformed system configuration."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    w: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if len(self.w) != 3:
            raise ValueError("expected three radial distortion coefficients")

    @property
    def K(self) -> np.ndarray:
        # axial skew is always zero
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def f(self) -> np.ndarray:
        return np.array([self.fx, self.fy])

    @property
    def c(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, *self.w])

    @classmethod
    def from_array(cls, a) -> "Intrinsics":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), tuple(a[4:7]))


@dataclass(frozen=True)
class Pattern:
    r_skb: np.ndarray
    p_bsk: np.ndarray
    markers: np.ndarray  # (n, 3) in the pattern frame

    def __post_init__(self):
        object.__setattr__(self, "r_skb", np.asarray(self.r_skb, dtype=float).reshape(3))
        object.__setattr__(self, "p_bsk", np.asarray(self.p_bsk, dtype=float).reshape(3))
        object.__setattr__(self, "markers", np.asarray(self.markers, dtype=float).reshape(-1, 3))

    @property
    def bs(self) -> np.ndarray:
        return params_to_matrix(self.p_bsk)


@dataclass(frozen=True)
class SystemGeometry:
    """Fixed 3-D quantities of the rig.

    Marker ids run 1..N_m in pattern order, then in-pattern order.
    """

    r_bn: np.ndarray
    r_nc: np.ndarray
    patterns: tuple
    cn: np.ndarray = field(default_factory=lambda: CN.copy())

    def __post_init__(self):
        object.__setattr__(self, "r_bn", np.asarray(self.r_bn, dtype=float).reshape(3))
        object.__setattr__(self, "r_nc", np.asarray(self.r_nc, dtype=float).reshape(3))
        object.__setattr__(self, "patterns", tuple(self.patterns))
        if not np.array_equal(self.cn, CN):
            raise ConfigError("[CN] is fixed to diag(1, -1, -1)")
        if not self.patterns:
            raise ConfigError("at least one pattern is required")
        p0 = self.patterns[0]
        if np.any(p0.r_skb != 0.0) or not np.array_equal(p0.p_bsk, np.array(IDENTITY_PARAMS)):
            raise ConfigError("pattern 0 defines the body frame: zero offset and identity rotation required")

    @property
    def n_markers(self) -> int:
        return sum(len(p.markers) for p in self.patterns)

    @property
    def n_extra_patterns(self) -> int:
        return len(self.patterns) - 1

    @property
    def marker_ids(self) -> np.ndarray:
        return np.arange(1, self.n_markers + 1)

    @property
    def marker_pattern(self) -> np.ndarray:
        """Pattern index of each marker, in id order."""
        return np.concatenate([np.full(len(p.markers), k) for k, p in enumerate(self.patterns)])

    def locate(self, marker_id: int) -> tuple[int, int]:
        """(pattern index, index within pattern) for a marker id."""
        idx = int(marker_id) - 1
        if idx < 0:
            raise KeyError(f"unknown marker id {marker_id}")
        for k, p in enumerate(self.patterns):
            if idx < len(p.markers):
                return k, idx
            idx -= len(p.markers)
        raise KeyError(f"unknown marker id {marker_id}")

    def pattern_coords(self) -> np.ndarray:
        """Every marker in its own pattern frame, (N_m, 3) in id order."""
        return np.vstack([p.markers for p in self.patterns])

    def body_points(self) -> np.ndarray:
        """Every marker in the body frame, (N_m, 3) in id order."""
        return np.vstack([p.r_skb + p.markers @ p.bs.T for p in self.patterns])

    def with_markers(self, pattern_coords) -> "SystemGeometry":
        pattern_coords = np.asarray(pattern_coords, dtype=float)
        pats, i = [], 0
        for p in self.patterns:
            n = len(p.markers)
            pats.append(replace(p, markers=pattern_coords[i : i + n]))
            i += n
        return replace(self, patterns=tuple(pats))


def marker_body_coords(geom: SystemGeometry, k: int, i: int) -> np.ndarray:
    try:
        pat = geom.patterns[k]
        r_isk = pat.markers[i]
    except IndexError:
        raise KeyError(f"no marker {i} in pattern {k}") from None
    return pat.r_skb + pat.bs @ r_isk


def body_to_inertial(r_ib, r_bn, nb) -> np.ndarray:
    """Translation to the centre of rotation first, then the attitude."""
    return (np.asarray(r_ib) + np.asarray(r_bn)) @ np.asarray(nb).T


def inertial_to_camera(r_in, geom: SystemGeometry) -> np.ndarray:
    return geom.r_nc + np.asarray(r_in) @ CN.T


def camera_to_inertial(r_ic, geom: SystemGeometry) -> np.ndarray:
    return (np.asarray(r_ic) - geom.r_nc) @ CN


def normalize_pixels(R, intr: Intrinsics) -> np.ndarray:
    """Pixel -> normalized image coordinates (works for distorted or undistorted points)."""
    return (np.asarray(R, dtype=float) - intr.c) / intr.f


def denormalize(Rn, intr: Intrinsics) -> np.ndarray:
    return np.asarray(Rn, dtype=float) * intr.f + intr.c


def distortion_factor(rho2, w) -> np.ndarray:
    return 1.0 + w[0] * rho2 + w[1] * rho2**2 + w[2] * rho2**3


@dataclass
class ProjectionTrace:
    """Intermediate quantities of the projection of a batch of points."""

    r_ic: np.ndarray  # (n, 3)
    Rh: np.ndarray  # (n, 3) homogeneous undistorted pixel
    Ru: np.ndarray  # (n, 2) undistorted pixel
    Rnu: np.ndarray  # (n, 2) undistorted normalized
    rho2: np.ndarray  # (n,)
    Rn: np.ndarray  # (n, 2) distorted normalized
    R: np.ndarray  # (n, 2) distorted pixel


def project_trace(r_ic, intr: Intrinsics) -> ProjectionTrace:
    r_ic = np.atleast_2d(np.asarray(r_ic, dtype=float))
    if np.any(r_ic[:, 2] <= BEHIND_CAMERA_TOL):
        raise ProjectionError("point behind the camera")
    Rh = r_ic @ intr.K.T
    Ru = Rh[:, :2] / Rh[:, 2:3]
    Rnu = normalize_pixels(Ru, intr)
    rho2 = np.einsum("ij,ij->i", Rnu, Rnu)
    Rn = Rnu * distortion_factor(rho2, intr.w)[:, None]
    R = denormalize(Rn, intr)
    return ProjectionTrace(r_ic, Rh, Ru, Rnu, rho2, Rn, R)


def project(r_ic, intr: Intrinsics) -> np.ndarray:
    """Distorted pixel coordinates of camera-frame point(s).

    A single 3-vector gives a 2-vector; an (n, 3) array gives (n, 2).
    """
    r_ic = np.asarray(r_ic, dtype=float)
    R = project_trace(r_ic, intr).R
    return R[0] if r_ic.ndim == 1 else R


def camera_points(geom: SystemGeometry, p_nb, body_points=None) -> np.ndarray:
    """Camera-frame coordinates of all markers (or of ``body_points``)."""
    if body_points is None:
        body_points = geom.body_points()
    r_in = body_to_inertial(body_points, geom.r_bn, params_to_matrix(p_nb))
    return inertial_to_camera(r_in, geom)


def project_all(geom: SystemGeometry, intr: Intrinsics, p_nb) -> np.ndarray:
    """Pixel coordinates of every marker, (N_m, 2) in id order."""
    return project(camera_points(geom, p_nb), intr).reshape(-1, 2)


def project_marker(geom: SystemGeometry, intr: Intrinsics, p_nb, k: int, i: int) -> np.ndarray:
    r_ib = marker_body_coords(geom, k, i)
    r_in = body_to_inertial(r_ib, geom.r_bn, params_to_matrix(p_nb))
    return project(inertial_to_camera(r_in, geom), intr)


# -- derivatives -----------------------------------------------------------


def d_pixel_d_camera(tr: ProjectionTrace, intr: Intrinsics) -> np.ndarray:
    """(n, 2, 3) derivative of distorted pixels w.r.t. camera-frame points."""
    D = distortion_jacobian(tr, intr)
    # d Ru / d Rh = 1/z [[1, 0, -Ru_x], [0, 1, -Ru_y]]
    iz = 1.0 / tr.Rh[:, 2]
    n = len(iz)
    dRu_dRh = np.zeros((n, 2, 3))
    dRu_dRh[:, 0, 0] = iz
    dRu_dRh[:, 1, 1] = iz
    dRu_dRh[:, :, 2] = -tr.Ru * iz[:, None]
    # F D F^-1 (d Ru / d Rh) K
    A = intr.f[None, :, None] * D / intr.f[None, None, :]
    return A @ dRu_dRh @ intr.K


def distortion_jacobian(tr: ProjectionTrace, intr: Intrinsics) -> np.ndarray:
    """(n, 2, 2) derivative of distorted w.r.t. undistorted normalized coordinates."""
    w = intr.w
    rho2 = tr.rho2
    a = distortion_factor(rho2, w)
    b = 2 * w[0] + 4 * w[1] * rho2 + 6 * w[2] * rho2**2
    D = b[:, None, None] * tr.Rnu[:, :, None] * tr.Rnu[:, None, :]
    D[:, 0, 0] += a
    D[:, 1, 1] += a
    return D


def d_pixel_d_intrinsics(tr: ProjectionTrace, intr: Intrinsics) -> np.ndarray:
    """(n, 2, 7) derivative of distorted pixels w.r.t. (fx, fy, cx, cy, w1, w2, w3)."""
    n = len(tr.rho2)
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy
    D = distortion_jacobian(tr, intr)
    F = np.diag(intr.f)
    out = np.zeros((n, 2, 7))
    # direct dependence through the final denormalization
    out[:, 0, 0] = tr.Rn[:, 0]
    out[:, 1, 1] = tr.Rn[:, 1]
    out[:, 0, 2] = 1.0
    out[:, 1, 3] = 1.0
    # through the normalization of the undistorted pixel
    dRnu_dk = np.zeros((n, 2, 4))
    dRnu_dk[:, 0, 0] = -(tr.Ru[:, 0] - cx) / fx**2
    dRnu_dk[:, 1, 1] = -(tr.Ru[:, 1] - cy) / fy**2
    dRnu_dk[:, 0, 2] = -1.0 / fx
    dRnu_dk[:, 1, 3] = -1.0 / fy
    # through K in the homogeneous projection
    r = tr.r_ic
    dRh_dk = np.zeros((n, 3, 4))
    dRh_dk[:, 0, 0] = r[:, 0]
    dRh_dk[:, 1, 1] = r[:, 1]
    dRh_dk[:, 0, 2] = r[:, 2]
    dRh_dk[:, 1, 3] = r[:, 2]
    iz = 1.0 / tr.Rh[:, 2]
    dRu_dRh = np.zeros((n, 2, 3))
    dRu_dRh[:, 0, 0] = iz
    dRu_dRh[:, 1, 1] = iz
    dRu_dRh[:, :, 2] = -tr.Ru * iz[:, None]
    inner = dRnu_dk + (dRu_dRh @ dRh_dk) / intr.f[None, :, None]
    out[:, :, :4] += F @ D @ inner
    # distortion coefficients
    powers = np.stack([tr.rho2, tr.rho2**2, tr.rho2**3], axis=1)
    out[:, :, 4:] = intr.f[None, :, None] * tr.Rnu[:, :, None] * powers[:, None, :]
    return out


# -- undistortion ------------------------------------------------------------


class UndistortError(RuntimeError):
    pass


def undistort(pt, intr: Intrinsics, max_iter: int = 50, tol: float = 1e-14) -> np.ndarray:
    """Invert the radial distortion by fixed-point iteration in normalized coordinates.

    Accepts a single point (2,) or an array (n, 2).
    """
    pt = np.asarray(pt, dtype=float)
    Rn = np.atleast_2d(normalize_pixels(pt, intr))
    x = Rn.copy()
    for _ in range(max_iter):
        rho2 = np.einsum("ij,ij->i", x, x)
        x_new = Rn / distortion_factor(rho2, intr.w)[:, None]
        if np.max(np.abs(x_new - x), initial=0.0) < tol:
            x = x_new
            break
        x = x_new
    else:
        raise UndistortError("undistortion did not converge in %d iterations" % max_iter)
    out = denormalize(x, intr)
    return out[0] if pt.ndim == 1 else out


# -- configuration file ------------------------------------------------------


def _vec(d: dict, key: str, scale: float, n: int = 3, where: str = "") -> np.ndarray:
    if key not in d:
        raise ConfigError(f"missing key '{where}{key}'")
    v = np.asarray(d[key], dtype=float) * scale
    if v.shape != (n,):
        raise ConfigError(f"key '{where}{key}' must have {n} entries")
    return v


def _length_scale(d: dict, where: str) -> tuple[str, float]:
    """Return (suffix, scale) given a dict using one of the *_m/_cm/_mm suffixes."""
    for unit, s in _UNIT_SCALE.items():
        if any(k.endswith("_" + unit) for k in d):
            return unit, s
    raise ConfigError(f"no length key with unit suffix found in '{where}'")


def geometry_from_dict(g: dict) -> SystemGeometry:
    try:
        unit, s = _length_scale(g, "geometry")
        r_bn = _vec(g, f"r_bn_{unit}", s, where="geometry.")
        r_nc = _vec(g, f"r_nc_{unit}", s, where="geometry.")
        if "patterns" not in g or not g["patterns"]:
            raise ConfigError("missing key 'geometry.patterns'")
        pats = []
        for k, pd in enumerate(g["patterns"]):
            where = f"geometry.patterns[{k}]."
            punit, ps = _length_scale(pd, where)
            r_skb = _vec(pd, f"r_skb_{punit}", ps, where=where)
            p_bsk = _vec(pd, "p_bsk", 1.0, where=where)
            if f"markers_{punit}" not in pd:
                raise ConfigError(f"missing key '{where}markers_{punit}'")
            markers = np.asarray(pd[f"markers_{punit}"], dtype=float) * ps
            if markers.ndim != 2 or markers.shape[1] != 3:
                raise ConfigError(f"key '{where}markers_{punit}' must be a list of 3-vectors")
            pats.append(Pattern(r_skb, p_bsk, markers))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return SystemGeometry(r_bn, r_nc, tuple(pats))


def intrinsics_from_dict(d: dict) -> Intrinsics:
    for key in ("fx", "fy", "cx", "cy", "w"):
        if key not in d:
            raise ConfigError(f"missing key 'intrinsics.{key}'")
    try:
        return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), tuple(d["w"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'intrinsics': {exc}") from exc


def geometry_to_dict(geom: SystemGeometry) -> dict:
    return {
        "r_bn_m": geom.r_bn.tolist(),
        "r_nc_m": geom.r_nc.tolist(),
        "patterns": [
            {"r_skb_m": p.r_skb.tolist(), "p_bsk": p.p_bsk.tolist(), "markers_m": p.markers.tolist()}
            for p in geom.patterns
        ],
    }


def intrinsics_to_dict(intr: Intrinsics) -> dict:
    return {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "w": list(intr.w)}


@dataclass(frozen=True)
class SystemConfig:
    intrinsics: Intrinsics
    geometry: SystemGeometry
    image_size: tuple = (2048, 1536)  # (width, height)

    def to_dict(self) -> dict:
        return {
            "intrinsics": intrinsics_to_dict(self.intrinsics),
            "geometry": geometry_to_dict(self.geometry),
            "image_size": list(self.image_size),
        }


def config_from_dict(d: dict) -> SystemConfig:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    for key in ("intrinsics", "geometry"):
        if key not in d:
            raise ConfigError(f"missing key '{key}'")
    size = tuple(int(x) for x in d.get("image_size", (2048, 1536)))
    return SystemConfig(intrinsics_from_dict(d["intrinsics"]), geometry_from_dict(d["geometry"]), size)


def load_config(path) -> SystemConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(d)


DEFAULT_CONFIG_PATH = Path(__file__).parent / "data" / "default_system.json"


def default_config() -> SystemConfig:
    """The representative 4-pattern, 20-LED rig shipped with the package."""
    return load_config(DEFAULT_CONFIG_PATH)
