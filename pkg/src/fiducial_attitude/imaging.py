"""Synthetic LED frames and the detection chain: threshold, label, centroid, identify.

Pixel convention: pixel (row r, column c) covers ``[c, c+1) x [r, r+1)`` in
image coordinates, so its centre is ``(c + 0.5, r + 0.5)``.  The renderer and
the centroider both use it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.special import erf

from .camera import Intrinsics, SystemGeometry, project_all
from .estimator import ObservationSet

I_MIN = 5
MIN_BLOB_PIXELS = 2
TIE_FRACTION = 0.1

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class OutOfFrameError(ValueError):
    """A marker projects outside the sensor."""


class IdentificationError(ValueError):
    """Centroids cannot be matched to marker ids (wrong count or ambiguous ordering)."""


@dataclass
class RenderOptions:
    sigma_psf: float = 0.7  # px
    peak: float = 180.0  # counts at the centre pixel of a pixel-centred spot
    sigma_read: float = 0.8  # counts
    background: float = 1.0  # counts
    half_window: int = 6  # px rendered around each spot


@dataclass
class Frame:
    width: int
    height: int
    data: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != (self.height, self.width):
            raise ValueError(f"data shape {self.data.shape} does not match {self.width}x{self.height}")
        if self.data.dtype != np.uint8:
            if self.data.min() < 0 or self.data.max() > 255:
                raise ValueError("frame data outside the 8-bit range")
            self.data = self.data.astype(np.uint8)


@dataclass
class Blob:
    pixels: np.ndarray  # (n, 2) pixel-centre coordinates (x, y)
    intensities: np.ndarray  # (n,)

    @property
    def centroid(self) -> np.ndarray:
        return wcom_centroid(self)

    def __len__(self):
        return len(self.intensities)


def _pixel_mass(edges, mu, sigma):
    """Gaussian mass of each unit interval starting at ``edges``."""
    s = sigma * np.sqrt(2.0)
    return 0.5 * (erf((edges + 1.0 - mu) / s) - erf((edges - mu) / s))


def render_points(points, width: int, height: int, opts: RenderOptions | None = None, rng=None) -> Frame:
    """Render spots at pixel positions ``points`` (n, 2).

    Without ``rng`` the read noise is skipped and only quantization remains.
    """
    opts = opts or RenderOptions()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    bad = (pts[:, 0] < 0) | (pts[:, 0] >= width) | (pts[:, 1] < 0) | (pts[:, 1] >= height)
    if np.any(bad):
        raise OutOfFrameError(f"marker(s) {np.flatnonzero(bad).tolist()} fall outside the {width}x{height} frame")
    img = np.full((height, width), float(opts.background))
    if opts.peak > 0:
        centre = _pixel_mass(np.array(-0.5), 0.0, opts.sigma_psf)
        amp = opts.peak / centre**2
        hw = opts.half_window
        for x, y in pts:
            c0, r0 = int(np.floor(x)) - hw, int(np.floor(y)) - hw
            cols = np.arange(max(c0, 0), min(c0 + 2 * hw + 1, width))
            rows = np.arange(max(r0, 0), min(r0 + 2 * hw + 1, height))
            gx = _pixel_mass(cols.astype(float), x, opts.sigma_psf)
            gy = _pixel_mass(rows.astype(float), y, opts.sigma_psf)
            img[np.ix_(rows, cols)] += amp * np.outer(gy, gx)
    if rng is not None and opts.sigma_read > 0:
        img += rng.normal(0.0, opts.sigma_read, img.shape)
    return Frame(width, height, np.clip(np.rint(img), 0, 255).astype(np.uint8))


def render_frame(geom: SystemGeometry, intr: Intrinsics, p_nb, size=(2048, 1536), opts=None, rng=None) -> Frame:
    """Render every marker of ``geom`` at attitude ``p_nb``; ``size`` is (width, height)."""
    return render_points(project_all(geom, intr, p_nb), size[0], size[1], opts, rng)


def extract_blobs(frame: Frame, i_min: int = I_MIN, min_pixels: int = MIN_BLOB_PIXELS) -> list:
    """4-connected components of pixels brighter than ``i_min``; tiny ones are dropped."""
    data = np.asarray(frame.data)
    labels, n = ndimage.label(data > i_min, structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    objs = ndimage.find_objects(labels)
    blobs = []
    for k, sl in enumerate(objs, start=1):
        rr, cc = np.nonzero(labels[sl] == k)
        if len(rr) < min_pixels:
            continue
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        xy = np.column_stack([cc + 0.5, rr + 0.5])
        blobs.append(Blob(xy, data[rr, cc].astype(float)))
    return blobs


def wcom_centroid(blob: Blob) -> np.ndarray:
    """Weighted centre of mass with weight equal to intensity (so I^2 overall)."""
    w = np.asarray(blob.intensities, dtype=float) ** 2
    if w.size == 0:
        raise ValueError("empty blob")
    s = w.sum()
    if s <= 0:
        return np.asarray(blob.pixels, dtype=float).mean(axis=0)
    return w @ np.asarray(blob.pixels, dtype=float) / s


def centroids(frame: Frame, i_min: int = I_MIN) -> np.ndarray:
    blobs = extract_blobs(frame, i_min)
    if not blobs:
        return np.empty((0, 2))
    return np.array([wcom_centroid(b) for b in blobs])


# -- identification ------------------------------------------------------------------


def _unique_extreme(values, pick_max: bool, tol: float, what: str) -> int:
    order = np.argsort(values)
    if pick_max:
        order = order[::-1]
    if len(values) > 1 and abs(values[order[0]] - values[order[1]]) < tol:
        raise IdentificationError(f"ambiguous {what}: two candidates within the tie tolerance")
    return int(order[0])


def canonical_order(points) -> np.ndarray:
    """Indices of ``points`` in the geometric reading order.

    Reference first (farthest from the mean), then LED 1 (nearest to the
    reference), then the rest sorted by projection on LED1 -> LED N, ties
    broken by bearing about LED 1, with LED N last.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 3:
        raise IdentificationError("need at least three centroids")
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    dmin = d[~np.eye(n, dtype=bool)].min()
    if dmin <= 0:
        raise IdentificationError("coincident centroids")
    tol = TIE_FRACTION * dmin

    ref = _unique_extreme(np.linalg.norm(pts - pts.mean(axis=0), axis=1), True, tol, "reference marker")
    dr = d[ref].copy()
    dr[ref] = np.inf
    first = _unique_extreme(dr, False, tol, "first marker")
    dr[ref] = -np.inf
    last = _unique_extreme(dr, True, tol, "last marker")

    rest = [i for i in range(n) if i not in (ref, first, last)]
    axis = pts[last] - pts[first]
    axis /= np.linalg.norm(axis)
    normal = np.array([-axis[1], axis[0]])
    rel = pts[rest] - pts[first]
    proj = rel @ axis
    bearing = np.arctan2(rel @ normal, proj)

    # group by projection: consecutive values closer than tol share a bin
    by_proj = np.argsort(proj, kind="stable")
    bins = np.zeros(len(rest), dtype=int)
    for a, b in zip(by_proj[:-1], by_proj[1:]):
        bins[b] = bins[a] + (proj[b] - proj[a] >= tol)
    for k in np.unique(bins):
        members = np.flatnonzero(bins == k)
        if len(members) > 1:
            br = np.sort(bearing[members])
            # chord between two bearings at the bin's distance from LED 1
            radius = np.linalg.norm(rel[members], axis=1).min()
            if np.any(np.diff(br) * radius < tol):
                raise IdentificationError("ambiguous ordering: two markers share projection and bearing")
    order = np.lexsort((bearing, bins))
    return np.array([ref, first] + [rest[i] for i in order] + [last])


@dataclass
class MarkerLayout:
    """Marker ids listed in canonical image order, used to label detections."""

    canonical_ids: np.ndarray

    def __post_init__(self):
        self.canonical_ids = np.asarray(self.canonical_ids, dtype=int).reshape(-1)
        if len(np.unique(self.canonical_ids)) != len(self.canonical_ids):
            raise ValueError("layout ids must be unique")

    @property
    def n_markers(self) -> int:
        return len(self.canonical_ids)

    @classmethod
    def from_system(cls, geom: SystemGeometry, intr: Intrinsics, p_nb=(1.0, 0.0, 0.0)) -> "MarkerLayout":
        """Order of the nominal markers as seen at a reference attitude."""
        pts = project_all(geom, intr, p_nb)
        return cls(geom.marker_ids[canonical_order(pts)])

    def to_json(self) -> str:
        return json.dumps({"canonical_ids": self.canonical_ids.tolist()}) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MarkerLayout":
        d = json.loads(text)
        if "canonical_ids" not in d:
            raise KeyError("layout file lacks 'canonical_ids'")
        return cls(d["canonical_ids"])


def identify_markers(points, layout: MarkerLayout, frame_id: int = 0) -> ObservationSet:
    """Tag centroids with marker ids; observations come back sorted by id."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) != layout.n_markers:
        raise IdentificationError(f"expected {layout.n_markers} centroids, found {len(pts)}")
    order = canonical_order(pts)
    ids = np.empty(len(pts), dtype=int)
    ids[order] = layout.canonical_ids
    srt = np.argsort(ids)
    return ObservationSet(frame_id, ids[srt], pts[srt])


def detect(frame: Frame, layout: MarkerLayout, frame_id: int = 0, i_min: int = I_MIN) -> ObservationSet:
    return identify_markers(centroids(frame, i_min), layout, frame_id)


# -- PGM ---------------------------------------------------------------------------


def write_pgm(path, frame: Frame):
    Image.fromarray(np.asarray(frame.data, dtype=np.uint8), mode="L").save(Path(path), format="PPM")


def read_pgm(path) -> Frame:
    with Image.open(Path(path)) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected an 8-bit grayscale PGM, got mode {im.mode}")
        data = np.array(im, dtype=np.uint8)
    return Frame(data.shape[1], data.shape[0], data)
