"""scikit-learn style wrappers around the calibration/estimation pipeline.

``X`` is either a list of :class:`ObservationSet` or a float array of shape
(n_frames, n_markers, 2) holding every marker's pixel position in id order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baseline import baseline_attitude
from .calibration import calibrate, initialize_guess
from .camera import SystemConfig, default_config, load_config
from .estimator import AttitudeSession, ObservationSet
from .imaging import IdentificationError, MarkerLayout, centroids, identify_markers


def _config(config) -> SystemConfig:
    if config is None:
        return default_config()
    if isinstance(config, SystemConfig):
        return config
    return load_config(config)


def check_observations(X, n_markers: int | None = None) -> list:
    """Normalize ``X`` to a list of observation sets and validate it."""
    if isinstance(X, ObservationSet):
        X = [X]
    if isinstance(X, (list, tuple)) and (len(X) == 0 or isinstance(X[0], ObservationSet)):
        out = list(X)
    else:
        arr = np.asarray(X, dtype=float)
        if arr.ndim == 2 and arr.shape[1] == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"expected shape (n_frames, n_markers, 2), got {arr.shape}")
        out = [ObservationSet.complete(j, a) for j, a in enumerate(arr)]
    if not out:
        raise ValueError("no frames given")
    for obs in out:
        if not np.all(np.isfinite(obs.pixels)):
            raise ValueError(f"frame {obs.frame_id} has non-finite pixel coordinates")
        if n_markers is not None and len(obs) and obs.marker_ids.max() > n_markers:
            raise ValueError(f"frame {obs.frame_id} refers to marker ids beyond {n_markers}")
    return out


def check_frames(X) -> list:
    """List of 2-D uint8-compatible images."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    frames = [np.asarray(getattr(f, "data", f)) for f in X]
    for f in frames:
        if f.ndim != 2:
            raise ValueError("each frame must be a 2-D intensity array")
    return frames


class AttitudeEstimator(BaseEstimator):
    """``fit`` calibrates from complete frames, ``predict`` returns q_NB per frame.

    Parameters
    ----------
    config : path, SystemConfig or None
        Nominal rig used as the calibration starting point.
    coplanar : bool
        Hold out-of-plane pattern pose components fixed.
    warm_start : bool
        Seed each predicted frame from the previous solution.
    """

    def __init__(self, config=None, coplanar=True, max_iter=30, warm_start=False):
        self.config = config
        self.coplanar = coplanar
        self.max_iter = max_iter
        self.warm_start = warm_start

    def fit(self, X, y=None):
        cfg = _config(self.config)
        frames = check_observations(X, cfg.geometry.n_markers)
        v0 = initialize_guess(frames, cfg.geometry, cfg.intrinsics, self.coplanar)
        res = calibrate(v0, frames, max_iter=self.max_iter)
        self.calibration_ = res
        self.intrinsics_ = res.params.intrinsics
        self.geometry_ = res.params.geometry
        self.residual_sq_ = res.residual_sq
        self.n_features_in_ = cfg.geometry.n_markers
        return self

    def predict(self, X) -> np.ndarray:
        """(n_frames, 4) scalar-first quaternions."""
        check_is_fitted(self, "calibration_")
        frames = check_observations(X, self.n_features_in_)
        sess = AttitudeSession(self.geometry_, self.intrinsics_, self.warm_start)
        sols = [sess.process(f) for f in frames]
        self.iterations_ = np.array([s.iterations for s in sols])
        return np.array([s.q_nb for s in sols])


class HomographyBaseline(BaseEstimator):
    """Planar homography attitude with a known rig; ``fit`` only stores the rig."""

    def __init__(self, config=None):
        self.config = config

    def fit(self, X=None, y=None):
        cfg = _config(self.config)
        self.intrinsics_ = cfg.intrinsics
        self.geometry_ = cfg.geometry
        self.n_features_in_ = cfg.geometry.n_markers
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "geometry_")
        frames = check_observations(X, self.n_features_in_)
        return np.array([baseline_attitude(self.geometry_, self.intrinsics_, f) for f in frames])


class CentroidExtractor(TransformerMixin, BaseEstimator):
    """Images in, (n_frames, n_markers, 2) marker pixels out (NaN rows for failed frames)."""

    def __init__(self, config=None, threshold=5):
        self.config = config
        self.threshold = threshold

    def fit(self, X=None, y=None):
        cfg = _config(self.config)
        self.layout_ = MarkerLayout.from_system(cfg.geometry, cfg.intrinsics)
        self.n_features_in_ = cfg.geometry.n_markers
        return self

    def transform(self, X) -> np.ndarray:
        from .imaging import Frame

        check_is_fitted(self, "layout_")
        frames = check_frames(X)
        out = np.full((len(frames), self.n_features_in_, 2), np.nan)
        self.failed_ = []
        for j, img in enumerate(frames):
            frame = Frame(img.shape[1], img.shape[0], img)
            try:
                obs = identify_markers(centroids(frame, self.threshold), self.layout_, j)
            except IdentificationError:
                self.failed_.append(j)
                continue
            out[j, obs.marker_ids - 1] = obs.pixels
        return out
