"""File formats: observation and attitude CSVs, atomic writes, run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimator import AttitudeSolution, ObservationSet

OBS_COLUMNS = ["frame_id", "marker_id", "u_px", "v_px"]
ATT_COLUMNS = ["frame_id", "p1", "p2", "p3", "qw", "qx", "qy", "qz", "residual_sq_px2", "iterations", "converged"]


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def atomic_write_bytes(path, data: bytes):
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _num(x: float) -> str:
    # repr round-trips exactly and is stable across runs
    return repr(float(x))


def observations_to_csv(obs_list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBS_COLUMNS)
    for obs in obs_list:
        for mid, (u, v) in zip(obs.marker_ids, obs.pixels):
            w.writerow([int(obs.frame_id), int(mid), _num(u), _num(v)])
    return buf.getvalue()


def write_observations(path, obs_list):
    atomic_write_text(path, observations_to_csv(obs_list))


def parse_observations(text: str, source: str = "<string>") -> list:
    """Observation sets grouped by frame id, in first-appearance order."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    if [c.strip() for c in rows[0]] != OBS_COLUMNS:
        raise FormatError(f"{source}: header must be {','.join(OBS_COLUMNS)}")
    frames: dict[int, list] = {}
    for n, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise FormatError(f"{source}:{n}: expected 4 fields, got {len(row)}")
        try:
            fid, mid, u, v = int(row[0]), int(row[1]), float(row[2]), float(row[3])
        except ValueError as exc:
            raise FormatError(f"{source}:{n}: {exc}") from exc
        frames.setdefault(fid, []).append((mid, u, v))
    out = []
    for fid, entries in frames.items():
        arr = np.array(entries, dtype=float)
        try:
            out.append(ObservationSet(fid, arr[:, 0].astype(int), arr[:, 1:]))
        except ValueError as exc:
            raise FormatError(f"{source}: frame {fid}: {exc}") from exc
    return out


def read_observations(path) -> list:
    return parse_observations(Path(path).read_text(), str(path))


def attitudes_to_csv(rows) -> str:
    """``rows`` is a sequence of (frame_id, AttitudeSolution)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATT_COLUMNS)
    for fid, sol in rows:
        w.writerow(
            [int(fid)]
            + [_num(x) for x in sol.p_nb]
            + [_num(x) for x in sol.q_nb]
            + [_num(sol.residual_sq), int(sol.iterations), int(bool(sol.converged))]
        )
    return buf.getvalue()


def write_attitudes(path, rows):
    atomic_write_text(path, attitudes_to_csv(rows))


def read_attitudes(path) -> list:
    """(frame_id, AttitudeSolution) pairs."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or rows[0] != ATT_COLUMNS:
        raise FormatError(f"{path}: header must be {','.join(ATT_COLUMNS)}")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        p = np.array(row[1:4], dtype=float)
        q = np.array(row[4:8], dtype=float)
        out.append((int(row[0]), AttitudeSolution(p, q, float(row[8]), int(row[9]), row[10] == "1")))
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    command: str
    inputs: dict = field(default_factory=dict)  # role -> path
    outputs: dict = field(default_factory=dict)
    seed: int | None = None
    spec_hash: str | None = None
    version: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path):
        atomic_write_text(path, self.to_json())


def manifest_path(output) -> Path:
    output = Path(output)
    if output.is_dir():
        return output / "manifest.json"
    return output.with_name(output.name + ".manifest.json")
