"""Command-line entry point.

Exit codes: 0 success, 2 bad input or arguments, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DegenerateCalibrationError,
    IncompleteFrameError,
    UnderdeterminedError,
    calibrate,
    initialize_guess,
)
from .camera import ConfigError, ProjectionError, UndistortError, config_from_dict, default_config, load_config
from .estimator import AttitudeSession, SolverError
from .io import (
    FormatError,
    RunManifest,
    atomic_write_text,
    manifest_path,
    read_observations,
    sha256_file,
    sha256_text,
    write_attitudes,
    write_observations,
)

log = logging.getLogger("fiducial_attitude")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

POSE_COLUMNS = ["frame_id", "p1", "p2", "p3"]


class InputError(ValueError):
    """Bad command-line input (maps to exit code 2)."""


def _load_system(path):
    return default_config() if path is None else load_config(path)


def _config_hash(path) -> str:
    return sha256_file(path) if path is not None else "default"


def read_poses(path) -> list:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows:
        return []
    if [c.strip() for c in rows[0]] != POSE_COLUMNS:
        raise FormatError(f"{path}: header must be {','.join(POSE_COLUMNS)}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out.append((int(row[0]), np.array([float(x) for x in row[1:4]])))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{n}: {exc}") from exc
    return out


# -- commands ---------------------------------------------------------------------


def cmd_render(args) -> int:
    from .imaging import RenderOptions, render_frame, write_pgm

    cfg = _load_system(args.config)
    poses = read_poses(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = RenderOptions(sigma_psf=args.sigma_psf, peak=args.peak, sigma_read=args.sigma_read, background=args.background)
    written = []
    for fid, p in poses:
        rng = None if args.no_noise else np.random.default_rng(np.random.SeedSequence([args.seed, fid]))
        frame = render_frame(cfg.geometry, cfg.intrinsics, p, size=cfg.image_size, opts=opts, rng=rng)
        path = out / f"frame_{fid:06d}.pgm"
        tmp = path.with_name("." + path.name + ".tmp")
        write_pgm(tmp, frame)
        tmp.replace(path)
        written.append(path.name)
    RunManifest(
        "render",
        {"config": str(args.config or "default"), "poses": str(args.poses)},
        {"frames": written},
        args.seed,
        _config_hash(args.config),
        __version__,
    ).write(out / "manifest.json")
    log.info("rendered %d frame(s) into %s", len(written), out)
    return EXIT_OK


_FRAME_RE = re.compile(r"(\d+)")


def cmd_centroid(args) -> int:
    from .imaging import IdentificationError, MarkerLayout, detect, read_pgm

    if args.layout is not None:
        layout = MarkerLayout.from_json(Path(args.layout).read_text())
    else:
        cfg = _load_system(args.config)
        layout = MarkerLayout.from_system(cfg.geometry, cfg.intrinsics)
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory {frames_dir} does not exist")
    files = sorted(frames_dir.glob("*.pgm"))
    obs, failed = [], 0
    for k, f in enumerate(files):
        m = _FRAME_RE.findall(f.stem)
        fid = int(m[-1]) if m else k
        try:
            obs.append(detect(read_pgm(f), layout, fid, args.threshold))
        except IdentificationError as exc:
            failed += 1
            print(f"{f.name}: frame {fid} skipped: {exc}", file=sys.stderr)
    write_observations(args.out, obs)
    RunManifest(
        "centroid",
        {"frames": str(frames_dir), "layout": str(args.layout or args.config or "default")},
        {"observations": str(args.out)},
        None,
        sha256_text(layout.to_json()),
        __version__,
    ).write(manifest_path(args.out))
    log.info("%d frame(s) identified, %d skipped", len(obs), failed)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_system(args.config)
    frames = read_observations(args.observations)
    n_m = cfg.geometry.n_markers
    complete = []
    for fr in frames:
        if len(fr) == n_m and set(fr.marker_ids.tolist()) == set(range(1, n_m + 1)):
            complete.append(fr)
        else:
            print(f"frame {fr.frame_id} skipped: calibration needs all {n_m} markers", file=sys.stderr)
    if not complete:
        raise InputError("no complete frames to calibrate from")
    v0 = initialize_guess(complete, cfg.geometry, cfg.intrinsics, coplanar=not args.full)
    m = 2 * len(complete) * n_m
    if m < v0.size:
        raise UnderdeterminedError(f"{m} measurements for {v0.size} unknowns; add frames")
    res = calibrate(v0, complete, max_iter=args.max_iter)
    doc = res.to_dict()
    doc["frame_ids"] = [int(fr.frame_id) for fr in complete]
    doc["image_size"] = list(cfg.image_size)
    atomic_write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    RunManifest(
        "calibrate",
        {"config": str(args.config or "default"), "observations": str(args.observations)},
        {"calibration": str(args.out)},
        None,
        _config_hash(args.config),
        __version__,
    ).write(manifest_path(args.out))
    print(f"r2 = {res.residual_sq:.6g} px^2 over m = {res.m}, p = {res.p}; {res.iterations} iterations", file=sys.stderr)
    if not res.converged:
        print("calibration did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def load_calibration(path):
    """(intrinsics, geometry) stored in a calibration result file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(doc)
    return cfg.intrinsics, cfg.geometry


def cmd_estimate(args) -> int:
    intr, geom = load_calibration(args.calibration)
    frames = read_observations(args.observations)
    session = AttitudeSession(geom, intr, warm_start=args.warm_start)
    rows = []
    for fr in frames:
        bad = fr.marker_ids[(fr.marker_ids < 1) | (fr.marker_ids > geom.n_markers)]
        if bad.size:
            print(f"frame {fr.frame_id} skipped: unknown marker id(s) {bad.tolist()}", file=sys.stderr)
            continue
        try:
            sol = session.process(fr)
        except (SolverError, ValueError) as exc:
            print(f"frame {fr.frame_id} skipped: {exc}", file=sys.stderr)
            continue
        rows.append((fr.frame_id, sol))
    write_attitudes(args.out, rows)
    RunManifest(
        "estimate",
        {"calibration": str(args.calibration), "observations": str(args.observations)},
        {"attitudes": str(args.out)},
        None,
        sha256_file(args.calibration),
        __version__,
    ).write(manifest_path(args.out))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulation import McSpec, run_campaign, summarize, write_campaign

    d = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.trials is not None:
        d["trials"] = args.trials
    if args.seed is not None:
        d["seed"] = args.seed
    spec = McSpec.from_dict(d)
    reports = run_campaign(spec, threads=args.threads)
    write_campaign(reports, spec, args.out, args.aggregate)
    RunManifest(
        "simulate",
        {"spec": str(args.spec or "default")},
        {"trials": str(args.out), "aggregate": str(args.aggregate) if args.aggregate else None},
        spec.seed,
        sha256_text(spec.to_json()),
        __version__,
    ).write(manifest_path(args.out))
    s = summarize(reports)
    print(json.dumps(s, sort_keys=True), file=sys.stderr)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fiducial-attitude",
        description="Platform attitude from a monocular camera and LED markers: render, centroid, calibrate, estimate, simulate.",
    )
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render synthetic PGM frames from a poses CSV (frame_id,p1,p2,p3)")
    p.add_argument("--config", help="system config JSON (default: packaged representative rig)")
    p.add_argument("--poses", required=True, help="CSV with header frame_id,p1,p2,p3")
    p.add_argument("--out", required=True, help="output directory for frame_NNNNNN.pgm")
    p.add_argument("--seed", type=int, default=0, help="seed for read noise")
    p.add_argument("--no-noise", action="store_true", help="skip read noise")
    p.add_argument("--sigma-psf", type=float, default=0.7, help="spot standard deviation (px)")
    p.add_argument("--peak", type=float, default=180.0, help="spot peak (counts)")
    p.add_argument("--sigma-read", type=float, default=0.8, help="read noise (counts)")
    p.add_argument("--background", type=float, default=1.0, help="background level (counts)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("centroid", help="detect, centroid and identify markers in PGM frames")
    p.add_argument("--frames", required=True, help="directory of .pgm frames")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--layout", help="layout JSON with canonical_ids")
    g.add_argument("--config", help="system config JSON to derive the layout from")
    p.add_argument("--threshold", type=int, default=5, help="intensity threshold I_min")
    p.add_argument("--out", required=True, help="observations CSV")
    p.set_defaults(func=cmd_centroid)

    p = sub.add_parser("calibrate", help="batch calibration from complete observation frames")
    p.add_argument("--config", help="system config JSON used as the initial guess")
    p.add_argument("--observations", required=True, help="observations CSV")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--coplanar", dest="full", action="store_false", help="patterns share the body plane (default)")
    mode.add_argument("--full", dest="full", action="store_true", help="estimate full 6-DoF pattern poses")
    p.add_argument("--max-iter", type=int, default=30)
    p.add_argument("--out", required=True, help="calibration result JSON")
    p.set_defaults(func=cmd_calibrate, full=False)

    p = sub.add_parser("estimate", help="per-frame attitude from a calibration")
    p.add_argument("--calibration", required=True, help="calibration result JSON")
    p.add_argument("--observations", required=True, help="observations CSV")
    p.add_argument("--warm-start", action="store_true", help="seed each frame with the previous solution")
    p.add_argument("--out", required=True, help="attitudes CSV")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo campaign")
    p.add_argument("--spec", help="campaign spec JSON (defaults are used for missing keys)")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1, help="worker processes; output does not depend on it")
    p.add_argument("--out", required=True, help="per-trial CSV")
    p.add_argument("--aggregate", help="binned aggregate CSV")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SolverError, DegenerateCalibrationError, UndistortError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (
        ConfigError,
        FormatError,
        InputError,
        UnderdeterminedError,
        IncompleteFrameError,
        ProjectionError,
        KeyError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
