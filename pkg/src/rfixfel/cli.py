"""Command line: ``rfixfel {gen,run,diagnose,plot}``.

Run artifact layout (``artifact_version`` 1), one directory per run::

    config.json       exact config that produced the run (canonical JSON)
    snapshots.jsonl   one line per recorded k: {"k", "chain_ids", "points",
                      "step_norms"}; the k = 0 step norms are null
    step_norms.csv    chain,k,step_norm for every update of every chain
    certificate.json  {"label", "certificate", "predicted_rate", "gauge"}
    status.json       {"complete", "truncated", "aborted", "n_done"}
    timing.csv        chain,k,wall_clock_s at every snapshot
    TRUNCATED         present only when the run was interrupted
    manifest.json     {"artifact_version", "config_sha256", "dataset_sha256",
                      "files": {name: sha256}}, written last

``diagnose`` writes ``report.json``, ``diagnostics.csv`` (one row per
snapshot, deterministic) and ``timing.csv`` (wall clock) into
``<artifact>/diagnostics`` unless ``--out`` says otherwise.

Exit codes: 0 success, 1 I/O or artifact error, 2 invalid configuration,
3 numeric abort of at least one chain, 130 interrupted.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import shutil
import sys
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .datagen import default_truth, generate_dataset, read_dataset, write_dataset
from .diagnostics import (ConvergenceReport, align_points, align_to_truth, cesaro_mean,
                          fit_linear_rate, moment_trajectories, psi_consistent_estimate, w2_empirical)
from .engine import (EnsembleSnapshot, SamplingSpec, box_initializer, collect_snapshots, delta_initializer,
                     run_ensemble)
from .operators import (ALPHA_MAX, ProxTerm, SmoothTerm, TermRegistry, certify_batch, linear_rate,
                        linear_rate_window, make_operator_factory)
from .rotations import RotationSet
from .xfel import DetectorGrid, make_smooth_terms, projector_C0

__all__ = ["ARTIFACT_VERSION", "ArtifactError", "Problem", "build_problem", "cmd_gen", "cmd_run",
           "cmd_diagnose", "cmd_plot", "load_artifact", "main"]

ARTIFACT_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTERRUPTED = 0, 1, 2, 3, 130

CSV_COLUMNS = ["k", "step_norm", "cesaro_deviation", "variance_trace", "w2_successive",
               "w2_to_reference", "psi", "psi_stderr"]


class ArtifactError(RuntimeError):
    """A run artifact is missing, incomplete or fails its integrity check."""


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(obj, indent=None) -> str:
    return json.dumps(obj, sort_keys=True, indent=indent, separators=None if indent else (",", ":"),
                      allow_nan=False)


def _num(v):
    """JSON/CSV value: None for missing or non-finite numbers."""
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _fmt(v) -> str:
    v = _num(v)
    return "" if v is None else repr(v)


# ---------------------------------------------------------------------------
# problem assembly


@dataclass
class Problem:
    """A configured problem ready to run: terms, batch law and initial law."""

    registry: TermRegistry
    factory: Callable
    spec: SamplingSpec
    dim: int
    mu0: Callable
    reference: Optional[np.ndarray]
    certificate: dict
    dataset_sha256: Optional[str] = None
    truth_centers: Optional[np.ndarray] = None


def _affine_registry(cfg: RunConfig, steps):
    terms = []
    xstar = np.array(cfg.affine.fixed_point)
    mats = [np.array(A) for A in cfg.affine.matrices]
    Ls = [float(np.linalg.eigvalsh(A).max()) for A in mats]
    if min(float(np.linalg.eigvalsh(A).min()) for A in mats) < 0:
        raise ConfigError("affine.matrices", "must be positive semidefinite")
    # smallest constant certifying every term's step: alpha = t L / 2
    alpha = max(1e-6, max(t * L / 2.0 for t, L in zip(steps, Ls)) * (1 + 1e-9))
    for A, L in zip(mats, Ls):
        terms.append(SmoothTerm(gradient_fn=lambda x, A=A: A @ (x - xstar),
                                value_fn=lambda x, A=A: 0.5 * float((x - xstar) @ A @ (x - xstar)),
                                lipschitz_L=max(L, 1e-300), hypomono_tau=0.0,
                                alpha=min(alpha, ALPHA_MAX), convex=True))
    return terms, xstar, mats


def build_problem(cfg: RunConfig, dataset=None) -> Problem:
    """Terms, operator factory, sampling law and initial law for ``cfg``."""
    M = cfg.n_terms
    steps = list(cfg.step) if isinstance(cfg.step, tuple) else None
    cert_info = {"label": "uncertified", "certificate": None, "predicted_rate": None, "gauge": None}
    if cfg.problem == "affine":
        terms, xstar, mats = _affine_registry(cfg, steps or [cfg.step] * M)
        dim, reference, truth, dsha = len(xstar), xstar, None, None
        if any(t * float(np.linalg.eigvalsh(A).max()) >= 2 * ALPHA_MAX for t, A in zip(steps or [cfg.step] * M, mats)):
            raise ConfigError("step", "affine steps must satisfy t * L < 2")
    else:
        if dataset is None:
            if not os.path.exists(cfg.dataset):
                raise ConfigError("dataset", f"{cfg.dataset} does not exist; run 'gen' first")
            dataset = read_dataset(cfg.dataset)
        dsha = _sha256_file(cfg.dataset) if os.path.exists(cfg.dataset) else None
        M = len(dataset)
        if cfg.batch_size > M:
            raise ConfigError("batch_size", f"exceeds the {M} images in {cfg.dataset}")
        if steps is not None and len(steps) != M:
            raise ConfigError("step", f"per-term steps need {M} entries")
        rots = RotationSet.low_discrepancy(cfg.n_rotations, cfg.rotation_seed)
        reg = make_smooth_terms(dataset, rots, cfg.full_grid_exponent)
        terms = [reg[j] for j in range(len(reg))]
        truth = dataset.truth.centers
        dim, reference = truth.size, truth.reshape(-1)
    box_idx = ()
    if cfg.box is not None:
        box = tuple(cfg.box)
        terms = terms + [ProxTerm(lambda x, t, box=box: projector_C0(x, box), 0.0)]
        box_idx = (len(terms) - 1,)
    likelihood = None if cfg.problem == "affine" else reg.likelihood
    registry = TermRegistry(terms, likelihood=likelihood)
    step_arg = cfg.step if steps is None else {j: t for j, t in enumerate(steps)}
    if isinstance(step_arg, dict):
        for j in box_idx:
            step_arg[j] = 1.0
    factory = make_operator_factory(registry, step_arg, cfg.q, cfg.r, certify=False, always_prox=box_idx)
    spec = SamplingSpec(M, cfg.batch_size, cfg.seed, cfg.with_replacement)

    if cfg.problem == "affine":
        smooth = tuple(range(M))
        sm = step_arg if isinstance(step_arg, dict) else {j: float(step_arg) for j in range(len(terms))}
        cert = certify_batch(registry, smooth, box_idx, sm, cfg.q, cfg.r)
        cert_info["label"] = cert.label
        cert_info["certificate"] = cert.to_dict()
        if cfg.q == 1 and cfg.r == 1 and not box_idx:
            # |x - T x| >= t * lambda_min |x - x*| for every batch average
            lam = min(float(np.linalg.eigvalsh(A).min()) for A in mats)
            tmin = min(steps) if steps else float(cfg.step)
            if lam > 0:
                gauge = 1.0 / (tmin * lam)
                lo, hi = linear_rate_window(cert)
                gauge = min(max(gauge, lo), hi)
                if gauge < hi:
                    cert_info["gauge"] = gauge
                    cert_info["predicted_rate"] = linear_rate(cert, gauge)

    if cfg.init.kind == "truth":
        mu0 = delta_initializer(reference)
    elif cfg.init.kind == "point":
        if len(cfg.init.point) != dim:
            raise ConfigError("init.point", f"must have {dim} coordinates")
        mu0 = delta_initializer(cfg.init.point)
    else:
        mu0 = box_initializer(cfg.init.lo, cfg.init.hi, dim)
    return Problem(registry, factory, spec, dim, mu0, reference, cert_info, dsha,
                   None if truth is None else np.asarray(truth))


# ---------------------------------------------------------------------------
# gen


def cmd_gen(cfg: RunConfig, path=None) -> str:
    """Generate the configured dataset, write it and print a header audit."""
    if cfg.problem != "xfel":
        raise ConfigError("problem", "'gen' needs problem 'xfel'")
    g = cfg.generation
    path = os.fspath(path or cfg.dataset)
    truth_seed = cfg.seed if g.truth_seed is None else g.truth_seed
    truth = default_truth(g.n_balls, g.radius, g.min_separation, g.sigma, seed=truth_seed)
    grid = DetectorGrid(g.n_u, g.n_v, g.k_max)
    ds = generate_dataset(truth, g.n_images, grid, g.target_mean_photons, seed=cfg.seed,
                          scale_sample_size=g.scale_sample_size)
    write_dataset(ds, path)
    totals = np.array([im.observation.total for im in ds.images])
    lam = ds.model.expected_counts(truth, ds.images[0].rotation)
    print(f"wrote {path}: M={len(ds)} grid={g.n_u}x{g.n_v} k_max={g.k_max} sigma={g.sigma}")
    print(f"intensity_scale={ds.header.intensity_scale!r} (from {g.scale_sample_size} rotations)")
    print(f"expected counts per image: target {g.target_mean_photons}, image 0 expects {lam.sum():.4f}; "
          f"observed mean {totals.mean():.4f}")
    return path


# ---------------------------------------------------------------------------
# run


def _snapshot_line(snap: EnsembleSnapshot) -> str:
    return _dumps({"k": int(snap.outer_iteration_k), "chain_ids": [int(c) for c in snap.chain_ids],
                   "points": [[float(v) for v in p] for p in snap.points],
                   "step_norms": [_num(v) for v in snap.step_norms]})


def _prepare_out(out) -> str:
    out = os.fspath(out)
    if os.path.isdir(out) and os.listdir(out) and not os.path.exists(os.path.join(out, "manifest.json")):
        raise ArtifactError(f"{out} exists and is not a run artifact; refusing to overwrite")
    tmp = out + ".partial"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    return tmp


def _write_artifact(tmp, out, cfg, problem, trajs, timings, truncated):
    with open(os.path.join(tmp, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.dumps())
    snaps = collect_snapshots(trajs, cfg.n_outer, cfg.snapshot_every) if trajs else []
    with open(os.path.join(tmp, "snapshots.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for s in snaps:
            fh.write(_snapshot_line(s) + "\n")
    with open(os.path.join(tmp, "step_norms.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "k", "step_norm"])
        for c, tr in enumerate(trajs):
            for k, v in enumerate(tr.step_norms, start=1):
                w.writerow([c, k, _fmt(v)])
    with open(os.path.join(tmp, "certificate.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(problem.certificate, indent=2) + "\n")
    aborted = [tr.aborted for tr in trajs if tr.aborted and not tr.interrupted]
    status = {"complete": not truncated and len(trajs) == cfg.n_chains, "truncated": truncated,
              "aborted": aborted, "n_done": [int(len(tr.step_norms)) for tr in trajs]}
    with open(os.path.join(tmp, "status.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(status, indent=2) + "\n")
    with open(os.path.join(tmp, "timing.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "k", "wall_clock_s"])
        for (c, k), sec in sorted(timings.items()):
            w.writerow([c, k, f"{sec:.6f}"])
    if truncated:
        with open(os.path.join(tmp, "TRUNCATED"), "w", encoding="utf-8") as fh:
            fh.write("run interrupted before completion\n")
    files = {name: _sha256_file(os.path.join(tmp, name)) for name in sorted(os.listdir(tmp))}
    manifest = {"artifact_version": ARTIFACT_VERSION, "config_sha256": files["config.json"],
                "dataset_sha256": problem.dataset_sha256, "files": files, "rfixfel_version": __version__}
    with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(manifest, indent=2) + "\n")
    if os.path.exists(out):
        shutil.rmtree(out)
    os.replace(tmp, out)
    return status


def cmd_run(cfg: RunConfig, out=None, quiet: bool = False):
    """Run the configured ensemble; return ``(artifact_dir, status)``."""
    out = os.fspath(out or cfg.out)
    problem = build_problem(cfg)
    tmp = _prepare_out(out)
    want = set(range(0, cfg.n_outer + 1, cfg.snapshot_every)) | {cfg.n_outer}
    t0 = time.perf_counter()
    timings = {}
    report_every = max(1, cfg.n_outer // 10)

    def progress(chain, k):
        if k in want:
            timings[(chain, k)] = time.perf_counter() - t0
        if not quiet and (k % report_every == 0):
            _log(f"chain {chain}: k={k}/{cfg.n_outer} ({time.perf_counter() - t0:.1f}s)")

    trajs, truncated = [], False
    try:
        for c in range(cfg.n_chains):
            timings[(c, 0)] = 0.0
        _, trajs = run_ensemble(problem.mu0, cfg.n_chains, problem.factory, problem.spec, cfg.n_outer,
                                cfg.snapshot_every, threads=cfg.threads, progress=progress)
        truncated = any(tr.interrupted for tr in trajs)
    except KeyboardInterrupt:
        truncated = True
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    status = _write_artifact(tmp, out, cfg, problem, trajs, timings, truncated)
    if not quiet:
        _log(f"artifact written to {out} (label: {problem.certificate['label']})")
    return out, status


# ---------------------------------------------------------------------------
# diagnose


@dataclass
class Artifact:
    path: str
    config: RunConfig
    manifest: dict
    status: dict
    certificate: dict
    snapshots: list
    step_norms: dict


def load_artifact(path) -> Artifact:
    """Read and verify a run artifact against its manifest."""
    path = os.fspath(path)
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise ArtifactError(f"{path}: no manifest.json; not a complete run artifact")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("artifact_version") != ARTIFACT_VERSION:
        raise ArtifactError(f"{path}: unsupported artifact version {manifest.get('artifact_version')!r}")
    cpath = os.path.join(path, "config.json")
    if not os.path.exists(cpath) or _sha256_file(cpath) != manifest.get("config_sha256"):
        raise ArtifactError(f"{path}: config hash does not match the manifest")
    for name, digest in manifest["files"].items():
        fpath = os.path.join(path, name)
        if not os.path.exists(fpath):
            raise ArtifactError(f"{path}: missing {name}")
        if _sha256_file(fpath) != digest:
            raise ArtifactError(f"{path}: {name} does not match its manifest hash")
    cfg = load_config(cpath)
    with open(os.path.join(path, "status.json"), encoding="utf-8") as fh:
        status = json.load(fh)
    with open(os.path.join(path, "certificate.json"), encoding="utf-8") as fh:
        cert = json.load(fh)
    snaps = []
    with open(os.path.join(path, "snapshots.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            norms = [np.nan if v is None else v for v in d["step_norms"]]
            snaps.append(EnsembleSnapshot(d["k"], np.array(d["points"], dtype=float), norms, d["chain_ids"]))
    steps = {}
    with open(os.path.join(path, "step_norms.csv"), encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            steps.setdefault(int(row["chain"]), []).append(float(row["step_norm"]) if row["step_norm"] else np.nan)
    return Artifact(path, cfg, manifest, status, cert, snaps, {c: np.array(v) for c, v in steps.items()})


def _expected_ks(cfg, n_done):
    ks = list(range(0, n_done + 1, cfg.snapshot_every))
    if ks[-1] != n_done and n_done == cfg.n_outer:
        ks.append(n_done)
    return ks


def _ensemble_step_series(step_norms: dict) -> np.ndarray:
    """Root-mean-square step norm over the chains alive at each update."""
    if not step_norms:
        return np.zeros(0)
    K = max(len(v) for v in step_norms.values())
    sq = np.zeros(K)
    n = np.zeros(K)
    for v in step_norms.values():
        sq[:len(v)] += np.where(np.isfinite(v), v, 0.0) ** 2
        n[:len(v)] += np.isfinite(v)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, np.sqrt(sq / np.maximum(n, 1)), np.nan)


def cmd_diagnose(artifact_dir, out=None, quiet: bool = False) -> ConvergenceReport:
    """Compute all diagnostics of an artifact; write the report and CSV tables."""
    art = load_artifact(artifact_dir)
    cfg = art.config
    problem = build_problem(cfg)
    if cfg.problem == "xfel" and art.manifest.get("dataset_sha256") != problem.dataset_sha256:
        raise ArtifactError(f"{art.path}: dataset {cfg.dataset} changed since the run")
    if not art.snapshots:
        raise ArtifactError(f"{art.path}: no snapshots; expected k = 0, {cfg.snapshot_every}, ... {cfg.n_outer}")
    n_done = min(art.status["n_done"]) if art.status["n_done"] else 0
    have = [s.outer_iteration_k for s in art.snapshots]
    expected = _expected_ks(cfg, n_done if art.status["truncated"] or art.status["aborted"] else cfg.n_outer)
    missing = sorted(set(expected) - set(have))
    if missing:
        raise ArtifactError(f"{art.path}: missing snapshots at k={missing[:10]}; expected cadence "
                            f"every {cfg.snapshot_every} from 0 to {cfg.n_outer}")

    truth = problem.truth_centers
    aligned = []
    for s in art.snapshots:
        aligned.append(align_points(s.points, truth) if truth is not None else s.points)

    series = _ensemble_step_series(art.step_norms)
    rate = None
    try:
        rate = fit_linear_rate(series)
    except ValueError:
        rate = None

    ks = [int(s.outer_iteration_k) for s in art.snapshots]
    # per-chain ergodic means over the recorded snapshots
    chain_paths = {}
    for s in art.snapshots:
        for cid, p in zip(s.chain_ids, s.points):
            chain_paths.setdefault(int(cid), []).append(p)
    chain_cesaro = {c: cesaro_mean(np.array(v)) for c, v in chain_paths.items()}
    cesaro_dev = []
    cesaro_traj = []
    for i, s in enumerate(art.snapshots):
        devs = [float(np.linalg.norm(p - chain_cesaro[int(c)][i])) for c, p in zip(s.chain_ids, s.points)
                if i < len(chain_cesaro[int(c)])]
        cesaro_dev.append(math.sqrt(np.mean(np.square(devs))) if devs else None)
        cesaro_traj.append(np.mean([chain_cesaro[int(c)][i] for c in s.chain_ids], axis=0).tolist())

    means, variances = moment_trajectories(aligned)
    var_trace = [float(v.sum()) for v in variances]
    w2_succ = [None]
    for a, b in zip(aligned[:-1], aligned[1:]):
        w2_succ.append(w2_empirical(a, b) if len(a) == len(b) else None)
    w2_ref = []
    for a in aligned:
        w2_ref.append(None if problem.reference is None
                      else w2_empirical(a, np.tile(problem.reference, (len(a), 1))))

    psi, psi_se = [], []
    last = len(art.snapshots) - 1
    for i, s in enumerate(art.snapshots):
        if i % cfg.psi_every == 0 or i == last:
            try:
                est, se = psi_consistent_estimate(s.points, problem.factory, problem.spec,
                                                  cfg.psi_resample, seed=cfg.seed)
            except FloatingPointError:
                est, se = None, None
            psi.append(est)
            psi_se.append(se)
        else:
            psi.append(None)
            psi_se.append(None)
        if not quiet and i % max(1, len(art.snapshots) // 10) == 0:
            _log(f"diagnose: snapshot {i + 1}/{len(art.snapshots)}")

    alignment = None
    if truth is not None:
        alignment = []
        final = art.snapshots[-1]
        for cid, p in zip(final.chain_ids, final.points):
            al = align_to_truth(p, truth, seed=cfg.seed)
            alignment.append({"chain": int(cid), **al.to_dict()})

    step_at_snap = []
    for s in art.snapshots:
        v = s.step_norms[np.isfinite(s.step_norms)]
        step_at_snap.append(float(np.sqrt(np.mean(v ** 2))) if len(v) else None)

    cert = dict(art.certificate)
    report = ConvergenceReport(
        ks=ks, step_norms=step_at_snap, rate=rate, cesaro_deviation=cesaro_dev,
        variance_trace=var_trace, w2_successive=w2_succ, w2_to_reference=w2_ref,
        psi=psi, psi_stderr=psi_se, alignment=alignment, certificate=cert,
        mean_trajectory=means.tolist(), variance_trajectory=variances.tolist(),
        cesaro_mean_trajectory=cesaro_traj, step_norm_series=[_num(v) for v in series],
        extra={"rate_status": ("no decay" if rate is None or not rate.claimed or rate.c >= 1.0 else "linear"),
               "truncated": art.status["truncated"], "aborted": art.status["aborted"],
               "reference": "truth (aligned)" if truth is not None else "fixed point"},
    )
    out = os.fspath(out or os.path.join(art.path, "diagnostics"))
    os.makedirs(out, exist_ok=True)
    _write_report(report, out)
    _write_csv(report, os.path.join(out, "diagnostics.csv"))
    _write_timing(art.path, ks, os.path.join(out, "timing.csv"))
    return report


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_report(report: ConvergenceReport, out):
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(_clean(report.to_dict()), indent=1) + "\n")


def _write_csv(report: ConvergenceReport, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i, k in enumerate(report.ks):
        w.writerow([k, _fmt(report.step_norms[i]), _fmt(report.cesaro_deviation[i]),
                    _fmt(report.variance_trace[i]), _fmt(report.w2_successive[i]),
                    _fmt(report.w2_to_reference[i]), _fmt(report.psi[i]), _fmt(report.psi_stderr[i])])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _write_timing(artifact, ks, path):
    worst = {}
    with open(os.path.join(artifact, "timing.csv"), encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            k = int(row["k"])
            worst[k] = max(worst.get(k, 0.0), float(row["wall_clock_s"]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "wall_clock_s"])
        for k in ks:
            w.writerow([k, f"{worst[k]:.6f}" if k in worst else ""])


# ---------------------------------------------------------------------------
# plot


def cmd_plot(report_path, out_dir=None) -> list:
    """Emit the SVG figures of a diagnostics report."""
    from .plotting import plot_report
    report_path = os.fspath(report_path)
    if os.path.isdir(report_path):
        report_path = os.path.join(report_path, "report.json")
    with open(report_path, encoding="utf-8") as fh:
        report = json.load(fh)
    return plot_report(report, out_dir or os.path.dirname(report_path) or ".")


# ---------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(prog="rfixfel", description="Random function iteration for X-FEL "
                                "single-particle reconstruction.")
    p.add_argument("--version", action="version", version=f"rfixfel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output path")
        sp.add_argument("--threads", type=int, help="override the number of worker threads")
        sp.add_argument("--quiet", action="store_true", help="suppress progress messages")

    common(sub.add_parser("gen", help="generate a synthetic dataset"))
    common(sub.add_parser("run", help="run an ensemble of chains"))
    d = sub.add_parser("diagnose", help="compute convergence diagnostics of a run artifact")
    d.add_argument("artifact")
    d.add_argument("--out", help="directory for report.json and CSV tables")
    d.add_argument("--quiet", action="store_true")
    pl = sub.add_parser("plot", help="write SVG figures from a report")
    pl.add_argument("report", help="report.json or the directory holding it")
    pl.add_argument("--out", help="directory for the SVG files")
    sub.add_parser("init-config", help="print the default configuration")
    return p


def _overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "init-config":
            sys.stdout.write(RunConfig().dumps())
            return EXIT_OK
        if args.command in ("gen", "run"):
            cfg = _overrides(load_config(args.config), args)
            if args.command == "gen":
                cmd_gen(cfg, args.out)
                return EXIT_OK
            out, status = cmd_run(cfg, args.out, quiet=args.quiet)
            if status["truncated"]:
                return EXIT_INTERRUPTED
            if status["aborted"]:
                for msg in status["aborted"]:
                    _log(f"numeric abort: {msg}")
                return EXIT_NUMERIC
            return EXIT_OK
        if args.command == "diagnose":
            rep = cmd_diagnose(args.artifact, args.out, quiet=args.quiet)
            rate = rep.extra["rate_status"]
            msg = f"rate: {rate}"
            if rep.rate is not None and rate == "linear":
                msg += f" c={rep.rate.c:.6g} R2={rep.rate.r_squared:.4f} window={list(rep.rate.window)}"
            print(msg)
            if rep.alignment:
                print("alignment rmsd per chain: " + " ".join(f"{a['rmsd']:.4f}" for a in rep.alignment))
            if rep.psi and rep.psi[-1] is not None:
                print(f"psi estimate at final snapshot: {rep.psi[-1]:.6g}")
            return EXIT_OK
        if args.command == "plot":
            for path in cmd_plot(args.report, args.out):
                print(path)
            return EXIT_OK
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG if getattr(args, "config", None) == exc.filename else EXIT_ERROR
    except (ArtifactError, OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_ERROR
    except FloatingPointError as exc:
        _log(f"numeric abort: {exc}")
        return EXIT_NUMERIC
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
