"""Convergence evidence for RFI runs.

Ergodic (Cesaro) means, ensemble moments, empirical Wasserstein-2
distances, the fixed-point residual estimate of the Markov transport
discrepancy in the consistent case, log-linear rate fits, and alignment
of recovered ball configurations to a reference up to rigid motion,
reflection and relabelling.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .engine import SamplingSpec, chain_rng, draw_batch, STREAM_AUX
from .rotations import quat_to_matrix, random_quaternion

__all__ = [
    "W2_EXACT_MAX",
    "ConvergenceReport",
    "RateFit",
    "Alignment",
    "cesaro_mean",
    "w2_empirical",
    "w2_subsampled",
    "w2_brute_force",
    "psi_consistent_estimate",
    "fit_linear_rate",
    "align_to_truth",
    "moment_trajectories",
    "align_points",
]

W2_EXACT_MAX = 2048


def cesaro_mean(trajectory) -> np.ndarray:
    """Running means ``(1/k) sum_{j<=k} X_j`` of a trajectory (K, ...)."""
    X = np.asarray(trajectory, dtype=float)
    if len(X) == 0:
        raise ValueError("empty trajectory")
    out = np.empty_like(X)
    mean = np.zeros_like(X[0])
    for k, xk in enumerate(X, start=1):
        mean = mean + (xk - mean) / k
        out[k - 1] = mean
    return out


def _sq_costs(A, B):
    A = np.asarray(A, dtype=float).reshape(len(A), -1)
    B = np.asarray(B, dtype=float).reshape(len(B), -1)
    return ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)


def w2_empirical(A, B) -> float:
    """Exact W2 distance between two uniform empirical measures of equal size."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if len(A) != len(B):
        raise ValueError(f"point clouds differ in size ({len(A)} vs {len(B)}); subsample first")
    if len(A) > W2_EXACT_MAX:
        raise ValueError(f"exact W2 limited to {W2_EXACT_MAX} points; use w2_subsampled")
    C = _sq_costs(A, B)
    r, c = linear_sum_assignment(C)
    return math.sqrt(max(0.0, math.fsum(C[r, c]) / len(A)))


def w2_brute_force(A, B) -> float:
    """W2 by enumerating all permutations; only for tiny clouds."""
    C = _sq_costs(A, B)
    n = len(C)
    best = min(math.fsum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def w2_subsampled(A, B, size: int = W2_EXACT_MAX, repeats: int = 8, seed: int = 0):
    """Mean and standard deviation of exact W2 over random equal-size subsamples."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = min(len(A), len(B), size)
    rng = np.random.default_rng(seed)
    vals = [w2_empirical(A[rng.choice(len(A), n, replace=False)], B[rng.choice(len(B), n, replace=False)])
            for _ in range(repeats)]
    return float(np.mean(vals)), float(np.std(vals))


def psi_consistent_estimate(points, operator_factory: Callable, spec: SamplingSpec,
                            n_resample: int = 1, seed: int = 0):
    """Monte Carlo estimate of ``( int E|x - T_xi x|^2 mu(dx) )^(1/2)``.

    ``points`` are samples of ``mu`` (an :class:`EnsembleSnapshot` or an
    array). Each point gets ``n_resample`` fresh batches. Returns
    ``(estimate, standard_error)``; the error is propagated from the
    standard error of the mean squared residual.
    """
    if n_resample < 1:
        raise ValueError("n_resample must be >= 1")
    pts = getattr(points, "points", points)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    rng = chain_rng(seed, 0, STREAM_AUX)
    sq = []
    for i, x in enumerate(pts):
        for _ in range(n_resample):
            T = operator_factory(draw_batch(spec, rng))
            try:
                d = x - np.asarray(T(x), dtype=float)
            except FloatingPointError as exc:
                raise FloatingPointError(f"operator failed at ensemble point {i}: {exc}") from exc
            sq.append(float(np.dot(d, d)))
    sq = np.array(sq)
    mean = float(sq.mean())
    est = math.sqrt(mean)
    if len(sq) > 1 and est > 0:
        se = float(sq.std(ddof=1) / math.sqrt(len(sq))) / (2.0 * est)
    else:
        se = 0.0
    return est, se


@dataclass
class RateFit:
    """Log-linear fit of step norms: ``log |step_k| ~ a + k log c``."""

    c: float
    r_squared: float
    window: tuple
    n_excluded: int

    @property
    def claimed(self) -> bool:
        """A rate is only claimed for a good fit that actually contracts."""
        return self.r_squared >= 0.9 and np.isfinite(self.c)

    def to_dict(self) -> dict:
        return {"c": self.c, "r_squared": self.r_squared, "window": list(self.window),
                "n_excluded": self.n_excluded}


def fit_linear_rate(step_norms, window=None) -> RateFit:
    """Least-squares rate of a geometric decay of step norms.

    ``step_norms[i]`` belongs to iteration ``i + 1``. ``window`` is a
    ``(start, stop)`` slice into the array; the default is the last half
    of the iterations with positive norm. Nonpositive or non-finite norms
    inside the window are dropped and counted.
    """
    s = np.asarray(step_norms, dtype=float)
    if window is None:
        pos = np.nonzero(np.isfinite(s) & (s > 0))[0]
        if len(pos) == 0:
            raise ValueError("no positive step norms to fit")
        last = pos[-1] + 1
        start = last - (last + 1) // 2
        window = (int(start), int(last))
    lo, hi = window
    k = np.arange(lo, hi) + 1.0
    v = s[lo:hi]
    keep = np.isfinite(v) & (v > 0)
    excluded = int((~keep).sum())
    k, v = k[keep], np.log(v[keep])
    if len(v) < 10:
        raise ValueError(f"need at least 10 positive step norms in the window, got {len(v)}")
    A = np.vstack([np.ones_like(k), k]).T
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - A @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((v - v.mean()) ** 2).sum())
    if ss_tot <= 1e-24 * max(1.0, float(v @ v)):
        r2 = 1.0 if ss_res <= 1e-20 * max(1.0, float(v @ v)) else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return RateFit(float(math.exp(coef[1])), float(r2), (int(lo), int(hi)), excluded)


@dataclass
class Alignment:
    """Best superposition of an estimate onto a reference configuration.

    ``rotation`` (det = -1 when ``reflected``) maps the centred estimate
    onto the centred reference: ``ref[permutation[i]] ~ rotation @ est[i]``.
    """

    rmsd: float
    rotation: np.ndarray
    reflected: bool
    permutation: np.ndarray
    translation: np.ndarray
    n_starts: int
    note: str = "local search; global optimum not guaranteed"

    def apply(self, centers) -> np.ndarray:
        """Map ``centers`` into the reference frame, ordered like the reference."""
        c = np.asarray(centers, dtype=float).reshape(-1, 3)
        moved = (c - c.mean(axis=0)) @ self.rotation.T + self.translation
        out = np.empty_like(moved)
        out[self.permutation] = moved
        return out

    def to_dict(self) -> dict:
        return {"rmsd": self.rmsd, "reflected": self.reflected,
                "rotation": self.rotation.tolist(), "permutation": self.permutation.tolist(),
                "translation": self.translation.tolist(), "note": self.note}


def _kabsch(P, Q, det_sign):
    """Orthogonal ``R`` with ``det R = det_sign`` minimizing ``sum |R p_i - q_i|^2``."""
    U, _, Vt = np.linalg.svd(P.T @ Q)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) * det_sign
    if d == 0:
        d = det_sign
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def align_to_truth(est, truth, n_starts: int = 8, max_sweeps: int = 100, seed: int = 0) -> Alignment:
    """Minimal RMSD between two ball configurations.

    Searches over translation (centroids are matched; the likelihood is
    translation invariant), proper and improper rotations, and ball
    relabelling, alternating optimal assignment with orthogonal Procrustes
    from ``n_starts`` starting rotations per handedness (the first is the
    identity) plus the four principal-axis matches of that handedness.
    """
    E = np.asarray(getattr(est, "centers", est), dtype=float).reshape(-1, 3)
    T = np.asarray(getattr(truth, "centers", truth), dtype=float).reshape(-1, 3)
    if E.shape != T.shape:
        raise ValueError("configurations must have the same number of balls")
    ec, tc = E.mean(axis=0), T.mean(axis=0)
    P, Q = E - ec, T - tc
    rng = np.random.default_rng(seed)
    starts = [np.eye(3)] + [quat_to_matrix(random_quaternion(rng)) for _ in range(n_starts - 1)]
    # principal-axis matches are exact for rigid copies with distinct inertia moments
    _, Up = np.linalg.eigh(P.T @ P)
    _, Uq = np.linalg.eigh(Q.T @ Q)
    axes = [Uq @ np.diag(s) @ Up.T for s in itertools.product((1.0, -1.0), repeat=3)]
    best = None
    for sign in (1.0, -1.0):
        flip = np.diag([1.0, 1.0, sign])
        candidates = [R0 @ flip for R0 in starts]
        candidates += [A for A in axes if np.linalg.det(A) * sign > 0]
        for R in candidates:
            perm = None
            for _ in range(max_sweeps):
                cost = _sq_costs(P @ R.T, Q)
                _, new_perm = linear_sum_assignment(cost)
                if perm is not None and np.array_equal(new_perm, perm):
                    break
                perm = new_perm
                R = _kabsch(P, Q[perm], sign)
            rmsd = math.sqrt(max(0.0, float(((P @ R.T - Q[perm]) ** 2).sum(axis=1).mean())))
            if best is None or rmsd < best.rmsd - 1e-15:
                best = Alignment(rmsd, R, sign < 0, perm.copy(), tc.copy(), len(starts))
    return best


def align_points(points, reference) -> np.ndarray:
    """Superpose each flattened configuration in ``points`` onto ``reference``."""
    ref = np.asarray(reference, dtype=float).reshape(-1, 3)
    out = []
    for x in np.atleast_2d(points):
        out.append(align_to_truth(x, ref).apply(x).reshape(-1))
    return np.array(out)


def moment_trajectories(snapshots, reference=None):
    """Ensemble mean and per-coordinate variance at each snapshot.

    With a ``reference`` configuration every point is first superposed on
    it, which removes the rigid-motion, reflection and relabelling freedom
    the likelihood cannot see. Returns ``(means, variances)`` of shape
    ``(n_snapshots, dim)``.
    """
    means, variances = [], []
    for snap in snapshots:
        pts = np.atleast_2d(getattr(snap, "points", snap)).astype(float)
        if reference is not None:
            pts = align_points(pts, reference)
        mean = np.zeros(pts.shape[1])
        m2 = np.zeros(pts.shape[1])
        for n, p in enumerate(pts, start=1):
            delta = p - mean
            mean = mean + delta / n
            m2 = m2 + delta * (p - mean)
        means.append(mean)
        variances.append(m2 / len(pts))
    return np.array(means), np.array(variances)


@dataclass
class ConvergenceReport:
    """Everything the ``diagnose`` command computes for a run artifact."""

    ks: list
    step_norms: list
    rate: Optional[RateFit]
    cesaro_deviation: list
    variance_trace: list
    w2_successive: list
    w2_to_reference: list
    psi: list
    psi_stderr: list
    alignment: Optional[list] = None
    certificate: Optional[dict] = None
    mean_trajectory: list = field(default_factory=list)
    variance_trajectory: list = field(default_factory=list)
    cesaro_mean_trajectory: list = field(default_factory=list)
    step_norm_series: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ks": self.ks,
            "step_norms": self.step_norms,
            "rate": None if self.rate is None else {**self.rate.to_dict(), "claimed": self.rate.claimed},
            "cesaro_deviation": self.cesaro_deviation,
            "variance_trace": self.variance_trace,
            "w2_successive": self.w2_successive,
            "w2_to_reference": self.w2_to_reference,
            "psi": self.psi,
            "psi_stderr": self.psi_stderr,
            "alignment": self.alignment,
            "certificate": self.certificate,
            "mean_trajectory": self.mean_trajectory,
            "variance_trajectory": self.variance_trajectory,
            "cesaro_mean_trajectory": self.cesaro_mean_trajectory,
            "step_norm_series": self.step_norm_series,
            "extra": self.extra,
        }
