"""Standalone SVG figures from a convergence report.

Output is byte-for-byte reproducible for a fixed report: the SVG id salt
is fixed, the date stamp is dropped and text is kept as ``<text>``.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_step_norms", "plot_moments", "plot_w2", "plot_report"]

_RC = {"svg.hashsalt": "rfixfel", "svg.fonttype": "none", "figure.figsize": (6.0, 4.0)}
_META = {"Date": None, "Creator": "rfixfel"}


def _as_array(values):
    return np.array([np.nan if v is None else float(v) for v in values], dtype=float)


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return os.fspath(path)


def _no_data(ax):
    ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes, gid="no-data")


def plot_step_norms(step_norms, path, ks=None):
    """Iterate differences ``|x_k - x_{k-1}|`` on a log axis."""
    s = _as_array(step_norms)
    k = np.arange(1, len(s) + 1) if ks is None else np.asarray(ks, dtype=float)
    keep = np.isfinite(s) & (s > 0)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.set_xlabel("k")
        ax.set_ylabel("step norm")
        if keep.any():
            ax.set_yscale("log")
            ax.plot(k[keep], s[keep], lw=1.0, gid="step-norm-line")
        else:
            _no_data(ax)
        fig.tight_layout()
        return _save(fig, path)


def plot_moments(ks, mean_trajectory, variance_trace, path):
    """Ensemble mean coordinates (left) and total variance (right)."""
    ks = np.asarray(ks, dtype=float)
    means = np.asarray(mean_trajectory, dtype=float)
    var = _as_array(variance_trace)
    with plt.rc_context({**_RC, "figure.figsize": (9.0, 4.0)}):
        fig, (a1, a2) = plt.subplots(1, 2)
        a1.set_xlabel("k")
        a1.set_ylabel("ensemble mean")
        a2.set_xlabel("k")
        a2.set_ylabel("variance trace")
        if len(ks) and means.size:
            a1.plot(ks, means.reshape(len(ks), -1), lw=0.8)
        else:
            _no_data(a1)
        if len(ks) and np.isfinite(var).any():
            a2.plot(ks, var, lw=1.0, gid="variance-line")
        else:
            _no_data(a2)
        fig.tight_layout()
        return _save(fig, path)


def plot_w2(ks, w2_successive, w2_to_reference, path):
    """Wasserstein-2 between successive snapshots and to the reference."""
    ks = np.asarray(ks, dtype=float)
    succ = _as_array(w2_successive)
    ref = _as_array(w2_to_reference)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.set_xlabel("k")
        ax.set_ylabel("W2")
        drawn = False
        for vals, label, gid in ((succ, "successive", "w2-successive"), (ref, "to reference", "w2-reference")):
            keep = np.isfinite(vals) & (vals > 0)
            if len(vals) == len(ks) and keep.any():
                ax.plot(ks[keep], vals[keep], lw=1.0, label=label, gid=gid)
                drawn = True
        if drawn:
            ax.set_yscale("log")
            ax.legend()
        else:
            _no_data(ax)
        fig.tight_layout()
        return _save(fig, path)


def plot_report(report: dict, out_dir) -> list:
    """Write ``step_norms.svg``, ``moments.svg`` and ``w2.svg``; return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    ks = report.get("ks", [])
    var = report.get("variance_trace", [])
    return [
        plot_step_norms(report.get("step_norm_series", []), os.path.join(out_dir, "step_norms.svg")),
        plot_moments(ks, report.get("mean_trajectory", []), var, os.path.join(out_dir, "moments.svg")),
        plot_w2(ks, report.get("w2_successive", []), report.get("w2_to_reference", []),
                os.path.join(out_dir, "w2.svg")),
    ]
