"""Random function iteration: X_{k+1} = T_{xi_k}(X_k) with i.i.d. batches xi_k.

Every chain owns counter-based Philox streams keyed by ``(seed, chain_id,
purpose)`` through :class:`numpy.random.SeedSequence`, so a run is fully
determined by its seed and configuration regardless of how chains are
scheduled.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "SamplingSpec",
    "ChainState",
    "Trajectory",
    "EnsembleSnapshot",
    "chain_rng",
    "draw_batch",
    "run_chain",
    "run_ensemble",
    "collect_snapshots",
    "delta_initializer",
    "box_initializer",
]

log = logging.getLogger(__name__)

STREAM_INIT = 0
STREAM_BATCH = 1
STREAM_AUX = 2


def chain_rng(seed: int, chain_id: int = 0, stream: int = STREAM_BATCH) -> np.random.Generator:
    """Independent Philox generator for one (seed, chain, purpose) triple."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain_id), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SamplingSpec:
    """How batches of term indices are drawn.

    Batches are uniform ``m``-subsets of ``range(M)``; with
    ``within_batch_replacement`` they are ``m`` independent uniform draws.
    """

    total_terms_M: int
    batch_size_m: int
    seed: int = 0
    within_batch_replacement: bool = False

    def __post_init__(self):
        if self.total_terms_M < 1:
            raise ValueError("need at least one term")
        if not (1 <= self.batch_size_m <= self.total_terms_M):
            raise ValueError(f"batch size {self.batch_size_m} not in [1, {self.total_terms_M}]")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def deterministic(self) -> bool:
        return self.batch_size_m == self.total_terms_M and not self.within_batch_replacement


def draw_batch(spec: SamplingSpec, rng: np.random.Generator) -> np.ndarray:
    """One batch of indices, sorted ascending."""
    M, m = spec.total_terms_M, spec.batch_size_m
    if m > M:
        raise ValueError("batch larger than index set")
    if spec.within_batch_replacement:
        return np.sort(rng.integers(0, M, size=m))
    if m == M:
        return np.arange(M)
    return np.sort(rng.choice(M, size=m, replace=False))


@dataclass
class ChainState:
    x: np.ndarray
    outer_iteration_k: int
    rng_stream: np.random.Generator

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float)
        if not np.all(np.isfinite(self.x)):
            raise FloatingPointError("chain state must be finite")


@dataclass
class Trajectory:
    """Output of one chain.

    ``records`` holds ``(k, x_k, |x_k - x_{k-1}|)`` at the snapshot cadence
    (the step norm of ``k = 0`` is NaN). ``step_norms[k-1]`` is the step
    norm of every update ``k = 1..n_done``.
    """

    records: list
    step_norms: np.ndarray
    aborted: Optional[str] = None
    interrupted: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.records[-1][1]


@dataclass
class EnsembleSnapshot:
    """Iterates of all live chains at outer iteration ``k``."""

    outer_iteration_k: int
    points: np.ndarray
    step_norms: np.ndarray
    chain_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.step_norms = np.asarray(self.step_norms, dtype=float).reshape(-1)
        if self.chain_ids is None:
            self.chain_ids = np.arange(len(self.points))
        self.chain_ids = np.asarray(self.chain_ids, dtype=np.int64)
        if len(self.points) != len(self.step_norms) or len(self.points) != len(self.chain_ids):
            raise ValueError("one step norm and chain id per point required")

    @property
    def n_chains(self) -> int:
        return len(self.points)


def _snapshot_steps(n_outer, snapshot_every):
    if snapshot_every < 1:
        raise ValueError("snapshot cadence must be >= 1")
    ks = list(range(0, n_outer + 1, snapshot_every))
    if ks[-1] != n_outer:
        ks.append(n_outer)
    return ks


def run_chain(x0, operator_factory: Callable, spec: SamplingSpec, n_outer: int,
              snapshot_every: int = 1, rng: Optional[np.random.Generator] = None,
              chain_id: int = 0, progress: Optional[Callable] = None) -> Trajectory:
    """Run one chain for ``n_outer`` updates.

    ``operator_factory(batch)`` returns a callable ``T(x)``. The chain only
    passes the current point and the freshly drawn batch to it. A
    non-finite iterate stops the chain; the returned trajectory is then
    truncated and carries the reason in ``aborted``.
    """
    if rng is None:
        rng = chain_rng(spec.seed, chain_id, STREAM_BATCH)
    state = ChainState(x0, 0, rng)
    wanted = set(_snapshot_steps(int(n_outer), int(snapshot_every)))
    records = [(0, state.x.copy(), float("nan"))]
    steps = np.full(int(n_outer), np.nan)
    aborted = None
    interrupted = False
    for k in range(1, int(n_outer) + 1):
        try:
            batch = draw_batch(spec, state.rng_stream)
            T = operator_factory(batch)
            with np.errstate(over="raise", invalid="raise"):
                x_new = np.asarray(T(state.x), dtype=float)
            if not np.all(np.isfinite(x_new)):
                raise FloatingPointError("non-finite iterate")
        except (FloatingPointError, OverflowError, KeyboardInterrupt) as exc:
            interrupted = isinstance(exc, KeyboardInterrupt)
            aborted = f"chain {chain_id} {'interrupted' if interrupted else 'aborted'} at k={k}: {exc}"
            log.warning(aborted)
            steps = steps[: k - 1]
            if records[-1][0] != k - 1:
                records.append((k - 1, state.x.copy(), float(steps[-1]) if k > 1 else float("nan")))
            break
        step = float(np.linalg.norm(x_new - state.x))
        steps[k - 1] = step
        state.x = x_new
        state.outer_iteration_k = k
        if k in wanted:
            records.append((k, state.x.copy(), step))
        if progress is not None:
            progress(chain_id, k)
    return Trajectory(records, steps, aborted, interrupted)


def delta_initializer(x0) -> Callable:
    x0 = np.array(x0, dtype=float)
    return lambda rng: x0.copy()


def box_initializer(lo, hi, dim: int) -> Callable:
    """Uniform initial points in the box ``[lo, hi]^dim``."""
    return lambda rng: rng.uniform(lo, hi, size=dim)


def run_ensemble(mu0_sampler: Callable, n_chains: int, operator_factory: Callable,
                 spec: SamplingSpec, n_outer: int, snapshot_every: int = 1,
                 threads: int = 1, progress: Optional[Callable] = None):
    """Run ``n_chains`` independent chains and collect ensemble snapshots.

    Chain ``c`` draws its initial point from ``mu0_sampler(rng)`` with its
    own init stream and its batches from its own batch stream. Returns
    ``(snapshots, trajectories)``; an aborted chain drops out of later
    snapshots without stopping the others.
    """
    if n_chains < 1:
        raise ValueError("need at least one chain")

    def one(c):
        x0 = np.asarray(mu0_sampler(chain_rng(spec.seed, c, STREAM_INIT)), dtype=float)
        return run_chain(x0, operator_factory, spec, n_outer, snapshot_every,
                         rng=chain_rng(spec.seed, c, STREAM_BATCH), chain_id=c, progress=progress)

    if threads > 1 and n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(one, range(n_chains)))
    else:
        trajs = []
        for c in range(n_chains):
            trajs.append(one(c))
            if trajs[-1].interrupted:
                break
    return collect_snapshots(trajs, n_outer, snapshot_every), trajs


def collect_snapshots(trajs, n_outer: int, snapshot_every: int = 1) -> list:
    """Group chain records into one :class:`EnsembleSnapshot` per recorded ``k``."""
    snapshots = []
    for k in _snapshot_steps(int(n_outer), int(snapshot_every)):
        pts, norms, ids = [], [], []
        for c, tr in enumerate(trajs):
            rec = [r for r in tr.records if r[0] == k]
            if rec:
                pts.append(rec[0][1])
                norms.append(rec[0][2])
                ids.append(c)
        if pts:
            snapshots.append(EnsembleSnapshot(k, np.array(pts), np.array(norms), np.array(ids)))
    return snapshots
