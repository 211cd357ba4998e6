"""Experiment configuration stored as a JSON file.

A :class:`RunConfig` fully determines a dataset generation and a run.
Unknown keys and invalid values raise :class:`ConfigError` naming the
offending field. ``RunConfig.from_dict(cfg.to_dict()) == cfg`` for every
valid config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

__all__ = ["ConfigError", "GenerationSpec", "AffineSpec", "InitSpec", "RunConfig",
           "load_config", "save_config", "config_hash"]


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _check(cond, name, message):
    if not cond:
        raise ConfigError(name, message)


def _from_dict(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(prefix, "expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}" if prefix else unknown[0], "unknown field")
    return d


@dataclass(frozen=True)
class GenerationSpec:
    """Synthetic dataset parameters (ground truth, detector, photon rate)."""

    n_images: int = 1000
    n_balls: int = 10
    radius: float = 1.0
    min_separation: float = 0.35
    sigma: float = 0.519
    target_mean_photons: float = 15.0
    n_u: int = 32
    n_v: int = 32
    k_max: float = 0.5
    truth_seed: Optional[int] = None
    scale_sample_size: int = 256

    def validate(self, p="generation"):
        _check(isinstance(self.n_images, int) and self.n_images >= 1, f"{p}.n_images", "must be an integer >= 1")
        _check(isinstance(self.n_balls, int) and self.n_balls >= 1, f"{p}.n_balls", "must be an integer >= 1")
        _check(self.radius > 0, f"{p}.radius", "must be positive")
        _check(self.min_separation >= 0, f"{p}.min_separation", "must be nonnegative")
        _check(self.sigma > 0, f"{p}.sigma", "must be positive")
        _check(self.target_mean_photons >= 0, f"{p}.target_mean_photons", "must be nonnegative")
        for name in ("n_u", "n_v"):
            v = getattr(self, name)
            _check(isinstance(v, int) and v >= 1, f"{p}.{name}", "must be an integer >= 1")
        _check(self.k_max > 0, f"{p}.k_max", "must be positive")
        _check(self.truth_seed is None or (isinstance(self.truth_seed, int) and self.truth_seed >= 0),
               f"{p}.truth_seed", "must be null or a nonnegative integer")
        _check(isinstance(self.scale_sample_size, int) and self.scale_sample_size >= 1,
               f"{p}.scale_sample_size", "must be an integer >= 1")

    @classmethod
    def from_dict(cls, d, p="generation"):
        return cls(**_from_dict(cls, d, p))


@dataclass(frozen=True)
class AffineSpec:
    """Quadratic test problem ``g_i(x) = (x - x*)^T A_i (x - x*) / 2``.

    Every gradient step shares the fixed point ``x*``, so the problem is
    consistent and its operators carry proven certificates.
    """

    matrices: tuple
    fixed_point: tuple

    def validate(self, p="affine"):
        _check(len(self.fixed_point) >= 1, f"{p}.fixed_point", "must be non-empty")
        d = len(self.fixed_point)
        _check(len(self.matrices) >= 1, f"{p}.matrices", "need at least one matrix")
        for i, A in enumerate(self.matrices):
            ok = len(A) == d and all(len(row) == d for row in A)
            _check(ok, f"{p}.matrices[{i}]", f"must be {d}x{d}")
            sym = all(math.isclose(A[a][b], A[b][a], rel_tol=0, abs_tol=1e-12) for a in range(d) for b in range(d))
            _check(sym, f"{p}.matrices[{i}]", "must be symmetric")

    @classmethod
    def from_dict(cls, d, p="affine"):
        d = _from_dict(cls, d, p)
        try:
            mats = tuple(tuple(tuple(float(v) for v in row) for row in A) for A in d["matrices"])
            x = tuple(float(v) for v in d["fixed_point"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(p, f"needs numeric 'matrices' and 'fixed_point' ({exc})") from None
        return cls(mats, x)

    def to_dict(self):
        return {"matrices": [[list(row) for row in A] for A in self.matrices],
                "fixed_point": list(self.fixed_point)}


@dataclass(frozen=True)
class InitSpec:
    """Initial distribution: ``truth`` (point mass), ``point`` or uniform ``box``."""

    kind: str = "box"
    lo: float = -1.0
    hi: float = 1.0
    point: Optional[tuple] = None

    def validate(self, p="init"):
        _check(self.kind in ("truth", "point", "box"), f"{p}.kind", "must be 'truth', 'point' or 'box'")
        if self.kind == "box":
            _check(self.lo < self.hi, f"{p}.lo", "must be below hi")
        if self.kind == "point":
            _check(self.point is not None and len(self.point) >= 1, f"{p}.point", "required for kind 'point'")

    @classmethod
    def from_dict(cls, d, p="init"):
        d = dict(_from_dict(cls, d, p))
        if d.get("point") is not None:
            d["point"] = tuple(float(v) for v in d["point"])
        return cls(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["point"] = None if self.point is None else list(self.point)
        return d


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to generate data, run chains and diagnose them.

    ``step`` is one shared step or one step per term. ``box`` is
    ``[lo, hi]`` for a projection applied after every batch. ``psi_every``
    is the snapshot stride at which the fixed-point residual is estimated.
    """

    problem: str = "xfel"
    dataset: Optional[str] = "data.jsonl"
    generation: GenerationSpec = field(default_factory=GenerationSpec)
    affine: Optional[AffineSpec] = None
    init: InitSpec = field(default_factory=InitSpec)
    batch_size: int = 100
    q: int = 10
    r: int = 1
    step: Union[float, tuple] = 0.1
    n_outer: int = 500
    n_chains: int = 8
    n_rotations: int = 192
    rotation_seed: int = 0
    seed: int = 0
    snapshot_every: int = 10
    out: str = "run"
    full_grid_exponent: bool = False
    with_replacement: bool = False
    box: Optional[tuple] = None
    psi_resample: int = 1
    psi_every: int = 1
    threads: int = 1

    @property
    def n_terms(self) -> int:
        if self.problem == "affine":
            return len(self.affine.matrices)
        return self.generation.n_images

    def validate(self) -> "RunConfig":
        _check(self.problem in ("xfel", "affine"), "problem", "must be 'xfel' or 'affine'")
        self.init.validate()
        if self.problem == "affine":
            _check(self.affine is not None, "affine", "required when problem is 'affine'")
            self.affine.validate()
        else:
            _check(isinstance(self.dataset, str) and self.dataset, "dataset", "path required for problem 'xfel'")
            _check(self.init.kind != "point" or len(self.init.point) == 3 * self.generation.n_balls,
                   "init.point", f"must have {3 * self.generation.n_balls} coordinates")
        self.generation.validate()
        if self.problem == "affine":
            _check(self.init.kind != "truth", "init.kind", "'truth' is only defined for problem 'xfel'")
            _check(self.init.kind != "point" or len(self.init.point) == len(self.affine.fixed_point),
                   "init.point", "dimension must match the fixed point")
        for name in ("q", "r", "n_chains", "n_rotations", "snapshot_every", "psi_resample", "psi_every", "threads"):
            v = getattr(self, name)
            _check(isinstance(v, int) and not isinstance(v, bool) and v >= 1, name, "must be an integer >= 1")
        for name in ("n_outer", "rotation_seed"):
            v = getattr(self, name)
            _check(isinstance(v, int) and not isinstance(v, bool) and v >= 0, name, "must be an integer >= 0")
        _check(isinstance(self.seed, int) and 0 <= self.seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
        M = self.n_terms
        _check(isinstance(self.batch_size, int) and 1 <= self.batch_size <= M, "batch_size",
               f"must be an integer in [1, M={M}]")
        steps = self.step if isinstance(self.step, tuple) else (self.step,)
        _check(all(isinstance(t, (int, float)) and t > 0 and math.isfinite(t) for t in steps), "step",
               "steps must be positive and finite")
        _check(not isinstance(self.step, tuple) or len(self.step) == M, "step", f"per-term steps need {M} entries")
        if self.box is not None:
            _check(len(self.box) == 2 and self.box[0] <= self.box[1], "box", "must be [lo, hi] with lo <= hi")
        _check(isinstance(self.out, str) and self.out, "out", "must be a non-empty path")
        for name in ("full_grid_exponent", "with_replacement"):
            _check(isinstance(getattr(self, name), bool), name, "must be true or false")
        return self

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "generation":
                v = dataclasses.asdict(v)
            elif f.name in ("affine", "init"):
                v = None if v is None else v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        d = dict(_from_dict(cls, d, ""))
        if "generation" in d:
            d["generation"] = GenerationSpec.from_dict(d["generation"])
        if d.get("affine") is not None:
            d["affine"] = AffineSpec.from_dict(d["affine"])
        if "init" in d:
            d["init"] = InitSpec.from_dict(d["init"])
        if isinstance(d.get("step"), list):
            d["step"] = tuple(d["step"])
        if d.get("box") is not None:
            _check(isinstance(d["box"], (list, tuple)), "box", "must be [lo, hi]")
            d["box"] = tuple(float(v) for v in d["box"])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None
        return cfg.validate()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.dumps())


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.dumps().encode("utf-8")).hexdigest()
