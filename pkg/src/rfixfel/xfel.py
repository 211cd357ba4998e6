"""Gaussian-ball density model and its rotation-averaged Poisson likelihood.

The density is a sum of unit-width Gaussian balls with common amplitude
``sigma``. Rotating the object by ``s`` moves the centers to ``R(s) x_i``;
the far field on the detector plane is the closed-form transform

    F_s(k) = sum_i sqrt(2 pi) sigma exp(-2 pi^2 |k|^2) exp(-2 pi i k . R(s) x_i)

which equals ``(2 pi)^-1`` times the 3-D Fourier transform
``int rho_s(z) exp(-2 pi i k.z) dz`` of the rotated density. The expected
photon count at a pixel is ``intensity_scale * pixel_area * |F_s(k)|^2``.

Two evaluation paths are provided. The pointwise functions
(:func:`field_hat`, :func:`per_rotation_loglik`,
:func:`image_negloglik_and_grad`) work directly on pixel coordinates and are
meant for auditing and tests. :class:`RotationAveragedLikelihood` evaluates
whole batches by exploiting the lattice structure of the detector: the
field on the full grid is ``A * (Eu @ Ev.T)`` for per-axis phase tables, so
every batch gradient is a handful of batched matrix products.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .rotations import RotationSet, quat_to_matrix

__all__ = [
    "DensityParams",
    "DetectorGrid",
    "Observation",
    "PhotonImage",
    "ForwardModel",
    "RotationAveragedLikelihood",
    "field_hat",
    "intensity",
    "per_rotation_loglik",
    "image_negloglik_and_grad",
    "make_smooth_terms",
    "projector_C0",
    "LOG_MIN_POSITIVE",
]

SQRT_2PI = np.sqrt(2.0 * np.pi)
LOG_MIN_POSITIVE = float(np.log(np.finfo(float).tiny))


@dataclass(frozen=True)
class DensityParams:
    """Ball centers (n_balls, 3) and the common amplitude ``sigma``."""

    centers: np.ndarray
    sigma: float = 0.519

    def __post_init__(self):
        c = np.array(self.centers, dtype=float).reshape(-1, 3)
        if len(c) < 1:
            raise ValueError("need at least one ball")
        if not np.all(np.isfinite(c)) or not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError("centers must be finite and sigma positive")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def n_balls(self) -> int:
        return len(self.centers)

    def flatten(self) -> np.ndarray:
        """Ball-major parameter vector of length ``3 * n_balls``."""
        return self.centers.reshape(-1).copy()

    @classmethod
    def from_vector(cls, x, sigma: float = 0.519) -> "DensityParams":
        return cls(np.asarray(x, dtype=float).reshape(-1, 3), sigma)


@dataclass(frozen=True)
class DetectorGrid:
    """Uniform pixel lattice on the plane z = 0 of reciprocal space.

    Pixel ``p = a * n_v + b`` has center ``(ku[a], kv[b], 0)``; the lattice
    covers ``[-k_max, k_max]`` along both in-plane axes.
    """

    n_u: int = 32
    n_v: int = 32
    k_max: float = 0.5

    def __post_init__(self):
        if self.n_u < 1 or self.n_v < 1 or not self.k_max > 0:
            raise ValueError("grid needs positive size and extent")

    @property
    def spacing_u(self) -> float:
        return 2.0 * self.k_max / self.n_u

    @property
    def spacing_v(self) -> float:
        return 2.0 * self.k_max / self.n_v

    @property
    def pixel_area(self) -> float:
        return self.spacing_u * self.spacing_v

    @property
    def n_pixels(self) -> int:
        return self.n_u * self.n_v

    @property
    def ku(self) -> np.ndarray:
        return -self.k_max + (np.arange(self.n_u) + 0.5) * self.spacing_u

    @property
    def kv(self) -> np.ndarray:
        return -self.k_max + (np.arange(self.n_v) + 0.5) * self.spacing_v

    @property
    def basis(self) -> np.ndarray:
        return np.eye(3)[:2]

    @property
    def normal(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def pixel_centers(self, pixels=None) -> np.ndarray:
        """Pixel centers in R^3, shape (n, 3); all pixels when ``pixels`` is None."""
        if pixels is None:
            pixels = np.arange(self.n_pixels)
        pixels = np.asarray(pixels, dtype=np.int64)
        a, b = np.divmod(pixels, self.n_v)
        k = np.zeros((len(pixels), 3))
        k[:, 0] = self.ku[a]
        k[:, 1] = self.kv[b]
        return k

    def to_dict(self) -> dict:
        return {"n_u": self.n_u, "n_v": self.n_v, "k_max": self.k_max}


@dataclass(frozen=True)
class Observation:
    """Photon counts of one image: sparse pixel indices and positive counts.

    This is all the likelihood ever sees of an image.
    """

    pixels: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.int64).reshape(-1)
        c = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if p.shape != c.shape:
            raise ValueError("pixels and counts must have equal length")
        if np.any(c <= 0):
            raise ValueError("stored counts must be strictly positive")
        if len(np.unique(p)) != len(p):
            raise ValueError("duplicate pixel index")
        order = np.argsort(p, kind="stable")
        p, c = p[order], c[order]
        p.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "pixels", p)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class PhotonImage:
    """An observation plus the rotation that generated it (audit only)."""

    index: int
    observation: Observation
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def pixels(self) -> np.ndarray:
        return self.observation.pixels

    @property
    def counts(self) -> np.ndarray:
        return self.observation.counts


@dataclass(frozen=True)
class ForwardModel:
    """Detector geometry plus the dataset-level intensity scale."""

    grid: DetectorGrid
    intensity_scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.intensity_scale) and self.intensity_scale >= 0):
            raise ValueError("intensity_scale must be finite and nonnegative")

    @property
    def count_factor(self) -> float:
        """Multiplier turning |F|^2 into an expected pixel count."""
        return self.intensity_scale * self.grid.pixel_area

    def expected_counts(self, params: DensityParams, rotation) -> np.ndarray:
        """Expected counts on every pixel, shape (n_pixels,)."""
        k = self.grid.pixel_centers()
        return self.count_factor * np.abs(field_hat(params, rotation, k)) ** 2


def _rotation_matrix(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=float)
    if r.shape == (3, 3):
        return r
    return quat_to_matrix(r)


def field_hat(params: DensityParams, rotation, k) -> np.ndarray:
    """Complex far-field amplitude at reciprocal-space point(s) ``k`` (..., 3)."""
    R = _rotation_matrix(rotation)
    k = np.asarray(k, dtype=float)
    y = params.centers @ R.T
    phase = -2.0 * np.pi * (k @ y.T)
    env = SQRT_2PI * params.sigma * np.exp(-2.0 * np.pi ** 2 * np.sum(k * k, axis=-1))
    return env * np.exp(1j * phase).sum(axis=-1)


def intensity(params: DensityParams, rotation, k, model: ForwardModel) -> np.ndarray:
    """Expected photon count at pixel centre(s) ``k`` (midpoint pixel rule)."""
    return model.count_factor * np.abs(field_hat(params, rotation, k)) ** 2


def _log_phi(phi):
    with np.errstate(divide="ignore"):
        logp = np.log(phi)
    bad = ~(logp > LOG_MIN_POSITIVE)
    if np.any(bad):
        warnings.warn("intensity underflow at a counted pixel; log clamped", RuntimeWarning, stacklevel=3)
        logp = np.where(bad, LOG_MIN_POSITIVE, logp)
    return logp


def per_rotation_loglik(obs: Observation, params: DensityParams, rotation, model: ForwardModel,
                        full_grid_exponent: bool = False) -> float:
    """Poisson log-likelihood of one image at one fixed orientation.

    The exponent ``-sum phi`` runs over the counted pixels only unless
    ``full_grid_exponent`` is set, in which case it runs over the whole grid.
    """
    if full_grid_exponent:
        exposure = float(model.expected_counts(params, rotation).sum())
    else:
        exposure = None
    if len(obs.pixels) == 0:
        return 0.0 if exposure is None else -exposure
    k = model.grid.pixel_centers(obs.pixels)
    phi = intensity(params, rotation, k, model)
    y = obs.counts.astype(float)
    if exposure is None:
        exposure = float(phi.sum())
    return float(np.sum(y * _log_phi(phi)) - exposure - np.sum(gammaln(y + 1.0)))


def image_negloglik_and_grad(obs: Observation, params: DensityParams, rotations: RotationSet,
                             model: ForwardModel, full_grid_exponent: bool = False,
                             rotated_k: str = "transpose"):
    """Rotation-averaged negative log-likelihood of one image and its gradient.

    Returns ``(value, grad)`` with ``grad`` of shape ``(3 * n_balls,)``.

    ``rotated_k`` selects the reciprocal-space factor in the derivative of
    the ball transform: ``"transpose"`` uses ``R(s)^T k`` (the chain rule on
    ``k . R(s) x_i``), ``"direct"`` uses ``R(s) k``. Only ``"transpose"`` is
    correct; the other exists so tests can show it disagrees with finite
    differences.
    """
    Rm = rotations.matrices
    c0 = model.count_factor
    y = obs.counts.astype(float)
    pix = obs.pixels if not full_grid_exponent else np.arange(model.grid.n_pixels)
    k = model.grid.pixel_centers(pix)
    env = SQRT_2PI * params.sigma * np.exp(-2.0 * np.pi ** 2 * np.sum(k * k, axis=1))
    Y = np.einsum("sab,nb->sna", Rm, params.centers)                  # (S, n, 3)
    B = env[None, :, None] * np.exp(-2j * np.pi * np.einsum("pa,sna->spn", k, Y))
    F = B.sum(axis=2)                                                 # (S, P)
    phi = c0 * np.abs(F) ** 2
    if full_grid_exponent:
        yfull = np.zeros(len(pix))
        yfull[obs.pixels] = y
        counted = np.zeros(len(pix), dtype=bool)
        counted[obs.pixels] = True
    else:
        yfull = y
        counted = np.ones(len(pix), dtype=bool)
    logp = np.zeros_like(phi)
    if np.any(counted):
        logp[:, counted] = _log_phi(phi[:, counted])
    ll = (yfull * logp).sum(axis=1) - phi.sum(axis=1) - np.sum(gammaln(y + 1.0))
    logw = np.log(rotations.weights)
    lse = logsumexp(ll + logw)
    value = float(-lse)
    post = np.exp(ll + logw - lse)                                    # (S,)
    safe = np.where(counted[None, :], phi, 1.0)
    coef = post[:, None] * (np.where(counted[None, :], yfull / safe, 0.0) - 1.0)  # (S, P)
    if rotated_k == "transpose":
        kr = np.einsum("sar,pa->spr", Rm, k)                          # R^T k
    elif rotated_k == "direct":
        kr = np.einsum("sra,pa->spr", Rm, k)                          # R k
    else:
        raise ValueError("rotated_k must be 'transpose' or 'direct'")
    # d phi / d x_ir = c0 * 2 Re[conj(F) * (-2 pi i) (R^T k)_r B_i] = 4 pi c0 Im[conj(F) B_i] (R^T k)_r
    dB = 4.0 * np.pi * c0 * np.imag(np.conj(F)[:, :, None] * B)      # (S, P, n)
    grad = -np.einsum("sp,spn,spr->nr", coef, dB, kr)
    if not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(np.einsum("sp,spn->sn", coef, dB)))
        s, i = bad[0] if len(bad) else (-1, -1)
        raise FloatingPointError(f"non-finite gradient at ball {i}, rotation node {s}")
    return value, grad.reshape(-1)


class _PackedImages:
    """Concatenated sparse counts of a list of observations."""

    def __init__(self, observations: Sequence[Observation]):
        self.n = len(observations)
        lengths = np.array([len(o.pixels) for o in observations], dtype=np.int64)
        self.lengths = lengths
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        if self.n:
            self.pixels = np.concatenate([o.pixels for o in observations]).astype(np.int64)
            self.counts = np.concatenate([o.counts for o in observations]).astype(float)
        else:
            self.pixels = np.zeros(0, np.int64)
            self.counts = np.zeros(0)
        self.log_factorial = np.array([np.sum(gammaln(o.counts + 1.0)) for o in observations])

    def select(self, indices):
        """Pixels, counts, owner (position within ``indices``) and per-image lengths."""
        indices = np.asarray(indices, dtype=np.int64)
        lengths = self.lengths[indices]
        starts = self.offsets[indices]
        total = int(lengths.sum())
        if total == 0:
            return np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64), lengths
        owner = np.repeat(np.arange(len(indices)), lengths)
        within = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        flat = np.repeat(starts, lengths) + within
        return self.pixels[flat], self.counts[flat], owner, lengths


def _segment_sum(values, lengths):
    """Sum columns of ``values`` (S, P) over consecutive segments of given lengths."""
    out = np.zeros((values.shape[0], len(lengths)))
    nz = lengths > 0
    if np.any(nz):
        starts = (np.cumsum(lengths) - lengths)[nz]
        out[:, nz] = np.add.reduceat(values, starts, axis=1)
    return out


class RotationAveragedLikelihood:
    """Batched negative log-likelihoods ``g_j`` of a photon-count dataset.

    Parameters
    ----------
    model : ForwardModel
        Detector grid and intensity scale shared with the data generator.
    rotations : RotationSet
        Quadrature for the average over orientations.
    observations : sequence of Observation
        One entry per image; index ``j`` in batches refers to this order.
    sigma : float
        Ball amplitude, held fixed during optimization.
    full_grid_exponent : bool
        Sum the Poisson exponent over the whole grid instead of only the
        counted pixels.
    """

    def __init__(self, model: ForwardModel, rotations: RotationSet,
                 observations: Sequence[Observation], sigma: float = 0.519,
                 full_grid_exponent: bool = False):
        self.model = model
        self.rotations = rotations
        self.sigma = float(sigma)
        self.full_grid_exponent = bool(full_grid_exponent)
        self.packed = _PackedImages(list(observations))
        g = model.grid
        self._ku = g.ku
        self._kv = g.kv
        self._env = SQRT_2PI * self.sigma * np.exp(
            -2.0 * np.pi ** 2 * (self._ku[:, None] ** 2 + self._kv[None, :] ** 2))
        self._logw = np.log(rotations.weights)

    def __len__(self):
        return self.packed.n

    @property
    def n_terms(self) -> int:
        return self.packed.n

    def _tables(self, x):
        X = np.asarray(x, dtype=float).reshape(-1, 3)
        Y = np.einsum("sab,nb->sna", self.rotations.matrices, X)           # (S, n, 3)
        Eu = np.exp(-2j * np.pi * self._ku[None, :, None] * Y[:, None, :, 0])  # (S, Nu, n)
        Ev = np.exp(-2j * np.pi * self._kv[None, :, None] * Y[:, None, :, 1])  # (S, Nv, n)
        F = self._env[None] * (Eu @ Ev.transpose(0, 2, 1))                  # (S, Nu, Nv)
        phi = self.model.count_factor * (F.real ** 2 + F.imag ** 2)
        return Eu, Ev, F, phi

    def expected_counts(self, x) -> np.ndarray:
        """Expected counts at every node and pixel, shape (S, n_pixels)."""
        return self._tables(x)[3].reshape(len(self.rotations), -1)

    def rotation_logliks(self, indices, x) -> np.ndarray:
        """Per-image, per-node Poisson log-likelihoods, shape (len(indices), S)."""
        return self._evaluate(indices, x, need_grad=False)[2]

    def values(self, indices, x) -> np.ndarray:
        """``g_j(x)`` for each ``j`` in ``indices``."""
        return self._evaluate(indices, x, need_grad=False)[0]

    def value_and_grad_sum(self, indices, x):
        """``sum_j g_j(x)`` and ``sum_j grad g_j(x)`` over ``indices``."""
        vals, grad, _ = self._evaluate(indices, x, need_grad=True)
        return float(vals.sum()), grad

    def grad_sum(self, indices, x) -> np.ndarray:
        return self._evaluate(indices, x, need_grad=True)[1]

    def _evaluate(self, indices, x, need_grad):
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        S = len(self.rotations)
        npix = self.model.grid.n_pixels
        Eu, Ev, F, phi = self._tables(x)
        phi_flat = phi.reshape(S, npix)
        pix, y, owner, lengths = self.packed.select(indices)
        m = len(indices)
        phi_sel = phi_flat[:, pix]                                           # (S, P)
        logp = _log_phi(phi_sel) if len(pix) else phi_sel
        ll = _segment_sum(y[None, :] * logp, lengths)                        # (S, m)
        if self.full_grid_exponent:
            ll -= phi_flat.sum(axis=1)[:, None]
        else:
            ll -= _segment_sum(phi_sel, lengths)
        ll -= self.packed.log_factorial[indices][None, :]
        a = ll.T + self._logw[None, :]                                       # (m, S)
        lse = logsumexp(a, axis=1)
        vals = -lse
        if not need_grad:
            return vals, None, ll.T
        post = np.exp(a - lse[:, None])                                      # (m, S)
        # weights on each (node, pixel) of d phi / d x
        if len(pix):
            ratio = y[None, :] / np.where(phi_sel > 0, phi_sel, np.finfo(float).tiny)
            coef = post.T[:, owner] * (ratio if self.full_grid_exponent else ratio - 1.0)
            flat = (np.arange(S)[:, None] * npix + pix[None, :]).ravel()
            W = np.bincount(flat, weights=coef.ravel(), minlength=S * npix).reshape(S, npix)
        else:
            W = np.zeros((S, npix))
        if self.full_grid_exponent:
            W -= post.sum(axis=0)[:, None]
        W = W.reshape(phi.shape)
        G = W * np.conj(F) * self._env[None]
        Hu = G @ Ev                                                          # (S, Nu, n)
        Hv = G @ (self._kv[None, :, None] * Ev)
        Su = np.einsum("a,san,san->sn", self._ku, Eu, Hu)
        Sv = np.einsum("san,san->sn", Eu, Hv)
        Rm = self.rotations.matrices
        scale = 4.0 * np.pi * self.model.count_factor
        grad = -scale * (np.einsum("sr,sn->nr", Rm[:, 0, :], Su.imag)
                         + np.einsum("sr,sn->nr", Rm[:, 1, :], Sv.imag))
        if not np.all(np.isfinite(grad)):
            i = int(np.argwhere(~np.all(np.isfinite(grad), axis=1))[0, 0])
            raise FloatingPointError(f"non-finite gradient at ball {i}")
        return vals, grad.reshape(-1), ll.T


def make_smooth_terms(dataset, rotations: RotationSet, full_grid_exponent: bool = False):
    """One :class:`~rfixfel.operators.SmoothTerm` per image of ``dataset``.

    ``dataset`` needs ``model`` (a :class:`ForwardModel`), ``sigma`` and
    ``images``. Lipschitz and hypomonotonicity bounds are left unknown. The
    returned registry also exposes the batched likelihood so operators can
    evaluate whole batches in one pass.
    """
    from .operators import TermRegistry

    grid = dataset.model.grid
    for img in dataset.images:
        if len(img.pixels) and (img.pixels.min() < 0 or img.pixels.max() >= grid.n_pixels):
            raise ValueError(f"image {img.index} does not fit the detector grid")
    lik = RotationAveragedLikelihood(dataset.model, rotations, [im.observation for im in dataset.images],
                                     sigma=dataset.sigma, full_grid_exponent=full_grid_exponent)
    return TermRegistry.from_likelihood(lik)


def projector_C0(x, box=None) -> np.ndarray:
    """Projector onto the constraint set: identity, or a clamp onto ``box = (lo, hi)``."""
    x = np.asarray(x, dtype=float)
    if box is None:
        return x.copy()
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), x.shape) for b in box)
    if np.any(lo > hi):
        raise ValueError("malformed box: lower bound exceeds upper bound")
    return np.clip(x, lo, hi)
