"""Operator blocks and the certificate calculus for almost alpha-firmly
nonexpansive (a-alpha-fne) mappings.

A mapping ``F`` is a-alpha-fne with violation ``eps`` on a set ``G`` when

    |Fx - Fy|^2 <= (1 + eps)|x - y|^2 - (1 - alpha)/alpha * psi(x, y)

for all ``x, y`` in ``G``, where ``psi = |(x - Fx) - (y - Fy)|^2`` is the
transport discrepancy. Gradient steps, their averages and powers, and
compositions with resolvents each have closed-form certificates; this
module computes them and builds the per-batch mappings

    T_I = ( prod_{prox j in I} J_j  o  (mean_{smooth j in I} (Id - t_j grad g_j))^q )^r
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "ALPHA_MAX",
    "AafneCertificate",
    "SmoothTerm",
    "ProxTerm",
    "TermRegistry",
    "BatchOperator",
    "CertificationError",
    "gd_step_interval",
    "gd_certificate",
    "convex_gd_certificate",
    "average_certificates",
    "power_certificate",
    "forward_backward_certificate",
    "certify_batch",
    "apply_batch_operator",
    "linear_rate",
    "linear_rate_window",
    "transport_discrepancy",
    "transport_discrepancy_expanded",
    "verify_aafne_empirically",
    "estimate_constants",
    "make_operator_factory",
]

ALPHA_MAX = 1.0 - 1e-6
REL_TOL = 1e-12


class CertificationError(ValueError):
    """A step size falls outside the interval that yields a certificate."""

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


def _check_finite(**values):
    for name, v in values.items():
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class AafneCertificate:
    """Constant ``alpha`` in (0, 1) and violation ``epsilon >= 0``.

    ``source`` is ``"proven"`` when the constants behind the certificate are
    known bounds and ``"empirical"`` when they were estimated from samples.
    ``gd_triple`` keeps ``(L, tau, t)`` for single gradient-step
    certificates so averages can recompute the violation at a larger alpha.
    ``raw_alpha`` records an out-of-range composition constant before
    clamping.
    """

    alpha: float
    epsilon: float
    source: str = "proven"
    gd_triple: Optional[tuple] = None
    raw_alpha: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not (self.epsilon >= 0.0) or not np.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be finite and nonnegative, got {self.epsilon}")

    @property
    def admissible(self) -> bool:
        """True when the violation is below one, as convergence theory requires."""
        return self.epsilon < 1.0

    @property
    def label(self) -> str:
        if not self.admissible:
            return "no convergence guarantee"
        return self.source

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "epsilon": self.epsilon, "source": self.source,
                "admissible": self.admissible, "raw_alpha": self.raw_alpha}


def gd_step_interval(L: float, tau: float, alpha: float) -> tuple[float, float]:
    """Open interval ``(0, t_max)`` of steps giving an a-alpha-fne gradient step.

    ``t_max = alpha * (sqrt(tau^2 + L^2) - tau) / L^2``.
    """
    _check_finite(L=L, tau=tau, alpha=alpha)
    if L <= 0 or tau < 0 or not (0 < alpha < 1):
        raise ValueError("need L > 0, tau >= 0 and 0 < alpha < 1")
    return 0.0, alpha * (math.hypot(tau, L) - tau) / L ** 2


def gd_certificate(L: float, tau: float, alpha: float, t: float) -> AafneCertificate:
    """Certificate of ``Id - t grad g`` for L-Lipschitz, tau-hypomonotone gradients.

    Violation ``2 t tau + t^2 L^2 / alpha``.
    """
    lo, hi = gd_step_interval(L, tau, alpha)
    _check_finite(t=t)
    if not (lo < t < hi):
        raise CertificationError(f"step {t} outside admissible interval ({lo}, {hi})", (lo, hi))
    eps = 2.0 * t * tau + t * t * L * L / alpha
    return AafneCertificate(alpha, eps, gd_triple=(float(L), float(tau), float(t)))


def convex_gd_certificate(L: float, alpha: float, t: float) -> AafneCertificate:
    """Certificate of ``Id - t grad g`` for convex ``g``: alpha-fne when ``t < 2 alpha / L``."""
    _check_finite(L=L, alpha=alpha, t=t)
    if L <= 0 or not (0 < alpha < 1):
        raise ValueError("need L > 0 and 0 < alpha < 1")
    if not (0 < t < 2.0 * alpha / L):
        raise CertificationError(f"step {t} outside (0, {2 * alpha / L})", (0.0, 2.0 * alpha / L))
    return AafneCertificate(alpha, 0.0)


def average_certificates(certs: Sequence[AafneCertificate]) -> AafneCertificate:
    """Certificate of the equally weighted average of the certified maps.

    The common constant is the largest ``alpha``; violations computed at a
    smaller ``alpha`` are recomputed at the common one from ``gd_triple``.
    """
    certs = list(certs)
    if not certs:
        raise ValueError("cannot average an empty list of certificates")
    if len(certs) == 1:
        return certs[0]
    abar = max(c.alpha for c in certs)
    eps = []
    for c in certs:
        if c.alpha == abar:
            eps.append(c.epsilon)
        elif c.gd_triple is not None:
            L, tau, t = c.gd_triple
            eps.append(2.0 * t * tau + t * t * L * L / abar)
        else:
            raise ValueError("certificate with smaller alpha lacks the (L, tau, t) needed to rescale it")
    source = "empirical" if any(c.source == "empirical" for c in certs) else "proven"
    return AafneCertificate(abar, math.fsum(eps) / len(eps), source=source)


def power_certificate(cert: AafneCertificate, q: int) -> AafneCertificate:
    """Certificate of the ``q``-fold composition of a certified map.

    Inadmissible results (violation >= 1) are returned, not rejected; check
    :attr:`AafneCertificate.admissible`.
    """
    if int(q) != q or q < 1:
        raise ValueError(f"power must be an integer >= 1, got {q}")
    if q == 1:
        return cert
    eps = (1.0 + cert.epsilon) ** q - 1.0
    alpha = q / (q - 1 + 1.0 / cert.alpha)
    return AafneCertificate(alpha, eps, source=cert.source)


def forward_backward_certificate(prox_taus: Sequence[float], gd_cert_q: AafneCertificate,
                                 n_prox: Optional[int] = None, r: int = 1) -> AafneCertificate:
    """Certificate of ``((prod J_j) o T_GD^q)^r``.

    Violation ``(prod (1 + tau_j) * (1 + eps_q))^r - 1``; constant
    ``r / (r - 1 + 1/a)`` with ``a = (n + 1) / (n + max(1/2, alpha_q))`` for
    ``n >= 1`` resolvents. That ``a`` exceeds one whenever ``alpha_q < 1``;
    it is clamped to :data:`ALPHA_MAX` with a warning and the raw value is
    kept in ``raw_alpha``. Without resolvents the composition has a single
    factor and ``a = alpha_q``.
    """
    if int(r) != r or r < 1:
        raise ValueError(f"outer power must be an integer >= 1, got {r}")
    taus = [float(t) for t in prox_taus]
    if any(t < 0 for t in taus):
        raise ValueError("resolvent constants must be nonnegative")
    n = len(taus) if n_prox is None else int(n_prox)
    if n != len(taus):
        raise ValueError("n_prox must equal the number of resolvent constants")
    if n == 0 and r == 1:
        return gd_cert_q
    prod = math.prod(1.0 + t for t in taus)
    eps = (prod * (1.0 + gd_cert_q.epsilon)) ** r - 1.0
    raw = None
    if n == 0:
        a_tilde = gd_cert_q.alpha
    else:
        a_tilde = (n + 1.0) / (n + max(0.5, gd_cert_q.alpha))
        if a_tilde >= 1.0:
            warnings.warn(f"composition constant {a_tilde:.6g} >= 1 clamped to {ALPHA_MAX}",
                          RuntimeWarning, stacklevel=2)
            raw = a_tilde
            a_tilde = ALPHA_MAX
    alpha = r / (r - 1 + 1.0 / a_tilde)
    if alpha >= 1.0:
        raw = alpha if raw is None else raw
        alpha = ALPHA_MAX
    return AafneCertificate(alpha, eps, source=gd_cert_q.source, raw_alpha=raw)


def linear_rate_window(cert: AafneCertificate) -> tuple[float, float]:
    """Admissible ``[lo, hi)`` for the linear gauge constant; ``hi`` is inf when eps = 0."""
    a, e = cert.alpha, cert.epsilon
    lo = math.sqrt((1 - a) / (a * (1 + e)))
    hi = math.inf if e == 0 else math.sqrt((1 - a) / (a * e))
    return lo, hi


def linear_rate(cert: AafneCertificate, r_gauge: float) -> float:
    """Contraction factor ``c = sqrt(1 + eps - (1 - alpha) / (r^2 alpha))`` of the W2 distance."""
    lo, hi = linear_rate_window(cert)
    if not (lo <= r_gauge < hi):
        raise ValueError(f"gauge constant {r_gauge} outside window [{lo}, {hi})")
    a, e = cert.alpha, cert.epsilon
    return math.sqrt(max(0.0, 1.0 + e - (1 - a) / (r_gauge ** 2 * a)))


def transport_discrepancy(x, x0, Fx, Fx0) -> float:
    """``|(x - Fx) - (x0 - Fx0)|^2``."""
    d = (np.asarray(x) - Fx) - (np.asarray(x0) - Fx0)
    return float(np.dot(d, d))


def transport_discrepancy_expanded(x, x0, Fx, Fx0) -> float:
    """The same quantity as the signed sum of six squared distances."""
    def sq(a, b):
        d = np.asarray(a) - np.asarray(b)
        return float(np.dot(d, d))
    return sq(Fx, x) + sq(Fx0, x0) + sq(Fx, Fx0) + sq(x, x0) - sq(Fx, x0) - sq(x, Fx0)


# ---------------------------------------------------------------------------
# terms and batch operators


@dataclass(frozen=True)
class SmoothTerm:
    """A smooth summand known through its gradient, with optional bounds.

    ``alpha`` is the constant used when certifying this term's step.
    ``source`` marks bounds as ``"proven"`` or ``"empirical"``.
    """

    gradient_fn: Callable[[np.ndarray], np.ndarray]
    lipschitz_L: Optional[float] = None
    hypomono_tau: Optional[float] = None
    value_fn: Optional[Callable[[np.ndarray], float]] = None
    alpha: float = 0.5
    convex: bool = False
    source: str = "proven"

    def __post_init__(self):
        for name in ("lipschitz_L", "hypomono_tau"):
            v = getattr(self, name)
            if v is not None and not (v >= 0):
                raise ValueError(f"{name} must be nonnegative")

    @property
    def certifiable(self) -> bool:
        return self.lipschitz_L is not None and self.hypomono_tau is not None and self.lipschitz_L > 0


@dataclass(frozen=True)
class ProxTerm:
    """A prox-friendly summand known through its resolvent ``J(x, t)``."""

    resolvent_fn: Callable[[np.ndarray, float], np.ndarray]
    submono_tau: float = 0.0

    def __post_init__(self):
        if not (self.submono_tau >= 0):
            raise ValueError("submono_tau must be nonnegative")


class TermRegistry:
    """Immutable, index-addressed collection of smooth and prox terms.

    Subclasses (or a registry built with :meth:`from_likelihood`) may provide
    a batched gradient that evaluates many smooth terms in one pass; the
    default sums per-term gradients in ascending index order.
    """

    def __init__(self, terms: Sequence, likelihood=None):
        self._terms = tuple(terms)
        for j, term in enumerate(self._terms):
            if not isinstance(term, (SmoothTerm, ProxTerm)):
                raise TypeError(f"term {j} is neither SmoothTerm nor ProxTerm")
        self._likelihood = likelihood

    @classmethod
    def from_likelihood(cls, likelihood) -> "TermRegistry":
        """Wrap a batched likelihood exposing ``grad_sum(indices, x)`` and ``values``."""
        def term(j):
            idx = np.array([j])
            return SmoothTerm(gradient_fn=lambda x, idx=idx: likelihood.grad_sum(idx, x),
                              value_fn=lambda x, idx=idx: float(likelihood.values(idx, x)[0]))
        return cls([term(j) for j in range(likelihood.n_terms)], likelihood=likelihood)

    def __len__(self):
        return len(self._terms)

    def __getitem__(self, j):
        return self._terms[j]

    @property
    def likelihood(self):
        return self._likelihood

    def is_prox(self, j) -> bool:
        return isinstance(self._terms[j], ProxTerm)

    def weighted_gradient_sum(self, indices, x, steps) -> np.ndarray:
        """``sum_j t_j grad g_j(x)`` over ``indices`` (ascending reduction order)."""
        indices = np.asarray(indices, dtype=np.int64)
        steps = np.broadcast_to(np.asarray(steps, dtype=float), indices.shape)
        if self._likelihood is not None and len(indices) and np.all(steps == steps[0]):
            return steps[0] * self._likelihood.grad_sum(indices, x)
        total = np.zeros_like(x, dtype=float)
        for j, t in zip(indices, steps):
            g = np.asarray(self._terms[j].gradient_fn(x), dtype=float)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient from term {int(j)}")
            total = total + t * g
        return total

    def value(self, indices, x) -> float:
        indices = np.asarray(indices, dtype=np.int64)
        if self._likelihood is not None:
            return float(np.sum(self._likelihood.values(indices, x)))
        return math.fsum(self._terms[j].value_fn(x) for j in indices)


@dataclass(frozen=True)
class BatchOperator:
    """The per-batch mapping built from smooth gradient steps and resolvents.

    Calling the operator applies it to a point using ``registry``.
    """

    smooth_indices: tuple
    prox_indices: tuple
    steps: Mapping[int, float]
    inner_power_q: int = 1
    outer_power_r: int = 1
    certificate: Optional[AafneCertificate] = None
    registry: Optional[TermRegistry] = field(default=None, repr=False, compare=False)

    def __call__(self, x):
        return apply_batch_operator(self, x, self.registry)

    @property
    def label(self) -> str:
        return "uncertified" if self.certificate is None else self.certificate.label

    @classmethod
    def build(cls, registry: TermRegistry, indices, steps, q: int = 1, r: int = 1,
              certify: bool = True, always_prox: Sequence[int] = ()) -> "BatchOperator":
        """Split ``indices`` into smooth and prox parts and certify the result.

        ``steps`` is a scalar or a mapping index -> step. With ``certify``
        the step of every smooth term must lie in its admissible interval
        and its bounds must be known; otherwise the operator is uncertified.
        ``always_prox`` lists resolvent indices applied in every batch.
        """
        if int(q) != q or q < 1 or int(r) != r or r < 1:
            raise ValueError("q and r must be integers >= 1")
        idx = sorted(set(int(i) for i in indices) | set(int(i) for i in always_prox))
        for j in idx:
            if not (0 <= j < len(registry)):
                raise IndexError(f"term index {j} not in registry")
        smooth = tuple(j for j in idx if not registry.is_prox(j))
        prox = tuple(j for j in idx if registry.is_prox(j))
        if isinstance(steps, Mapping):
            step_map = {j: float(steps[j]) for j in idx}
        else:
            step_map = {j: float(steps) for j in idx}
        if any(not (t > 0) for t in step_map.values()):
            raise ValueError("steps must be positive")
        cert = certify_batch(registry, smooth, prox, step_map, q, r) if certify else None
        return cls(smooth, prox, step_map, int(q), int(r), cert, registry)


def certify_batch(registry: TermRegistry, smooth, prox, steps, q=1, r=1) -> AafneCertificate:
    """Certificate of a batch operator from the terms' bounds."""
    terms = [registry[j] for j in smooth]
    missing = [j for j, term in zip(smooth, terms) if not term.certifiable]
    if missing:
        raise CertificationError(f"terms {missing} lack Lipschitz/hypomonotonicity bounds; "
                                 "pass certify=False or estimate them")
    if terms:
        abar = max(term.alpha for term in terms)
        certs = []
        for j, term in zip(smooth, terms):
            if term.convex:
                c = convex_gd_certificate(term.lipschitz_L, abar, steps[j])
            else:
                c = gd_certificate(term.lipschitz_L, term.hypomono_tau, abar, steps[j])
            if term.source == "empirical":
                c = AafneCertificate(c.alpha, c.epsilon, "empirical", c.gd_triple)
            certs.append(c)
        gd = power_certificate(average_certificates(certs), q)
    else:
        gd = AafneCertificate(0.5, 0.0)
    return forward_backward_certificate([registry[j].submono_tau for j in prox], gd, len(prox), r)


def apply_batch_operator(op: BatchOperator, x, problem: TermRegistry) -> np.ndarray:
    """Apply ``((prod J) o (mean (Id - t_j grad g_j))^q)^r`` to ``x``.

    Resolvents are applied in ascending index order.
    """
    x = np.array(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite input point")
    smooth = np.asarray(op.smooth_indices, dtype=np.int64)
    steps = np.array([op.steps[j] for j in op.smooth_indices], dtype=float)
    m = len(smooth)
    for _ in range(op.outer_power_r):
        if m:
            for _ in range(op.inner_power_q):
                x = x - problem.weighted_gradient_sum(smooth, x, steps) / m
                if not np.all(np.isfinite(x)):
                    raise FloatingPointError("gradient step produced a non-finite point")
        for j in op.prox_indices:
            x = np.asarray(problem[j].resolvent_fn(x, op.steps[j]), dtype=float)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"resolvent {j} produced a non-finite point")
    return x


def make_operator_factory(registry: TermRegistry, steps, q: int = 1, r: int = 1,
                          certify: bool = False, always_prox: Sequence[int] = ()):
    """Return ``batch indices -> BatchOperator`` for use by the chain runner."""
    def factory(indices):
        return BatchOperator.build(registry, indices, steps, q, r, certify, always_prox)
    return factory


# ---------------------------------------------------------------------------
# empirical checks


def verify_aafne_empirically(op: Callable, cert: AafneCertificate, sampler, n_pairs: int,
                             rtol: float = REL_TOL) -> dict:
    """Test the a-alpha-fne inequality on sampled point pairs.

    ``sampler()`` returns a pair ``(x, x0)``. A pair fails when the signed
    margin ``rhs - lhs`` is below ``-rtol * max(lhs, rhs, |x - x0|^2)``.
    Returns ``{"violations_found", "worst_margin", "n_pairs"}`` where the
    worst margin is normalized by ``|x - x0|^2``.
    """
    k = (1.0 - cert.alpha) / cert.alpha
    failures = 0
    worst = math.inf
    for _ in range(int(n_pairs)):
        x, x0 = sampler()
        x = np.asarray(x, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        Fx, Fx0 = np.asarray(op(x)), np.asarray(op(x0))
        d2 = float(np.dot(x - x0, x - x0))
        lhs = float(np.dot(Fx - Fx0, Fx - Fx0))
        rhs = (1.0 + cert.epsilon) * d2 - k * transport_discrepancy(x, x0, Fx, Fx0)
        margin = rhs - lhs
        if margin < -rtol * max(abs(lhs), abs(rhs), d2):
            failures += 1
        if d2 > 0:
            worst = min(worst, margin / d2)
    return {"violations_found": failures, "worst_margin": worst, "n_pairs": int(n_pairs)}


def estimate_constants(gradient_fn: Callable, sampler, n_pairs: int = 1000) -> tuple[float, float]:
    """Empirical ``(L, tau)`` of a gradient over pairs drawn by ``sampler()``.

    ``L`` is the largest observed ``|grad(x) - grad(y)| / |x - y|`` and
    ``tau`` the largest observed ``-<grad(x) - grad(y), x - y> / |x - y|^2``
    (floored at zero). These are lower estimates of the true bounds.
    """
    L = 0.0
    tau = 0.0
    for _ in range(int(n_pairs)):
        x, y = sampler()
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        d = x - y
        d2 = float(np.dot(d, d))
        if d2 == 0:
            continue
        g = np.asarray(gradient_fn(x)) - np.asarray(gradient_fn(y))
        L = max(L, math.sqrt(float(np.dot(g, g)) / d2))
        tau = max(tau, -float(np.dot(g, d)) / d2)
    return L, tau
