import math
import warnings
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfixfel.operators import (ALPHA_MAX, AafneCertificate, BatchOperator, CertificationError, ProxTerm,
                               SmoothTerm, TermRegistry, apply_batch_operator, average_certificates,
                               certify_batch, convex_gd_certificate, estimate_constants,
                               forward_backward_certificate, gd_certificate, gd_step_interval, linear_rate,
                               linear_rate_window, make_operator_factory, power_certificate,
                               transport_discrepancy, transport_discrepancy_expanded,
                               verify_aafne_empirically)


def quadratic_registry(A_list, b_list=None, alpha=0.5, convex=True):
    """Terms g_j(x) = x^T A_j x / 2 - b_j^T x with exact bounds."""
    terms = []
    for j, A in enumerate(A_list):
        A = np.asarray(A, dtype=float)
        b = np.zeros(len(A)) if b_list is None else np.asarray(b_list[j], dtype=float)
        ev = np.linalg.eigvalsh(A)
        terms.append(SmoothTerm(gradient_fn=lambda x, A=A, b=b: A @ x - b,
                                value_fn=lambda x, A=A, b=b: 0.5 * x @ A @ x - b @ x,
                                lipschitz_L=float(np.abs(ev).max()), hypomono_tau=float(max(0.0, -ev.min())),
                                alpha=alpha, convex=convex))
    return TermRegistry(terms)


# ---------------------------------------------------------------------------
# step interval and gradient-step certificates


def test_step_interval_convex_case():
    assert gd_step_interval(1.0, 0.0, 0.5) == (0.0, 0.5)


def test_step_interval_hypomonotone_matches_high_precision():
    getcontext().prec = 50
    expected = (Decimal(5).sqrt() - 1) / 8
    _, tmax = gd_step_interval(2.0, 1.0, 0.5)
    assert abs(Decimal(tmax) - expected) < Decimal("1e-16")
    assert tmax == pytest.approx(0.154508, abs=1e-6)


def test_step_interval_alpha_to_one():
    _, tmax = gd_step_interval(1.0, 0.0, 1 - 1e-12)
    assert tmax == pytest.approx(1.0, abs=1e-11)
    # the convex-case bound 2 alpha / L is weaker
    assert tmax < 2 * (1 - 1e-12) / 1.0


@pytest.mark.parametrize("args", [(0.0, 0.0, 0.5), (-1.0, 0.0, 0.5), (1.0, -0.1, 0.5), (1.0, 0.0, 1.0),
                                  (1.0, 0.0, 0.0), (np.nan, 0.0, 0.5), (1.0, np.inf, 0.5)])
def test_step_interval_domain_errors(args):
    with pytest.raises(ValueError):
        gd_step_interval(*args)


def test_gd_certificate_examples():
    assert gd_certificate(1.0, 0.0, 0.5, 0.1).epsilon == pytest.approx(0.02, rel=1e-12)
    assert gd_certificate(2.0, 1.0, 0.5, 0.1).epsilon == pytest.approx(0.28, rel=1e-12)
    assert gd_certificate(1.0, 0.0, 0.5, 1e-9).epsilon < 1e-17


def test_gd_certificate_rejects_step_with_interval():
    with pytest.raises(CertificationError) as info:
        gd_certificate(1.0, 0.0, 0.5, 0.6)
    assert info.value.interval == (0.0, 0.5)


@settings(max_examples=200, deadline=None)
@given(L=st.floats(0.01, 100), tau=st.floats(0, 100), alpha=st.floats(0.01, 0.99))
def test_step_interval_tightness(L, tau, alpha):
    _, tmax = gd_step_interval(L, tau, alpha)
    delta = 1e-9 * tmax
    assert gd_certificate(L, tau, alpha, tmax - delta).epsilon < 1.0
    with pytest.raises(CertificationError):
        gd_certificate(L, tau, alpha, tmax + delta)


def test_convex_certificate():
    c = convex_gd_certificate(1.0, 0.5, 0.9)
    assert (c.alpha, c.epsilon) == (0.5, 0.0)
    with pytest.raises(CertificationError):
        convex_gd_certificate(1.0, 0.5, 1.0)


def test_certificate_type_invariants():
    with pytest.raises(ValueError):
        AafneCertificate(1.0, 0.0)
    with pytest.raises(ValueError):
        AafneCertificate(0.5, -1e-3)
    assert not AafneCertificate(0.5, 1.0).admissible
    assert AafneCertificate(0.5, 1.0).label == "no convergence guarantee"


# ---------------------------------------------------------------------------
# calculus


def test_average_examples():
    c = gd_certificate(1.0, 0.0, 0.5, 0.1)
    assert average_certificates([c]) is c
    two = average_certificates([c, c])
    assert (two.alpha, two.epsilon) == (0.5, pytest.approx(0.02, rel=1e-12))
    mixed = average_certificates([gd_certificate(1, 0, 0.5, 0.1), gd_certificate(2, 0, 0.5, 0.1)])
    assert mixed.alpha == 0.5
    assert mixed.epsilon == pytest.approx(0.05, rel=1e-12)


def test_average_recomputes_at_common_alpha():
    a = gd_certificate(1.0, 0.0, 0.25, 0.1)  # eps = 0.04 at alpha 1/4
    b = gd_certificate(1.0, 0.0, 0.5, 0.1)   # eps = 0.02 at alpha 1/2
    avg = average_certificates([a, b])
    assert avg.alpha == 0.5
    assert avg.epsilon == pytest.approx(0.02, rel=1e-12)


def test_average_empty_errors():
    with pytest.raises(ValueError):
        average_certificates([])


def test_power_examples():
    c = AafneCertificate(0.5, 0.02)
    assert power_certificate(c, 1) == c
    p = power_certificate(c, 10)
    assert p.epsilon == pytest.approx(1.02 ** 10 - 1, rel=1e-12)
    assert p.epsilon == pytest.approx(0.21899, abs=1e-5)
    assert p.alpha == pytest.approx(10 / 11, rel=1e-12)
    bad = power_certificate(AafneCertificate(0.5, 0.1), 10)
    assert bad.epsilon == pytest.approx(1.5937, abs=1e-4)
    assert not bad.admissible
    with pytest.raises(ValueError):
        power_certificate(c, 0)


@settings(max_examples=100, deadline=None)
@given(eps=st.floats(1e-6, 0.5), alpha=st.floats(0.05, 0.95), q=st.integers(1, 30))
def test_power_monotone_in_q(eps, alpha, q):
    c = AafneCertificate(alpha, eps)
    assert power_certificate(c, q + 1).epsilon > power_certificate(c, q).epsilon
    assert power_certificate(c, 1).epsilon == eps


def test_forward_backward_identity():
    c = AafneCertificate(10 / 11, 0.21899)
    assert forward_backward_certificate([], c, 0, 1) is c


def test_forward_backward_clamps_alpha():
    c = power_certificate(AafneCertificate(0.5, 0.02), 10)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        fb = forward_backward_certificate([0.0], c, 1, 1)
    assert any("clamped" in str(x.message) for x in w)
    assert fb.epsilon == pytest.approx(c.epsilon, rel=1e-12)
    assert fb.raw_alpha == pytest.approx(2 / (1 + 10 / 11), rel=1e-12)
    assert fb.raw_alpha == pytest.approx(1.04762, abs=1e-5)
    assert fb.alpha == ALPHA_MAX


def test_forward_backward_violation_with_outer_power():
    with pytest.warns(RuntimeWarning, match="clamped"):
        fb = forward_backward_certificate([0.1], AafneCertificate(0.5, 0.0), 1, 2)
    assert fb.epsilon == pytest.approx(0.21, rel=1e-12)


def test_forward_backward_errors():
    c = AafneCertificate(0.5, 0.0)
    with pytest.raises(ValueError):
        forward_backward_certificate([0.1], c, 1, 0)
    with pytest.raises(ValueError):
        forward_backward_certificate([0.1], c, 2, 1)


def test_linear_rate_examples():
    c0 = AafneCertificate(0.5, 0.0)
    assert linear_rate(c0, 1.0) == 0.0
    assert linear_rate(c0, 2.0) == pytest.approx(math.sqrt(0.75), rel=1e-12)
    assert linear_rate(c0, 2.0) == pytest.approx(0.86603, abs=1e-5)
    c = linear_rate(AafneCertificate(0.5, 0.02), 1.01)
    assert c == pytest.approx(math.sqrt(1.02 - 1 / 1.0201), rel=1e-12)
    assert c == pytest.approx(0.19925, abs=1e-4)


def test_linear_rate_window_errors():
    cert = AafneCertificate(0.5, 0.02)
    lo, hi = linear_rate_window(cert)
    assert hi == pytest.approx(math.sqrt(0.5 / (0.5 * 0.02)))
    with pytest.raises(ValueError):
        linear_rate(cert, 0.5 * lo)
    with pytest.raises(ValueError):
        linear_rate(cert, hi)


# ---------------------------------------------------------------------------
# batch operators


def test_identity_registry_leaves_point():
    reg = TermRegistry([SmoothTerm(lambda x: np.zeros_like(x), 0.0, 0.0)])
    op = BatchOperator.build(reg, [0], 0.1, certify=False)
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(op(x), x)


def test_single_quadratic_step_and_power():
    reg = quadratic_registry([np.eye(3)])
    x = np.array([1.0, -2.0, 0.5])
    op1 = BatchOperator.build(reg, [0], 0.1)
    np.testing.assert_allclose(op1(x), 0.9 * x, rtol=1e-15)
    op10 = BatchOperator.build(reg, [0], 0.1, q=10)
    np.testing.assert_allclose(op10(x), 0.9 ** 10 * x, rtol=1e-13)
    assert 0.9 ** 10 == pytest.approx(0.34868, abs=1e-5)


def test_q1_r1_is_one_averaged_gradient_step(rng):
    A = [rng.normal(size=(4, 4)) for _ in range(3)]
    A = [a @ a.T for a in A]
    b = [rng.normal(size=4) for _ in range(3)]
    reg = quadratic_registry(A, b)
    x = rng.normal(size=4)
    op = BatchOperator.build(reg, [2, 0, 1], 0.01)
    expected = np.mean([x - 0.01 * (A[j] @ x - b[j]) for j in range(3)], axis=0)
    np.testing.assert_allclose(op(x), expected, rtol=1e-14)


def test_matrix_power_closed_form(rng):
    A = [rng.normal(size=(5, 5)) for _ in range(2)]
    A = [a @ a.T / 5 for a in A]
    reg = quadratic_registry(A)
    t, q, r = 0.05, 4, 3
    op = BatchOperator.build(reg, [0, 1], t, q=q, r=r, certify=False)
    G = np.eye(5) - t * (A[0] + A[1]) / 2
    x = rng.normal(size=5)
    expected = np.linalg.matrix_power(G, q * r) @ x
    np.testing.assert_allclose(op(x), expected, rtol=1e-12)


def test_prox_terms_applied_in_ascending_order():
    # projections onto two different lines through the origin do not commute
    def proj(u):
        u = np.asarray(u, dtype=float) / np.linalg.norm(u)
        return lambda x, t: (x @ u) * u
    reg = TermRegistry([ProxTerm(proj([1.0, 0.0])), ProxTerm(proj([1.0, 1.0]))])
    op = BatchOperator.build(reg, [1, 0], 1.0, certify=False)
    x = np.array([0.0, 2.0])
    # first onto the x-axis (index 0), then onto the diagonal (index 1)
    np.testing.assert_allclose(op(x), [0.0, 0.0], atol=1e-15)
    op2 = BatchOperator.build(reg, [1], 1.0, certify=False)
    np.testing.assert_allclose(op2(x), [1.0, 1.0])


def test_projector_resolvent_idempotent():
    from rfixfel.xfel import projector_C0
    term = ProxTerm(lambda x, t: projector_C0(x, (-1.0, 1.0)))
    x = np.array([3.0, -0.2, -7.0])
    once = term.resolvent_fn(x, 0.5)
    assert np.array_equal(term.resolvent_fn(once, 0.5), once)


def test_build_requires_bounds_unless_opted_out():
    reg = TermRegistry([SmoothTerm(lambda x: x)])
    with pytest.raises(CertificationError):
        BatchOperator.build(reg, [0], 0.1)
    op = BatchOperator.build(reg, [0], 0.1, certify=False)
    assert op.certificate is None and op.label == "uncertified"


def test_build_rejects_step_outside_interval():
    reg = quadratic_registry([np.eye(2)], convex=False)
    with pytest.raises(CertificationError):
        BatchOperator.build(reg, [0], 0.6)


def test_certificate_of_forward_backward_batch():
    reg = TermRegistry([SmoothTerm(lambda x: x, 1.0, 0.0), ProxTerm(lambda x, t: x, 0.1)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        op = BatchOperator.build(reg, [0, 1], 0.1, q=10, r=2)
    gd = power_certificate(gd_certificate(1.0, 0.0, 0.5, 0.1), 10)
    assert op.certificate.epsilon == pytest.approx((1.1 * (1 + gd.epsilon)) ** 2 - 1, rel=1e-12)


def test_empirical_terms_yield_empirical_certificate():
    reg = TermRegistry([SmoothTerm(lambda x: x, 1.0, 0.0, source="empirical")])
    cert = certify_batch(reg, (0,), (), {0: 0.1})
    assert cert.source == "empirical"
    assert cert.label == "empirical"


def test_nonfinite_gradient_names_term():
    reg = TermRegistry([SmoothTerm(lambda x: x), SmoothTerm(lambda x: x * np.nan)])
    op = BatchOperator.build(reg, [0, 1], 0.1, certify=False)
    with pytest.raises(FloatingPointError, match="term 1"):
        apply_batch_operator(op, np.ones(2), reg)


def test_per_term_steps_and_factory(rng):
    reg = quadratic_registry([np.eye(2), 2 * np.eye(2)])
    factory = make_operator_factory(reg, {0: 0.1, 1: 0.2})
    x = rng.normal(size=2)
    out = factory(np.array([0, 1]))(x)
    np.testing.assert_allclose(out, ((1 - 0.1) * x + (1 - 0.4) * x) / 2, rtol=1e-15)


def test_gradient_sum_is_bit_reproducible(rng):
    A = [np.diag(rng.uniform(0.1, 1, 6)) for _ in range(20)]
    reg = quadratic_registry(A)
    x = rng.normal(size=6)
    a = reg.weighted_gradient_sum(np.arange(20), x, 0.1)
    b = reg.weighted_gradient_sum(np.arange(20), x.copy(), 0.1)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# empirical checks


def _pairs(rng, dim, scale=3.0):
    return lambda: (rng.normal(scale=scale, size=dim), rng.normal(scale=scale, size=dim))


def test_verify_identity_and_contraction(rng):
    cert = AafneCertificate(0.5, 0.0)
    assert verify_aafne_empirically(lambda x: x, cert, _pairs(rng, 3), 200)["violations_found"] == 0
    rep = verify_aafne_empirically(lambda x: 0.9 * x, cert, _pairs(rng, 3), 200)
    assert rep["violations_found"] == 0
    # closed form margin: 0.99 d^2 - 0.81 d^2
    assert rep["worst_margin"] == pytest.approx(0.18, rel=1e-9)


def test_verify_expansive_map_fails_everywhere(rng):
    rep = verify_aafne_empirically(lambda x: 2.0 * x, AafneCertificate(0.5, 0.0), _pairs(rng, 3), 100)
    assert rep["violations_found"] == 100


def test_convex_quadratic_is_alpha_fne(rng):
    M = rng.normal(size=(6, 6))
    A = M @ M.T
    L = float(np.linalg.eigvalsh(A).max())
    alpha = 0.5
    t = 0.9 * (2 * alpha / L) * 0.5
    cert = convex_gd_certificate(L, alpha, t)
    rep = verify_aafne_empirically(lambda x: x - t * A @ x, cert, _pairs(rng, 6), 10_000)
    assert rep["violations_found"] == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=12, max_size=12))
def test_transport_discrepancy_forms_agree(v):
    x, x0, Fx, Fx0 = (np.array(v[i:i + 3]) for i in range(0, 12, 3))
    direct = transport_discrepancy(x, x0, Fx, Fx0)
    expanded = transport_discrepancy_expanded(x, x0, Fx, Fx0)
    scale = max(1.0, sum(float(np.dot(a, a)) for a in (x, x0, Fx, Fx0)))
    assert abs(direct - expanded) <= 1e-12 * scale


def test_estimate_constants_quadratic(rng):
    A = np.diag([3.0, 1.0, 0.5])
    L, tau = estimate_constants(lambda x: A @ x, _pairs(rng, 3), 2000)
    assert L <= 3.0 + 1e-12 and L > 2.5
    assert tau == 0.0
    L2, tau2 = estimate_constants(lambda x: -A @ x, _pairs(rng, 3), 2000)
    assert tau2 <= 3.0 + 1e-12 and tau2 > 2.5
