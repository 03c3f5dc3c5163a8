import numpy as np
import pytest

from robust_rnn import certificates
from robust_rnn.certificates import (EPSILON, CertifiedBundle, assemble_lmi,
                                     bisect_gamma, embed_cirnn, embed_lti,
                                     export_certificate, feasibility_margin,
                                     iqc_quadratic_form,
                                     lyap_discrete_identity)
from robust_rnn.models import (CiRnn, ImplicitParams, activation_apply,
                               init_feasible, simulate)
from robust_rnn.numerics import cholesky_logdet, sym

from helpers import (gamma_constraint_inverse_form, simulate_cirnn_recursion,
                     simulate_lti, star_constraint_inverse_form)
from test_models import random_theta


def zero_dynamics_star(n=2, q=2, m=1, p=1):
    theta = ImplicitParams(
        E=np.eye(n), F=np.zeros((n, n)), B1=np.zeros((n, q)),
        B2=np.zeros((n, m)), C1=np.zeros((p, n)), D11=np.zeros((p, q)),
        D12=np.zeros((p, m)), lam=np.ones(q), C2=np.zeros((q, n)),
        b=np.zeros(q), D22=np.zeros((q, m)))
    return CertifiedBundle(theta=theta, P=np.eye(n), kind="robust-star")


def test_assemble_zero_dynamics_star():
    bundle = zero_dynamics_star(n=2, q=2)
    M = assemble_lmi(bundle)
    expected = np.diag([1.0, 1.0, 2.0, 2.0, 1.0, 1.0])
    assert np.array_equal(M, expected)


def test_assemble_infeasible_by_construction():
    bundle = zero_dynamics_star(n=2, q=2)
    bundle = CertifiedBundle(theta=bundle.theta, P=3.0 * np.eye(2),
                             kind="robust-star")
    M = assemble_lmi(bundle)
    assert np.allclose(M[:2, :2], -np.eye(2))
    assert not cholesky_logdet(M).is_pd


def test_assemble_zero_dynamics_gamma():
    n = q = 2
    m = p = 1
    bundle = zero_dynamics_star(n, q, m, p)
    bundle = CertifiedBundle(theta=bundle.theta, P=np.eye(n),
                             kind="robust-gamma", gamma=3.0)
    M = assemble_lmi(bundle)
    expected = np.diag([1.0, 1.0, 2.0, 2.0, 3.0, 1.0, 1.0, 3.0])
    assert np.array_equal(M, expected)


def test_schur_equivalence_star_and_gamma():
    """PD verdict of the lifted LMI == PD verdict of the inverse-P form."""
    rng = np.random.default_rng(42)
    agree = 0
    feasible_count = 0
    total = 100
    for i in range(total):
        scale = rng.uniform(0.05, 1.2)  # small scale feasible, large infeasible
        th = random_theta(rng, n=3, q=4, m=2, p=2, scale=scale)
        P = np.eye(3) + 0.3 * sym(rng.standard_normal((3, 3)))
        if not cholesky_logdet(P).is_pd:
            P = P + 2.0 * np.eye(3)
        if i % 2 == 0:
            bundle = CertifiedBundle(theta=th, P=P, kind="robust-star")
            direct = star_constraint_inverse_form(th, P)
        else:
            g = rng.uniform(0.5, 5.0)
            bundle = CertifiedBundle(theta=th, P=P, kind="robust-gamma", gamma=g)
            direct = gamma_constraint_inverse_form(th, P, g)
        lifted_pd = cholesky_logdet(assemble_lmi(bundle)).is_pd
        direct_pd = cholesky_logdet(direct).is_pd
        agree += lifted_pd == direct_pd
        feasible_count += lifted_pd
    assert agree == total
    assert 10 <= feasible_count <= 90  # the draw really mixes both outcomes


def test_feasibility_margin_flags():
    bundle = zero_dynamics_star()
    rep = feasibility_margin(bundle)
    assert rep.feasible
    assert rep.lmi_margin >= 1.0 - EPSILON

    big_F = CertifiedBundle(
        theta=ImplicitParams(
            E=bundle.theta.E, F=1e6 * np.eye(2), B1=bundle.theta.B1,
            B2=bundle.theta.B2, C1=bundle.theta.C1, D11=bundle.theta.D11,
            D12=bundle.theta.D12, lam=bundle.theta.lam, C2=bundle.theta.C2,
            b=bundle.theta.b, D22=bundle.theta.D22),
        P=bundle.P, kind="robust-star")
    assert not feasibility_margin(big_F).feasible

    lam0 = bundle.theta.lam.copy()
    lam0[0] = 0.0
    degenerate = CertifiedBundle(
        theta=ImplicitParams(
            E=bundle.theta.E, F=bundle.theta.F, B1=bundle.theta.B1,
            B2=bundle.theta.B2, C1=bundle.theta.C1, D11=bundle.theta.D11,
            D12=bundle.theta.D12, lam=lam0, C2=bundle.theta.C2,
            b=bundle.theta.b, D22=bundle.theta.D22),
        P=bundle.P, kind="robust-star")
    rep = feasibility_margin(degenerate)
    assert rep.lambda_min == 0.0 and not rep.feasible


def test_feasible_bundles_have_E_plus_ET_pd():
    rng = np.random.default_rng(1)
    for seed in range(5):
        b = init_feasible("robust-star", {"n": 4, "q": 3, "m": 2, "p": 1},
                          seed=seed)
        E = b.theta.E
        assert cholesky_logdet(E + E.T).is_pd


def test_iqc_examples():
    assert iqc_quadratic_form([1.0], 1.0, [0.0], [0.0]) == 0.0
    # relu pair v = (2, 0): dv = 2, dw = 1 -> 2*2*1 - 2*1 = 2
    assert iqc_quadratic_form([1.0], 1.0, [2.0], [1.0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        iqc_quadratic_form([0.0], 1.0, [1.0], [1.0])


@pytest.mark.parametrize("kind", ["relu", "tanh"])
def test_iqc_soundness_enumeration(kind):
    rng = np.random.default_rng(17)
    for _ in range(100):
        q = rng.integers(1, 6)
        lam = rng.uniform(0.1, 5.0, size=q)
        va = rng.normal(0.0, 4.0, size=q)
        vb = rng.normal(0.0, 4.0, size=q)
        dw = activation_apply(kind, va) - activation_apply(kind, vb)
        val = iqc_quadratic_form(lam, 1.0, va - vb, dw)
        assert val >= -1e-12


def test_lyapunov_scalar():
    # A = 0.5: P = 1/(1 - 0.25) = 4/3
    P = lyap_discrete_identity(np.array([[0.5]]))
    assert P[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert np.allclose(lyap_discrete_identity(np.zeros((3, 3))), np.eye(3))
    with pytest.raises(ValueError, match="not Schur-stable"):
        lyap_discrete_identity(np.array([[1.01]]))


def test_embed_lti_scalar():
    bundle = embed_lti([[0.5]], [[1.0]], [[1.0]], [[0.0]])
    assert bundle.theta.E[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert feasibility_margin(bundle).feasible
    u = np.random.default_rng(0).normal(size=(50, 1))
    y, _ = simulate(bundle, u)
    y_ref, _ = simulate_lti(np.array([[0.5]]), np.array([[1.0]]),
                            np.array([[1.0]]), np.array([[0.0]]), u)
    assert np.max(np.abs(y - y_ref)) <= 1e-9


def test_embed_lti_random_stable():
    rng = np.random.default_rng(23)
    for seed in range(20):
        n = int(rng.integers(2, 6))
        A = rng.standard_normal((n, n))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        B = rng.standard_normal((n, 1))
        C = rng.standard_normal((1, n))
        D = rng.standard_normal((1, 1))
        bundle = embed_lti(A, B, C, D)
        assert feasibility_margin(bundle).feasible, seed
        u = rng.normal(size=(100, 1))
        y, _ = simulate(bundle, u)
        y_ref, _ = simulate_lti(A, B, C, D, u)
        assert np.max(np.abs(y - y_ref)) <= 1e-9


def contraction_feasible_cirnn(rng, n=3, m=1, p=1):
    cir = CiRnn(E=np.eye(n) + 0.1 * rng.standard_normal((n, n)),
                F=rng.standard_normal((n, n)),
                B=rng.standard_normal((n, m)), b=rng.standard_normal(n),
                C=rng.standard_normal((p, n)), D=rng.standard_normal((p, m)))
    P = np.diag(rng.uniform(0.4, 1.2, size=n))
    for _ in range(60):
        trial = CertifiedBundle(theta=cir, P=P, kind="cirnn-contraction")
        if feasibility_margin(trial).feasible:
            return cir, P
        cir = CiRnn(E=cir.E, F=0.5 * cir.F, B=cir.B, b=cir.b, C=cir.C,
                    D=cir.D)
    raise AssertionError("could not build a contracting ci-RNN")


def test_embed_cirnn_static_map():
    n = 2
    cir = CiRnn(E=np.eye(n), F=np.zeros((n, n)), B=np.ones((n, 1)),
                b=np.full(n, 0.3), C=np.eye(n)[:1], D=np.zeros((1, 1)))
    bundle = embed_cirnn(cir, np.eye(n))
    assert feasibility_margin(bundle).feasible
    u = np.random.default_rng(1).normal(size=(30, 1))
    y_ref, _ = simulate_cirnn_recursion(cir, u)
    y, _ = simulate(bundle, u)
    assert np.max(np.abs(y - y_ref)) <= 1e-9


def test_embed_cirnn_scalar_hand_case():
    # contraction matrix [[1, 0.5], [0.5, 1]] is PD by hand
    cir = CiRnn(E=np.array([[1.0]]), F=np.array([[0.5]]),
                B=np.array([[1.0]]), b=np.zeros(1), C=np.array([[1.0]]),
                D=np.zeros((1, 1)))
    bundle = embed_cirnn(cir, np.array([[1.0]]))
    assert feasibility_margin(bundle).feasible


def test_embed_cirnn_random_equivalence():
    rng = np.random.default_rng(31)
    for _ in range(10):
        cir, P = contraction_feasible_cirnn(rng)
        bundle = embed_cirnn(cir, P)
        assert feasibility_margin(bundle).feasible
        u = rng.normal(0.0, 2.0, size=(100, 1))
        y_ref, _ = simulate_cirnn_recursion(cir, u)
        y, _ = simulate(bundle, u)
        assert np.max(np.abs(y - y_ref)) <= 1e-9


def test_embed_cirnn_rejects_noncontracting():
    n = 2
    cir = CiRnn(E=np.eye(n), F=5.0 * np.eye(n), B=np.ones((n, 1)),
                b=np.zeros(n), C=np.eye(n)[:1], D=np.zeros((1, 1)))
    with pytest.raises(ValueError, match="contraction"):
        embed_cirnn(cir, np.eye(n))


def test_bisect_gamma_unit_delay():
    bundle = embed_lti([[0.0]], [[1.0]], [[1.0]], [[0.0]])
    tol = 1e-3
    g = bisect_gamma(bundle, lo=1e-3, hi=100.0, tol=tol)
    assert g <= 1.0 + 10 * tol
    assert g >= 1.0 - 10 * tol  # unit-gain delay cannot certify below 1


def test_bisect_gamma_zero_model():
    bundle = zero_dynamics_star()
    g = bisect_gamma(bundle, lo=1e-4, hi=10.0, tol=1e-3)
    assert g == pytest.approx(1e-4)


def test_bisect_gamma_monotonicity():
    rng = np.random.default_rng(3)
    for seed in range(5):
        bundle = init_feasible("robust-gamma", {"n": 3, "m": 1, "p": 1},
                               gamma=2.0, seed=seed)
        from dataclasses import replace

        g1 = bundle.gamma
        assert feasibility_margin(bundle).feasible
        for g2 in (g1 * 1.5, g1 * 4.0, g1 * 50.0):
            assert feasibility_margin(replace(bundle, gamma=g2)).feasible


def test_bisect_gamma_infeasible_hi():
    rng = np.random.default_rng(9)
    th = random_theta(rng, scale=5.0)  # far outside the certified set
    bundle = CertifiedBundle(theta=th, P=np.eye(th.n), kind="robust-star")
    with pytest.raises(ValueError, match="infeasible"):
        bisect_gamma(bundle, lo=0.1, hi=1.0, tol=1e-2)


def test_export_certificate_fields():
    bundle = init_feasible("robust-gamma", {"n": 2, "m": 1, "p": 1},
                           gamma=3.0, seed=0)
    doc = export_certificate(bundle)
    assert doc["kind"] == "robust-gamma"
    assert doc["gamma"] == 3.0
    assert doc["epsilon"] == EPSILON
    assert doc["margins"]["feasible"] is True
    assert np.array(doc["P"]).shape == (2, 2)
