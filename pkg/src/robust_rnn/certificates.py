"""Convex stability/robustness certificates for recurrent models.

Two constraint families define the certified sets: one guaranteeing finite
incremental L2 gain ("robust-star") and one guaranteeing a prescribed gain
bound gamma ("robust-gamma"). A third, the contraction condition of the
ci-RNN family, is carried so those baselines can be trained under the same
barrier machinery.

All constraints are stored and checked in lifted Schur-complement form: the
lifted block matrix is *linear* in every decision variable (model parameters,
certificate P, multipliers Lambda), which is what makes barrier training
work. Equivalence with the inverse-P form is pinned by tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import models
from .numerics import (NotPositiveDefiniteError, cholesky_logdet, pd_inverse,
                       solve_pd, sym)

#: Margin operationalizing every strict inequality "> 0" in the constraint set.
EPSILON = 1e-8

KINDS = ("robust-star", "robust-gamma", "cirnn-contraction")


@dataclass(frozen=True, eq=False)
class CertifiedBundle:
    """Model parameters together with the convex certificate they satisfy.

    theta is an ImplicitParams for the robust kinds, or a CiRnn/SRnn for the
    contraction kind (whose P is diagonal). gamma is present iff
    kind == "robust-gamma".
    """

    theta: object
    P: np.ndarray
    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        if (self.kind == "robust-gamma") != (self.gamma is not None):
            raise ValueError("gamma must be given exactly for robust-gamma bundles")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "P", np.array(self.P, dtype=float))

    @property
    def n(self):
        return self.P.shape[0]


@dataclass(frozen=True)
class FeasibilityReport:
    """Real-valued margins of the constraint set.

    lmi_margin and P_margin are smallest squared Cholesky pivots (0 when the
    factorization fails); lambda_min is the smallest multiplier (smallest
    diagonal of P for the contraction kind, whose positivity plays that
    role). feasible iff all three are >= EPSILON.
    """

    lmi_margin: float
    P_margin: float
    lambda_min: float
    feasible: bool


def _cirnn_EF(theta):
    if isinstance(theta, models.SRnn):
        return np.eye(theta.n), theta.F
    return theta.E, theta.F


def assemble_lmi(bundle: CertifiedBundle) -> np.ndarray:
    """Build the lifted block LMI matrix for the bundle's kind.

    The matrix is linear in (theta, P); positive definiteness of the lift is
    equivalent to the inverse-P constraint plus P > 0.
    """
    P = sym(bundle.P)
    if bundle.kind == "cirnn-contraction":
        E, F = _cirnn_EF(bundle.theta)
        n = F.shape[0]
        M = np.zeros((2 * n, 2 * n))
        M[:n, :n] = E + E.T - P
        M[:n, n:] = F.T
        M[n:, :n] = F
        M[n:, n:] = P
        return M

    th = bundle.theta
    n, q, m, p = th.n, th.q, th.m, th.p
    beta = th.beta
    if bundle.kind == "robust-star":
        d = 2 * n + q
        s0, s1, s2 = slice(0, n), slice(n, n + q), slice(n + q, d)
        M = np.zeros((d, d))
        M[s0, s0] = th.E + th.E.T - P
        M[s1, s1] = 2.0 * np.diag(th.lam)
        M[s2, s2] = P
        M[s0, s1] = -beta * th.C2.T
        M[s1, s0] = -beta * th.C2
        M[s0, s2] = th.F.T
        M[s2, s0] = th.F
        M[s1, s2] = th.B1.T
        M[s2, s1] = th.B1
        return M

    # robust-gamma
    g = float(bundle.gamma)
    d = 2 * n + q + m + p
    r0 = slice(0, n)
    r1 = slice(n, n + q)
    r2 = slice(n + q, n + q + m)
    r3 = slice(n + q + m, 2 * n + q + m)
    r4 = slice(2 * n + q + m, d)
    M = np.zeros((d, d))
    M[r0, r0] = th.E + th.E.T - P
    M[r1, r1] = 2.0 * np.diag(th.lam)
    M[r2, r2] = g * np.eye(m)
    M[r3, r3] = P
    M[r4, r4] = g * np.eye(p)
    M[r0, r1] = -beta * th.C2.T
    M[r1, r0] = -beta * th.C2
    # (w, u) coupling is -beta*D22 (q x m); the transposed copy sits at (u, w)
    M[r1, r2] = -beta * th.D22
    M[r2, r1] = -beta * th.D22.T
    M[r0, r3] = th.F.T
    M[r3, r0] = th.F
    M[r1, r3] = th.B1.T
    M[r3, r1] = th.B1
    M[r2, r3] = th.B2.T
    M[r3, r2] = th.B2
    M[r0, r4] = th.C1.T
    M[r4, r0] = th.C1
    M[r1, r4] = th.D11.T
    M[r4, r1] = th.D11
    M[r2, r4] = th.D12.T
    M[r4, r2] = th.D12
    return M


def feasibility_margin(bundle: CertifiedBundle) -> FeasibilityReport:
    """Measure how strictly the bundle sits inside its constraint set."""
    lmi = cholesky_logdet(assemble_lmi(bundle))
    pm = cholesky_logdet(sym(bundle.P))
    if bundle.kind == "cirnn-contraction":
        lam_min = float(np.min(np.diag(bundle.P)))
    else:
        lam_min = float(np.min(bundle.theta.lam))
    feasible = (lmi.margin >= EPSILON and pm.margin >= EPSILON
                and lam_min >= EPSILON)
    return FeasibilityReport(lmi.margin, pm.margin, lam_min, feasible)


def iqc_quadratic_form(lam, beta, dv, dw):
    """Quadratic form of the slope-restriction constraint under multipliers lam.

    Equals sum_i lam_i * (2*beta*dv_i*dw_i - 2*dw_i**2); nonnegative whenever
    (dv, dw) are increment pairs of a [0, beta] slope-restricted nonlinearity.
    """
    lam = np.asarray(lam, float).reshape(-1)
    dv = np.asarray(dv, float).reshape(-1)
    dw = np.asarray(dw, float).reshape(-1)
    if np.any(lam <= 0):
        raise ValueError("multipliers must be positive")
    return float(np.sum(lam * (2.0 * beta * dv * dw - 2.0 * dw * dw)))


def lyap_discrete_identity(A, tol=1e-14, max_terms=20000):
    """Solve P - A.T P A = I by summing (A.T)^k A^k until increments vanish.

    Divergence (spectral radius >= 1) surfaces as non-convergence.
    """
    A = np.asarray(A, float)
    n = A.shape[0]
    P = np.eye(n)
    term = np.eye(n)
    for _ in range(max_terms):
        term = A.T @ term @ A
        inc = np.linalg.norm(term, "fro")
        if not np.isfinite(inc):
            break
        P += term
        if inc < tol:
            return sym(P)
    raise ValueError("Lyapunov summation did not converge: A is not Schur-stable")


def embed_lti(A, B, C, D, q=None) -> CertifiedBundle:
    """Embed a Schur-stable LTI system into the robust-star set.

    The returned bundle simulates identically to x+ = A x + B u,
    y = C x + D u (the nonlinearity channels are inert) and is strictly
    feasible.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    C = np.atleast_2d(np.asarray(C, float))
    D = np.atleast_2d(np.asarray(D, float))
    n, m = B.shape
    p = C.shape[0]
    q = n if q is None else int(q)
    Pl = lyap_discrete_identity(A)
    theta = models.ImplicitParams(
        E=Pl, F=Pl @ A, B1=np.zeros((n, q)), B2=Pl @ B,
        C1=C, D11=np.zeros((p, q)), D12=D,
        lam=np.ones(q), C2=np.zeros((q, n)), b=np.zeros(q),
        D22=np.zeros((q, m)), beta=1.0, activation="relu")
    return CertifiedBundle(theta=theta, P=Pl, kind="robust-star")


def embed_cirnn(cirnn: models.CiRnn, Pci) -> CertifiedBundle:
    """Embed a contracting implicit RNN into the robust-star set.

    Pci is the (diagonal) contraction certificate the ci-RNN comes with; the
    contraction LMI is verified as a precondition, not searched for.
    """
    if isinstance(cirnn, models.SRnn):
        cirnn = cirnn.as_cirnn()
    p_diag = np.asarray(Pci, float)
    if p_diag.ndim == 2:
        if np.any(p_diag != np.diag(np.diag(p_diag))):
            raise ValueError("contraction certificate must be diagonal")
        p_diag = np.diag(p_diag)
    n = cirnn.n
    m = cirnn.B.shape[1]
    pdim = cirnn.C.shape[0]
    contraction = CertifiedBundle(theta=cirnn, P=np.diag(p_diag),
                                  kind="cirnn-contraction")
    if not feasibility_margin(contraction).feasible:
        raise ValueError("input does not satisfy the contraction condition")
    col = p_diag[:, None]
    theta = models.ImplicitParams(
        E=cirnn.E.copy(), F=np.zeros((n, n)), B1=np.eye(n), B2=np.zeros((n, m)),
        C1=cirnn.C.copy(), D11=np.zeros((pdim, n)), D12=cirnn.D.copy(),
        lam=1.0 / p_diag, C2=cirnn.F / col, b=np.asarray(cirnn.b, float) / p_diag,
        D22=cirnn.B / col, beta=1.0, activation=cirnn.activation)
    return CertifiedBundle(theta=theta, P=np.diag(p_diag), kind="robust-star")


def bisect_gamma(bundle: CertifiedBundle, lo=1e-6, hi=1e6, tol=1e-3):
    """Smallest gamma in [lo, hi] (within tol) whose gain LMI is feasible at
    the bundle's fixed theta and P.

    P is not re-optimized per gamma, so the result is a certified upper
    bound that may be conservative. Raises if even hi is infeasible.
    """
    if not isinstance(bundle.theta, models.ImplicitParams):
        raise TypeError("gamma certification needs an implicit-parameter bundle")

    def feasible_at(g):
        trial = CertifiedBundle(theta=bundle.theta, P=bundle.P,
                                kind="robust-gamma", gamma=g)
        return feasibility_margin(trial).feasible

    if not feasible_at(hi):
        raise ValueError(f"gain LMI infeasible even at gamma = {hi}")
    if feasible_at(lo):
        return float(lo)
    lo_, hi_ = float(lo), float(hi)
    while hi_ - lo_ > tol:
        mid = 0.5 * (lo_ + hi_)
        if feasible_at(mid):
            hi_ = mid
        else:
            lo_ = mid
    return hi_


def storage_matrix(bundle: CertifiedBundle) -> np.ndarray:
    """The metric E^T P^-1 E of the incremental storage function V."""
    if bundle.kind == "cirnn-contraction":
        E, _ = _cirnn_EF(bundle.theta)
    else:
        E = bundle.theta.E
    return sym(E.T @ solve_pd(sym(bundle.P), E))


def export_certificate(bundle: CertifiedBundle) -> dict:
    """JSON-ready certificate record written alongside a model file."""
    rep = feasibility_margin(bundle)
    return {
        "kind": bundle.kind,
        "gamma": None if bundle.gamma is None else float(bundle.gamma),
        "P": np.asarray(bundle.P, float).tolist(),
        "margins": {
            "lmi_margin": rep.lmi_margin,
            "P_margin": rep.P_margin,
            "lambda_min": rep.lambda_min,
            "feasible": rep.feasible,
        },
        "epsilon": EPSILON,
    }


def neg_logdet_and_gradients(bundle: CertifiedBundle):
    """Value and parameter gradients of -log det of the lifted LMI.

    Returns (value, grads) where grads maps decision-variable names (the
    bundle kind's trainable blocks, including "P") to arrays of matching
    shape. Raises NotPositiveDefiniteError off the feasible set.
    """
    M = assemble_lmi(bundle)
    rep = cholesky_logdet(M)
    if not rep.is_pd:
        raise NotPositiveDefiniteError("LMI is not positive definite")
    W = -pd_inverse(M)  # adjoint of M for f = -log det M
    val = -rep.logdet

    if bundle.kind == "cirnn-contraction":
        n = bundle.P.shape[0]
        s0, s1 = slice(0, n), slice(n, 2 * n)
        grads = {
            "F": W[s1, s0] + W[s0, s1].T,
            "P_diag": np.diag(-W[s0, s0] + W[s1, s1]).copy(),
        }
        if isinstance(bundle.theta, models.CiRnn):
            grads["E"] = W[s0, s0] + W[s0, s0].T
        return val, grads

    th = bundle.theta
    n, q, m, p = th.n, th.q, th.m, th.p
    beta = th.beta
    if bundle.kind == "robust-star":
        s0, s1, s2 = slice(0, n), slice(n, n + q), slice(n + q, 2 * n + q)
        grads = {
            "E": W[s0, s0] + W[s0, s0].T,
            "P": sym(-W[s0, s0] + W[s2, s2]),
            "lam": 2.0 * np.diag(W[s1, s1]).copy(),
            "C2": -beta * (W[s1, s0] + W[s0, s1].T),
            "F": W[s2, s0] + W[s0, s2].T,
            "B1": W[s2, s1] + W[s1, s2].T,
        }
        return val, grads

    r0 = slice(0, n)
    r1 = slice(n, n + q)
    r2 = slice(n + q, n + q + m)
    r3 = slice(n + q + m, 2 * n + q + m)
    r4 = slice(2 * n + q + m, 2 * n + q + m + p)
    grads = {
        "E": W[r0, r0] + W[r0, r0].T,
        "P": sym(-W[r0, r0] + W[r3, r3]),
        "lam": 2.0 * np.diag(W[r1, r1]).copy(),
        "C2": -beta * (W[r1, r0] + W[r0, r1].T),
        "D22": -beta * (W[r1, r2] + W[r2, r1].T),
        "F": W[r3, r0] + W[r0, r3].T,
        "B1": W[r3, r1] + W[r1, r3].T,
        "B2": W[r3, r2] + W[r2, r3].T,
        "C1": W[r4, r0] + W[r0, r4].T,
        "D11": W[r4, r1] + W[r1, r4].T,
        "D12": W[r4, r2] + W[r2, r4].T,
    }
    return val, grads
