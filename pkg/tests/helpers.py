"""Independent oracles shared by the test modules.

Everything here deliberately avoids the library code paths it is used to
check: determinants come from cofactor expansion, implicit models are
simulated by per-step linear solves, the inverse-P constraint forms are
evaluated directly.
"""

import numpy as np

from robust_rnn.models import activation_apply


def cofactor_det(M):
    """Determinant by recursive cofactor expansion (dims <= 5 or so)."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n == 1:
        return M[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(M, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * M[0, j] * cofactor_det(minor)
    return total


def random_pd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T) + 0.5 * np.eye(n)


def simulate_implicit_recursion(theta, u, x0=None):
    """Simulate the implicit model by solving the E and Lambda equations at
    every step with generic linear solves (independent of to_explicit)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    n, q, p = theta.n, theta.q, theta.p
    Lam = np.diag(theta.lam)
    x = np.zeros((T + 1, n))
    if x0 is not None:
        x[0] = x0
    y = np.zeros((T, p))
    for t in range(T):
        v = np.linalg.solve(Lam, theta.C2 @ x[t] + theta.b + theta.D22 @ u[t])
        w = activation_apply(theta.activation, v)
        y[t] = theta.C1 @ x[t] + theta.D11 @ w + theta.D12 @ u[t]
        x[t + 1] = np.linalg.solve(theta.E,
                                   theta.F @ x[t] + theta.B1 @ w + theta.B2 @ u[t])
    return y, x


def simulate_lti(A, B, C, D, u, x0=None):
    """Direct LTI recursion x+ = A x + B u, y = C x + D u."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    n = A.shape[0]
    x = np.zeros((T + 1, n))
    if x0 is not None:
        x[0] = x0
    y = np.zeros((T, C.shape[0]))
    for t in range(T):
        y[t] = C @ x[t] + D @ u[t]
        x[t + 1] = A @ x[t] + B @ u[t]
    return y, x


def simulate_cirnn_recursion(cirnn, u, x0=None):
    """Simulate a ci-RNN from its defining implicit equation by per-step solves."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    n = cirnn.n
    z = np.zeros((T + 1, n))
    if x0 is not None:
        z[0] = x0
    y = np.zeros((T, cirnn.C.shape[0]))
    for t in range(T):
        y[t] = cirnn.C @ z[t] + cirnn.D @ u[t]
        rhs = activation_apply(cirnn.activation,
                               cirnn.F @ z[t] + cirnn.B @ u[t] + cirnn.b)
        z[t + 1] = np.linalg.solve(cirnn.E, rhs)
    return y, z


def star_constraint_inverse_form(theta, P):
    """The finite-gain constraint exactly as stated with an explicit P^{-1}."""
    from robust_rnn.numerics import solve_pd

    top = np.block([
        [theta.E + theta.E.T - P, -theta.beta * theta.C2.T],
        [-theta.beta * theta.C2, 2.0 * np.diag(theta.lam)],
    ])
    G = np.vstack([theta.F.T, theta.B1.T])
    return top - G @ solve_pd(P, G.T)


def gamma_constraint_inverse_form(theta, P, gamma):
    """The gain-bound constraint as stated, with P^{-1} and 1/gamma factors."""
    from robust_rnn.numerics import solve_pd

    q, m = theta.q, theta.m
    top = np.block([
        [theta.E + theta.E.T - P, -theta.beta * theta.C2.T,
         np.zeros((theta.n, m))],
        [-theta.beta * theta.C2, 2.0 * np.diag(theta.lam),
         -theta.beta * theta.D22],
        [np.zeros((m, theta.n)), -theta.beta * theta.D22.T,
         gamma * np.eye(m)],
    ])
    G = np.vstack([theta.F.T, theta.B1.T, theta.B2.T])
    H = np.vstack([theta.C1.T, theta.D11.T, theta.D12.T])
    return top - G @ solve_pd(P, G.T) - (1.0 / gamma) * (H @ H.T)


def finite_difference(fn, x, h=1e-5, coords=None):
    """Central finite differences of scalar fn at flat vector x."""
    x = np.asarray(x, dtype=float)
    coords = range(x.size) if coords is None else coords
    out = {}
    for i in coords:
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return out
