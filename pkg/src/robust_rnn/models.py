"""Model zoo: implicit Robust RNN parameterization, its explicit simulable
form, and the baseline recurrent models (Elman RNN, ci-RNN, s-RNN, LSTM),
all behind one `simulate` interface.

The implicit parameterization is

    E x_{t+1}      = F x_t + B1 w_t + B2 u_t
    y_t            = C1 x_t + D11 w_t + D12 u_t
    Lambda v_t     = C2 x_t + b + D22 u_t,      w_t = phi(v_t)

with E invertible and Lambda diagonal positive. Inverting E and Lambda gives
the explicit feedback interconnection of a linear system with an elementwise
slope-restricted activation, which is what `simulate` runs.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la

from .numerics import sym

ACTIVATIONS = ("relu", "tanh", "sigmoid")  # sigmoid only appears inside LSTM gates


def activation_apply(kind, v):
    """Apply the scalar activation elementwise. relu/tanh have slope bound 1,
    sigmoid 1/4 (never used in a certified channel)."""
    v = np.asarray(v, dtype=float)
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "tanh":
        return np.tanh(v)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-v))
    raise ValueError(f"unknown activation {kind!r}")


def activation_slope(kind, v):
    """Pointwise derivative of the activation, used by backprop through time."""
    v = np.asarray(v, dtype=float)
    if kind == "relu":
        return (v > 0.0).astype(float)
    if kind == "tanh":
        t = np.tanh(v)
        return 1.0 - t * t
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-v))
        return s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


def _arr(x):
    return np.array(x, dtype=float)


def _expect(name, a, shape):
    if a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")


@dataclass(frozen=True, eq=False)
class ImplicitParams:
    """Full implicit parameter tuple of the Robust RNN plus activation data.

    lam holds the diagonal of Lambda. Positivity of lam and E + E^T > 0 are
    *checked* by certificate feasibility, not assumed here, so degenerate
    parameter points can be constructed and then flagged.
    """

    E: np.ndarray
    F: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    lam: np.ndarray
    C2: np.ndarray
    b: np.ndarray
    D22: np.ndarray
    beta: float = 1.0
    activation: str = "relu"

    def __post_init__(self):
        for name in ("E", "F", "B1", "B2", "C1", "D11", "D12", "C2", "D22"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        object.__setattr__(self, "lam", _arr(self.lam).reshape(-1))
        object.__setattr__(self, "b", _arr(self.b).reshape(-1))
        n, q, m, p = self.n, self.q, self.m, self.p
        _expect("E", self.E, (n, n))
        _expect("F", self.F, (n, n))
        _expect("B1", self.B1, (n, q))
        _expect("B2", self.B2, (n, m))
        _expect("C1", self.C1, (p, n))
        _expect("D11", self.D11, (p, q))
        _expect("D12", self.D12, (p, m))
        _expect("C2", self.C2, (q, n))
        _expect("b", self.b, (q,))
        _expect("D22", self.D22, (q, m))
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("certified models use relu or tanh activations")

    @property
    def n(self):
        return self.E.shape[0]

    @property
    def q(self):
        return self.lam.shape[0]

    @property
    def m(self):
        return self.B2.shape[1]

    @property
    def p(self):
        return self.C1.shape[0]


@dataclass(frozen=True, eq=False)
class ExplicitModel:
    """Simulable form of the Robust RNN (E and Lambda already inverted).

    The v-equation has no w feedthrough, so there is no algebraic loop.
    """

    Fbar: np.ndarray
    B1bar: np.ndarray
    B2bar: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2bar: np.ndarray
    bbar: np.ndarray
    D22bar: np.ndarray
    activation: str = "relu"

    @property
    def n(self):
        return self.Fbar.shape[0]

    @property
    def q(self):
        return self.bbar.shape[0]

    @property
    def m(self):
        return self.B2bar.shape[1]

    @property
    def p(self):
        return self.C1.shape[0]


@dataclass(frozen=True, eq=False)
class Elman:
    """Elman RNN x_{t+1} = phi(A x_t + B u_t + b), y_t = C x_t + D u_t."""

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    C: np.ndarray
    D: np.ndarray
    activation: str = "relu"

    @property
    def n(self):
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class CiRnn:
    """Contracting implicit RNN  E z_{t+1} = phi(F z_t + B u_t + b)."""

    E: np.ndarray
    F: np.ndarray
    B: np.ndarray
    b: np.ndarray
    C: np.ndarray
    D: np.ndarray
    activation: str = "relu"

    @property
    def n(self):
        return self.F.shape[0]


@dataclass(frozen=True, eq=False)
class SRnn:
    """Stable RNN: the ci-RNN specialization with E = I fixed."""

    F: np.ndarray
    B: np.ndarray
    b: np.ndarray
    C: np.ndarray
    D: np.ndarray
    activation: str = "relu"

    @property
    def n(self):
        return self.F.shape[0]

    def as_cirnn(self):
        return CiRnn(np.eye(self.n), self.F, self.B, self.b, self.C, self.D,
                     self.activation)


@dataclass(frozen=True, eq=False)
class Lstm:
    """Standard LSTM cell with linear output y_t = C x_t + D u_t (D defaults 0).

    Gates use sigmoid; the candidate and the cell output use tanh.
    """

    Wxi: np.ndarray
    Wii: np.ndarray
    bi: np.ndarray
    Wxf: np.ndarray
    Wif: np.ndarray
    bf: np.ndarray
    Wxg: np.ndarray
    Wig: np.ndarray
    bg: np.ndarray
    Wxo: np.ndarray
    Wio: np.ndarray
    bo: np.ndarray
    C: np.ndarray
    D: np.ndarray

    @property
    def n(self):
        return self.Wxi.shape[0]


BaselineModel = (Elman, CiRnn, SRnn, Lstm)


@dataclass(frozen=True, eq=False)
class SeqBatch:
    """One input/output sequence pair with sampling metadata."""

    u: np.ndarray        # (T, m)
    y: np.ndarray        # (T, p)
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("u", "y"):
            a = _arr(getattr(self, name))
            object.__setattr__(self, name, a[:, None] if a.ndim == 1 else a)
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError("u and y must share the time dimension")
        if self.u.shape[0] < 1:
            raise ValueError("empty sequence")

    @property
    def T(self):
        return self.u.shape[0]


def to_explicit(theta: ImplicitParams) -> ExplicitModel:
    """Invert E and Lambda to obtain the explicit simulable model.

    Raises ValueError on singular E (a certificate violation: any feasible
    bundle has E + E^T > 0, hence invertible E) or nonpositive lam.
    """
    if np.any(theta.lam <= 0):
        raise ValueError("Lambda entries must be positive to invert")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = la.lu_factor(theta.E)
    if np.any(np.abs(np.diag(lu)) < 1e-300):
        raise ValueError("E is singular; the model has no explicit form "
                         "(certificate violated?)")
    solveE = lambda X: la.lu_solve((lu, piv), X)
    lam_col = theta.lam[:, None]
    return ExplicitModel(
        Fbar=solveE(theta.F),
        B1bar=solveE(theta.B1),
        B2bar=solveE(theta.B2),
        C1=theta.C1.copy(),
        D11=theta.D11.copy(),
        D12=theta.D12.copy(),
        C2bar=theta.C2 / lam_col,
        bbar=theta.b / theta.lam,
        D22bar=theta.D22 / lam_col,
        activation=theta.activation,
    )


def baseline_to_explicit(model) -> ExplicitModel:
    """Express an Elman/ci-RNN/s-RNN as the explicit feedback-interconnection form."""
    if isinstance(model, Elman):
        n, m = model.B.shape
        p = model.C.shape[0]
        return ExplicitModel(
            Fbar=np.zeros((n, n)), B1bar=np.eye(n), B2bar=np.zeros((n, m)),
            C1=model.C.copy(), D11=np.zeros((p, n)), D12=model.D.copy(),
            C2bar=model.A.copy(), bbar=np.asarray(model.b, float).reshape(-1),
            D22bar=model.B.copy(), activation=model.activation)
    if isinstance(model, SRnn):
        model = model.as_cirnn()
    if isinstance(model, CiRnn):
        n, m = model.B.shape
        p = model.C.shape[0]
        Einv = la.inv(model.E)
        return ExplicitModel(
            Fbar=np.zeros((n, n)), B1bar=Einv, B2bar=np.zeros((n, m)),
            C1=model.C.copy(), D11=np.zeros((p, n)), D12=model.D.copy(),
            C2bar=model.F.copy(), bbar=np.asarray(model.b, float).reshape(-1),
            D22bar=model.B.copy(), activation=model.activation)
    raise TypeError(f"no explicit form for {type(model).__name__}")


def _as_input(u):
    u = _arr(u)
    if u.ndim == 1:
        u = u[:, None]
    return u


def _first_bad_step(x):
    return int(np.nonzero(~np.isfinite(x).all(axis=1))[0][0])


def explicit_forward(mdl: ExplicitModel, u, x0=None):
    """Run the explicit recursion, returning the full trajectory cache
    (states, pre-activations, activations, outputs) used by both simulation
    and backprop through time.

    Input-driven terms and the output map are applied vectorized; only the
    state recursion itself runs step by step.
    """
    u = _as_input(u)
    T = u.shape[0]
    n, q = mdl.n, mdl.q
    x = np.zeros((T + 1, n))
    if x0 is not None:
        x[0] = _arr(x0).reshape(n)
    v = np.empty((T, q))
    w = np.empty((T, q))
    uv = u @ mdl.D22bar.T + mdl.bbar
    ux = u @ mdl.B2bar.T
    Fbar, B1bar, C2bar = mdl.Fbar, mdl.B1bar, mdl.C2bar
    phi = np.tanh if mdl.activation == "tanh" else None
    with np.errstate(over="raise", invalid="raise"):
        try:
            for t in range(T):
                xt = x[t]
                vt = C2bar @ xt + uv[t]
                wt = phi(vt) if phi else np.maximum(vt, 0.0)
                v[t] = vt
                w[t] = wt
                x[t + 1] = Fbar @ xt + B1bar @ wt + ux[t]
        except FloatingPointError:
            raise FloatingPointError(
                f"state became non-finite at step {t + 1}") from None
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(
            f"state became non-finite at step {_first_bad_step(x)}")
    y = x[:-1] @ mdl.C1.T + w @ mdl.D11.T + u @ mdl.D12.T
    return {"u": u, "x": x, "v": v, "w": w, "y": y}


def lstm_forward(mdl: Lstm, u, x0=None):
    """Run the LSTM recursion with zero initial cell state, caching all gate
    activations for backprop through time."""
    u = _as_input(u)
    T = u.shape[0]
    n = mdl.n
    h = np.zeros((T + 1, n))
    c = np.zeros((T + 1, n))
    if x0 is not None:
        h[0] = _arr(x0).reshape(n)
    gi = np.empty((T, n))
    gf = np.empty((T, n))
    gg = np.empty((T, n))
    go = np.empty((T, n))
    tc = np.empty((T, n))
    ui = u @ mdl.Wii.T + mdl.bi
    uf = u @ mdl.Wif.T + mdl.bf
    ug = u @ mdl.Wig.T + mdl.bg
    uo = u @ mdl.Wio.T + mdl.bo
    Wxi, Wxf, Wxg, Wxo = mdl.Wxi, mdl.Wxf, mdl.Wxg, mdl.Wxo

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    for t in range(T):
        ht = h[t]
        gi[t] = sig(Wxi @ ht + ui[t])
        gf[t] = sig(Wxf @ ht + uf[t])
        gg[t] = np.tanh(Wxg @ ht + ug[t])
        go[t] = sig(Wxo @ ht + uo[t])
        c[t + 1] = gf[t] * c[t] + gi[t] * gg[t]
        tc[t] = np.tanh(c[t + 1])
        h[t + 1] = go[t] * tc[t]
    if not np.all(np.isfinite(h)):
        raise FloatingPointError(
            f"state became non-finite at step {_first_bad_step(h)}")
    y = h[1:] @ mdl.C.T + u @ mdl.D.T
    return {"u": u, "h": h, "c": c, "gi": gi, "gf": gf, "gg": gg, "go": go,
            "tc": tc, "y": y}


def as_simulable(model):
    """Reduce bundles/implicit/baseline models to something simulate() runs
    directly: an ExplicitModel or an Lstm."""
    theta = getattr(model, "theta", None)
    if theta is not None:  # CertifiedBundle
        model = theta
    if isinstance(model, ImplicitParams):
        return to_explicit(model)
    if isinstance(model, (Elman, CiRnn, SRnn)):
        return baseline_to_explicit(model)
    if isinstance(model, (ExplicitModel, Lstm)):
        return model
    raise TypeError(f"cannot simulate {type(model).__name__}")


def simulate(model, u, x0=None):
    """Simulate any model on input u (T x m) from initial state x0 (zeros by
    default). Returns (y, xtraj) with y (T x p) and xtraj ((T+1) x n)."""
    mdl = as_simulable(model)
    if isinstance(mdl, Lstm):
        cache = lstm_forward(mdl, u, x0)
        return cache["y"], cache["h"]
    cache = explicit_forward(mdl, u, x0)
    return cache["y"], cache["x"]


def _dims_of(dims):
    n = int(dims["n"])
    q = int(dims.get("q", n))
    m = int(dims["m"])
    p = int(dims["p"])
    if min(n, q, m, p) < 1:
        raise ValueError("all dimensions must be >= 1")
    return n, q, m, p


_HALVING_LIMIT = 200


def init_feasible(kind, dims, gamma=None, seed=0, activation="relu"):
    """Draw a deterministic initial model of the requested kind.

    Certified kinds start from the zero-dynamics seed (E = P = I, Lambda = I,
    b = 0) with Gaussian blocks of std 1/sqrt(n), then halve every block that
    enters the LMI until the constraint is strictly feasible with the global
    margin epsilon. Unconstrained baselines are plain Gaussian draws.
    """
    from . import certificates  # deferred: certificates imports models

    n, q, m, p = _dims_of(dims)
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(n)
    g = lambda *shape: std * rng.standard_normal(shape)

    if kind in ("robust-star", "robust-gamma"):
        if kind == "robust-gamma":
            if gamma is None or gamma <= 0:
                raise ValueError("robust-gamma initialization needs gamma > 0")
        theta = ImplicitParams(
            E=np.eye(n), F=g(n, n), B1=g(n, q), B2=g(n, m),
            C1=g(p, n), D11=g(p, q), D12=g(p, m),
            lam=np.ones(q), C2=g(q, n), b=np.zeros(q), D22=g(q, m),
            beta=1.0, activation=activation)
        bundle = certificates.CertifiedBundle(
            theta=theta, P=np.eye(n), kind=kind,
            gamma=float(gamma) if kind == "robust-gamma" else None)
        shrink = (["F", "B1", "C2"] if kind == "robust-star"
                  else ["F", "B1", "C2", "B2", "C1", "D11", "D12", "D22"])
        for _ in range(_HALVING_LIMIT):
            if certificates.feasibility_margin(bundle).feasible:
                return bundle
            theta = replace(theta, **{k: 0.5 * getattr(theta, k) for k in shrink})
            bundle = replace(bundle, theta=theta)
        raise RuntimeError("could not reach strict feasibility by halving")

    if kind in ("cirnn", "srnn"):
        base = dict(F=g(n, n), B=g(n, m), b=np.zeros(n), C=g(p, n), D=g(p, m),
                    activation=activation)
        model = (CiRnn(E=np.eye(n), **base) if kind == "cirnn" else SRnn(**base))
        bundle = certificates.CertifiedBundle(
            theta=model, P=np.eye(n), kind="cirnn-contraction")
        for _ in range(_HALVING_LIMIT):
            if certificates.feasibility_margin(bundle).feasible:
                return bundle
            model = replace(model, F=0.5 * model.F)
            bundle = replace(bundle, theta=model)
        raise RuntimeError("could not reach strict feasibility by halving")

    if kind in ("rnn", "elman"):
        return Elman(A=g(n, n), B=g(n, m), b=np.zeros(n), C=g(p, n), D=g(p, m),
                     activation=activation)

    if kind == "lstm":
        return Lstm(
            Wxi=g(n, n), Wii=g(n, m), bi=np.zeros(n),
            Wxf=g(n, n), Wif=g(n, m), bf=np.zeros(n),
            Wxg=g(n, n), Wig=g(n, m), bg=np.zeros(n),
            Wxo=g(n, n), Wio=g(n, m), bo=np.zeros(n),
            C=g(p, n), D=np.zeros((p, m)))

    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Serialization: one JSON document per model, bit-faithful float round-trip.

_MATRIX_FIELDS = {
    "robust-star": ("E", "F", "B1", "B2", "C1", "D11", "D12", "lam", "C2", "b", "D22"),
    "robust-gamma": ("E", "F", "B1", "B2", "C1", "D11", "D12", "lam", "C2", "b", "D22"),
    "rnn": ("A", "B", "b", "C", "D"),
    "cirnn": ("E", "F", "B", "b", "C", "D"),
    "srnn": ("F", "B", "b", "C", "D"),
    "lstm": ("Wxi", "Wii", "bi", "Wxf", "Wif", "bf", "Wxg", "Wig", "bg",
             "Wxo", "Wio", "bo", "C", "D"),
}


def model_kind(model):
    from . import certificates

    if isinstance(model, certificates.CertifiedBundle):
        if model.kind == "cirnn-contraction":
            return "cirnn" if isinstance(model.theta, CiRnn) else "srnn"
        return model.kind
    return {Elman: "rnn", CiRnn: "cirnn", SRnn: "srnn", Lstm: "lstm"}[type(model)]


def model_to_dict(model):
    """JSON-ready dict: kind, dims, activation/beta, named matrices (row-major),
    optional certificate P and gamma."""
    from . import certificates

    kind = model_kind(model)
    P = gamma = None
    obj = model
    if isinstance(model, certificates.CertifiedBundle):
        obj = model.theta
        P = model.P
        gamma = model.gamma
    doc = {"kind": kind}
    if isinstance(obj, ImplicitParams):
        doc["dims"] = {"n": obj.n, "q": obj.q, "m": obj.m, "p": obj.p}
        doc["beta"] = obj.beta
        doc["activation"] = obj.activation
    elif isinstance(obj, Lstm):
        doc["dims"] = {"n": obj.n, "m": obj.Wii.shape[1], "p": obj.C.shape[0]}
    else:
        doc["dims"] = {"n": obj.n, "m": obj.B.shape[1], "p": obj.C.shape[0]}
        doc["activation"] = obj.activation
    doc["matrices"] = {name: np.asarray(getattr(obj, name), float).tolist()
                       for name in _MATRIX_FIELDS[kind]}
    if P is not None:
        doc["P"] = np.asarray(P, float).tolist()
    if gamma is not None:
        doc["gamma"] = float(gamma)
    return doc


def model_from_dict(doc):
    from . import certificates

    kind = doc["kind"]
    if kind not in _MATRIX_FIELDS:
        raise ValueError(f"unknown model kind {kind!r}")
    mats = {name: np.array(doc["matrices"][name], dtype=float)
            for name in _MATRIX_FIELDS[kind]}
    if kind in ("robust-star", "robust-gamma"):
        theta = ImplicitParams(beta=float(doc.get("beta", 1.0)),
                               activation=doc.get("activation", "relu"), **mats)
        return certificates.CertifiedBundle(
            theta=theta, P=np.array(doc["P"], dtype=float), kind=kind,
            gamma=float(doc["gamma"]) if kind == "robust-gamma" else None)
    if kind == "lstm":
        model = Lstm(**mats)
    else:
        cls = {"rnn": Elman, "cirnn": CiRnn, "srnn": SRnn}[kind]
        model = cls(activation=doc.get("activation", "relu"), **mats)
    if "P" in doc and kind in ("cirnn", "srnn"):
        return certificates.CertifiedBundle(
            theta=model, P=np.array(doc["P"], dtype=float), kind="cirnn-contraction")
    return model


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
