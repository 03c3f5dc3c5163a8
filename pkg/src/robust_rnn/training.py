"""Training pipeline: simulation-error loss, logarithmic-barrier objective,
hand-rolled backprop through time, and ADAM with a feasibility-preserving
backtracking line search under the patience-driven lr/alpha schedule.

Gradients are exact adjoints: reverse accumulation through the unrolled
simulation for the fit term, and -tr(M^-1 dM) scattered over the LMI blocks
for the barrier term. Finite-difference agreement is enforced by tests.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la

from . import certificates, models
from .certificates import EPSILON, CertifiedBundle, feasibility_margin
from .models import (CiRnn, Elman, Lstm, SRnn, activation_slope,
                     baseline_to_explicit, explicit_forward, lstm_forward,
                     to_explicit)
from .numerics import NotPositiveDefiniteError, cholesky_logdet


@dataclass
class TrainConfig:
    """Optimizer and schedule settings (defaults follow the training recipe)."""

    lr0: float = 1e-3
    alpha0: float = 1e-3
    alpha_final: float = 1e-7
    lr_decay: float = 0.25
    alpha_decay: float = 0.1
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_backtracks: int = 50
    seed: int = 0
    max_epochs: int | None = None

    def __post_init__(self):
        if not (0.0 < self.lr_decay < 1.0):
            raise ValueError("lr_decay must lie in (0, 1)")
        if not (0.0 < self.alpha_decay < 1.0):
            raise ValueError("alpha_decay must lie in (0, 1)")
        if self.alpha0 <= 0 or self.alpha_final <= 0:
            # alpha0 < alpha_final is allowed: a degenerate schedule that
            # terminates at the first patience trigger
            raise ValueError("alpha0 and alpha_final must be positive")
        if self.patience < 1 or self.max_backtracks < 1:
            raise ValueError("patience and max_backtracks must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    mean_batch_loss: float
    val_nse: float
    alpha: float
    lr: float
    lmi_margin: float
    seconds: float


@dataclass
class TrainHistory:
    """Per-epoch training log; record 0 is the pre-training snapshot."""

    records: list = field(default_factory=list)
    rejected_steps: int = 0

    CSV_COLUMNS = ("epoch", "loss", "val_nse", "alpha", "lr", "lmi_margin",
                   "seconds")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for r in self.records:
                writer.writerow(["%d" % r.epoch] +
                                ["%.17g" % v for v in
                                 (r.mean_batch_loss, r.val_nse, r.alpha, r.lr,
                                  r.lmi_margin, r.seconds)])

    @staticmethod
    def from_csv(path):
        hist = TrainHistory()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.records.append(EpochRecord(
                    int(row["epoch"]), float(row["loss"]), float(row["val_nse"]),
                    float(row["alpha"]), float(row["lr"]),
                    float(row["lmi_margin"]), float(row["seconds"])))
        return hist


# ---------------------------------------------------------------------------
# Decision-variable packing. Every trainable object maps to an ordered tuple
# of named arrays; optimization happens on their flat concatenation.

def param_names(trainable):
    if isinstance(trainable, CertifiedBundle):
        if trainable.kind == "cirnn-contraction":
            if isinstance(trainable.theta, SRnn):
                return ("F", "B", "b", "C", "D", "P_diag")
            return ("E", "F", "B", "b", "C", "D", "P_diag")
        return ("E", "F", "B1", "B2", "C1", "D11", "D12", "lam", "C2", "b",
                "D22", "P")
    if isinstance(trainable, Elman):
        return ("A", "B", "b", "C", "D")
    if isinstance(trainable, Lstm):
        return ("Wxi", "Wii", "bi", "Wxf", "Wif", "bf", "Wxg", "Wig", "bg",
                "Wxo", "Wio", "bo", "C", "D")
    raise TypeError(f"{type(trainable).__name__} is not trainable")


def _get_param(trainable, name):
    if isinstance(trainable, CertifiedBundle):
        if name == "P":
            return trainable.P
        if name == "P_diag":
            return np.diag(trainable.P).copy()
        return getattr(trainable.theta, name)
    return getattr(trainable, name)


def flatten_params(trainable):
    return np.concatenate([np.asarray(_get_param(trainable, n), float).ravel()
                           for n in param_names(trainable)])


def unflatten_params(trainable, vec):
    """Rebuild a trainable of the same structure from a flat vector."""
    vec = np.asarray(vec, float)
    out = {}
    k = 0
    for name in param_names(trainable):
        ref = np.asarray(_get_param(trainable, name))
        size = ref.size
        out[name] = vec[k:k + size].reshape(ref.shape).copy()
        k += size
    if k != vec.size:
        raise ValueError("flat vector length mismatch")
    if isinstance(trainable, CertifiedBundle):
        P = out.pop("P", None)
        pd = out.pop("P_diag", None)
        theta = replace(trainable.theta, **out)
        newP = P if P is not None else np.diag(pd)
        return replace(trainable, theta=theta, P=newP)
    return replace(trainable, **out)


def _flatten_grads(trainable, grads):
    return np.concatenate([np.asarray(grads[n], float).ravel()
                           for n in param_names(trainable)])


# ---------------------------------------------------------------------------
# Backprop through time.

def _bptt_explicit(mdl, cache, ybar, want_params=True, want_inputs=False):
    """Adjoint pass of the explicit recursion.

    ybar is d(loss)/d(y) with shape (T, p). Returns (grads, ugrad) where
    grads maps the explicit block names to accumulated gradients (None when
    want_params is False) and ugrad is d(loss)/d(u) or None.
    """
    u, x, v, w = cache["u"], cache["x"], cache["v"], cache["w"]
    T = u.shape[0]
    slopes = activation_slope(mdl.activation, v)
    pre_w = ybar @ mdl.D11      # D11^T ybar_t rows
    pre_x = ybar @ mdl.C1
    FbarT = mdl.Fbar.T
    B1barT = mdl.B1bar.T
    C2barT = mdl.C2bar.T
    xbar = np.zeros(mdl.n)
    xbar_next = np.empty((T, mdl.n))   # adjoint of x_{t+1} at each step
    vbar = np.empty((T, mdl.q))
    for t in range(T - 1, -1, -1):
        xbar_next[t] = xbar
        vb = slopes[t] * (pre_w[t] + B1barT @ xbar)
        vbar[t] = vb
        xbar = FbarT @ xbar + pre_x[t] + C2barT @ vb
    g = None
    if want_params:
        xs = x[:-1]
        g = {"Fbar": xbar_next.T @ xs, "B1bar": xbar_next.T @ w,
             "B2bar": xbar_next.T @ u,
             "C1": ybar.T @ xs, "D11": ybar.T @ w, "D12": ybar.T @ u,
             "C2bar": vbar.T @ xs, "bbar": vbar.sum(axis=0),
             "D22bar": vbar.T @ u}
    ugrad = None
    if want_inputs:
        ugrad = xbar_next @ mdl.B2bar + ybar @ mdl.D12 + vbar @ mdl.D22bar
    return g, ugrad


def _bptt_lstm(mdl, cache, ybar, want_params=True, want_inputs=False):
    u, h, c = cache["u"], cache["h"], cache["c"]
    gi, gf, gg, go, tc = (cache[k] for k in ("gi", "gf", "gg", "go", "tc"))
    T = u.shape[0]
    n = mdl.n
    pre_h = ybar @ mdl.C       # C^T ybar_t rows (y_t reads h_{t+1})
    WxiT, WxfT, WxgT, WxoT = mdl.Wxi.T, mdl.Wxf.T, mdl.Wxg.T, mdl.Wxo.T
    hbar = np.zeros(n)
    cbar = np.zeros(n)
    Zi = np.empty((T, n))
    Zf = np.empty((T, n))
    Zg = np.empty((T, n))
    Zo = np.empty((T, n))
    for t in range(T - 1, -1, -1):
        hb = hbar + pre_h[t]
        ob = hb * tc[t]
        cb = cbar + hb * go[t] * (1.0 - tc[t] * tc[t])
        Zi[t] = cb * gg[t] * gi[t] * (1.0 - gi[t])
        Zf[t] = cb * c[t] * gf[t] * (1.0 - gf[t])
        Zg[t] = cb * gi[t] * (1.0 - gg[t] * gg[t])
        Zo[t] = ob * go[t] * (1.0 - go[t])
        cbar = cb * gf[t]
        hbar = WxiT @ Zi[t] + WxfT @ Zf[t] + WxgT @ Zg[t] + WxoT @ Zo[t]
    g = None
    if want_params:
        hs = h[:-1]
        g = {"Wxi": Zi.T @ hs, "Wii": Zi.T @ u, "bi": Zi.sum(axis=0),
             "Wxf": Zf.T @ hs, "Wif": Zf.T @ u, "bf": Zf.sum(axis=0),
             "Wxg": Zg.T @ hs, "Wig": Zg.T @ u, "bg": Zg.sum(axis=0),
             "Wxo": Zo.T @ hs, "Wio": Zo.T @ u, "bo": Zo.sum(axis=0),
             "C": ybar.T @ h[1:], "D": ybar.T @ u}
    ugrad = None
    if want_inputs:
        ugrad = (Zi @ mdl.Wii + Zf @ mdl.Wif + Zg @ mdl.Wig + Zo @ mdl.Wio +
                 ybar @ mdl.D)
    return g, ugrad


def simulate_with_gradients(model, u, x0=None):
    """Forward simulate and return (y, vjp) where vjp(ybar, want_inputs)
    backpropagates an output adjoint to input (and optionally parameter)
    gradients. Used by both the training loop and the gain attack."""
    mdl = models.as_simulable(model)
    if isinstance(mdl, Lstm):
        cache = lstm_forward(mdl, u, x0)

        def vjp(ybar, want_params=False, want_inputs=True):
            return _bptt_lstm(mdl, cache, ybar, want_params, want_inputs)

        return cache["y"], vjp
    cache = explicit_forward(mdl, u, x0)

    def vjp(ybar, want_params=False, want_inputs=True):
        return _bptt_explicit(mdl, cache, ybar, want_params, want_inputs)

    return cache["y"], vjp


# ---------------------------------------------------------------------------
# Objective pieces.

def sim_loss(model, batch):
    """Squared l2 output error over the batch, simulated from zero state."""
    y, _ = models.simulate(model, batch.u)
    err = batch.y - y
    val = float(np.sum(err * err))
    if not np.isfinite(val):
        raise FloatingPointError("simulation loss is not finite")
    return val


def _lam_of(trainable):
    if isinstance(trainable, CertifiedBundle) and trainable.kind != "cirnn-contraction":
        return trainable.theta.lam
    return None


def barrier_value(trainable, alpha):
    """alpha-weighted barrier: -alpha log det(LMI) - alpha sum(log lam).

    Zero for unconstrained baselines. Raises off the strictly feasible set.
    """
    if alpha == 0.0 or not isinstance(trainable, CertifiedBundle):
        return 0.0
    rep = cholesky_logdet(certificates.assemble_lmi(trainable))
    if not rep.is_pd:
        raise NotPositiveDefiniteError("bundle left the feasible set")
    val = -alpha * rep.logdet
    lam = _lam_of(trainable)
    if lam is not None:
        if np.any(lam <= 0):
            raise NotPositiveDefiniteError("multipliers left the positive orthant")
        val -= alpha * float(np.sum(np.log(lam)))
    return val


def barrier_objective(trainable, batch, alpha):
    """Fit plus barrier: sim_loss + alpha*(-log det LMI - sum log lam)."""
    return sim_loss(trainable, batch) + barrier_value(trainable, alpha)


# Chain explicit-block gradients back to each model's own decision variables.

def _chain_robust(theta, eg):
    Einv = la.inv(theta.E)
    ex = to_explicit(theta)
    lam_col = theta.lam[:, None]
    gF = Einv.T @ eg["Fbar"]
    gB1 = Einv.T @ eg["B1bar"]
    gB2 = Einv.T @ eg["B2bar"]
    gE = -Einv.T @ (eg["Fbar"] @ ex.Fbar.T + eg["B1bar"] @ ex.B1bar.T +
                    eg["B2bar"] @ ex.B2bar.T)
    glam = -(np.sum(eg["C2bar"] * ex.C2bar, axis=1) +
             np.sum(eg["D22bar"] * ex.D22bar, axis=1) +
             eg["bbar"] * ex.bbar) / theta.lam
    return {
        "E": gE, "F": gF, "B1": gB1, "B2": gB2,
        "C1": eg["C1"], "D11": eg["D11"], "D12": eg["D12"],
        "lam": glam, "C2": eg["C2bar"] / lam_col, "b": eg["bbar"] / theta.lam,
        "D22": eg["D22bar"] / lam_col,
    }


def _sim_loss_and_grads(trainable, batch):
    """Loss plus gradients w.r.t. the trainable's decision variables."""
    if isinstance(trainable, CertifiedBundle):
        inner = trainable.theta
    else:
        inner = trainable

    if isinstance(inner, models.ImplicitParams):
        ex = to_explicit(inner)
        cache = explicit_forward(ex, batch.u)
    elif isinstance(inner, (Elman, CiRnn, SRnn)):
        ex = baseline_to_explicit(inner)
        cache = explicit_forward(ex, batch.u)
    elif isinstance(inner, Lstm):
        cache = lstm_forward(inner, batch.u)
    else:
        raise TypeError(f"{type(inner).__name__} is not trainable")

    err = cache["y"] - batch.y
    loss = float(np.sum(err * err))
    if not np.isfinite(loss):
        raise FloatingPointError("simulation loss is not finite")
    ybar = 2.0 * err

    if isinstance(inner, Lstm):
        g, _ = _bptt_lstm(inner, cache, ybar, want_params=True)
        return loss, g

    eg, _ = _bptt_explicit(ex, cache, ybar, want_params=True)

    if isinstance(inner, models.ImplicitParams):
        grads = _chain_robust(inner, eg)
        grads["P"] = np.zeros_like(trainable.P)
        return loss, grads
    if isinstance(inner, Elman):
        return loss, {"A": eg["C2bar"], "B": eg["D22bar"], "b": eg["bbar"],
                      "C": eg["C1"], "D": eg["D12"]}
    # ci-RNN / s-RNN: explicit B1bar is inv(E); F, B, b feed the activation
    grads = {"F": eg["C2bar"], "B": eg["D22bar"], "b": eg["bbar"],
             "C": eg["C1"], "D": eg["D12"],
             "P_diag": np.zeros(trainable.P.shape[0])}
    if isinstance(inner, CiRnn):
        Einv = la.inv(inner.E)
        grads["E"] = -Einv.T @ eg["B1bar"] @ Einv.T
    return loss, grads


def gradient(trainable, batch, alpha):
    """Exact flat gradient of barrier_objective over all decision variables."""
    loss, grads = _sim_loss_and_grads(trainable, batch)
    if isinstance(trainable, CertifiedBundle) and alpha != 0.0:
        _, bg = certificates.neg_logdet_and_gradients(trainable)
        for k, v in bg.items():
            grads[k] = grads.get(k, 0.0) + alpha * v
        lam = _lam_of(trainable)
        if lam is not None:
            grads["lam"] = grads["lam"] - alpha / lam
    return _flatten_grads(trainable, grads)


def objective_and_gradient(trainable, batch, alpha):
    loss, grads = _sim_loss_and_grads(trainable, batch)
    total = loss
    if isinstance(trainable, CertifiedBundle) and alpha != 0.0:
        val, bg = certificates.neg_logdet_and_gradients(trainable)
        total += alpha * val
        for k, v in bg.items():
            grads[k] = grads.get(k, 0.0) + alpha * v
        lam = _lam_of(trainable)
        if lam is not None:
            total += -alpha * float(np.sum(np.log(lam)))
            grads["lam"] = grads["lam"] - alpha / lam
    return total, loss, _flatten_grads(trainable, grads)


# ---------------------------------------------------------------------------
# The training loop.

def _margin_of(trainable):
    if isinstance(trainable, CertifiedBundle):
        return feasibility_margin(trainable)
    return None


def _is_feasible(trainable):
    rep = _margin_of(trainable)
    return True if rep is None else rep.feasible


def train(trainable0, dataset, config: TrainConfig, log=None):
    """Fit by stochastic gradient steps with feasibility-preserving
    backtracking and the patience schedule.

    dataset needs .train (list of SeqBatch) and .val (SeqBatch). Returns
    (best trainable by validation NSE, TrainHistory). Every accepted iterate
    of a certified bundle is strictly feasible; steps that cannot be made
    feasible within max_backtracks are rejected (counted, not fatal).
    """
    from .evaluation import nse  # deferred: evaluation imports this module

    if not dataset.train:
        raise ValueError("need at least one training batch")
    if not _is_feasible(trainable0):
        raise ValueError("initial parameters are not strictly feasible")

    def val_nse(mdl):
        y, _ = models.simulate(mdl, dataset.val.u)
        return nse(y, dataset.val.y)

    current = trainable0
    vec = flatten_params(current)
    mom1 = np.zeros_like(vec)
    mom2 = np.zeros_like(vec)
    steps = 0
    lr = config.lr0
    alpha = config.alpha0
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()

    rep0 = _margin_of(current)
    margin0 = rep0.lmi_margin if rep0 is not None else float("inf")
    nse0 = val_nse(current)
    loss0 = float(np.mean([sim_loss(current, b) for b in dataset.train]))
    history.records.append(EpochRecord(0, loss0, nse0, alpha, lr, margin0, 0.0))
    if log:
        log(history.records[-1])

    best = current
    best_nse = nse0
    stall = 0
    epoch = 0
    while True:
        epoch += 1
        tic = time.perf_counter()
        order = rng.permutation(len(dataset.train))
        losses = []
        min_margin = float("inf")
        for bi in order:
            batch = dataset.train[bi]
            _, loss, grad = objective_and_gradient(current, batch, alpha)
            losses.append(loss)
            steps += 1
            mom1 = config.adam_beta1 * mom1 + (1 - config.adam_beta1) * grad
            mom2 = config.adam_beta2 * mom2 + (1 - config.adam_beta2) * grad * grad
            mhat = mom1 / (1 - config.adam_beta1 ** steps)
            vhat = mom2 / (1 - config.adam_beta2 ** steps)
            delta = -lr * mhat / (np.sqrt(vhat) + config.adam_eps)
            accepted = None
            scale = 1.0
            for _ in range(config.max_backtracks + 1):
                cand = unflatten_params(current, vec + scale * delta)
                if _is_feasible(cand):
                    accepted = cand
                    vec = vec + scale * delta
                    break
                scale *= 0.5
            if accepted is None:
                history.rejected_steps += 1
                continue
            current = accepted
            rep = _margin_of(current)
            if rep is not None:
                if not rep.feasible:  # backtracking guarantees this
                    raise RuntimeError("accepted an infeasible step")
                min_margin = min(min_margin, rep.lmi_margin)
        vnse = val_nse(current)
        record = EpochRecord(
            epoch, float(np.mean(losses)), vnse, alpha, lr,
            min_margin if np.isfinite(min_margin) else float("inf"),
            time.perf_counter() - tic)
        history.records.append(record)
        if log:
            log(record)

        if vnse < best_nse:
            best, best_nse, stall = current, vnse, 0
        else:
            stall += 1
        if stall >= config.patience:
            lr *= config.lr_decay
            alpha *= config.alpha_decay
            current = best
            vec = flatten_params(current)
            stall = 0
            if alpha < config.alpha_final:
                break
        if config.max_epochs is not None and epoch >= config.max_epochs:
            break
    return best, history
