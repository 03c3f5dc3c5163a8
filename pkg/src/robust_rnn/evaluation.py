"""Model quality and robustness metrics: normalized simulation error, a
gradient-ascent lower bound on the sequence-map Lipschitz constant, and
empirical incremental-gain / contraction trials for certified bundles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import benchmark, certificates, models, training
from .certificates import CertifiedBundle, storage_matrix


def nse(y, ytilde):
    """Normalized simulation error ||ytilde - y|| / ||ytilde|| (l2 over the
    whole sequence)."""
    y = np.asarray(y, float)
    ytilde = np.asarray(ytilde, float)
    if y.shape != ytilde.shape:
        raise ValueError("shape mismatch")
    denom = float(np.linalg.norm(ytilde))
    if denom == 0.0:
        raise ValueError("reference output has zero norm")
    return float(np.linalg.norm(ytilde - y)) / denom


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 500
    step_size: float = 0.01
    restarts: int = 5
    init_std: float = 1e-3
    horizon: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.iterations, self.restarts, self.horizon) < 1:
            raise ValueError("iterations, restarts, horizon must be >= 1")
        if self.step_size <= 0 or self.init_std <= 0:
            raise ValueError("step_size and init_std must be positive")


@dataclass
class RobustnessReport:
    """gamma_hat is the observed lower bound (max over restarts); gamma_cert,
    when present, is the certified upper bound and must dominate it."""

    gamma_hat: float
    gamma_cert: float | None = None
    per_restart: list = field(default_factory=list)

    def to_dict(self):
        return {"gamma_hat": self.gamma_hat, "gamma_cert": self.gamma_cert,
                "per_restart": self.per_restart}


def _adam_ascent_state(shape):
    return {"m": np.zeros(shape), "v": np.zeros(shape), "t": 0}


def _adam_ascend(state, grad, lr, b1=0.9, b2=0.999, eps=1e-8):
    state["t"] += 1
    state["m"] = b1 * state["m"] + (1 - b1) * grad
    state["v"] = b2 * state["v"] + (1 - b2) * grad * grad
    mhat = state["m"] / (1 - b1 ** state["t"])
    vhat = state["v"] / (1 - b2 ** state["t"])
    return lr * mhat / (np.sqrt(vhat) + eps)


_UNDERFLOW = 1e-24  # on ||u-v||^2, far below any meaningful perturbation


def lipschitz_attack(model, cfg: AttackConfig = AttackConfig(),
                     msd: benchmark.MsdConfig | None = None) -> RobustnessReport:
    """Gradient-ascent lower bound on the incremental gain of the model's
    sequence-to-sequence map (zero initial state).

    Per restart: a base input is drawn from the test excitation distribution
    (sigma_u = 3, tau = 20), its pair starts at a small Gaussian offset, and
    ADAM ascends log||S(u) - S(v)|| - log||u - v|| over both sequences.
    The report keeps the best raw ratio ever observed.
    """
    msd = msd or benchmark.MsdConfig()
    m_in = models.as_simulable(model)
    m_dim = m_in.m if not isinstance(m_in, models.Lstm) else m_in.Wii.shape[1]
    best = 0.0
    per_restart = []
    for r in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), r]))
        sig = benchmark.SignalConfig(tau=20.0, sigma_u=3.0, T=cfg.horizon,
                                     seed=0)
        base = benchmark.input_on_grid(sig, msd, rng)[::msd.substeps]
        u = np.tile(base[:, None], (1, m_dim))
        v = u + cfg.init_std * rng.standard_normal(u.shape)
        state_u = _adam_ascent_state(u.shape)
        state_v = _adam_ascent_state(v.shape)
        restart_best = 0.0
        reinflations = 0

        def reinflate():
            # escalating scale so repeated underflows always escape
            std = max(cfg.init_std, 1e-8) * (2.0 ** reinflations)
            return u + std * rng.standard_normal(u.shape)

        for _ in range(cfg.iterations):
            du = u - v
            du_norm2 = float(np.sum(du * du))
            if du_norm2 < _UNDERFLOW:
                v = reinflate()
                reinflations += 1
                continue
            yu, vjp_u = training.simulate_with_gradients(model, u)
            yv, vjp_v = training.simulate_with_gradients(model, v)
            dy = yu - yv
            dy_norm2 = float(np.sum(dy * dy))
            ratio = np.sqrt(dy_norm2 / du_norm2)
            restart_best = max(restart_best, ratio)
            if dy_norm2 <= 0.0:
                v = reinflate()
                reinflations += 1
                continue
            _, gu_sim = vjp_u(dy / dy_norm2, want_inputs=True)
            _, gv_sim = vjp_v(-dy / dy_norm2, want_inputs=True)
            gu = gu_sim - du / du_norm2
            gv = gv_sim + du / du_norm2
            u = u + _adam_ascend(state_u, gu, cfg.step_size)
            v = v + _adam_ascend(state_v, gv, cfg.step_size)
        # score the final iterate too
        du = u - v
        du_norm2 = float(np.sum(du * du))
        if du_norm2 >= _UNDERFLOW:
            yu, _ = models.simulate(model, u)
            yv, _ = models.simulate(model, v)
            ratio = float(np.linalg.norm(yu - yv) / np.sqrt(du_norm2))
            restart_best = max(restart_best, ratio)
        per_restart.append({"ratio": restart_best, "reinflations": reinflations})
        best = max(best, restart_best)
    return RobustnessReport(gamma_hat=float(best), per_restart=per_restart)


def gain_trial(bundle: CertifiedBundle, gamma, trials=100, seed=0,
               horizon=500, input_std=3.0, state_std=1.0):
    """Empirically verify the incremental l2-gain inequality
    ||dy||_T^2 <= gamma^2 ||du||_T^2 + gamma*V0 at every prefix horizon T,
    where V0 is the storage function of the initial-state difference.

    Returns (worst ratio over trials and prefixes, per-trial ratios). A
    certified bundle keeps the worst ratio <= 1.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    Vmat = storage_matrix(bundle)
    n = Vmat.shape[0]
    mdl = models.as_simulable(bundle)
    m = mdl.m
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(trials):
        x0a = state_std * rng.standard_normal(n)
        x0b = state_std * rng.standard_normal(n)
        ua = input_std * rng.standard_normal((horizon, m))
        ub = ua + input_std * rng.standard_normal((horizon, m))
        ya, _ = models.simulate(mdl, ua, x0a)
        yb, _ = models.simulate(mdl, ub, x0b)
        dx0 = x0a - x0b
        v0 = float(dx0 @ Vmat @ dx0)
        dy2 = np.cumsum(np.sum((ya - yb) ** 2, axis=1))
        du2 = np.cumsum(np.sum((ua - ub) ** 2, axis=1))
        denom = gamma ** 2 * du2 + gamma * v0
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(denom > 0.0, dy2 / denom, 0.0)
        ratios.append(float(np.max(r)) if r.size else 0.0)
    return (max(ratios), ratios) if ratios else (0.0, [])


def contraction_trial(bundle: CertifiedBundle, trials=50, horizon=200, seed=0,
                      input_std=3.0, state_std=1.0, floor=1e-20):
    """Measure the one-step decay of the storage function V along pairs of
    trajectories sharing the input but starting apart.

    Returns (max over trials of max_t V_{t+1}/V_t for V_t > floor, per-trial
    maxima). Certified dynamics keep this strictly below 1.
    """
    Vmat = storage_matrix(bundle)
    n = Vmat.shape[0]
    mdl = models.as_simulable(bundle)
    m = mdl.m
    rng = np.random.default_rng(seed)
    per_trial = []
    for _ in range(trials):
        x0a = state_std * rng.standard_normal(n)
        x0b = state_std * rng.standard_normal(n)
        while np.allclose(x0a, x0b):
            x0b = state_std * rng.standard_normal(n)
        u = input_std * rng.standard_normal((horizon, m))
        _, xa = models.simulate(mdl, u, x0a)
        _, xb = models.simulate(mdl, u, x0b)
        dx = xa - xb
        V = np.einsum("ti,ij,tj->t", dx, Vmat, dx)
        valid = V[:-1] > floor
        if not np.any(valid):
            per_trial.append(0.0)
            continue
        per_trial.append(float(np.max(V[1:][valid] / V[:-1][valid])))
    return (max(per_trial), per_trial) if per_trial else (0.0, [])


def _sweep_cell(named_models, msd, splits, snr_db, seed, si, sigma, r, length):
    batch = benchmark.make_batch(msd, splits, snr_db, seed,
                                 benchmark.TAG_TEST, si * 100000 + r,
                                 sigma_u=sigma, length=length)
    out = []
    for name, model in named_models.items():
        y, _ = models.simulate(model, batch.u)
        out.append((name, sigma, r, nse(y, batch.y)))
    return out


def nse_sweep(named_models, sigmas, realizations, msd=None, length=1000,
              tau=20.0, snr_db=30.0, seed=0, workers=1):
    """NSE of each model over fresh test realizations per excitation level.

    Returns rows (model, sigma_u, realization, nse). All models see the same
    realizations, which derive from (seed, sigma index, realization index),
    so results are independent of worker count and ordering.
    """
    msd = msd or benchmark.MsdConfig()
    splits = benchmark.SplitConfig(test_len=length, tau=tau)
    cells = [(named_models, msd, splits, snr_db, seed, si, float(s), r, length)
             for si, s in enumerate(sigmas) for r in range(realizations)]
    rows = []
    for out in benchmark.pmap(_sweep_cell, cells, workers):
        rows.extend(out)
    return rows
