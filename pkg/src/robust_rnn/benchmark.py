"""Benchmark data machinery: a chain of four nonlinear mass-spring-dampers
driven by a piecewise-constant random force, integrated with fixed-step RK4,
sampled at 5 Hz, with measurement noise at a configured SNR.

Topology: spring/damper i connects mass i to mass i-1 (mass 1 to the wall),
the external force acts on mass 1, and the measured output is the position
of mass 4. The springs share the piecewise-linear force profile
k_i * Gamma(d) with a soft central segment.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .models import SeqBatch


def pmap(fn, argtuples, workers=1):
    """Map fn over argument tuples, optionally on a process pool.

    Results keep submission order, so parallel output is identical to the
    sequential one as long as each item seeds its own randomness.
    """
    argtuples = list(argtuples)
    if workers <= 1 or len(argtuples) <= 1:
        return [fn(*a) for a in argtuples]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(fn, *a) for a in argtuples]
        return [f.result() for f in futures]

DEFAULT_MASSES = (0.25, 1.0 / 3.0, 5.0 / 12.0, 0.5)
DEFAULT_DAMPERS = (0.25, 1.0 / 3.0, 5.0 / 12.0, 0.5)
DEFAULT_SPRINGS = (1.0, 5.0 / 6.0, 2.0 / 3.0, 0.5)


@dataclass(frozen=True)
class MsdConfig:
    masses: tuple = DEFAULT_MASSES
    dampers: tuple = DEFAULT_DAMPERS
    springs: tuple = DEFAULT_SPRINGS
    sample_rate: float = 5.0      # Hz
    dt_integrator: float = 0.01   # s, must divide the sample interval exactly

    def __post_init__(self):
        if min(self.masses) <= 0 or min(self.springs) <= 0:
            raise ValueError("masses and spring constants must be positive")
        if min(self.dampers) < 0:
            raise ValueError("damping coefficients must be nonnegative")
        if self.substeps * self.dt_integrator != 1.0 / self.sample_rate:
            raise ValueError("integrator step must divide the sample interval")

    @property
    def substeps(self):
        return round(1.0 / (self.sample_rate * self.dt_integrator))

    @property
    def dt_sample(self):
        return 1.0 / self.sample_rate


@dataclass(frozen=True)
class SignalConfig:
    """Piecewise-constant excitation: hold times ~ U(0, tau), levels ~ N(0, sigma_u^2)."""

    tau: float = 20.0
    sigma_u: float = 3.0
    T: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0 or self.T < 1 or self.sigma_u < 0:
            raise ValueError("need tau > 0, sigma_u >= 0, T >= 1")


@dataclass(frozen=True)
class SplitConfig:
    """Dataset shape. Defaults reproduce the benchmark recipe at full scale;
    shrink for desk-scale runs."""

    n_train: int = 100
    train_len: int = 1000
    val_len: int = 5000
    test_len: int = 1000
    test_sigmas: tuple = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0)
    test_realizations: int = 30
    sigma_u: float = 3.0
    tau: float = 20.0


@dataclass
class Dataset:
    train: list
    val: SeqBatch
    tests: dict  # sigma_u -> list of SeqBatch


def spring_gamma(d):
    """Piecewise-linear spring profile: d+0.75 for d <= -1, 0.25*d inside
    (-1, 1), d-0.75 for d >= 1 (continuous at the breakpoints)."""
    d = np.asarray(d, dtype=float)
    return np.where(d <= -1.0, d + 0.75,
                    np.where(d >= 1.0, d - 0.75, 0.25 * d))


def spring_potential(d):
    """Antiderivative of spring_gamma with value 0 at d = 0 (for energy audits)."""
    d = np.asarray(d, dtype=float)
    inner = 0.125 * d * d
    outer_pos = 0.5 * d * d - 0.75 * d + 0.375
    outer_neg = 0.5 * d * d + 0.75 * d + 0.375
    return np.where(d <= -1.0, outer_neg, np.where(d >= 1.0, outer_pos, inner))


def msd_derivative(state, force, cfg: MsdConfig):
    """Time derivative of the 8-dim state [positions(4); velocities(4)].

    Broadcasts over leading axes: state (..., 8), force scalar or (...,).
    """
    state = np.asarray(state, dtype=float)
    pos = state[..., 0:4]
    vel = state[..., 4:8]
    m = np.asarray(cfg.masses)
    c = np.asarray(cfg.dampers)
    k = np.asarray(cfg.springs)
    # displacement/velocity of each coupling relative to its left neighbor
    d = np.concatenate([pos[..., :1], np.diff(pos, axis=-1)], axis=-1)
    dv = np.concatenate([vel[..., :1], np.diff(vel, axis=-1)], axis=-1)
    pull = k * spring_gamma(d) + c * dv  # force coupling i exerts on mass i (toward neighbor i-1)
    reaction = np.concatenate([pull[..., 1:], np.zeros_like(pull[..., :1])], axis=-1)
    net = -pull + reaction
    net = net.copy()
    net[..., 0] += np.asarray(force, dtype=float)
    return np.concatenate([vel, net / m], axis=-1)


def _rk4_step(state, force, dt, cfg):
    k1 = msd_derivative(state, force, cfg)
    k2 = msd_derivative(state + 0.5 * dt * k1, force, cfg)
    k3 = msd_derivative(state + 0.5 * dt * k2, force, cfg)
    k4 = msd_derivative(state + dt * k3, force, cfg)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(msd: MsdConfig, force_grid, state0=None):
    """Integrate the chain under a force given on the integrator grid.

    force_grid has shape (K,) or (K, R) for R simultaneous realizations; the
    force is held constant across each step. Returns the state trajectory
    with shape (K+1, 8) or (K+1, R, 8).
    """
    force_grid = np.asarray(force_grid, dtype=float)
    K = force_grid.shape[0]
    batched = force_grid.ndim == 2
    shape = (K + 1, force_grid.shape[1], 8) if batched else (K + 1, 8)
    traj = np.zeros(shape)
    if state0 is not None:
        traj[0] = state0
    dt = msd.dt_integrator
    for j in range(K):
        traj[j + 1] = _rk4_step(traj[j], force_grid[j], dt, msd)
        if not np.all(np.isfinite(traj[j + 1])):
            raise FloatingPointError(
                f"integration blew up at t = {(j + 1) * dt:.3f} s")
    return traj


def input_on_grid(cfg: SignalConfig, msd: MsdConfig, rng=None):
    """Realize the piecewise-constant excitation on the integrator grid.

    Switch times accumulate in continuous time and are quantized to the
    grid; each level is drawn fresh. Returns (K,) with K = T * substeps.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    K = cfg.T * msd.substeps
    duration = K * msd.dt_integrator
    switch_times = []
    values = []
    t = 0.0
    while t < duration:
        t += rng.uniform(0.0, cfg.tau)
        values.append(rng.normal(0.0, cfg.sigma_u))
        switch_times.append(t)
    grid_t = np.arange(K) * msd.dt_integrator
    seg = np.searchsorted(np.asarray(switch_times), grid_t, side="right")
    return np.asarray(values)[seg.clip(max=len(values) - 1)]


def gen_input(cfg: SignalConfig, msd: MsdConfig | None = None):
    """The excitation subsampled at the model sample rate, shape (T, 1)."""
    msd = msd or MsdConfig()
    fine = input_on_grid(cfg, msd)
    return fine[::msd.substeps][:, None]


def _simulate_batch(msd, signal_cfg, rng, snr_db):
    """One (u, y) sequence pair: integrate, sample, add measurement noise."""
    fine = input_on_grid(signal_cfg, msd, rng)
    traj = integrate(msd, fine)
    sub = msd.substeps
    u = fine[::sub][:, None]
    y_clean = traj[sub::sub, 3][:, None]   # mass-4 position at each sample instant
    if snr_db is None or np.isinf(snr_db):
        y = y_clean.copy()
    else:
        rms = float(np.sqrt(np.mean(y_clean ** 2)))
        noise_std = rms * 10.0 ** (-snr_db / 20.0)
        y = y_clean + noise_std * rng.standard_normal(y_clean.shape)
    return u, y


def _batch_seed(master_seed, tag, index):
    return np.random.SeedSequence([int(master_seed), int(tag), int(index)])


def make_batch(msd, splits, snr_db, master_seed, tag, index, sigma_u=None,
               tau=None, length=None):
    """Deterministically generate one batch from (master_seed, tag, index)."""
    sigma = splits.sigma_u if sigma_u is None else sigma_u
    tau = splits.tau if tau is None else tau
    length = splits.train_len if length is None else length
    ss = _batch_seed(master_seed, tag, index)
    rng = np.random.default_rng(ss)
    sig = SignalConfig(tau=tau, sigma_u=sigma, T=length, seed=0)
    u, y = _simulate_batch(msd, sig, rng, snr_db)
    meta = {"seed": int(ss.generate_state(1)[0]), "sigma_u": sigma, "tau": tau}
    return SeqBatch(u=u, y=y, dt=msd.dt_sample, meta=meta)


TAG_TRAIN, TAG_VAL, TAG_TEST = 0, 1, 2


def make_dataset(msd: MsdConfig, splits: SplitConfig, noise_snr_db=30.0,
                 seed=0, workers=1) -> Dataset:
    """Generate train/val/test splits from one master seed.

    Each sequence derives its own seed from (seed, split tag, index), so
    generation is order-independent, reproducible batch by batch, and safe
    to parallelize (workers > 1 uses a process pool).
    """
    train_args = [(msd, splits, noise_snr_db, seed, TAG_TRAIN, i, None, None,
                   splits.train_len) for i in range(splits.n_train)]
    test_args = []
    test_keys = []
    for si, s in enumerate(splits.test_sigmas):
        for r in range(splits.test_realizations):
            test_args.append((msd, splits, noise_snr_db, seed, TAG_TEST,
                              si * 100000 + r, float(s), None,
                              splits.test_len))
            test_keys.append(float(s))
    train = pmap(make_batch, train_args, workers)
    test_batches = pmap(make_batch, test_args, workers)
    val = make_batch(msd, splits, noise_snr_db, seed, TAG_VAL, 0,
                     length=splits.val_len)
    tests = {}
    for key, batch in zip(test_keys, test_batches):
        tests.setdefault(key, []).append(batch)
    return Dataset(train=train, val=val, tests=tests)


# ---------------------------------------------------------------------------
# On-disk format: a directory with manifest.json and one CSV per sequence
# (header t,u,y; 17-significant-digit decimals).

def _write_batch_csv(path, batch: SeqBatch):
    with open(path, "w", newline="") as fh:
        fh.write("t,u,y\n")
        dt = batch.dt
        for k in range(batch.T):
            fh.write("%.17g,%.17g,%.17g\n"
                     % ((k + 1) * dt, batch.u[k, 0], batch.y[k, 0]))


def _read_batch_csv(path, dt, meta):
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    return SeqBatch(u=data[:, 1][:, None], y=data[:, 2][:, None], dt=dt,
                    meta=dict(meta))


def save_dataset(ds: Dataset, directory, msd=None, splits=None,
                 noise_snr_db=None, seed=None):
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "msd": asdict(msd) if msd else None,
        "splits": asdict(splits) if splits else None,
        "noise_snr_db": noise_snr_db,
        "seed": seed,
        "dt": ds.val.dt,
        "train": [],
        "val": None,
        "tests": {},
    }
    for i, b in enumerate(ds.train):
        name = f"train_{i:03d}.csv"
        _write_batch_csv(os.path.join(directory, name), b)
        manifest["train"].append({"file": name, "meta": b.meta})
    _write_batch_csv(os.path.join(directory, "val.csv"), ds.val)
    manifest["val"] = {"file": "val.csv", "meta": ds.val.meta}
    for s, batches in ds.tests.items():
        entries = []
        for r, b in enumerate(batches):
            name = f"test_s{s:g}_r{r:03d}.csv"
            _write_batch_csv(os.path.join(directory, name), b)
            entries.append({"file": name, "meta": b.meta})
        manifest["tests"]["%g" % s] = entries
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> Dataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    dt = manifest["dt"]
    train = [_read_batch_csv(os.path.join(directory, e["file"]), dt, e["meta"])
             for e in manifest["train"]]
    val = _read_batch_csv(os.path.join(directory, manifest["val"]["file"]),
                          dt, manifest["val"]["meta"])
    tests = {}
    for s, entries in manifest["tests"].items():
        tests[float(s)] = [
            _read_batch_csv(os.path.join(directory, e["file"]), dt, e["meta"])
            for e in entries]
    return Dataset(train=train, val=val, tests=tests)
