import numpy as np
import pytest

from robust_rnn import certificates, evaluation
from robust_rnn.certificates import bisect_gamma, embed_lti
from robust_rnn.evaluation import (AttackConfig, contraction_trial,
                                   gain_trial, lipschitz_attack, nse,
                                   nse_sweep)
from robust_rnn.models import ExplicitModel, init_feasible


def static_gain(c):
    z = np.zeros((1, 1))
    return ExplicitModel(Fbar=z.copy(), B1bar=z.copy(), B2bar=z.copy(),
                         C1=z.copy(), D11=z.copy(), D12=np.array([[c]]),
                         C2bar=z.copy(), bbar=np.zeros(1), D22bar=z.copy())


def test_nse_examples():
    y = np.array([[1.0], [2.0], [-1.0]])
    assert nse(y, y) == 0.0
    assert nse(np.zeros_like(y), y) == pytest.approx(1.0)
    assert nse(2.0 * y, y) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        nse(y, np.zeros_like(y))
    with pytest.raises(ValueError):
        nse(y, y[:2])


def test_nse_scale_aware():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(40, 2))
    for c in (0.5, 1.3, -2.0):
        assert nse(c * y, y) == pytest.approx(abs(c - 1.0), rel=1e-12)


def test_gain_trial_guard_and_certified():
    bundle = init_feasible("robust-gamma", {"n": 3, "m": 1, "p": 1},
                           gamma=3.0, seed=0)
    worst, ratios = gain_trial(bundle, bundle.gamma, trials=0)
    assert worst == 0.0 and ratios == []
    worst, ratios = gain_trial(bundle, bundle.gamma, trials=100, seed=1,
                               horizon=200)
    assert len(ratios) == 100
    assert worst <= 1.0


def test_gain_trial_identical_pair_is_zero():
    bundle = init_feasible("robust-gamma", {"n": 2, "m": 1, "p": 1},
                           gamma=2.0, seed=1)
    worst, _ = gain_trial(bundle, bundle.gamma, trials=5, seed=2,
                          horizon=50, input_std=0.0, state_std=0.0)
    assert worst == 0.0


def test_gain_trial_negative_control():
    # corrupting the input map after certification must break the bound
    from dataclasses import replace

    bundle = embed_lti([[0.5]], [[1.0]], [[1.0]], [[0.0]])
    gamma = bisect_gamma(bundle, lo=0.5, hi=50.0, tol=1e-3)  # ~2 (true gain)
    ok, _ = gain_trial(bundle, gamma, trials=50, seed=3, horizon=200)
    assert ok <= 1.0
    corrupt = replace(bundle,
                      theta=replace(bundle.theta, B2=10.0 * bundle.theta.B2))
    bad, _ = gain_trial(corrupt, gamma, trials=50, seed=3, horizon=200)
    assert bad > 1.0


def test_contraction_trial_certified():
    for kind, gamma in (("robust-star", None), ("robust-gamma", 3.0)):
        bundle = init_feasible(kind, {"n": 4, "m": 1, "p": 1}, gamma=gamma,
                               seed=2)
        worst, per = contraction_trial(bundle, trials=20, horizon=100, seed=4)
        assert len(per) == 20
        assert worst < 1.0


def test_contraction_trial_one_step_deadbeat():
    # F = 0 and B1 = 0 make the state difference vanish after one step
    from dataclasses import replace

    bundle = init_feasible("robust-star", {"n": 3, "m": 1, "p": 1}, seed=3)
    theta = replace(bundle.theta, F=np.zeros((3, 3)), B1=np.zeros((3, 3)),
                    C2=np.zeros((3, 3)))
    deadbeat = replace(bundle, theta=theta)
    assert certificates.feasibility_margin(deadbeat).feasible
    worst, _ = contraction_trial(deadbeat, trials=5, horizon=20, seed=5)
    assert worst == 0.0


def test_contraction_trial_lti_rate():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((4, 4))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    bundle = embed_lti(A, rng.standard_normal((4, 1)),
                       rng.standard_normal((1, 4)), np.zeros((1, 1)))
    worst, _ = contraction_trial(bundle, trials=20, horizon=100, seed=6)
    # in the P-metric the decrement V+ = V - |dx|^2 <= (1 - 1/lmax(P)) V
    P = bundle.P
    bound = 1.0 - 1.0 / max(np.linalg.eigvalsh(P))
    assert worst < 1.0
    assert worst <= bound + 1e-9


def test_attack_static_gain_exact():
    cfg = AttackConfig(iterations=3, restarts=1, horizon=50, seed=0)
    rep = lipschitz_attack(static_gain(2.0), cfg)
    assert rep.gamma_hat == pytest.approx(2.0, rel=1e-12)


def test_attack_lti_sanity_small():
    bundle = embed_lti([[0.5]], [[1.0]], [[1.0]], [[0.0]])
    cfg = AttackConfig(iterations=150, restarts=2, horizon=200, seed=1)
    rep = lipschitz_attack(bundle, cfg)
    assert rep.gamma_hat >= 1.7   # true incremental gain is 2
    assert rep.gamma_hat <= 2.0 + 1e-9
    assert len(rep.per_restart) == 2


def test_attack_never_exceeds_certificate():
    bundle = init_feasible("robust-gamma", {"n": 3, "m": 1, "p": 1},
                           gamma=2.0, seed=5)
    cert = bisect_gamma(bundle, lo=1e-4, hi=2.0, tol=1e-3)
    cfg = AttackConfig(iterations=120, restarts=2, horizon=200, seed=2)
    rep = lipschitz_attack(bundle, cfg)
    assert rep.gamma_hat <= cert + 1e-6
    assert rep.gamma_hat <= bundle.gamma + 1e-6


def test_attack_reinflates_identical_pair():
    # u == v exactly would give 0/0; the attack re-inflates and records it
    cfg = AttackConfig(iterations=5, restarts=1, horizon=20, seed=3,
                       init_std=1e-300)
    rep = lipschitz_attack(static_gain(1.5), cfg)
    assert rep.per_restart[0]["reinflations"] >= 1
    assert rep.gamma_hat == pytest.approx(1.5, rel=1e-9)


def test_nse_sweep_rows_and_workers():
    models_named = {
        "a": init_feasible("robust-star", {"n": 2, "m": 1, "p": 1}, seed=0),
        "b": init_feasible("rnn", {"n": 2, "m": 1, "p": 1}, seed=1),
    }
    rows = nse_sweep(models_named, sigmas=[1.0, 3.0], realizations=2,
                     length=80, seed=7)
    assert len(rows) == 2 * 2 * 2
    names = {r[0] for r in rows}
    assert names == {"a", "b"}
    rows_par = nse_sweep(models_named, sigmas=[1.0, 3.0], realizations=2,
                         length=80, seed=7, workers=2)
    assert rows == rows_par
