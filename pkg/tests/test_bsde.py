import numpy as np
import pytest

from quadhedge.bsde import (BsdeDivergence, BsdeSpec, FeatureScaler, SolverConfig, build_nets, loss_and_grads,
                            roll_forward, train)
from quadhedge.market import HestonParams, simulate
from quadhedge.mvh import bsre_spec


def zero_driver(n, aux, y, z):
    return np.zeros_like(y), np.zeros_like(y), np.zeros_like(z)


def const_spec(c):
    return BsdeSpec("const", zero_driver, lambda paths: np.full(paths.batch_size, c))


def _nets(p, N, zero=True, seed=0):
    cfg = SolverConfig(n_steps=N, zero_output_layer=zero)
    return build_nets(p.m, N, cfg, np.random.default_rng(seed))


def test_constant_roll(table1_m2):
    pb = simulate(table1_m2, 8, 50, 0, "P")
    nets = _nets(table1_m2, 8)
    for b in nets.biases:
        b[...] = 0
    Y, Z, _ = roll_forward(const_spec(1.0), pb, nets, 0.7, np.zeros(4), FeatureScaler.fit(pb))
    assert np.all(Y == 0.7) and np.all(Z == 0)


def test_telescoping_constant_controls(table1_m2):
    pb = simulate(table1_m2, 8, 50, 1, "P")
    c = np.array([0.3, -1.0, 2.0, 0.5])
    ctrl = np.broadcast_to(c, (7, 50, 4))
    Y, _, _ = roll_forward(const_spec(0.0), pb, None, 1.5, c, controls=ctrl)
    expected = 1.5 + pb.increments.sum(axis=1) @ c
    assert np.allclose(Y[:, -1], expected, atol=1e-12)


def test_linear_driver_closed_form(table1_m2):
    pb = simulate(table1_m2, 10, 40, 2, "P")
    phi = np.array([0.02, 0.05, 0.0, 0.0])
    c = np.array([1.0, -2.0, 0.5, 3.0])

    def drv(n, aux, y, z):
        return -(z @ phi), np.zeros_like(y), np.broadcast_to(-phi, z.shape)

    ctrl = np.broadcast_to(c, (9, 40, 4))
    Y, _, _ = roll_forward(BsdeSpec("lin", drv, lambda p: np.zeros(p.batch_size)), pb, None, 0.2, c, controls=ctrl)
    expected = 0.2 + pb.increments.sum(axis=1) @ c + (c @ phi) * 1.0
    assert np.max(np.abs(Y[:, -1] - expected)) < 1e-12


def test_nan_aborts_with_step_index(table1):
    pb = simulate(table1, 6, 10, 0, "P")

    def drv(n, aux, y, z):
        h = np.full_like(y, np.nan if n == 2 else 0.0)
        return h, np.zeros_like(y), np.zeros_like(z)

    with pytest.raises(FloatingPointError, match="step 3"):
        roll_forward(BsdeSpec("bad", drv, lambda p: np.zeros(p.batch_size)), pb, None, 0.0, np.zeros(2),
                     controls=np.zeros((5, 10, 2)))


def test_martingale_sum_property(table1_m2):
    pb = simulate(table1_m2, 10, 10_000, 5, "P")
    nets = _nets(table1_m2, 10, zero=False, seed=3)
    Y, _, _ = roll_forward(const_spec(0.0), pb, nets, 0.0, np.array([0.1, 0.2, -0.3, 0.4]), FeatureScaler.fit(pb))
    d = Y[:, -1] - Y[:, 0]
    assert abs(d.mean()) < 4 * d.std(ddof=1) / np.sqrt(d.size)


def test_constant_target_training(table1):
    cfg = SolverConfig(n_steps=5, iterations=2000, partial=1000, eval_batch=10_000)
    res = train(const_spec(3.0), table1, cfg, seed=1)
    assert res.y0 == pytest.approx(3.0, abs=1e-3)
    assert res.eval_loss < 1e-6
    assert len(res.loss_trace) == 2000
    assert np.log10(res.loss_trace[-100:].mean()) < -6


def test_bsre_zero_mu_trains_to_one():
    p = HestonParams.table1(1, mu_bar=[0.0])
    cfg = SolverConfig(n_steps=10, iterations=2000, partial=1000, control_scale=0.01)
    res = train(bsre_spec(p), p, cfg, seed=0)
    assert res.y0 == pytest.approx(1.0, abs=1e-3)
    assert res.eval_loss < 1e-6


def test_reproducible_bitwise(table1):
    cfg = SolverConfig(n_steps=5, iterations=60, partial=30, eval_batch=512)
    a = train(bsre_spec(table1), table1, cfg, seed=4)
    b = train(bsre_spec(table1), table1, cfg, seed=4)
    assert a.y0 == b.y0 and np.array_equal(a.loss_trace, b.loss_trace) and np.array_equal(a.Y, b.Y)
    c = train(bsre_spec(table1), table1, cfg, seed=5)
    assert c.y0 != a.y0


def test_single_step_has_no_networks(table1):
    cfg = SolverConfig(n_steps=1, iterations=300, partial=150, eval_batch=512)
    res = train(const_spec(2.0), table1, cfg, seed=0)
    assert res.Z.shape == (512, 1, 2)
    assert res.y0 == pytest.approx(2.0, abs=1e-2)


def test_divergence_keeps_trace(table1):
    def drv(n, aux, y, z):
        return np.full_like(y, np.inf), np.zeros_like(y), np.zeros_like(z)

    with pytest.raises(BsdeDivergence) as err:
        train(BsdeSpec("blowup", drv, lambda p: np.zeros(p.batch_size)), table1,
              SolverConfig(n_steps=3, iterations=10, eval_batch=256), seed=0)
    assert isinstance(err.value.loss_trace, list)


def test_adjoint_gradients_match_finite_differences(table1_m2):
    pb = simulate(table1_m2, 6, 64, 8, "P")
    rng = np.random.default_rng(0)
    nets = _nets(table1_m2, 6, zero=False)
    for w in nets.weights:
        w *= 0.05
    sc = FeatureScaler.fit(pb)
    spec = bsre_spec(table1_m2)
    y0 = np.array([0.6])
    z0 = rng.uniform(-0.01, 0.01, 4)
    _, grads, _ = loss_and_grads(spec, pb, nets, y0, z0, sc)
    params = [y0, z0] + nets.params
    x = sc(pb.state)

    def pattern():
        _, (acts, _) = nets.forward(x)
        return np.concatenate([(a > 0).ravel() for a in acts[1:-1]])

    base = pattern()
    h, worst, checked = 1e-6, 0.0, 0
    while checked < 100:
        k = rng.integers(len(params))
        idx = tuple(rng.integers(n) for n in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        lp, okp = loss_and_grads(spec, pb, nets, y0, z0, sc)[0], np.array_equal(pattern(), base)
        params[k][idx] = old - h
        lm, okm = loss_and_grads(spec, pb, nets, y0, z0, sc)[0], np.array_equal(pattern(), base)
        params[k][idx] = old
        g = grads[k][idx]
        fd = (lp - lm) / (2 * h)
        if not (okp and okm) or max(abs(fd), abs(g)) < 1e-7:
            continue
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g)))
        checked += 1
    assert worst < 1e-4
