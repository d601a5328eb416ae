import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bess_control.dual_bound import (MartingaleSpec, SpecMismatch, anticipating_objective,
                                     dual_process, duality_gap, minimize_over_v,
                                     orthogonality_stat, pathwise_max, penalty, upper_bound,
                                     write_bound_csv, write_bound_paths_csv)
from bess_control.hjb_solver import StateGrid, solve
from bess_control.market_sim import affine_spec, constant_spec, log_gbm_spec, simulate
from bess_control.model_core import ModelParams, RegimeCriterion, TimeGrid, batch_payoff
from bess_control.smoothing import SmoothedModel
from bess_control.dual_bound import Estimate

GBM = log_gbm_spec([0.0, 0.0], 0.0, [0.2, 0.4])


def ensemble(P=200, N=10, seed=0, spec=GBM):
    return simulate(spec, TimeGrid(1.0, N), P, seed=seed)


# dual_process

def test_zero_integrand_gives_zero_process():
    d = dual_process(MartingaleSpec.zeros(1, 2, pieces=3, k=2), ensemble())
    assert np.all(d.levels == 0.0)


def test_constant_integrand_is_tail_of_noise():
    ens = ensemble()
    d = dual_process(MartingaleSpec.constant(1.0, 1, 2), ens)
    W = ens.dW.sum(axis=2)
    tail = np.cumsum(W[:, ::-1], axis=1)[:, ::-1]
    assert np.allclose(d.mu[:, :-1, 0], tail, atol=1e-13)
    assert np.all(d.mu[:, -1] == 0.0)


def test_first_order_double_loop_oracle():
    ens = ensemble(P=20, N=7)
    rng = np.random.default_rng(1)
    spec = MartingaleSpec(rng.normal(size=(3, 1, 2)), k=1)
    d = dual_process(spec, ens)
    dt, N = ens.grid.dt, ens.grid.N
    mu0 = np.zeros((20, N + 1))
    for i in range(20):
        for j in range(N):
            for q in range(j, N):
                piece = (q * 3) // N
                mu0[i, j] += spec.theta[piece, 0] @ ens.dW[i, q]
    mu1 = np.zeros_like(mu0)
    for i in range(20):
        for j in range(N):
            for q in range(j, N):
                mu1[i, j] -= dt * mu0[i, q]
    assert np.allclose(d.levels[0, :, :, 0], mu0, atol=1e-12)
    assert np.allclose(d.mu[:, :, 0], mu1, atol=1e-12)


def test_higher_order_levels_are_smoother():
    ens = ensemble(P=50, N=40)
    d = dual_process(MartingaleSpec.constant(1.0, 1, 2, k=2), ens)
    dt = ens.grid.dt
    for lv in range(1, 3):
        inc = np.abs(np.diff(d.levels[lv], axis=1)).max()
        assert inc <= dt * np.abs(d.levels[lv - 1]).max() + 1e-15
        assert np.all(d.levels[lv][:, -1] == 0.0)


def test_spec_mismatch():
    with pytest.raises(SpecMismatch):
        dual_process(MartingaleSpec.zeros(1, 3), ensemble())
    with pytest.raises(SpecMismatch):
        MartingaleSpec(np.zeros((2, 2)))
    with pytest.raises(SpecMismatch):
        MartingaleSpec(np.zeros((1, 1, 2)), k=-1)


# orthogonality

def test_penalty_vanishes_for_zero_control():
    ens = ensemble()
    d = dual_process(MartingaleSpec.constant(2.0, 1, 2, k=1), ens)
    est = orthogonality_stat(np.zeros((len(ens), 11, 1)), d)
    assert est.mean == 0.0 and est.se == 0.0


def test_deterministic_control_is_orthogonal():
    ens = ensemble(P=20_000, N=10, seed=3)
    d = dual_process(MartingaleSpec.constant(1.0, 1, 2), ens)
    u = np.broadcast_to(np.sin(np.arange(11))[None, :, None], (20_000, 11, 1))
    est = orthogonality_stat(u, d)
    assert abs(est.mean) < 4 * est.se


def test_anticipating_control_detected():
    ens = ensemble(P=5000, N=10, seed=4)
    d = dual_process(MartingaleSpec(np.array([[[0.0, 1.0]]])), ens)
    WT = ens.dW[:, :, 1].sum(axis=1)
    u = np.broadcast_to(np.sign(WT)[:, None, None], (5000, 11, 1))
    est = orthogonality_stat(u, d)
    assert est.mean > 5 * est.se


# pathwise maximisation

def test_zero_dual_constant_price_gives_closed_form():
    P, N = 5, 12
    p, S = np.full((P, N + 1), 1.5), np.full((P, N + 1), 2.0)
    for method in ("dp", "lp"):
        r = pathwise_max(p, S, np.zeros((P, N + 1, 1)), [0.4], ModelParams(1.0, 1.0), 1 / N,
                         method=method)
        assert np.allclose(r.value, 1.5 * 2.0 + 2.0 * 0.4, rtol=1e-12)


def test_single_step_picks_an_endpoint():
    rng = np.random.default_rng(5)
    params = ModelParams(1.0, 2.0)
    dt = 0.25
    for _ in range(20):
        p = rng.uniform(0.2, 3, (1, 2))
        S = rng.uniform(0.2, 3, (1, 2))
        mu = rng.normal(size=(1, 2, 1))
        y0 = rng.uniform(0, 1)
        lo = max(-params.L, -y0 / dt)
        hi = min(p[0, 0], params.L, (1 - y0) / dt)
        ends = [(p[0, 0] - u) * S[0, 0] * dt + mu[0, 0, 0] * u * dt + S[0, 1] * (y0 + u * dt)
                for u in (lo, hi)]
        r = pathwise_max(p, S, mu, [y0], params, dt)
        assert r.value[0] == pytest.approx(max(ends), abs=1e-12)


def _grid_instance(seed):
    # every vertex of the feasible set lies on a 0.05 grid
    rng = np.random.default_rng(seed)
    params = ModelParams(1.0, 0.6)
    N, dt = 3, 1 / 3
    p = rng.choice([0.3, 0.6, 1.5], size=(1, N + 1))
    S = rng.uniform(0.5, 2.0, (1, N + 1))
    mu = rng.normal(scale=0.5, size=(1, N + 1, 1))
    mu[:, -1] = 0.0
    y0 = 0.05 * rng.integers(0, 21)
    return params, p, S, mu, y0, dt


def _exhaustive(params, p, S, mu, y0, dt):
    grid = np.round(np.linspace(0, 1, 21), 12)
    best = -np.inf
    for ys in itertools.product(grid, repeat=3):
        y = np.array((y0,) + ys)
        u = np.diff(y) / dt
        if np.any(u < -params.L - 1e-9) or np.any(u > np.minimum(p[0, :3], params.L) + 1e-9):
            continue
        val = anticipating_objective(np.array(ys)[None, :, None], p, S, mu, [y0], dt, params)
        best = max(best, float(val[0]))
    return best


@pytest.mark.parametrize("seed", range(3))
def test_three_steps_against_exhaustive_search(seed):
    params, p, S, mu, y0, dt = _grid_instance(seed)
    best = _exhaustive(params, p, S, mu, y0, dt)
    for method in ("dp", "lp", "pga", "sqp"):
        r = pathwise_max(p, S, mu, [y0], params, dt, method=method)
        assert r.value[0] == pytest.approx(best, abs=1e-6)


def test_dp_controls_attain_value():
    ens = ensemble(P=30, N=15, seed=6)
    params = ModelParams(1.0, 2.0)
    d = dual_process(MartingaleSpec.constant(0.5, 1, 2), ens)
    r = pathwise_max(ens.p, ens.S, d.mu, [0.3], params, ens.grid.dt, want_controls=True)
    tot, _, _ = batch_payoff(ens.p, ens.S, r.controls, [0.3], ens.grid.dt, params)
    pen = penalty(d.mu, r.controls, ens.grid.dt)
    assert np.allclose(tot + pen, r.value, atol=1e-10)


def test_pga_matches_exact_methods():
    ens = ensemble(P=8, N=12, seed=7)
    params = ModelParams(1.0, 1.5)
    d = dual_process(MartingaleSpec.constant(0.7, 1, 2), ens)
    a = pathwise_max(ens.p, ens.S, d.mu, [0.5], params, ens.grid.dt, method="dp")
    b = pathwise_max(ens.p, ens.S, d.mu, [0.5], params, ens.grid.dt, method="pga")
    assert np.allclose(a.value, b.value, atol=1e-6)


def test_lp_two_batteries_respects_selling_cap():
    ens = ensemble(P=4, N=6, seed=8)
    params = ModelParams(1.0, 2.0, 2)
    d = dual_process(MartingaleSpec.constant(0.3, 2, 2), ens)
    r = pathwise_max(ens.p, ens.S, d.mu, [0.2, 0.8], params, ens.grid.dt, method="lp",
                     want_controls=True)
    assert np.all(r.controls.sum(axis=-1)[:, :-1] <= ens.p[:, :-1] + 1e-8)
    tot, _, _ = batch_payoff(ens.p, ens.S, r.controls, [0.2, 0.8], ens.grid.dt, params)
    assert np.allclose(tot + penalty(d.mu, r.controls, ens.grid.dt), r.value, atol=1e-7)


def test_pga_with_concave_regime_term_dominates_feasible_candidates():
    ens = ensemble(P=3, N=6, seed=9)
    params = ModelParams(1.0, 1.0)
    crit = RegimeCriterion(gamma=-0.5)
    d = dual_process(MartingaleSpec.constant(0.2, 1, 2), ens)
    r = pathwise_max(ens.p, ens.S, d.mu, [0.5], params, ens.grid.dt, crit=crit)
    assert not r.flags.any()
    rng = np.random.default_rng(0)
    for _ in range(50):
        u = rng.uniform(-1, 1, (3, 7, 1)) * np.minimum(ens.p, 1.0)[:, :, None]
        _, y, _ = batch_payoff(ens.p, ens.S, u, [0.5], ens.grid.dt, params, crit)
        # realised rates of the clipped path are feasible
        real = np.zeros_like(u)
        real[:, :-1] = np.diff(y, axis=1) / ens.grid.dt
        tot, _, _ = batch_payoff(ens.p, ens.S, real, [0.5], ens.grid.dt, params, crit)
        assert np.all(r.value >= tot + penalty(d.mu, real, ens.grid.dt) - 1e-9)


@pytest.mark.parametrize("seed", range(2))
def test_concave_regime_term_against_grid_search(seed):
    params, p, S, mu, y0, dt = _grid_instance(seed)
    crit = RegimeCriterion(gamma=-0.3)
    grid = np.round(np.linspace(0, 1, 21), 12)
    Ys = np.array(list(itertools.product(grid, repeat=3)))
    y = np.concatenate([np.full((len(Ys), 1), y0), Ys], axis=1)
    u = np.diff(y, axis=1) / dt
    ok = np.all((u >= -params.L - 1e-9) & (u <= np.minimum(p[0, :3], params.L) + 1e-9), axis=1)
    vals = anticipating_objective(Ys[ok][:, None, :, None], p, S, mu, [y0], dt, params, crit)
    best = float(vals.max())
    # the grid holds feasible points only, and its spacing limits how far it can fall short
    for method in ("sqp", "pga"):
        r = pathwise_max(p, S, mu, [y0], params, dt, crit=crit, method=method)
        assert best - 1e-9 <= r.value[0] <= best + 0.02
        assert not r.flags.any()


def test_two_battery_iterative_methods_match_lp_without_regime_term():
    ens = ensemble(P=2, N=5, seed=13)
    params = ModelParams(1.0, 2.0, 2)
    d = dual_process(MartingaleSpec.constant(0.3, 2, 2), ens)
    a = pathwise_max(ens.p, ens.S, d.mu, [0.3, 0.6], params, ens.grid.dt, method="lp")
    for method in ("pga", "sqp"):
        b = pathwise_max(ens.p, ens.S, d.mu, [0.3, 0.6], params, ens.grid.dt, method=method)
        assert np.allclose(a.value, b.value, atol=1e-7)


def test_two_battery_concave_regime_term_certified_below_linear_optimum():
    ens = ensemble(P=3, N=10, seed=2)
    params = ModelParams(1.0, 2.0, 2)
    d = dual_process(MartingaleSpec.constant(0.3, 2, 2), ens)
    a = pathwise_max(ens.p, ens.S, d.mu, [0.3, 0.6], params, ens.grid.dt)
    b = pathwise_max(ens.p, ens.S, d.mu, [0.3, 0.6], params, ens.grid.dt,
                     crit=RegimeCriterion(gamma=-0.5), want_controls=True)
    assert not b.flags.any()
    assert np.all(b.value <= a.value + 1e-9)
    tot, _, _ = batch_payoff(ens.p, ens.S, b.controls, [0.3, 0.6], ens.grid.dt, params,
                             RegimeCriterion(gamma=-0.5))
    attained = tot + penalty(d.mu, b.controls, ens.grid.dt)
    assert np.all(attained <= b.value + 1e-9) and np.all(b.value - attained < 1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-2, 2), st.floats(0.0, 1.0))
def test_pathwise_max_dominates_any_feasible_control(seed, c, y0):
    ens = ensemble(P=10, N=8, seed=seed)
    params = ModelParams(1.0, 1.5)
    d = dual_process(MartingaleSpec.constant(c, 1, 2, k=seed % 3), ens)
    r = pathwise_max(ens.p, ens.S, d.mu, [y0], params, ens.grid.dt)
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.5, 1.5, (10, 9, 1))
    u = np.minimum(u, ens.p[:, :, None])
    _, y, _ = batch_payoff(ens.p, ens.S, u, [y0], ens.grid.dt, params)
    real = np.zeros_like(u)
    real[:, :-1] = np.diff(y, axis=1) / ens.grid.dt
    tot, _, _ = batch_payoff(ens.p, ens.S, real, [y0], ens.grid.dt, params)
    assert np.all(r.value >= tot + penalty(d.mu, real, ens.grid.dt) - 1e-9)


# bounds

def test_upper_bound_constant_price_closed_form():
    ens = simulate(constant_spec([np.log(1.5), np.log(2.0)]), TimeGrid(1.0, 20), 50, seed=0)
    res = upper_bound(MartingaleSpec.zeros(1, 2), ens, [0.4], ModelParams(1.0, 1.0))
    assert res.mean == pytest.approx(3.8, rel=1e-12) and res.se < 1e-12


def test_deterministic_bound_matches_dynamic_programming():
    # dy = L dt and charge never reaches a ramp, so the grid scheme is exact
    params = ModelParams(1.0, 0.25)
    spec = affine_spec([0.0, 1.0], [0.0, 0.0], [[0.0, 0.0], [0.0, -2.0]])
    tg = TimeGrid(1.0, 20)
    sg = StateGrid((), (), np.linspace(0, 1, 81), 1)
    vg, _ = solve(spec, sg, tg, SmoothedModel(params, 0.2), controls=[-0.25, 0.0, 0.25])
    ens = simulate(spec, tg, 4, seed=0)
    res = upper_bound(MartingaleSpec.zeros(1, 2), ens, [0.5], params)
    assert res.mean == pytest.approx(vg.at([0.5]), abs=1e-3)


def test_search_never_worse_than_start():
    ens = ensemble(P=300, N=10, seed=10)
    params = ModelParams(1.0, 1.0)
    fam = MartingaleSpec.zeros(1, 2, pieces=2)
    base = upper_bound(fam, ens, [0.5], params)
    res = minimize_over_v(fam, ens, [0.5], params, budget=12)
    assert res.bound.mean <= base.mean
    assert res.bound.mean == min(t[2] for t in res.trace)
    assert len(res.trace) <= 12 and res.exhausted
    again = upper_bound(res.spec, ens, [0.5], params)
    assert again.mean == res.bound.mean


def test_search_on_deterministic_market_keeps_zero_integrand():
    ens = simulate(constant_spec([0.0, 0.0], drift=[0.0, 0.3]), TimeGrid(1.0, 10), 200, seed=1)
    params = ModelParams(1.0, 1.0)
    fam = MartingaleSpec.zeros(1, 2, pieces=1)
    res = minimize_over_v(fam, ens, [0.5], params, budget=9)
    assert np.all(res.spec.theta == 0.0)
    assert res.bound.mean == upper_bound(fam, ens, [0.5], params).mean


def test_threads_do_not_change_bound():
    ens = ensemble(P=1300, N=10, seed=12)
    spec = MartingaleSpec.constant(0.4, 1, 2, k=1)
    a = upper_bound(spec, ens, [0.5], ModelParams(1.0, 1.0))
    b = upper_bound(spec, ens, [0.5], ModelParams(1.0, 1.0), threads=4)
    assert np.array_equal(a.per_path, b.per_path)


def test_duality_gap_examples():
    g = duality_gap(Estimate(1.0, 0.1), Estimate(1.5, 0.2))
    assert g.gap == pytest.approx(0.5) and g.se == pytest.approx(np.hypot(0.1, 0.2))
    assert not g.violation
    assert duality_gap(Estimate(2.0, 0.1), Estimate(1.0, 0.1)).violation
    assert not duality_gap(Estimate(1.1, 0.1), Estimate(1.0, 0.1)).violation


def test_bound_csv(tmp_path):
    ens = ensemble(P=5)
    res = upper_bound(MartingaleSpec.zeros(1, 2, pieces=2), ens, [0.5], ModelParams(1.0, 1.0))
    write_bound_csv(tmp_path / "b.csv", [("gbm", res)])
    write_bound_paths_csv(tmp_path / "p.csv", res)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "instance,k,theta,mean,se,n_paths,n_flagged"
    assert lines[1].startswith("gbm,0,0;0;0;0,")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 6
