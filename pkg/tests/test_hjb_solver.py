import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bess_control.hjb_solver import (DimensionError, StabilityError, StateGrid, eps_refine,
                                     evaluate_policy, extract_policy, hamiltonian_residual,
                                     interpolate, solve, write_policy_csv, write_value_csv,
                                     zero_policy)
from bess_control.market_sim import affine_spec, constant_spec, log_gbm_spec, simulate
from bess_control.model_core import (ControlPath, ModelParams, RegimeCriterion, TimeGrid,
                                     batch_payoff, payoff)
from bess_control.smoothing import SmoothedModel
from oracles import brute_force_instance

LOG15, LOG2 = np.log(1.5), np.log(2.0)


def closed_form(p, S, T, y):
    # total charge held; a vector of nodes is evaluated elementwise
    return p * S * T + S * np.asarray(y)


@pytest.fixture(scope="module")
def constant_instance():
    params = ModelParams(1.0, 1.0)
    spec = constant_spec([LOG15, LOG2])
    tg = TimeGrid(1.0, 40)
    sg = StateGrid.build(spec, tg, params, n_y=21)
    vg, pol = solve(spec, sg, tg, SmoothedModel(params, 0.05))
    return params, spec, tg, sg, vg, pol


def test_constant_price_value_off_ramps(constant_instance):
    params, spec, tg, sg, vg, pol = constant_instance
    y = sg.y_axis
    inner = y >= 0.05
    assert np.allclose(vg.values[0][inner], closed_form(1.5, 2.0, 1.0, y[inner]), rtol=1e-3)


def test_constant_price_tie_break_holds(constant_instance):
    *_, sg, vg, pol = constant_instance
    inner = sg.y_axis >= 0.05
    assert np.all(pol.controls[:, inner] == 0.0)
    assert extract_policy(vg) is pol


def test_terminal_layer_exact(constant_instance):
    params, spec, tg, sg, vg, pol = constant_instance
    assert np.array_equal(vg.values[-1], 2.0 * sg.y_axis)


def test_rising_price_holds_charge():
    params = ModelParams(1.0, 1.0)
    spec = constant_spec([np.log(1e-9), 0.0], drift=[0.0, 0.5])
    tg = TimeGrid(1.0, 40)
    sg = StateGrid.build(spec, tg, params, n_y=21)
    vg, pol = solve(spec, sg, tg, SmoothedModel(params, 0.05))
    assert np.all(np.abs(pol.controls[:, 1:-1]) < 1e-8)
    assert np.allclose(vg.values[0], sg.y_axis * np.exp(0.5), atol=1e-6)


def test_full_battery_does_not_charge():
    params = ModelParams(1.0, 1.0)
    spec = constant_spec([LOG2, 0.0], drift=[0.0, 1.0])  # charging pays off
    tg = TimeGrid(1.0, 40)
    sg = StateGrid.build(spec, tg, params, n_y=21)
    _, pol = solve(spec, sg, tg, SmoothedModel(params, 0.05))
    assert np.all(pol.controls[:, -1] <= 0.0)
    assert np.any(pol.controls[:, 5] > 0.0)


def test_policy_inside_control_box():
    params = ModelParams(1.0, 2.0)
    spec = log_gbm_spec([np.log(0.7), 0.0], 0.0, [0.0, 0.4])
    tg = TimeGrid(1.0, 30)
    sg = StateGrid.build(spec, tg, params, n_y=11, n_factor=9)
    _, pol = solve(spec, sg, tg, SmoothedModel(params, 0.1))
    assert pol.controls.min() >= -2.0 and pol.controls.max() <= 0.7 + 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_matches_exhaustive_enumeration(seed):
    best, val, _ = brute_force_instance(seed)
    assert abs(best - val) <= 1e-8 * max(1.0, abs(best))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2.0))
def test_monotone_in_terminal_offset(delta):
    params = ModelParams(1.0, 1.0)
    spec = log_gbm_spec([0.0, 0.0], 0.0, [0.0, 0.3])
    tg = TimeGrid(0.5, 10)
    sg = StateGrid.build(spec, tg, params, n_y=6, n_factor=7)
    model = SmoothedModel(params, 0.1)
    a, _ = solve(spec, sg, tg, model)
    b, _ = solve(spec, sg, tg, model, terminal_offset=delta)
    assert np.all(b.values >= a.values - 1e-12)


def test_stability_error_names_substeps():
    params = ModelParams(1.0, 1.0)
    spec = constant_spec([0.0, 0.0])
    tg = TimeGrid(1.0, 5)
    sg = StateGrid.build(spec, tg, params, n_y=21)
    with pytest.raises(StabilityError) as err:
        solve(spec, sg, tg, SmoothedModel(params, 0.05))
    need = err.value.required_substeps
    assert need >= 4 and "substeps" in str(err.value)
    vg, _ = solve(spec, sg, tg, SmoothedModel(params, 0.05), substeps=need)
    assert vg.substeps == need


def test_dimension_cap():
    spec = log_gbm_spec([0.0, 0.0, 0.0], 0.0, 0.2)
    params = ModelParams(1.0, 1.0, 2)
    with pytest.raises(DimensionError):
        StateGrid.build(spec, TimeGrid(1.0, 4), params, n_y=5, n_factor=5)


def test_four_axis_constant_price():
    params = ModelParams(1.0, 1.0, 2)
    spec = constant_spec([LOG15, LOG2])
    tg = TimeGrid(1.0, 20)
    ax0 = np.linspace(LOG15 - 0.5, LOG15 + 0.5, 5)
    ax1 = np.linspace(LOG2 - 0.5, LOG2 + 0.5, 5)
    sg = StateGrid((0, 1), (ax0, ax1), np.linspace(0, 1, 11), 2)
    vg, _ = solve(spec, sg, tg, SmoothedModel(params, 0.05))
    val = vg.at(sg.state_point(spec.x0, [0.4, 0.6]))
    assert val == pytest.approx(closed_form(1.5, 2.0, 1.0, 1.0), rel=1e-3)


def test_eps_independent_off_boundary():
    # charge cannot reach either ramp within the horizon; dy = L dt keeps the
    # upwind step free of numerical diffusion from the ramp nodes
    params = ModelParams(1.0, 0.25)
    spec = affine_spec([0.0, 1.0], [0.0, 0.0], [[0.0, 0.0], [0.0, -2.0]])
    tg = TimeGrid(1.0, 20)
    sg = StateGrid((), (), np.linspace(0, 1, 81), 1)
    ref = eps_refine(spec, sg, tg, params, [0.2, 0.1, 0.05], [0.5], controls=[-0.25, 0.0, 0.25])
    assert np.ptp(ref.values) < 1e-10
    assert not ref.warnings


def test_eps_limit_constant_price():
    params = ModelParams(1.0, 1.0)
    spec = constant_spec([LOG15, LOG2])
    tg = TimeGrid(1.0, 40)
    sg = StateGrid.build(spec, tg, params, n_y=41)
    ref = eps_refine(spec, sg, tg, params, [0.2, 0.1, 0.05], [0.5])
    assert ref.limit == pytest.approx(closed_form(1.5, 2.0, 1.0, 0.5), rel=1e-3)


def test_eps_refine_rejects_bad_schedule():
    params = ModelParams(1.0, 1.0)
    spec = constant_spec([0.0, 0.0])
    sg = StateGrid.build(spec, TimeGrid(1.0, 40), params, n_y=11)
    with pytest.raises(ValueError):
        eps_refine(spec, sg, TimeGrid(1.0, 40), params, [0.1, 0.2, 0.05], [0.5])


def test_zero_policy_matches_payoff_per_path():
    params = ModelParams(1.0, 1.0)
    spec = log_gbm_spec([0.0, 0.0], 0.0, [0.2, 0.3])
    tg = TimeGrid(1.0, 10)
    ens = simulate(spec, tg, 50, seed=3)
    sg = StateGrid((), (), np.linspace(0, 1, 5), 1)
    res = evaluate_policy(zero_policy(sg, tg, params), ens, [0.3])
    for i in (0, 17, 49):
        ref = payoff(ens[i], ControlPath(tg, np.zeros((11, 1))), [0.3], RegimeCriterion(), params)
        assert res.per_path[i] == ref


def test_constant_ensemble_evaluation_exact(constant_instance):
    params, spec, tg, sg, vg, pol = constant_instance
    ens = simulate(spec, tg, 30, seed=1)
    res = evaluate_policy(pol, ens, [0.5])
    assert res.mean == pytest.approx(closed_form(1.5, 2.0, 1.0, 0.5), rel=1e-12)
    assert res.se == 0.0


def test_realised_rates_are_admissible():
    params = ModelParams(1.0, 2.0, 2)
    spec = log_gbm_spec([0.0, 0.0], 0.0, [0.0, 0.5])
    tg = TimeGrid(1.0, 30)
    sg = StateGrid.build(spec, tg, params, n_y=6, n_factor=5)
    _, pol = solve(spec, sg, tg, SmoothedModel(params, 0.1), n_controls=5)
    ens = simulate(spec, tg, 200, seed=8)
    res = evaluate_policy(pol, ens, [0.0, 1.0])
    u = res.controls
    _, y, _ = batch_payoff(ens.p, ens.S, u, [0.0, 1.0], tg.dt, params)
    unclipped = np.array([0.0, 1.0]) + np.concatenate(
        [np.zeros((200, 1, 2)), np.cumsum(u[:, :-1] * tg.dt, axis=1)], axis=1)
    assert np.allclose(y, unclipped, atol=1e-12)
    assert np.all(u.sum(axis=-1)[:, :-1] <= ens.p[:, :-1] + 1e-12)


def test_evaluation_thread_independent():
    params = ModelParams(1.0, 1.0)
    spec = log_gbm_spec([0.0, 0.0], 0.0, [0.0, 0.4])
    tg = TimeGrid(1.0, 20)
    sg = StateGrid.build(spec, tg, params, n_y=11, n_factor=9)
    _, pol = solve(spec, sg, tg, SmoothedModel(params, 0.1))
    ens = simulate(spec, tg, 2500, seed=4)
    a = evaluate_policy(pol, ens, [0.5])
    b = evaluate_policy(pol, ens, [0.5], threads=8)
    assert np.array_equal(a.per_path, b.per_path)


def test_hamiltonian_residual_shrinks_with_dt():
    params = ModelParams(1.0, 1.0)
    spec = log_gbm_spec([0.0, 0.0], 0.0, [0.0, 0.3])
    model = SmoothedModel(params, 0.1)
    worst = []
    for N in (20, 40, 80):
        tg = TimeGrid(1.0, N)
        sg = StateGrid.build(spec, TimeGrid(1.0, 20), params, n_y=11, n_factor=9)
        vg, _ = solve(spec, sg, tg, model)
        res = hamiltonian_residual(vg, spec, model)
        assert np.all(np.isfinite(res))
        worst.append(res.max())
    assert worst[0] > worst[1] > worst[2]
    assert worst[1] / worst[2] > 1.5


def test_interpolate_exact_on_linear_function():
    ax = [np.linspace(0, 1, 5), np.linspace(-1, 1, 3)]
    X, Y = np.meshgrid(*ax, indexing="ij")
    vals = 2 * X - 3 * Y + 1
    pts = np.array([[0.3, 0.2], [0.9, -0.7], [1.5, 0.0]])
    out, clamped = interpolate(vals, ax, pts)
    assert np.allclose(out[:2], 2 * pts[:2, 0] - 3 * pts[:2, 1] + 1)
    assert clamped == 1


def test_csv_exports(tmp_path, constant_instance):
    *_, vg, pol = constant_instance
    write_value_csv(tmp_path / "v.csv", vg, [0])
    write_policy_csv(tmp_path / "p.csv", pol, [0])
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "t,y_1,value" and len(lines) == 22
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "t,y_1,u_1"


def test_eps_convergence_with_active_boundary():
    # rising spot price drives the charge into the full face
    params = ModelParams(1.0, 1.0)
    spec = constant_spec([0.0, 0.0], drift=[0.0, 0.5])
    tg = TimeGrid(1.0, 80)
    sg = StateGrid.build(spec, tg, params, n_y=81)
    ref = eps_refine(spec, sg, tg, params, [0.2, 0.1, 0.05], [0.8])
    assert abs(ref.diffs[1]) <= abs(ref.diffs[0])
    assert ref.values[0] < ref.values[1] < ref.values[2]
