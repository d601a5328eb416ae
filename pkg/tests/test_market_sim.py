import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bess_control.market_sim import (DiffusionSpec, SimulationError, affine_spec, constant_spec,
                                     deterministic_path, log_gbm_spec, simulate, spec_from_config,
                                     to_market, write_ensemble_csv)
from bess_control.model_core import TimeGrid


def test_frozen_diffusion_gives_unit_prices():
    ens = simulate(constant_spec([0.0, 0.0]), TimeGrid(1.0, 10), 5, seed=1)
    assert np.all(ens.p == 1.0) and np.all(ens.S == 1.0)


def test_deterministic_exponential_ramp():
    g = TimeGrid(1.0, 10)
    ens = simulate(constant_spec([0.0, 0.0], drift=[0.0, 0.7]), g, 3, seed=0)
    assert np.allclose(ens.S, np.exp(0.7 * g.times), rtol=1e-14)


def test_gbm_terminal_mean_matches_lognormal():
    x0, nu, sig = 0.1, 0.05, 0.3
    g = TimeGrid(1.0, 50)
    ens = simulate(log_gbm_spec([0.0, x0], [0.0, nu], [0.1, sig]), g, 10_000, seed=2024)
    ST = ens.S[:, -1]
    se = ST.std(ddof=1) / np.sqrt(ST.size)
    assert abs(ST.mean() - np.exp(x0 + nu + sig ** 2 / 2)) < 3 * se


def test_to_market_values():
    p, S = to_market(np.array([1.0, -1.0]))
    assert p == np.e and S == pytest.approx(1 / np.e, rel=1e-16)
    p, S = to_market(np.array([0.0, np.log(2.0)]))
    assert p == 1.0 and S == pytest.approx(2.0, rel=1e-15)


def test_to_market_overflow_reports_node():
    x = np.zeros((4, 2))
    x[2, 1] = 1e4
    with pytest.raises(SimulationError) as err:
        to_market(x)
    assert err.value.node is None or err.value.node in (0, 1, 2)


def test_nonfinite_drift_aborts_with_location():
    spec = DiffusionSpec(np.zeros(2), lambda x, t: np.where(t > 0.5, np.nan, 0.0) * x,
                         lambda x, t: np.zeros((x.shape[0], 2, 2)),
                         deterministic=True, constant_factors=())
    with pytest.raises(SimulationError) as err:
        simulate(spec, TimeGrid(1.0, 4), 2, seed=0)
    assert err.value.node == 3


def test_reproducible_and_prefix_stable():
    spec = log_gbm_spec([0.0, 0.0], 0.0, [0.2, 0.4])
    g = TimeGrid(1.0, 20)
    a = simulate(spec, g, 700, seed=5)
    b = simulate(spec, g, 700, seed=5, threads=4)
    c = simulate(spec, g, 300, seed=5)
    assert np.array_equal(a.xbar, b.xbar) and np.array_equal(a.dW, b.dW)
    assert np.array_equal(a.xbar[:300], c.xbar)
    assert not np.array_equal(a.xbar, simulate(spec, g, 700, seed=6).xbar)


def test_ensemble_csv_byte_identical(tmp_path):
    spec = log_gbm_spec([0.0, 0.0], 0.0, [0.2, 0.4])
    g = TimeGrid(1.0, 5)
    write_ensemble_csv(tmp_path / "a.csv", simulate(spec, g, 20, seed=9))
    write_ensemble_csv(tmp_path / "b.csv", simulate(spec, g, 20, seed=9, threads=8))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_ensemble_is_immutable():
    ens = simulate(constant_spec([0.0, 0.0]), TimeGrid(1.0, 3), 2, seed=0)
    with pytest.raises(ValueError):
        ens.xbar[0, 0, 0] = 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_positivity(seed, sigma):
    ens = simulate(log_gbm_spec([0.0, 0.0], 0.0, sigma), TimeGrid(1.0, 10), 20, seed=seed)
    assert np.all(ens.p > 0) and np.all(ens.S > 0)


def test_euler_first_order_on_ramp():
    # x' = -x in the second factor; Euler error halves with dt
    spec = affine_spec([0.0, 1.0], [0.0, 0.0], [[0.0, 0.0], [0.0, -1.0]])
    errs = []
    for N in (20, 40, 80):
        x = deterministic_path(spec, TimeGrid(1.0, N))
        errs.append(abs(x[-1, 1] - np.exp(-1.0)))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)


def test_increments_have_zero_mean_per_node():
    ens = simulate(log_gbm_spec([0.0, 0.0], 0.0, 0.3), TimeGrid(1.0, 10), 4000, seed=77)
    dW = ens.dW
    mean = dW.mean(axis=0)
    se = dW.std(axis=0, ddof=1) / np.sqrt(dW.shape[0])
    assert np.all(np.abs(mean) < 3.5 * se)


def test_spec_from_config_presets():
    assert spec_from_config({"preset": "constant", "x0": [0.0, 0.0]}).deterministic
    s = spec_from_config({"preset": "log-gbm", "x0": [0.0, 0.0], "sigma": [0.0, 0.3]})
    assert s.constant_factors == (0,)
    with pytest.raises(KeyError):
        spec_from_config({"preset": "jumpy"})


def test_spot_check_rejects_superlinear_growth():
    with pytest.raises(ValueError):
        DiffusionSpec(np.zeros(2), lambda x, t: 1e6 * x ** 3,
                      lambda x, t: np.zeros((x.shape[0], 2, 2)))
