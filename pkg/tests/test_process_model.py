import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from batchsoc.process_model import (
    REACTOR_CONFIG_KEYS,
    ReactorParams,
    StateInvariantError,
    default_reactor_config,
    derived_concentrations,
    fed_batch_reactor,
    reactor_from_config,
    reactor_rhs,
    rk4_substeps,
    rollout,
    simulate_batch,
    stacked_xi,
    step,
    _reactor_rhs_array,
)
from batchsoc.scenario import UncertaintySpec, sample_scenarios

U_CONST = 0.002


def _extended_rhs(t, z, u, p):
    # states (c_A, c_B, V, c_C, c_D), with product and byproduct carried explicitly
    cA, cB, V, cC, cD = z
    r1, r2 = p.k1 * cA * cB, p.k2 * cB**2
    return [
        -r1 - cA * u / V,
        -r1 - 2 * r2 - (cB - p.c_B_in) * u / V,
        u,
        r1 - cC * u / V,
        r2 - cD * u / V,
    ]


def test_rhs_at_initial_state_matches_hand_computation():
    p = ReactorParams()
    r = reactor_rhs((0.72, 0.0614, 1.0), 0.001, p)
    r1 = 0.053 * 0.72 * 0.0614
    assert r.c_A == pytest.approx(-r1 - 0.72 * 0.001)
    assert r.c_B == pytest.approx(-r1 - 2 * 0.128 * 0.0614**2 - (0.0614 - 5.0) * 0.001)
    assert r.V == pytest.approx(0.001)


def test_rk4_matches_adaptive_reference(reactor):
    # tight-tolerance adaptive integration as the reference solution
    p = ReactorParams()
    u = np.full(reactor.L, U_CONST)
    xbar, _, _ = rollout(reactor, u)
    ref = solve_ivp(_extended_rhs, (0, p.t_f), [p.c_A0, p.c_B0, p.V0, 0, 0], args=(U_CONST, p),
                    rtol=1e-12, atol=1e-14)
    assert np.allclose(xbar[-3:], ref.y[:3, -1], rtol=1e-7, atol=1e-10)


def test_derived_concentrations_match_integrated_species():
    p = ReactorParams(c_A0=0.75, c_B0=0.07, V0=1.08)
    ref = solve_ivp(_extended_rhs, (0, p.t_f), [p.c_A0, p.c_B0, p.V0, 0, 0], args=(U_CONST, p),
                    rtol=1e-12, atol=1e-14)
    cC, cD = derived_concentrations(ref.y[:3, -1], p)
    assert cC == pytest.approx(ref.y[3, -1], rel=1e-8)
    assert cD == pytest.approx(ref.y[4, -1], rel=1e-8)


def test_rk4_step_halving_reduces_error_at_least_8x():
    p = ReactorParams()
    d = p.as_array()
    x0 = np.array([p.c_A0, p.c_B0, p.V0])
    T = 12.5
    ref = solve_ivp(lambda t, z: _extended_rhs(t, list(z) + [0, 0], 0.004, p)[:3], (0, T), x0,
                    rtol=1e-13, atol=1e-15).y[:, -1]
    errs = [np.max(np.abs(rk4_substeps(_reactor_rhs_array, x0, 0.004, d, T / n, n) - ref)) for n in (1, 2, 4)]
    assert errs[0] / errs[1] >= 8
    assert errs[1] / errs[2] >= 8


def test_zero_feed_keeps_volume_and_consumes_reactants(reactor):
    xbar, ybar, J = rollout(reactor, np.zeros(reactor.L))
    X = xbar.reshape(reactor.L, 3)
    assert np.all(X[:, 2] == 1.0)
    assert np.all(np.diff(X[:, 0]) < 0)
    assert np.all(np.diff(X[:, 1]) < 0)
    # measurements are the states at the start of each interval
    assert np.allclose(ybar[3:], xbar[:-3])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 0.005), min_size=20, max_size=20))
def test_states_stay_physical_for_feasible_inputs(u):
    reactor = fed_batch_reactor()
    xbar, _, J = rollout(reactor, np.array(u))
    X = xbar.reshape(reactor.L, 3)
    assert np.all(X[:, :2] >= 0)
    assert np.all(np.diff(np.r_[1.0, X[:, 2]]) >= 0)
    assert np.isfinite(J)


def test_batch_rollout_equals_single_rollouts(reactor, rng):
    U = rng.uniform(0, 0.005, size=(4, reactor.L))
    d = reactor.nominal_params
    X, J = simulate_batch(reactor, U, d, reactor.initial_state(d))
    for i in range(4):
        assert J[i] == rollout(reactor, U[i])[2]
    xi = stacked_xi(reactor, X, U)
    assert xi.shape == (4, reactor.n_xi)
    assert np.all(xi[:, 0] == 1)
    assert np.allclose(xi[:, 4::4], U)


def test_step_rejects_out_of_range_stage(reactor):
    with pytest.raises(IndexError):
        step(reactor, np.array([0.72, 0.0614, 1.0]), np.array([0.0]), reactor.nominal_params, reactor.L)


def test_negative_concentration_raises_with_location():
    d = ReactorParams().as_array()
    x = np.array([1e-6, 1e-6, 1.0])
    # coarse step with fast kinetics overshoots below zero
    with pytest.raises(StateInvariantError) as info:
        from batchsoc.process_model import _concentration_guard

        rk4_substeps(_reactor_rhs_array, np.array([-1e-3, 0.05, 1.0]), 0.0, d, 1.0, 1, stage=7,
                     guard=_concentration_guard)
    assert info.value.stage == 7
    assert derived_concentrations(x, d)[0] > 0


def test_params_validation():
    with pytest.raises(ValueError):
        ReactorParams(k1=0.0)
    with pytest.raises(ValueError):
        derived_concentrations((0.5, 0.1, 0.0), ReactorParams())


def test_config_roundtrip_and_key_check():
    cfg = default_reactor_config()
    assert set(cfg) == set(REACTOR_CONFIG_KEYS)
    proc = reactor_from_config(cfg)
    assert proc.L == 20 and proc.t_s == 12.5
    bad = dict(cfg)
    bad.pop("k2")
    with pytest.raises(ValueError, match="k2"):
        reactor_from_config(bad)
    with pytest.raises(ValueError, match="extra"):
        reactor_from_config({**cfg, "k3": 1.0})


def test_params_for_uses_scenario_offsets(reactor):
    s = sample_scenarios(UncertaintySpec(seed=4), 1, reactor)[0]
    d, x0 = reactor.params_for(s)
    assert np.allclose(d, reactor.nominal_params * (1 + s.param_offsets))
    assert np.allclose(x0, d[:3])
