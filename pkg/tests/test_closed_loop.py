import json

import numpy as np
import pytest

from batchsoc import cv_design as cvd
from batchsoc.closed_loop import LossReport, evaluate, feedback_input, simulate_closed_loop, trajectory_rows
from batchsoc.scenario import UncertaintySpec, nominal_scenario, noise_covariance, sample_scenarios
from batchsoc.structure import CONST_DIAG, LBT, CombinationMatrix, Dims, SingularBlockError, compile_structure, unvec


def open_loop_matrix(dims, u):
    H = np.zeros((dims.rows, dims.cols))
    for k in range(dims.L):
        H[dims.row_slice(k), 0] = u[k * dims.n_u:(k + 1) * dims.n_u]
        H[dims.row_slice(k), dims.u_cols(k)] = -np.eye(dims.n_u)
    return CombinationMatrix(H, LBT, dims)


def test_open_loop_replay(reactor, nominal_traj):
    dims = Dims.of(reactor)
    cm = open_loop_matrix(dims, nominal_traj.u)
    for k in range(dims.L):
        assert cm.setpoint(k)[0] == -nominal_traj.u[k]
        u, raw = feedback_input(cm, k, np.zeros(4 * k), np.ones(3))
        assert u[0] == nominal_traj.u[k]
    run = simulate_closed_loop(reactor, cm, nominal_scenario(reactor), nominal_traj.J)
    assert np.array_equal(run.u_cmd, nominal_traj.u)
    assert abs(run.loss) <= 1e-14


def test_feedback_zeroes_stage_cv(rng):
    dims = Dims(2, 3, 4)
    cs = compile_structure(LBT, dims)
    v0, Z = cs.affine_parameterization()
    cm = CombinationMatrix(unvec(v0 + Z @ rng.normal(size=Z.shape[1]), dims.rows, dims.cols), LBT, dims)
    for k in range(dims.L):
        hist = rng.normal(size=k * dims.m)
        y = rng.normal(size=dims.n_y)
        u, raw = feedback_input(cm, k, hist, y)
        xi = np.zeros(dims.cols)
        xi[0] = 1.0
        xi[1:1 + k * dims.m] = hist
        xi[dims.y_cols(k)] = y
        xi[dims.u_cols(k)] = u
        assert np.max(np.abs(cm.H[dims.row_slice(k)] @ xi)) <= 1e-12


def test_nominal_only_design_recovers_optimal_inputs(reactor, nominal_traj):
    dims = Dims.of(reactor)
    model = cvd.LossModel.build([nominal_traj], nominal_traj, np.zeros(dims.cols), dims)
    res = cvd.solve_gdsoc_shortcut(model, compile_structure(CONST_DIAG, dims), CONST_DIAG)
    y0 = nominal_traj.xi[1:4]
    u0, _ = feedback_input(res.cm, 0, np.zeros(0), y0)
    assert u0[0] == pytest.approx(nominal_traj.u[0], abs=1e-6)


def test_cv_identity_and_noise_bookkeeping(reactor, nominal_traj):
    dims = Dims.of(reactor)
    W2 = noise_covariance(UncertaintySpec(), reactor)
    model = cvd.LossModel.build([nominal_traj], nominal_traj, W2, dims)
    cm = cvd.solve_gdsoc_shortcut(model, compile_structure(LBT, dims), LBT).cm
    s = sample_scenarios(UncertaintySpec(seed=11), 1, reactor)[0]
    run = simulate_closed_loop(reactor, cm, s, nominal_traj.J)
    assert run.clip_events == 0
    assert run.cv_residual <= 1e-10
    assert np.allclose(run.u_applied - run.u_cmd, s.noise_u)
    # history holds noisy measurements of the true states and the applied inputs
    xi = run.xi_m
    for k in range(dims.L):
        assert np.allclose(xi[1 + 4 * k:4 + 4 * k], run.states[k] + s.noise_y[3 * k:3 * k + 3])
        assert xi[4 + 4 * k] == run.u_applied[k]


def test_clipping_is_counted(reactor, nominal_traj):
    dims = Dims.of(reactor)
    cm = open_loop_matrix(dims, np.full(dims.L, 0.01))
    run = simulate_closed_loop(reactor, cm, nominal_scenario(reactor), nominal_traj.J, noise=False)
    assert run.clip_events == dims.L
    assert np.all(run.u_cmd == reactor.u_max[0])
    assert run.loss > 0


def test_evaluate_single_entry_and_report_io(reactor, nominal_traj, tmp_path):
    dims = Dims.of(reactor)
    good = open_loop_matrix(dims, nominal_traj.u)
    bad = CombinationMatrix(np.zeros((dims.rows, dims.cols)), LBT, dims)
    s = nominal_scenario(reactor)
    rep = evaluate({"replay": good, "broken": bad}, [s], {0: nominal_traj}, reactor)
    assert rep.scenario_ids == [0]
    assert len(rep.simulated["replay"]) == 1
    assert rep.average("replay") == np.mean(rep.simulated["replay"])
    assert np.isnan(rep.simulated["broken"][0])
    assert rep.failures and rep.failures[0]["label"] == "broken"
    assert rep.quadratic["replay"][0] >= 0
    rep.to_csv(tmp_path / "l.csv")
    rep.to_json(tmp_path / "l.json", extra={"seed": 1})
    assert json.loads((tmp_path / "l.json").read_text())["seed"] == 1
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "scenario_id,replay,broken"


def test_singular_block_raises(reactor, nominal_traj):
    dims = Dims.of(reactor)
    with pytest.raises(SingularBlockError):
        simulate_closed_loop(reactor, CombinationMatrix(np.zeros((dims.rows, dims.cols)), LBT, dims),
                             nominal_scenario(reactor), nominal_traj.J)


def test_report_statistics():
    rep = LossReport(["a"], [1, 2, 3], {"a": [1.0, 2.0, 4.0]}, {"a": [1.0, 1.0, 1.0]})
    assert rep.average("a") == pytest.approx(7 / 3)
    assert rep.std("a") == pytest.approx(np.std([1, 2, 4], ddof=1))
    assert rep.summary()["a"]["n"] == 3


def test_trajectory_rows_layout(reactor, nominal_traj):
    dims = Dims.of(reactor)
    s = nominal_scenario(reactor)
    run = simulate_closed_loop(reactor, open_loop_matrix(dims, nominal_traj.u), s, nominal_traj.J)
    rows = trajectory_rows(reactor, run, s)
    assert len(rows) == dims.L + 1
    assert rows[1][1] == reactor.t_s
    assert np.isnan(rows[-1][2])
