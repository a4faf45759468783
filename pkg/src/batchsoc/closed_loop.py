"""Closed-loop batch operation under a stacked combination matrix.

At stage ``k`` the controller holds the stage CVs at zero: it solves the
stage rows of ``H xi = 0`` for ``u(k)`` given the noisy history and the
current noisy measurement, clips to the input bounds, and the plant receives
the clipped command plus implementation noise.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from batchsoc.cv_design import augmented_noise, joint_quadratic_loss
from batchsoc.process_model import StateInvariantError
from batchsoc.structure import SingularBlockError, feedback_blocks

log = logging.getLogger(__name__)

LOSS_TOL = 1e-6


def feedback_input(cm, k, history, y_m, clip=None):
    """Input that zeroes the stage-``k`` CVs.

    ``history`` holds the extended measurements ``[y_m(0), u_m(0), ...,
    y_m(k-1), u_m(k-1)]`` (without the leading 1). Returns ``(u, u_raw)``:
    the clipped command and the unclipped solution.
    """
    const, past, H_y, H_u, _ = feedback_blocks(cm, k)
    rhs = -(const[:, 0] + past @ np.asarray(history, dtype=float) + H_y @ np.asarray(y_m, dtype=float))
    u_raw = np.linalg.solve(H_u, rhs)
    if clip is None:
        return u_raw, u_raw
    return np.clip(u_raw, clip[0], clip[1]), u_raw


@dataclass
class ClosedLoopRun:
    scenario_id: int
    u_cmd: np.ndarray
    u_applied: np.ndarray
    states: np.ndarray
    xi_m: np.ndarray
    J: float
    J_ref: float
    clip_events: int
    cv_residual: float

    @property
    def loss(self):
        return self.J - self.J_ref


def simulate_closed_loop(process, cm, scenario, J_ref, noise=True):
    """Run one batch under ``cm`` with the scenario's true parameters and noise.

    ``cv_residual`` is the largest ``|H-row(k) xi|`` over unclipped stages,
    evaluated with the commanded (pre-noise) input.
    """
    d, x0 = process.params_for(scenario)
    L, nu, ny = process.L, process.n_u, process.n_y
    lo, hi = process.input_bounds
    noise_y = scenario.noise_y.reshape(L, ny) if noise else np.zeros((L, ny))
    noise_u = scenario.noise_u.reshape(L, nu) if noise else np.zeros((L, nu))
    x = np.asarray(x0, dtype=float)
    states = [x]
    history = []
    u_cmd = np.zeros((L, nu))
    u_app = np.zeros((L, nu))
    clips = 0
    resid = 0.0
    for k in range(L):
        y_m = np.asarray(process.measurement(x, k), dtype=float) + noise_y[k]
        hist = np.concatenate(history) if history else np.zeros(0)
        u, u_raw = feedback_input(cm, k, hist, y_m, clip=(lo, hi))
        if np.any(u != u_raw):
            clips += 1
        else:
            row = cm.H[cm.dims.row_slice(k)]
            xi_k = np.concatenate([[1.0], hist, y_m, u, np.zeros(cm.dims.cols - 1 - hist.size - ny - nu)])
            resid = max(resid, float(np.max(np.abs(row @ xi_k))))
        u_m = u + noise_u[k]
        u_cmd[k], u_app[k] = u, u_m
        history.append(np.concatenate([y_m, u_m]))
        x = np.asarray(process.transition(x[None, :], u_m[None, :], d, k))[0]
        states.append(x)
    J = float(process.terminal_cost(x, d))
    return ClosedLoopRun(
        scenario_id=scenario.id,
        u_cmd=u_cmd.ravel(),
        u_applied=u_app.ravel(),
        states=np.array(states),
        xi_m=np.concatenate([[1.0]] + history),
        J=J,
        J_ref=float(J_ref),
        clip_events=clips,
        cv_residual=resid,
    )


@dataclass
class LossReport:
    """Per-scenario closed-loop and quadratic losses for a set of labeled designs."""

    labels: list
    scenario_ids: list
    simulated: dict
    quadratic: dict
    clip_events: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def average(self, label, kind="simulated"):
        vals = np.asarray(getattr(self, kind)[label], dtype=float)
        return float(np.mean(vals))

    def std(self, label, kind="simulated"):
        vals = np.asarray(getattr(self, kind)[label], dtype=float)
        return float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0

    def summary(self):
        out = {}
        for lab in self.labels:
            out[lab] = {
                "average_loss": self.average(lab),
                "std_loss": self.std(lab),
                "average_quadratic_loss": self.average(lab, "quadratic"),
                "clip_events": int(sum(self.clip_events.get(lab, []))),
                "n": len(self.simulated[lab]),
            }
        return out

    def to_csv(self, path, kind="simulated"):
        data = getattr(self, kind)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario_id"] + list(self.labels))
            for i, sid in enumerate(self.scenario_ids):
                w.writerow([sid] + [repr(float(data[lab][i])) for lab in self.labels])

    def to_json(self, path, extra=None):
        payload = {"summary": self.summary(), "failures": self.failures}
        payload.update(extra or {})
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)


def evaluate(designs, scenarios, references, process, W2=None, noise=True):
    """Closed-loop and quadratic losses of every design on every scenario.

    ``designs`` maps a label to a ``CombinationMatrix``; ``references`` maps
    scenario id to its ``OptimalTrajectory`` (optimal cost, and second-order
    data for the quadratic loss). Failing cells are recorded as ``nan`` and
    listed in ``failures``.
    """
    labels = list(designs)
    sim = {lab: [] for lab in labels}
    quad = {lab: [] for lab in labels}
    clips = {lab: [] for lab in labels}
    failures = []
    for s in scenarios:
        ref = references[s.id]
        for lab in labels:
            cm = designs[lab]
            try:
                run = simulate_closed_loop(process, cm, s, ref.J, noise=noise)
                if run.loss < -LOSS_TOL:
                    log.warning("scenario %d: negative loss %.3e under %s", s.id, run.loss, lab)
                sim[lab].append(run.loss)
                clips[lab].append(run.clip_events)
            except (StateInvariantError, SingularBlockError, np.linalg.LinAlgError) as exc:
                failures.append({"label": lab, "scenario_id": s.id, "error": str(exc)})
                sim[lab].append(np.nan)
                clips[lab].append(0)
            if ref.has_second_order:
                n = augmented_noise(s, process) if noise else np.zeros(cm.dims.cols)
                try:
                    quad[lab].append(joint_quadratic_loss(cm, ref, n))
                except np.linalg.LinAlgError:
                    quad[lab].append(np.nan)
            else:
                quad[lab].append(np.nan)
    return LossReport(labels, [s.id for s in scenarios], sim, quad, clips, failures)


def trajectory_rows(process, run, scenario, derived=None):
    """Per-stage rows ``(k, t, u, states..., derived...)`` for plotting."""
    d, _ = process.params_for(scenario)
    rows = []
    for k in range(process.L + 1):
        x = run.states[k]
        u = run.u_applied[k * process.n_u:(k + 1) * process.n_u] if k < process.L else [np.nan] * process.n_u
        extra = list(derived(x, d)) if derived is not None else []
        rows.append([k, k * process.t_s] + [float(v) for v in u] + [float(v) for v in x] + [float(v) for v in extra])
    return rows


def write_trajectory_csv(path, header, rows):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path
