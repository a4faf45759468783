"""Per-scenario dynamic optimization and second-order data.

Gradients of the batch cost are exact up to roundoff through complex-step
differentiation of the fixed-step rollout (processes flagged
``complex_step_safe``); otherwise central differences are used. The Hessian
and the extended-measurement sensitivity are central finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from batchsoc.process_model import simulate_batch, stacked_xi
from batchsoc.scenario import nominal_scenario

log = logging.getLogger(__name__)

GRAD_STEP = 1e-6  # times (u_max - u_min)
HESS_STEP = 1e-4  # times (u_max - u_min)
CS_STEP = 1e-30
PG_TOL = 1e-9
QN_TOL = 1e-6  # hand-over from quasi-Newton to Newton refinement
MAX_ITER = 500


class NominalFailure(RuntimeError):
    """The nominal scenario could not be optimized."""


class BoundsError(ValueError):
    """A finite-difference stencil cannot be placed inside the input bounds."""


@dataclass
class OptimalTrajectory:
    scenario_id: int
    u: np.ndarray
    xi: np.ndarray
    J: float
    J_uu: np.ndarray | None = None
    G_xi: np.ndarray | None = None
    converged: bool = False
    kkt_residual: float = np.inf
    iterations: int = 0
    one_sided: tuple = ()
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def has_second_order(self):
        return self.J_uu is not None and self.G_xi is not None


def _cost(process, U, d, x0):
    return simulate_batch(process, U, d, x0)[1]


def cost_and_gradient(process, u, d, x0):
    """Batch cost ``J`` and its gradient with respect to the stacked inputs."""
    u = np.asarray(u, dtype=float)
    n = u.size
    if process.complex_step_safe:
        U = u[None, :] + 1j * CS_STEP * np.eye(n)
        J = _cost(process, U, d, x0)
        return float(J[0].real), J.imag / CS_STEP
    lo, hi = process.stacked_bounds()
    h = GRAD_STEP * (hi - lo)
    h = np.where(h > 0, h, GRAD_STEP)
    E = np.diag(h)
    J = _cost(process, np.vstack([u[None, :], u + E, u - E]), d, x0)
    return float(J[0]), (J[1:n + 1] - J[n + 1:]) / (2 * h)


def gradient_batch(process, U, d, x0):
    """Gradients at each row of ``U`` (shape ``(B, n)``)."""
    B, n = U.shape
    if process.complex_step_safe:
        Uc = (U[:, None, :] + 1j * CS_STEP * np.eye(n)[None]).reshape(B * n, n)
        return (_cost(process, Uc, d, x0).imag / CS_STEP).reshape(B, n)
    return np.stack([cost_and_gradient(process, row, d, x0)[1] for row in U])


def projected_gradient(g, u, lo, hi, atol=0.0):
    """Gradient with components zeroed where a bound blocks descent."""
    pg = np.array(g, dtype=float)
    pg[(u <= lo + atol) & (g > 0)] = 0.0
    pg[(u >= hi - atol) & (g < 0)] = 0.0
    return pg


def _stencil_steps(u, lo, hi, base):
    """Per-coordinate step and direction: 0 central, +1 forward, -1 backward."""
    h = np.array(base, dtype=float)
    side = np.zeros(u.size, dtype=int)
    for j in range(u.size):
        if u[j] - h[j] >= lo[j] and u[j] + h[j] <= hi[j]:
            continue
        h[j] /= 10.0
        if u[j] - h[j] >= lo[j] and u[j] + h[j] <= hi[j]:
            continue
        h[j] = base[j]
        if u[j] + 2 * h[j] <= hi[j]:
            side[j] = 1
        elif u[j] - 2 * h[j] >= lo[j]:
            side[j] = -1
        else:
            raise BoundsError(f"coordinate {j}: no finite-difference stencil fits in the bounds")
    return h, side


def _fd_columns(fun, u, h, side):
    """Columns ``d fun / d u_j`` by central (or one-sided second-order) differences.

    ``fun`` maps a batch ``(B, n)`` of inputs to outputs ``(B, m)``.
    """
    n = u.size
    pts = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h[j]
        if side[j] == 0:
            pts += [u + e, u - e]
        else:
            s = side[j]
            pts += [u, u + s * e, u + 2 * s * e]
    F = fun(np.array(pts))
    cols = []
    i = 0
    for j in range(n):
        if side[j] == 0:
            cols.append((F[i] - F[i + 1]) / (2 * h[j]))
            i += 2
        else:
            s = side[j]
            cols.append(s * (-3 * F[i] + 4 * F[i + 1] - F[i + 2]) / (2 * h[j]))
            i += 3
    return np.column_stack(cols)


def hessian_J(process, scenario, u, return_flags=False, step=HESS_STEP):
    """Hessian of the batch cost in the stacked inputs, symmetrized.

    Central differences with step ``step * (u_max - u_min)``; a coordinate whose
    stencil leaves the bounds first gets a 10x smaller step, then a one-sided
    stencil (reported in the flags).
    """
    u = np.asarray(u, dtype=float)
    d, x0 = process.params_for(scenario)
    lo, hi = process.stacked_bounds()
    h, side = _stencil_steps(u, lo, hi, step * (hi - lo))
    if process.complex_step_safe:
        H = _fd_columns(lambda U: gradient_batch(process, U, d, x0), u, h, side)
    else:
        H = _second_differences(process, u, d, x0, h)
    H = 0.5 * (H + H.T)
    flags = tuple(int(j) for j in np.flatnonzero(side))
    return (H, flags) if return_flags else H


def _second_differences(process, u, d, x0, h):
    n = u.size
    pts = [u]
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h[i]
            ej[j] = h[j]
            pts += [u + ei + ej, u + ei - ej, u - ei + ej, u - ei - ej]
    J = _cost(process, np.array(pts), d, x0)
    H = np.empty((n, n))
    p = 1
    for i in range(n):
        for j in range(i, n):
            a, b, c, e = J[p:p + 4]
            H[i, j] = H[j, i] = (a - b - c + e) / (4 * h[i] * h[j])
            p += 4
    return H


def xi_batch(process, U, d, x0):
    X, _ = simulate_batch(process, U, d, x0)
    return stacked_xi(process, X, U)


def sensitivity_G(process, scenario, u, step=HESS_STEP):
    """Sensitivity of the augmented stacked extended measurements to the inputs.

    Causality is imposed exactly: the constant row, blocks above the block
    diagonal and the input rows of past blocks are zero, and each diagonal
    block is ``[0; I]``.
    """
    u = np.asarray(u, dtype=float)
    d, x0 = process.params_for(scenario)
    lo, hi = process.stacked_bounds()
    h, side = _stencil_steps(u, lo, hi, step * (hi - lo))
    G = _fd_columns(lambda U: xi_batch(process, U, d, x0), u, h, side)
    return enforce_G_structure(G, process.n_y, process.n_u, process.L)


def enforce_G_structure(G, n_y, n_u, L):
    G = np.array(G, dtype=float)
    m = n_y + n_u
    G[0, :] = 0.0
    for k1 in range(L):
        rows = slice(1 + k1 * m, 1 + (k1 + 1) * m)
        for k2 in range(L):
            cols = slice(k2 * n_u, (k2 + 1) * n_u)
            if k2 > k1:
                G[rows, cols] = 0.0
            elif k2 == k1:
                G[rows, cols] = np.vstack([np.zeros((n_y, n_u)), np.eye(n_u)])
            else:
                G[1 + k1 * m + n_y:1 + (k1 + 1) * m, cols] = 0.0
    return G


def _newton_polish(process, d, x0, u, g, lo, hi, tol, budget):
    """Projected Newton steps on the free coordinates."""
    it = 0
    while it < budget:
        pg = projected_gradient(g, u, lo, hi)
        if np.max(np.abs(pg)) <= tol:
            break
        free = pg != 0
        h, side = np.full(u.size, HESS_STEP) * (hi - lo), np.zeros(u.size, dtype=int)
        H = _fd_columns(lambda U: gradient_batch(process, U, d, x0), u, h, side)
        H = 0.5 * (H + H.T)[np.ix_(free, free)]
        w, V = np.linalg.eigh(H)
        w = np.maximum(w, 1e-8 * max(abs(w).max(), 1e-300))
        p = np.zeros(u.size)
        p[free] = -(V / w) @ (V.T @ g[free])
        J0 = cost_and_gradient(process, u, d, x0)[0]
        t = 1.0
        while t > 1e-8:
            un = np.clip(u + t * p, lo, hi)
            Jn, gn = cost_and_gradient(process, un, d, x0)
            # J is flat to roundoff near the optimum; accept within a noise band.
            if Jn <= J0 + 1e-12 * max(abs(J0), 1.0):
                break
            t *= 0.5
        else:
            break
        u, g = un, gn
        it += 1
    return u, g, it


def optimize_trajectory(process, scenario, init, tol=PG_TOL, max_iter=MAX_ITER):
    """Minimize the batch cost over box-bounded stacked inputs.

    Bound-constrained L-BFGS in range-scaled coordinates, followed by projected
    Newton refinement. Converged when the projected-gradient infinity norm is
    ``<= tol``. Returns an :class:`OptimalTrajectory` without second-order data.
    """
    d, x0 = process.params_for(scenario)
    lo, hi = process.stacked_bounds()
    init = np.asarray(init, dtype=float)
    if np.any(init < lo) or np.any(init > hi):
        raise ValueError("init must lie within the input bounds")
    span = np.where(hi > lo, hi - lo, 1.0)

    def f(s):
        J, g = cost_and_gradient(process, lo + s * span, d, x0)
        return J, g * span

    res = minimize(
        f,
        (init - lo) / span,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * init.size,
        options={"maxiter": max_iter, "ftol": 1e-15, "gtol": QN_TOL * float(span.min()), "maxcor": 30},
    )
    u = np.clip(lo + res.x * span, lo, hi)
    J, g = cost_and_gradient(process, u, d, x0)
    it = int(res.nit)
    u, g, extra = _newton_polish(process, d, x0, u, g, lo, hi, tol, max(max_iter - it, 0))
    it += extra
    J, g = cost_and_gradient(process, u, d, x0)
    pg = projected_gradient(g, u, lo, hi)
    kkt = float(np.max(np.abs(pg)))
    xi = xi_batch(process, u[None, :], d, x0)[0]
    return OptimalTrajectory(
        scenario_id=scenario.id if scenario is not None else 0,
        u=u,
        xi=xi,
        J=J,
        converged=kkt <= tol,
        kkt_residual=kkt,
        iterations=it,
        message=str(res.message),
    )


def add_second_order(process, scenario, traj):
    traj.J_uu, traj.one_sided = hessian_J(process, scenario, traj.u, return_flags=True)
    traj.G_xi = sensitivity_G(process, scenario, traj.u)
    if traj.one_sided:
        log.warning("scenario %s: inputs %s at bounds, one-sided differences", traj.scenario_id, traj.one_sided)
    return traj


def solve_scenario_batch(process, scenarios, nominal_init=None, second_order=True, tol=PG_TOL):
    """Optimize every scenario, warm-started from the nominal optimum.

    The nominal point (scenario id 0) is solved first from ``nominal_init``
    (default: mid-range constant input); a nominal failure raises
    :class:`NominalFailure`. Other failures are returned as unconverged
    trajectories carrying the error message.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("empty scenario list")
    lo, hi = process.stacked_bounds()
    if nominal_init is None:
        nominal_init = lo + 0.1 * (hi - lo)
    nominal = next((s for s in scenarios if s.id == 0), None) or nominal_scenario(process)
    try:
        nom = optimize_trajectory(process, nominal, nominal_init, tol=tol)
    except Exception as exc:  # noqa: BLE001
        raise NominalFailure(f"nominal optimization failed: {exc}") from exc
    if not nom.converged:
        raise NominalFailure(f"nominal optimization did not converge (kkt={nom.kkt_residual:.3e})")
    out = []
    for s in scenarios:
        try:
            if s.id == 0:
                traj = nom
            else:
                traj = optimize_trajectory(process, s, nom.u, tol=tol)
            if second_order:
                add_second_order(process, s, traj)
        except Exception as exc:  # noqa: BLE001
            log.warning("scenario %s failed: %s", s.id, exc)
            traj = OptimalTrajectory(scenario_id=s.id, u=nom.u.copy(), xi=nom.xi.copy(), J=np.nan, message=str(exc))
        out.append(traj)
    return out


def failure_report(trajectories):
    return {t.scenario_id: t.message for t in trajectories if not t.converged}


def _fmt(a):
    return np.atleast_2d(a)


def save_archive(directory, trajectories, meta=None):
    """Write trajectories as CSV matrices plus a JSON index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"meta": meta or {}, "trajectories": []}
    for t in trajectories:
        stem = f"traj_{t.scenario_id:04d}"
        entry = {
            "scenario_id": t.scenario_id,
            "J": repr(float(t.J)),
            "converged": bool(t.converged),
            "kkt_residual": repr(float(t.kkt_residual)),
            "iterations": t.iterations,
            "one_sided": list(t.one_sided),
            "message": t.message,
            "files": {},
        }
        for name in ("u", "xi", "J_uu", "G_xi"):
            val = getattr(t, name)
            if val is None:
                continue
            fname = f"{stem}_{name}.csv"
            np.savetxt(directory / fname, _fmt(val), delimiter=",", fmt="%.17g")
            entry["files"][name] = fname
        index["trajectories"].append(entry)
    with open(directory / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    return directory / "index.json"


def load_archive(directory):
    directory = Path(directory)
    with open(directory / "index.json") as fh:
        index = json.load(fh)
    out = []
    for e in index["trajectories"]:
        arrs = {k: np.loadtxt(directory / f, delimiter=",", ndmin=2) for k, f in e["files"].items()}
        out.append(
            OptimalTrajectory(
                scenario_id=e["scenario_id"],
                u=arrs["u"].ravel(),
                xi=arrs["xi"].ravel(),
                J=float(e["J"]),
                J_uu=arrs.get("J_uu"),
                G_xi=arrs.get("G_xi"),
                converged=e["converged"],
                kkt_residual=float(e["kkt_residual"]),
                iterations=e["iterations"],
                one_sided=tuple(e["one_sided"]),
                message=e["message"],
            )
        )
    return out, index.get("meta", {})
