"""Controlled-variable design from Monte Carlo optimal-operation data.

Three solvers share the vectorized loss machinery:

* ``solve_gdsoc_shortcut``: the analytical equality-constrained least-squares
  design, with the CV Hessian approximated per scenario by
  ``V^T J_uu,i V`` and ``V = J_uu,0^{-1/2}``;
* ``solve_gdsoc_numerical``: descent on the exact average quadratic loss,
  the CV Hessian recomputed from the current matrix at every evaluation;
* ``solve_ldsoc_baseline``: the shortcut fed with data linearized at the
  nominal optimum (a local method).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from batchsoc.structure import CombinationMatrix, Dims, unvec, vec
from batchsoc.trajectory_opt import OptimalTrajectory, optimize_trajectory

log = logging.getLogger(__name__)

GDSOC = "gdsoc"
GDSOCSC = "gdsocsc"
LDSOC = "ldsoc"
METHODS = (LDSOC, GDSOC, GDSOCSC)
METHOD_LABELS = {LDSOC: "ldSOC", GDSOC: "gdSOC", GDSOCSC: "gdSOCsc"}

RIDGE = 1e-10
PSD_FLOOR = 1e-10


class SingularCVMap(np.linalg.LinAlgError):
    """``H G_xi`` is singular, so the CV Hessian is undefined."""

    def __init__(self, message, cond=np.inf):
        super().__init__(message)
        self.cond = cond


def psd_sqrt(A, inverse=False, floor=PSD_FLOOR):
    """Symmetric square root (or inverse square root) with an eigenvalue floor.

    Eigenvalues below ``floor * ||A||_2`` are raised to that level.
    """
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    top = max(np.max(np.abs(w)), np.finfo(float).tiny)
    w = np.maximum(w, floor * top)
    p = -0.5 if inverse else 0.5
    return (V * w**p) @ V.T


# ---------------------------------------------------------------------------
# exact quadratic loss


def cv_hessian(H, traj):
    """``J_cc = (H G)^{-T} J_uu (H G)^{-1}``."""
    P = H @ traj.G_xi
    cond = np.linalg.cond(P)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularCVMap(f"H G_xi singular for scenario {traj.scenario_id} (cond {cond:.3e})", cond)
    Y = np.linalg.solve(P, np.eye(P.shape[0]))
    return Y.T @ traj.J_uu @ Y


def loss_terms(H, traj, W2):
    """Disturbance and noise parts ``(L^d, L^n)`` of the quadratic loss of one scenario."""
    H = np.asarray(getattr(H, "H", H))
    Jcc = cv_hessian(H, traj)
    c = H @ traj.xi
    Ld = 0.5 * c @ Jcc @ c
    Ln = 0.5 * np.sum(((H * W2) @ H.T) * Jcc)
    return float(Ld), float(Ln)


def average_loss(H, trajectories, W2):
    return float(np.mean([sum(loss_terms(H, t, W2)) for t in trajectories]))


def joint_quadratic_loss(H, traj, noise):
    """Quadratic loss for one realized augmented noise vector ``[0, n(0), ..., n(L-1)]``."""
    H = np.asarray(getattr(H, "H", H))
    Jcc = cv_hessian(H, traj)
    c = H @ (traj.xi + noise)
    return float(0.5 * c @ Jcc @ c)


def augmented_noise(scenario, process):
    """Stacked ``[0, n_y(0), n_u(0), ...]`` for a scenario's noise arrays."""
    ny = scenario.noise_y.reshape(process.L, process.n_y)
    nu = scenario.noise_u.reshape(process.L, process.n_u)
    return np.concatenate([[0.0], np.hstack([ny, nu]).ravel()])


class ExactObjective:
    """Average quadratic loss with the exact CV Hessian, and its gradient in ``vec(H)``."""

    def __init__(self, trajectories, W2, dims):
        self.trajs = list(trajectories)
        self.W2 = np.asarray(W2, dtype=float)
        self.dims = dims

    def __call__(self, v):
        d = self.dims
        H = unvec(v, d.rows, d.cols)
        total = 0.0
        grad = np.zeros_like(H)
        for t in self.trajs:
            P = H @ t.G_xi
            cond = np.linalg.cond(P)
            if not np.isfinite(cond) or cond > 1e14:
                raise SingularCVMap(f"H G_xi singular for scenario {t.scenario_id}", cond)
            Y = np.linalg.solve(P, np.eye(P.shape[0]))
            K = Y.T @ t.J_uu @ Y
            c = H @ t.xi
            HW = H * self.W2
            S = np.outer(c, c) + HW @ H.T
            total += 0.5 * np.sum(K * S)
            # d/dH of 0.5 tr(K H M H^T) with K depending on H through P = H G
            grad += K @ (np.outer(c, t.xi) + HW) - K @ S @ Y.T @ t.G_xi.T
        n = len(self.trajs)
        return total / n, vec(grad) / n


class QuadraticObjective:
    """``(1 / 2N) v^T A v``; the frozen-Hessian surrogate of the exact loss."""

    def __init__(self, A, N):
        self.A = A
        self.N = N

    def __call__(self, v):
        Av = self.A @ v
        return 0.5 * float(v @ Av) / self.N, Av / self.N


# ---------------------------------------------------------------------------
# shortcut data


@dataclass
class LossModel:
    """Data of the shortcut objective ``(1/2N) ||[Xi; W_breve] vec(H)||^2``."""

    dims: Dims
    xis: np.ndarray
    J_sqrt: list
    V: np.ndarray
    W2: np.ndarray
    J_sum: np.ndarray
    label: str = "gentle"

    @property
    def N(self):
        return len(self.xis)

    @classmethod
    def build(cls, trajectories, nominal, W2, dims, frozen=False):
        """Shortcut data from design trajectories and the nominal reference.

        With ``frozen`` every scenario uses the nominal Hessian (CV Hessian
        held constant over all scenarios).
        """
        V = psd_sqrt(nominal.J_uu, inverse=True)
        if frozen:
            Js = [nominal.J_uu] * len(trajectories)
        else:
            Js = [t.J_uu for t in trajectories]
        J_sqrt = [psd_sqrt(J) for J in Js]
        return cls(
            dims=dims,
            xis=np.array([t.xi for t in trajectories]),
            J_sqrt=J_sqrt,
            V=V,
            W2=np.asarray(W2, dtype=float),
            J_sum=np.sum(Js, axis=0),
            label="frozen" if frozen else "gentle",
        )

    def scaled_sqrt(self, i):
        """``J_uu,i^{1/2} V``."""
        return self.J_sqrt[i] @ self.V

    def data_matrix(self):
        """Row blocks ``xi_i^T kron J_uu,i^{1/2} V``, shape ``(N n_u L, n_u L n_xi)``."""
        return np.vstack([np.kron(self.xis[i][None, :], self.scaled_sqrt(i)) for i in range(self.N)])

    def noise_inner(self):
        """``V^T (sum_i J_uu,i) V``."""
        M = self.V.T @ self.J_sum @ self.V
        return 0.5 * (M + M.T)

    def noise_matrix(self):
        """``W_breve = (W2 kron V^T (sum J_uu,i) V)^{1/2}``."""
        return np.kron(np.diag(np.sqrt(self.W2)), psd_sqrt(self.noise_inner(), floor=0.0))

    def stacked_matrix(self):
        return np.vstack([self.data_matrix(), self.noise_matrix()])

    def normal_matrix(self):
        """``A = Xi^T Xi + W_breve^T W_breve``."""
        X = self.data_matrix()
        A = X.T @ X + np.kron(np.diag(self.W2), self.noise_inner())
        return 0.5 * (A + A.T)

    def objective(self, v):
        A = self.normal_matrix()
        return 0.5 * float(v @ A @ v) / self.N

    def scenario_losses(self, H):
        """Per-scenario approximate losses ``0.5 (||S_i H xi_i||^2 + tr(W2 H^T S_i^T S_i H))``."""
        H = np.asarray(getattr(H, "H", H))
        out = []
        HW = H * self.W2
        for i in range(self.N):
            S = self.scaled_sqrt(i)
            Jc = S.T @ S
            c = H @ self.xis[i]
            out.append(0.5 * (c @ Jc @ c + np.sum((HW @ H.T) * Jc)))
        return np.array(out)


# ---------------------------------------------------------------------------
# results


@dataclass
class DesignResult:
    cm: CombinationMatrix
    method: str
    objective: float
    constraint_residual: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def H(self):
        return self.cm.H

    def summary(self):
        s, Hy, Hu = self.cm.stage_gains(0)
        return {
            "method": self.method,
            "structure": self.cm.tag,
            "objective": self.objective,
            "constraint_residual": self.constraint_residual,
            "stage0_setpoint": s.tolist(),
            "stage0_H_y": Hy.tolist(),
            "stage0_H_u": Hu.tolist(),
            "diagnostics": self.diagnostics,
        }

    def save(self, directory, stem=None, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"H_{self.method}_{self.cm.tag}"
        np.savetxt(directory / f"{stem}.csv", self.cm.H, delimiter=",", fmt="%.17g")
        meta = self.summary()
        meta.update(dims=[self.cm.dims.n_u, self.cm.dims.n_y, self.cm.dims.L], H_file=f"{stem}.csv")
        meta.update(extra or {})
        with open(directory / f"{stem}.json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True, default=_jsonable)
        return directory / f"{stem}.json"

    @classmethod
    def load(cls, json_path):
        json_path = Path(json_path)
        with open(json_path) as fh:
            meta = json.load(fh)
        dims = Dims(*meta["dims"])
        H = np.loadtxt(json_path.parent / meta["H_file"], delimiter=",", ndmin=2)
        return cls(CombinationMatrix(H, meta["structure"], dims), meta["method"], meta["objective"],
                   meta["constraint_residual"], meta.get("diagnostics", {}))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# solvers


def solve_kkt(A, cs, ridge=RIDGE, refine=3):
    """Minimize ``v^T A v`` subject to ``Q^T v = b`` via one factorization of the KKT system.

    The factorized matrix carries a ridge ``eps = ridge * trace(A) / n`` on
    the ``A`` block. A few steps of iterative refinement against the
    unregularized system then remove the ridge bias whenever that system is
    itself nonsingular. Returns ``(v, multipliers, eps)``.
    """
    n = A.shape[0]
    eps = ridge * np.trace(A) / n
    Q = cs.dense()
    q = Q.shape[1]
    K = np.zeros((n + q, n + q))
    K[:n, :n] = A
    K[:n, n:] = Q
    K[n:, :n] = Q.T
    rhs = np.concatenate([np.zeros(n), cs.b])
    Kr = K.copy()
    Kr[np.arange(n), np.arange(n)] += eps
    with np.errstate(all="ignore"):
        lu = sla.lu_factor(Kr, check_finite=False)
        sol = sla.lu_solve(lu, rhs)
        for _ in range(refine):
            sol = sol + sla.lu_solve(lu, rhs - K @ sol)
    if not np.all(np.isfinite(sol)) or np.linalg.norm(K @ sol - rhs) > 1e-6 * max(np.linalg.norm(rhs), 1.0):
        rank = np.linalg.matrix_rank(Kr)
        raise np.linalg.LinAlgError(f"KKT system singular: rank {rank} of {n + q}")
    return sol[:n], sol[n:], eps


def solve_gdsoc_shortcut(model, cs, tag, method=GDSOCSC):
    """Analytical design minimizing ``(1/2N) ||[Xi; W_breve] vec(H)||^2`` on ``Q^T vec(H) = b``."""
    if cs.q < 1:
        raise ValueError("at least one constraint is required")
    A = model.normal_matrix()
    v, lam, eps = solve_kkt(A, cs)
    Av = A @ v
    # stationarity: A v + Q lam = 0
    stat = np.linalg.norm(Av + cs.Q @ lam) / max(np.linalg.norm(Av), 1e-300)
    cm = CombinationMatrix(unvec(v, model.dims.rows, model.dims.cols).copy(), tag, model.dims)
    return DesignResult(
        cm=cm,
        method=method,
        objective=0.5 * float(v @ Av) / model.N,
        constraint_residual=cs.residual(v),
        diagnostics={"ridge": eps, "stationarity": float(stat), "data": model.label, "N": model.N},
    )


def _bfgs(fun, w0, stop, max_iter):
    """BFGS with Armijo backtracking that treats undefined points as infinite.

    ``stop(g)`` decides convergence from the current gradient. Returns the
    best iterate as ``(f, w, g)`` and the iteration count.
    """
    w = np.array(w0, dtype=float)
    f, g = fun(w)
    if not np.isfinite(f):
        raise SingularCVMap("objective undefined at the initial point")
    n = w.size
    Hinv = np.eye(n)
    it = 0
    restarted = False
    while it < max_iter and not stop(g):
        p = -Hinv @ g
        if g @ p >= 0:
            Hinv, p = np.eye(n), -g
        slope = g @ p
        t, ok = 1.0, False
        while t >= 1e-12:
            try:
                fn, gn = fun(w + t * p)
            except SingularCVMap:
                fn = np.inf
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                ok = True
                break
            t *= 0.5
        if not ok:
            if restarted:
                break
            Hinv, restarted = np.eye(n), True
            continue
        restarted = False
        s, y = t * p, gn - g
        sy = s @ y
        if sy > 1e-300:
            rho = 1.0 / sy
            Vm = np.eye(n) - rho * np.outer(s, y)
            Hinv = Vm @ Hinv @ Vm.T + rho * np.outer(s, s)
        w, f, g = w + s, fn, gn
        it += 1
    return (f, w, g), it


def solve_gdsoc_numerical(objective, cs, init, tag, dims, gtol=1e-8, max_iter=300, precondition=None):
    """Minimize ``objective(vec(H)) -> (f, grad)`` over ``Q^T vec(H) = b``.

    Works in the null-space coordinates ``vec(H) = v0 + Z z``. ``precondition``
    (a symmetric positive definite matrix on ``vec(H)``, e.g. the shortcut
    normal matrix) rescales ``z`` so the search starts well conditioned. The
    stopping test is ``||grad_z||_inf <= gtol``. Every iterate is feasible and
    the objective decreases monotonically, so the last iterate is the best.
    """
    v0, Z = cs.affine_parameterization()
    init = np.asarray(getattr(init, "vec", init), dtype=float)
    if init.ndim == 2:
        init = vec(init)
    z0 = np.linalg.lstsq(Z, init - v0, rcond=None)[0]
    nz = Z.shape[1]
    if precondition is not None:
        B = Z.T @ precondition @ Z
        B = 0.5 * (B + B.T)
        R = np.linalg.cholesky(B + 1e-12 * np.trace(B) / nz * np.eye(nz)).T
    else:
        R = np.eye(nz)
    Rinv = sla.solve_triangular(R, np.eye(nz))

    def fun(w):
        f, gv = objective(v0 + Z @ (Rinv @ w))
        return f, Rinv.T @ (Z.T @ gv)

    # the gradient in z is R^T times the gradient in w
    stop = lambda g: np.max(np.abs(R.T @ g)) <= gtol
    f_init = objective(v0 + Z @ z0)[0]
    (f, w, g), it = _bfgs(fun, R @ z0, stop, max_iter)
    v = v0 + Z @ (Rinv @ w)
    gz = R.T @ g
    cm = CombinationMatrix(unvec(v, dims.rows, dims.cols).copy(), tag, dims)
    return DesignResult(
        cm=cm,
        method=GDSOC,
        objective=float(f),
        constraint_residual=cs.residual(v),
        diagnostics={
            "iterations": it,
            "initial_objective": float(f_init),
            "grad_inf": float(np.max(np.abs(gz))),
            "converged": bool(np.max(np.abs(gz)) <= gtol),
            "free_parameters": int(nz),
        },
    )


def optimal_measurement_sensitivity(process, nominal_traj, names, rel_step=1e-3):
    """``d xi* / d p`` at the nominal optimum by central differences of re-optimized trajectories.

    One column per parameter in ``names`` (absolute parameter units).
    """
    from batchsoc.scenario import Scenario

    cols = []
    for name in names:
        j = process.param_names.index(name)
        xs = []
        for sgn in (1.0, -1.0):
            off = np.zeros(process.n_d)
            off[j] = sgn * rel_step
            d = process.nominal_params * (1.0 + off)
            s = Scenario(id=-1, x0=np.asarray(process.initial_state(d)), param_offsets=off,
                         noise_y=np.zeros(process.n_y * process.L), noise_u=np.zeros(process.n_u * process.L))
            tr = optimize_trajectory(process, s, nominal_traj.u)
            xs.append(tr.xi)
        h = rel_step * process.nominal_params[j]
        cols.append((xs[0] - xs[1]) / (2 * h))
    return np.column_stack(cols)


def linearized_trajectories(process, nominal_traj, scenarios, names, F=None):
    """Pseudo-trajectories ``xi_0 + F (d_i - d_0)`` carrying the nominal Hessian and sensitivity."""
    if F is None:
        F = optimal_measurement_sensitivity(process, nominal_traj, names)
    idx = [process.param_names.index(n) for n in names]
    out = []
    for s in scenarios:
        dd = process.nominal_params[idx] * np.asarray(s.param_offsets)[idx]
        out.append(
            OptimalTrajectory(
                scenario_id=s.id,
                u=nominal_traj.u,
                xi=nominal_traj.xi + F @ dd,
                J=nominal_traj.J,
                J_uu=nominal_traj.J_uu,
                G_xi=nominal_traj.G_xi,
                converged=True,
                kkt_residual=0.0,
            )
        )
    return out, F


def solve_ldsoc_baseline(process, nominal_traj, scenarios, cs, tag, W2, names, F=None):
    """Local baseline: the shortcut design on nominally linearized data."""
    lin, F = linearized_trajectories(process, nominal_traj, scenarios, names, F)
    model = LossModel.build(lin, nominal_traj, W2, Dims.of(process))
    res = solve_gdsoc_shortcut(model, cs, tag, method=LDSOC)
    res.diagnostics["linearized"] = True
    return res, F
