"""Batch process abstraction and the fed-batch reactor benchmark.

A :class:`BatchProcess` is a discrete-time map over ``L`` control intervals.
All of its callables are vectorized over leading axes so that many input
sequences (finite-difference probes, complex-step directions) can be rolled
out in one pass.

The reactor runs the reactions A + B -> C and 2B -> D, fed with B at rate
``u``; the objective is to minimize ``(c_D - c_C) * V`` at the final time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import yaml

REACTOR_PARAM_NAMES = ("c_A0", "c_B0", "V0", "k1", "k2", "c_B_in")
REACTOR_CONFIG_KEYS = REACTOR_PARAM_NAMES + ("t_f", "L", "n_sub", "u_min", "u_max")

# Integration noise tolerance for concentrations.
NEGATIVE_TOL = 1e-9


class StateInvariantError(ValueError):
    """Raised when an integrated state leaves the physical domain."""

    def __init__(self, message, stage=None, substep=None):
        super().__init__(message)
        self.stage = stage
        self.substep = substep


@dataclass(frozen=True)
class ReactorParams:
    c_A0: float = 0.72
    c_B0: float = 0.0614
    V0: float = 1.0
    k1: float = 0.053
    k2: float = 0.128
    c_B_in: float = 5.0
    t_f: float = 250.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be strictly positive")

    def as_array(self):
        """Parameter vector in ``REACTOR_PARAM_NAMES`` order (``t_f`` excluded)."""
        return np.array([getattr(self, n) for n in REACTOR_PARAM_NAMES], dtype=float)


class ReactorState(NamedTuple):
    c_A: float
    c_B: float
    V: float


def _reactor_rhs_array(x, u, d):
    """Vectorized right-hand side; ``x[..., 3]``, ``u[...]``, ``d[6]``."""
    c_A, c_B, V = x[..., 0], x[..., 1], x[..., 2]
    k1, k2, c_B_in = d[3], d[4], d[5]
    r1 = k1 * c_A * c_B
    dil = u / V
    out = np.empty(np.broadcast_shapes(x.shape, np.shape(u) + (3,)), dtype=np.result_type(x, u))
    out[..., 0] = -r1 - c_A * dil
    out[..., 1] = -r1 - 2.0 * k2 * c_B**2 - (c_B - c_B_in) * dil
    out[..., 2] = u
    return out


def reactor_rhs(state, u, params):
    """Time derivative of the reactor state under feed rate ``u`` (l/min)."""
    x = np.asarray(state, dtype=float)
    d = params.as_array() if isinstance(params, ReactorParams) else np.asarray(params)
    return ReactorState(*_reactor_rhs_array(x, np.asarray(u, dtype=float), d))


def _derived_array(x, d):
    c_A, c_B, V = x[..., 0], x[..., 1], x[..., 2]
    c_A0, c_B0, V0, c_B_in = d[0], d[1], d[2], d[5]
    c_C = (c_A0 * V0 - c_A * V) / V
    # Mass balance on B; reduces to the V0 = 1 textbook form at nominal volume.
    c_D = ((c_A + c_B_in - c_B) * V - (c_A0 + c_B_in - c_B0) * V0) / (2.0 * V)
    return c_C, c_D


def derived_concentrations(state, params):
    """Product and byproduct concentrations ``(c_C, c_D)`` from a reactor state."""
    x = np.asarray(state, dtype=float)
    if np.any(x[..., 2] <= 0):
        raise ValueError("volume must be positive")
    d = params.as_array() if isinstance(params, ReactorParams) else np.asarray(params)
    c_C, c_D = _derived_array(x, d)
    if np.ndim(c_C) == 0:
        return float(c_C), float(c_D)
    return c_C, c_D


def _reactor_terminal_cost(x, d):
    c_C, c_D = _derived_array(x, d)
    return (c_D - c_C) * x[..., 2]


def rk4_substeps(rhs, x, u, d, dt, n_sub, stage=None, guard=None):
    """Integrate ``dx/dt = rhs(x, u, d)`` over ``n_sub`` fixed RK4 substeps."""
    for s in range(n_sub):
        k1 = rhs(x, u, d)
        k2 = rhs(x + 0.5 * dt * k1, u, d)
        k3 = rhs(x + 0.5 * dt * k2, u, d)
        k4 = rhs(x + dt * k3, u, d)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if guard is not None:
            x = guard(x, stage, s)
    return x


def _concentration_guard(x, stage, substep):
    conc = x[..., :2].real
    if np.any(conc < -NEGATIVE_TOL):
        raise StateInvariantError(
            f"negative concentration {conc.min():.3e} at stage {stage}, substep {substep}",
            stage=stage,
            substep=substep,
        )
    if np.any(conc < 0):
        x = x.copy()
        x[..., :2] = np.where(conc < 0, 0.0, x[..., :2])
    if np.any(x[..., 2].real <= 0):
        raise StateInvariantError(
            f"nonpositive volume at stage {stage}, substep {substep}",
            stage=stage,
            substep=substep,
        )
    return x


@dataclass(frozen=True)
class BatchProcess:
    """Discrete-time batch process over ``L`` piecewise-constant input intervals.

    ``transition(x, u, d, k)`` maps ``x(k)`` to ``x(k+1)``; ``d`` is the
    parameter vector, constant over the batch. ``initial_state(d)`` gives
    ``x(0)`` for a parameter vector. Costs follow ``J = phi(x(L), d) +
    sum_k psi(x(k), u(k), d, k)``. All callables broadcast over leading axes.
    """

    name: str
    n_x: int
    n_u: int
    n_y: int
    L: int
    t_s: float
    param_names: tuple
    nominal_params: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    transition: Callable
    measurement: Callable
    terminal_cost: Callable
    initial_state: Callable
    stage_cost: Callable | None = None
    measurement_names: tuple = ()
    complex_step_safe: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.L < 1 or min(self.n_x, self.n_u, self.n_y) < 1:
            raise ValueError("L and all dimensions must be >= 1")
        if not self.t_s > 0:
            raise ValueError("t_s must be positive")
        lo = np.broadcast_to(np.asarray(self.u_min, dtype=float), (self.n_u,)).copy()
        hi = np.broadcast_to(np.asarray(self.u_max, dtype=float), (self.n_u,)).copy()
        if np.any(lo > hi):
            raise ValueError("input bounds must satisfy lo <= hi")
        object.__setattr__(self, "u_min", lo)
        object.__setattr__(self, "u_max", hi)
        object.__setattr__(self, "nominal_params", np.asarray(self.nominal_params, dtype=float))

    @property
    def n_d(self):
        return len(self.param_names)

    @property
    def n_xi(self):
        """Length of the augmented stacked extended-measurement vector."""
        return (self.n_y + self.n_u) * self.L + 1

    @property
    def input_bounds(self):
        return self.u_min, self.u_max

    def stacked_bounds(self):
        return np.tile(self.u_min, self.L), np.tile(self.u_max, self.L)

    def params_for(self, scenario=None):
        """Parameter vector and initial state realized by ``scenario``."""
        if scenario is None:
            d = self.nominal_params.copy()
            return d, np.asarray(self.initial_state(d), dtype=float)
        d = self.nominal_params * (1.0 + np.asarray(scenario.param_offsets, dtype=float))
        return d, np.asarray(scenario.x0, dtype=float)


def step(process, x, u, d, k):
    """Advance one control interval: ``x(k+1) = f^k(x(k), u(k), d)``."""
    if not 0 <= k < process.L:
        raise IndexError(f"stage {k} outside [0, {process.L})")
    return process.transition(np.asarray(x), np.asarray(u), np.asarray(d), k)


def simulate_batch(process, U, d, x0):
    """Roll out a batch of stacked input sequences.

    ``U`` has shape ``(B, n_u * L)`` (real or complex). Returns the state
    history ``(B, L + 1, n_x)`` including ``x(0)`` and the costs ``(B,)``.
    """
    U = np.atleast_2d(U)
    B = U.shape[0]
    nu = process.n_u
    dtype = np.result_type(U.dtype, float)
    x = np.broadcast_to(np.asarray(x0, dtype=dtype), (B, process.n_x)).copy()
    X = np.empty((B, process.L + 1, process.n_x), dtype=dtype)
    X[:, 0] = x
    J = np.zeros(B, dtype=dtype)
    for k in range(process.L):
        u = U[:, k * nu:(k + 1) * nu]
        if process.stage_cost is not None:
            J = J + process.stage_cost(x, u, d, k)
        x = process.transition(x, u, d, k)
        X[:, k + 1] = x
    J = J + process.terminal_cost(x, d)
    return X, J


def rollout(process, u_bar, scenario=None):
    """Simulate one scenario noise-free.

    Returns ``(x_bar, y_bar, J)`` with ``x_bar = [x(1), ..., x(L)]``,
    ``y_bar = [y(0), ..., y(L-1)]`` and the total cost ``J``.
    """
    u_bar = np.asarray(u_bar, dtype=float)
    if u_bar.shape != (process.n_u * process.L,):
        raise ValueError(f"expected {process.n_u * process.L} stacked inputs, got {u_bar.shape}")
    d, x0 = process.params_for(scenario)
    X, J = simulate_batch(process, u_bar[None, :], d, x0)
    X = X[0]
    Y = np.stack([process.measurement(X[k], k) for k in range(process.L)])
    return X[1:].ravel(), Y.ravel(), float(J[0])


def stacked_xi(process, X, U):
    """Augmented extended measurements ``[1, y(0), u(0), ..., y(L-1), u(L-1)]``.

    ``X`` is a batch of state histories ``(B, L + 1, n_x)`` and ``U`` the
    matching stacked inputs ``(B, n_u * L)``.
    """
    B = X.shape[0]
    L, nu = process.L, process.n_u
    Y = np.stack([process.measurement(X[:, k], k) for k in range(L)], axis=1)
    Uk = U.reshape(B, L, nu)
    body = np.concatenate([Y, Uk], axis=2).reshape(B, -1)
    return np.concatenate([np.ones((B, 1), dtype=body.dtype), body], axis=1)


def fed_batch_reactor(params=None, L=20, n_sub=10, u_min=0.0, u_max=0.005):
    """The fed-batch reactor with measurements ``y = (c_A, c_B, V)``."""
    params = params or ReactorParams()
    if n_sub < 1:
        raise ValueError("n_sub must be >= 1")
    t_s = params.t_f / L
    dt = t_s / n_sub

    def transition(x, u, d, k):
        u = np.asarray(u)
        if u.ndim and u.shape[-1] == 1:
            u = u[..., 0]
        return rk4_substeps(_reactor_rhs_array, x, u, d, dt, n_sub, stage=k, guard=_concentration_guard)

    def initial_state(d):
        return np.array([d[0], d[1], d[2]], dtype=float)

    return BatchProcess(
        name="fed_batch_reactor",
        n_x=3,
        n_u=1,
        n_y=3,
        L=L,
        t_s=t_s,
        param_names=REACTOR_PARAM_NAMES,
        nominal_params=params.as_array(),
        u_min=u_min,
        u_max=u_max,
        transition=transition,
        measurement=lambda x, k: x,
        terminal_cost=_reactor_terminal_cost,
        initial_state=initial_state,
        measurement_names=("c_A", "c_B", "V"),
        meta={"n_sub": n_sub, "t_f": params.t_f},
    )


def reactor_from_config(cfg):
    """Build the reactor from a mapping with exactly ``REACTOR_CONFIG_KEYS``."""
    keys = set(cfg)
    missing = set(REACTOR_CONFIG_KEYS) - keys
    extra = keys - set(REACTOR_CONFIG_KEYS)
    if missing or extra:
        raise ValueError(f"process config keys mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    params = ReactorParams(**{k: float(cfg[k]) for k in REACTOR_PARAM_NAMES + ("t_f",)})
    return fed_batch_reactor(
        params, L=int(cfg["L"]), n_sub=int(cfg["n_sub"]), u_min=float(cfg["u_min"]), u_max=float(cfg["u_max"])
    )


def load_process_config(path):
    with open(Path(path)) as fh:
        return reactor_from_config(yaml.safe_load(fh))


def default_reactor_config():
    p = ReactorParams()
    cfg = {n: getattr(p, n) for n in REACTOR_PARAM_NAMES + ("t_f",)}
    cfg.update(L=20, n_sub=10, u_min=0.0, u_max=0.005)
    return cfg
