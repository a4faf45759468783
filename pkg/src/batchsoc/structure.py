"""Structural constraints on the stacked combination matrix.

Entry constraints of two kinds are encoded linearly on ``vec(M)``
(column-major stacking):

* specified elements ``M[a, b] = value`` give a column ``e_m`` with ``b_j = value``;
* repetitive elements ``M[a1, b1] = M[a2, b2]`` give ``e_m1 - e_m2`` with ``b_j = 0``;

where ``m = b * rows + a`` (zero-based). The stacked matrix has ``n_u L`` rows
and ``(n_y + n_u) L + 1`` columns; column 0 multiplies the constant 1 of the
augmented measurement vector and so holds the negated setpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import sparse

LBT = "lbt"
VARYING_DIAG = "varying_diag"
CONST_DIAG = "const_diag"
STRUCTURES = (LBT, VARYING_DIAG, CONST_DIAG)

SPECIFIED = "specified"
REPETITIVE = "repetitive"


class InfeasibleStructure(ValueError):
    """Constraints are contradictory."""


class SingularBlockError(np.linalg.LinAlgError):
    """The input block of a stage CV is not invertible."""


def vec(M):
    """Stack the columns of ``M`` into one vector."""
    return np.asarray(M).reshape(-1, order="F")


def unvec(v, rows, cols):
    v = np.asarray(v)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape {v.size} entries into {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def vec_index(a, b, rows):
    return b * rows + a


@dataclass(frozen=True)
class Dims:
    n_u: int
    n_y: int
    L: int

    @property
    def m(self):
        return self.n_y + self.n_u

    @property
    def rows(self):
        return self.n_u * self.L

    @property
    def cols(self):
        return self.m * self.L + 1

    @property
    def size(self):
        return self.rows * self.cols

    def row_slice(self, k):
        return slice(k * self.n_u, (k + 1) * self.n_u)

    def block_cols(self, j):
        """Columns of the measurement block for stage ``j``."""
        return slice(1 + j * self.m, 1 + (j + 1) * self.m)

    def y_cols(self, j):
        return slice(1 + j * self.m, 1 + j * self.m + self.n_y)

    def u_cols(self, j):
        return slice(1 + j * self.m + self.n_y, 1 + (j + 1) * self.m)

    @classmethod
    def of(cls, process):
        return cls(process.n_u, process.n_y, process.L)


class ConstraintSet:
    """Linear constraints ``Q^T vec(M) = b`` with unit-sparse columns of ``Q``."""

    def __init__(self, size, columns, b, kinds):
        self.size = int(size)
        self.columns = [tuple((int(i), float(v)) for i, v in col) for col in columns]
        self.b = np.asarray(b, dtype=float)
        self.kinds = list(kinds)
        if not (len(self.columns) == self.b.size == len(self.kinds)):
            raise ValueError("columns, b and kinds must have equal length")

    @property
    def q(self):
        return len(self.columns)

    @property
    def Q(self):
        if self.q == 0:
            return sparse.csc_matrix((self.size, 0))
        rows, cols, vals = [], [], []
        for j, col in enumerate(self.columns):
            for i, v in col:
                rows.append(i)
                cols.append(j)
                vals.append(v)
        return sparse.csc_matrix((vals, (rows, cols)), shape=(self.size, self.q))

    def dense(self):
        return self.Q.toarray()

    def residual(self, v):
        """``||Q^T v - b||_inf``."""
        if self.q == 0:
            return 0.0
        return float(np.max(np.abs(self.Q.T @ np.asarray(v) - self.b)))

    def __add__(self, other):
        if other.size != self.size:
            raise ValueError("constraint sets act on different sizes")
        return ConstraintSet(
            self.size, self.columns + other.columns, np.concatenate([self.b, other.b]), self.kinds + other.kinds
        )

    def affine_parameterization(self):
        """Particular solution ``v0`` and basis ``Z`` with ``{v : Q^T v = b} = v0 + range(Z)``.

        Entries tied by repetitive constraints form groups; a group containing a
        specified entry is fixed, every other group is one free parameter whose
        basis column is the group's indicator. Raises
        :class:`InfeasibleStructure` when specified values conflict.
        """
        parent = np.arange(self.size)

        def find(i):
            root = i
            while parent[root] != root:
                root = parent[root]
            while parent[i] != root:
                parent[i], i = root, parent[i]
            return root

        for col, kind in zip(self.columns, self.kinds):
            if kind == REPETITIVE:
                (i1, _), (i2, _) = col
                r1, r2 = find(i1), find(i2)
                if r1 != r2:
                    parent[max(r1, r2)] = min(r1, r2)
        fixed = {}
        for col, kind, bj in zip(self.columns, self.kinds, self.b):
            if kind == SPECIFIED:
                (i, val), = col
                r = find(i)
                value = bj / val
                if r in fixed and not np.isclose(fixed[r], value, rtol=0, atol=1e-14):
                    raise InfeasibleStructure(f"entry {i}: conflicting specified values {fixed[r]} and {value}")
                fixed[r] = value
        roots = np.array([find(i) for i in range(self.size)])
        v0 = np.zeros(self.size)
        free_roots = []
        for r in np.unique(roots):
            if r in fixed:
                v0[roots == r] = fixed[r]
            else:
                free_roots.append(r)
        Z = np.zeros((self.size, len(free_roots)))
        for j, r in enumerate(free_roots):
            Z[roots == r, j] = 1.0
        return v0, Z

    def independent(self):
        """True when the columns of ``Q`` are linearly independent.

        Each column is an edge of a graph over the entries plus a ground node
        (specified: entry to ground, repetitive: entry to entry); the
        incidence columns are independent exactly when the edges form a forest.
        """
        ground = self.size
        parent = list(range(self.size + 1))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for col in self.columns:
            i1 = col[0][0]
            i2 = col[1][0] if len(col) == 2 else ground
            r1, r2 = find(i1), find(i2)
            if r1 == r2:
                return False
            parent[r1] = r2
        return True

    def to_csv(self, path):
        """Dump as ``column, index, value`` triplets followed by the ``b`` entries."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["column", "index", "value", "kind", "b"])
            for j, (col, kind, bj) in enumerate(zip(self.columns, self.kinds, self.b)):
                for i, v in col:
                    w.writerow([j, i, repr(v), kind, repr(float(bj))])


def encode(shape, specified=(), repetitive=()):
    """Constraint set for a ``rows x cols`` matrix.

    ``specified`` holds ``((a, b), value)`` pairs, ``repetitive`` holds
    ``((a1, b1), (a2, b2))`` pairs, all zero-based.
    """
    rows, cols = shape
    columns, b, kinds = [], [], []
    for (a, c), value in specified:
        columns.append(((vec_index(a, c, rows), 1.0),))
        b.append(value)
        kinds.append(SPECIFIED)
    for (a1, c1), (a2, c2) in repetitive:
        columns.append(((vec_index(a1, c1, rows), 1.0), (vec_index(a2, c2, rows), -1.0)))
        b.append(0.0)
        kinds.append(REPETITIVE)
    return ConstraintSet(rows * cols, columns, b, kinds)


def _zero_blocks(tag, dims):
    """(row stage k, measurement stage j) pairs forced to zero."""
    for k in range(dims.L):
        for j in range(dims.L):
            if j > k or (tag != LBT and j != k):
                yield k, j


def compile_structure(tag, dims, fix_Huk=True):
    """Constraints for one of the three stacked CV structures.

    * ``lbt``: lower block triangular, stage ``k`` CVs use measurements up to ``k``;
    * ``varying_diag``: stage ``k`` CVs use only stage ``k`` measurements;
    * ``const_diag``: as ``varying_diag`` with one shared gain block and setpoint.

    With ``fix_Huk`` every input block ``H_{u,k}(k)`` is fixed to ``-I``.
    Repetition ties anchor on stage 0.
    """
    if tag not in STRUCTURES:
        raise ValueError(f"unknown structure {tag!r}; expected one of {STRUCTURES}")
    if not isinstance(dims, Dims):
        dims = Dims(*dims)
    rows = dims.rows
    specified, repetitive = [], []
    for k, j in _zero_blocks(tag, dims):
        for a in range(dims.n_u):
            for c in range(dims.m):
                specified.append(((k * dims.n_u + a, 1 + j * dims.m + c), 0.0))
    if tag == CONST_DIAG:
        for k in range(1, dims.L):
            for a in range(dims.n_u):
                repetitive.append(((k * dims.n_u + a, 0), (a, 0)))
                n_tied = dims.n_y if fix_Huk else dims.m
                for c in range(n_tied):
                    repetitive.append(((k * dims.n_u + a, 1 + k * dims.m + c), (a, 1 + c)))
    cs = encode((rows, dims.cols), specified, repetitive)
    if fix_Huk:
        cs = cs + input_block_constraints(dims)
    return cs


def input_block_constraints(dims):
    """Specified-element constraints ``H_{u,k}(k) = -I`` for every stage."""
    specified = []
    for k in range(dims.L):
        for a in range(dims.n_u):
            for c in range(dims.n_u):
                specified.append(((k * dims.n_u + a, 1 + k * dims.m + dims.n_y + c), -1.0 if a == c else 0.0))
    return encode((dims.rows, dims.cols), specified)


def conforms(H, tag, dims, fix_Huk=True, atol=0.0):
    """Check the structure definition directly on the matrix (no encoding)."""
    H = np.asarray(H)
    if H.shape != (dims.rows, dims.cols):
        return False
    for k, j in _zero_blocks(tag, dims):
        if np.any(np.abs(H[dims.row_slice(k), dims.block_cols(j)]) > atol):
            return False
    if tag == CONST_DIAG:
        ref_c = H[dims.row_slice(0), 0]
        ref = H[dims.row_slice(0), dims.block_cols(0)]
        for k in range(1, dims.L):
            if np.any(np.abs(H[dims.row_slice(k), 0] - ref_c) > atol):
                return False
            if np.any(np.abs(H[dims.row_slice(k), dims.block_cols(k)] - ref) > atol):
                return False
    if fix_Huk:
        for k in range(dims.L):
            if np.any(np.abs(H[dims.row_slice(k), dims.u_cols(k)] + np.eye(dims.n_u)) > atol):
                return False
    return True


@dataclass
class CombinationMatrix:
    """Stacked combination matrix with its structure tag.

    Column 0 stores the negated setpoints so that the closed-loop condition
    is ``H @ xi = 0`` with ``xi[0] = 1``.
    """

    H: np.ndarray
    tag: str
    dims: Dims

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        if self.H.shape != (self.dims.rows, self.dims.cols):
            raise ValueError(f"H has shape {self.H.shape}, expected {(self.dims.rows, self.dims.cols)}")

    @classmethod
    def from_vec(cls, v, tag, dims):
        return cls(unvec(v, dims.rows, dims.cols).copy(), tag, dims)

    @property
    def vec(self):
        return vec(self.H)

    def block(self, j, k):
        """``H_j(k)``: contribution of stage-``j`` measurements to stage-``k`` CVs."""
        return self.H[self.dims.row_slice(k), self.dims.block_cols(j)]

    def const(self, k):
        return self.H[self.dims.row_slice(k), 0]

    def setpoint(self, k):
        return -self.const(k)

    def H_y(self, k):
        return self.H[self.dims.row_slice(k), self.dims.y_cols(k)]

    def H_u(self, k):
        return self.H[self.dims.row_slice(k), self.dims.u_cols(k)]

    def stage_gains(self, k=0):
        """``(setpoint, H_y, H_u)`` of stage ``k``; the whole CV for ``const_diag``."""
        return self.setpoint(k), self.H_y(k), self.H_u(k)

    def scaled(self, T):
        return CombinationMatrix(np.asarray(T) @ self.H, self.tag, self.dims)


def feedback_blocks(cm, k, cond_limit=1e12):
    """Partition of stage-``k`` CVs used to recover ``u(k)``.

    Returns ``(const, H_past, H_y, H_u, cond)`` where ``[const, H_past]``
    multiplies the augmented history ``[1, xi(0), ..., xi(k-1)]``.
    """
    dims = cm.dims
    if not 0 <= k < dims.L:
        raise IndexError(f"stage {k} outside [0, {dims.L})")
    rows = dims.row_slice(k)
    const = cm.H[rows, :1]
    past = cm.H[rows, 1:1 + k * dims.m]
    H_y = cm.H_y(k)
    H_u = cm.H_u(k)
    cond = float(np.linalg.cond(H_u))
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularBlockError(f"H_u,k({k}) is singular (condition number {cond:.3e})")
    return const, past, H_y, H_u, cond
