"""Seeded Monte Carlo scenarios: parameter disturbances plus measurement and
implementation noise."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DESIGN = "design"
TEST = "test"
NOMINAL = "nominal"


@dataclass(frozen=True)
class UncertaintySpec:
    """Uniform relative parameter disturbances and i.i.d. Gaussian noise.

    ``fraction`` is the half-range applied to every name in
    ``perturbed_params``; ``overrides`` gives individual half-ranges.
    Measurement channels whose name starts with ``c_`` use
    ``noise_std_conc``, all others ``noise_std_vol``, unless
    ``noise_std_y`` lists the channel stds explicitly.
    """

    perturbed_params: tuple = ("c_A0", "c_B0", "V0", "k1", "k2")
    fraction: float = 0.10
    noise_std_conc: float = 0.03
    noise_std_vol: float = 0.1
    noise_std_u: float = 2.5e-5
    seed: int = 0
    overrides: dict = field(default_factory=dict)
    noise_std_y: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "perturbed_params", tuple(self.perturbed_params))
        if self.fraction < 0 or any(v < 0 for v in self.overrides.values()):
            raise ValueError("disturbance fractions must be >= 0")
        stds = [self.noise_std_conc, self.noise_std_vol, self.noise_std_u]
        if self.noise_std_y is not None:
            stds += list(self.noise_std_y)
        if any(s < 0 for s in stds):
            raise ValueError("noise standard deviations must be >= 0")
        unknown = set(self.overrides) - set(self.perturbed_params)
        if unknown:
            raise ValueError(f"overrides for unperturbed parameters: {sorted(unknown)}")

    def half_range(self, name):
        return self.overrides.get(name, self.fraction)

    def channel_stds(self, process):
        """Per-stage noise stds ``(sigma_y, sigma_u)``."""
        if self.noise_std_y is not None:
            sy = np.asarray(self.noise_std_y, dtype=float)
            if sy.shape != (process.n_y,):
                raise ValueError("noise_std_y length must equal n_y")
        else:
            names = process.measurement_names or tuple(f"y{j}" for j in range(process.n_y))
            sy = np.array([self.noise_std_conc if n.startswith("c_") else self.noise_std_vol for n in names])
        su = np.full(process.n_u, self.noise_std_u)
        return sy, su

    def with_changes(self, **kw):
        data = dict(self.__dict__)
        data.update(kw)
        return UncertaintySpec(**data)


@dataclass(frozen=True)
class Scenario:
    id: int
    x0: np.ndarray
    param_offsets: np.ndarray
    noise_y: np.ndarray
    noise_u: np.ndarray
    tag: str = DESIGN

    def without_noise(self):
        return Scenario(
            self.id, self.x0, self.param_offsets, np.zeros_like(self.noise_y), np.zeros_like(self.noise_u), self.tag
        )


def nominal_scenario(process, id=0):
    d = process.nominal_params
    return Scenario(
        id=id,
        x0=np.asarray(process.initial_state(d), dtype=float),
        param_offsets=np.zeros(process.n_d),
        noise_y=np.zeros(process.n_y * process.L),
        noise_u=np.zeros(process.n_u * process.L),
        tag=NOMINAL,
    )


def sample_scenarios(spec, count, process, n_design=None, first_id=1):
    """Draw ``count`` scenarios sequentially from one RNG stream seeded by ``spec.seed``.

    The first ``n_design`` (default: all) are tagged design, the rest test.
    Ids start at ``first_id``; id 0 is reserved for the nominal point.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n_design = count if n_design is None else n_design
    missing = set(spec.perturbed_params) - set(process.param_names)
    if missing:
        raise ValueError(f"unknown parameters {sorted(missing)}")
    rng = np.random.default_rng(spec.seed)
    idx = [process.param_names.index(n) for n in spec.perturbed_params]
    half = np.array([spec.half_range(n) for n in spec.perturbed_params])
    sy, su = spec.channel_stds(process)
    L = process.L
    out = []
    for i in range(count):
        offsets = np.zeros(process.n_d)
        offsets[idx] = rng.uniform(-half, half)
        noise_y = (rng.standard_normal((L, process.n_y)) * sy).ravel()
        noise_u = (rng.standard_normal((L, process.n_u)) * su).ravel()
        d = process.nominal_params * (1.0 + offsets)
        out.append(
            Scenario(
                id=first_id + i,
                x0=np.asarray(process.initial_state(d), dtype=float),
                param_offsets=offsets,
                noise_y=noise_y,
                noise_u=noise_u,
                tag=DESIGN if i < n_design else TEST,
            )
        )
    return out


def split(scenarios):
    """``(design, test)`` lists by tag."""
    design = [s for s in scenarios if s.tag == DESIGN]
    test = [s for s in scenarios if s.tag == TEST]
    return design, test


def noise_covariance(spec, process):
    """Diagonal of the augmented stacked noise covariance, length ``(n_y + n_u) L + 1``.

    Leading zero for the constant entry, then per-stage variances ordered
    y-channels then u-channels.
    """
    sy, su = spec.channel_stds(process)
    block = np.concatenate([sy**2, su**2])
    return np.concatenate([[0.0], np.tile(block, process.L)])


def _header(process):
    cols = ["id", "tag"] + [f"offset_{n}" for n in process.param_names]
    cols += [f"ny_{k}_{j}" for k in range(process.L) for j in range(process.n_y)]
    cols += [f"nu_{k}_{j}" for k in range(process.L) for j in range(process.n_u)]
    return cols


def write_scenarios_csv(path, scenarios, process):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(process))
        for s in scenarios:
            vals = list(s.param_offsets) + list(s.noise_y) + list(s.noise_u)
            w.writerow([s.id, s.tag] + [repr(float(v)) for v in vals])


def read_scenarios_csv(path, process):
    nd, ny, nu = process.n_d, process.n_y * process.L, process.n_u * process.L
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != _header(process):
            raise ValueError("scenario CSV header does not match the process")
        for row in r:
            vals = np.array([float(v) for v in row[2:]])
            offsets = vals[:nd]
            d = process.nominal_params * (1.0 + offsets)
            out.append(
                Scenario(
                    id=int(row[0]),
                    x0=np.asarray(process.initial_state(d), dtype=float),
                    param_offsets=offsets,
                    noise_y=vals[nd:nd + ny],
                    noise_u=vals[nd + ny:nd + ny + nu],
                    tag=row[1],
                )
            )
    return out
