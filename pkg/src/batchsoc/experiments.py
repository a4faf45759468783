"""Experiment pipelines: scenario generation, trajectory archive, CV design,
closed-loop evaluation and the approximation-error analysis.

Each stage reads what the previous one wrote under ``output_dir`` so the
command-line stages can run separately. All outputs carry the config hash
and seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from batchsoc import cv_design as cvd
from batchsoc.closed_loop import evaluate, simulate_closed_loop, trajectory_rows, write_trajectory_csv
from batchsoc.process_model import REACTOR_CONFIG_KEYS, _derived_array, default_reactor_config, reactor_from_config
from batchsoc.scenario import (
    TEST,
    Scenario,
    UncertaintySpec,
    nominal_scenario,
    noise_covariance,
    read_scenarios_csv,
    sample_scenarios,
    write_scenarios_csv,
)
from batchsoc.structure import CONST_DIAG, STRUCTURES, Dims, compile_structure
from batchsoc.trajectory_opt import failure_report, load_archive, save_archive, solve_scenario_batch

log = logging.getLogger(__name__)

MAIN = "main"
EXTREMES = "extremes"
SEED_STRIDE = 1000


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class TestSet:
    """An additional test set drawn with its own disturbance ranges."""

    name: str
    fraction: float = 0.10
    perturbed_params: tuple | None = None
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    output_dir: str = "out"
    seed: int = 1
    n_design: int = 100
    n_test: int = 100
    structures: tuple = (CONST_DIAG,)
    methods: tuple = cvd.METHODS
    process: dict = field(default_factory=default_reactor_config)
    uncertainty: dict = field(default_factory=dict)
    test_sets: list = field(default_factory=list)
    extremes: float | None = None

    def __post_init__(self):
        self.structures = tuple(self.structures)
        self.methods = tuple(m.lower() for m in self.methods)
        self.test_sets = [t if isinstance(t, TestSet) else TestSet(**t) for t in self.test_sets]
        self.validate()

    def validate(self):
        if self.n_design < 1 or self.n_test < 0:
            raise ConfigError("n_design must be >= 1 and n_test >= 0")
        if not self.structures or not self.methods:
            raise ConfigError("at least one structure and one method are required")
        bad = [s for s in self.structures if s not in STRUCTURES]
        if bad:
            raise ConfigError(f"unknown structures {bad}; choose from {STRUCTURES}")
        bad = [m for m in self.methods if m not in cvd.METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {cvd.METHODS}")
        names = [t.name for t in self.test_sets]
        if len(set(names)) != len(names) or MAIN in names or EXTREMES in names:
            raise ConfigError("test set names must be unique and differ from 'main' and 'extremes'")
        try:
            self.uncertainty_spec()
            for t in self.test_sets:
                self.test_spec(t)
            self.build_process()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def to_dict(self):
        d = asdict(self)
        d["structures"] = list(self.structures)
        d["methods"] = list(self.methods)
        return d

    def hash(self):
        """Short digest of everything that affects results (not the output path)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def stamp(self):
        return {"config_hash": self.hash(), "seed": self.seed}

    def build_process(self):
        cfg = default_reactor_config()
        cfg.update(self.process)
        if set(cfg) != set(REACTOR_CONFIG_KEYS):
            raise ConfigError(f"process keys must be {REACTOR_CONFIG_KEYS}")
        return reactor_from_config(cfg)

    def uncertainty_spec(self):
        return UncertaintySpec(**{**self.uncertainty, "seed": self.seed})

    def test_spec(self, t):
        base = self.uncertainty_spec()
        kw = {"fraction": t.fraction, "overrides": dict(t.overrides)}
        if t.perturbed_params is not None:
            kw["perturbed_params"] = tuple(t.perturbed_params)
        return base.with_changes(**kw)

    @property
    def out(self):
        return Path(self.output_dir)

    def cells(self):
        return [(m, s) for s in self.structures for m in self.methods]

    def label(self, method, structure):
        if len(self.structures) == 1:
            return cvd.METHOD_LABELS[method]
        if len(self.methods) == 1:
            return structure
        return f"{cvd.METHOD_LABELS[method]}/{structure}"


def write_json(path, payload, cfg):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({**cfg.stamp(), **payload}, fh, indent=1, sort_keys=True, default=cvd._jsonable)
    return path


def write_stamped_csv(path, header, rows, cfg):
    """CSV with a leading ``# config_hash=... seed=...`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()} seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_stamped_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# scenarios and trajectories


def extreme_scenarios(process, spec, fraction, first_id):
    """Noise-free scenarios with every perturbed parameter at ``+fraction`` and ``-fraction``."""
    out = []
    idx = [process.param_names.index(n) for n in spec.perturbed_params]
    for i, sgn in enumerate((1.0, -1.0)):
        off = np.zeros(process.n_d)
        off[idx] = sgn * fraction
        d = process.nominal_params * (1.0 + off)
        out.append(
            Scenario(
                id=first_id + i,
                x0=np.asarray(process.initial_state(d), dtype=float),
                param_offsets=off,
                noise_y=np.zeros(process.n_y * process.L),
                noise_u=np.zeros(process.n_u * process.L),
                tag=TEST,
            )
        )
    return out


def scenario_sets(cfg, process):
    """Ordered mapping of set name to scenarios; ``main`` holds design then test."""
    spec = cfg.uncertainty_spec()
    n_main = cfg.n_design + cfg.n_test
    sets = {MAIN: sample_scenarios(spec, n_main, process, n_design=cfg.n_design, first_id=1)}
    next_id = 1 + n_main
    for j, t in enumerate(cfg.test_sets):
        if cfg.n_test < 1:
            raise ConfigError("extra test sets need n_test >= 1")
        tspec = cfg.test_spec(t).with_changes(seed=cfg.seed + SEED_STRIDE * (j + 1))
        sets[t.name] = sample_scenarios(tspec, cfg.n_test, process, n_design=0, first_id=next_id)
        next_id += cfg.n_test
    if cfg.extremes:
        sets[EXTREMES] = extreme_scenarios(process, spec, cfg.extremes, next_id)
    return sets


@dataclass
class State:
    """Everything the design and evaluation stages need."""

    cfg: ExperimentConfig
    process: object
    sets: dict
    trajectories: dict

    @property
    def nominal(self):
        return self.trajectories[0]

    @property
    def design(self):
        return [s for s in self.sets[MAIN] if s.tag != TEST]

    def test(self, name=MAIN):
        return [s for s in self.sets[name] if s.tag == TEST]

    def trajs(self, scenarios):
        return [self.trajectories[s.id] for s in scenarios]

    @property
    def W2(self):
        return noise_covariance(self.cfg.uncertainty_spec(), self.process)

    @property
    def dims(self):
        return Dims.of(self.process)


def run_optimize(cfg):
    """Sample all scenario sets, optimize every scenario and write the archive."""
    process = cfg.build_process()
    sets = scenario_sets(cfg, process)
    out = cfg.out
    for name, scs in sets.items():
        path = out / "scenarios" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_scenarios_csv(path, scs, process)
    everything = [nominal_scenario(process)] + [s for scs in sets.values() for s in scs]
    trajs = solve_scenario_batch(process, everything)
    fails = failure_report(trajs)
    meta = {**cfg.stamp(), "sets": {k: [s.id for s in v] for k, v in sets.items()}, "failures": fails}
    save_archive(out / "archive", trajs, meta)
    write_json(out / "config.json", {"config": cfg.to_dict()}, cfg)
    return State(cfg, process, sets, {t.scenario_id: t for t in trajs})


def load_state(cfg):
    process = cfg.build_process()
    out = cfg.out
    trajs, meta = load_archive(out / "archive")
    if meta.get("config_hash") != cfg.hash():
        raise ConfigError(f"archive in {out} was built from a different config ({meta.get('config_hash')})")
    sets = {name: read_scenarios_csv(out / "scenarios" / f"{name}.csv", process) for name in meta["sets"]}
    return State(cfg, process, sets, {t.scenario_id: t for t in trajs})


# ---------------------------------------------------------------------------
# design


def design_cells(state, cells=None):
    """Solve every ``(method, structure)`` cell; returns ``{(method, structure): DesignResult}``."""
    cfg = state.cfg
    cells = cells or cfg.cells()
    dtrajs = [t for t in state.trajs(state.design) if t.converged]
    if len(dtrajs) < len(state.design):
        log.warning("%d design scenarios failed and are skipped", len(state.design) - len(dtrajs))
    model = cvd.LossModel.build(dtrajs, state.nominal, state.W2, state.dims)
    F = None
    results = {}
    shortcut = {}
    for method, tag in cells:
        cs = compile_structure(tag, state.dims)
        if tag not in shortcut and method in (cvd.GDSOCSC, cvd.GDSOC):
            shortcut[tag] = cvd.solve_gdsoc_shortcut(model, cs, tag)
        if method == cvd.GDSOCSC:
            res = shortcut[tag]
        elif method == cvd.GDSOC:
            obj = cvd.ExactObjective(dtrajs, state.W2, state.dims)
            res = cvd.solve_gdsoc_numerical(
                obj, cs, shortcut[tag].cm, tag, state.dims, precondition=model.normal_matrix() / model.N
            )
        else:
            spec = cfg.uncertainty_spec()
            res, F = cvd.solve_ldsoc_baseline(
                state.process, state.nominal, state.design, cs, tag, state.W2, spec.perturbed_params, F
            )
        results[(method, tag)] = res
    return results


def run_design(state, cells=None):
    results = design_cells(state, cells)
    cfg = state.cfg
    for (method, tag), res in results.items():
        res.save(cfg.out / "designs", extra=cfg.stamp())
    return results


def load_designs(cfg):
    out = {}
    for method, tag in cfg.cells():
        path = cfg.out / "designs" / f"H_{method}_{tag}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing design {path}; run the design stage first")
        with open(path) as fh:
            stamp = json.load(fh).get("config_hash")
        if stamp != cfg.hash():
            raise ConfigError(f"design {path} was built from a different config ({stamp})")
        out[(method, tag)] = cvd.DesignResult.load(path)
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate_sets(state, designs):
    """Loss reports for every test set, keyed by set name."""
    cfg = state.cfg
    cms = {cfg.label(m, s): res.cm for (m, s), res in designs.items()}
    reports = {}
    for name in state.sets:
        if name == EXTREMES:
            continue
        scs = state.test(name)
        if scs:
            reports[name] = evaluate(cms, scs, state.trajectories, state.process)
    return reports


def set_label(cfg, name):
    if name == MAIN:
        return f"{cfg.uncertainty_spec().fraction * 100:g}%"
    return name


def loss_table(cfg, reports):
    """Rows of ``(test set, average loss per design label)``."""
    labels = [cfg.label(m, s) for m, s in cfg.cells()]
    rows = []
    for name, rep in reports.items():
        rows.append([set_label(cfg, name)] + [rep.average(lab) for lab in labels])
    return ["test_set"] + labels, rows


def approximation_errors(state, designs, report):
    """Per-scenario simulated losses beside quadratic approximations on the main test set.

    For the first design, columns compare the exact-Hessian quadratic loss
    with the gentle (per-scenario Hessian, nominal scaling) and frozen
    (nominal Hessian everywhere) approximations, all with expected noise.
    The ``abs_err_*`` columns give ``|quadratic - simulated|`` per design
    with the realized noise.
    """
    cfg = state.cfg
    scs = [s for s in state.test(MAIN) if state.trajectories[s.id].has_second_order]
    trajs = state.trajs(scs)
    labels = [cfg.label(m, s) for m, s in designs]
    first = next(iter(designs.values()))
    gentle = cvd.LossModel.build(trajs, state.nominal, state.W2, state.dims).scenario_losses(first.cm)
    frozen = cvd.LossModel.build(trajs, state.nominal, state.W2, state.dims, frozen=True).scenario_losses(first.cm)
    header = ["scenario_id", "simulated", "quad_exact", "quad_gentle", "quad_frozen"]
    header += [f"abs_err_{lab}" for lab in labels]
    pos = {sid: i for i, sid in enumerate(report.scenario_ids)}
    first_label = labels[0]
    rows = []
    for i, (s, t) in enumerate(zip(scs, trajs)):
        j = pos[s.id]
        exact = sum(cvd.loss_terms(first.cm, t, state.W2))
        row = [s.id, report.simulated[first_label][j], exact, gentle[i], frozen[i]]
        row += [abs(report.quadratic[lab][j] - report.simulated[lab][j]) for lab in labels]
        rows.append(row)
    return header, rows


def extreme_trajectories(state, designs):
    """Closed-loop and optimal stage trajectories for the extreme scenarios."""
    cfg = state.cfg
    p = state.process
    header = ["k", "t", "u", "c_A", "c_B", "V", "c_C", "c_D"]
    files = []
    for s in state.sets.get(EXTREMES, []):
        ref = state.trajectories[s.id]
        runs = {"optimal": _open_loop_run(p, s, ref)}
        for (m, tag), res in designs.items():
            runs[cfg.label(m, tag)] = simulate_closed_loop(p, res.cm, s, ref.J, noise=False)
        for lab, run in runs.items():
            rows = trajectory_rows(p, run, s, derived=lambda x, d: _derived_array(x, d))
            safe = lab.replace("/", "_")
            path = cfg.out / "trajectories" / f"scenario_{s.id}_{safe}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_stamped_csv(path, header, rows, cfg)
            files.append({"scenario_id": s.id, "label": lab, "file": path.name,
                          "offset_sign": float(np.sign(np.sum(s.param_offsets))), "J": run.J})
    return files


def _open_loop_run(process, scenario, traj):
    from batchsoc.closed_loop import ClosedLoopRun
    from batchsoc.process_model import simulate_batch

    d, x0 = process.params_for(scenario)
    X, J = simulate_batch(process, traj.u[None, :], d, x0)
    return ClosedLoopRun(scenario.id, traj.u, traj.u, X[0], traj.xi, float(J[0]), traj.J, 0, 0.0)


def run_evaluate(state, designs=None):
    cfg = state.cfg
    designs = designs or load_designs(cfg)
    reports = evaluate_sets(state, designs)
    out = cfg.out / "losses"
    out.mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        for kind in ("simulated", "quadratic"):
            data = getattr(rep, kind)
            rows = [[sid] + [data[lab][i] for lab in rep.labels] for i, sid in enumerate(rep.scenario_ids)]
            write_stamped_csv(out / f"{name}_{kind}.csv", ["scenario_id"] + rep.labels, rows, cfg)
        write_json(out / f"{name}_summary.json", {"test_set": set_label(cfg, name), "summary": rep.summary(),
                                                  "failures": rep.failures}, cfg)
    header, rows = loss_table(cfg, reports)
    write_stamped_csv(cfg.out / "tables" / "average_loss.csv", header, rows, cfg)
    if MAIN in reports:
        h, r = approximation_errors(state, designs, reports[MAIN])
        write_stamped_csv(cfg.out / "tables" / "approximation_error.csv", h, r, cfg)
        labels = h[5:]
        errs = np.array([row[5:] for row in r], dtype=float)
        stats = [["average"] + list(np.nanmean(errs, axis=0)), ["std"] + list(np.nanstd(errs, axis=0, ddof=1))]
        write_stamped_csv(cfg.out / "tables" / "approximation_error_stats.csv",
                          ["statistic"] + [lab.replace("abs_err_", "") for lab in labels], stats, cfg)
    files = extreme_trajectories(state, designs)
    write_json(cfg.out / "trajectories" / "index.json", {"runs": files}, cfg)
    return reports
