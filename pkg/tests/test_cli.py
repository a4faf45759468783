import filecmp
import json

import numpy as np
import pytest
import yaml

from batchsoc import cli
from batchsoc import experiments as ex
from batchsoc.structure import CONST_DIAG, Dims, InfeasibleStructure, conforms, encode
from batchsoc.trajectory_opt import NominalFailure, load_archive

SMOKE = {
    "seed": 3,
    "n_design": 6,
    "n_test": 4,
    "structures": ["const_diag"],
    "methods": ["ldsoc", "gdsoc", "gdsocsc"],
    "extremes": 0.1,
}


def write_config(path, **over):
    data = {**SMOKE, **over}
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = write_config(root / "cfg.yaml", output_dir=str(root / "out"))
    code = cli.main(["run", str(cfg)])
    return code, root / "out", cfg


def test_run_produces_all_artifacts(smoke_run):
    code, out, _ = smoke_run
    assert code == cli.EXIT_OK
    for rel in ("archive/index.json", "config.json", "scenarios/main.csv", "scenarios/extremes.csv",
                "tables/average_loss.csv", "tables/approximation_error.csv", "losses/main_simulated.csv",
                "trajectories/index.json", "figures/average_loss.png", "figures/trajectories.png",
                "figures/approximation_error.png", "report.md"):
        assert (out / rel).exists(), rel
    for m in ("ldsoc", "gdsoc", "gdsocsc"):
        assert (out / "designs" / f"H_{m}_const_diag.csv").exists()


def test_outputs_carry_hash_and_seed(smoke_run):
    _, out, cfg_path = smoke_run
    cfg = ex.ExperimentConfig.load(cfg_path)
    first = (out / "tables" / "average_loss.csv").read_text().splitlines()[0]
    assert first == f"# config_hash={cfg.hash()} seed=3"
    summary = json.loads((out / "losses" / "main_summary.json").read_text())
    assert summary["config_hash"] == cfg.hash() and summary["seed"] == 3
    _, meta = load_archive(out / "archive")
    assert meta["config_hash"] == cfg.hash()


def test_archive_contents(smoke_run):
    _, out, _ = smoke_run
    trajs, meta = load_archive(out / "archive")
    assert len(trajs) == 1 + 6 + 4 + 2
    assert all(t.converged for t in trajs)
    assert meta["failures"] == {}


def test_table_layout(smoke_run):
    _, out, _ = smoke_run
    header, rows = ex.read_stamped_csv(out / "tables" / "average_loss.csv")
    assert header == ["test_set", "ldSOC", "gdSOC", "gdSOCsc"]
    assert [r[0] for r in rows] == ["10%"]


def test_const_diag_design_shape(smoke_run):
    _, out, _ = smoke_run
    meta = json.loads((out / "designs" / "H_gdsocsc_const_diag.json").read_text())
    H = np.loadtxt(out / "designs" / "H_gdsocsc_const_diag.csv", delimiter=",")
    dims = Dims(*meta["dims"])
    assert conforms(H, CONST_DIAG, dims, atol=1e-12)
    assert np.all(H[np.arange(20), [1 + 4 * k + 3 for k in range(20)]] == -1)
    assert meta["constraint_residual"] <= 1e-8


def test_stages_rerun_from_disk(smoke_run, capsys):
    _, out, cfg = smoke_run
    before = (out / "tables" / "average_loss.csv").read_text()
    assert cli.main(["design", str(cfg)]) == cli.EXIT_OK
    assert cli.main(["evaluate", str(cfg)]) == cli.EXIT_OK
    assert cli.main(["report", str(cfg)]) == cli.EXIT_OK
    assert (out / "tables" / "average_loss.csv").read_text() == before
    assert "gdSOCsc" in capsys.readouterr().out


def test_optimize_is_deterministic(smoke_run, tmp_path):
    _, out, cfg = smoke_run
    assert cli.main(["optimize", str(cfg), "-o", str(tmp_path / "again")]) == cli.EXIT_OK
    cmp = filecmp.dircmp(out / "archive", tmp_path / "again" / "archive")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert filecmp.cmp(out / "scenarios" / "main.csv", tmp_path / "again" / "scenarios" / "main.csv", shallow=False)


def test_single_design_scenario(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", output_dir=str(tmp_path / "o"), n_design=1, n_test=0, extremes=None)
    assert cli.main(["optimize", str(cfg)]) == cli.EXIT_OK
    trajs, _ = load_archive(tmp_path / "o" / "archive")
    # the nominal reference is always archived next to the design scenario
    assert [t.scenario_id for t in trajs] == [0, 1]


@pytest.mark.parametrize("over", [{"structures": ["banded"]}, {"methods": []}, {"n_design": 0}, {"colour": 1},
                                  {"uncertainty": {"fraction": -1}}, {"process": {"k9": 1}}])
def test_config_errors_exit_2(tmp_path, over, capsys):
    cfg = write_config(tmp_path / "bad.yaml", output_dir=str(tmp_path / "o"), **over)
    assert cli.main(["optimize", str(cfg)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path):
    assert cli.main(["optimize", str(tmp_path / "none.yaml")]) == cli.EXIT_CONFIG
    cfg = write_config(tmp_path / "c.yaml", output_dir=str(tmp_path / "empty"))
    assert cli.main(["design", str(cfg)]) == cli.EXIT_CONFIG


def test_nominal_failure_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NominalFailure("nominal optimization did not converge")

    monkeypatch.setattr(ex, "solve_scenario_batch", boom)
    cfg = write_config(tmp_path / "c.yaml", output_dir=str(tmp_path / "o"))
    assert cli.main(["optimize", str(cfg)]) == cli.EXIT_NUMERICAL


def test_infeasible_structure_exit_3(smoke_run, monkeypatch, capsys):
    _, out, cfg = smoke_run

    def contradictory(tag, dims, fix_Huk=True):
        return encode((dims.rows, dims.cols), specified=[((0, 0), 1.0), ((0, 0), 2.0)])

    monkeypatch.setattr(ex, "compile_structure", contradictory)
    assert cli.main(["design", str(cfg), "-o", str(out)]) == cli.EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_stale_outputs_rejected(smoke_run, tmp_path):
    _, out, _ = smoke_run
    other = write_config(tmp_path / "c.yaml", output_dir=str(out), seed=4)
    assert cli.main(["design", str(other)]) == cli.EXIT_CONFIG
    cfg = ex.ExperimentConfig.load(other)
    with pytest.raises(ex.ConfigError):
        ex.load_designs(cfg)
