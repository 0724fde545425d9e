import numpy as np
import pytest

from plumeplace import cli
from plumeplace.cli import main
from plumeplace.inverse import SolverDivergenceError
from plumeplace.optimize import NumericalFailure
from plumeplace.layout import read_layout_csv

SMALL_EX1 = """preset: example1-1sensor
seed: 3
algorithm:
  name: sba
  sba: {M: 5, rho: 5.0e-3, batch: 5}
evaluation: {N: 200}
"""


@pytest.fixture
def cfgfile(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(SMALL_EX1)
    return p


def test_optimize_writes_outputs_and_is_reproducible(cfgfile, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert main(["optimize", "--config", str(cfgfile), "--out", str(out), "--quiet"]) == 0
        outs.append(out)
    for name in ("trajectory.csv", "layout_final.csv", "optimize_summary.txt", "layout_init.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "trajectory.csv").read_text().startswith("iter,sensor,x,y,objective,grad_norm\n")
    assert read_layout_csv(outs[0] / "layout_final.csv").shape == (1, 2)


def test_seed_override_changes_result(cfgfile, tmp_path):
    main(["optimize", "--config", str(cfgfile), "--out", str(tmp_path / "a"), "--quiet"])
    main(["optimize", "--config", str(cfgfile), "--out", str(tmp_path / "b"), "--seed", "9", "--quiet"])
    assert (tmp_path / "a" / "trajectory.csv").read_text() != (tmp_path / "b" / "trajectory.csv").read_text()


def test_evaluate_and_oracle(cfgfile, tmp_path, capsys):
    lay = tmp_path / "lay.csv"
    lay.write_text("sensor,x,y\n0,450,0\n")
    assert main(["evaluate", "--config", str(cfgfile), "--layout", str(lay), "--out", str(tmp_path)]) == 0
    assert "imse:" in capsys.readouterr().out
    oracle = tmp_path / "oracle.yaml"
    oracle.write_text(SMALL_EX1.replace("evaluation: {N: 200}", "evaluation: {N: 200, estimator: oracle}"))
    main(["evaluate", "--config", str(oracle), "--layout", str(lay), "--out", str(tmp_path), "--quiet"])
    assert "imse: 0\n" in capsys.readouterr().out


def test_sample_field_grid(tmp_path):
    cfg = tmp_path / "f.yaml"
    cfg.write_text("""domain: {lower: [-2, -2], upper: [2, 2]}
sources: {positions: [[0, 0]], heights: 0.0}
emission_prior: {mean: 1.0, std: 0.0}
wind_prior: {vector: [1, 0]}
sample_field: {grid_size: 5}
""")
    assert main(["sample-field", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 0
    rows = (tmp_path / "field.csv").read_text().splitlines()
    assert rows[0] == "x,y,concentration" and len(rows) == 26
    vals = {tuple(map(float, r.split(",")[:2])): float(r.split(",")[2]) for r in rows[1:]}
    # one unit downwind on the centreline, no stack height
    np.testing.assert_allclose(vals[(1.0, 0.0)], 1 / (2 * np.pi))
    assert vals[(-1.0, 0.0)] == 0.0


def test_init_design_random(tmp_path, capsys):
    cfg = tmp_path / "d.yaml"
    cfg.write_text("preset: example2-5sensors\ndesign: {method: random, n_sensors: 3}\n")
    assert main(["init-design", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 0
    assert "a_optimal_risk:" in capsys.readouterr().out
    assert read_layout_csv(tmp_path / "layout_init.csv").shape == (3, 2)


@pytest.mark.parametrize("body", ["seed: 1\nbogus: 2\n", "preset: example1-1sensor\nnoise: {sigma: -1}\n",
                                  "preset: example1-1sensor\nseed: [\n"])
def test_config_errors_exit_2(tmp_path, body):
    p = tmp_path / "bad.yaml"
    p.write_text(body)
    assert main(["optimize", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_bad_layout_exit_2(cfgfile, tmp_path, capsys):
    lay = tmp_path / "lay.csv"
    lay.write_text("sensor,x,y\n0,abc,0\n")
    assert main(["evaluate", "--config", str(cfgfile), "--layout", str(lay), "--out", str(tmp_path)]) == 2
    assert ":2:" in capsys.readouterr().err


@pytest.mark.parametrize("exc", [NumericalFailure("nan at iteration 4"), np.linalg.LinAlgError("singular"),
                                 SolverDivergenceError("diverged")])
def test_numerical_failure_exit_3(cfgfile, tmp_path, monkeypatch, capsys, exc):
    def boom(*args, **kwargs):
        raise exc
    monkeypatch.setattr(cli, "sba_run", boom)
    assert main(["optimize", "--config", str(cfgfile), "--out", str(tmp_path), "--quiet"]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_unrepresentable_sigma_exit_2(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("preset: example1-1sensor\nnoise: {sigma: 1.0e-200}\n")
    assert main(["optimize", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == 2


def test_missing_source_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["optimize"])
    assert exc.value.code == 2
