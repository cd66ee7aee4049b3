import json

import pandas as pd
import pytest

from src.main_app import EXIT_OK, EXIT_USAGE, main
from src.utils.config import RESULT_SCHEMA_NAME


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"k1": 3, "k2": 2, "chains": 1, "is_k": 50, "seed": 5}))
    return str(path)


def _simulate(tmp_path, setting=1, name="data.csv"):
    out = tmp_path / name
    code = main(["simulate", "--setting", str(setting), "--seed", "3",
                 "--n-subjects", "6", "--t-per-subject", "3", "--out", str(out)])
    assert code == EXIT_OK
    return str(out)


def test_simulate_writes_csv(tmp_path):
    frame = pd.read_csv(_simulate(tmp_path, setting=3))
    assert list(frame.columns) == ["subject_id", "time", "y", "s", "x_1", "x_2", "z_1", "z_2"]
    assert len(frame) == 18


def test_fit_then_loglik_agree(tmp_path, config_file):
    data = _simulate(tmp_path)
    fit_out = tmp_path / "fit.json"
    assert main(["fit", "--data", data, "--config", config_file, "--out", str(fit_out)]) == EXIT_OK
    doc = json.loads(fit_out.read_text())
    assert doc["schema"] == RESULT_SCHEMA_NAME
    assert doc["command"] == "fit"
    assert set(doc["estimates"]) == {"phi", "a", "b", "alpha_1", "beta_1", "sigma1_sq", "sigma2_sq"}
    assert doc["trajectory"]["iterations"] == 5
    assert len(doc["random_effects"]) == 6

    ll_out = tmp_path / "ll.json"
    assert main(["loglik", "--data", data, "--config", config_file, "--fit", str(fit_out),
                 "--out", str(ll_out)]) == EXIT_OK
    ll = json.loads(ll_out.read_text())
    assert ll["loglik"]["value"] == pytest.approx(doc["loglik"]["value"], abs=1e-8)


def test_loglik_quadrature(tmp_path, config_file):
    data = _simulate(tmp_path)
    fit_out = tmp_path / "fit.json"
    main(["fit", "--data", data, "--config", config_file, "--out", str(fit_out)])
    ll_out = tmp_path / "quad.json"
    assert main(["loglik", "--data", data, "--config", config_file, "--fit", str(fit_out),
                 "--quadrature", "10", "--out", str(ll_out)]) == EXIT_OK
    ll = json.loads(ll_out.read_text())
    assert ll["loglik"]["mc_se"] is None
    assert ll["loglik"]["value"] < 0


def test_fit_with_null_pins_coefficients(tmp_path, config_file):
    data = _simulate(tmp_path)
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", data, "--config", config_file, "--null", "alpha_1",
                 "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["estimates"]["alpha_1"] == 0.0
    assert doc["se"]["alpha_1"] is None


def test_joint_null_test(tmp_path, config_file):
    data = _simulate(tmp_path, setting=4)
    out = tmp_path / "test.json"
    assert main(["test", "--data", data, "--config", config_file, "--null", "alpha_1,beta_1",
                 "--out", str(out)]) == EXIT_OK
    tests = json.loads(out.read_text())["tests"]
    joint = [t for t in tests if t["kind"] == "lrt"]
    assert len(joint) == 1
    assert joint[0]["df"] == 2
    assert 0.0 <= joint[0]["p_value"] <= 1.0


def test_bench_is_reproducible(tmp_path, config_file):
    outputs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        assert main(["bench", "--setting", "1", "--reps", "2", "--n-subjects", "6", "--t-per-subject", "3",
                     "--config", config_file, "--out", str(out)]) == EXIT_OK
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    frame = pd.read_csv(tmp_path / "a.csv")
    assert frame["n_reps"].eq(2).all()


def test_unknown_flag_is_usage_error():
    assert main(["fit", "--bogus"]) == EXIT_USAGE


def test_missing_data_file(tmp_path, config_file):
    assert main(["fit", "--data", str(tmp_path / "absent.csv"), "--config", config_file,
                 "--out", str(tmp_path / "o.json")]) == EXIT_USAGE


def test_invalid_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"k1": -1}))
    data = _simulate(tmp_path)
    assert main(["fit", "--data", data, "--config", str(bad), "--out", str(tmp_path / "o.json")]) == EXIT_USAGE


def test_start_values_with_wrong_coefficient_count(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "k1": 2, "k2": 1, "chains": 1, "seed": 5,
        "init_theta": {"phi": 5.0, "a": 0.0, "b": 0.0, "alpha": [0.1, 0.2], "beta": [0.1],
                       "sigma1": 1.0, "sigma2": 1.0},
    }))
    data = _simulate(tmp_path)
    assert main(["fit", "--data", data, "--config", str(path), "--out", str(tmp_path / "o.json")]) == EXIT_USAGE


def test_k2_moments_without_convergence_phase(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"k1": 3, "k2": 0, "moments_phase": "k2"}))
    data = _simulate(tmp_path)
    assert main(["fit", "--data", data, "--config", str(bad), "--out", str(tmp_path / "o.json")]) == EXIT_USAGE
