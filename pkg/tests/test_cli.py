"""Command-line front end: outputs, reports, overrides and exit codes."""

import csv
import json

import numpy as np
import pytest

from oocloss.cli import main, resolve_config
from oocloss.data_core import PartitionModelConfig, generate_partition_model, load_csv
from oocloss.errors import InvalidConfig
from oocloss.estimators import estimate_loco
from oocloss.learners import LearnerSpec


def _run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def _report(out):
    return json.loads((out / "report.json").read_text())


def _stable(out):
    doc = _report(out)
    doc.pop("wall_clock_seconds")
    return doc


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSimulate:
    def test_round_trip(self, tmp_path):
        code, out = _run(tmp_path, "a", "simulate", "--set", "oracle_reps=10")
        assert code == 0
        ds = load_csv(out / "dataset.csv", "label", "cluster", "approx_cluster")
        ref = generate_partition_model(PartitionModelConfig(cluster_shift=(0.0, 0.0), seed=0))
        np.testing.assert_array_equal(ds.features, ref.features)
        np.testing.assert_array_equal(ds.labels, ref.labels)
        np.testing.assert_array_equal(ds.oracle_clusters, ref.oracle_clusters)
        rep = _report(out)
        assert rep["schema"] == "ooc-report/1" and rep["command"] == "simulate"
        assert rep["result"]["has_approx_clusters"]

    def test_byte_identical(self, tmp_path):
        _, a = _run(tmp_path, "a", "--seed", "5", "simulate", "--set", "oracle_reps=10")
        _, b = _run(tmp_path, "b", "simulate", "--seed", "5", "--set", "oracle_reps=10")
        assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
        assert _stable(a) == _stable(b)

    def test_noise_floor(self, tmp_path):
        # least squares with intercept on Gaussian features has expected test
        # error sigma^2 (1 + 1/n) (n - 2) / (n - d - 2)
        code, out = _run(tmp_path, "a", "simulate", "--set", "partition.memorizable_feature=false",
                         "--set", "reg_strength=0", "--set", "oracle_reps=2000", "--set", "p0=0")
        assert code == 0
        r = _report(out)["result"]
        n, d, sigma2 = 200, 2, 0.25
        expected = sigma2 * (1 + 1 / n) * (n - 2) / (n - d - 2)
        assert abs(r["oracle_e0"] - expected) <= 3 * r["oracle_e0_stderr"]


class TestEstimate:
    def test_iid(self, tmp_path):
        code, out = _run(tmp_path, "a", "estimate", "--set", "method=iid")
        assert code == 0 and np.isfinite(_report(out)["result"]["e0_hat"])

    def test_basis_coefficients(self, tmp_path):
        code, out = _run(tmp_path, "a", "estimate", "--set", "method=b3-basis",
                         "--set", "t=200", "--set", "basis_degree=2")
        assert code == 0
        r = _report(out)["result"]
        assert len(r["coefficients"]) == 3
        rows = _rows(out / "curve.csv")
        assert rows[0] == ["level", "p", "p_prime", "b_bar"] and len(rows) == 11

    @pytest.mark.parametrize("method", ["loco", "b3-exact", "b3-t4mono", "b3-sketch"])
    def test_methods_run(self, tmp_path, method):
        code, out = _run(tmp_path, "a", "estimate", "--set", f"method={method}",
                         "--set", "t=200")
        assert code == 0 and np.isfinite(_report(out)["result"]["e0_hat"])

    def test_from_csv(self, tmp_path):
        _run(tmp_path, "sim", "simulate", "--set", "oracle_reps=10")
        data = tmp_path / "sim" / "dataset.csv"
        code, out = _run(tmp_path, "a", "estimate", "--set", f'data="{data}"',
                         "--set", "approx_column=approx_cluster", "--set", "t=200")
        assert code == 0
        assert _report(out)["config"]["data"] == str(data)

    def test_threads_do_not_change_report(self, tmp_path):
        args = ["estimate", "--set", "t=600", "--set", "block_size=100"]
        _, a = _run(tmp_path, "a", *args, "--threads", "1")
        _, b = _run(tmp_path, "b", *args, "--threads", "8")
        assert _stable(a) == _stable(b)
        assert (a / "curve.csv").read_bytes() == (b / "curve.csv").read_bytes()


class TestSweep:
    def test_single_point(self, tmp_path):
        code, out = _run(tmp_path, "a", "sweep", "--set", "p0_values=[0.0]", "--set", "trials=3")
        assert code == 0
        rows = _rows(out / "curve.csv")
        assert rows[0] == ["p0", "mean", "stderr"] and len(rows) == 2
        ds = generate_partition_model(PartitionModelConfig(cluster_shift=(0.0, 0.0)))
        ref = estimate_loco(ds, LearnerSpec("ridge", 0.1), held_out_cluster=2)
        assert float(rows[1][1]) == pytest.approx(ref, rel=1e-12)

    def test_flat_signal(self, tmp_path):
        code, out = _run(tmp_path, "a", "sweep", "--set", "partition.memorizable_feature=false",
                         "--set", "p0_values=[0.0, 0.1, 0.2, 0.3]", "--set", "trials=50")
        assert code == 0
        r = _report(out)["result"]
        mean, se = np.array(r["mean"]), np.array(r["stderr"])
        assert np.all(np.abs(mean - mean[0]) <= 2 * np.maximum(se, se[0]))


class TestLeakageCommand:
    def test_alpha_echo(self, tmp_path, capsys):
        code, out = _run(tmp_path, "a", "test", "--set", "alpha=0.01")
        assert code == 0
        r = _report(out)["result"]
        assert r["alpha"] == 0.01
        printed = capsys.readouterr().out
        assert "p-value" in printed and ("reject" in printed)

    def test_insufficient_data(self, tmp_path, capsys):
        code, _ = _run(tmp_path, "a", "test", "--set", "n_prime=50")
        assert code == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "InsufficientData" and "max_n_T" in err


class TestBench:
    def test_small_sizes(self, tmp_path):
        code, out = _run(tmp_path, "a", "bench", "--set", "sizes=[20, 40]",
                         "--set", "min_time=0", "--set", "repeats=1")
        assert code == 0
        rows = _rows(out / "bench.csv")
        assert rows[0] == ["method", "n_prime", "seconds", "failed"]
        assert len(rows) == 1 + 4 * 2
        assert all(r[3] in ("true", "false") for r in rows[1:])

    def test_dense_limit_reported_as_failed(self, tmp_path):
        code, out = _run(tmp_path, "a", "bench", "--set", "sizes=[30]", "--set", "max_dense=10",
                         "--set", 'methods=["exact"]', "--set", "min_time=0")
        assert code == 0
        assert _rows(out / "bench.csv")[1][3] == "true"


class TestConfigAndErrors:
    def test_unknown_key(self, tmp_path, capsys):
        code, _ = _run(tmp_path, "a", "estimate", "--set", "bogus=1")
        assert code == 2
        assert json.loads(capsys.readouterr().err)["category"] == "config"

    def test_unknown_nested_key(self):
        with pytest.raises(InvalidConfig):
            resolve_config("simulate", overrides=["partition.nope=3"])

    def test_config_file_then_flag(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"t": 10, "seed": 3}))
        cfg = resolve_config("estimate", path, ["t=20"], seed=None)
        assert cfg["t"] == 20 and cfg["seed"] == 3
        assert resolve_config("estimate", path, [], seed=4)["seed"] == 4

    def test_bad_method(self, tmp_path):
        assert _run(tmp_path, "a", "estimate", "--set", "method=magic")[0] == 2

    def test_missing_data_file(self, tmp_path, capsys):
        code, _ = _run(tmp_path, "a", "estimate", "--set", f'data="{tmp_path / "none.csv"}"')
        assert code == 3
        assert json.loads(capsys.readouterr().err)["category"] == "data"

    def test_numerical_failure(self, tmp_path):
        # constant features make the unpenalized normal equations singular
        data = tmp_path / "d.csv"
        data.write_text("x,label,cluster\n" + "".join(f"0,{i},{1 + i % 2}\n" for i in range(8)))
        code, _ = _run(tmp_path, "a", "estimate", "--set", f'data="{data}"',
                       "--set", "method=loco", "--set", "reg_strength=0")
        assert code == 4

    def test_negative_seed(self, tmp_path):
        assert _run(tmp_path, "a", "--seed", "-1", "simulate")[0] == 2
