import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from mrdose.cli import main
from mrdose.data import load_csv
from mrdose.family import DEFAULT_FAMILY, ModelFamily
from mrdose.sim import TABLE1_ESTIMATORS


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.csv"
    assert main(["simulate", "--n", "3000", "--seed", "7", "-o", str(path)]) == 0
    return path


def run_json(args, capsys):
    code = main(args)
    out = capsys.readouterr().out
    return code, json.loads(out)


class TestSimulate:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "d.csv"
        assert main(["simulate", "--n", "100", "--seed", "7", "-o", str(path)]) == 0
        ds = load_csv(path)
        assert ds.n == 100 and ds.q_levels == 4

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["simulate", "--n", "100", "--seed", "7", "-o", str(a)])
        main(["simulate", "--n", "100", "--seed", "7", "-o", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_zero_n(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--n", "0", "-o", str(tmp_path / "x.csv")])
        assert exc.value.code == 2
        assert "--n" in capsys.readouterr().err

    def test_unwritable(self, tmp_path, capsys):
        assert main(["simulate", "--n", "10", "-o", str(tmp_path / "missing" / "x.csv")]) == 1
        assert "error" in capsys.readouterr().err


class TestEstimate:
    def test_json_report(self, data_file, capsys):
        code, rep = run_json(["estimate", str(data_file), "--estimators", "MR_1111,DR_1010"], capsys)
        assert code == 0
        assert rep["dataset"]["n"] == 3000
        assert sum(rep["dataset"]["group_sizes"]) == 3000
        assert set(rep["estimators"]) == {"MR_1111", "DR_1010"}
        for cells in rep["estimators"].values():
            assert [c["level"] for c in cells] == [0, 1, 2, 3]
            assert cells[0]["ate_vs_0"] == 0.0
            for c in cells:
                if c["status"] == "ok":
                    assert abs(c["ate_vs_0"] - (c["apo"] - cells[0]["apo"])) < 1e-12
        mr = rep["estimators"]["MR_1111"][0]
        assert mr["diagnostics"]["status"] == "converged"
        assert abs(mr["apo"] - 7.25) < 0.5

    def test_default_estimators(self, data_file, capsys):
        code, rep = run_json(["estimate", str(data_file)], capsys)
        assert code == 0
        assert list(rep["estimators"]) == list(TABLE1_ESTIMATORS)
        assert set(rep["models"]["ps"]) == {"pi1", "pi2"}

    def test_repeatable_flag(self, data_file, capsys):
        code, rep = run_json(["estimate", str(data_file), "--estimators", "MR_1111", "--estimators", "REG_0010"], capsys)
        assert list(rep["estimators"]) == ["MR_1111", "REG_0010"]

    def test_unknown_estimator(self, data_file, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["estimate", str(data_file), "--estimators", "MR_2"])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        assert "MR_2" in err and "MR_1111" in err

    def test_csv_and_table(self, data_file, capsys):
        assert main(["estimate", str(data_file), "--estimators", "DR_1010", "--format", "csv"]) == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0] == ["estimator", "level", "apo", "ate_vs_0", "status"]
        assert len(rows) == 5
        assert main(["estimate", str(data_file), "--estimators", "DR_1010", "--format", "table"]) == 0
        assert "DR_1010" in capsys.readouterr().out

    def test_custom_models_file(self, data_file, tmp_path, capsys):
        fam = {"ps": [{"link": "logit", "terms": [{"kind": "intercept"}, {"kind": "covpow", "j": 1, "k": 1},
                                                  {"kind": "covpow", "j": 1, "k": 2}]}],
               "or": [{"terms": [{"kind": "intercept"}, {"kind": "trtpow", "k": 1}]}]}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(fam))
        code, rep = run_json(["estimate", str(data_file), "--models", str(path), "--estimators", "MR_11"], capsys)
        assert code == 0 and "MR_11" in rep["estimators"]

    def test_bad_models_file(self, data_file, tmp_path, capsys):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"ps": [{"link": "probit", "terms": [{"kind": "intercept"}]}]}))
        with pytest.raises(SystemExit):
            main(["estimate", str(data_file), "--models", str(path)])

    def test_missing_level_reported(self, tmp_path, capsys):
        path = tmp_path / "gap.csv"
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, 200)
        d = np.where(rng.uniform(size=200) < 0.5, 0, 2)
        y = x + d + rng.normal(size=200)
        path.write_text("y,d,x1\n" + "".join(f"{float(a)!r},{int(b)},{float(c)!r}\n" for a, b, c in zip(y, d, x)))
        # d takes only 0 and 2 here, so d^2 = 2d and the quadratic outcome model is rank deficient
        code, rep = run_json(["estimate", str(path), "--estimators", "DR_1010,DR_1001"], capsys)
        assert code == 0
        assert "rank" in rep["models"]["or"]["a1"]["error"]
        assert all(c["status"] == "failed" for c in rep["estimators"]["DR_1010"])
        cells = rep["estimators"]["DR_1001"]
        assert cells[1]["status"] == "failed" and "level 1" in cells[1]["error"]
        assert cells[0]["status"] == "ok" and cells[2]["status"] == "ok"
        assert main(["estimate", str(path), "--estimators", "DR_1001", "--strict"]) == 1

    def test_bad_data(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("y,d,x1\n1,-2,0\n")
        assert main(["estimate", str(path)]) == 1
        assert "row 2" in capsys.readouterr().err

    def test_models_reingest(self):
        assert ModelFamily.from_json(json.loads(json.dumps(DEFAULT_FAMILY.to_json()))) == DEFAULT_FAMILY


class TestReproduce:
    def test_single_replication(self, capsys):
        code, rep = run_json(["reproduce-table1", "--replications", "1", "--n", "2000"], capsys)
        assert code == 0
        assert "skipped" in rep["comparison"]
        for cell in rep["estimators"].values():
            assert all(cell["variance_flag"])
            assert cell["emp_var"] == [0.0] * 4

    def test_small_run(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        code = main(["reproduce-table1", "--replications", "3", "--n", "2000", "--estimators", "DR_1010,MR_1111",
                     "-o", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["config"]["replications"] == 3
        assert rep["comparison"]["verdict"] in {"PASS", "FAIL"}
        np.testing.assert_allclose(rep["truth"], [7.25, 8.9, 9.85, 10.1], atol=1e-12)
        for name in ("DR_1010", "MR_1111"):
            cell = rep["estimators"][name]
            assert len(cell["av_est"]) == 4 and all(v >= 0 for v in cell["emp_var"])

    def test_csv(self, capsys):
        assert main(["reproduce-table1", "--replications", "2", "--n", "1500", "--format", "csv"]) == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[1][:2] == ["Truth", ""] and len(rows) == 29

    def test_module_entry_point(self, tmp_path):
        out = tmp_path / "d.csv"
        res = subprocess.run([sys.executable, "-m", "mrdose.cli", "simulate", "--n", "5", "-o", str(out)],
                             capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        assert load_csv(out).n == 5
