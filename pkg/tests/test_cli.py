import json

import numpy as np
import pandas as pd
import pytest

from owrf.cli import main, model_from_dict
from owrf.core import Dataset
from owrf.trees import hat_matrix
from owrf.weighting import CriterionContext, criterion_c_prime

from conftest import toy_data


@pytest.fixture
def csv(tmp_path):
    data = toy_data(n=40, p=3, seed=5)
    df = pd.DataFrame(data.X, columns=["a", "b", "c"])
    df["target"] = data.y
    path = tmp_path / "toy.csv"
    df.to_csv(path, index=False)
    return path, data


def fit(tmp_path, csv_path, method, *extra):
    out = tmp_path / f"{method}.json"
    code = main(["fit", "--data", str(csv_path), "--target", "target", "--method", method,
                 "--trees", "6", "--seed", "3", "--threads", "1", "--out", str(out), *extra])
    assert code == 0
    return json.loads(out.read_text())


@pytest.mark.parametrize("method", ["rf", "2steps", "1step", "wrf", "crf"])
def test_fit_writes_simplex_weights(tmp_path, csv, method):
    model = fit(tmp_path, csv[0], method)
    w = np.array(model["weights"])
    assert model["schema_version"] == 1 and model["method"] == method
    assert w.min() >= 0 and abs(w.sum() - 1) <= 1e-8
    if method == "rf":
        assert w.tolist() == [1 / 6] * 6


def test_one_step_beats_two_steps_under_cubic_criterion(tmp_path, csv):
    one = fit(tmp_path, csv[0], "1step")
    two = fit(tmp_path, csv[0], "2steps")
    assert one["trees"] == two["trees"]
    forest = model_from_dict(one)
    data = Dataset(csv[1].X, csv[1].y)
    ctx = CriterionContext.from_hats([hat_matrix(t, data) for t in forest.trees], data.y)
    assert criterion_c_prime(ctx, one["weights"]) <= criterion_c_prime(ctx, two["weights"]) + 1e-10
    assert one["criteria"]["c_prime"] == pytest.approx(criterion_c_prime(ctx, one["weights"]))


def test_fit_sut(tmp_path, csv):
    model = fit(tmp_path, csv[0], "2steps", "--tree-kind", "sut")
    assert model["config"]["kind"] == "sut"
    assert abs(sum(model["config"]["prob_seq"]) - 1) < 1e-12


def test_fit_is_seed_deterministic(tmp_path, csv):
    a = fit(tmp_path, csv[0], "crf")
    b = fit(tmp_path, csv[0], "crf")
    a["solve_report"] = b["solve_report"] = None
    assert a == b


def test_predict(tmp_path, csv):
    model = fit(tmp_path, csv[0], "rf")
    out = tmp_path / "pred.json"
    assert main(["predict", "--model", str(tmp_path / "rf.json"), "--data", str(csv[0]),
                 "--out", str(out)]) == 0
    pred = json.loads(out.read_text())
    forest = model_from_dict(model)
    per_tree = np.column_stack([t.predict(csv[1].X) for t in forest.trees])
    np.testing.assert_allclose(pred["predictions"], per_tree.mean(axis=1), rtol=0, atol=1e-12)
    assert pred["msfe"] >= 0


def test_predict_missing_column(tmp_path, csv, capsys):
    fit(tmp_path, csv[0], "rf")
    bad = tmp_path / "bad.csv"
    pd.read_csv(csv[0]).drop(columns=["b"]).to_csv(bad, index=False)
    assert main(["predict", "--model", str(tmp_path / "rf.json"), "--data", str(bad)]) == 2
    assert "missing feature columns" in capsys.readouterr().err


def test_io_errors_give_nonzero_exit(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--target", "y"]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_flags_rejected(csv):
    with pytest.raises(SystemExit):
        main(["fit", "--data", str(csv[0]), "--target", "target", "--trees", "0"])
    with pytest.raises(SystemExit):
        main(["fit", "--data", str(csv[0]), "--target", "target", "--method", "nope"])


def test_bench_json_and_markdown(tmp_path, csv):
    out = tmp_path / "bench.json"
    args = ["bench", "--data", str(csv[0]), "--target", "target", "--trees", "3", "--reps", "2",
            "--threads", "1"]
    assert main(args + ["--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    report = doc["reports"][0]
    assert report["dataset"] == "toy" and report["failures"] == 0
    assert report["config"]["reps"] == 2
    md = tmp_path / "bench.md"
    assert main(args + ["--format", "md", "--out", str(md)]) == 0
    assert "| toy |" in md.read_text()


def test_bench_manifest(tmp_path, csv):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps([{"name": "T", "path": str(csv[0]), "target": "target"}]))
    out = tmp_path / "r.json"
    assert main(["bench", "--manifest", str(manifest), "--trees", "2", "--reps", "1",
                 "--threads", "1", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["reports"][0]["dataset"] == "T"


def test_simulate(tmp_path):
    out = tmp_path / "sim.json"
    args = ["simulate", "--n-grid", "40,80", "--reps", "2", "--trees", "4", "--p", "3",
            "--threads", "1", "--seed", "1"]
    assert main(args + ["--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["n_values"] == [40, 80] and len(doc["loss_ratios"]["2steps"][0]) == 2
    again = tmp_path / "sim2.json"
    assert main(args + ["--out", str(again)]) == 0
    assert out.read_text() == again.read_text()
