import csv
import json

import pytest

from ordnet.cli import main
from ordnet.datasets import MetricReport, load_dataset
from ordnet.wl import brute_force_isomorphic, load_fixture

GEN = ["gen", "--nodes", "4", "--flows", "3", "--count", "4", "--packets-per-flow", "300"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(GEN + ["--seed", "7", "--out", str(out), "--json"]) == 0
    return out


def run(capsys, argv):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


# --- wl -------------------------------------------------------------------------


def fixture_path():
    from importlib import resources

    return str(resources.files("ordnet.fixtures").joinpath("ordccwl_counterexample.json"))


def test_wl_fixture_verdicts(capsys):
    assert run(capsys, ["wl", fixture_path()])[:2] == (0, "indistinguishable\n")
    assert run(capsys, ["wl", fixture_path(), "--ordered"])[:2] == (1, "distinguishable\n")
    a, b, specs = load_fixture()
    assert not brute_force_isomorphic(a, b, specs)


def test_wl_two_files_and_self(capsys, tmp_path):
    a, b, _ = load_fixture()
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    pa.write_text(a.dumps())
    pb.write_text(b.dumps())
    code, out, _ = run(capsys, ["wl", str(pa), str(pb), "--ordered", "--json"])
    assert code == 1 and json.loads(out)["distinguishable"] is True
    assert run(capsys, ["wl", str(pa), str(pa), "--ordered"])[0] == 0
    assert run(capsys, ["wl", str(pa), str(pb), "--spec", "incidence_down:1"])[0] == 0


def test_wl_bad_inputs(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    code, _, err = run(capsys, ["wl", str(bad), str(bad)])
    assert code == 2 and err.startswith("UsageError")
    assert run(capsys, ["wl", fixture_path(), "--spec", "sideways:1"])[0] == 2
    assert run(capsys, ["wl", str(tmp_path / "missing.json")])[0] == 2


# --- gen / sim --------------------------------------------------------------------


def test_gen_requires_seed(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("ORDNET_SEED", raising=False)
    code, _, err = run(capsys, GEN + ["--out", str(tmp_path / "x")])
    assert code == 2 and "seed" in err
    monkeypatch.setenv("ORDNET_SEED", "7")
    assert run(capsys, GEN + ["--out", str(tmp_path / "y")])[0] == 0


def test_gen_rerun_identical_bytes(dataset, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ORDNET_SEED", "7")  # the env fallback matches --seed 7
    assert run(capsys, GEN + ["--out", str(tmp_path / "again")])[0] == 0
    files = sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file())
    assert len([f for f in files if f.parts[0] == "scenarios"]) == 4
    for rel in files:
        assert (dataset / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_gen_bad_config(capsys, tmp_path):
    code, _, err = run(capsys, GEN[:1] + ["--nodes", "2", "--seed", "1", "--out", str(tmp_path / "z")])
    assert code == 2 and err.startswith("BadConfig")


def test_sim_csv_and_determinism(dataset, capsys, tmp_path):
    argv = ["sim", str(dataset / "scenarios" / "s0000.json"), "--seed", "3", "--packets-per-flow", "300"]
    code, out1, _ = run(capsys, argv)
    _, out2, _ = run(capsys, argv)
    assert code == 0 and out1 == out2
    rows = list(csv.DictReader(out1.splitlines()))
    assert len(rows) == 3
    for r in rows:
        assert int(r["sent"]) >= int(r["dropped"]) >= 0


def test_complexify(dataset, capsys, tmp_path):
    code, out, _ = run(capsys, ["complexify", str(dataset / "scenarios" / "s0001.json"), "--json"])
    report = json.loads(out)
    assert code == 0 and report["violations"] == []
    assert report["counts"]["2"] == 3  # one cell per flow
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert run(capsys, ["complexify", str(bad)])[0] == 2


def test_two_router_complex_counts(capsys, tmp_path):
    sc = {
        "routers": ["A", "B"],
        "links": [{"id": "l", "from": "A", "to": "B", "capacity_bps": 1e5}],
        "queues": [{"id": "q", "link": "l", "size_bits": 1e4, "policy": "FIFO", "priority": 0}],
        "flows": [
            {"id": "f", "src": "A", "dst": "B", "path": [["q", "l"]], "traffic": {"model": "poisson", "params": {}},
             "avg_rate_bps": 1e4, "packet_size_bits": 1000.0, "tos": 0}
        ],
    }
    p = tmp_path / "two.json"
    p.write_text(json.dumps(sc))
    code, out, err = run(capsys, ["complexify", str(p), "--json"])
    assert code == 0, err
    # queue, two end-of-flow vertices and a pad vertex; one link; one flow
    assert json.loads(out)["counts"] == {"0": 4, "1": 1, "2": 1}


# --- train / eval -----------------------------------------------------------------


def train_args(dataset, out, *extra):
    return ["train", "--data", str(dataset), "--seed", "0", "--out", str(out), "--epochs", "4",
            "--dim", "6", "--iterations", "2", "--head-hidden", "4", "--json", *extra]


def test_train_writes_checkpoint_and_history(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, train_args(dataset, tmp_path / "ck.json"))
    assert code == 0
    hist = list(csv.DictReader((tmp_path / "history.csv").read_text().splitlines()))
    assert [int(r["epoch"]) for r in hist] == [0, 1, 2, 3]
    assert json.loads(out)["epochs"] == 4
    assert "params" in json.loads((tmp_path / "ck.json").read_text())


def test_train_deterministic(dataset, tmp_path, capsys):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        assert run(capsys, train_args(dataset, tmp_path / name / "ck.json"))[0] == 0
    for f in ("ck.json", "history.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_lr_zero_flat(dataset, tmp_path, capsys):
    assert run(capsys, train_args(dataset, tmp_path / "ck.json", "--lr", "0"))[0] == 0
    hist = list(csv.DictReader((tmp_path / "history.csv").read_text().splitlines()))
    # batches are visited in a shuffled order, so totals agree up to summation rounding
    losses = [float(r["train_loss"]) for r in hist]
    assert losses == pytest.approx([losses[0]] * len(losses), rel=1e-12)


def test_train_bad_checkpoint_path(dataset, tmp_path, capsys):
    code, _, err = run(capsys, train_args(dataset, tmp_path / "missing" / "ck.json"))
    assert code == 2 and err.startswith("UsageError")


def test_eval_perfect_predictions_and_qt_row(dataset, tmp_path, capsys):
    report = tmp_path / "report.json"
    code, out, _ = run(capsys, ["eval", "--data", str(dataset), "--split", "train",
                                "--predictions", str(dataset / "labels.csv"), "--report", str(report), "--json"])
    assert code == 0
    rows = json.loads(out)["rows"]
    assert set(rows) == {"predicted", "qt"}
    m = rows["predicted"]["targets"]["delay"]
    assert (m["mape"], m["mse"], m["mae"]) == (0.0, 0.0, 0.0)
    saved = json.loads(report.read_text())
    rep = MetricReport.from_json(saved["predicted"])
    assert json.loads(json.dumps(rep.to_json())) == saved["predicted"]


def test_eval_checkpoint_table(dataset, tmp_path, capsys):
    assert run(capsys, train_args(dataset, tmp_path / "ck.json"))[0] == 0
    code, out, _ = run(capsys, ["eval", "--data", str(dataset), "--split", "train", "--checkpoint", str(tmp_path / "ck.json")])
    assert code == 0
    names = [line.split()[0] for line in out.splitlines()[1:]]
    assert names == ["model", "qt"]


def test_eval_missing_prediction(dataset, tmp_path, capsys):
    p = tmp_path / "preds.csv"
    p.write_text("scenario,flow_id,mean_delay_s\ns0000,f0,0.1\n")
    code, _, err = run(capsys, ["eval", "--data", str(dataset), "--split", "train", "--predictions", str(p)])
    assert code == 2 and err.startswith("MissingPrediction")


# --- gradcheck ------------------------------------------------------------------


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, ["gradcheck", "--seed", "0", "--json"])
    rep = json.loads(out)
    assert code == 0 and rep["passed"]
    assert set(rep["components"]) == {"linear", "mlp", "gru", "model"}
    assert all(c["max_rel_err"] <= 1e-4 for c in rep["components"].values())


def test_gradcheck_corrupted_fails(capsys):
    code, out, _ = run(capsys, ["gradcheck", "--seed", "0", "--corrupt"])
    assert code == 3 and "FAIL" in out


def test_loaded_dataset_matches_flags(dataset):
    ds = load_dataset(dataset)
    assert ds.manifest["config"]["nodes"] == 4
    assert all(len(sc.flows) == 3 for sc in ds.scenarios.values())
