import json

import pytest

from dpltm import experiments as ex
from dpltm.cli import build_parser, config_from_args, main

SMALL = ["--dataset-kind", "synthetic", "--synthetic", "400,12,3", "--hidden", "10,6", "--tickets", "3",
         "--ticket-iters", "10", "--epochs", "2", "--lot", "40"]


def test_scale_presets():
    desk = config_from_args(build_parser().parse_args(["run"]))
    assert desk.data.max_train_rows == 10_000 and desk.lr == ex.DESK_LR
    full = config_from_args(build_parser().parse_args(["run", "--scale", "full"]))
    assert full.ticket_iters == 5000 and full.lr == 0.1 and full.data.max_train_rows is None
    assert full.epochs == 50 and full.lot == 400 and full.nu == 50 and full.split_fraction == 0.9


def test_tickets_select_train_pipeline(tmp_path, capsys):
    store = str(tmp_path / "t.ticket.json")
    assert main(["tickets", *SMALL, "--store", store]) == 0
    info = json.loads(capsys.readouterr().out)
    assert [t["index"] for t in info["tickets"]] == [1, 2, 3]
    assert main(["select", *SMALL, "--store", store, "--seed-privacy", "2"]) == 0
    sel = json.loads(capsys.readouterr().out)
    assert abs(sum(sel["probabilities"]) - 1) < 1e-12 and sel["epsilon1"] == pytest.approx(0.1)
    out_t = tmp_path / "train.csv"
    assert main(["train", *SMALL, "--store", store, "--winner", str(sel["winner"]), "--seed-privacy", "2",
                 "--out", str(out_t)]) == 0
    out_r = tmp_path / "run.csv"
    assert main(["run", *SMALL, "--store", store, "--seed-privacy", "2", "--out", str(out_r)]) == 0
    assert out_t.read_text() == out_r.read_text()


@pytest.mark.parametrize("cmd", [["baseline"], ["run", "--mode", "nonprivate"], ["run", "--mode", "dpsgd"],
                                 ["random-ticket"], ["convergence", "--checkpoints", "0.3,0.5"]])
def test_subcommands_write_csv(tmp_path, capsys, cmd):
    out = tmp_path / "m.csv"
    assert main([*cmd, *SMALL, "--out", str(out), "--repeats", "2"]) == 0
    rows = ex.read_csv(out)
    assert list(rows[0]) == list(ex.COLUMNS)
    assert {r["seed_model"] for r in rows} == {"0", "1"}
    assert "test_accuracy" in capsys.readouterr().out


def test_transfer_subcommand(tmp_path, capsys):
    store = str(tmp_path / "src.ticket.json")
    assert main(["tickets", "--dataset-kind", "synthetic", "--synthetic", "300,16,4", "--hidden", "8,8,6",
                 "--tickets", "2", "--ticket-iters", "5", "--store", store]) == 0
    out = tmp_path / "t.csv"
    assert main(["transfer", *SMALL, "--store", store, "--out", str(out)]) == 0
    rows = ex.read_csv(out)
    assert rows[-1]["mode"] == "transfer" and float(rows[-1]["epsilon1"]) == 0.0


def test_error_line_and_exit_code(tmp_path, capsys):
    code = main(["select", "--store", str(tmp_path / "missing.json")])
    err = capsys.readouterr().err.strip()
    assert code == 1 and err.startswith("error: ")
    doc = json.loads(err[len("error: "):])
    assert doc["type"] == "FileNotFoundError" and doc["message"]


def test_bad_store_version(tmp_path, capsys):
    p = tmp_path / "v2.ticket.json"
    p.write_text(json.dumps({"format_version": 2}))
    assert main(["select", "--store", str(p)]) == 1
    assert json.loads(capsys.readouterr().err[len("error: "):])["type"] == "StoreFormatError"
