import hashlib
import json

import pytest

from treecalc.cli import SCHEMA, UsageError, build_config, main

GEN = ["n=240", "max_depth=5", "train_max_depth=3", "test_min_depth=4", "test_max_depth=5"]
TRAIN = ["cell=tree_rnn", "hidden=4", "lr=0.01", "max_epochs=2", "batch=20"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", *GEN, "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", f"data={data_dir}", *TRAIN, "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_data_files(data_dir, capsys):
    for name in ("train.tsv", "valid.tsv", "test.tsv", "stats.txt"):
        assert (data_dir / name).is_file()
    for line in (data_dir / "test.tsv").read_text().splitlines():
        assert int(line.split("\t")[1]) >= 4
    stats = (data_dir / "stats.txt").read_text().splitlines()
    assert stats[1].startswith("# Eqs") and stats[2].startswith("CC")


def test_gen_data_is_reproducible(data_dir, tmp_path):
    assert main(["gen-data", *GEN, "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("train.tsv", "valid.tsv", "test.tsv", "stats.txt"):
        assert digest(tmp_path / name) == digest(data_dir / name)


def test_train_outputs_and_header(trained):
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["seed"] == 1 and header["config"]["cell"] == "tree_rnn"
    epochs = [json.loads(l) for l in lines[1:]]
    assert [e["epoch"] for e in epochs] == [1, 2]
    assert set(epochs[0]) == {"epoch", "train_loss", "valid_acc", "lr"}
    assert (trained / "checkpoint.txt").is_file()
    assert len((trained / "timing.jsonl").read_text().splitlines()) == 2


def test_train_is_reproducible(data_dir, trained, tmp_path):
    assert main(["train", f"data={data_dir}", *TRAIN, "--seed", "1", "--out", str(tmp_path)]) == 0
    for name in ("train_log.jsonl", "checkpoint.txt"):
        assert digest(tmp_path / name) == digest(trained / name)


def test_eval_metrics(data_dir, trained, tmp_path):
    args = ["eval", f"data={data_dir}", f"checkpoint={trained / 'checkpoint.txt'}"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a" / "metrics.jsonl") == digest(tmp_path / "b" / "metrics.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    test_depths = {r["depth"] for r in rows if r["split"] == "test"} - {"all"}
    present = {int(l.split("\t")[1]) for l in (data_dir / "test.tsv").read_text().splitlines()}
    assert test_depths == present
    assert (tmp_path / "a" / "metrics.csv").read_text().startswith("split,depth,acc,prec,rcl,n")


def test_eval_untrained_is_near_majority(data_dir, tmp_path):
    # one epoch at a vanishing rate leaves the random initial model in place
    run = tmp_path / "r"
    assert main(["train", f"data={data_dir}", "cell=tree_lstm", "hidden=6", "lr=1e-9",
                 "max_epochs=1", "--out", str(run)]) == 0
    assert main(["eval", f"data={data_dir}", f"checkpoint={run / 'checkpoint.txt'}",
                 "splits=test", "--out", str(run)]) == 0
    rows = {r["split"]: r for r in map(json.loads, (run / "metrics.jsonl").read_text().splitlines())
            if r["depth"] == "all"}
    assert abs(rows["test"]["acc"] - rows["test:majority"]["acc"]) <= 0.1


def test_eval_config_mismatch_names_key(data_dir, trained, capsys):
    code = main(["eval", f"data={data_dir}", f"checkpoint={trained / 'checkpoint.txt'}",
                 "hidden=9", "--out", str(trained)])
    assert code == 2
    assert "hidden" in capsys.readouterr().err


def test_complete(data_dir, trained, tmp_path):
    args = ["complete", f"data={data_dir}", f"checkpoint={trained / 'checkpoint.txt'}",
            "max_instances=6", "ks=1,5", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a" / "topk.jsonl") == digest(tmp_path / "b" / "topk.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "a" / "topk.jsonl").read_text().splitlines()]
    by = {(r["K"], r["depth"]): r for r in rows}
    for (k, d), r in by.items():
        if k == 1:
            assert r["topk"] <= by[(5, d)]["topk"]
    assert by[(1, "all")]["n"] <= 6


def test_sweep_leaderboard(data_dir, tmp_path):
    assert main(["sweep", f"data={data_dir}", *TRAIN, "max_epochs=1", "grid_hidden=3,5",
                 "grid_dropout=0.1,0.2", "--out", str(tmp_path)]) == 0
    rows = [json.loads(l) for l in (tmp_path / "leaderboard.jsonl").read_text().splitlines()]
    assert len(rows) == 4
    accs = [r["valid_acc"] for r in rows]
    assert accs == sorted(accs, reverse=True)
    assert set(rows[0]) >= {"hidden", "dropout", "seed", "valid_acc", "epochs_to_best"}


def test_missing_dataset_exit_code(tmp_path, capsys):
    assert main(["train", f"data={tmp_path / 'nope'}", "--out", str(tmp_path)]) == 2
    assert "dataset not found" in capsys.readouterr().err


def test_unknown_key_rejected(capsys):
    assert main(["train", "hiddne=5"]) == 2
    assert "hiddne" in capsys.readouterr().err


def test_bad_value_rejected():
    with pytest.raises(UsageError):
        build_config(None, ["hidden=big"], None)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ncell = mi_tree_lstm\nhidden = 12\nstack = true\n")
    cfg = build_config(str(path), ["hidden=30"], 9)
    assert cfg["cell"] == "mi_tree_lstm" and cfg["hidden"] == 30 and cfg["stack"] is True
    assert cfg["seed"] == 9
    assert cfg.explicit == {"cell", "hidden", "stack", "seed"}
    assert cfg["lr"] == SCHEMA["lr"][1]


def test_bad_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 2
