import json

import pytest

from fumnet import cli

SMALL = ["--c", "8", "--d", "4", "--h-sq", "8", "--h1", "8", "--h2", "8", "--filter-sizes", "2", "2",
         "--n-way", "2", "--query-size", "4", "--samples-per-class", "6", "--num-classes", "12"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- help and parsing -------------------------------------------------------------
def test_train_help_lists_defaults(capsys):
    code, out, _ = run(capsys, "train", "--help")
    assert code == 0
    out = " ".join(out.split())
    for text in ("(default: 60000)", "(default: 0.001)", "(default: 16 32)", "(default: proposed)",
                 "(default: <dataset>/train.txt)"):
        assert text in out


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["train", "--c", "0"],
    ["train", "--k", "1"],
    ["train", "--variant", "transformer"],
    ["train", "--filter-sizes", "4"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_config_file_layering(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"episodes": 10, "c": 16, "preset": "desk"}))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg_file), "--c", "24"])
    cfg = cli.resolve(args)
    assert cfg["episodes"] == 10  # file over defaults
    assert cfg["c"] == 24  # flag over file
    assert cfg["d"] == 16 and cfg["filter_sizes"] == [8, 16]  # preset under file
    assert cfg["learning_rate"] == 0.001


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"epochs": 3}))
    code, _, err = run(capsys, "train", "--config", cfg_file)
    assert code == 2 and "epochs" in err


# -- gen-synthetic -----------------------------------------------------------------
def test_gen_synthetic_writes_tree(tmp_path, capsys):
    out = tmp_path / "data"
    assert run(capsys, "gen-synthetic", out, "--num-classes", 20, "--samples-per-class", 25)[0] == 0
    dirs = [p for p in out.iterdir() if p.is_dir()]
    assert len(dirs) == 20 and all(len(list(d.iterdir())) == 25 for d in dirs)
    assert sorted(p.name for p in out.glob("*.txt")) == ["test.txt", "train.txt", "val.txt"]


def test_gen_synthetic_is_byte_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "gen-synthetic", tmp_path / name, "--num-classes", 5, "--samples-per-class", 3,
            "--seed", 9)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_too_small_generated_dataset_fails_at_training(tmp_path, capsys):
    out = tmp_path / "small"
    assert run(capsys, "gen-synthetic", out, "--num-classes", 3, "--samples-per-class", 2)[0] == 0
    code, _, err = run(capsys, "train", "--dataset", out, "--episodes", 1, "--out-dir", tmp_path / "r")
    assert code == 3 and "data error" in err


def test_missing_split_file_exits_3(tmp_path, capsys):
    out = tmp_path / "data"
    run(capsys, "gen-synthetic", out, "--num-classes", 6, "--samples-per-class", 3)
    (out / "val.txt").unlink()
    code, _, err = run(capsys, "train", "--dataset", out, "--n-way", 2, "--out-dir", tmp_path / "r")
    assert code == 3 and str(out / "val.txt") in err


def test_missing_dataset_exits_3(tmp_path, capsys):
    assert run(capsys, "train", "--dataset", tmp_path / "nowhere")[0] == 3


# -- gradcheck -----------------------------------------------------------------------
def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    rows = [l for l in out.splitlines() if " PASS " in l or " FAIL " in l]
    assert len(rows) >= 10 and all(" PASS " in r for r in rows)


def test_gradcheck_catches_lookahead_padding(capsys):
    code, out, err = run(capsys, "gradcheck", "--inject-fault", "padding")
    assert code == 1 and "causality" in err


# -- train and eval ----------------------------------------------------------------
def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "train", *SMALL, "--episodes", 20, "--eval-interval", 10,
                        "--eval-episodes", 4, "--out-dir", out)
    assert code == 0
    assert sum(l.startswith("episode") for l in text.splitlines()) == 2
    assert "best validation accuracy" in text
    assert (out / "best.ckpt").exists() and (out / "config.json").exists()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 2

    code, text, _ = run(capsys, "eval", out / "best.ckpt", "--episodes", 8)
    assert code == 0 and text.startswith("accuracy: ") and "±" in text
    report = json.loads((out / "eval_report.json").read_text())
    assert report["episode_count"] == 8 and report["n_way"] == 2 and report["split"] == "test"
    assert (out / "eval_report.txt").read_text().startswith(text.strip())


def test_eval_missing_checkpoint_is_usage_error(tmp_path, capsys):
    assert run(capsys, "eval", tmp_path / "none.ckpt")[0] == 2


def test_eval_corrupt_checkpoint_fails(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "eval", bad)
    assert code == 1 and "magic" in err
