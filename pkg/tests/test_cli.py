import json
import os

import pytest

from esci_rank.cli import COMMANDS, build_parser, main
from esci_rank.config import FIELDS
from esci_rank.dataset import load_dataset
from esci_rank.ranker_eval import oracle_predictions, save_predictions

SMALL = ["--vocab-size", "2048", "--embed-dim", "8", "--hidden-dims", "8", "8", "--max-len", "32",
         "--epochs", "1", "--batch-size", "32"]


def run(*argv):
    return main([str(a) for a in argv])


def error_of(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in [k for k in os.environ if k.startswith("ESCI_RANK_")]:
        monkeypatch.delenv(key)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert main(["synth", "--n", "400", "--seed", "7", "--output", str(d / "train.tsv")]) == 0
    assert main(["synth", "--n", "150", "--seed", "8", "--output", str(d / "val.tsv")]) == 0
    assert main(["train", *SMALL, "--seed", "1", "--train-data", str(d / "train.tsv"),
                 "--val-data", str(d / "val.tsv"), "--output-dir", str(d / "run")]) == 0
    assert main(["predict", "--checkpoints", str(d / "run" / "model.ckpt"), "--data", str(d / "val.tsv"),
                 "--output", str(d / "pred.tsv")]) == 0
    assert main(["evaluate", "--predictions", str(d / "pred.tsv"), "--truth", str(d / "val.tsv"),
                 "--output", str(d / "report.tsv")]) == 0
    return d


class TestHelp:
    @pytest.mark.parametrize("command", sorted(COMMANDS))
    def test_every_flag_listed_with_default(self, command, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main([command, "--help"])
        assert exit_info.value.code == 0
        out = " ".join(capsys.readouterr().out.split())
        for key in COMMANDS[command][1]:
            flag = "--" + key.replace("_", "-")
            assert flag in out
        assert out.count("(default:") >= len(COMMANDS[command][1]) + 2

    def test_flag_keys_are_config_keys(self):
        assert all(k in FIELDS for _, keys, _ in COMMANDS.values() for k in keys)
        assert build_parser().prog == "esci-rank"


class TestPipeline:
    def test_outputs(self, pipeline):
        run_dir = pipeline / "run"
        assert {p.name for p in run_dir.iterdir()} == {"model.ckpt", "metrics.tsv", "training.png"}
        assert "val_ndcg" in (run_dir / "metrics.tsv").read_text().splitlines()[0]
        last = (pipeline / "report.tsv").read_text().splitlines()[-1].split("\t")
        assert last[0] == "mean_ndcg" and 0.0 <= float(last[1]) <= 1.0
        assert (pipeline / "report_ndcg.png").stat().st_size > 0

    def test_oracle_evaluate(self, pipeline, tmp_path):
        save_predictions(oracle_predictions(load_dataset(pipeline / "val.tsv")), tmp_path / "oracle.tsv")
        assert run("evaluate", "--predictions", tmp_path / "oracle.tsv", "--truth", pipeline / "val.tsv",
                   "--output", tmp_path / "r.tsv", "--no-plots") == 0
        assert (tmp_path / "r.tsv").read_text().splitlines()[-1].split("\t")[1] == "1.0"

    def test_rank_to_stdout(self, pipeline, capsys):
        capsys.readouterr()
        assert run("rank", "--predictions", pipeline / "pred.tsv", "--output", "-") == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "query_id\tproduct_id" and len(lines) == 151

    def test_ensemble_fit_then_apply(self, pipeline, tmp_path):
        (tmp_path / "copy.tsv").write_bytes((pipeline / "pred.tsv").read_bytes())
        preds = [pipeline / "pred.tsv", tmp_path / "copy.tsv"]
        assert run("ensemble", "--predictions", *preds, "--truth", pipeline / "val.tsv",
                   "--output", tmp_path / "w.tsv", "--blend-output", tmp_path / "b1.tsv") == 0
        assert run("ensemble", "--predictions", *preds, "--weights", tmp_path / "w.tsv",
                   "--blend-output", tmp_path / "b2.tsv") == 0
        assert (tmp_path / "b1.tsv").read_bytes() == (tmp_path / "b2.tsv").read_bytes()

    def test_pseudo_label(self, pipeline, tmp_path):
        assert run("pseudo-label", "--checkpoints", pipeline / "run" / "model.ckpt", "--unlabeled",
                   pipeline / "val.tsv", "--pseudo-threshold", "0.5", "--output", tmp_path / "pl.tsv") == 0
        kept = load_dataset(tmp_path / "pl.tsv")
        assert all(r.soft_label is not None and max(r.soft_label) > 0.5 for r in kept)


class TestDeterminism:
    def test_synth(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--n", "200", "--seed", "3", "--output", tmp_path / f"{name}.tsv") == 0
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_train_with_config_file(self, pipeline, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(f'seed = 5\nadversary = "fgm"\ntrain_data = ["{pipeline / "train.tsv"}"]\n')
        for name in ("a", "b"):
            assert run("train", *SMALL, "--config", cfg, "--output-dir", tmp_path / name) == 0
        for f in ("model.ckpt", "metrics.tsv", "training.png"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_env_config_file(self, pipeline, tmp_path, monkeypatch):
        cfg = tmp_path / "run.toml"
        cfg.write_text("n = 25\nseed = 2\n")
        monkeypatch.setenv("ESCI_RANK_CONFIG", str(cfg))
        monkeypatch.setenv("ESCI_RANK_N", "30")
        assert run("synth", "--output", tmp_path / "s.tsv") == 0
        assert len(load_dataset(tmp_path / "s.tsv")) == 30


class TestErrors:
    def test_missing_seed(self, tmp_path, capsys):
        assert run("synth", "--n", "10", "--output", tmp_path / "x.tsv") == 2
        err = error_of(capsys)
        assert err["error"] == "ConfigError" and "seed" in err["message"]
        assert not (tmp_path / "x.tsv").exists()

    def test_missing_input_file(self, tmp_path, capsys):
        assert run("evaluate", "--predictions", tmp_path / "none.tsv", "--truth", tmp_path / "t.tsv",
                   "--output", tmp_path / "r.tsv") == 1
        err = error_of(capsys)
        assert err["error"] == "FileNotFoundError" and err["path"].endswith("none.tsv")

    def test_unknown_flag(self, capsys):
        assert run("synth", "--sead", "1") == 2
        assert error_of(capsys)["error"] == "UsageError"

    def test_bad_value_is_named(self, capsys):
        assert run("synth", "--seed", "x", "--output", "o") == 2
        assert "seed" in error_of(capsys)["message"]

    def test_key_mismatch(self, pipeline, tmp_path, capsys):
        val = load_dataset(pipeline / "val.tsv")
        save_predictions(oracle_predictions(val[:-1]), tmp_path / "short.tsv")
        assert run("evaluate", "--predictions", tmp_path / "short.tsv", "--truth", pipeline / "val.tsv",
                   "--output", tmp_path / "r.tsv") == 1
        err = error_of(capsys)
        assert err["error"] == "KeyMismatchError" and val[-1].product_id in err["message"]

    def test_duplicate_ensemble_member(self, pipeline, capsys):
        assert run("ensemble", "--predictions", pipeline / "pred.tsv", pipeline / "pred.tsv",
                   "--truth", pipeline / "val.tsv", "--output", "w.tsv") == 2
        assert "more than once" in error_of(capsys)["message"]

    def test_error_is_one_line(self, capsys):
        run("train", "--seed", "1")
        assert len(capsys.readouterr().err.strip().splitlines()) == 1
