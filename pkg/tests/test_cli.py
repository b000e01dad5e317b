import dataclasses
import json
import subprocess
import sys

import pytest

from marlqa import cli
from marlqa.taskgen import CATEGORIES, GenConfig, write_kv
from marlqa import trainer as T

from test_trainer import tiny_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(marl_max_epochs=1)
    cfg.save(d / "run.cfg")
    write_kv(d / "gen.cfg", cfg.gen.to_kv())
    return d


def test_parser_lists_every_subcommand():
    ap = cli.build_parser()
    sub = next(a for a in ap._actions if a.dest == "command")
    assert set(sub.choices) >= {"gen", "annotate", "pretrain", "train-vanilla",
                                "train-marl", "eval", "ablate"}
    args = ap.parse_args(["train-marl", "--data", "d", "--out", "o", "--ckpt", "c",
                          "--retriever", "jaccard"])
    assert args.retriever == "jaccard"
    with pytest.raises(SystemExit):
        ap.parse_args(["train-marl", "--data", "d", "--out", "o", "--ckpt", "c",
                       "--retriever", "oracle"])


def test_end_to_end(workdir, capsys):
    d = workdir
    run = ["--config", str(d / "run.cfg")]
    assert cli.main(["gen", "--config", str(d / "gen.cfg"), "--seed", "0",
                     "--out", str(d / "data")]) == 0
    assert cli.main(["annotate", "--data", str(d / "data"), "--out", str(d / "ann")]) == 0
    assert cli.main(["pretrain", *run, "--data", str(d / "data"), "--out", str(d / "pre")]) == 0
    assert cli.main(["train-vanilla", *run, "--data", str(d / "data"), "--out", str(d / "van"),
                     "--ckpt", str(d / "pre/theta.json")]) == 0
    for kind in T.RETRIEVER_KINDS:
        assert cli.main(["train-marl", *run, "--data", str(d / "data"),
                         "--out", str(d / kind), "--ckpt", str(d / "van/theta.json"),
                         "--retriever", kind]) == 0
    assert (d / "learned/phi.json").exists() and not (d / "jaccard/phi.json").exists()
    assert cli.main(["eval", *run, "--data", str(d / "data"), "--ckpt",
                     str(d / "learned/theta.json"), "--retriever", "learned",
                     "--phi", str(d / "learned/phi.json"), "--beam", "2",
                     "--json", str(d / "eval.json")]) == 0
    rep = json.loads((d / "eval.json").read_text())
    assert 0.0 <= rep["micro_f1"] <= 1.0 and rep["per_question"]
    assert "overall micro F1" in capsys.readouterr().out


def test_missing_checkpoint_fails(workdir):
    assert cli.main(["eval", "--data", str(workdir / "nowhere"),
                     "--ckpt", str(workdir / "missing.json")]) == 1


def test_module_entry_point(workdir):
    res = subprocess.run([sys.executable, "-m", "marlqa", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "train-marl" in res.stdout
