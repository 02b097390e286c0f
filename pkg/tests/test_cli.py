import ast
import csv
import json
from pathlib import Path

import pytest
import yaml

from rlmia.cli import build_parser, main

TINY = {
    "t_max": [5], "seeds": [0], "n_members": 40, "n_nonmembers": 40, "m": 2, "collective_passes": 2,
    "behavior": {"steps": 0, "train_t_max": 5, "ddpg": {"hidden": [8]}},
    "bcq": {"steps": 4, "eval_interval": 2, "eval_episodes": 2, "batch_size": 8,
            "actor_hidden": [8], "critic_hidden": [8], "vae_hidden": [8]},
    "tcn": {"levels": 2, "channels": 4},
    "resnet": {"stages": 1, "blocks_per_stage": 1, "base_channels": 4},
    "train": {"epochs": 2, "patience": 2},
}

SRC = Path(__file__).parents[1] / "src" / "rlmia"


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def test_all_subcommands_exist():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"collect", "train-rl", "build-dataset", "train-attack", "evaluate", "sweep",
                                "report"}


def test_stage_by_stage_pipeline(tmp_path, config_file):
    d = tmp_path / "run"
    cfg = ["--config", config_file]
    assert main(["collect", *cfg, "--out", str(d)]) == 0
    assert main(["train-rl", *cfg, "--members", str(d / "member.jsonl"), "--nonmembers",
                 str(d / "nonmember.jsonl"), "--out", str(d)]) == 0
    assert main(["build-dataset", "--members", str(d / "member.jsonl"), "--nonmembers", str(d / "nonmember.jsonl"),
                 "--outputs", str(d / "outputs.jsonl"), "--out", str(d / "ds")]) == 0
    assert main(["train-attack", *cfg, "--dataset", str(d / "ds"), "--out", str(d / "clf")]) == 0
    clf = next(p for p in d.iterdir() if p.name.startswith("clf"))
    assert main(["evaluate", *cfg, "--classifier", str(clf), "--dataset", str(d / "ds"), "--split", "all",
                 "--out", str(d / "eval")]) == 0
    with open(d / "eval" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert (d / "eval" / "roc.csv").exists()
    assert (d / "learning_curve.csv").exists()


def test_sweep_and_report(tmp_path, config_file):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", config_file, "--set", "modes=[individual]", "--out", str(out)]) == 0
    first = (out / "summary.json").read_bytes()
    (out / "summary.json").unlink()
    assert main(["report", "--run", str(out)]) == 0
    assert (out / "summary.json").read_bytes() == first
    assert json.loads(first)["n_cells"] == 1


def test_bad_config_exits_with_usage_error(tmp_path, config_file, capsys):
    assert main(["sweep", "--config", config_file, "--set", "seeds=[]", "--out", str(tmp_path)]) == 2
    assert "seeds" in capsys.readouterr().err


def imported_modules(path: Path) -> set[str]:
    mods = set()
    for node in ast.walk(ast.parse(path.read_text())):
        if isinstance(node, ast.Import):
            mods.update(a.name for a in node.names)
        elif isinstance(node, ast.ImportFrom) and node.module:
            mods.add(node.module)
    return mods


@pytest.mark.parametrize("module", ["dataset.py", "classifiers.py", "metrics.py"])
def test_attack_side_never_imports_target_internals(module):
    # the attack only sees trajectories; it must not reach into the target's training code or parameters
    mods = imported_modules(SRC / module)
    assert not {m for m in mods if m.endswith(("bcq", "oracle"))}
