import json
import os
from pathlib import Path

import numpy as np
import pytest

from unidiff.cli import build_parser, main
from unidiff.errors import ConfigError, HashMismatchError
from unidiff.world import WorldConfig, load_dataset

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["", "gen-data", "train", "sample", "complete", "inspect", "verify"]

TINY = {
    "schema_version": 1,
    "world": {"rows": 5, "cols": 5, "shades": 2, "caption_len": 6},
    "schedule": {"T": 8},
    "model": {"preset": "gradcheck"},
    "train": {"steps": 4, "batch_size": 4, "checkpoint_every": 2},
}


def help_text(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    with pytest.raises(SystemExit) as exc:
        main(([command] if command else []) + ["--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("command", COMMANDS)
def test_help_matches_golden(command, capsys, monkeypatch):
    text = help_text(command, capsys, monkeypatch)
    path = GOLDEN / f"help-{command or 'main'}.txt"
    if os.environ.get("UNIDIFF_UPDATE_GOLDEN"):
        path.write_text(text)
    assert text == path.read_text()


def test_every_flag_is_documented():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    for name, sub in subs.items():
        for action in sub._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(root / "tiny.json"), "--n", "30", "--seed", "2",
                 "--out", str(root / "data.txt"), "--render", str(root / "preview"), "--render-count", "2"]) == 0
    assert main(["train", "--config", str(root / "tiny.json"), "--data", str(root / "data.txt"),
                 "--out-dir", str(root / "run")]) == 0
    return root


def test_gen_data_is_deterministic(workspace, tmp_path):
    assert main(["gen-data", "--config", str(workspace / "tiny.json"), "--n", "30", "--seed", "2",
                 "--out", str(tmp_path / "again.txt")]) == 0
    assert (tmp_path / "again.txt").read_bytes() == (workspace / "data.txt").read_bytes()
    records, world = load_dataset(workspace / "data.txt")
    assert len(records) == 30 and world.rows == 5
    assert sorted(p.name for p in (workspace / "preview").iterdir()) == [
        "record-0000.ppm", "record-0000.txt", "record-0001.ppm", "record-0001.txt"]


def test_world_config_flag(tmp_path):
    (tmp_path / "world.json").write_text(json.dumps({"rows": 6, "cols": 7}))
    assert main(["gen-data", "--world-config", str(tmp_path / "world.json"), "--n", "3",
                 "--out", str(tmp_path / "d.txt")]) == 0
    assert load_dataset(tmp_path / "d.txt")[1] == WorldConfig(rows=6, cols=7)


def test_train_outputs(workspace):
    run = workspace / "run"
    assert {"run.json", "metrics.tsv", "last.bin", "ckpt-000002.bin", "ckpt-000004.bin"} <= {
        p.name for p in run.iterdir()}
    assert len((run / "metrics.tsv").read_text().splitlines()) == 5


def sample(workspace, out, *extra):
    return main(["sample", "--checkpoint", str(workspace / "run" / "last.bin"), "--out", str(out), *extra])


def test_sample_twice_identical(workspace, tmp_path):
    for name in ("a", "b"):
        assert sample(workspace, tmp_path / f"{name}.jsonl", "--task", "pair", "--count", "4", "--seed", "1") == 0
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes()
    recs = [json.loads(ln) for ln in a.decode().splitlines()]
    assert [r["index"] for r in recs] == [0, 1, 2, 3]
    assert all(len(r["segments"][0]) == 25 and len(r["segments"][1]) == 6 for r in recs)


def test_conditional_sampling_keeps_condition(workspace, tmp_path):
    records, world = load_dataset(workspace / "data.txt")
    lay = world.layout()
    assert sample(workspace, tmp_path / "t2i.jsonl", "--task", "t2i", "--count", "3", "--data",
                  str(workspace / "data.txt"), "--index", "5", "--stride", "3",
                  "--render", str(tmp_path / "r")) == 0
    want = (records[5].caption + lay.offsets[1]).tolist()
    for ln in (tmp_path / "t2i.jsonl").read_text().splitlines():
        assert json.loads(ln)["segments"][1] == want
    assert len(list((tmp_path / "r").glob("*.ppm"))) == 3


def test_complete_preserves_unmasked(workspace, tmp_path):
    records, world = load_dataset(workspace / "data.txt")
    lay = world.layout()
    (tmp_path / "region.txt").write_text("#####\n##...\n.....\n.....\n.....\n")
    assert main(["complete", "--checkpoint", str(workspace / "run" / "last.bin"), "--data",
                 str(workspace / "data.txt"), "--index", "3", "--mask-file", str(tmp_path / "region.txt"),
                 "--caption", "a ~red~ ? square here", "--count", "2", "--seed", "5",
                 "--out", str(tmp_path / "c.jsonl")]) == 0
    grid = records[3].grid + lay.offsets[0]
    for ln in (tmp_path / "c.jsonl").read_text().splitlines():
        rec = json.loads(ln)
        assert rec["task"] == "infill"
        assert rec["segments"][0][7:] == grid[7:].tolist()
        cap = np.array(rec["segments"][1]) - lay.offsets[1]
        assert [world.words[i] for i in cap[[0, 2, 3, 4, 5]]] == ["a", "square", "here", "<pad>", "<pad>"]


def test_inspect_tables(capsys):
    assert main(["inspect", "--what", "column", "--sizes", "3,2", "--T", "16", "--t", "1", "--x0", "0",
                 "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "x_t,q"
    vals = [float(ln.split(",")[1]) for ln in lines[1:]]
    assert vals == pytest.approx([15 / 16, 0, 0, 0, 0, 1 / 16])
    assert main(["inspect", "--what", "layout", "--sizes", "3,2,4"]) == 0
    out = capsys.readouterr().out.split()
    assert out[:3] == ["modality", "offset", "size"] and out[-3:] == ["mask", "9", "1"]


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    assert "6/6 oracle checks passed" in capsys.readouterr().out


def test_error_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "train": {"stepz": 3}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == ConfigError.code
    assert "stepz" in capsys.readouterr().err
    bad.write_text('{"schema_version": 1,\n  "world": }')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == ConfigError.code
    assert "bad.json:2:" in capsys.readouterr().err
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "model": {"preset": "gradcheck", "overrides": {"d_model": 8}}}))
    code = main(["sample", "--checkpoint", str(workspace / "run" / "last.bin"), "--config", str(other),
                 "--out", str(tmp_path / "s.jsonl")])
    assert code == HashMismatchError.code
    assert main(["train", "--data", str(tmp_path / "missing.txt"), "--out-dir", str(tmp_path)]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["inspect", "--sizes", "3,x"])
    assert exc.value.code == 2
