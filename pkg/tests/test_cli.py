import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from immunoattn.checkpoint import load_checkpoint, save_checkpoint
from immunoattn.cli import main
from immunoattn.datasets import parse_dataset
from immunoattn.embedio import read_bundles

TRAIN_FLAGS = ["--epochs", "2", "--heads", "2", "--hidden", "8"]


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def pipeline(tmp_path):
    """synth-data -> filter -> embed -> split -> train, on a small dataset."""
    d = tmp_path
    assert run("synth-data", "--out", d / "raw.csv", "--n", 60, "--seed", 1) == 0
    assert run("filter", "--data", d / "raw.csv", "--out", d / "data.csv", "--identity-threshold", 0.9) == 0
    assert run("embed", "synth", "--data", d / "data.csv", "--out", d / "emb.vveb", "--dim", 8) == 0
    assert run("split", "--data", d / "data.csv", "--out", d / "split.csv", "--seed", 2) == 0
    assert run(
        "train", "--data", d / "data.csv", "--bundles", d / "emb.vveb", "--split", d / "split.csv",
        "--out-checkpoint", d / "model.ckpt", "--history-csv", d / "hist.csv", *TRAIN_FLAGS,
    ) == 0
    return d


def test_full_pipeline(pipeline):
    d = pipeline
    common = ["--data", d / "data.csv", "--bundles", d / "emb.vveb", "--checkpoint", d / "model.ckpt"]
    assert run("eval", *common, "--split", d / "split.csv", "--out", d / "eval.csv", "--repeats", 3, "--top-k", 2) == 0
    assert run("predict", *common, "--out", d / "pred.csv") == 0
    assert run("attn-export", *common, "--out", d / "attn.csv", "--ids", "syn0000") == 0
    assert run("attn-export", *common, "--out", d / "x.csv", "--ids", "nope") == 2

    table = rows(d / "eval.csv")
    assert [r["repeat"] for r in table] == ["0", "1", "2", "mean", "std"]

    records = parse_dataset((d / "data.csv").read_bytes())
    pred = rows(d / "pred.csv")
    assert len(pred) == len(records)
    assert all(0.0 <= float(r["score"]) <= 1.0 and r["label_pred"] in "01" for r in pred)

    attn = rows(d / "attn.csv")
    seq = next(r.sequence for r in records if r.id == "syn0000")
    assert [int(r["position"]) for r in attn] == list(range(1, len(seq) + 1))
    assert sum(float(r["alpha"]) for r in attn) == pytest.approx(1.0, abs=1e-9)

    hist = rows(d / "hist.csv")
    assert [h["epoch"] for h in hist] == ["1", "2"]

    manifest = json.loads((d / "model.ckpt.manifest.json").read_text())
    assert manifest["subcommand"] == "train" and manifest["seed"] == 0
    assert set(manifest) >= {"flags", "inputs", "outputs", "version", "duration_s"}


def test_rerun_is_byte_identical(pipeline, tmp_path_factory):
    d = pipeline
    e = tmp_path_factory.mktemp("again")
    run("synth-data", "--out", e / "raw.csv", "--n", 60, "--seed", 1)
    run("filter", "--data", e / "raw.csv", "--out", e / "data.csv", "--identity-threshold", 0.9)
    run("embed", "synth", "--data", e / "data.csv", "--out", e / "emb.vveb", "--dim", 8)
    run("split", "--data", e / "data.csv", "--out", e / "split.csv", "--seed", 2)
    run("train", "--data", e / "data.csv", "--bundles", e / "emb.vveb", "--split", e / "split.csv",
        "--out-checkpoint", e / "model.ckpt", "--history-csv", e / "hist.csv", *TRAIN_FLAGS)
    for name in ("raw.csv", "data.csv", "emb.vveb", "split.csv", "model.ckpt", "hist.csv"):
        assert (d / name).read_bytes() == (e / name).read_bytes(), name


def test_cross_source_split(tmp_path):
    run("synth-data", "--out", tmp_path / "b.csv", "--n", 20, "--source", "bacteria")
    run("synth-data", "--out", tmp_path / "v.csv", "--n", 10, "--source", "virus", "--seed", 5)
    b = (tmp_path / "b.csv").read_text()
    v = (tmp_path / "v.csv").read_text().split("\n", 1)[1].replace("syn", "vir")
    (tmp_path / "all.csv").write_text(b + v)
    assert run("split", "--data", tmp_path / "all.csv", "--out", tmp_path / "s.csv", "--cross", "bacteria", "virus") == 0
    parts = {r["id"]: r["partition"] for r in rows(tmp_path / "s.csv")}
    assert {i for i, p in parts.items() if p == "test"} == {i for i in parts if i.startswith("vir")}
    assert sum(p == "valid" for p in parts.values()) == 2


def test_featurize_modes(tmp_path):
    run("synth-data", "--out", tmp_path / "d.csv", "--n", 3)
    assert run("featurize", "--data", tmp_path / "d.csv", "--out", tmp_path / "m.csv") == 0
    assert run("featurize", "--data", tmp_path / "d.csv", "--out", tmp_path / "a.csv", "--mode", "acc", "--max-lag", 2) == 0
    records = parse_dataset((tmp_path / "d.csv").read_bytes())
    assert len(rows(tmp_path / "m.csv")) == sum(len(r) for r in records)
    acc = rows(tmp_path / "a.csv")
    assert len(acc) == 3 and len(acc[0]) == 1 + 128


def test_embed_dimension(tmp_path):
    run("synth-data", "--out", tmp_path / "d.csv", "--n", 4)
    run("embed", "synth", "--data", tmp_path / "d.csv", "--out", tmp_path / "e.vveb", "--dim", 12)
    assert {b.dim for b in read_bundles(tmp_path / "e.vveb")} == {12}


def test_missing_input_exits_nonzero(tmp_path, capsys):
    code = run("filter", "--data", tmp_path / "nope.csv", "--out", tmp_path / "o.csv")
    assert code == 2
    assert "nope.csv" in capsys.readouterr().err
    assert not (tmp_path / "o.csv").exists()


def test_malformed_input_exits_nonzero(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("id,sequence,label,source\np1,MKX,1,bacteria\n")
    assert run("featurize", "--data", tmp_path / "bad.csv", "--out", tmp_path / "o.csv") == 2
    assert "'p1' at offset 2" in capsys.readouterr().err


def test_usage_error_exits_one(tmp_path):
    assert run("filter", "--data", tmp_path / "x.csv") == 1
    assert run("split", "--data", "x", "--out", "y", "--ratios", "0.5,0.5") == 1
    assert run("bogus") == 1


def test_config_file_precedence(tmp_path):
    run("synth-data", "--out", tmp_path / "d.csv", "--n", 30)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nseed = 7\nratios = 0.5,0.25,0.25\n")
    assert run("--config", cfg, "split", "--data", tmp_path / "d.csv", "--out", tmp_path / "a.csv") == 0
    assert run("--config", cfg, "split", "--data", tmp_path / "d.csv", "--out", tmp_path / "b.csv", "--seed", 8) == 0
    assert run("split", "--data", tmp_path / "d.csv", "--out", tmp_path / "c.csv", "--seed", 7,
               "--ratios", "0.5,0.25,0.25") == 0
    a, b, c = ((tmp_path / f"{n}.csv").read_bytes() for n in "abc")
    assert a == c and a != b
    assert json.loads((tmp_path / "b.csv.manifest.json").read_text())["seed"] == 8


def test_numeric_failure_exits_three(pipeline, capsys):
    d = pipeline
    ckpt = load_checkpoint(d / "model.ckpt")
    ckpt.params.head_w2[:] = np.array([[1e300, -1e300]] * ckpt.params.head_w2.shape[0])
    ckpt.params.head_b1[:] = 1e300
    save_checkpoint(ckpt, d / "huge.ckpt")
    code = run("predict", "--data", d / "data.csv", "--bundles", d / "emb.vveb",
               "--checkpoint", d / "huge.ckpt", "--out", d / "p.csv")
    assert code == 3
    assert "error" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "immunoattn", "synth-data", "--out", str(tmp_path / "d.csv"), "--n", "5"],
        capture_output=True, text=True,
    )
    assert out.returncode == 0, out.stderr
    assert len(parse_dataset((tmp_path / "d.csv").read_bytes())) == 5
