import json

import numpy as np
import pytest

from cdrflow import flow
from cdrflow.cli import main
from cdrflow.data import load_dataset

from test_data import pdb_line

CONFIG = {
    "loop_class": "H3",
    "model": {"n_max": 8, "n_distance_layers": 2, "n_amino_layers": 2, "cnn_hidden": 4, "gnn_hidden": 4,
              "mlp_hidden": [5]},
    "train": {"epochs": 2, "batch_size": 8, "mc_samples": 4},
    "data": {"count": 24, "lengths": [6, 8]},
    "embed": {"max_sweeps": 50},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "config.json").write_text(json.dumps(CONFIG))
    assert main(["synth", "--config", str(root / "config.json"), "--seed", "5", "--out", str(root / "data.jsonl")]) == 0
    assert main(["train", "--config", str(root / "config.json"), "--seed", "5", "--dataset", str(root / "data.jsonl"),
                 "--out", str(root / "model.json")]) == 0
    return root


def read_generated(path):
    return flow.load_generated(path)[1]


def test_synth_and_train_outputs(workdir):
    ds = load_dataset(workdir / "data.jsonl")
    assert len(ds.loops) == 24 and {loop.length for loop in ds.loops} <= {6, 8}
    log = [json.loads(line) for line in (workdir / "model.json.log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]
    manifest = json.loads((workdir / "model.json.manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 5
    assert set(manifest["outputs"]) == {"checkpoint", "log"}
    assert manifest["config"]["train"]["epochs"] == 2 and "wall_time" in manifest
    assert flow.load_checkpoint(workdir / "model.json").n_max == 8


def test_train_twice_gives_identical_checkpoint(workdir, tmp_path):
    code = main(["train", "--config", str(workdir / "config.json"), "--seed", "5",
                 "--dataset", str(workdir / "data.jsonl"), "--out", str(tmp_path / "again.json")])
    assert code == 0
    assert (tmp_path / "again.json").read_bytes() == (workdir / "model.json").read_bytes()


def test_generate_count_and_determinism(workdir, tmp_path):
    args = ["generate", "--checkpoint", str(workdir / "model.json"), "--seed", "3", "--count", "10"]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert len(read_generated(tmp_path / "a.jsonl")) == 10
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert manifest["seed"] == 3 and 0.0 <= manifest["extra"]["distance_validity_rate"] <= 1.0


def test_generate_embed_then_evaluate(workdir, tmp_path, capsys):
    out = tmp_path / "gen.jsonl"
    assert main(["generate", "--checkpoint", str(workdir / "model.json"), "--config", str(workdir / "config.json"),
                 "--seed", "1", "--count", "4", "--embed", "--out", str(out)]) == 0
    loops = read_generated(out)
    assert all(g.coords is not None and g.coords.shape == (g.length, 3) for g in loops)
    rate = json.loads((tmp_path / "gen.jsonl.manifest.json").read_text())["extra"]["embedded_validity_rate"]
    assert 0.0 <= rate <= 1.0

    report_path = tmp_path / "report.json"
    assert main(["evaluate", "--input", str(out), "--dataset", str(workdir / "data.jsonl"),
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["sample_count"] == 4 and 0 <= report["validity_rate"] <= 1
    assert 0 <= report["diversity"] <= 1 and report["ppl_mean"] >= 1 and report["rmsd_mean"] >= 0
    assert "validity rate" in capsys.readouterr().out


def test_embed_command_adds_coordinates(workdir, tmp_path):
    raw = tmp_path / "raw.jsonl"
    assert main(["generate", "--checkpoint", str(workdir / "model.json"), "--count", "2", "--out", str(raw)]) == 0
    before = raw.read_bytes()
    assert main(["embed", "--input", str(raw), "--config", str(workdir / "config.json"),
                 "--out", str(tmp_path / "emb.jsonl")]) == 0
    assert raw.read_bytes() == before
    assert all(g.coords is not None for g in read_generated(tmp_path / "emb.jsonl"))


def test_evaluate_test_copies_scores_perfectly(workdir, tmp_path):
    ds = load_dataset(workdir / "data.jsonl")
    test = ds.split("test")
    copies = [flow.GeneratedLoop(id=l.id, sequence=l.sequence, distances=l.distance_matrix(),
                                 logits=np.zeros((l.length, 0)), coords=l.coords + 2.0) for l in test]
    flow.save_generated(copies, tmp_path / "copies.jsonl", "H3")
    assert main(["evaluate", "--input", str(tmp_path / "copies.jsonl"), "--dataset", str(workdir / "data.jsonl"),
                 "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["rmsd_mean"] < 1e-9 and report["validity_rate"] == 1.0


def test_evaluate_checkpoint_and_class_mismatch(workdir, tmp_path):
    assert main(["evaluate", "--input", str(workdir / "model.json"), "--dataset", str(workdir / "data.jsonl"),
                 "--count", "5", "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["sample_count"] == 5
    h1 = dict(CONFIG, loop_class="H1")
    (tmp_path / "h1.json").write_text(json.dumps(h1))
    assert main(["synth", "--config", str(tmp_path / "h1.json"), "--count", "6", "--out",
                 str(tmp_path / "h1.jsonl")]) == 0
    code = main(["evaluate", "--input", str(workdir / "model.json"), "--dataset", str(tmp_path / "h1.jsonl"),
                 "--count", "2", "--out", str(tmp_path / "bad.json")])
    assert code == 4


def test_interpolate_endpoints(workdir, tmp_path):
    ds = load_dataset(workdir / "data.jsonl")
    eights = [l for l in ds.loops if l.length == 8]
    a, b = eights[0], eights[1]
    assert main(["interpolate", "--checkpoint", str(workdir / "model.json"), "--dataset", str(workdir / "data.jsonl"),
                 "--loop-a", a.id, "--loop-b", b.id, "--steps", "1", "--out", str(tmp_path / "i.jsonl")]) == 0
    loops = read_generated(tmp_path / "i.jsonl")
    assert len(loops) == 2
    assert [g.sequence for g in loops] == [a.sequence, b.sequence]
    assert np.max(np.abs(loops[0].distances - a.distance_matrix())) < 1e-6
    assert np.max(np.abs(loops[1].distances - b.distance_matrix())) < 1e-6
    t = json.loads((tmp_path / "i.jsonl.manifest.json").read_text())["extra"]["t"]
    assert t == [0.0, 1.0]


def test_interpolate_length_mismatch_fails(workdir, tmp_path, capsys):
    ds = load_dataset(workdir / "data.jsonl")
    six = next(l for l in ds.loops if l.length == 6)
    eight = next(l for l in ds.loops if l.length == 8)
    code = main(["interpolate", "--checkpoint", str(workdir / "model.json"), "--dataset", str(workdir / "data.jsonl"),
                 "--loop-a", six.id, "--loop-b", eight.id, "--out", str(tmp_path / "i.jsonl")])
    assert code == 3 and "equal lengths" in capsys.readouterr().err
    assert not (tmp_path / "i.jsonl.manifest.json").exists()


def test_sweep_grid_rows(workdir, tmp_path):
    gen = tmp_path / "gen.jsonl"
    assert main(["generate", "--checkpoint", str(workdir / "model.json"), "--count", "3", "--out", str(gen)]) == 0
    (tmp_path / "grid.json").write_text(json.dumps({"embed.lambda1": [1, 50], "embed.max_sweeps": [5, 10]}))
    assert main(["sweep", "--input", str(gen), "--dataset", str(workdir / "data.jsonl"),
                 "--grid", str(tmp_path / "grid.json"), "--out", str(tmp_path / "table.jsonl")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "table.jsonl").read_text().splitlines()]
    assert len(rows) == 4 and all("report" in r for r in rows)
    assert {(r["cell"]["embed.lambda1"], r["cell"]["embed.max_sweeps"]) for r in rows} == {
        (1, 5), (1, 10), (50, 5), (50, 10)}


def test_sweep_single_cell_equals_evaluate(workdir, tmp_path):
    gen = tmp_path / "gen.jsonl"
    assert main(["generate", "--checkpoint", str(workdir / "model.json"), "--count", "3", "--out", str(gen)]) == 0
    (tmp_path / "grid.json").write_text(json.dumps({"metrics.lm_order": [2]}))
    (tmp_path / "cfg.json").write_text(json.dumps({"metrics": {"lm_order": 2}}))
    assert main(["sweep", "--input", str(gen), "--dataset", str(workdir / "data.jsonl"),
                 "--grid", str(tmp_path / "grid.json"), "--out", str(tmp_path / "table.jsonl")]) == 0
    assert main(["evaluate", "--input", str(gen), "--dataset", str(workdir / "data.jsonl"),
                 "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "r.json")]) == 0
    row = json.loads((tmp_path / "table.jsonl").read_text())
    assert row["report"] == json.loads((tmp_path / "r.json").read_text())


def test_sweep_records_failing_cells(workdir, tmp_path):
    gen = tmp_path / "gen.jsonl"
    assert main(["generate", "--checkpoint", str(workdir / "model.json"), "--count", "2", "--out", str(gen)]) == 0
    (tmp_path / "grid.json").write_text(json.dumps({"embed.lambda1": [0.1, 50]}))
    assert main(["sweep", "--input", str(gen), "--dataset", str(workdir / "data.jsonl"),
                 "--grid", str(tmp_path / "grid.json"), "--out", str(tmp_path / "t.jsonl")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert "error" in rows[0] and "report" in rows[1]


@pytest.mark.parametrize("manifest", ["data.jsonl.manifest.json", "model.json.manifest.json"])
def test_rerun_is_bit_identical(workdir, tmp_path, capsys, manifest):
    assert main(["rerun", str(workdir / manifest), "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "identical" in out and "DIFFERENT" not in out


def test_rerun_detects_tampering(workdir, tmp_path):
    out = tmp_path / "g.jsonl"
    assert main(["generate", "--checkpoint", str(workdir / "model.json"), "--count", "2", "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "g.jsonl.manifest.json").read_text())
    manifest["outputs"]["generated"]["sha256"] = "0" * 64
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert main(["rerun", str(tmp_path / "m.json"), "--out-dir", str(tmp_path / "re")]) == 6


def test_ingest_from_pdb(tmp_path):
    names = ["GLY", "ALA", "SER", "TYR", "TRP", "ASP"]
    lines = [pdb_line(serial=i + 1, res=n, resnum=95 + i, x=3.8 * i) for i, n in enumerate(names)]
    (tmp_path / "ab.pdb").write_text("\n".join(lines) + "\nEND\n")
    cfg = {"data": {"ingest": [{"file": "ab.pdb", "chain": "H", "start": 95, "end": 100}]}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["ingest", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "d.jsonl")]) == 0
    (loop,) = load_dataset(tmp_path / "d.jsonl").loops
    assert loop.sequence == "GASYWD"
    cfg["data"]["ingest"][0]["end"] = 102
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["ingest", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "d.jsonl")]) == 4


def test_exit_codes(workdir, tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    code = main(["train", "--config", str(workdir / "config.json"), "--dataset", str(missing),
                 "--out", str(tmp_path / "m.json")])
    assert code == 4 and str(missing) in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--dataset", str(workdir / "data.jsonl"),
                 "--out", str(tmp_path / "m.json")]) == 3
    (tmp_path / "typo.json").write_text(json.dumps({"model": {"nmax": 8}}))
    assert main(["synth", "--config", str(tmp_path / "typo.json"), "--out", str(tmp_path / "d.jsonl")]) == 3
    assert main(["frobnicate"]) == 2
    assert main(["generate", "--checkpoint", str(workdir / "model.json")]) == 2
    (tmp_path / "corrupt.json").write_text("{not json")
    assert main(["generate", "--checkpoint", str(tmp_path / "corrupt.json"), "--out", str(tmp_path / "g")]) == 4
    assert main(["--version"]) == 0
