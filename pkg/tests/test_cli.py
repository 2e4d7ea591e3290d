import json
import os

import pytest

from ftimmune.cli import RunConfig, bracket, main, parse_config, strip_timing
from ftimmune.data import load_graph
from ftimmune.models import ConfigError

SMALL = """
[dataset]
blocks = 60 60
p_in = 0.1
p_out = 0.01
feature_dim = 8
seed = 3
reliable_fraction = 0.25

[model]
layer_dims = 8 8 2
max_epochs = 30

[attack]
kind = random
rate = 0.1

[immune]
generator_count = 300

[output]
figures = false
"""


def config(tmp_path, text=SMALL, extra="", name="run.ini"):
    p = tmp_path / name
    p.write_text(text + extra)
    return str(p)


def records(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_parse_defaults_and_overrides(tmp_path):
    cfg = parse_config(SMALL, str(tmp_path))
    assert cfg.dataset.sbm.blocks == [60, 60] and cfg.arch.layer_dims == (8, 8, 2)
    assert cfg.train.learning_rate == 0.3 and cfg.immune.generator_count == 300
    assert cfg.immune.seed == cfg.train.seed
    assert cfg.attack.kind == "random" and cfg.output.figures is False
    assert RunConfig().attack.rate == 0.2 and RunConfig().dataset.reliable_fraction == 0.1


@pytest.mark.parametrize("text, msg", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[immune]\nwhatever = 1\n", "unknown key"),
    ("[immune]\nvarrho = ten\n", "varrho"),
    ("[immune]\nvarrho = 1\n", "varrho"),
    ("not ini", "syntax"),
])
def test_parse_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_validation_error_before_compute(tmp_path, capsys):
    out = tmp_path / "out"
    text = SMALL.replace("max_epochs = 30", "max_epochs = 30\nsnapshot_capacity = 5")
    code = main(["run", "-c", config(tmp_path, text), "-o", str(out)])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "snapshot_capacity" in err["message"]
    assert not out.exists()


def test_clean_undefended_run_has_only_training_records(tmp_path):
    text = SMALL.replace("rate = 0.1", "rate = 0.0").replace("[immune]\n", "[immune]\nenabled = false\n")
    out = tmp_path / "out"
    assert main(["run", "-c", config(tmp_path, text), "-o", str(out)]) == 0
    recs = records(out / "metrics.jsonl")
    assert {r["type"] for r in recs} == {"epoch", "final"}
    assert len(recs) == 31
    assert not (out / "perturbations.txt").exists()


def test_runs_are_deterministic(tmp_path):
    cfg = config(tmp_path)
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "a")]) == 0
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "b")]) == 0
    a, b = records(tmp_path / "a" / "metrics.jsonl"), records(tmp_path / "b" / "metrics.jsonl")
    assert strip_timing(a) == strip_timing(b)
    assert (tmp_path / "a" / "rectified.edges").read_text() == (tmp_path / "b" / "rectified.edges").read_text()
    ep = [r for r in a if r["type"] == "epoch"]
    assert all("t_train" in r and "t_defense" in r for r in ep)
    cp = [r for r in a if r["type"] == "checkpoint"]
    assert cp and all("precision_inserted" in r for r in cp)
    for r in cp:
        for f in r["flagged"]:
            assert f["evidence"]["edge_scores"] and f["evidence"]["node_scores"]


def test_seed_override_changes_run(tmp_path, capsys):
    cfg = config(tmp_path)
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "a"), "-s", "5"]) == 0
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "b")]) == 0
    a, b = records(tmp_path / "a" / "metrics.jsonl"), records(tmp_path / "b" / "metrics.jsonl")
    assert strip_timing(a) != strip_timing(b)


def test_export_import_round_trip(tmp_path, capsys):
    cfg = config(tmp_path)
    prefix = str(tmp_path / "det")
    assert main(["export-detectors", "-c", cfg, "-o", str(tmp_path / "a"), "--to", prefix]) == 0
    assert os.path.exists(prefix + ".node") and os.path.exists(prefix + ".edge")
    out = tmp_path / "b"
    assert main(["import-detectors", "-c", cfg, "-o", str(out), "--from", prefix, "-s", "4"]) == 0
    cp = [r for r in records(out / "metrics.jsonl") if r["type"] == "checkpoint"]
    assert cp and all("generator_satisfaction" not in r and "imported_kept" not in r for r in cp)


def test_import_with_wrong_dim_is_rejected(tmp_path, capsys):
    prefix = str(tmp_path / "det")
    assert main(["export-detectors", "-c", config(tmp_path), "-o", str(tmp_path / "a"), "--to", prefix]) == 0
    capsys.readouterr()
    other = config(tmp_path, SMALL.replace("layer_dims = 8 8 2", "layer_dims = 8 6 2"), name="other.ini")
    assert main(["import-detectors", "-c", other, "-o", str(tmp_path / "b"), "--from", prefix]) == 1
    msg = json.loads(capsys.readouterr().err)["message"]
    assert "dim 8" in msg and "run dim 6" in msg


def test_missing_detector_files(tmp_path, capsys):
    assert main(["import-detectors", "-c", config(tmp_path), "--from", str(tmp_path / "none")]) == 1


def test_gen_data_then_run_from_files(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "-c", config(tmp_path), "-o", str(out)]) == 0
    g = load_graph(out / "poisoned.edges", out / "poisoned.features", out / "poisoned.labels",
                   str(out / "poisoned.split"))
    assert g.num_nodes == 120 and g.reliable_mask.sum() == 30
    text = SMALL.replace("[dataset]\n", f"[dataset]\nsource = files\nedges = {out}/poisoned.edges\n"
                                        f"features = {out}/poisoned.features\nlabels = {out}/poisoned.labels\n"
                                        f"split = {out}/poisoned.split\n")
    text = text.replace("kind = random", "kind = none")
    assert main(["run", "-c", config(tmp_path, text, name="files.ini"), "-o", str(tmp_path / "r")]) == 0


def test_bench_reports_overheads(tmp_path, capsys):
    text = SMALL.replace("[immune]\n", "[immune]\nenabled = false\n").replace("figures = false", "figures = true")
    out = tmp_path / "bench"
    assert main(["bench", "-c", config(tmp_path, text), "-o", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "undefended" in printed and "[+0.0%]" in printed
    lines = (out / "bench.tsv").read_text().splitlines()
    assert lines[0].startswith("variant") and len(lines) == 4
    assert (out / "bench.png").stat().st_size > 0


def test_bracket_convention():
    assert bracket(1.05, 1.0) == "[+5.0%]"
    assert bracket(0.9, 1.0) == "[-10.0%]"


def test_fixture_run_writes_report(tmp_path, capsys):
    out = tmp_path / "fx"
    assert main(["run", "-s", "0", "-o", str(out)]) == 0
    recs = records(out / "metrics.jsonl")
    cps = [r for r in recs if r["type"] == "checkpoint"]
    final = recs[-1]
    assert len(cps) >= 1 and final["type"] == "final"
    assert "precision_inserted" in final and "recall_inserted" in final
    for name in ("epochs.tsv", "checkpoints.tsv", "accuracy.png", "defense.png", "rectified.edges",
                 "perturbations.txt"):
        assert (out / name).stat().st_size > 0
    header = capsys.readouterr().out.splitlines()[0]
    assert "precision_inserted" in header
