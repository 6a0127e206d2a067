import json
from pathlib import Path

import pytest
import yaml

from gridlens import cli
from gridlens import runner as rn


def _write(path: Path, obj) -> Path:
    path.write_text(yaml.safe_dump(obj))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small scene manifest and the planted model, produced through the CLI."""
    d = tmp_path_factory.mktemp("ws")
    gen = _write(d / "gen.yaml", {"kind": "gen", "seed": 3, "out": "gen", "params": {"n_scenes": 24, "n_pairs": 8}})
    plant = _write(d / "plant.yaml", {"kind": "plant", "out": "plant"})
    assert cli.main(["gen", "--config", str(gen), "--quiet"]) == 0
    assert cli.main(["plant", "--config", str(plant), "--quiet"]) == 0
    return d


def _run(ws: Path, kind: str, params: dict, name: str | None = None, **extra) -> Path:
    name = name or kind
    raw = {"kind": kind, "seed": 1, "out": f"out/{name}", "model": "plant/model.glck",
           "scenes": "gen/scenes.jsonl", "params": params, **extra}
    cfg = _write(ws / f"{name}.yaml", raw)
    assert cli.main([kind, "--config", str(cfg), "--quiet"]) == 0
    return ws / "out" / name


def _summary(out: Path) -> dict:
    return json.loads((out / "summary.json").read_text())["summary"]


# -------------------------------------------------------------- config


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(rn.ConfigError, match="unknown top-level"):
        rn.build_config({"kind": "gen", "out": "x", "colour": 1})
    with pytest.raises(rn.ConfigError):
        rn.build_config({"kind": "gen", "out": "x", "params": {"n_scene": 3}})
    with pytest.raises(rn.ConfigError):
        rn.build_config({"kind": "ablate", "out": "x", "model": "m", "scenes": "s",
                         "params": {"containerization": {"bogus": 1}}})


def test_missing_inputs_rejected(tmp_path):
    with pytest.raises(rn.ConfigError, match="does not exist"):
        rn.build_config({"kind": "eval", "out": "x", "model": "nope.glck", "scenes": "nope.jsonl"},
                        base_dir=tmp_path)
    with pytest.raises(rn.ConfigError, match="needs a 'model'"):
        rn.build_config({"kind": "eval", "out": "x", "scenes": "s"})
    with pytest.raises(rn.ConfigError):
        rn.load_config(tmp_path / "absent.yaml")


def test_kind_mismatch_and_bad_seed():
    with pytest.raises(rn.ConfigError):
        rn.build_config({"kind": "gen", "out": "x"}, kind="plant")
    with pytest.raises(rn.ConfigError):
        rn.build_config({"kind": "gen", "out": "x", "seed": -1})


def test_defaults_merged_and_hash_ignores_out():
    a = rn.build_config({"kind": "gen", "out": "a", "params": {"n_scenes": 5}})
    b = rn.build_config({"kind": "gen", "out": "b", "params": {"n_scenes": 5}})
    assert a.params["n_pairs"] == 50 and a.params["scene"]["grid_size"] == 8
    assert a.config_hash == b.config_hash
    assert a.config_hash != rn.build_config({"kind": "gen", "out": "a", "seed": 1,
                                             "params": {"n_scenes": 5}}).config_hash


def test_csv_roundtrip(tmp_path):
    sink = rn.ResultSink()
    sink.csv("t.csv", ["a", "b"], [[1, 0.1], [2, "x,y"]])
    sink.flush(tmp_path)
    text = (tmp_path / "t.csv").read_text()
    assert text.startswith(f"# schema {rn.RESULT_SCHEMA}\n")
    assert rn.read_csv(tmp_path / "t.csv") == [{"a": "1", "b": "0.1"}, {"a": "2", "b": "x,y"}]


# -------------------------------------------------------------- CLI


def test_exit_code_config_error(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.yaml", {"kind": "gen", "out": str(tmp_path / "o"), "wat": 1})
    assert cli.main(["gen", "--config", str(cfg)]) == cli.EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and err["exit_code"] == 2


def test_exit_code_experiment_error(workspace, capsys):
    bad = workspace / "broken.glck"
    bad.write_bytes(b"not a checkpoint")
    cfg = _write(workspace / "broken.yaml", {"kind": "eval", "out": "out/broken", "model": "broken.glck",
                                             "scenes": "gen/scenes.jsonl"})
    assert cli.main(["eval", "--config", str(cfg)]) == cli.EXIT_EXPERIMENT
    out = workspace / "out" / "broken"
    assert json.loads((out / rn.ERROR_FILE).read_text())["exit_code"] == 1
    assert json.loads((out / rn.RECORD_FILE).read_text())["complete"] is False
    assert capsys.readouterr().err


def test_rerun_is_byte_identical(workspace):
    a = _run(workspace, "eval", {"n_examples": 10}, "eval_a")
    b = _run(workspace, "eval", {"n_examples": 10}, "eval_b")
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    assert rn.TIMING_FILE in files
    for name in files:
        if name == rn.TIMING_FILE:
            continue
        ra, rb = (a / name).read_bytes(), (b / name).read_bytes()
        if name == rn.RECORD_FILE:
            # the recorded config contains the output directory
            ra, rb = ra.replace(b"eval_a", b""), rb.replace(b"eval_b", b"")
        assert ra == rb, name


def test_gen_and_plant_outputs(workspace):
    assert (workspace / "gen" / "scenes.jsonl").is_file()
    rec = rn.RunRecord.load(workspace / "plant" / rn.RECORD_FILE)
    assert rec.complete and "model.glck" in rec.files and "circuit.json" in rec.files
    assert rec.wall_clock_s >= 0


def test_eval_run(workspace):
    s = _summary(_run(workspace, "eval", {}))
    assert s["localization_score"] == 1.0 and s["binary_accuracy"] == 1.0
    assert s["false_positive_rate"] == 0.0


def test_knockout_run(workspace):
    out = _run(workspace, "knockout", {"n_examples": 12})
    rows = rn.read_csv(out / "knockout.csv")
    assert [r["group"] for r in rows][-1] == "all layers"


def test_cma_and_head_ablate_runs(workspace):
    out = _run(workspace, "cma", {"n_examples": 4})
    assert (out / "ranking_localization.csv").is_file()
    out = _run(workspace, "head-ablate", {"n_examples": 8, "n_pairs": 4, "fractions": [0.0, 0.0625]})
    assert (out / "head_ablation.csv").is_file()


def test_probe_run(workspace):
    out = _run(workspace, "probe", {"n_train": 8, "n_test": 4, "epochs": 1, "tags": ["embedding"]})
    assert rn.read_csv(out / "probe.csv")[0]["tag"] == "embedding"


def test_ablate_run(workspace):
    params = {"n_examples": 8, "paddings": [0], "n_random_seeds": 1, "ig_steps": 2,
              "containerization": {"n_examples": 24, "paddings": [0, 1], "scalings": [0, 1], "n_seeds": 1},
              "n_shuffle_seeds": 1}
    out = _run(workspace, "ablate", params)
    for name in ("ablation.csv", "containerization_mean.csv", "shuffle.csv"):
        assert (out / name).is_file()


def test_train_and_report_runs(workspace):
    out = _run(workspace, "train", {"n_scenes": 2, "steps": 3, "batch_size": 4,
                                    "model": {"n_layers": 1, "n_heads": 2, "d_model": 24, "d_mlp": 8}},
               model=None)
    assert rn.read_csv(out / "loss.csv")[0]["step"] == "0"
    cfg = _write(workspace / "report.yaml", {"kind": "report", "out": "out/report",
                                             "params": {"runs": ["out/eval", "out/train"]}})
    assert cli.main(["report", "--config", str(cfg), "--quiet"]) == 0
    assert len(rn.read_csv(workspace / "out" / "report" / "report.csv")) >= 2
