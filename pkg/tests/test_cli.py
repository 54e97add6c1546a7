import json
from pathlib import Path

import pytest

from mitodann.cli import apply_overrides, load_config_file, main, run_config

TINY = {
    "model": {"stem": {"stem_width": 4, "widths": [4, 8], "blocks": [1, 1]}, "patch_size": 16,
              "cell_hidden": 4, "domain_hidden": 4},
    "data": {"synth": {"per_class_per_domain": 8, "patch_size": 16}},
    "epochs_per_cycle": 1, "cycles": 1, "batch_size": 8,
}


def write_cfg(tmp_path, values, name="run.yaml"):
    import yaml

    path = tmp_path / name
    path.write_text(yaml.safe_dump(values))
    return str(path)


def tree(path: Path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_synth_is_byte_identical(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"per_class_per_domain": 3, "patch_size": 16})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and "manifest.csv" in a and "stats.json" in a and "resolved_config.json" in a


def test_unknown_flag_is_config_error(capsys):
    assert main(["train", "--bogus"]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error[config]:") and "\n" not in err


def test_unknown_config_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"model": {"widht": 3}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "widht" in capsys.readouterr().err


def test_yaml_error_names_line(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("a: 1\nb: [1, 2\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "bad.yaml:" in capsys.readouterr().err


def test_json_error_names_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n"a": 1,\n}')
    with pytest.raises(Exception, match=r"bad.json:3"):
        load_config_file(path)


def test_overrides_nest_and_parse():
    values = apply_overrides({"model": {"patch_size": 64}}, ["model.grl.lam=0.5", "seed=3", "model.patch_size=32"])
    assert values == {"model": {"patch_size": 32, "grl": {"lam": 0.5}}, "seed": 3}
    cfg = run_config(values)
    assert cfg.model.grl.lam == 0.5 and cfg.model.patch_size == 32 and cfg.seed == 3


def test_missing_manifest_is_data_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**TINY, "data": {"manifest": str(tmp_path / "nope.csv")}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert capsys.readouterr().err.startswith("error[data]:")


def test_train_eval_gap_embed_round_trip(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out), "--set", "seed=2"]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 2 and resolved["model"]["patch_size"] == 16
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "final.ckpt"), "--out", str(tmp_path / "eval.json")]) == 0
    metrics = json.loads((tmp_path / "eval.json").read_text())
    summary = json.loads((out / "summary.json").read_text())
    assert metrics == summary["final_eval"]
    assert main(["gap", "--checkpoint", str(out / "final.ckpt"), "--split", "all",
                 "--out", str(tmp_path / "gap.json")]) == 0
    assert 0.0 <= json.loads((tmp_path / "gap.json").read_text())["accuracy"] <= 1.0
    assert main(["embed", "--checkpoint", str(out / "final.ckpt"), "--split", "all", "--set", "perplexity=3",
                 "--set", "iterations=300", "--out", str(tmp_path / "emb.csv")]) == 0
    lines = (tmp_path / "emb.csv").read_text().splitlines()
    assert lines[0] == "x,y,dataset,y_C,y_D" and len(lines) == 1 + 32


def test_suite_writes_summary(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY)
    for mode in ("dann", "baseline"):
        assert main(["suite", "--config", cfg, "--runs", "2", "--mode", mode, "--out", str(tmp_path / "s")]) == 0
    for mode in ("dann", "baseline"):
        summary = json.loads((tmp_path / "s" / f"suite_{mode}.json").read_text())
        assert summary["mode"] == mode and len(summary["target_cell_acc"]["per_run"]) == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.startswith("max relative error")


def test_gradcheck_failure_exit_code(capsys):
    assert main(["gradcheck", "--threshold", "0"]) == 5
    assert capsys.readouterr().err.startswith("error[acceptance]:")


def test_numeric_failure_exit_code(tmp_path, monkeypatch, capsys):
    import mitodann.engine as engine

    def explode(cfg, *a, **k):
        raise engine.NumericError(17, float("nan"))

    monkeypatch.setattr(engine, "train", explode)
    assert main(["train", "--config", write_cfg(tmp_path, TINY), "--out", str(tmp_path / "o")]) == 4
    assert "step 17" in capsys.readouterr().err
