"""CLI subcommands driven through main() with tmp dirs, no subprocesses."""

import io
import json
import sys

import numpy as np
import pytest

from xbarsim.cli import main, parse_slice_list, parse_variant
from xbarsim.errors import ValidationError
from xbarsim.isa import assemble
from xbarsim.model import LayerSpec, ModelSpec


@pytest.fixture
def tiny_model_file(tmp_path):
    spec = ModelSpec([LayerSpec("dense", in_dim=12, out_dim=10,
                                activation="relu"),
                      LayerSpec("dense", in_dim=10, out_dim=6)], name="tiny")
    path = tmp_path / "tiny.json"
    path.write_text(spec.to_json())
    return str(path)


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


# ------------------------------------------------------------------ parsing

def test_parse_variant_forms():
    assert parse_variant("v1") == 1
    assert parse_variant("3") == 3
    with pytest.raises(ValidationError):
        parse_variant("v4")


def test_parse_slice_list_uniform_shorthand():
    assert parse_slice_list("uniform:3,4,5,6") == [
        "uniform:3", "uniform:4", "uniform:5", "uniform:6"]
    assert parse_slice_list("44466555,fig3f62") == ["44466555", "fig3f62"]
    assert parse_slice_list("uniform:3,44466555") == [
        "uniform:3", "44466555"]


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--model", "mlp2", "--frobnicate"])
    assert exc.value.code == 2


def test_domain_error_single_line_exit_1(capsys):
    code, out, err = run_cli(["train", "--model", "nope_model"], capsys)
    assert code == 1
    assert err.startswith("error:")
    assert err.count("\n") == 1


# ---------------------------------------------------------------- compile

def test_compile_writes_programs_and_manifest(tiny_model_file, tmp_path,
                                              capsys):
    out_dir = tmp_path / "prog"
    code, out, _ = run_cli(["compile", "--model", tiny_model_file,
                            "--algo", "minibatch:2", "--variant", "v2",
                            "-o", str(out_dir)], capsys)
    assert code == 0
    kernel = json.loads((out_dir / "kernel.json").read_text())
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["command"] == "compile"
    assert manifest["config"]["variant"] == 2
    assert manifest["config"]["model"]["layers"][0]["in"] == 12
    for core in kernel["cores"]:
        listing = (out_dir / ("core%03d.s" % core)).read_text()
        blob = (out_dir / ("core%03d.bin" % core)).read_bytes()
        prog = assemble(listing)
        assert len(prog) * 8 == len(blob)


def test_asm_disasm_identity_on_compiled_listing(tiny_model_file, tmp_path,
                                                 capsys, monkeypatch):
    out_dir = tmp_path / "prog"
    run_cli(["compile", "--model", tiny_model_file, "-o", str(out_dir)],
            capsys)
    listing = (out_dir / "core000.s").read_text()

    code, hex_words, _ = run_cli(["asm", str(out_dir / "core000.s")], capsys)
    assert code == 0
    monkeypatch.setattr(sys, "stdin", io.StringIO(hex_words))
    code, text, _ = run_cli(["disasm"], capsys)
    assert code == 0
    assert text.split() == listing.split()


def test_disasm_reads_binary(tiny_model_file, tmp_path, capsys):
    out_dir = tmp_path / "prog"
    run_cli(["compile", "--model", tiny_model_file, "-o", str(out_dir)],
            capsys)
    code, text, _ = run_cli(["disasm", str(out_dir / "core000.bin")], capsys)
    assert code == 0
    assert text.split() == (out_dir / "core000.s").read_text().split()


# -------------------------------------------------------------------- sim

def test_sim_report_sums_and_artifacts(tiny_model_file, tmp_path, capsys):
    out_dir = tmp_path / "sim"
    code, out, _ = run_cli(["sim", "--model", tiny_model_file, "--batch", "4",
                            "--baseline", "base_mvm", "--steps", "3",
                            "-o", str(out_dir)], capsys)
    assert code == 0
    doc = json.loads((out_dir / "report.json").read_text())
    assert sum(doc["energy_pj"].values()) == doc["total_energy_pj"]
    by_layer = sum(sum(c.values()) for c in doc["energy_by_layer_pj"].values())
    assert by_layer == doc["total_energy_pj"]
    assert "total_energy_pj=%d" % doc["total_energy_pj"] in out
    assert json.loads((out_dir / "manifest.json").read_text())["seed"] == 0


def test_sim_cost_override_scales_energy(tiny_model_file, tmp_path, capsys):
    cost = tmp_path / "cost.json"
    cost.write_text(json.dumps({"reram_mvm_pj": 0, "reram_mtvm_pj": 0}))
    args = ["sim", "--model", tiny_model_file, "--steps", "2"]
    _, base_out, _ = run_cli(args + ["-o", str(tmp_path / "a")], capsys)
    _, cheap_out, _ = run_cli(args + ["--cost", str(cost),
                                      "-o", str(tmp_path / "b")], capsys)
    base = json.loads((tmp_path / "a" / "report.json").read_text())
    cheap = json.loads((tmp_path / "b" / "report.json").read_text())
    assert cheap["total_energy_pj"] < base["total_energy_pj"]
    assert "mvm" not in cheap["energy_pj"] or cheap["energy_pj"]["mvm"] == 0


# ------------------------------------------------------------------ train

def test_train_artifacts_and_seed_env(tiny_model_file, tmp_path, capsys,
                                      monkeypatch):
    monkeypatch.setenv("PANTHER_SEED", "7")
    out_dir = tmp_path / "train"
    code, out, _ = run_cli(["train", "--model", tiny_model_file,
                            "--steps", "12", "-o", str(out_dir)], capsys)
    assert code == 0
    assert "final_accuracy=" in out
    doc = json.loads((out_dir / "result.json").read_text())
    assert len(doc["loss"]) == 12
    assert doc["run"]["seed"] == 7
    assert json.loads((out_dir / "manifest.json").read_text())["seed"] == 7


def test_train_oracle_backend(tiny_model_file, capsys):
    code, out, _ = run_cli(["train", "--model", tiny_model_file,
                            "--backend", "full_precision_oracle",
                            "--steps", "8"], capsys)
    assert code == 0
    assert "backend=full_precision_oracle" in out


# ------------------------------------------------------------------ sweep

def test_sweep_grid_csv(tiny_model_file, tmp_path, capsys):
    out_dir = tmp_path / "sweep"
    code, out, _ = run_cli(["sweep", "--model", tiny_model_file,
                            "--slices", "uniform:3,4", "--crs", "16,64",
                            "--steps", "6", "-o", str(out_dir)], capsys)
    assert code == 0
    lines = (out_dir / "sweep.csv").read_text().splitlines()
    assert lines[0] == ("slices,crs_period,final_accuracy,final_loss,"
                        "lsb_saturation_mean")
    assert len(lines) == 5
    cells = [tuple(l.split(",")[:2]) for l in lines[1:]]
    assert cells == [("uniform:3", "16"), ("uniform:3", "64"),
                     ("uniform:4", "16"), ("uniform:4", "64")]


def test_sweep_stdout_when_no_out(tiny_model_file, capsys):
    code, out, _ = run_cli(["sweep", "--model", tiny_model_file,
                            "--slices", "44466555", "--crs", "16",
                            "--steps", "4"], capsys)
    assert code == 0
    assert out.splitlines()[0].startswith("slices,")
    assert len(out.splitlines()) == 2


# ----------------------------------------------------------------- report

def test_report_energy_rows_sum(tiny_model_file, tmp_path, capsys):
    run_cli(["sim", "--model", tiny_model_file, "--steps", "2",
             "-o", str(tmp_path / "sim")], capsys)
    code, out, _ = run_cli(["report", str(tmp_path / "sim" / "report.json")],
                           capsys)
    assert code == 0
    rows = out.splitlines()
    assert rows[0] == "layer,category,energy_pj"
    total = sum(int(r.rsplit(",", 1)[1]) for r in rows[1:])
    doc = json.loads((tmp_path / "sim" / "report.json").read_text())
    assert total == doc["total_energy_pj"]


def test_report_curve_branch(tiny_model_file, tmp_path, capsys):
    run_cli(["train", "--model", tiny_model_file, "--steps", "5",
             "--backend", "full_precision_oracle",
             "-o", str(tmp_path / "train")], capsys)
    code, out, _ = run_cli(["report",
                            str(tmp_path / "train" / "result.json")], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "step,loss,lsb_saturation"
    assert len(lines) == 6


def test_report_rejects_shapeless_json(tmp_path, capsys):
    path = tmp_path / "x.json"
    path.write_text("{}")
    code, _, err = run_cli(["report", str(path)], capsys)
    assert code == 1 and "error:" in err


# ----------------------------------------------------- manifest reproducibility

def test_sweep_rerun_is_byte_identical(tiny_model_file, tmp_path, capsys):
    args = ["sweep", "--model", tiny_model_file, "--slices", "uniform:4",
            "--crs", "8", "--steps", "4"]
    _, first, _ = run_cli(args + ["-o", str(tmp_path / "a")], capsys)
    _, second, _ = run_cli(args + ["-o", str(tmp_path / "b")], capsys)
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == \
           (tmp_path / "b" / "sweep.csv").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
           (tmp_path / "b" / "manifest.json").read_bytes()
