import copy
import io
import json

import numpy as np
import pytest

from supertile import golden
from supertile.cli import cmd_verify, main, verify_model
from supertile.fixedpoint import QFormat, QTensor
from supertile.hwconfig import HwConfig
from supertile.mapper import calibration_input

from conftest import fixture_path, load_fixture


def compile_to(tmp_path, name="hcnet_block.yaml"):
    out = tmp_path / "plan"
    assert main(["compile", "--model", fixture_path(name), "--out", str(out)]) == 0
    return out


def test_compile_writes_plan(tmp_path, capsys):
    out = compile_to(tmp_path)
    text = capsys.readouterr().out
    assert "no hw config given" in text and "compiled hcnet_block" in text
    assert {p.name for p in out.iterdir()} >= {"model.yaml", "hw.cfg", "plan.txt"}
    assert "fu=4" in (out / "plan.txt").read_text()


def test_compile_emits_ucmd_binaries(tmp_path):
    out = compile_to(tmp_path, "mobilenet_pair.yaml")
    blobs = list((out / "ucmds").glob("*.bin"))
    assert blobs and all(b.stat().st_size % 29 == 0 for b in blobs)


def test_run_report_round_trip(tmp_path, capsys):
    out = compile_to(tmp_path)
    rep = tmp_path / "r.txt"
    y = tmp_path / "y.t"
    assert main(["run", "--plan", str(out), "--seed", "3", "--report", str(rep), "--output", str(y)]) == 0
    d = json.loads(rep.with_suffix(".json").read_text())
    assert d["schema"] == "supertile.run_report/1"
    assert golden.read_tensor(y).shape == (1, 64, 12, 12)
    capsys.readouterr()
    assert main(["report", "--in", str(rep.with_suffix(".json"))]) == 0
    assert "GOP/s" in capsys.readouterr().out
    assert main(["report", "--in", str(rep.with_suffix(".json")), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out) == d


def test_run_with_input_file(tmp_path):
    g = load_fixture("hcnet_block.yaml")
    out = compile_to(tmp_path)
    x = tmp_path / "x.t"
    golden.write_tensor(x, calibration_input(g, 9))
    assert main(["run", "--plan", str(out), "--input", str(x)]) == 0


def test_malformed_tensor_is_input_error(tmp_path, capsys):
    out = compile_to(tmp_path)
    bad = tmp_path / "bad.t"
    bad.write_bytes(b"garbage")
    assert main(["run", "--plan", str(out), "--input", str(bad)]) == 7
    wrong = tmp_path / "wrong.t"
    golden.write_tensor(wrong, QTensor(np.zeros((1, 3, 4, 4), dtype=np.int16), QFormat(8)))
    assert main(["run", "--plan", str(out), "--input", str(wrong)]) == 7
    assert "input shape" in capsys.readouterr().err
    assert main(["run", "--plan", str(tmp_path), "--seed", "1"]) == 7


def test_usage_and_parse_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    broken = tmp_path / "m.yaml"
    broken.write_text("input: {id: x, shape: [1, 3, 8, 8]\n")
    assert main(["verify", "--model", str(broken)]) == 3


def test_lrn_is_lowering_error(tmp_path, capsys):
    assert main(["compile", "--model", fixture_path("lrn.yaml"), "--out", str(tmp_path / "p")]) == 4
    assert "lrn" in capsys.readouterr().err


def test_verify_passes_every_layer():
    buf = io.StringIO()
    assert cmd_verify(fixture_path("hcnet_block.yaml"), seed=2, stdout=buf) == 0
    lines = buf.getvalue().splitlines()
    assert lines[-1] == "7/7 layers pass"
    assert any("fused, checked at chain tail" in ln for ln in lines)


def corrupted(g, node):
    bad = copy.deepcopy(g)
    w = bad.weights[node]
    data = w.data.copy()
    data.flat[0] ^= 0x4000
    bad.weights[node] = QTensor(data, w.qformat)
    return bad


def test_negative_control_fails_at_first_layer():
    g = load_fixture("mobilenet_pair.yaml")
    res = verify_model(g, HwConfig(), seed=1, engine_graph=corrupted(g, "dw"))
    assert not res[0].ok and res[0].node == "dw"
    assert "first mismatch at (n, c, y, x) = (0, 0," in res[0].note


def test_negative_control_inside_a_fused_chain():
    g = load_fixture("hcnet_block.yaml")
    res = verify_model(g, HwConfig(), seed=1, engine_graph=corrupted(g, "expand"))
    # expand is folded into relu_a, so the first materialized tensor carries the error
    assert res[0].ok and "fused" in res[0].note
    assert not res[1].ok and res[1].node == "relu_a"
