import json
import os

import numpy as np
import pytest

from tswitch.algo.binarize import decode_tsw
from tswitch.algo.merge import apply_switch
from tswitch.models import ModelSpec, ToyMLP
from tswitch.scripts.tsw import main
from tswitch.utils.dataset import Split
from tswitch.utils.errors import InvariantError
from tswitch.utils.tensorstore import NamedTensorSet, load_ntc, save_ntc

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "inspect_schema.json")


def schema(obj):
    """
    Key / type skeleton of a JSON value.
    """
    if isinstance(obj, dict):
        return {k: schema(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [schema(obj[0])] if obj else []
    return type(obj).__name__


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--json")
    assert code == 0, err
    return json.loads(out)


@pytest.fixture
def ws(tmp_path):
    """
    Base MLP, two fine-tuned copies, per-task example files and a labeled test split.
    """
    rng = np.random.default_rng(0)
    spec = ModelSpec(d_in=4, d_out=3, hidden=[5])
    base = ToyMLP(spec, seed=0).to_tensor_set(meta={"model_id": "base"})
    save_ntc(base, str(tmp_path / "base.ntc"))
    for i in range(2):
        ft = NamedTensorSet(
            [(n, base[n] + (0.1 * rng.standard_normal(base[n].shape)).astype(np.float32)) for n in base],
            meta={"task_id": i},
        )
        save_ntc(ft, str(tmp_path / "ft{}.ntc".format(i)))
        x = rng.standard_normal((8, 4)) + 3.0 * i
        save_ntc(Split(x=x).to_tensor_set(), str(tmp_path / "examples" / "task_{:02d}.ntc".format(i)))
    save_ntc(Split(x=rng.standard_normal((6, 4))).to_tensor_set(), str(tmp_path / "inputs.ntc"))
    save_ntc(
        Split(x=rng.standard_normal((12, 4)), y=rng.integers(0, 3, size=12)).to_tensor_set(),
        str(tmp_path / "test.ntc"),
    )
    return tmp_path


def test_missing_file_is_data_error(capsys, tmp_path):
    code, out, err = run(capsys, "inspect", tmp_path / "missing.tsw")
    assert code == 2
    assert "no such file" in err
    assert out == ""


def test_alpha_out_of_range_is_user_error(capsys, tmp_path):
    code, _, err = run(capsys, "binarize", "-i", tmp_path / "tau.ntc", "--alpha", 1.5, "-o", tmp_path / "s.tsw")
    assert code == 1
    assert not os.path.exists(str(tmp_path / "s.tsw"))


def test_bad_flags_and_help(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "merge", "--method", "ties", "a.ntc", "--base", "b", "-o", "c")[0] == 1
    assert run(capsys, "--help")[0] == 0


def test_json_error_object(capsys, tmp_path):
    garbage = tmp_path / "garbage.bin"
    garbage.write_bytes(b"XXXX1234")
    code, out, _ = run(capsys, "inspect", garbage, "--json")
    assert code == 2
    assert json.loads(out) == {
        "code": "UNKNOWN_MAGIC",
        "error": "unrecognized file format (magic b'XXXX')",
        "exit_code": 2,
    }


def test_pipeline(capsys, ws):
    base = load_ntc(str(ws / "base.ntc"))
    for i in range(2):
        res = run_json(capsys, "extract", "--base", ws / "base.ntc", "--finetuned", ws / "ft{}.ntc".format(i),
                       "-o", ws / "tau{}.ntc".format(i))
        assert res["fingerprint"] == base.fingerprint().hex
        res = run_json(capsys, "binarize", "-i", ws / "tau{}.ntc".format(i), "--alpha", 0.5,
                       "-o", ws / "s{}.tsw".format(i))
        assert res["storage"]["n_params"] == base.numel
        assert res["task_id"] == str(i)

    # T-Switch matches the library call
    assert run(capsys, "apply", "--base", ws / "base.ntc", "--switch", ws / "s0.tsw", "-o", ws / "m0.ntc")[0] == 0
    expected = apply_switch(base, decode_tsw(str(ws / "s0.tsw")))
    assert load_ntc(str(ws / "m0.ntc")).bit_equal(expected)
    # one-hot weights reproduce it exactly
    code = run(capsys, "apply", "--base", ws / "base.ntc", "--switch", ws / "s0.tsw", "--switch", ws / "s1.tsw",
               "-w", "1,0", "-o", ws / "m0w.ntc")[0]
    assert code == 0
    assert load_ntc(str(ws / "m0w.ntc")).bit_equal(expected)
    code = run(capsys, "apply", "--base", ws / "base.ntc", "--switch", ws / "s0.tsw", "--switch", ws / "s1.tsw",
               "-w", "0.9,0.9", "-o", ws / "bad.ntc")[0]
    assert code == 1

    res = run_json(capsys, "merge", ws / "tau0.ntc", ws / "tau1.ntc", "--method", "direct", "--base", ws / "base.ntc",
                   "-o", ws / "backbone.ntc")
    assert res["scale"] >= 1.0
    assert run(capsys, "merge", ws / "tau0.ntc", "--method", "arith", "--base", ws / "base.ntc", "-o", ws / "x.ntc")[0] == 1

    res = run_json(capsys, "discard", "-i", ws / "tau0.ntc", "--alpha", 0.5, "-o", ws / "d0.ntc", "--per-tensor")
    assert len(res["units"]) == len(base)

    res = run_json(capsys, "route", "build", "--backbone", ws / "backbone.ntc", "--examples", ws / "examples",
                   "-n", 5, "-o", ws / "q.tqi")
    assert res["rows"] == 10
    assert res["K"] == 2
    assert res["d"] == 5
    assert run_json(capsys, "inspect", ws / "q.tqi")["format"] == "tqi"

    res = run_json(capsys, "route", "apply", "--base", ws / "base.ntc", "--switches", ws / "s0.tsw", ws / "s1.tsw",
                   "--index", ws / "q.tqi", "-C", 3, "--inputs", ws / "inputs.ntc", "--backbone", ws / "backbone.ntc",
                   "-o", ws / "routed")
    assert res["n_inputs"] == 6
    assert all(sum(counts) == 3 for counts in res["routes"])
    with open(str(ws / "routed" / "routes.json")) as f:
        routes = json.load(f)
    assert len(routes) == 6
    assert len({r["file"] for r in routes}) == res["distinct_merges"]
    for r in routes:
        assert os.path.exists(str(ws / "routed" / r["file"]))
    assert sorted(os.listdir(str(ws / "routed"))) == sorted({r["file"] for r in routes} | {"routes.json"})

    res = run_json(capsys, "bench", "eval", "--params", ws / "base.ntc", "--data", ws / "test.ntc")
    assert 0.0 <= res["accuracy"] <= 1.0
    assert res["n"] == 12
    assert run(capsys, "bench", "eval", "--params", ws / "base.ntc", "--data", ws / "inputs.ntc")[0] == 1


def test_inspect_json_schema_is_stable(capsys, ws):
    run(capsys, "extract", "--base", ws / "base.ntc", "--finetuned", ws / "ft0.ntc", "-o", ws / "tau0.ntc")
    run(capsys, "binarize", "-i", ws / "tau0.ntc", "--alpha", 0.3, "-o", ws / "s0.tsw")
    code, first, _ = run(capsys, "inspect", ws / "s0.tsw", "--json")
    assert code == 0
    _, second, _ = run(capsys, "inspect", ws / "s0.tsw", "--json")
    assert first == second
    with open(GOLDEN) as f:
        golden = json.load(f)
    assert schema(json.loads(first)) == golden

    res = run_json(capsys, "inspect", ws / "tau0.ntc")
    assert res["format"] == "ntc"
    assert res["meta"]["kind"] == "task_vector"


def test_corrupt_switch_reports_code(capsys, ws):
    run(capsys, "extract", "--base", ws / "base.ntc", "--finetuned", ws / "ft0.ntc", "-o", ws / "tau0.ntc")
    run(capsys, "binarize", "-i", ws / "tau0.ntc", "--alpha", 0.5, "-o", ws / "s0.tsw")
    payload = (ws / "s0.tsw").read_bytes()
    (ws / "cut.tsw").write_bytes(payload[:40])
    code, out, _ = run(capsys, "inspect", ws / "cut.tsw", "--json")
    assert code == 2
    assert json.loads(out)["code"] == "TSW_TRUNCATED"


def test_switch_for_other_base_is_rejected(capsys, ws):
    run(capsys, "extract", "--base", ws / "base.ntc", "--finetuned", ws / "ft0.ntc", "-o", ws / "tau0.ntc")
    run(capsys, "binarize", "-i", ws / "tau0.ntc", "--alpha", 0.5, "-o", ws / "s0.tsw")
    other = ToyMLP(ModelSpec(d_in=4, d_out=3, hidden=[6]), seed=0).to_tensor_set()
    save_ntc(other, str(ws / "other.ntc"))
    code, _, err = run(capsys, "apply", "--base", ws / "other.ntc", "--switch", ws / "s0.tsw", "-o", ws / "m.ntc")
    assert code == 1
    assert "base" in err


def test_bench_commands(capsys, tmp_path, tiny_config):
    cfg = tiny_config.to_dict()
    cfg["bench"]["N_grid"] = []
    cfg_path = tmp_path / "merge.json"
    cfg_path.write_text(json.dumps(cfg))

    res = run_json(capsys, "bench", "merge", "--config", cfg_path, "-o", tmp_path / "out" / "report.csv")
    assert res["rows"] > 0
    assert res["plot"] is None
    assert os.path.exists(str(tmp_path / "out" / "report.csv"))
    assert any(e["method"] == "auto_switch" for e in res["summary"])

    res = run_json(capsys, "bench", "suite", "--config", cfg_path, "-o", tmp_path / "suite")
    assert res["K"] == 3
    res = run_json(capsys, "bench", "eval", "--params", tmp_path / "suite" / "finetuned" / "task_00.ntc",
                   "--data", tmp_path / "suite" / "test" / "task_00.ntc")
    assert res["n"] == 30

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"suite": {"bogus": 1}}))
    assert run(capsys, "bench", "merge", "--config", bad, "-o", tmp_path / "r.csv")[0] == 1
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"bench_name": "controlled"}))
    assert run(capsys, "bench", "merge", "--config", wrong, "-o", tmp_path / "r.csv")[0] == 1


def run_pipeline(capsys, ws, out, cfg_path):
    out.mkdir()
    for i in range(2):
        assert run(capsys, "extract", "--base", ws / "base.ntc", "--finetuned", ws / "ft{}.ntc".format(i),
                   "-o", out / "tau{}.ntc".format(i))[0] == 0
        assert run(capsys, "binarize", "-i", out / "tau{}.ntc".format(i), "--alpha", 0.5,
                   "-o", out / "s{}.tsw".format(i))[0] == 0
    assert run(capsys, "apply", "--base", ws / "base.ntc", "--switch", out / "s0.tsw", "-o", out / "m0.ntc")[0] == 0
    assert run(capsys, "merge", out / "tau0.ntc", out / "tau1.ntc", "--method", "direct", "--base", ws / "base.ntc",
               "-o", out / "backbone.ntc")[0] == 0
    assert run(capsys, "route", "build", "--backbone", out / "backbone.ntc", "--examples", ws / "examples",
               "-n", 5, "-o", out / "q.tqi")[0] == 0
    assert run(capsys, "route", "apply", "--base", ws / "base.ntc", "--switches", out / "s0.tsw", out / "s1.tsw",
               "--index", out / "q.tqi", "-C", 3, "--inputs", ws / "inputs.ntc", "--backbone", out / "backbone.ntc",
               "-o", out / "routed")[0] == 0
    assert run(capsys, "bench", "merge", "--config", cfg_path, "-o", out / "bench" / "report.csv")[0] == 0
    files = {}
    for root, _, names in os.walk(str(out)):
        for name in names:
            path = os.path.join(root, name)
            files[os.path.relpath(path, str(out))] = open(path, "rb").read()
    return files


def test_pipeline_rerun_is_byte_identical(capsys, ws, tiny_config):
    cfg = tiny_config.to_dict()
    cfg["bench"]["N_grid"] = []
    cfg_path = ws / "merge.json"
    cfg_path.write_text(json.dumps(cfg))
    first = run_pipeline(capsys, ws, ws / "run_a", cfg_path)
    second = run_pipeline(capsys, ws, ws / "run_b", cfg_path)
    assert "bench/report.csv" in first
    assert "routed/routes.json" in first
    assert sorted(first) == sorted(second)
    for name in first:
        assert first[name] == second[name], name


def test_route_apply_failure_leaves_no_outputs(capsys, ws, monkeypatch):
    import tswitch.scripts.tsw as tsw

    for i in range(2):
        run(capsys, "extract", "--base", ws / "base.ntc", "--finetuned", ws / "ft{}.ntc".format(i), "-o", ws / "tau{}.ntc".format(i))
        run(capsys, "binarize", "-i", ws / "tau{}.ntc".format(i), "--alpha", 0.5, "-o", ws / "s{}.tsw".format(i))
    run(capsys, "route", "build", "--backbone", ws / "base.ntc", "--examples", ws / "examples", "-n", 5, "-o", ws / "q.tqi")

    def failing_write(path, text):
        raise InvariantError("disk full")

    # the merged files are written, the routing table is not
    monkeypatch.setattr(tsw, "write_text_atomic", failing_write)
    code, _, _ = run(capsys, "route", "apply", "--base", ws / "base.ntc", "--switches", ws / "s0.tsw", ws / "s1.tsw",
                     "--index", ws / "q.tqi", "-C", 3, "--inputs", ws / "inputs.ntc", "--backbone", ws / "base.ntc",
                     "-o", ws / "routed")
    assert code == 3
    assert os.listdir(str(ws / "routed")) == []


def test_bench_failure_leaves_no_outputs(capsys, tmp_path, tiny_config, monkeypatch):
    import tswitch.scripts.tsw as tsw

    cfg = tiny_config.to_dict()
    cfg["bench"]["N_grid"] = []
    cfg["experiment"]["logging"]["plot"] = True
    cfg["experiment"]["logging"]["terminal_output_to_txt"] = True
    cfg_path = tmp_path / "merge.json"
    cfg_path.write_text(json.dumps(cfg))

    def failing_plot(report, path):
        raise InvariantError("plot backend crashed")

    monkeypatch.setattr(tsw, "plot_report", failing_plot)
    code, _, _ = run(capsys, "bench", "merge", "--config", cfg_path, "-o", tmp_path / "out" / "report.csv")
    assert code == 3
    assert os.listdir(str(tmp_path / "out")) == []
