import csv
import io
import json

import numpy as np
import pytest

from corrnoise.cli import alpha_path, apply_overrides, main, report_digest
from corrnoise.emb import CoalescedNoiseStore
from corrnoise.errors import ValidationError
from corrnoise.mixing import load_matrix
from corrnoise.trace import ingest_trace_file


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def toy_file(tmp_path):
    p = tmp_path / "toy.txt"
    p.write_text("# num_entries=3\n0:1\n1:2\n2:1\n3:0,2\n")
    return str(p)


def precompute_cfg(tmp_path, trace, **extra):
    doc = {"seed": 3, "noise": {"d_emb": 4, "band": 2}, "mixing": {"kind": "random"},
           "trace": trace, "split": {"threshold": "inf"},
           "output": {"store": str(tmp_path / "s.cns"), "stats": str(tmp_path / "s.json")}}
    doc.update(extra)
    return doc


def test_gen_trace_is_reproducible(tmp_path):
    cfg = write(tmp_path / "c.json", {"seed": 5, "trace": {"num_entries": 50, "iterations": 10,
                                                             "batch_size": 8, "zipf_alpha": 1.2},
                                      "output": str(tmp_path / "a.txt")})
    assert main(["gen-trace", cfg]) == 0
    assert main(["gen-trace", cfg, "--set", f"output={tmp_path / 'b.txt'}"]) == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert ingest_trace_file(tmp_path / "a.txt").num_entries == 50


def test_gen_trace_infeasible(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"trace": {"num_entries": 1000, "iterations": 2,
                                                "batch_size": 4}, "output": str(tmp_path / "t.txt")})
    assert main(["gen-trace", cfg]) == 1
    assert "num_entries" in capsys.readouterr().err
    assert not (tmp_path / "t.txt").exists()


def test_gen_trace_alpha_sweep(tmp_path):
    cfg = write(tmp_path / "c.json", {"trace": {"num_entries": 20, "iterations": 5, "batch_size": 4,
                                                "zipf_alphas": [0.5, 1.5]},
                                      "output": str(tmp_path / "t.txt.gz")})
    assert main(["gen-trace", cfg]) == 0
    assert (tmp_path / "t_alpha0.5.txt.gz").exists() and (tmp_path / "t_alpha1.5.txt.gz").exists()
    assert alpha_path("x_{alpha}.txt", 2.0).name == "x_2.txt"


def test_precompute_toy_stats(tmp_path, toy_file):
    cfg = write(tmp_path / "c.json", precompute_cfg(tmp_path, {"path": toy_file}))
    assert main(["precompute", cfg]) == 0
    stats = json.loads((tmp_path / "s.json").read_text())["measured"]
    assert stats["nnz"] == 7 and stats["avg_noise_entries"] == 1.75
    assert stats["payload_bytes"] == 1.75 * 4 * 4 * 8
    assert stats["file_bytes"] == (tmp_path / "s.cns").stat().st_size
    store = CoalescedNoiseStore.load(tmp_path / "s.cns")
    assert store.nnz == 7 and store.d_emb == 4


def test_precompute_tiling_changes_nothing(tmp_path):
    trace = {"num_entries": 40, "iterations": 12, "batch_size": 6, "zipf_alpha": 1.1}
    hashes = []
    for i, tiles in enumerate([{}, {"parts": 3}, {"tile_entries": 1}, {"budget_bytes": 2000}]):
        doc = precompute_cfg(tmp_path, trace, tiles=tiles)
        doc["output"]["stats"] = str(tmp_path / f"s{i}.json")
        assert main(["precompute", write(tmp_path / "c.json", doc)]) == 0
        hashes.append(json.loads((tmp_path / f"s{i}.json").read_text())["measured"]["store_sha256"])
    assert len(set(hashes)) == 1


def test_precompute_all_hot_warns(tmp_path, toy_file, caplog):
    doc = precompute_cfg(tmp_path, {"path": toy_file}, split={"threshold": 0})
    with caplog.at_level("WARNING", logger="corrnoise"):
        assert main(["precompute", write(tmp_path / "c.json", doc)]) == 0
    assert "hot" in caplog.text
    assert json.loads((tmp_path / "s.json").read_text())["measured"]["nnz"] == 0


def test_verify_passes_and_negative_control_fails(tmp_path, capsys):
    assert main(["verify", "--set", "seed=4"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "FAIL" not in out
    cfg = write(tmp_path / "v.json", {"suites": ["eager_lazy"], "corrupt_store": True,
                                      "output": str(tmp_path / "r.json")})
    assert main(["verify", cfg]) == 2
    assert "FAIL eager_lazy" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["measured"]["ok"] is False


def test_simulate_csv_and_json(tmp_path):
    cfg = write(tmp_path / "c.json", {"profile": "llm", "sweep": {"param": "band", "values": [8, 128]},
                                      "output": {"csv": str(tmp_path / "o.csv"),
                                                 "json": str(tmp_path / "o.json")}})
    assert main(["simulate", cfg]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o.csv").read_text())))
    assert all(float(r["ratio_vs_dpsgd"]) == 1.0 for r in rows if r["strategy"] == "dp-sgd")
    strategies = {b: {r["strategy"] for r in rows if r["b_hat"] == b} for b in ("8", "128")}
    assert "nmp" not in strategies["8"] and "nmp" in strategies["128"]
    doc = json.loads((tmp_path / "o.json").read_text())
    assert len(doc["modeled"]["points"]) == 2


def test_simulate_crossover_on_stdout(capsys):
    assert main(["simulate", "--set", "cost_model.band=2"]) == 0
    small = {r["strategy"]: float(r["total_s"]) for r in csv.DictReader(io.StringIO(capsys.readouterr().out))}
    assert main(["simulate", "--set", "cost_model.band=64"]) == 0
    large = {r["strategy"]: float(r["total_s"]) for r in csv.DictReader(io.StringIO(capsys.readouterr().out))}
    assert small["gpu-gemv"] < small["cpu-gemv"]
    assert large["cpu-gemv"] < large["gpu-gemv"]
    assert large["coalesced-emb"] < large["cpu-gemv"]


def test_train_toy_both_modes(tmp_path, capsys):
    doc = {"seed": 1, "noise": {"d_emb": 3, "band": 4}, "mixing": {"kind": "random"},
           "trace": {"num_entries": 30, "iterations": 10, "batch_size": 5},
           "split": {"threshold": 3}, "output": {"report": str(tmp_path / "r.json"),
                                                 "table_prefix": str(tmp_path / "tab_")}}
    assert main(["train-toy", write(tmp_path / "c.json", doc)]) == 0
    assert "PASS" in capsys.readouterr().out
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["measured"]["diff"]["ok"] and "timings" in rep["metadata"]
    assert (tmp_path / "tab_eager.cnt").exists() and (tmp_path / "tab_lazy.cnt").exists()


def test_train_toy_eager_only_needs_no_store(tmp_path, capsys):
    doc = {"mode": "eager", "noise": {"d_emb": 2, "band": 1}, "mixing": {"kind": "identity"},
           "trace": {"num_entries": 10, "iterations": 5, "batch_size": 2}}
    assert main(["train-toy", write(tmp_path / "c.json", doc)]) == 0
    assert "eager vs lazy" not in capsys.readouterr().out


def test_train_toy_refuses_foreign_store(tmp_path, toy_file, capsys):
    assert main(["precompute", write(tmp_path / "p.json", precompute_cfg(tmp_path, {"path": toy_file}))]) == 0
    doc = {"seed": 99, "noise": {"d_emb": 4, "band": 2}, "mixing": {"kind": "random"},
           "trace": {"path": toy_file}, "split": {"threshold": "inf"}, "store": str(tmp_path / "s.cns")}
    assert main(["train-toy", write(tmp_path / "c.json", doc)]) == 1
    assert "different" in capsys.readouterr().err
    doc["seed"] = 3
    assert main(["train-toy", write(tmp_path / "c.json", doc)]) == 0


def test_gen_mixing_round_trip(tmp_path):
    cfg = write(tmp_path / "c.json", {"n": 6, "band": 3, "mixing": {"kind": "toeplitz", "coeffs": [1, 0.5, 0.25]},
                                      "output": str(tmp_path / "m.json")})
    assert main(["gen-mixing", cfg]) == 0
    C = load_matrix(tmp_path / "m.json")
    assert C.n == 6 and C.band == 3
    assert np.allclose(C.dense()[5, 3:], [0.25, 0.5, 1])
    assert main(["gen-mixing", cfg, "--set", "band=2"]) == 1


@pytest.mark.parametrize("argv", [["verify", "--set", "colour=1"],
                                  ["simulate", "--set", "profile=nope"],
                                  ["verify", "--set", "size=3"],
                                  ["gen-trace"]])
def test_invalid_configs_exit_1(argv):
    assert main(argv) == 1


def test_exit_codes_for_io(tmp_path):
    assert main(["verify", str(tmp_path / "missing.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["verify", str(bad)]) == 1


def test_report_digest_ignores_metadata(tmp_path):
    digests = []
    for i in range(2):
        out = tmp_path / f"r{i}.json"
        assert main(["verify", "--set", "suites=[\"regen_oracle\"]", "--set", f"output={out}"]) == 0
        doc = json.loads(out.read_text())
        assert doc["metadata"]["backend"] in ("numba", "numpy")
        doc.pop("config_digest")  # output path differs between the two runs
        digests.append(report_digest(doc))
    assert digests[0] == digests[1]


def test_apply_overrides():
    doc = apply_overrides({"a": {"b": 1}}, ["a.b=2.5", "a.c=x", "d.e=[1,2]"])
    assert doc == {"a": {"b": 2.5, "c": "x"}, "d": {"e": [1, 2]}}
    with pytest.raises(ValidationError):
        apply_overrides({"a": {"b": 1}}, ["a=3"])
    with pytest.raises(ValidationError):
        apply_overrides({}, ["novalue"])
