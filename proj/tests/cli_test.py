"""Runs the command-line tool end to end and validates every JSON output
against the schemas in docs/schemas."""

import csv
import json
import os
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema

BIN = Path(sys.argv[1])
MAKE_CORPUS = Path(sys.argv[2])
ROOT = Path(sys.argv[3])
SCHEMAS = ROOT / "docs" / "schemas"

TINY = ["--d-model", "32", "--seq-len", "32", "--batch-size", "4", "--n-layers", "1"]


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def validate_lines(path, name):
    s = schema(name)
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
    assert rows, f"{path} is empty"
    for r in rows:
        jsonschema.validate(r, s)
    return rows


def run(*args, expect=0, env=None):
    p = subprocess.run([str(BIN), *map(str, args)], capture_output=True, text=True, env=env)
    assert p.returncode == expect, f"{args}: exit {p.returncode}\n{p.stdout}\n{p.stderr}"
    return p


def main():
    tmp = Path(tempfile.mkdtemp(prefix="mixsga_cli_"))
    corpus = tmp / "corpus.txt"
    subprocess.run([str(MAKE_CORPUS), "--out", str(corpus), "--bytes", "40000"], check=True)

    for cfg in sorted((ROOT / "configs").glob("*.json")):
        jsonschema.validate(json.loads(cfg.read_text()), schema("run_config"))

    # train: metrics lines, checkpoint, sidecar config; identical reruns
    run("train", "--corpus", corpus, "--out", tmp / "a", "--steps", "8", *TINY)
    run("train", "--corpus", corpus, "--out", tmp / "b", "--steps", "8", *TINY)
    metrics = validate_lines(tmp / "a" / "metrics.jsonl", "metrics")
    assert [m["step"] for m in metrics] == list(range(8))
    assert (tmp / "a" / "metrics.jsonl").read_bytes() == (tmp / "b" / "metrics.jsonl").read_bytes()
    jsonschema.validate(json.loads((tmp / "a" / "model.config.json").read_text()), schema("run_config"))
    run("train", "--corpus", corpus, "--out", tmp / "mha", "--steps", "8", "--routing-mode", "mha_baseline", *TINY)

    # eval: one row per checkpoint
    ckpts = [tmp / "a" / "model.ckpt", tmp / "mha" / "model.ckpt"]
    run("eval", "--checkpoint", ckpts[0], "--checkpoint", ckpts[1], "--corpus", corpus, "--out", tmp / "ev",
        "--max-windows", "4")
    rows = validate_lines(tmp / "ev" / "eval.jsonl", "eval")
    assert [r["routing_mode"] for r in rows] == ["learned", "mha_baseline"]
    assert abs(rows[0]["kv_ratio"] - 0.5) < 1e-12 and rows[1]["kv_ratio"] == 1.0
    assert rows[1]["measured_kv_ratio"] == 1.0
    run("eval", "--checkpoint", ckpts[0], "--corpus", corpus, "--out", tmp / "ev2", "--max-windows", "2",
        "--keep-ratio", "0.5")
    (row,) = validate_lines(tmp / "ev2" / "eval.jsonl", "eval")
    assert row["keep_ratio"] == 0.5 and abs(row["kv_ratio"] - 0.25) < 1e-12

    # generate
    p = run("generate", "--checkpoint", ckpts[0], "--prompt", "The ", "--tokens", "10", "--keep-ratio", "0.5",
            "--out", tmp / "gen")
    g = json.loads((tmp / "gen" / "generation.json").read_text())
    jsonschema.validate(g, schema("generation"))
    assert len(g["tokens"]) == 14 and g["tokens"][:4] == [ord(c) for c in "The "]
    assert p.stdout.startswith("The ")
    with open(tmp / "gen" / "routing_layer0.csv") as f:
        trace_rows = list(csv.DictReader(f))
    assert len(trace_rows) == 13 and all(0 <= int(r["expert_index"]) < 3 for r in trace_rows)

    # kvsim: 1000 tokens all on the third expert store a quarter of full KV
    trace = tmp / "trace.csv"
    trace.write_text("position,expert_index\n" + "".join(f"{i},2\n" for i in range(1000)))
    run("kvsim", "--trace", trace, "--experts", "3", "--out", tmp / "sim")
    sim = validate_lines(tmp / "sim" / "kvsim.jsonl", "kvsim")
    assert len(sim) == 1000 and sim[-1]["ratio"] == 0.25 and sim[-1]["live_tokens"] == 1000
    run("kvsim", "--trace", trace, "--experts", "3", "--keep-ratio", "0.2", "--out", tmp / "sim2")
    assert validate_lines(tmp / "sim2" / "kvsim.jsonl", "kvsim")[-1]["live_tokens"] == 200

    # sweep: formula KV ratios, sorted table; parallel gives the same table
    ratio_sets = "0,0,1;0.1,0.1,0.8;0.3,0.1,0.6;0.1,0.9"
    common = ["--corpus", corpus, "--steps", "4", "--max-windows", "2", "--sweep-ratios", ratio_sets, *TINY]
    run("sweep", "--out", tmp / "sw", *common)
    run("sweep", "--out", tmp / "swp", "--parallel", "2", *common)
    with open(tmp / "sw" / "sweep.csv") as f:
        table = list(csv.DictReader(f))
    assert [float(r["kv_ratio"]) for r in table] == [0.25, 0.35, 0.5, 0.55], table
    assert list(table[0].keys()) == ["config", "ppl", "kv_ratio", "measured_kv_ratio", "agreement"]
    assert (tmp / "sw" / "sweep.csv").read_text() == (tmp / "swp" / "sweep.csv").read_text()
    validate_lines(tmp / "sw" / "sweep.jsonl", "eval")

    # error exits
    p = run("train", "--corpus", corpus, "--out", tmp / "bad", "--ratios", "0.3,0.3,0.3", expect=2)
    assert "sum" in p.stderr
    run("sweep", "--corpus", corpus, "--out", tmp / "bad", "--sweep-ratios", "0,0,1;0.5,0.6", expect=2)
    run("eval", "--checkpoint", tmp / "missing.ckpt", "--corpus", corpus, expect=3)
    run("generate", "--checkpoint", tmp / "missing.ckpt", "--prompt", "x", expect=3)
    env = dict(os.environ, MIXSGA_PRECISION="f16")
    run("train", "--corpus", corpus, "--out", tmp / "bad", "--steps", "1", expect=2, env=env)
    env["MIXSGA_PRECISION"] = "f64"
    run("train", "--corpus", corpus, "--out", tmp / "f64", "--steps", "2", *TINY, env=env)
    run("eval", "--checkpoint", tmp / "f64" / "model.ckpt", "--corpus", corpus, "--out", tmp / "f64",
        "--max-windows", "1", env=env)
    print("cli ok")


if __name__ == "__main__":
    main()
