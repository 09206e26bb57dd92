import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from vertievo.cli import main

from oracles import DISTRACTORS, PLANTED, VOCAB, seed_prompts

GA_SMALL = {"pop_size": 12, "generations": 5}


def scenario_config(seed, weather):
    doc = {
        "horizon": 900,
        "seed": seed,
        "classes": [
            {"class_id": 1, "rate": 0.02, "pad_count": 2, "separation": 5},
            {"class_id": 2, "rate": 0.01, "pad_count": 1, "separation": 5},
        ],
    }
    if weather:
        doc["weather"] = [{"start": 300, "end": 600, "weight_multiplier": 1.5, "separation_multiplier": 2.0, "label": "storm"}]
    return doc


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def assert_rerun_identical(out):
    again = out.parent / (out.name + "-rerun")
    assert run("rerun", "--manifest", out / "manifest.json", "--out", again) == 0
    assert snapshot(out) == snapshot(again)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scen = root / "scenarios"
    scen.mkdir()
    for i in range(3):
        cfg = write(root / f"cfg{i}.json", scenario_config(10 + i, weather=i != 1))
        assert run("generate", "--config", cfg, "--out", root / f"gen{i}") == 0
        (scen / f"s{i}.json").write_bytes((root / f"gen{i}" / "scenario.json").read_bytes())
    task = dict(planted=sorted(PLANTED), distractors=sorted(DISTRACTORS), vocabulary=list(VOCAB), seed_prompts=[p.text for p in seed_prompts(0)])
    write(root / "task.json", task)
    write(root / "ga.json", GA_SMALL)
    write(root / "outer.json", {"pop_size": 6, "generations": 3})
    write(root / "prompt.json", {"ga": {"generations": 8}})
    return root


def test_generate_and_rerun(workspace):
    out = workspace / "gen0"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "generate" and "--out" not in manifest["argv"]
    assert set(manifest["outputs"]) == {"scenario.json"}
    assert_rerun_identical(out)


def test_generate_reference_default(tmp_path):
    assert run("generate", "--out", tmp_path / "a") == 0
    doc = json.loads((tmp_path / "a" / "scenario.json").read_text())
    assert len(doc["requests"]) > 400
    assert run("generate", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "scenario.json").read_bytes() == (tmp_path / "b" / "scenario.json").read_bytes()


def test_schedule_rr(workspace):
    out = workspace / "rr"
    assert run("schedule", "--algo", "rr", "--scenario", workspace / "scenarios" / "s0.json", "--out", out) == 0
    rows = read_csv(out / "schedule.csv")
    assert rows[0] == ["request_id", "class_id", "release_time", "start", "pad", "wait"]
    assert all(int(r[5]) >= 0 for r in rows[1:])
    assert_rerun_identical(out)


def test_schedule_ga_with_registry(workspace):
    out = workspace / "ga"
    reg = workspace / "reg-ga"
    argv = ["schedule", "--algo", "ga", "--variant", "v4", "--params", workspace / "ga.json", "--seed", 3]
    assert run(*argv, "--registry", reg, "--prompt-text", "fair queue", "--out", out) == 0
    assert json.loads((out / "triplet.json").read_text())["id"] == "T000001"
    assert_rerun_identical(out)
    # the rerun found the stored triplet instead of appending a second copy
    assert len((reg / "triplets.jsonl").read_text().splitlines()) == 1


def test_compare(workspace):
    out = workspace / "cmp"
    assert run("compare", "--variant", "v1", "v5", "--params", workspace / "ga.json", "--scenario", workspace / "scenarios" / "s2.json", "--out", out) == 0
    header = read_csv(out / "comparison.csv")[0]
    assert header == ["metric", "RR", "v1", "v5"]
    assert_rerun_identical(out)
    plot = workspace / "plot"
    assert run("plot", "--input", out / "comparison.json", "--out", plot) == 0
    assert (plot / "plot.dat").read_text().startswith("# metric RR v1 v5\n")
    assert_rerun_identical(plot)


def test_bilevel(workspace):
    out = workspace / "bilevel"
    assert run("bilevel", "--scenarios", workspace / "scenarios", "--params", workspace / "outer.json", "--seed", 1, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    names = report["split"]
    assert sorted(names["train"] + names["validation"] + names["test"]) == ["s0", "s1", "s2"]
    panels = read_csv(out / "panels.csv")
    keys = [(r[0], r[1]) for r in panels[1:]]
    assert len(keys) == len(set(keys)) and keys
    trace = read_csv(out / "outer_trace.csv")
    assert len(trace) == 1 + 4
    assert_rerun_identical(out)


def test_bilevel_too_few_scenarios(workspace, tmp_path):
    d = tmp_path / "two"
    d.mkdir()
    for i in range(2):
        (d / f"s{i}.json").write_bytes((workspace / "scenarios" / f"s{i}.json").read_bytes())
    assert run("bilevel", "--scenarios", d, "--out", tmp_path / "o") == 2


def test_prompt_evolve(workspace):
    out = workspace / "pe"
    reg = workspace / "reg-pe"
    assert run("prompt-evolve", "--task", workspace / "task.json", "--params", workspace / "prompt.json", "--registry", reg, "--out", out) == 0
    trace = read_csv(out / "trace.csv")
    assert trace[0] == ["generation", "best", "mean", "ku_size", "ki_size"] and len(trace) == 1 + 9
    result = json.loads((out / "result.json").read_text())
    assert set(result["ku"]).isdisjoint(result["ki"])
    assert_rerun_identical(out)


def test_registry_commands(workspace, tmp_path):
    reg = tmp_path / "reg"
    out = tmp_path / "list-empty"
    assert run("registry", "list", "--registry", reg, "--out", out) == 0
    assert read_csv(out / "registry_list.csv") == [["id", "kind", "user", "domain", "score", "text"]]

    sig = Path(__file__).parent / "data" / "signature_example.txt"
    assert run("registry", "ingest", "--registry", reg, "--file", sig, "--out", tmp_path / "ingest") == 0
    assert json.loads((tmp_path / "ingest" / "ingested.json").read_text())["id"] == "S000001"
    assert_rerun_identical(tmp_path / "ingest")

    for i, text in enumerate(["fair queue", "storm route", "pads limit"]):
        argv = ["schedule", "--algo", "ga", "--params", workspace / "ga.json", "--seed", i, "--scenario", workspace / "scenarios" / "s1.json"]
        assert run(*argv, "--registry", reg, "--prompt-text", text, "--out", tmp_path / f"s{i}") == 0

    q = tmp_path / "query"
    assert run("registry", "query", "--registry", reg, "--like", "T000002", "-k", 2, "--out", q) == 0
    rows = read_csv(q / "query.csv")
    assert rows[1][:2] == ["1", "T000002"] and float(rows[1][2]) == pytest.approx(1.0)
    assert_rerun_identical(q)

    d = tmp_path / "distill"
    assert run("registry", "distill", "--registry", reg, "--top-k", 1, "--minimize", "--out", d) == 0
    pats = json.loads((d / "patterns.json").read_text())
    assert len(pats["uav-takeoff-scheduling"]["records"]) == 1
    assert_rerun_identical(d)

    lst = tmp_path / "list"
    assert run("registry", "list", "--registry", reg, "--out", lst) == 0
    assert [r[0] for r in read_csv(lst / "registry_list.csv")[1:]] == ["S000001", "T000001", "T000002", "T000003"]
    assert_rerun_identical(lst)


def test_exit_codes(workspace, tmp_path):
    assert run("no-such-command") == 2
    assert run("schedule", "--algo", "ga", "--variant", "v9", "--out", tmp_path / "a") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    assert run("schedule", "--scenario", bad, "--out", tmp_path / "b") == 3
    assert run("schedule", "--algo", "ga", "--params", write(tmp_path / "p.json", {"pop_size": 1}), "--out", tmp_path / "c") == 3
    assert run("registry", "ingest", "--registry", tmp_path / "r", "--file", bad, "--out", tmp_path / "d") == 3
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("registry", "list", "--registry", blocker / "sub", "--out", tmp_path / "e") == 4
    assert run("rerun", "--manifest", tmp_path / "missing.json") == 2


def test_out_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("VERTIEVO_OUT", str(tmp_path / "env-out"))
    assert run("generate", "--seed", 5) == 0
    assert (tmp_path / "env-out" / "scenario.json").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vertievo", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("vertievo ")
