import json

import numpy as np
import pytest

from concept_forge.cli import build_parser, main
from concept_forge.concepts import ConceptSet
from concept_forge.embedding_store import Labeling
from concept_forge.errors import InvalidSpec, MissingRuns
from concept_forge.pipeline import (
    ExperimentPlan,
    align_gt,
    emit_report,
    load_runs,
    max_workers,
    run_plan,
    write_aggregates,
)

SYNTH = {"synthetic": {"d": 32, "attribute_sizes": [3, 3], "samples_per_composite": 10, "noise_scale": 0.3}}


def make_plan(tmp_path, runs, seeds=(0, 1, 2), metrics=("map", "comp", "cosine")):
    return ExperimentPlan(SYNTH, list(runs), list(seeds), str(tmp_path / "out"), metrics)


def test_two_methods_three_seeds(tmp_path):
    plan = make_plan(tmp_path, [{"method": "pca"}, {"method": "random"}])
    rows, ok = run_plan(plan)
    assert ok
    assert len(list((tmp_path / "out" / "runs").glob("*.json"))) == 6
    assert [r["run"] for r in rows] == ["pca", "random"]
    csv_lines = (tmp_path / "out" / "aggregate.csv").read_text().splitlines()
    assert len(csv_lines) == 3
    assert csv_lines[0].startswith("run,method,n_seeds,n_failed,map_mean,map_std")


def test_rerun_and_regeneration_are_byte_identical(tmp_path):
    plan = make_plan(tmp_path, [{"method": "ace"}, {"name": "cce", "method": "cce", "config": {"S": 4, "max_alternations": 20}}])
    run_plan(plan)
    out = tmp_path / "out"
    first = (out / "aggregate.csv").read_bytes(), (out / "summary.txt").read_bytes()
    run_plan(plan, workers=2)
    assert ((out / "aggregate.csv").read_bytes(), (out / "summary.txt").read_bytes()) == first
    (out / "aggregate.csv").unlink()
    (out / "summary.txt").unlink()
    write_aggregates(out)
    assert ((out / "aggregate.csv").read_bytes(), (out / "summary.txt").read_bytes()) == first


def test_concept_count_sweep_rows(tmp_path):
    runs = [{"name": f"pca_k{k}", "method": "pca", "config": {"K": k}} for k in (6, 12, 24)]
    rows, ok = run_plan(make_plan(tmp_path, runs, seeds=[0], metrics=["downstream"]))
    assert ok and [r["run"] for r in rows] == ["pca_k6", "pca_k12", "pca_k24"]
    assert all(r["downstream_mean"] is not None for r in rows)


def test_failures_recorded(tmp_path):
    plan = make_plan(tmp_path, [{"method": "pca"}, {"name": "bad", "method": "cce", "config": {"S": 40}}], seeds=[0])
    rows, ok = run_plan(plan)
    assert not ok
    rec = json.loads((tmp_path / "out" / "runs" / "bad__seed0.json").read_text())
    assert rec["status"] == "error" and "exceeds" in rec["error"]
    assert rows[1]["n_failed"] == 1 and rows[1]["cosine_mean"] is None


def test_report_formats(tmp_path):
    with pytest.raises(MissingRuns):
        emit_report(tmp_path)
    run_plan(make_plan(tmp_path, [{"method": "pca"}], seeds=[0]))
    md = emit_report(tmp_path / "out")
    lines = md.strip().splitlines()
    assert len(lines) == 3 and lines[2].startswith("| pca |")
    assert emit_report(tmp_path / "out", "csv").count("\n") == 2
    assert len(load_runs(tmp_path / "out")) == 1


def test_plan_validation(tmp_path):
    with pytest.raises(InvalidSpec):
        make_plan(tmp_path, [{"method": "pca"}], seeds=[]).validate()
    with pytest.raises(InvalidSpec):
        make_plan(tmp_path, [{"method": "nope"}]).validate()
    with pytest.raises(InvalidSpec):
        make_plan(tmp_path, [{"method": "pca"}, {"method": "pca"}]).validate()
    files = ExperimentPlan({"embeddings": str(tmp_path / "missing.csv"), "labels": "x"}, [{"method": "pca"}], [0], "o")
    with pytest.raises(InvalidSpec):
        files.validate()
    with pytest.raises(InvalidSpec):
        ExperimentPlan.from_json({"schema_version": 99, "dataset": SYNTH, "runs": []})


def test_threads_env(monkeypatch):
    monkeypatch.setenv("CONCEPT_FORGE_THREADS", "3")
    assert max_workers() == 3
    monkeypatch.setenv("CONCEPT_FORGE_THREADS", "many")
    with pytest.raises(InvalidSpec):
        max_workers()


def test_align_gt_reorders_by_name():
    L = Labeling(["a"], [["y", "x"]], [[0], [1]])
    gt = ConceptSet(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0], ("a=x", "a=y"))
    out = align_gt(gt, L)
    assert out.names == ("a=y", "a=x")
    np.testing.assert_array_equal(out.vectors, [[0, 1], [1, 0]])


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--d", "32", "--n", "10", "--noise", "0.3", "--out-dir", str(data)]) == 0
    assert {p.name for p in data.iterdir()} == {"embeddings.csv", "labels.csv", "ground_truth.json"}
    assert main(["extract", "--method", "cce", "--k", "3", "--m", "2", "--s", "4", "--max-iters", "20",
                 "--in-embeddings", str(data / "embeddings.csv"), "--out", str(tmp_path / "c.json")]) == 0
    res = json.loads((tmp_path / "c.json").read_text())
    assert len(res["concepts"]["vectors"]) == 6 and len(res["subspaces"]) == 2 and res["trace"]
    assert main(["extract", "--method", "dictlearn", "--k", "3,3", "--lambda", "0.2", "--iters", "5",
                 "--in-embeddings", str(data / "embeddings.csv"), "--out", str(tmp_path / "d.json")]) == 0
    assert main(["eval", "--concepts", str(tmp_path / "c.json"), "--embeddings", str(data / "embeddings.csv"),
                 "--labels", str(data / "labels.csv"), "--gt-concepts", str(data / "ground_truth.json"),
                 "--metrics", "comp,cosine", "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["schema_version"] == 1 and rep["method"] == "cce" and rep["map"] is None
    assert -1 <= rep["matched_cosine_mean"] <= 1


def test_cli_run_plan_exit_codes(tmp_path, capsys):
    plan = {"schema_version": 1, "dataset": SYNTH, "runs": [{"method": "pca"}], "seeds": [0, 1],
            "metrics": ["cosine"], "output_dir": "res"}
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    assert main(["run-plan", str(tmp_path / "plan.json")]) == 0
    assert "pca" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "res"), "--format", "text"]) == 0
    plan["runs"].append({"name": "bad", "method": "cce", "config": {"S": 40}})
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    assert main(["run-plan", str(tmp_path / "plan.json")]) == 1
    assert main(["report", str(tmp_path / "empty")]) == 2


def test_every_flag_documented():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    assert set(subs) == {"synth", "extract", "eval", "run-plan", "report"}
    for sub in subs.values():
        for action in sub._actions:
            assert action.help, f"{sub.prog}: {action.dest} lacks help"
    extract_flags = {s for a in subs["extract"]._actions for s in a.option_strings}
    assert {"--method", "--m", "--k", "--s", "--lr", "--reg-weight", "--max-iters", "--tol", "--seed",
            "--in-embeddings", "--in-format", "--out", "--lambda", "--iters"} <= extract_flags
    eval_flags = {s for a in subs["eval"]._actions for s in a.option_strings}
    assert {"--concepts", "--embeddings", "--labels", "--gt-concepts", "--metrics", "--seed", "--out"} <= eval_flags
