import csv
import json
import math
import socket

import pytest

from viewbench.cli import RunConfig, aggregate_traces, load_config, main, read_annotations
from viewbench.difficulty.annotate import DifficultyAnnotation
from viewbench.episode import read_trace

PROTO = {"budget": {"mode": "fixed", "k": 4}, "candidates": 32, "reference_views": 64,
         "intrinsics": {"width": 64, "height": 64}, "occupancy_cells": 32}
CHEAP_ANNOTATION = {"r": 0.05, "protocol_views": 16, "schedule": [2, 4, 8, 16], "time_budget": 5.0}


def write_config(path, **kw):
    cfg = {"synthetic": ["sphere", "cube"], "output": str(path.parent / "run"), "protocols": {"fast": PROTO},
           "planners": [{"name": "rse", "kind": "rse"}, {"name": "rtsp", "kind": "random_tsp", "seed": 3}],
           "annotation": CHEAP_ANNOTATION, "timing": "off"}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return str(path)


def test_defaults_roundtrip(capsys):
    assert main(["defaults"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert RunConfig.model_validate(printed) == RunConfig()
    assert printed["timing"] == "wall"
    assert {p["kind"] for p in printed["planners"]} == {"rse", "oracle", "random_tsp", "scp", "mcp"}


@pytest.mark.parametrize("bad", [
    {"unknown_key": 1},
    {"planners": [{"name": "a", "kind": "rse"}, {"name": "a", "kind": "mcp"}]},
    {"planners": [{"name": "a__b", "kind": "rse"}]},
    {"protocols": {"bad name": {}}},
    {"protocols": {"p": {"budget": {"k": 0}}}},
    {"timing": "cpu"},
])
def test_invalid_configs_are_rejected(tmp_path, bad):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(bad))
    with pytest.raises(SystemExit, match="invalid configuration"):
        main(["evaluate", "--config", str(path)])


def test_missing_config_file(tmp_path):
    with pytest.raises(SystemExit, match="invalid configuration"):
        main(["evaluate", "--config", str(tmp_path / "nope.json")])


def test_cli_overrides_config(tmp_path):
    cfg = load_config(write_config(tmp_path / "cfg.json"))
    assert cfg.output.endswith("run") and cfg.protocols["fast"].budget.k == 4


@pytest.fixture(scope="module")
def annotated(tmp_path_factory):
    root = tmp_path_factory.mktemp("annotate")
    cfg = write_config(root / "cfg.json", synthetic=["sphere", "cube", "torus", "open_box"])
    assert main(["annotate", "--config", cfg]) == 0
    return root


def test_annotate_writes_one_record_per_object(annotated):
    anns = read_annotations(annotated / "run" / "annotations.jsonl")
    assert [a.object_id for a in anns] == ["cube", "open_box", "sphere", "torus"]
    for a in anns:
        assert 0 < a.r_vis <= 1 and 1 <= a.d_plan <= 16 and a.r == 0.05
        assert a.Y_sat <= a.S_gt
    summary = json.loads((annotated / "run" / "annotation_summary.json").read_text())
    assert summary["objects"] == 4
    assert sum(summary["histogram"].values()) == 4
    assert summary["failures"] == []


def test_annotate_resumes_without_recomputing(annotated, capsys, monkeypatch):
    path = annotated / "run" / "annotations.jsonl"
    before = path.read_text()
    lines = before.splitlines()
    path.write_text("\n".join(lines[:3]) + "\n")
    calls = []
    import viewbench.cli as cli
    real = cli._annotate_one
    monkeypatch.setattr(cli, "_annotate_one", lambda c, i: calls.append(i) or real(c, i))
    main(["annotate", "--config", str(annotated / "cfg.json")])
    assert calls == [json.loads(lines[3])["object_id"]]
    assert path.read_text() == before


def fake_annotations(path, d_plans, slow=()):
    path.write_text("".join(
        DifficultyAnnotation(f"o{i:02d}", 0.02, 0.9, 16, 90, 100, d, "exact", i in slow).to_json() + "\n"
        for i, d in enumerate(d_plans)))
    return str(path)


def test_split_stratified(tmp_path, capsys):
    src = fake_annotations(tmp_path / "a.jsonl", [1, 1, 2, 2, 2, 3, 3, 5, 5, 5, 5, 9], slow={11})
    main(["split", src, "--quota", "4", "--out", str(tmp_path / "s")])
    test = json.loads((tmp_path / "s" / "test.json").read_text())
    train = json.loads((tmp_path / "s" / "train.json").read_text())
    slow = json.loads((tmp_path / "s" / "slow.json").read_text())
    assert slow == ["o11"]
    assert len(test) == 4 and not set(test) & set(train)
    assert sorted(test + train) == [f"o{i:02d}" for i in range(11)]
    assert "test.json: 4 ids" in capsys.readouterr().out


def test_split_balanced_and_raw(tmp_path):
    src = fake_annotations(tmp_path / "a.jsonl", [1] * 10 + [7] * 10 + [30] * 2)
    ex = tmp_path / "ex.json"
    ex.write_text(json.dumps(["o00"]))
    main(["split", src, "--quota", "6", "--mode", "balanced", "--exclude", str(ex), "--out", str(tmp_path / "b")])
    ids = json.loads((tmp_path / "b" / "balanced.json").read_text())
    assert len(ids) == 6 and "o00" not in ids
    buckets = [sum(i in ids for i in (f"o{j:02d}" for j in r)) for r in (range(10), range(10, 20), range(20, 22))]
    assert min(buckets) >= 1 and sum(buckets) == 6
    main(["split", src, "--quota", "5", "--mode", "raw", "--seed", "2", "--out", str(tmp_path / "r")])
    assert len(json.loads((tmp_path / "r" / "raw.json").read_text())) == 5


def test_split_errors(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(SystemExit, match="no annotations"):
        main(["split", str(empty), "--quota", "2", "--out", str(tmp_path / "o")])
    src = fake_annotations(tmp_path / "a.jsonl", [1, 2])
    with pytest.raises(SystemExit):
        main(["split", src, "--quota", "5", "--out", str(tmp_path / "o")])


@pytest.fixture(scope="module")
def evaluated(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaluate")
    cfg = write_config(root / "cfg.json")
    assert main(["evaluate", "--config", cfg]) == 0
    return root / "run", cfg


def snapshot(run):
    return {str(p.relative_to(run)): p.read_bytes() for p in sorted(run.rglob("*")) if p.is_file()}


def test_evaluate_layout(evaluated):
    run, _ = evaluated
    traces = sorted(p.name for p in (run / "traces").glob("*.csv"))
    assert traces == ["fast__rse__cube.csv", "fast__rse__sphere.csv", "fast__rtsp__cube.csv", "fast__rtsp__sphere.csv"]
    assert json.loads((run / "failures.json").read_text()) == []
    with open(run / "aggregate.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["protocol"], r["planner"]) for r in rows] == [("fast", "rse"), ("fast", "rtsp")]
    for r in rows:
        assert int(r["episodes"]) == 2 and float(r["views"]) == 5  # initial view plus K


def test_aggregate_equals_recomputation_from_traces(evaluated):
    run, _ = evaluated
    rows = {(r["protocol"], r["planner"]): r for r in aggregate_traces(run / "traces")}
    for planner in ("rse", "rtsp"):
        eps = [read_trace((run / "traces" / f"fast__{planner}__{o}.csv").read_text()) for o in ("cube", "sphere")]
        r = rows[("fast", planner)]
        assert r["nsc"] == sum(e[-1].nsc for e in eps) / 2
        assert abs(r["path_cost"] - sum(math.fsum(s.path_increment for s in e) for e in eps) / 2) < 1e-12
        report = json.loads((run / "reports" / f"fast__{planner}__cube.json").read_text())
        assert report["nsc"] == eps[0][-1].nsc


def test_evaluate_rerun_is_byte_identical(evaluated, tmp_path):
    run, cfg = evaluated
    main(["evaluate", "--config", cfg, "--output", str(tmp_path / "again")])
    assert snapshot(tmp_path / "again") == snapshot(run)


def test_report_rebuilds_tables(evaluated, tmp_path, capsys):
    run, _ = evaluated
    before = (run / "aggregate.csv").read_bytes()
    (run / "aggregate.csv").unlink()
    main(["report", str(run)])
    assert (run / "aggregate.csv").read_bytes() == before
    out = capsys.readouterr().out
    assert "rse" in out and "rtsp" in out
    with open(run / "ranking_nsc.csv") as fh:
        nsc = [float(r["nsc"]) for r in csv.DictReader(fh)]
    assert nsc == sorted(nsc, reverse=True)


def test_serve_refuses_a_busy_port(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", synthetic=["sphere"])
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen(1)
        port = s.getsockname()[1]
        with pytest.raises(SystemExit, match="cannot listen"):
            main(["serve", "--config", cfg, "--port", str(port)])


def test_unreadable_object_directory(tmp_path):
    (tmp_path / "objs").mkdir()
    (tmp_path / "objs" / "broken.obj").write_text("v 0 0\nf 1 2 3\n")
    with pytest.raises(SystemExit, match="no readable meshes"):
        main(["annotate", "--objects", str(tmp_path / "objs"), "--output", str(tmp_path / "o")])
