import csv
import json

import pytest

from coevopool.analysis import (AnalysisReport, analyze, analyze_events, effective_pool_size, export,
                                niche_specialists, tail_mean_reward)
from coevopool.runner import EventLog, RunConfig, run_stream
from coevopool.tasks import generate


def team_event(i, anchor, niche, roster=5, complement="c", scout="s"):
    return {"task_index": i, "kind": "team_selected",
            "payload": {"anchor": anchor, "complement": complement, "scout": scout, "niche": niche,
                        "roster_size": roster}}


def outcome_event(i, reward, structure="voting"):
    return {"task_index": i, "kind": "outcome_graded", "payload": {"reward": reward, "structure": structure}}


def small_log():
    ev = []
    for i, (a, z) in enumerate([("x", "n1"), ("x", "n1"), ("y", "n2"), ("x", "n2")]):
        ev += [team_event(i + 1, a, z), outcome_event(i + 1, float(i % 2))]
    ev.append({"task_index": 4, "kind": "insight_injected",
               "payload": {"insight_id": "t:1", "giver": "x", "recipient": "y"}})
    ev.append({"task_index": 4, "kind": "insight_injected",
               "payload": {"insight_id": "t:1", "giver": "x", "recipient": "y"}})
    ev.append({"task_index": 4, "kind": "lifecycle", "payload": {"kind": "fork", "subjects": ["z", "x"],
                                                                  "suppressed": False}})
    return ev


def test_report_fields_from_small_log():
    rep = analyze_events(small_log(), window=2)
    assert rep.n_tasks == 4 and rep.anchors == ["x", "x", "y", "x"]
    assert rep.anchor_matrix == {"x": {"n1": 2, "n2": 1}, "y": {"n2": 1}}
    assert rep.column_normalized()["x"] == {"n1": 1.0, "n2": 0.5}
    assert rep.cumulative_anchor["x"] == [1, 2, 2, 3]
    assert rep.rolling_share["y"] == [0.0, 0.0, 0.5, 0.5]
    assert rep.spec_index_series[1] == 1.0
    assert rep.flow_matrix == {"x->y": 1} and rep.flow_pairs() == {("x", "y"): 1}
    assert rep.unique_anchors == 2 and rep.agents_created == 5
    assert rep.lifecycle_counts == {"fork": 1}
    assert rep.rewards == [0.0, 1.0, 0.0, 1.0] and rep.structure_counts == {"voting": 4}


def test_window_validation():
    with pytest.raises(ValueError):
        analyze_events([], window=0)


def test_specialists_and_effective_size():
    rep = AnalysisReport(window=32)
    rep.n_tasks = 9
    rep.niches = ["a", "b", "a"] * 3
    rep.anchors = ["p", "q", "p", "p", "q", "r", "p", "r", "p"]
    rep.teams = [[x, "c", "s"] for x in rep.anchors]
    assert niche_specialists(rep) == {"a": "p", "b": "r"}
    assert niche_specialists(rep, tail_fraction=1.0) == {"a": "p", "b": "q"}
    assert niche_specialists(rep, tail_fraction=1.0, bar=2 / 3) == {"a": "p"}
    assert effective_pool_size(rep, last=9, min_share=0.2) == 5
    assert effective_pool_size(rep, last=9, min_share=0.25) == 3
    rep.rewards = [1.0] * 3 + [0.0] * 2
    assert tail_mean_reward(rep, last=4) == 0.5


@pytest.fixture(scope="module")
def logged_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    s = generate("hard_code", 80, seed=1)
    config = RunConfig.from_dict({"sim": {"niche_ability": s.niche_ability}})
    with EventLog(d / "events.jsonl") as log:
        run_stream(config, s.tasks, log=log)
    return d / "events.jsonl"


def test_analyze_is_pure_function_of_log(logged_run):
    assert analyze(logged_run).to_dict() == analyze(logged_run).to_dict()


def test_unique_anchor_bounds(logged_run):
    rep = analyze(logged_run)
    assert 1 <= rep.unique_anchors <= rep.agents_created
    assert all(0.0 <= v <= 1.0 for v in rep.spec_index_series)


def test_export_files(logged_run, tmp_path):
    rep = analyze(logged_run)
    paths = export(rep, tmp_path / "out")
    names = sorted(p.name for p in paths)
    assert names == sorted(["anchor_matrix.csv", "cumulative_anchor.csv", "rolling_share.csv", "flow_matrix.csv",
                            "spec_index.csv", "rewards.csv", "report.json"])
    with open(tmp_path / "out" / "rewards.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["task_index", "niche", "anchor", "reward"] and len(rows) == 81
    data = json.loads((tmp_path / "out" / "report.json").read_text())
    assert data["n_tasks"] == 80 and "anchor_matrix_normalized" in data
    assert [p.name for p in export(rep, tmp_path / "j", "json")] == ["report.json"]
    with pytest.raises(ValueError):
        export(rep, tmp_path / "x", "xml")
