import json
from collections import Counter

import pytest

from coevopool import lifecycle
from coevopool.analysis import analyze_events
from coevopool.backends.embed import HashingEmbedder
from coevopool.exceptions import ConfigError, StreamError
from coevopool.runner import (EventLog, RunConfig, StreamRunner, _dumps, header_line, make_backbone, make_pool,
                              read_events, run_stream)
from coevopool.state import restore, snapshot
from coevopool.tasks import embed_tasks, generate


def cfg(**kw):
    s = kw.pop("stream")
    d = {"seed": 1, "sim": {"niche_ability": s.niche_ability}}
    d.update(kw)
    return RunConfig.from_dict(d)


@pytest.fixture(scope="module")
def mixed_run():
    s = generate("mixed", 120, seed=5)
    return run_stream(cfg(stream=s), s.tasks)


def per_task(events):
    out = {}
    for e in events:
        out.setdefault(e["task_index"], []).append(e)
    return out


def test_one_team_and_one_outcome_per_task(mixed_run):
    kinds = Counter(e["kind"] for e in mixed_run.events)
    assert kinds["team_selected"] == kinds["outcome_graded"] == 120
    assert kinds["member_answer"] == kinds["reflection_stored"] == 360


def test_event_fields_and_sequence(mixed_run):
    for idx, evs in per_task(mixed_run.events).items():
        assert [e["seq"] for e in evs] == list(range(len(evs)))
        assert evs[0]["kind"] == "team_selected"
        assert {e["task_id"] for e in evs} == {evs[0]["task_id"]}
    cursors = [e["rng_cursor"] for e in mixed_run.events]
    assert cursors == sorted(cursors)


def test_event_count_per_task_is_bounded(mixed_run):
    for evs in per_task(mixed_run.events).values():
        k = Counter(e["kind"] for e in evs)
        session = k["codream_session"] + k["insight_routed"] + k["insight_injected"]
        assert len(evs) <= 3 + 3 * 2 + session + k["lifecycle"] + k["error"]


def test_roster_deltas_match_lifecycle_events(mixed_run):
    roster = {f"a{i:03d}" for i in range(5)}
    for e in mixed_run.events:
        if e["kind"] == "team_selected":
            assert e["payload"]["roster_size"] == len(roster)
            assert set(e["payload"][r] for r in ("anchor", "complement", "scout")) <= roster
        if e["kind"] != "lifecycle" or e["payload"]["suppressed"]:
            continue
        p = e["payload"]
        if p["kind"] in ("genesis", "fork"):
            assert p["subjects"][0] not in roster
            roster.add(p["subjects"][0])
        elif p["kind"] == "merge":
            roster.remove(p["subjects"][1])
        elif p["kind"] == "prune":
            roster.remove(p["subjects"][0])
    assert roster == set(mixed_run.pool.roster)
    assert not roster & set(mixed_run.pool.retired)


def test_byte_identical_logs_for_same_inputs(tmp_path):
    s = generate("mixed", 60, seed=2)
    with EventLog(tmp_path / "a.jsonl") as log:
        run_stream(cfg(stream=s), s.tasks, log=log)
    s2 = generate("mixed", 60, seed=2)
    with EventLog(tmp_path / "b.jsonl") as log:
        run_stream(cfg(stream=s2), s2.tasks, log=log)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    s3 = generate("mixed", 60, seed=2)
    assert run_stream(cfg(stream=s3, seed=2), s3.tasks).log.dumps() != (tmp_path / "a.jsonl").read_text()


def test_snapshot_replay_matches_uninterrupted_run():
    s = generate("mixed", 60, seed=9)
    saved = {}

    def hook(runner):
        if runner.pool.task_counter == 30:
            saved["snap"] = snapshot(runner.pool)

    full = run_stream(cfg(stream=s), s.tasks, on_task=hook)
    tail = generate("mixed", 60, seed=9).tasks[30:]
    resumed = run_stream(cfg(stream=s), tail, pool=restore(saved["snap"]))
    expect = [_dumps(e) for e in full.events if e["task_index"] > 30]
    assert [_dumps(e) for e in resumed.events] == expect


def test_no_codream_emits_no_session_events():
    s = generate("mixed", 60, seed=1)
    r = run_stream(cfg(stream=s, ablations={"no_codream": True}), s.tasks)
    kinds = {e["kind"] for e in r.events}
    assert not kinds & {"codream_session", "insight_routed", "insight_injected"}


def test_codream_sessions_fire_exactly_on_trigger(mixed_run):
    theta = RunConfig().codream.theta
    for evs in per_task(mixed_run.events).values():
        out = next(e for e in evs if e["kind"] == "outcome_graded")["payload"]
        expected = out["reward"] < theta or out["disagreement"]
        assert sum(e["kind"] == "codream_session" for e in evs) == int(expected)


def test_asymmetric_injections_are_below_median(mixed_run):
    injected = [e["payload"] for e in mixed_run.events if e["kind"] == "insight_injected"]
    assert injected
    for p in injected:
        assert p["gate"] < p["median"] and p["recipient"] != p["giver"]


def test_symmetric_broadcast_changes_only_routing():
    s = generate("mixed", 80, seed=5)
    base = run_stream(cfg(stream=s), s.tasks).events
    s2 = generate("mixed", 80, seed=5)
    sym = run_stream(cfg(stream=s2, ablations={"symmetric_broadcast": True}), s2.tasks).events
    routed = [e for e in sym if e["kind"] == "insight_routed" and e["payload"]["verified"]]
    assert routed
    for e in routed:
        p = e["payload"]
        assert sorted(p["recipients"]) == sorted(a for a in p["roster"] if a != p["giver"])
    first_diff = next(i for i, (a, b) in enumerate(zip(base, sym)) if _dumps(a) != _dumps(b))
    assert sym[first_diff]["kind"] == "insight_routed"
    assert [_dumps(e) for e in base[:first_diff]] == [_dumps(e) for e in sym[:first_diff]]


def test_lifecycle_evaluated_floor_t_over_tau(monkeypatch):
    calls = []
    real = lifecycle.op_prune

    def counting(pool, params, task_index):
        calls.append(task_index)
        return real(pool, params, task_index)

    monkeypatch.setattr(lifecycle, "op_prune", counting)
    s = generate("mixed", 57, seed=0)
    run_stream(cfg(stream=s), s.tasks)
    assert calls == [10, 20, 30, 40, 50]


def test_backend_failures_degrade_to_zero_reward():
    s = generate("mixed", 20, seed=0)
    config = cfg(stream=s, lifecycle={"enabled": False})
    pool = make_pool(config)
    bb = make_backbone(config, s.tasks, pool)
    bb.fail = lambda r: r.meta.get("task_id") == s.tasks[3].id
    runner = StreamRunner(config, pool, bb, HashingEmbedder())
    embed_tasks(s.tasks, runner.embedder)
    result = runner.run(s.tasks)
    assert len(result.rewards) == 20 and result.rewards[3] == 0.0
    assert pool.task_counter == 20
    errs = [e for e in result.events if e["kind"] == "error" and e["task_index"] == 4]
    assert errs


def test_read_events_header_and_partial_line(tmp_path, caplog):
    path = tmp_path / "log.jsonl"
    path.write_text(header_line() + "\n" + _dumps({"kind": "x", "payload": {}}) + "\n" + '{"kind": "y", "pa')
    assert [e["kind"] for e in read_events(path)] == ["x"]
    assert "partial line" in caplog.text
    with pytest.raises(StreamError, match="not an event log"):
        list(read_events(['{"schema": "other"}']))
    with pytest.raises(StreamError, match="version 2"):
        list(read_events(['{"schema": "coevopool-events", "version": 2}']))
    assert list(read_events(['{"schema": "coevopool-events", "version": 2}'], strict_version=False)) == []
    with pytest.raises(StreamError, match="line 2 is corrupt"):
        list(read_events([header_line(), "{bad", "{}"]))


def test_event_log_append_mode_keeps_single_header(tmp_path):
    path = tmp_path / "log.jsonl"
    with EventLog(path) as log:
        log.append({"a": 1})
    with EventLog(path, append=True) as log:
        log.append({"a": 2})
    lines = path.read_text().splitlines()
    assert lines[0] == header_line() and len(lines) == 3


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_dict({"pool": 3})
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_dict({"lifecycle": {"tau2": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"backbone": "gpu"})
    y = tmp_path / "c.yaml"
    y.write_text("pool_size: 7\nablations:\n  symmetric_broadcast: true\nsim:\n  uplift_origins: [codream]\n")
    c = RunConfig.from_file(y)
    assert c.pool_size == 7 and c.codream.symmetric_broadcast and c.sim.uplift_origins == ("codream",)
    j = tmp_path / "c.json"
    j.write_text(json.dumps(c.to_dict()))
    assert RunConfig.from_file(j).to_dict() == c.to_dict()
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig.from_file(bad)


def test_analysis_flow_matches_distinct_injections(mixed_run):
    rep = analyze_events(mixed_run.events)
    distinct = {(e["payload"]["insight_id"], e["payload"]["recipient"])
                for e in mixed_run.events if e["kind"] == "insight_injected"}
    assert sum(rep.flow_matrix.values()) == len(distinct)
