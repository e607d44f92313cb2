import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ScriptedBackbone, make_agent, unit_vector
from coevopool.evolution import style_overlap, update_after_task
from coevopool.exceptions import ConfigError
from coevopool.lifecycle import (LifecycleParams, is_scheduled, maybe_run, merge_into, op_fork, op_genesis, op_merge,
                                 op_prune, op_specialize, top_performers)
from coevopool.state import ExperienceEntry, Level, Pool, PoolRNG, SynergyTable, TeamAssignment, pool_state

P = LifecycleParams()


def empty_pool():
    return Pool(roster={}, synergy=SynergyTable(), lead_bank=[], rng=PoolRNG(0))


def add(pool, agent):
    pool.add_agent(agent)
    pool.next_id = max(pool.next_id, int(agent.id[1:]) + 1)
    return agent


def persona_bb():
    return ScriptedBackbone(lambda r: f"Persona tuned for {r.meta['niche']}.")


# --- prune ------------------------------------------------------------------------------------

def prune_fixture(x, streak=10):
    """Victim with ``streak`` rewards of ``x``; four others at 0.42 with ten rewards each."""
    pool = empty_pool()
    add(pool, make_agent("a000", rewards=[x] * streak))
    for i in range(1, 5):
        add(pool, make_agent(f"a{i:03d}", rewards=[0.42] * 10))
    return pool


def _bar_fixed_point():
    # x = 0.8 * (10 x + 40 * 0.42) / 50
    return 0.8 * 40 * 0.42 / (50 - 8)


def test_prune_fires_just_below_bar_and_not_at_or_above():
    x = _bar_fixed_point()
    below = prune_fixture(x * (1 - 1e-9))
    events = op_prune(below, P, 10)
    assert [e.subjects for e in events] == [["a000"]] and "a000" not in below.roster
    pooled = events[0].details["pool_mean"]
    assert max(events[0].details["tail"]) < 0.8 * pooled
    above = prune_fixture(x * (1 + 1e-9))
    assert op_prune(above, P, 10) == []


def test_prune_needs_full_streak():
    pool = prune_fixture(0.0, streak=9)
    assert op_prune(pool, P, 10) == []
    pool = prune_fixture(0.0, streak=10)
    assert len(op_prune(pool, P, 10)) == 1


def test_prune_one_good_reward_breaks_the_streak():
    pool = prune_fixture(0.0)
    victim = pool.roster["a000"]
    victim.reward_window[-1] = (10, 1.0)
    assert op_prune(pool, P, 10) == []


def test_prune_floor_suppresses():
    pool = empty_pool()
    add(pool, make_agent("a000", rewards=[0.0] * 10))
    add(pool, make_agent("a001", rewards=[1.0] * 10))
    add(pool, make_agent("a002", rewards=[1.0] * 10))
    events = op_prune(pool, P, 10)
    assert len(events) == 1 and events[0].suppressed and len(pool.roster) == 3


# --- merge ------------------------------------------------------------------------------------

def merge_fixture(cos, tasks=10):
    pool = empty_pool()
    add(pool, make_agent("a000", {"x": 1.0, "y": 0.0}, {"x": tasks}, rewards=[1.0] * 5))
    add(pool, make_agent("a001", {"x": cos, "y": math.sqrt(1 - cos * cos)}, {"x": tasks}, rewards=[0.5] * 5))
    for i in range(2, 5):
        add(pool, make_agent(f"a{i:03d}", {f"n{i}": 0.7}, {f"n{i}": 12}))
    return pool


def test_merge_threshold_is_strict():
    above = merge_fixture(0.95 + 1e-9)
    assert style_overlap(above.roster["a000"], above.roster["a001"]) > 0.95
    events = op_merge(above, P, 10)
    assert [e.subjects for e in events] == [["a000", "a001"]]
    assert "a001" in above.retired
    below = merge_fixture(0.95 - 1e-9)
    assert op_merge(below, P, 10) == []
    assert op_merge(merge_fixture(0.94), P, 10) == []


def test_merge_needs_min_tasks_on_both():
    assert op_merge(merge_fixture(1.0, tasks=9), P, 10) == []
    assert len(op_merge(merge_fixture(1.0, tasks=10), P, 10)) == 1


def test_three_similar_agents_merge_once():
    pool = empty_pool()
    for i, c in enumerate([1.0, 0.999, 0.998]):
        add(pool, make_agent(f"a{i:03d}", {"x": 1.0, "y": math.sqrt(1 - c * c) if c < 1 else 0.0}, {"x": 20}))
    for i in range(3, 6):
        add(pool, make_agent(f"a{i:03d}", {f"n{i}": 0.5}, {f"n{i}": 20}))
    events = op_merge(pool, P, 10)
    assert len(events) == 1
    assert len(pool.roster) == 5


def test_merge_into_max_q_sum_n_dedup_stores():
    s = make_agent("s", {"x": 0.4, "y": 0.9}, {"x": 2, "y": 3})
    o = make_agent("o", {"x": 0.8, "z": 0.1}, {"x": 5, "z": 1})
    s.niche_lessons["x"] = [ExperienceEntry("keep", unit_vector(4, 0), "t", Level.SUBDOMAIN, "x")]
    o.niche_lessons["x"] = [ExperienceEntry("dupe", unit_vector(4, 0), "t", Level.SUBDOMAIN, "x"),
                            ExperienceEntry("new", unit_vector(4, 1), "t", Level.SUBDOMAIN, "x")]
    o.meta_insights = [ExperienceEntry("meta", unit_vector(4, 2), "t", Level.CROSS_DOMAIN, None)]
    out = merge_into(s, o)
    assert s.competence == {"x": 0.8, "y": 0.9, "z": 0.1}
    assert s.exposure == {"x": 7, "y": 3, "z": 1}
    assert [e.text for e in s.niche_lessons["x"]] == ["keep", "new"]
    assert [e.text for e in s.meta_insights] == ["meta"]
    assert out == {"inherited": 2, "deduped": 1}


@settings(max_examples=300, deadline=None)
@given(a=st.lists(st.integers(0, 7), max_size=6), b=st.lists(st.integers(0, 7), max_size=6))
def test_merge_loses_only_near_duplicates(a, b):
    s, o = make_agent("s"), make_agent("o")
    s.niche_lessons["x"] = []
    for i in dict.fromkeys(a):
        s.niche_lessons["x"].append(ExperienceEntry(f"s{i}", unit_vector(8, i), "t", Level.SUBDOMAIN, "x"))
    o.niche_lessons["x"] = [ExperienceEntry(f"o{i}", unit_vector(8, i), "t", Level.SUBDOMAIN, "x")
                            for i in dict.fromkeys(b)]
    merge_into(s, o)
    kept = {e.text for e in s.niche_lessons["x"]}
    survivor_vecs = [e.embedding for e in s.niche_lessons["x"]]
    for e in o.niche_lessons["x"]:
        if e.text not in kept:
            assert max(float(np.dot(e.embedding, v)) for v in survivor_vecs) >= 0.85


# --- genesis ----------------------------------------------------------------------------------

def genesis_fixture(n, q=0.5):
    pool = empty_pool()
    for i in range(n):
        add(pool, make_agent(f"a{i:03d}", {"z": q}))
    pool.observe_niche("z")
    return pool


def test_genesis_size_trigger_boundary():
    assert op_genesis(genesis_fixture(15), P, 10) == []
    pool = genesis_fixture(14)
    events = op_genesis(pool, P, 10)
    assert len(events) == 1 and "pool size 14 < 15" in events[0].reason
    child = pool.roster[events[0].subjects[0]]
    assert child.store_size() == 0 and child.competence == {}
    assert child.persona == "You are a helpful assistant. Focus area: z."


def test_genesis_affinity_boundary():
    assert op_genesis(genesis_fixture(15, q=0.4), P, 10) == []
    events = op_genesis(genesis_fixture(15, q=0.4 - 1e-9), P, 10)
    assert len(events) == 1 and "on z" in events[0].reason
    # the prior of an untouched niche never trips the affinity test
    pool = genesis_fixture(15)
    pool.observe_niche("fresh")
    assert op_genesis(pool, P, 10) == []


def test_genesis_parent_is_most_generalist_and_persona_from_backbone():
    pool = genesis_fixture(14)
    pool.observe_niche("w")
    for i, a in enumerate(pool.roster.values()):
        a.competence["w"] = 0.5 + 0.02 * (i + 1)
    pool.roster["a007"].competence = {"z": 0.5, "w": 0.5}
    pool.last_niche = "z"
    bb = persona_bb()
    e = op_genesis(pool, P, 10, bb)[0]
    assert e.subjects[1] == "a007"
    assert pool.roster[e.subjects[0]].lineage == ("a007", "genesis")
    assert pool.roster[e.subjects[0]].persona == "Persona tuned for z."


def test_genesis_after_repeated_failures_in_sim():
    pool = genesis_fixture(15)
    team = TeamAssignment("a000", "a001", "a002", "z")
    for a in pool.roster.values():
        a.competence["z"] = 0.39
    for t in range(1, 6):
        update_after_task(pool, team, "z", 0.0, task_index=t)
    assert max(a.q("z") for a in pool.roster.values()) < 0.4
    assert len(op_genesis(pool, P, 10)) == 1


# --- fork -------------------------------------------------------------------------------------

def fork_fixture(n, fills=None):
    pool = empty_pool()
    for i in range(n):
        fill = fills[i] if fills else 5
        add(pool, make_agent(f"a{i:03d}", {"x": 0.9 - 0.01 * i, "y": 0.2}, {"x": 10},
                             rewards=[1.0 - 0.01 * i] * fill))
    pool.observe_niche("x")
    pool.observe_niche("y")
    return pool


def test_fork_count_is_ceil_of_top_fraction():
    assert top_performers(fork_fixture(10), P) == ["a000"]
    assert top_performers(fork_fixture(11), P) == ["a000", "a001"]
    assert len(top_performers(fork_fixture(20), P)) == 2


def test_fork_requires_window_fill():
    pool = fork_fixture(10, fills=[4] + [5] * 9)
    assert top_performers(pool, P) == ["a001"]


def test_fork_copies_and_preserves_parent():
    pool = fork_fixture(10)
    parent = pool.roster["a000"]
    parent.niche_lessons["x"] = [ExperienceEntry("l", unit_vector(4, 0), "t", Level.SUBDOMAIN, "x")]
    before = pool_state(pool)["roster"][0]
    events = op_fork(pool, P, 10, persona_bb())
    clone = pool.roster[events[0].subjects[0]]
    assert pool_state(pool)["roster"][0] == before
    assert clone.competence == parent.competence and clone.exposure == parent.exposure
    assert [e.text for e in clone.niche_lessons["x"]] == ["l"]
    assert clone.niche_lessons["x"][0] is not parent.niche_lessons["x"][0]
    assert clone.ancestry == ("a000",) and clone.lineage == ("a000", "fork")
    assert len(clone.reward_window) == 0
    assert clone.persona == "Persona tuned for x."


def test_fork_and_parent_diverge_after_different_tasks():
    pool = fork_fixture(10)
    clone_id = op_fork(pool, P, 10)[0].subjects[0]
    for t in range(20):
        update_after_task(pool, TeamAssignment("a000", "a001", "a002", "x"), "x", 1.0, task_index=t)
        update_after_task(pool, TeamAssignment(clone_id, "a003", "a004", "x"), "x", 0.0, task_index=t)
    assert pool.roster["a000"].competence != pool.roster[clone_id].competence


def test_fork_backend_failure_uses_templated_persona():
    from coevopool.exceptions import BackendError

    def broken(r):
        raise BackendError("down")
    pool = fork_fixture(10)
    e = op_fork(pool, P, 10, ScriptedBackbone(broken))[0]
    assert pool.roster[e.subjects[0]].persona.endswith("Focus area: x.")


# --- specialize -------------------------------------------------------------------------------

def spec_fixture(q1, q2):
    pool = fork_fixture(10)
    pool.roster["a000"].competence = {"x": q1, "y": q2}
    return pool


def test_specialize_margin_boundary():
    pool = spec_fixture(0.7, 0.5)
    events = op_specialize(pool, P, 10, persona_bb())
    assert [e.subjects for e in events] == [["a000"]]
    assert pool.roster["a000"].persona == "Persona tuned for x."
    assert op_specialize(spec_fixture(0.7, 0.5 + 1e-9), P, 10, persona_bb()) == []
    assert op_specialize(spec_fixture(0.6, 0.55), P, 10, persona_bb()) == []
    pool = spec_fixture(0.9, 0.3)
    n = len(pool.roster)
    assert len(op_specialize(pool, P, 10, persona_bb())) == 1 and len(pool.roster) == n


def test_specialize_skipped_without_persona():
    assert op_specialize(spec_fixture(0.9, 0.3), P, 10, None) == []


# --- scheduling -------------------------------------------------------------------------------

@settings(max_examples=1000)
@given(T=st.integers(0, 500), tau=st.integers(1, 50))
def test_schedule_fires_floor_t_over_tau(T, tau):
    params = LifecycleParams(tau=tau)
    assert sum(is_scheduled(t, params) for t in range(1, T + 1)) == T // tau


def test_maybe_run_off_schedule_and_disabled():
    pool = genesis_fixture(3)
    assert maybe_run(pool, 7, P) == []
    assert maybe_run(pool, 10, LifecycleParams(enabled=False)) == []
    assert [e.kind for e in maybe_run(pool, 10, P)] == ["genesis"]


def test_all_operators_fire_in_order():
    pool = empty_pool()
    add(pool, make_agent("a000", {"x": 0.9, "y": 0.1}, {"x": 8}, rewards=[1.0] * 10))  # fork + specialize
    add(pool, make_agent("a001", {"m": 0.7}, {"m": 10}, rewards=[0.6] * 10))  # merge pair
    add(pool, make_agent("a002", {"m": 0.7}, {"m": 10}, rewards=[0.6] * 10))
    add(pool, make_agent("a003", {"p": 0.5}, {"p": 9}, rewards=[0.0] * 10))  # prune
    for i in range(4, 11):
        add(pool, make_agent(f"a{i:03d}", {f"n{i}": 0.6, f"k{i}": 0.6}, {f"n{i}": 5}, rewards=[0.5] * 5))
    pool.observe_niche("x")
    events = maybe_run(pool, 10, P, persona_bb())
    assert [e.kind for e in events] == ["prune", "merge", "genesis", "fork", "specialize"]
    assert events[0].subjects == ["a003"] and events[3].subjects[1] == "a000"


@settings(max_examples=100, deadline=None)
@given(n=st.integers(3, 6), zeros=st.integers(0, 6))
def test_roster_never_below_three(n, zeros):
    pool = empty_pool()
    for i in range(n):
        add(pool, make_agent(f"a{i:03d}", {"x": 0.7}, {"x": 20}, rewards=[0.0 if i < zeros else 1.0] * 10))
    maybe_run(pool, 10, LifecycleParams(genesis_min_pool=1))
    assert len(pool.roster) >= 3


def test_params_validation():
    with pytest.raises(ConfigError):
        LifecycleParams(tau=0)
    with pytest.raises(ConfigError):
        LifecycleParams(merge_cos=1.5)
