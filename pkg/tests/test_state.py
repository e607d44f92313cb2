import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_agent
from coevopool.evolution import EvolutionParams, update_after_task
from coevopool.exceptions import ConfigError, SnapshotError, StateError
from coevopool.state import (DEFAULT_COMPETENCE, SNAPSHOT_MAGIC, Agent, ExperienceEntry, Level, LeadershipRecord,
                             Origin, PoolRNG, StructureKind, SynergyTable, TeamAssignment, new_pool, pool_state,
                             restore, snapshot)

NICHES = ["a", "b", "c"]
ids = st.sampled_from(["a000", "a001", "a002", "a003", "a004"])


def test_unseen_niche_reads_prior_without_storing():
    a = make_agent("x")
    assert a.q("never") == DEFAULT_COMPETENCE
    assert a.n("never") == 0
    assert "never" not in a.competence


def test_new_pool_needs_three_agents():
    with pytest.raises(ConfigError):
        new_pool(2)
    pool = new_pool(3, seed=4)
    assert list(pool.roster) == ["a000", "a001", "a002"]
    assert pool.next_id == 3


def test_team_assignment_rejects_duplicates():
    with pytest.raises(StateError):
        TeamAssignment("a", "a", "b", "z")
    t = TeamAssignment("a", "b", "c", "z")
    assert t.members == ("a", "b", "c") and t.leader == "a"


def test_entry_scope_must_match_level():
    emb = np.ones(4)
    with pytest.raises(ConfigError):
        ExperienceEntry("x", emb, "t", Level.CROSS_DOMAIN, niche_scope="z")
    with pytest.raises(ConfigError):
        ExperienceEntry("x", emb, "t", Level.SUBDOMAIN, niche_scope=None)
    e = ExperienceEntry("x", emb, "t", "subdomain", niche_scope="z", origin="codream")
    assert e.level is Level.SUBDOMAIN and e.origin is Origin.CODREAM


def test_structure_parse_accepts_spellings():
    assert StructureKind.parse("Generator-Critic") is StructureKind.GENERATOR_CRITIC
    assert StructureKind.parse(" debate ") is StructureKind.DEBATE
    assert StructureKind.parse("chaos") is None


def test_retired_ids_never_reused():
    pool = new_pool(4)
    pool.retire("a001", "prune")
    with pytest.raises(StateError):
        pool.add_agent(make_agent("a001"))
    assert pool.new_agent_id() == "a004"


def test_synergy_gate_hides_young_pairs():
    t = SynergyTable(min_co=5)
    t.set("b", "a", "z", 0.9, 4)
    assert t.get("a", "b", "z") == 0.0
    t.set("a", "b", "z", 0.9, 5)
    assert t.get("b", "a", "z") == 0.9
    with pytest.raises(StateError):
        t.get("a", "a", "z")


@settings(max_examples=1000, deadline=None)
@given(i=ids, j=ids, z=st.sampled_from(NICHES), s=st.floats(0, 1), c=st.integers(0, 20))
def test_synergy_lookup_is_pair_order_invariant(i, j, z, s, c):
    if i == j:
        return
    t = SynergyTable()
    t.set(i, j, z, s, c)
    assert t.get(i, j, z) == t.get(j, i, z)
    assert t.raw(i, j, z) == t.raw(j, i, z)


team_and_reward = st.tuples(st.permutations(["a000", "a001", "a002", "a003"]), st.sampled_from(NICHES),
                            st.floats(0, 1))


@settings(max_examples=1000, deadline=None)
@given(steps=st.lists(team_and_reward, min_size=1, max_size=30))
def test_competence_stays_in_unit_interval(steps):
    pool = new_pool(4)
    for order, z, r in steps:
        update_after_task(pool, TeamAssignment(order[0], order[1], order[2], z), z, r, EvolutionParams())
    for a in pool.roster.values():
        assert all(0.0 <= q <= 1.0 for q in a.competence.values())


@settings(max_examples=200, deadline=None)
@given(steps=st.lists(team_and_reward, max_size=25), seed=st.integers(0, 2**31), draws=st.integers(0, 5))
def test_snapshot_restore_is_identity(steps, seed, draws):
    pool = new_pool(4, seed=seed)
    for k, (order, z, r) in enumerate(steps):
        pool.observe_niche(z)
        update_after_task(pool, TeamAssignment(order[0], order[1], order[2], z), z, r, task_index=k + 1)
        pool.task_counter = k + 1
    agent = pool.roster["a000"]
    agent.niche_lessons["a"] = [ExperienceEntry("lesson", np.arange(3.0), "t0", Level.SUBDOMAIN, "a")]
    agent.meta_insights.append(ExperienceEntry("meta", np.ones(3), "t0", Level.CROSS_DOMAIN, None,
                                               Origin.CODREAM, "a001"))
    pool.lead_bank.append(LeadershipRecord([("a000", 0.5)], "a", np.ones(2), StructureKind.DEBATE, 1.0,
                                           "note", np.ones(4), "t0"))
    for _ in range(draws):
        pool.rng.random()
    back = restore(snapshot(pool))
    assert pool_state(back) == pool_state(pool)
    assert back.rng.random() == pool.rng.random()


def test_snapshot_header_and_version_checks():
    data = snapshot(new_pool(3))
    assert data.startswith(SNAPSHOT_MAGIC + b" v1\n")
    with pytest.raises(SnapshotError, match="header"):
        restore(b"garbage")
    with pytest.raises(SnapshotError, match="version 9"):
        restore(data.replace(b" v1\n", b" v9\n", 1))
    with pytest.raises(SnapshotError, match="corrupt"):
        restore(SNAPSHOT_MAGIC + b" v1\n{\"roster\": []}")


def test_rng_cursor_counts_draws_and_survives_state_roundtrip():
    a = PoolRNG(3)
    a.random(); a.integers(5); a.permutation(4)
    assert a.cursor == 3
    b = PoolRNG(0)
    b.set_state(json.loads(json.dumps(a.get_state())))
    assert b.cursor == 3 and b.random() == a.random()


def test_agent_dict_roundtrip_keeps_window_length():
    a = make_agent("x", {"a": 0.7}, {"a": 3}, rewards=[1, 0, 1], window=7)
    back = Agent.from_dict(json.loads(json.dumps(a.to_dict())))
    assert back.reward_window.maxlen == 7
    assert list(back.reward_window) == list(a.reward_window)
