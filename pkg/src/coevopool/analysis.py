"""Post-hoc analytics computed from the event log alone."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .evolution import specialization_index
from .runner import read_events

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 32


@dataclass
class AnalysisReport:
    window: int
    n_tasks: int = 0
    niches: list = field(default_factory=list)  # per task
    anchors: list = field(default_factory=list)  # per task
    teams: list = field(default_factory=list)  # per task, [anchor, complement, scout]
    rewards: list = field(default_factory=list)
    roster_sizes: list = field(default_factory=list)
    anchor_matrix: dict = field(default_factory=dict)  # agent -> niche -> count
    cumulative_anchor: dict = field(default_factory=dict)  # agent -> series
    rolling_share: dict = field(default_factory=dict)  # agent -> series
    spec_index_series: list = field(default_factory=list)
    flow_matrix: dict = field(default_factory=dict)  # "giver->recipient" -> count
    unique_anchors: int = 0
    mean_spec_index: float = 0.0
    max_spec_index: float = 0.0
    agents_created: int = 0
    lifecycle_counts: dict = field(default_factory=dict)
    codream_sessions: int = 0
    structure_counts: dict = field(default_factory=dict)

    def column_normalized(self) -> dict:
        """Anchor matrix with each niche column summing to one."""
        totals: Counter = Counter()
        for row in self.anchor_matrix.values():
            totals.update(row)
        return {a: {z: c / totals[z] for z, c in row.items()} for a, row in self.anchor_matrix.items()}

    def flow_pairs(self) -> dict:
        out = {}
        for key, count in self.flow_matrix.items():
            giver, recipient = key.split("->")
            out[(giver, recipient)] = count
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_matrix_normalized"] = self.column_normalized()
        return d


def analyze_events(events: Iterable[dict], window: int = DEFAULT_WINDOW) -> AnalysisReport:
    """Single pass over events producing every report field."""
    if window < 1:
        raise ValueError(f"window must be at least 1, got {window}")
    rep = AnalysisReport(window=window)
    recent: deque = deque(maxlen=window)
    matrix: dict = defaultdict(Counter)
    cumulative: Counter = Counter()
    seen_agents: set = set()
    flow_seen: set = set()
    flow: Counter = Counter()
    lifecycle: Counter = Counter()
    structures: Counter = Counter()
    per_task_cum: list = []
    per_task_share: list = []

    for e in events:
        kind, p = e["kind"], e["payload"]
        if kind == "team_selected":
            anchor = p["anchor"]
            rep.n_tasks += 1
            rep.niches.append(p["niche"])
            rep.anchors.append(anchor)
            rep.teams.append([p["anchor"], p["complement"], p["scout"]])
            rep.roster_sizes.append(p["roster_size"])
            seen_agents.update((p["anchor"], p["complement"], p["scout"]))
            matrix[anchor][p["niche"]] += 1
            cumulative[anchor] += 1
            recent.append(anchor)
            per_task_cum.append(dict(cumulative))
            counts = Counter(recent)
            per_task_share.append({a: c / len(recent) for a, c in counts.items()})
            n_pool = max(p["roster_size"], 2)
            rep.spec_index_series.append(specialization_index(list(recent), n_pool))
        elif kind == "outcome_graded":
            rep.rewards.append(p["reward"])
            structures[p["structure"]] += 1
        elif kind == "insight_injected":
            key = (p["insight_id"], p["recipient"])
            if key not in flow_seen:
                flow_seen.add(key)
                flow[f"{p['giver']}->{p['recipient']}"] += 1
        elif kind == "codream_session":
            rep.codream_sessions += 1
        elif kind == "lifecycle":
            if not p.get("suppressed"):
                lifecycle[p["kind"]] += 1
                if p["kind"] in ("genesis", "fork"):
                    seen_agents.add(p["subjects"][0])

    agents = sorted(set(cumulative) | {a for s in per_task_share for a in s})
    rep.cumulative_anchor = {a: [c.get(a, 0) for c in per_task_cum] for a in agents}
    rep.rolling_share = {a: [s.get(a, 0.0) for s in per_task_share] for a in agents}
    rep.anchor_matrix = {a: dict(sorted(matrix[a].items())) for a in sorted(matrix)}
    rep.flow_matrix = dict(sorted(flow.items()))
    rep.unique_anchors = len(matrix)
    rep.agents_created = len(seen_agents)
    if rep.spec_index_series:
        rep.mean_spec_index = sum(rep.spec_index_series) / len(rep.spec_index_series)
        rep.max_spec_index = max(rep.spec_index_series)
    rep.lifecycle_counts = dict(sorted(lifecycle.items()))
    rep.structure_counts = dict(sorted(structures.items()))
    return rep


def analyze(log_path: str | Path, window: int = DEFAULT_WINDOW) -> AnalysisReport:
    return analyze_events(read_events(log_path), window)


def niche_specialists(report: AnalysisReport, tail_fraction: float = 1 / 3, bar: float = 0.5) -> dict:
    """Niche -> agent holding more than ``bar`` of that niche's anchor slots in the stream tail."""
    start = report.n_tasks - int(round(report.n_tasks * tail_fraction))
    per_niche: dict = defaultdict(Counter)
    for niche, anchor in zip(report.niches[start:], report.anchors[start:]):
        per_niche[niche][anchor] += 1
    out = {}
    for niche, counts in sorted(per_niche.items()):
        agent, c = max(sorted(counts.items()), key=lambda t: t[1])
        if c / sum(counts.values()) > bar:
            out[niche] = agent
    return out


def effective_pool_size(report: AnalysisReport, last: int = 100, min_share: float = 0.05) -> int:
    """Agents sitting on at least ``min_share`` of the teams in the last ``last`` tasks."""
    teams = report.teams[-last:]
    if not teams:
        return 0
    counts = Counter(a for t in teams for a in t)
    return sum(1 for c in counts.values() if c / len(teams) >= min_share)


def tail_mean_reward(report: AnalysisReport, last: int = 100) -> float:
    tail = report.rewards[-last:]
    return sum(tail) / len(tail) if tail else 0.0


# --- export -----------------------------------------------------------------------------------

EXPORT_FILES = ("anchor_matrix.csv", "cumulative_anchor.csv", "rolling_share.csv", "flow_matrix.csv",
                "spec_index.csv", "rewards.csv")


def _write_csv(path: Path, header: list, rows: Iterable[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def export(report: AnalysisReport, out_dir: str | Path, fmt: str = "both") -> list:
    """Write one file per matrix or series; returns the written paths."""
    if fmt not in ("csv", "json", "both"):
        raise ValueError(f"format must be csv, json or both, got {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        norm = report.column_normalized()
        _write_csv(out / "anchor_matrix.csv", ["agent", "niche", "count", "share"],
                   ([a, z, c, norm[a][z]] for a, row in report.anchor_matrix.items() for z, c in row.items()))
        agents = sorted(report.cumulative_anchor)
        _write_csv(out / "cumulative_anchor.csv", ["task_index"] + agents,
                   ([t + 1] + [report.cumulative_anchor[a][t] for a in agents] for t in range(report.n_tasks)))
        _write_csv(out / "rolling_share.csv", ["task_index"] + agents,
                   ([t + 1] + [report.rolling_share[a][t] for a in agents] for t in range(report.n_tasks)))
        _write_csv(out / "flow_matrix.csv", ["giver", "recipient", "count"],
                   ([*k.split("->"), c] for k, c in report.flow_matrix.items()))
        _write_csv(out / "spec_index.csv", ["task_index", "spec_index"],
                   ([t + 1, v] for t, v in enumerate(report.spec_index_series)))
        _write_csv(out / "rewards.csv", ["task_index", "niche", "anchor", "reward"],
                   ([t + 1, z, a, r] for t, (z, a, r) in enumerate(zip(report.niches, report.anchors, report.rewards))))
        written += [out / f for f in EXPORT_FILES]
    if fmt in ("json", "both"):
        path = out / "report.json"
        path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
        written.append(path)
    return written
