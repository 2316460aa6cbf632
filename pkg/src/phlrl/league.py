"""Bounded league of frozen policy-group snapshots and win-rate bookkeeping."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .policy import MixedCombination, PURE, PolicyGroup

DECAY_THRESHOLD = 512


def _decay(counter: List[float]) -> None:
    if counter[1] > DECAY_THRESHOLD:
        counter[0] /= 2.0
        counter[1] /= 2.0


@dataclass
class BetaStats:
    """Win/game counters per (league member id, replaced type) cell."""

    n_types: int
    cells: Dict[Tuple[int, int], List[float]] = field(default_factory=dict)
    frontier: List[float] = field(default_factory=lambda: [0.0, 0.0])

    def cell_beta(self, member_id: int, type_id: int) -> Optional[float]:
        c = self.cells.get((member_id, type_id))
        if not c or c[1] <= 0:
            return None
        return c[0] / c[1]

    def type_beta(self, type_id: int, member_ids) -> Optional[float]:
        """Uniform mean of cell win rates over the given members; empty cells skipped."""
        vals = [b for b in (self.cell_beta(k, type_id) for k in member_ids) if b is not None]
        return float(np.mean(vals)) if vals else None

    def overall_beta(self, member_ids) -> Optional[float]:
        vals = [b for b in (self.type_beta(d, member_ids) for d in range(self.n_types)) if b is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def frontier_beta(self) -> Optional[float]:
        return self.frontier[0] / self.frontier[1] if self.frontier[1] > 0 else None

    def to_dict(self):
        return {"n_types": self.n_types, "frontier": list(self.frontier),
                "cells": [[k, d, w, g] for (k, d), (w, g) in sorted(self.cells.items())]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_types"], {(int(k), int(t)): [w, g] for k, t, w, g in d["cells"]}, list(d["frontier"]))


class League:
    """Frozen policy groups sorted by win rate, best first."""

    def __init__(self, capacity: int, n_types: int):
        if capacity < 1:
            raise ValueError("league capacity must be >= 1")
        self.capacity = capacity
        self.members: List[PolicyGroup] = []
        self.stats = BetaStats(n_types)

    def __len__(self):
        return len(self.members)

    @property
    def member_ids(self):
        return [m.group_id for m in self.members]

    def betas(self):
        return [m.beta for m in self.members]

    def sort(self):
        # stable: equal win rates keep older members first
        self.members.sort(key=lambda m: (-m.beta, m.group_id))

    def type_beta(self, type_id):
        return self.stats.type_beta(type_id, self.member_ids)

    def overall_beta(self):
        return self.stats.overall_beta(self.member_ids)

    def by_id(self, group_id) -> PolicyGroup:
        for m in self.members:
            if m.group_id == group_id:
                return m
        raise KeyError(group_id)


def sample_combination(league: League, rng: np.random.Generator, p_pure: float = 0.1) -> MixedCombination:
    """Draw the policy combination for one episode."""
    if not league.members:
        return PURE
    if rng.random() < p_pure:
        return PURE
    k = int(rng.integers(len(league.members)))
    d = int(rng.integers(league.stats.n_types))
    return MixedCombination(k, d, league.members[k].group_id)


def record_outcome(league: League, combination: MixedCombination, won: bool) -> None:
    """Count one finished episode against the scripted opponent."""
    w = 1.0 if won else 0.0
    if combination.pure:
        counter = league.stats.frontier
    else:
        key = (combination.member_id, combination.replaced_type)
        counter = league.stats.cells.setdefault(key, [0.0, 0.0])
        try:
            member = league.by_id(combination.member_id)
        except KeyError:
            member = None
        if member is not None:
            member.wins += w
            member.games += 1.0
            if member.games > DECAY_THRESHOLD:
                member.wins /= 2.0
                member.games /= 2.0
    counter[0] += w
    counter[1] += 1.0
    _decay(counter)
    league.sort()


def closest_pair(betas) -> Tuple[int, int]:
    """Positions (p, p+1) of the adjacent pair with the smallest win-rate gap.

    ``betas`` must be sorted; ties go to the pair nearest the head.
    """
    best, where = np.inf, 0
    for p in range(len(betas) - 1):
        gap = abs(betas[p] - betas[p + 1])
        if gap < best:
            best, where = gap, p
    return where, where + 1


def eviction_position(league: League) -> int:
    p, q = closest_pair(league.betas())
    return p if league.members[p].group_id > league.members[q].group_id else q


def admit(league: League, candidate: PolicyGroup, gate_wins: float) -> Optional[PolicyGroup]:
    """Insert ``candidate`` subject to the admission gate; returns the evicted group.

    A candidate always enters a league with room.  Into a full league it
    enters only with at least one gate win and a win rate strictly above
    the weakest member; the closest-pair rule then evicts the newer group
    of the tightest pair (possibly the candidate itself).
    """
    if len(league.members) >= league.capacity:
        weakest = min(league.betas())
        if gate_wins < 1 or candidate.beta <= weakest:
            return candidate
    league.members.append(candidate)
    league.sort()
    if len(league.members) > league.capacity:
        return league.members.pop(eviction_position(league))
    return None


def league_update(league: League, frontier: PolicyGroup, new_id: int,
                  evaluate: Callable[[PolicyGroup, int], float], eval_gate_games: int = 32):
    """Snapshot the frontier, seed its win rate with gate games, and admit it.

    ``evaluate(group, games)`` returns the number of wins of ``group``
    playing alone against the scripted opponent.  Returns
    ``(candidate, evicted)``.
    """
    candidate = frontier.freeze(new_id)
    wins = float(evaluate(candidate, eval_gate_games))
    candidate.wins, candidate.games = wins, float(eval_gate_games)
    evicted = admit(league, candidate, wins)
    return candidate, evicted


# ---------------------------------------------------------------- storage


def save_league(league: League, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for m in league.members:
        m.save(os.path.join(directory, f"member_{m.group_id}.npz"))
    manifest = {
        "capacity": league.capacity,
        "members": [{"group_id": m.group_id, "wins": m.wins, "games": m.games,
                     "file": f"member_{m.group_id}.npz"} for m in league.members],
        "stats": league.stats.to_dict(),
    }
    with open(os.path.join(directory, "league.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_league(directory: str) -> League:
    with open(os.path.join(directory, "league.json")) as fh:
        manifest = json.load(fh)
    stats = BetaStats.from_dict(manifest["stats"])
    league = League(manifest["capacity"], stats.n_types)
    league.stats = stats
    for entry in manifest["members"]:
        group, _, _ = PolicyGroup.load(os.path.join(directory, entry["file"]))
        group.wins, group.games = entry["wins"], entry["games"]
        league.members.append(group)
    return league
