"""Two-team heterogeneous combat arena (drones, missile vehicles, gun vehicles).

The simulator is batched: one :class:`Arena` steps ``E`` independent worlds
in lockstep with numpy.  Every world owns its own random generator, so a
world's trajectory depends only on its seed and the actions applied to it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .nn import ContractError

DRONE, MISSILE, GUN = 0, 1, 2
TYPE_NAMES = ("drone", "missile", "gun")
N_TYPES = 3

HOLD = 0
MOVE_FIRST = 1  # 8 compass moves: E, NE, N, NW, W, SW, S, SE
N_ENGAGE = 3
ENGAGE_FIRST = 9
REPAIR = ENGAGE_FIRST + N_ENGAGE
N_ACTIONS = REPAIR + 1

_ANGLES = np.arange(8) * (np.pi / 4)
COMPASS = np.stack([np.cos(_ANGLES), np.sin(_ANGLES)], axis=1)

REWARD_SCALE = 0.1
REPAIR_THRESHOLD = 0.7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AgentTypeSpec:
    type_id: int
    max_health: float
    move_speed: float
    attack_range: float
    attack_damage: float
    can_attack_air: bool
    repair_rate: float = 0.0
    repair_range: float = 0.0

    @property
    def name(self):
        return TYPE_NAMES[self.type_id]


DEFAULT_TYPES = (
    AgentTypeSpec(DRONE, 60.0, 3.0, 4.0, 2.0, True, repair_rate=4.0, repair_range=3.0),
    AgentTypeSpec(MISSILE, 100.0, 1.0, 10.0, 12.0, True),
    AgentTypeSpec(GUN, 220.0, 1.2, 5.0, 5.0, False),
)


@dataclass
class ScenarioConfig:
    counts: Dict[str, int] = field(default_factory=lambda: {"drone": 2, "missile": 4, "gun": 8})
    arena_size: float = 40.0
    sensing_radius: float = 12.0
    episode_limit: int = 200
    obs_noise: bool = False
    noise_std: float = 0.5
    spawn_jitter: float = 1.0
    obs_slots: int = 10
    abilities: Dict[str, dict] = field(default_factory=dict)

    @classmethod
    def tiny(cls, **kw):
        return cls(counts={"drone": 1, "missile": 2, "gun": 4}, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def type_specs(self):
        specs = []
        for spec in DEFAULT_TYPES:
            over = self.abilities.get(spec.name, {})
            bad = set(over) - set(AgentTypeSpec.__dataclass_fields__) - set()
            if bad or "type_id" in over:
                raise ConfigError(f"bad ability override for {spec.name}: {sorted(over)}")
            specs.append(replace(spec, **over))
        for s in specs:
            mags = (s.max_health, s.move_speed, s.attack_range, s.attack_damage, s.repair_rate, s.repair_range)
            if min(mags) < 0:
                raise ConfigError(f"negative ability for {s.name}")
        return tuple(specs)

    def validate(self):
        for name in TYPE_NAMES:
            if self.counts.get(name, 0) < 1:
                raise ConfigError(f"scenario needs at least one {name} per team")
        if set(self.counts) - set(TYPE_NAMES):
            raise ConfigError(f"unknown agent types {sorted(set(self.counts) - set(TYPE_NAMES))}")
        if self.episode_limit < 1 or self.arena_size <= 0 or self.sensing_radius <= 0:
            raise ConfigError("episode_limit, arena_size and sensing_radius must be positive")


@dataclass
class WorldState:
    """Batched world state; leading axis indexes worlds."""

    tick: np.ndarray       # (E,)
    pos: np.ndarray        # (E, N, 2)
    health: np.ndarray     # (E, N)
    alive: np.ndarray      # (E, N) bool
    done: np.ndarray       # (E,) bool
    rngs: List[np.random.Generator]
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def copy(self) -> "WorldState":
        rngs = []
        for g in self.rngs:
            c = np.random.Generator(type(g.bit_generator)())
            c.bit_generator.state = g.bit_generator.state
            rngs.append(c)
        return WorldState(self.tick.copy(), self.pos.copy(), self.health.copy(),
                          self.alive.copy(), self.done.copy(), rngs)


@dataclass
class EpisodeOutcome:
    winner: Optional[int]         # team index, None for a draw
    remaining: tuple
    delta_n: int
    reward: float
    length: int

    def to_dict(self):
        return {"winner": self.winner, "remaining": list(self.remaining),
                "delta_n": self.delta_n, "reward": self.reward, "length": self.length}


class Arena:
    """Batched simulator for one scenario configuration."""

    def __init__(self, config: Optional[ScenarioConfig] = None):
        self.config = config or ScenarioConfig()
        self.config.validate()
        self.specs = self.config.type_specs()
        per_team = [t for t in range(N_TYPES) for _ in range(self.config.counts[TYPE_NAMES[t]])]
        self.n_per_team = len(per_team)
        self.n_agents = 2 * self.n_per_team
        self.types = np.array(per_team * 2, dtype=np.int64)
        self.team = np.repeat([0, 1], self.n_per_team)

        col = lambda attr: np.array([getattr(self.specs[t], attr) for t in self.types], dtype=np.float64)
        self.max_health = col("max_health")
        self.speed = col("move_speed")
        self.attack_range = col("attack_range")
        self.damage = col("attack_damage")
        self.repair_rate = col("repair_rate")
        self.repair_range = col("repair_range")
        air = np.array([s.can_attack_air for s in self.specs])
        # can_hit[i, j]: agent i is allowed to shoot agent j
        self.can_hit = (self.team[:, None] != self.team[None, :]) & (
            air[self.types][:, None] | (self.types[None, :] != DRONE))
        self.same_team = (self.team[:, None] == self.team[None, :]) & ~np.eye(self.n_agents, dtype=bool)
        self.is_drone = self.types == DRONE
        self.type_onehot = np.eye(N_TYPES)[self.types]

        self.slot_features = 10
        self.self_features = 7
        self.obs_dim = self.self_features + self.config.obs_slots * self.slot_features

    # ------------------------------------------------------------------ reset
    def spawn_slots(self, rng):
        cfg = self.config
        n = self.n_per_team
        w = cfg.arena_size
        ys = (np.arange(n) + 0.5) * (w / n)
        xs = np.full(n, 0.05 * w)
        slots = np.stack([xs, ys], axis=1) + rng.uniform(-cfg.spawn_jitter, cfg.spawn_jitter, (n, 2))
        slots = np.clip(slots, 0.0, w)
        mirror = slots.copy()
        mirror[:, 0] = w - mirror[:, 0]
        return slots, mirror

    def reset(self, seeds: Sequence[int]) -> WorldState:
        E, N, n = len(seeds), self.n_agents, self.n_per_team
        pos = np.zeros((E, N, 2))
        rngs = []
        for e, seed in enumerate(seeds):
            rng = np.random.default_rng(int(seed))
            slots, mirror = self.spawn_slots(rng)
            pos[e, :n] = slots[rng.permutation(n)]
            pos[e, n:] = mirror[rng.permutation(n)]
            rngs.append(rng)
        return WorldState(
            tick=np.zeros(E, dtype=np.int64),
            pos=pos,
            health=np.broadcast_to(self.max_health, (E, N)).copy(),
            alive=np.ones((E, N), dtype=bool),
            done=np.zeros(E, dtype=bool),
            rngs=rngs,
        )

    # ------------------------------------------------------------ geometry
    def _geometry(self, state: WorldState):
        geom = state.cache.get("geom")
        if geom is None:
            x, y = state.pos[..., 0], state.pos[..., 1]
            dx = x[:, None, :] - x[:, :, None]   # dx[e,i,j] = x_j - x_i
            dy = y[:, None, :] - y[:, :, None]
            dist = np.sqrt(dx * dx + dy * dy)
            visible = state.alive[:, :, None] & state.alive[:, None, :] & (dist <= self.config.sensing_radius)
            visible &= ~np.eye(self.n_agents, dtype=bool)
            geom = state.cache["geom"] = (np.stack([dx, dy], axis=-1), dist, visible)
        return geom

    @staticmethod
    def _nearest(dist, allowed, k):
        key = np.where(allowed, dist, np.inf)
        order = np.argsort(key, axis=-1, kind="stable")[..., :k]
        valid = np.take_along_axis(key, order, axis=-1) < np.inf
        return order, valid

    def targets(self, state: WorldState, geom=None):
        """Engage targets (E,N,3) with validity and repair targets (E,N)."""
        if "targets" in state.cache:
            return state.cache["targets"]
        rel, dist, visible = geom or self._geometry(state)
        engage, engage_ok = self._nearest(dist, visible & self.can_hit, N_ENGAGE)
        damaged = state.alive & (state.health < self.max_health)
        can_fix = (self.same_team & self.is_drone[:, None]) & damaged[:, None, :] & \
            state.alive[:, :, None] & (dist <= self.repair_range[:, None])
        fix, fix_ok = self._nearest(dist, can_fix, 1)
        tg = state.cache["targets"] = (engage, engage_ok, fix[..., 0], fix_ok[..., 0])
        return tg

    def action_masks(self, state: WorldState, tg=None) -> np.ndarray:
        engage, engage_ok, fix, fix_ok = tg or self.targets(state)
        E, N = state.alive.shape
        mask = np.zeros((E, N, N_ACTIONS), dtype=bool)
        live = state.alive & ~state.done[:, None]
        mask[..., HOLD] = live
        mask[..., MOVE_FIRST:ENGAGE_FIRST] = live[..., None]
        mask[..., ENGAGE_FIRST:REPAIR] = engage_ok & live[..., None]
        mask[..., REPAIR] = fix_ok & live
        return mask

    # ---------------------------------------------------------- observation
    def observe(self, state: WorldState, geom=None) -> np.ndarray:
        """Per-agent observation vectors, shape (E, N, obs_dim); dead rows are zero."""
        cfg = self.config
        rel, dist, visible = geom or self._geometry(state)
        E, N = state.alive.shape
        K, R = cfg.obs_slots, cfg.sensing_radius
        order, valid = self._nearest(dist, visible, K)
        hfrac = state.health / self.max_health

        obs = np.zeros((E, N, self.obs_dim))
        obs[..., 0:2] = state.pos / cfg.arena_size
        obs[..., 2] = hfrac
        obs[..., 3:6] = self.type_onehot
        obs[..., 6] = (state.tick / cfg.episode_limit)[:, None]

        rel_sel = np.take_along_axis(rel, order[..., None], axis=2)           # (E,N,K,2)
        if cfg.obs_noise:
            for e, rng in enumerate(state.rngs):
                rel_sel[e] += rng.normal(0.0, cfg.noise_std, rel_sel[e].shape)
        d_sel = np.take_along_axis(dist, order, axis=2)
        slots = np.zeros((E, N, K, self.slot_features))
        slots[..., 0:2] = rel_sel / R
        slots[..., 2] = d_sel / R
        slots[..., 3] = hfrac[np.arange(E)[:, None, None], order]
        slots[..., 4:7] = self.type_onehot[order]
        slots[..., 7] = self.team[order] != self.team[None, :, None]
        slots[..., 8] = d_sel <= self.attack_range[None, :, None]
        slots[..., 9] = 1.0
        slots *= valid[..., None]
        obs[..., self.self_features:] = slots.reshape(E, N, K * self.slot_features)
        obs *= state.alive[..., None]
        return obs

    # ----------------------------------------------------------------- step
    def step(self, state: WorldState, actions: np.ndarray, tg=None, validate=True):
        """Advance every unfinished world by one tick, in place.

        Returns ``(rewards (E,N), newly_done (E,))``.  Rewards are zero except
        on the tick a world finishes.
        """
        actions = np.asarray(actions, dtype=np.int64)
        E, N = state.alive.shape
        geom = self._geometry(state)
        engage, engage_ok, fix, fix_ok = tg or self.targets(state, geom)
        live = state.alive & ~state.done[:, None]

        if validate:
            mask = self.action_masks(state, (engage, engage_ok, fix, fix_ok))
            safe = np.clip(actions, 0, N_ACTIONS - 1)
            legal = (actions >= 0) & (actions < N_ACTIONS) & np.take_along_axis(mask, safe[..., None], 2)[..., 0]
            bad = live & ~legal
            if bad.any():
                e, i = map(int, np.argwhere(bad)[0])
                raise ContractError(f"world {e}: agent {i} submitted masked action {int(actions[e, i])}")

        rows = np.arange(E)[:, None]
        pos0 = state.pos
        new_pos = pos0.copy()

        is_move = live & (actions >= MOVE_FIRST) & (actions < ENGAGE_FIRST)
        direction = COMPASS[np.clip(actions - MOVE_FIRST, 0, 7)]
        new_pos += np.where(is_move[..., None], direction * self.speed[:, None], 0.0)

        is_engage = live & (actions >= ENGAGE_FIRST) & (actions < REPAIR)
        slot = np.clip(actions - ENGAGE_FIRST, 0, N_ENGAGE - 1)
        target = np.take_along_axis(engage, slot[..., None], 2)[..., 0]
        to_target = pos0[rows, target] - pos0
        d = np.sqrt((to_target ** 2).sum(-1))
        step_len = np.clip(d - self.attack_range, 0.0, self.speed)
        unit = to_target / np.maximum(d, 1e-12)[..., None]
        new_pos += np.where(is_engage[..., None], unit * step_len[..., None], 0.0)
        np.clip(new_pos, 0.0, self.config.arena_size, out=new_pos)
        state.pos = new_pos

        # attacks resolve simultaneously on post-move positions
        gap = np.sqrt(((new_pos[rows, target] - new_pos) ** 2).sum(-1))
        fires = is_engage & (gap <= self.attack_range)
        dmg = np.zeros((E, N))
        np.add.at(dmg, (np.broadcast_to(rows, (E, N))[fires], target[fires]), self.damage[None, :].repeat(E, 0)[fires])
        health = np.maximum(state.health - dmg, 0.0)

        is_fix = live & (actions == REPAIR)
        fix_gap = np.sqrt(((new_pos[rows, fix] - new_pos) ** 2).sum(-1))
        heals = is_fix & (fix_gap <= self.repair_range) & (health[rows, fix] > 0)
        heal = np.zeros((E, N))
        np.add.at(heal, (np.broadcast_to(rows, (E, N))[heals], fix[heals]), self.repair_rate[None, :].repeat(E, 0)[heals])
        health = np.where(health > 0, np.minimum(health + heal, self.max_health), 0.0)

        running = ~state.done
        state.health = np.where(running[:, None], health, state.health)
        state.alive = state.alive & (state.health > 0)
        state.tick = state.tick + running

        alive_a = state.alive[:, : self.n_per_team].sum(1)
        alive_b = state.alive[:, self.n_per_team:].sum(1)
        finished = running & ((alive_a == 0) | (alive_b == 0) | (state.tick >= self.config.episode_limit))
        state.done = state.done | finished
        state.cache.clear()

        rewards = np.zeros((E, N))
        diff = (alive_a - alive_b).astype(np.float64)
        team_sign = np.where(self.team == 0, 1.0, -1.0)
        rewards[finished] = (REWARD_SCALE * diff[finished])[:, None] * team_sign
        return rewards, finished

    def outcome(self, state: WorldState, e: int = 0) -> EpisodeOutcome:
        a = int(state.alive[e, : self.n_per_team].sum())
        b = int(state.alive[e, self.n_per_team:].sum())
        winner = None if a == b else (0 if a > b else 1)
        return EpisodeOutcome(winner, (a, b), abs(a - b), REWARD_SCALE * abs(a - b), int(state.tick[e]))

    # -------------------------------------------------------- scripted team
    def scripted_expert(self, state: WorldState, team: int, tg=None) -> np.ndarray:
        """Centralized full-information controller for ``team``; (E, N) actions.

        Rows belonging to the other team are HOLD.  Living drones lead attack
        groups; the remaining agents join groups round-robin by id.
        """
        E, N = state.alive.shape
        geom = self._geometry(state)
        engage, engage_ok, fix, fix_ok = tg or self.targets(state, geom)
        _, dist, _ = geom
        rows = np.arange(E)[:, None]
        mine = (self.team == team)[None, :] & state.alive
        enemy = (self.team != team)[None, :] & state.alive

        leaders = mine & self.is_drone
        n_lead = leaders.sum(1)
        lead_rank = np.cumsum(leaders, axis=1) - 1
        followers = mine & ~self.is_drone
        follow_rank = np.cumsum(followers, axis=1) - 1
        G = max(int(n_lead.max()), 1)
        group = np.where(leaders, lead_rank, follow_rank % np.maximum(n_lead, 1)[:, None])
        group = np.where(mine, group, -1)

        member = (group[..., None] == np.arange(G)) & mine[..., None]        # (E,N,G)
        size = member.sum(1)                                                 # (E,G)
        centroid = np.einsum("eng,enc->egc", member, state.pos) / np.maximum(size, 1)[..., None]
        gd = np.sqrt(((centroid[:, :, None, :] - state.pos[:, None, :, :]) ** 2).sum(-1))  # (E,G,N)
        hfrac = state.health / self.max_health
        threat = (self.damage * hfrac)[:, None, :] / (1.0 + gd)
        threat = np.where(enemy[:, None, :], threat, -np.inf)

        g_idx = np.clip(group, 0, G - 1)
        my_threat = threat[rows, g_idx]                                      # (E,N,N)
        legal_threat = np.where(self.can_hit[None], my_threat, -np.inf)
        target = np.argmax(legal_threat, axis=-1)
        has_legal = np.isfinite(np.take_along_axis(legal_threat, target[..., None], 2)[..., 0])
        fallback = np.argmax(my_threat, axis=-1)
        target = np.where(has_legal, target, fallback)

        in_slot = (engage == target[..., None]) & engage_ok
        slot = np.argmax(in_slot, axis=-1)
        to_t = state.pos[rows, target] - state.pos
        heading = np.mod(np.round(np.arctan2(to_t[..., 1], to_t[..., 0]) / (np.pi / 4)), 8).astype(np.int64)
        t_dist = np.take_along_axis(dist, target[..., None], 2)[..., 0]
        actions = np.where(
            in_slot.any(-1), ENGAGE_FIRST + slot,
            np.where(has_legal & engage_ok[..., 0] & (t_dist <= self.attack_range), ENGAGE_FIRST,
                     MOVE_FIRST + heading))

        wounded = state.alive & (hfrac < REPAIR_THRESHOLD)
        near_wounded = (self.same_team[None] & wounded[:, None, :] & (dist <= self.repair_range[:, None])).any(-1)
        actions = np.where(self.is_drone & fix_ok & near_wounded, REPAIR, actions)
        actions = np.where(~enemy.any(1)[:, None], HOLD, actions)
        return np.where(mine & ~state.done[:, None], actions, HOLD)

    # ------------------------------------------------------------- replay
    def replay_record(self, state: WorldState, actions, e: int = 0) -> dict:
        agents = []
        for i in range(self.n_agents):
            agents.append({
                "id": i, "team": int(self.team[i]), "type": TYPE_NAMES[self.types[i]],
                "x": float(state.pos[e, i, 0]), "y": float(state.pos[e, i, 1]),
                "health": float(state.health[e, i]), "alive": bool(state.alive[e, i]),
                "action": int(actions[e, i]) if state.alive[e, i] else None,
            })
        return {"tick": int(state.tick[e]), "agents": agents}


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# single-world convenience API


def reset(config: Optional[ScenarioConfig] = None, seed: int = 0):
    """Spawn one world; returns ``(arena, state, observations (N, obs_dim))``."""
    arena = Arena(config)
    state = arena.reset([seed])
    return arena, state, arena.observe(state)[0]


def step(arena: Arena, state: WorldState, joint_action):
    """One tick of a single world: ``(state, rewards (N,), done, info)``."""
    rewards, _ = arena.step(state, np.asarray(joint_action)[None, :])
    done = bool(state.done[0])
    info = {"outcome": arena.outcome(state)} if done else {}
    return state, rewards[0], done, info


def observe(arena: Arena, state: WorldState, agent: int) -> np.ndarray:
    if not state.alive[0, agent]:
        raise ContractError(f"agent {agent} is dead")
    return arena.observe(state)[0, agent]


def scripted_expert(arena: Arena, state: WorldState, team: int) -> np.ndarray:
    if not (state.alive[0] & (arena.team == team)).any():
        raise ContractError(f"team {team} has no living agents")
    return arena.scripted_expert(state, team)[0]
