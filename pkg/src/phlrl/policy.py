"""Per-type actor-critic policies conditioned on a policy identity vector."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .nn import ContractError, Dense, HyperLayer, ParamStore, Tape

FRONTIER_PLACEHOLDER = 1.0
MIN_LEAGUE_PERF = 0.01


@dataclass(frozen=True)
class MixedCombination:
    """Which policy drives each agent type for one episode.

    ``league_index`` is the position of the league member in the league at
    sampling time and ``member_id`` its group id; both are ``None`` for a
    pure-frontier episode.
    """

    league_index: Optional[int] = None
    replaced_type: Optional[int] = None
    member_id: Optional[int] = None

    @property
    def pure(self) -> bool:
        return self.league_index is None

    def source(self, type_id: int) -> Optional[int]:
        """League index driving ``type_id``, or None for the frontier."""
        return None if self.pure or type_id != self.replaced_type else self.league_index

    def tag(self):
        return (-1, -1) if self.pure else (self.league_index, self.replaced_type)


PURE = MixedCombination()


def build_identity(agent_type: int, combination: MixedCombination, league_perf: float,
                   n_types: int) -> np.ndarray:
    """Identity vector: per-type performance slots followed by a one-hot of ``agent_type``.

    The slot of the league-replaced type carries that member's win rate,
    but only for agents of other types; everything else is the frontier
    placeholder.
    """
    if not 0 <= agent_type < n_types:
        raise ContractError(f"agent type {agent_type} not in 0..{n_types - 1}")
    if not combination.pure and not 0 <= combination.replaced_type < n_types:
        raise ContractError(f"replaced type {combination.replaced_type} not in 0..{n_types - 1}")
    perf = np.full(n_types, FRONTIER_PLACEHOLDER)
    if not combination.pure and agent_type != combination.replaced_type:
        perf[combination.replaced_type] = float(np.clip(league_perf, MIN_LEAGUE_PERF, 1.0))
    onehot = np.zeros(n_types)
    onehot[agent_type] = 1.0
    return np.concatenate([perf, onehot])


@dataclass
class NetConfig:
    hidden: int = 128
    depth: int = 2
    gen_hidden: int = 64
    head_scale: float = 0.1


class _Net:
    """Dense tanh encoder followed by a hypernetwork-generated linear head."""

    def __init__(self, store, prefix, obs_dim, cond_dim, n_out, cfg: NetConfig, rng):
        self.encoder = []
        width = obs_dim
        for k in range(cfg.depth):
            self.encoder.append(Dense.create(store, f"{prefix}.enc{k}", width, cfg.hidden, rng, "tanh"))
            width = cfg.hidden
        self.head = HyperLayer.create(store, f"{prefix}.head", cond_dim, width, n_out, rng,
                                      gen_hidden=cfg.gen_hidden, head_scale=cfg.head_scale)

    def __call__(self, tape, params, obs, cond, groups):
        h = obs
        for layer in self.encoder:
            h = layer(tape, params, h)
        return self.head(tape, params, cond, h, groups)


class TypePolicy:
    """Actor and critic for one agent type; parameters live in two stores."""

    def __init__(self, type_id: int, obs_dim: int, n_actions: int, n_types: int,
                 cfg: NetConfig, rng: np.random.Generator):
        self.type_id = type_id
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_types = n_types
        self.cfg = cfg
        self.actor_params = ParamStore()
        self.critic_params = ParamStore()
        cond = 2 * n_types
        self.actor = _Net(self.actor_params, "actor", obs_dim, cond, n_actions, cfg, rng)
        self.critic = _Net(self.critic_params, "critic", obs_dim, cond, 1, cfg, rng)

    def logits(self, tape, actor_nodes, obs, cond, groups):
        return self.actor(tape, actor_nodes, obs, cond, groups)

    def values(self, tape, critic_nodes, obs, cond, groups):
        return nn.reshape(tape, self.critic(tape, critic_nodes, obs, cond, groups), (-1,))

    def infer(self, obs: np.ndarray, identity: np.ndarray, with_value: bool = True):
        """Forward pass without gradients; ``identity`` is one row per observation."""
        cond, groups = np.unique(identity, axis=0, return_inverse=True)
        groups = np.asarray(groups).reshape(-1)
        tape = Tape()
        o, c = tape.const(obs), tape.const(cond)
        logits = self.logits(tape, self.actor_params.watch(tape), o, c, groups).value
        value = None
        if with_value:
            value = self.values(tape, self.critic_params.watch(tape), o, c, groups).value
        return logits, value


def masked_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("all actions masked")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def choose(logits, mask, uniforms=None, greedy=False):
    """Pick actions from masked logits.

    Sampling inverts the CDF with the supplied uniforms so that callers
    control the random stream.  Greedy ties go to the lowest index.
    Returns ``(actions, log_probs)``.
    """
    p = masked_probs(logits, mask)
    if greedy:
        a = np.argmax(np.where(mask, logits, -np.inf), axis=-1)
    else:
        cdf = np.cumsum(p, axis=-1)
        a = (cdf < np.asarray(uniforms)[:, None] * cdf[:, -1:]).sum(axis=-1)
        a = np.minimum(a, p.shape[-1] - 1)
        # guard against landing on a zero-probability tail entry
        a = np.where(p[np.arange(len(a)), a] > 0, a, np.argmax(p, axis=-1))
    rows = np.arange(len(a))
    return a, np.log(p[rows, a])


class PolicyGroup:
    """One policy per agent type plus a win-rate record."""

    def __init__(self, group_id: int, policies: List[TypePolicy], frozen: bool = False):
        self.group_id = group_id
        self.policies = policies
        self.frozen = frozen
        self.wins = 0.0
        self.games = 0.0

    @classmethod
    def create(cls, group_id, obs_dim, n_actions, n_types, rng, cfg: Optional[NetConfig] = None):
        cfg = cfg or NetConfig()
        return cls(group_id, [TypePolicy(d, obs_dim, n_actions, n_types, cfg, rng) for d in range(n_types)])

    @property
    def n_types(self):
        return len(self.policies)

    @property
    def beta(self) -> float:
        return self.wins / self.games if self.games > 0 else 0.0

    def act(self, type_id, obs, identity, mask, rng=None, mode="sample"):
        """Return ``(actions, log_probs, values)`` for a batch of agents of one type."""
        logits, value = self.policies[type_id].infer(np.atleast_2d(obs), np.atleast_2d(identity))
        mask = np.atleast_2d(mask)
        uniforms = None if mode == "greedy" else rng.random(len(logits))
        a, logp = choose(logits, mask, uniforms, greedy=(mode == "greedy"))
        return a, logp, value

    def freeze(self, group_id: int) -> "PolicyGroup":
        """Deep-copied frozen snapshot with fresh performance counters."""
        snap = PolicyGroup(group_id, copy.deepcopy(self.policies), frozen=True)
        return snap

    # ------------------------------------------------------------ storage
    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for d, pol in enumerate(self.policies):
            out.update({f"type{d}/actor/{k}": v for k, v in pol.actor_params.arrays.items()})
            out.update({f"type{d}/critic/{k}": v for k, v in pol.critic_params.arrays.items()})
        return out

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in sorted(self.arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def meta(self) -> dict:
        p = self.policies[0]
        return {"group_id": self.group_id, "frozen": self.frozen, "wins": self.wins, "games": self.games,
                "obs_dim": p.obs_dim, "n_actions": p.n_actions, "n_types": p.n_types,
                "net": vars(p.cfg)}

    def save(self, path, extra: Optional[Dict[str, np.ndarray]] = None, meta: Optional[dict] = None):
        arrays = self.arrays()
        arrays.update(extra or {})
        nn.save_arrays(path, arrays, {"group": self.meta(), **(meta or {})})

    @classmethod
    def load(cls, path):
        arrays, meta = nn.load_arrays(path)
        g = meta["group"]
        cfg = NetConfig(**g["net"])
        rng = np.random.default_rng(0)
        group = cls.create(g["group_id"], g["obs_dim"], g["n_actions"], g["n_types"], rng, cfg)
        for d, pol in enumerate(group.policies):
            for store, part in ((pol.actor_params, "actor"), (pol.critic_params, "critic")):
                for k in store.arrays:
                    store.arrays[k] = arrays[f"type{d}/{part}/{k}"]
        group.frozen = g["frozen"]
        group.wins, group.games = g["wins"], g["games"]
        return group, arrays, meta
