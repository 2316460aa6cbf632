"""Prioritized PPO learner: GAE, advantage prioritization and dual-clip surrogate."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .nn import Adam, ContractError, Tape, TrainingDivergence
from .policy import PolicyGroup


@dataclass
class LearnerConfig:
    gamma: float = 0.99
    lam: float = 0.98
    clip_eps: float = 0.2
    dual_clip: float = 3.0
    psi: float = 0.5
    entropy_coef: float = 0.0005
    critic_lr: float = 0.004
    actor_lr: float = 0.0004
    batch_episodes: int = 32
    ppo_epochs: int = 24
    league_interval: int = 100
    max_grad_norm: float = 10.0
    value_coef: float = 1.0
    prioritize: bool = True

    def validate(self):
        if not 0.0 < self.psi < 1.0:
            raise ValueError(f"psi must lie in (0, 1), got {self.psi}")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.dual_clip <= 1.0:
            raise ValueError("dual_clip must exceed 1")
        for name in ("batch_episodes", "ppo_epochs", "league_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def gae(rewards, values, gamma: float, lam: float):
    """Generalized advantage estimates for one trajectory.

    ``values`` has one more entry than ``rewards``: the bootstrap value of
    the state after the last step (0 at a terminal state).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (rewards.shape[0] + 1,):
        raise ContractError(f"need len(values) == len(rewards) + 1, got {values.shape} vs {rewards.shape}")
    T = rewards.shape[0]
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values[:-1]


def gae_batch(rewards, values, valid, gamma: float, lam: float):
    """Column-wise GAE over (T, B) arrays.

    Each column's valid steps form a prefix and the state after the last
    valid step is terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.where(valid, values, 0.0)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    nxt = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * nxt - values[t]
        acc = np.where(valid[t], delta + gamma * lam * acc, 0.0)
        adv[t] = acc
        nxt = values[t]
    return adv, np.where(valid, adv + values, 0.0)


def gae_events(values, decide, terminal, gamma: float, lam: float):
    """GAE over decision events spaced an arbitrary number of ticks apart.

    ``values`` and ``decide`` are (T, B) tick-indexed arrays; a column's
    decisions are the ticks where ``decide`` is set.  ``terminal`` (B,) is
    the team reward already discounted to each column's last decision.
    Consecutive decisions ``g`` ticks apart are linked by ``gamma**g`` and
    ``(gamma*lam)**g``, which reduces to ordinary GAE when every tick is a
    decision.
    """
    values = np.asarray(values, dtype=np.float64)
    T, B = values.shape
    adv = np.zeros((T, B))
    next_v = np.zeros(B)
    next_a = np.zeros(B)
    next_t = np.full(B, -1)
    for t in range(T - 1, -1, -1):
        d = decide[t]
        if not d.any():
            continue
        last = next_t < 0
        gap = np.where(last, 0, next_t - t)
        delta = np.where(last, terminal, gamma ** gap * next_v) - values[t]
        a = delta + np.where(last, 0.0, (gamma * lam) ** gap * next_a)
        adv[t] = np.where(d, a, 0.0)
        next_v = np.where(d, values[t], next_v)
        next_a = np.where(d, a, next_a)
        next_t = np.where(d, t, next_t)
    return adv, np.where(decide, adv + values, 0.0)


def prioritization(beta_all: float, beta_type: float, psi: float) -> float:
    return (psi + beta_all) / (psi + beta_type)


def priority_factor(stats, replaced_type: Optional[int], psi: float, member_ids) -> float:
    """Advantage multiplier for samples of episodes where ``replaced_type`` ran a league policy.

    Pure-frontier episodes and undefined aggregates give 1.
    """
    if replaced_type is None or replaced_type < 0:
        return 1.0
    b_type = stats.type_beta(replaced_type, member_ids)
    b_all = stats.overall_beta(member_ids)
    if b_type is None or b_all is None:
        return 1.0
    return prioritization(b_all, b_type, psi)


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


@dataclass
class TypeBatch:
    obs: np.ndarray
    identity: np.ndarray
    mask: np.ndarray
    action: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray        # raw GAE
    ret: np.ndarray
    priority: np.ndarray   # A_beta per sample
    replaced_type: np.ndarray

    def __len__(self):
        return len(self.action)

    def conditioning(self):
        """Distinct identity rows and the row index of every sample (cached)."""
        cached = getattr(self, "_cond", None)
        if cached is None:
            cond, groups = np.unique(self.identity, axis=0, return_inverse=True)
            cached = self._cond = (cond, np.asarray(groups).reshape(-1))
        return cached

    def select(self, idx):
        return TypeBatch(**{k: v[idx] for k, v in vars(self).items() if not k.startswith("_")})

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if p is not None and len(p)]
        if not parts:
            return None
        keys = [k for k in vars(parts[0]) if not k.startswith("_")]
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in keys})


@dataclass
class LossReport:
    surrogate: float
    critic_loss: float
    entropy: float
    mean_priority: float
    grad_norm: float
    clip_fraction: float
    samples: int

    def to_dict(self):
        return asdict(self)


def sample_weights(batches: Dict[int, TypeBatch], prioritize: bool = True) -> Dict[int, np.ndarray]:
    """Per-sample policy-gradient weights: batch-normalized GAE times A_beta."""
    types = sorted(d for d, b in batches.items() if b is not None and len(b))
    if not types:
        return {}
    flat = np.concatenate([batches[d].adv for d in types])
    norm = normalize_advantages(flat) if len(flat) >= 2 else flat - flat.mean()
    out, start = {}, 0
    for d in types:
        n = len(batches[d])
        w = norm[start:start + n]
        out[d] = w * batches[d].priority if prioritize else w.copy()
        start += n
    return out


def surrogate_terms(tape, logits, batch: TypeBatch, weight, config: LearnerConfig):
    """Per-sample dual-clip surrogate and entropy nodes for one type."""
    logp_all = nn.masked_log_softmax(tape, logits, batch.mask)
    logp = nn.pick(tape, logp_all, batch.action)
    ratio = nn.exp(tape, nn.sub(tape, logp, tape.const(batch.logp_old)))
    w = tape.const(weight)
    eps = config.clip_eps
    s = nn.minimum(tape, nn.mul(tape, ratio, w), nn.mul(tape, nn.clip(tape, ratio, 1 - eps, 1 + eps), w))
    floor = tape.const(config.dual_clip * weight)
    s = nn.where(tape, weight < 0, nn.maximum(tape, s, floor), s)
    ent = nn.masked_entropy(tape, logits, batch.mask)
    return s, ent, ratio


class Learner:
    """Owns the optimizer state for the frontier group's parameters."""

    def __init__(self, frontier: PolicyGroup, config: Optional[LearnerConfig] = None):
        self.frontier = frontier
        self.config = config or LearnerConfig()
        self.config.validate()
        self.actor_opt = Adam(learning_rate=self.config.actor_lr)
        self.critic_opt = Adam(learning_rate=self.config.critic_lr)

    def _actor_pass(self, batches, weights, n_total):
        cfg = self.config
        grads, surr, ent, clipped = {}, 0.0, 0.0, 0.0
        for d, batch in batches.items():
            pol = self.frontier.policies[d]
            tape = Tape()
            params = pol.actor_params.watch(tape)
            cond, groups = batch.conditioning()
            logits = pol.logits(tape, params, tape.const(batch.obs), tape.const(cond), groups)
            s, h, ratio = surrogate_terms(tape, logits, batch, weights[d], cfg)
            loss = nn.scale(tape, nn.add(tape, nn.total(tape, s), nn.scale(tape, nn.total(tape, h), cfg.entropy_coef)),
                            -1.0 / n_total)
            if not np.isfinite(loss.value):
                raise TrainingDivergence(f"non-finite actor loss for type {d}")
            g = tape.backward(loss)
            for k, node in params.items():
                grads[f"type{d}/{k}"] = g.get(node.index, np.zeros_like(node.value))
            surr += float(s.value.sum())
            ent += float(h.value.sum())
            clipped += float((np.abs(ratio.value - 1.0) > cfg.clip_eps).sum())
        return grads, surr / n_total, ent / n_total, clipped / n_total

    def _critic_pass(self, batches, n_total):
        grads, total = {}, 0.0
        for d, batch in batches.items():
            pol = self.frontier.policies[d]
            tape = Tape()
            params = pol.critic_params.watch(tape)
            cond, groups = batch.conditioning()
            v = pol.values(tape, params, tape.const(batch.obs), tape.const(cond), groups)
            err = nn.square(tape, nn.sub(tape, v, tape.const(batch.ret)))
            loss = nn.scale(tape, nn.total(tape, err), self.config.value_coef / n_total)
            if not np.isfinite(loss.value):
                raise TrainingDivergence(f"non-finite critic loss for type {d}")
            g = tape.backward(loss)
            for k, node in params.items():
                grads[f"type{d}/{k}"] = g.get(node.index, np.zeros_like(node.value))
            total += float(err.value.sum())
        return grads, total / n_total

    def _params(self, part):
        out = {}
        for d, pol in enumerate(self.frontier.policies):
            store = pol.actor_params if part == "actor" else pol.critic_params
            out.update({f"type{d}/{k}": v for k, v in store.arrays.items()})
        return out

    def update(self, batches: Dict[int, TypeBatch]) -> LossReport:
        """Run ``ppo_epochs`` full-batch passes over the frontier-controlled samples."""
        if self.frontier.frozen:
            raise ContractError("cannot train a frozen policy group")
        cfg = self.config
        batches = {d: b for d, b in batches.items() if b is not None and len(b)}
        n_total = sum(len(b) for b in batches.values())
        if n_total == 0:
            return LossReport(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0)
        weights = sample_weights(batches, cfg.prioritize)
        actor_params, critic_params = self._params("actor"), self._params("critic")
        surr = ent = clip_frac = critic = norm = 0.0
        for _ in range(cfg.ppo_epochs):
            g, surr, ent, clip_frac = self._actor_pass(batches, weights, n_total)
            norm = nn.clip_by_global_norm(g, cfg.max_grad_norm)
            self.actor_opt.update(actor_params, g)
            g, critic = self._critic_pass(batches, n_total)
            nn.clip_by_global_norm(g, cfg.max_grad_norm)
            self.critic_opt.update(critic_params, g)
        prio = np.concatenate([b.priority for b in batches.values()])
        return LossReport(surr, critic, ent, float(prio.mean()), norm, clip_frac, n_total)

    def state_arrays(self):
        out = self.actor_opt.state_arrays("opt_actor")
        out.update(self.critic_opt.state_arrays("opt_critic"))
        return out

    def state_meta(self):
        return {"actor_step": self.actor_opt.step, "critic_step": self.critic_opt.step}

    def load_state(self, arrays, meta):
        self.actor_opt.load_arrays("opt_actor", arrays)
        self.critic_opt.load_arrays("opt_critic", arrays)
        self.actor_opt.step = meta["actor_step"]
        self.critic_opt.step = meta["critic_step"]


def ppo_update(frontier: PolicyGroup, batches, config: Optional[LearnerConfig] = None,
               learner: Optional[Learner] = None) -> LossReport:
    learner = learner or Learner(frontier, config)
    return learner.update(batches)
