"""Training loop, evaluation, replays and checkpoints."""
from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import yaml
from scipy.stats import binomtest

from .env import Arena, N_ACTIONS, N_TYPES, ScenarioConfig, ConfigError, dumps_record
from .league import League, league_update, load_league, record_outcome, sample_combination, save_league
from .learner import Learner, LearnerConfig, TypeBatch, gae_events, priority_factor
from .nn import ContractError, TrainingDivergence
from .policy import PURE, MixedCombination, NetConfig, PolicyGroup, build_identity, choose

log = logging.getLogger(__name__)

_STREAMS = {"env": 1, "policy": 2, "combo": 3, "init": 4, "gate_env": 5, "gate_policy": 6,
            "eval_env": 7, "eval_policy": 8, "eval_combo": 9}


def derive_seed(seed: int, stream: str, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), _STREAMS[stream], int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    net: NetConfig = field(default_factory=NetConfig)
    league_capacity: int = 10
    p_pure: float = 0.1
    eval_gate_games: int = 32
    eval_episodes: int = 320
    iterations: int = 100
    seed: int = 0
    parallel_envs: int = 16
    decision_interval: int = 1
    output_dir: str = "runs/phlrl"

    def validate(self):
        self.scenario.validate()
        try:
            self.learner.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("league_capacity", "eval_gate_games", "eval_episodes", "iterations", "parallel_envs",
                     "decision_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.p_pure <= 1.0:
            raise ConfigError("p_pure must lie in [0, 1]")
        return self

    def to_dict(self):
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            scenario = ScenarioConfig.from_dict(d.pop("scenario", {}) or {})
            learner = LearnerConfig(**(d.pop("learner", {}) or {}))
            net = NetConfig(**(d.pop("net", {}) or {}))
            return cls(scenario=scenario, learner=learner, net=net, **d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def smoke(cls, seed: int = 0, output_dir: str = "runs/smoke") -> "RunConfig":
        """Tiny 7-vs-7 run under 2,000 episodes (62 iterations of 32).

        The sparse team reward gives almost no per-tick credit at this budget,
        so agents commit to each action for 12 ticks and returns are
        undiscounted Monte Carlo (gamma = lam = 1) with a faster actor.
        """
        return cls(
            scenario=ScenarioConfig.tiny(),
            learner=LearnerConfig(gamma=1.0, lam=1.0, actor_lr=0.003, league_interval=10),
            net=NetConfig(hidden=64),
            iterations=62, seed=seed, parallel_envs=32, decision_interval=12, output_dir=output_dir,
        )

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


# --------------------------------------------------------------------------
# rollouts


class PolicyTeam:
    """Team-0 controller where each (world, type) is driven by some policy group."""

    def __init__(self, arena: Arena, groups: Sequence[Sequence[PolicyGroup]], identities, trainable=None):
        E, n = len(groups), arena.n_per_team
        self.types = arena.types[:n]
        self.policies = []
        index = {}
        self.policy_idx = np.zeros((E, n), dtype=np.int64)
        self.identity = np.zeros((E, n, 2 * N_TYPES))
        self.trainable = np.zeros((E, n), dtype=bool)
        for e in range(E):
            for i in range(n):
                d = self.types[i]
                pol = groups[e][d].policies[d]
                if id(pol) not in index:
                    index[id(pol)] = len(self.policies)
                    self.policies.append(pol)
                self.policy_idx[e, i] = index[id(pol)]
                self.identity[e, i] = identities[e][d]
                if trainable is not None:
                    self.trainable[e, i] = trainable[e][d]

    def act(self, obs, masks, live, uniforms, greedy=False, need_value=False):
        E, n = live.shape
        actions = np.zeros((E, n), dtype=np.int64)
        logp = np.zeros((E, n))
        value = np.zeros((E, n))
        for p, pol in enumerate(self.policies):
            sel = live & (self.policy_idx == p)
            if not sel.any():
                continue
            logits, v = pol.infer(obs[sel], self.identity[sel], with_value=need_value)
            a, lp = choose(logits, masks[sel], uniforms[sel], greedy=greedy)
            actions[sel] = a
            logp[sel] = lp
            if need_value:
                value[sel] = v
        return actions, logp, value


class ScriptedTeam:
    def __init__(self, arena):
        self.arena = arena

    def act_state(self, state):
        return self.arena.scripted_expert(state, 0)[:, : self.arena.n_per_team]


class RandomTeam:
    def act(self, obs, masks, live, uniforms, greedy=False, need_value=False):
        E, n = live.shape
        actions = np.zeros((E, n), dtype=np.int64)
        if live.any():
            a, _ = choose(np.zeros(masks[live].shape), masks[live], uniforms[live])
            actions[live] = a
        return actions, np.zeros((E, n)), np.zeros((E, n))


@dataclass
class EpisodeBatch:
    won: np.ndarray            # (E,) bool
    reward: np.ndarray         # (E,) terminal reward of team 0
    length: np.ndarray         # (E,)
    remaining: np.ndarray      # (E, 2)
    steps: Optional[dict] = None
    replay: Optional[List[dict]] = None


def play(arena: Arena, env_seeds, team, sample_seeds, greedy=False, collect=False, record_world=None,
         interval: int = 1):
    """Run one batch of episodes, team 0 under ``team`` and team 1 scripted.

    Team-0 agents commit to an action for ``interval`` ticks; an agent whose
    held action turns illegal (its target died or left sensing range)
    decides again on that tick.
    """
    n = arena.n_per_team
    E = len(env_seeds)
    state = arena.reset(env_seeds)
    rngs = [np.random.default_rng(s) for s in sample_seeds]
    steps = {k: [] for k in ("obs", "mask", "action", "logp", "value", "decide")} if collect else None
    replay = [] if record_world is not None else None
    rewards0 = np.zeros(E)
    held = np.zeros((E, n), dtype=np.int64)
    timer = np.zeros((E, n), dtype=np.int64)
    while not state.done.all():
        tg = arena.targets(state)
        masks = arena.action_masks(state, tg)
        live = (state.alive & ~state.done[:, None])[:, :n]
        uniforms = np.stack([r.random(n) for r in rngs])
        obs = lp = v = None
        if isinstance(team, ScriptedTeam):
            decide = live
            a0 = team.act_state(state)
        else:
            still_legal = np.take_along_axis(masks[:, :n], held[..., None], 2)[..., 0]
            decide = live & ((timer <= 0) | ~still_legal)
            obs = arena.observe(state)[:, :n]
            a0, lp, v = team.act(obs, masks[:, :n], decide, uniforms, greedy=greedy, need_value=collect)
            held = np.where(decide, a0, held)
            timer = np.where(decide, interval, timer) - 1
            a0 = held
        actions = arena.scripted_expert(state, 1, tg)
        actions[:, :n] = np.where(live, a0, 0)
        if collect:
            steps["obs"].append(obs)
            steps["mask"].append(masks[:, :n])
            steps["action"].append(actions[:, :n].copy())
            steps["logp"].append(lp)
            steps["value"].append(v)
            steps["decide"].append(decide)
        if replay is not None and not state.done[record_world]:
            replay.append(arena.replay_record(state, actions, record_world))
        r, fin = arena.step(state, actions, tg)
        rewards0[fin] = r[fin, 0]
    outcomes = [arena.outcome(state, e) for e in range(E)]
    if replay is not None:
        replay.append({"outcome": outcomes[record_world].to_dict()})
    batch = EpisodeBatch(
        won=np.array([o.winner == 0 for o in outcomes]),
        reward=rewards0,
        length=np.array([o.length for o in outcomes]),
        remaining=np.array([o.remaining for o in outcomes]),
        replay=replay,
    )
    if collect:
        batch.steps = {k: np.stack(v) for k, v in steps.items()}
    return batch


def build_type_batches(arena, team: PolicyTeam, batch: EpisodeBatch, priorities, replaced, gamma, lam):
    """Turn a collected batch into per-type learner inputs (trainable rows only)."""
    st = batch.steps
    decide = st["decide"]                               # (T,E,n)
    T, E, n = decide.shape
    last = T - 1 - np.argmax(decide[::-1], axis=0)      # tick of each agent's final decision
    # the team reward arrives when the episode ends; an agent that died
    # earlier sits out the remaining ticks as an absorbing no-op
    terminal = batch.reward[:, None] * gamma ** (batch.length[:, None] - 1 - last)
    adv, ret = gae_events(st["value"].reshape(T, -1), decide.reshape(T, -1), terminal.reshape(-1), gamma, lam)
    adv, ret = adv.reshape(T, E, n), ret.reshape(T, E, n)
    out = {}
    for d in range(N_TYPES):
        sel = decide & team.trainable[None] & (team.types == d)[None, None, :]
        if not sel.any():
            out[d] = None
            continue
        t_idx, e_idx, i_idx = np.nonzero(sel)
        out[d] = TypeBatch(
            obs=st["obs"][sel], identity=team.identity[e_idx, i_idx], mask=st["mask"][sel],
            action=st["action"][sel], logp_old=st["logp"][sel], adv=adv[sel], ret=ret[sel],
            priority=np.asarray(priorities)[e_idx], replaced_type=np.asarray(replaced)[e_idx],
        )
    return out


def assignments(frontier: PolicyGroup, league: League, combos: Sequence[MixedCombination]):
    groups, identities, trainable = [], [], []
    for c in combos:
        member = None if c.pure else league.members[c.league_index]
        perf = member.beta if member is not None else 1.0
        groups.append([member if c.source(d) is not None else frontier for d in range(N_TYPES)])
        identities.append([build_identity(d, c, perf, N_TYPES) for d in range(N_TYPES)])
        trainable.append([c.source(d) is None for d in range(N_TYPES)])
    return groups, identities, trainable


# --------------------------------------------------------------------------
# training


@dataclass
class TrainerState:
    frontier: PolicyGroup
    league: League
    learner: Learner
    iteration: int = 0
    episodes: int = 0
    next_id: int = 1


def _chunks(n, size):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def gate_wins(arena, group: PolicyGroup, games: int, cfg: RunConfig, iteration: int) -> int:
    wins = 0
    for lo, hi in _chunks(games, cfg.parallel_envs):
        k = range(lo, hi)
        team = PolicyTeam(arena, [[group] * N_TYPES] * len(k),
                          [[build_identity(d, PURE, 1.0, N_TYPES) for d in range(N_TYPES)]] * len(k))
        b = play(arena, [derive_seed(cfg.seed, "gate_env", iteration * 100003 + j) for j in k], team,
                 [derive_seed(cfg.seed, "gate_policy", iteration * 100003 + j) for j in k],
                 interval=cfg.decision_interval)
        wins += int(b.won.sum())
    return wins


def init_state(cfg: RunConfig, arena: Arena) -> TrainerState:
    rng = np.random.default_rng(derive_seed(cfg.seed, "init", 0))
    frontier = PolicyGroup.create(0, arena.obs_dim, N_ACTIONS, N_TYPES, rng, cfg.net)
    return TrainerState(frontier, League(cfg.league_capacity, N_TYPES), Learner(frontier, cfg.learner))


def train_iteration(cfg: RunConfig, arena: Arena, ts: TrainerState) -> dict:
    """One training iteration; mutates ``ts`` and returns the metrics record."""
    t0 = time.perf_counter()
    lc = cfg.learner
    it = ts.iteration
    combo_rng = np.random.default_rng(derive_seed(cfg.seed, "combo", it))
    combos = [sample_combination(ts.league, combo_rng, cfg.p_pure) for _ in range(lc.batch_episodes)]
    groups, identities, trainable = assignments(ts.frontier, ts.league, combos)

    played = []
    for lo, hi in _chunks(lc.batch_episodes, cfg.parallel_envs):
        ep = range(ts.episodes + lo, ts.episodes + hi)
        team = PolicyTeam(arena, groups[lo:hi], identities[lo:hi], trainable[lo:hi])
        b = play(arena, [derive_seed(cfg.seed, "env", j) for j in ep], team,
                 [derive_seed(cfg.seed, "policy", j) for j in ep], collect=True,
                 interval=cfg.decision_interval)
        played.append((lo, hi, team, b))

    won = np.concatenate([b.won for *_, b in played])
    for c, w in zip(combos, won):
        record_outcome(ts.league, c, bool(w))
    ids = ts.league.member_ids
    prio = [priority_factor(ts.league.stats, c.replaced_type, lc.psi, ids) if lc.prioritize else 1.0
            for c in combos]
    replaced = [c.replaced_type if not c.pure else -1 for c in combos]

    parts = {d: [] for d in range(N_TYPES)}
    for lo, hi, team, b in played:
        tb = build_type_batches(arena, team, b, prio[lo:hi], replaced[lo:hi], lc.gamma, lc.lam)
        for d in range(N_TYPES):
            parts[d].append(tb[d])
    batches = {d: TypeBatch.concat(parts[d]) for d in range(N_TYPES)}
    report = ts.learner.update(batches)

    ts.iteration += 1
    ts.episodes += lc.batch_episodes
    league_event = None
    if ts.iteration % lc.league_interval == 0:
        cand, evicted = league_update(
            ts.league, ts.frontier, ts.next_id,
            lambda g, n: gate_wins(arena, g, n, cfg, ts.iteration), cfg.eval_gate_games)
        ts.next_id += 1
        league_event = {"candidate": cand.group_id, "candidate_beta": cand.beta,
                        "evicted": None if evicted is None else evicted.group_id}

    st = ts.league.stats
    return {
        "iteration": ts.iteration,
        "episodes": ts.episodes,
        "win_rate": float(won.mean()),
        "mean_length": float(np.concatenate([b.length for *_, b in played]).mean()),
        "frontier_beta": st.frontier_beta,
        "beta_all": ts.league.overall_beta(),
        "beta_types": [ts.league.type_beta(d) for d in range(N_TYPES)],
        "mean_priority": float(np.mean(prio)),
        "league_size": len(ts.league),
        "league_ids": ids,
        "league_event": league_event,
        **{f"loss_{k}": v for k, v in report.to_dict().items()},
        "wall_clock": time.perf_counter() - t0,
    }


def save_checkpoint(directory: str, cfg: RunConfig, ts: TrainerState) -> None:
    """Write frontier, optimizer state and league atomically into ``directory``."""
    tmp = directory + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(tmp)
    meta = {"iteration": ts.iteration, "episodes": ts.episodes, "next_id": ts.next_id,
            "config": cfg.to_dict(), **ts.learner.state_meta()}
    ts.frontier.save(os.path.join(tmp, "frontier.npz"), ts.learner.state_arrays(), meta)
    save_league(ts.league, os.path.join(tmp, "league"))
    old = directory + ".old"
    if os.path.exists(directory):
        os.replace(directory, old)
    os.replace(tmp, directory)
    shutil.rmtree(old, ignore_errors=True)


def load_checkpoint(directory: str, cfg: Optional[RunConfig] = None):
    path = os.path.join(directory, "frontier.npz")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint at {directory}")
    frontier, arrays, meta = PolicyGroup.load(path)
    cfg = cfg or RunConfig.from_dict(meta["config"])
    league = load_league(os.path.join(directory, "league"))
    learner = Learner(frontier, cfg.learner)
    learner.load_state(arrays, meta)
    ts = TrainerState(frontier, league, learner, meta["iteration"], meta["episodes"], meta["next_id"])
    return ts, cfg


def train(cfg: RunConfig, resume: bool = False, iterations: Optional[int] = None) -> Iterator[dict]:
    """Run the training loop, yielding one metrics record per iteration.

    Metrics go to ``<output_dir>/metrics.jsonl`` and checkpoints to
    ``<output_dir>/checkpoint`` after every league update and at the end.
    """
    cfg.validate()
    arena = Arena(cfg.scenario)
    os.makedirs(cfg.output_dir, exist_ok=True)
    ckpt = os.path.join(cfg.output_dir, "checkpoint")
    metrics_path = os.path.join(cfg.output_dir, "metrics.jsonl")
    if resume and os.path.exists(os.path.join(ckpt, "frontier.npz")):
        ts, _ = load_checkpoint(ckpt, cfg)
        kept = []
        if os.path.exists(metrics_path):
            with open(metrics_path) as fh:
                kept = [ln for ln in fh if json.loads(ln)["iteration"] <= ts.iteration]
        with open(metrics_path, "w") as fh:
            fh.writelines(kept)
    else:
        ts = init_state(cfg, arena)
        open(metrics_path, "w").close()
    total = iterations if iterations is not None else cfg.iterations
    while ts.iteration < total:
        record = train_iteration(cfg, arena, ts)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if record["league_event"] is not None or ts.iteration == total:
            save_checkpoint(ckpt, cfg, ts)
        yield record


def run_training(cfg: RunConfig, resume: bool = False) -> List[dict]:
    return list(train(cfg, resume=resume))


# --------------------------------------------------------------------------
# evaluation and replay


MODES = ("pure", "frontier_inclusive", "frontier_exclusive")


def wilson_interval(wins: int, n: int):
    ci = binomtest(int(wins), int(n)).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def _eval_team(arena, source, mode, lo, hi, seed, frontier=None, league=None):
    if source == "scripted":
        return ScriptedTeam(arena)
    if source == "random":
        return RandomTeam()
    E = hi - lo
    if mode == "pure":
        combos = [PURE] * E
    elif mode == "frontier_inclusive":
        combos = [sample_combination(league, np.random.default_rng(derive_seed(seed, "eval_combo", j)), 0.0)
                  for j in range(lo, hi)]
    else:
        if not len(league):
            raise ContractError("frontier_exclusive evaluation needs a non-empty league")
        groups = []
        for j in range(lo, hi):
            rng = np.random.default_rng(derive_seed(seed, "eval_combo", j))
            groups.append([league.members[int(rng.integers(len(league)))] for _ in range(N_TYPES)])
        ident = [[build_identity(d, PURE, 1.0, N_TYPES) for d in range(N_TYPES)]] * E
        return PolicyTeam(arena, groups, ident)
    groups, identities, _ = assignments(frontier, league, combos)
    return PolicyTeam(arena, groups, identities)


def evaluate(source: str, mode: str = "pure", episodes: int = 320, seed: int = 0,
             scenario: Optional[ScenarioConfig] = None, parallel_envs: int = 64, greedy: bool = True,
             interval: Optional[int] = None) -> dict:
    """Win rate of team 0 against the scripted opponent, with a Wilson 95% interval.

    ``source`` is a checkpoint directory, ``"scripted"`` or ``"random"``.
    ``interval`` defaults to the checkpoint's decision interval (1 for the
    built-in controls).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    frontier = league = None
    if source not in ("scripted", "random"):
        ts, cfg = load_checkpoint(source)
        frontier, league = ts.frontier, ts.league
        scenario = scenario or cfg.scenario
        interval = interval or cfg.decision_interval
    interval = interval or 1
    arena = Arena(scenario or ScenarioConfig())
    wins = 0
    for lo, hi in _chunks(episodes, parallel_envs):
        team = _eval_team(arena, source, mode, lo, hi, seed, frontier, league)
        b = play(arena, [derive_seed(seed, "eval_env", j) for j in range(lo, hi)], team,
                 [derive_seed(seed, "eval_policy", j) for j in range(lo, hi)], greedy=greedy,
                 interval=interval)
        wins += int(b.won.sum())
    low, high = wilson_interval(wins, episodes)
    return {"source": source, "mode": mode, "episodes": episodes, "wins": wins, "interval": interval,
            "win_rate": wins / episodes, "ci_low": low, "ci_high": high, "seed": seed}


def replay(source: str, seed: int = 0, scenario: Optional[ScenarioConfig] = None, greedy: bool = True,
           interval: Optional[int] = None) -> List[str]:
    """Replay lines for one episode, or the canonical re-emission of a recorded file."""
    if os.path.isfile(source):
        with open(source) as fh:
            return [dumps_record(json.loads(line)) for line in fh if line.strip()]
    frontier = league = None
    if source not in ("scripted", "random"):
        ts, cfg = load_checkpoint(source)
        frontier, league = ts.frontier, ts.league
        scenario = scenario or cfg.scenario
        interval = interval or cfg.decision_interval
    arena = Arena(scenario or ScenarioConfig())
    team = _eval_team(arena, source, "pure", 0, 1, seed, frontier, league)
    b = play(arena, [derive_seed(seed, "eval_env", 0)], team, [derive_seed(seed, "eval_policy", 0)],
             greedy=greedy, record_world=0, interval=interval or 1)
    return [dumps_record(r) for r in b.replay]


def write_lines(path: str, lines: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for ln in lines:
            fh.write(ln + "\n")


def read_metrics(path: str) -> List[dict]:
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]
