"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary is printed at
the end of the session) or directly with ``python tests/test_acceptance.py``.
"""
import itertools
import time

import numpy as np
import pytest

from phlrl import nn
from phlrl.env import Arena, ScenarioConfig
from phlrl.harness import (
    PolicyTeam, RunConfig, assignments, build_type_batches, derive_seed, evaluate, init_state, play, train,
    train_iteration,
)
from phlrl.league import BetaStats, League, admit, closest_pair, eviction_position, sample_combination
from phlrl.learner import (
    LearnerConfig, TypeBatch, gae, priority_factor, prioritization, sample_weights, surrogate_terms,
)
from phlrl.nn import Tape
from phlrl.policy import MixedCombination, NetConfig, PolicyGroup, TypePolicy, build_identity

RESULTS = {}


def record(number, ok, detail):
    RESULTS[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


# 1 -------------------------------------------------------------- formula oracles

def _gae_double_sum(r, v, g, l):
    T = len(r)
    delta = r + g * v[1:] - v[:-1]
    out = np.zeros(T)
    for t in range(T):
        for k in range(T - t):
            out[t] += (g * l) ** k * delta[t + k]
    return out


def test_criterion_1_formula_oracles():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 51))
        r, v = rng.normal(size=T), rng.normal(size=T + 1)
        v[-1] = 0.0 if rng.random() < 0.5 else v[-1]
        g, l = rng.uniform(0.9, 1.0), rng.uniform(0.9, 1.0)
        adv, _ = gae(r, v, g, l)
        worst = max(worst, float(np.max(np.abs(adv - _gae_double_sum(r, v, g, l)))))
    elapsed = time.perf_counter() - t0

    grid = np.linspace(0.0, 1.0, 10)
    psis = np.linspace(0.05, 0.95, 10)
    exact = 0
    for psi, b_all, b_dm in itertools.product(psis, grid, grid):
        exact += prioritization(b_all, b_dm, psi) == (psi + b_all) / (psi + b_dm)
    # the same factor read through league statistics
    stats = BetaStats(3, {(1, 0): [3.0, 10.0], (1, 1): [6.0, 10.0], (1, 2): [9.0, 10.0]})
    via_stats = priority_factor(stats, 0, 0.5, [1]) == (0.5 + 0.6) / (0.5 + 0.3)
    ok = worst <= 1e-10 and elapsed < 5.0 and exact == 1000 and via_stats
    assert record(1, ok, f"GAE max err {worst:.1e} in {elapsed:.2f}s; A_beta exact on {exact}/1000 grid points")


# 2 --------------------------------------------------------------- identity vectors

def test_criterion_2_identity_worked_example():
    beta_k = 0.37
    combo = MixedCombination(league_index=0, replaced_type=1, member_id=5)   # Pi^[k, d_2]
    got = [build_identity(d, combo, beta_k, 4).tolist() for d in range(3)]
    want = [[1, beta_k, 1, 1, 1, 0, 0, 0],
            [1, 1, 1, 1, 0, 1, 0, 0],
            [1, beta_k, 1, 1, 0, 0, 1, 0]]
    ok = got == want
    assert record(2, ok, f"F1..F3 = {got}")


# 3 --------------------------------------------------------------- gradient checks

def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def _policy_losses(pol, batch, weight, cfg):
    tape = Tape()
    actor, critic = pol.actor_params.watch(tape), pol.critic_params.watch(tape)
    cond, groups = batch.conditioning()
    obs, c = tape.const(batch.obs), tape.const(cond)
    logits = pol.logits(tape, actor, obs, c, groups)
    s, h, _ = surrogate_terms(tape, logits, batch, weight, cfg)
    a_loss = nn.scale(tape, nn.add(tape, nn.total(tape, s), nn.scale(tape, nn.total(tape, h), cfg.entropy_coef)), -1.0)
    v = pol.values(tape, critic, obs, c, groups)
    c_loss = nn.total(tape, nn.square(tape, nn.sub(tape, v, tape.const(batch.ret))))
    return tape, actor, critic, a_loss, c_loss


def test_criterion_3_gradients_match_finite_differences():
    cfg = LearnerConfig()
    t0 = time.perf_counter()
    worst, instances, gen_checked = 0.0, 0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pol = TypePolicy(0, 5, 4, 3, NetConfig(hidden=4, depth=2, gen_hidden=3, head_scale=1.0), rng)
        n = 6
        ident = np.stack([build_identity(0, MixedCombination(0, int(rng.integers(1, 3)), 1), rng.uniform(0.1, 0.9), 3)
                          for _ in range(n)])
        mask = rng.random((n, 4)) < 0.7
        mask[:, 0] = True
        action = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
        batch = TypeBatch(obs=rng.normal(size=(n, 5)), identity=ident, mask=mask, action=action,
                          logp_old=np.log(rng.uniform(0.2, 0.5, n)), adv=rng.normal(size=n),
                          ret=rng.normal(size=n), priority=np.ones(n), replaced_type=np.ones(n, int))
        weight = rng.normal(size=n)
        tape, actor, critic, a_loss, c_loss = _policy_losses(pol, batch, weight, cfg)
        ga, gc = tape.backward(a_loss), tape.backward(c_loss)
        for store, nodes, grads, which in ((pol.actor_params, actor, ga, 3), (pol.critic_params, critic, gc, 4)):
            for name, arr in store.arrays.items():
                num = nn.numeric_grad(lambda: float(_policy_losses(pol, batch, weight, cfg)[which].value), arr)
                worst = max(worst, _rel(grads.get(nodes[name].index, np.zeros_like(arr)), num))
                gen_checked += ".gen" in name
        instances += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and instances >= 20 and gen_checked > 0 and elapsed < 30
    assert record(3, ok, f"{instances} instances, worst rel err {worst:.1e}, {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------- league

def _stub(gid, beta):
    g = PolicyGroup(gid, [], frozen=True)
    g.wins, g.games = beta * 32, 32.0
    return g


def _brute_evict(members):
    order = sorted(members, key=lambda m: (-m.beta, m.group_id))
    best = None
    for p, q in itertools.combinations(range(len(order)), 2):
        key = (abs(order[p].beta - order[q].beta), p + q)
        if best is None or key < best[0]:
            best = (key, max(order[p].group_id, order[q].group_id))
    return best[1]


def test_criterion_4_league_laws():
    rng = np.random.default_rng(4)
    sequences, capacity_ok, evictions, agree, cand_cases, cand_ok = 100_000, True, 0, 0, 0, True
    for _ in range(sequences):
        cap = int(rng.integers(1, 6))
        lg = League(cap, 3)
        gid = 1
        for _ in range(int(rng.integers(1, 9))):
            cand = _stub(gid, int(rng.integers(0, 33)) / 32)
            gid += 1
            full = len(lg) >= cap
            expected = None
            if full and cand.beta > min(lg.betas()):
                expected = _brute_evict(lg.members + [cand])
            evicted = admit(lg, cand, gate_wins=1)
            capacity_ok &= len(lg) <= cap
            if expected is not None:
                evictions += 1
                agree += evicted.group_id == expected
                if evicted is cand:
                    cand_cases += 1
                    cand_ok &= cand not in lg.members and len(lg) == cap
    ok = capacity_ok and agree == evictions and cand_cases > 0 and cand_ok
    assert record(4, ok, f"{sequences} sequences, {evictions} evictions, brute-force agreement {agree}/{evictions}, "
                         f"candidate self-evicted {cand_cases} times")


# 5 --------------------------------------------------------------------- sampler

def test_criterion_5_sampler_distribution():
    lg = League(5, 3)
    lg.members = [_stub(i + 1, 0.1 * i) for i in range(5)]
    lg.sort()
    rng = np.random.default_rng(5)
    counts = np.zeros((5, 3))
    draws = 100_000
    for _ in range(draws):
        c = sample_combination(lg, rng, p_pure=0.0)
        counts[c.league_index, c.replaced_type] += 1
    dev = float(np.max(np.abs(counts / draws - 1 / 15)))
    assert record(5, dev <= 0.01, f"max |freq - 1/15| = {dev:.4f} over {draws} draws")


# 6 ----------------------------------------------------------------- environment

def test_criterion_6_environment_laws():
    t0 = time.perf_counter()
    arena = Arena(ScenarioConfig.tiny())
    episodes, batch = 10_000, 2_000
    zero_sum = sparse = sound = determ = True
    for start in range(0, episodes, batch):
        seeds = list(range(start, start + batch))
        rng = np.random.default_rng(start)
        state = arena.reset(seeds)
        trace = []
        while not state.done.all():
            mask = arena.action_masks(state)
            acts = np.argmax(np.where(mask, rng.random(mask.shape), -1.0), axis=-1)
            live = state.alive & ~state.done[:, None]
            sound &= bool(mask[live].any(-1).all())
            trace.append(acts)
            try:
                r, fin = arena.step(state, acts)
            except nn.ContractError:
                sound = False
                break
            sparse &= bool(np.all(r[~fin] == 0.0))
            zero_sum &= bool(np.allclose(r[fin].sum(-1), 0.0, atol=1e-12))
        if start == 0:
            # replay the first 50 worlds with the recorded actions
            again = arena.reset(seeds[:50])
            for acts in trace:
                arena.step(again, acts[:50])
            determ = again.pos.tobytes() == state.pos[:50].tobytes() and \
                again.health.tobytes() == state.health[:50].tobytes()

    mirror = Arena(ScenarioConfig())
    state = mirror.reset([derive_seed(6, "eval_env", j) for j in range(500)])
    while not state.done.all():
        mirror.step(state, mirror.scripted_expert(state, 0) + mirror.scripted_expert(state, 1))
    rate = float(np.mean([mirror.outcome(state, e).winner == 0 for e in range(500)]))
    elapsed = time.perf_counter() - t0
    ok = zero_sum and sparse and sound and determ and 0.4 <= rate <= 0.6 and elapsed < 120
    assert record(6, ok, f"zero-sum={zero_sum} sparse={sparse} masks={sound} deterministic={determ} "
                         f"mirror win rate {rate:.3f}, {elapsed:.0f}s")


# 7 ---------------------------------------------------------------- learning signal

def _trend_up(rates, window=5):
    """Moving average of the per-iteration win rate has a non-negative fitted slope and ends no lower."""
    ma = np.convolve(rates, np.ones(window) / window, mode="valid")
    slope = np.polyfit(np.arange(len(ma)), ma, 1)[0]
    return bool(slope >= 0 and ma[-1] >= ma[0]), float(slope)


def test_criterion_7_learning_signal(tmp_path):
    t0 = time.perf_counter()
    trained, controls, trends, episodes = [], [], [], []
    for seed in range(3):
        cfg = RunConfig.smoke(seed=seed, output_dir=str(tmp_path / f"seed{seed}"))
        recs = list(train(cfg))
        episodes.append(recs[-1]["episodes"])
        trends.append(_trend_up([r["win_rate"] for r in recs]))
        trained.append(evaluate(cfg.output_dir + "/checkpoint", episodes=320, seed=seed)["win_rate"])
        controls.append(evaluate("random", episodes=320, seed=seed, scenario=cfg.scenario,
                                 interval=cfg.decision_interval)["win_rate"])
    elapsed = time.perf_counter() - t0
    gap = float(np.mean(trained) - np.mean(controls))
    rising = sum(t for t, _ in trends)
    ok = (gap >= 0.20 and max(controls) < 0.1 and rising >= 2 and max(episodes) <= 2000 and elapsed < 1800)
    assert record(7, ok, f"trained {np.round(trained, 3).tolist()} vs random {np.round(controls, 3).tolist()}, "
                         f"gap {gap:.3f}; rising trend in {rising}/3 seeds "
                         f"(slopes {[round(s, 4) for _, s in trends]}); {max(episodes)} episodes, {elapsed:.0f}s")


# 8 ---------------------------------------------------------------- prioritization

def test_criterion_8_prioritization_effect():
    arena = Arena(ScenarioConfig.tiny(episode_limit=60))
    rng = np.random.default_rng(8)
    frontier = PolicyGroup.create(0, arena.obs_dim, 13, 3, rng, NetConfig(hidden=16, gen_hidden=8))
    lg = League(3, 3)
    member = frontier.freeze(1)
    member.wins, member.games = 10.0, 32.0
    lg.members.append(member)
    psi, low = 0.5, 1
    # type 1 depressed, the others doing well
    lg.stats.cells = {(1, 0): [24.0, 32.0], (1, 1): [2.0, 32.0], (1, 2): [20.0, 32.0]}
    combos = [MixedCombination(0, int(d), 1) for d in rng.integers(0, 3, 16)]
    groups, identities, trainable = assignments(frontier, lg, combos)
    team = PolicyTeam(arena, groups, identities, trainable)
    b = play(arena, list(range(16)), team, list(range(100, 116)), collect=True)
    prio = [priority_factor(lg.stats, c.replaced_type, psi, lg.member_ids) for c in combos]
    replaced = [c.replaced_type for c in combos]
    batches = build_type_batches(arena, team, b, prio, replaced, 0.99, 0.98)
    on, off = sample_weights(batches, True), sample_weights(batches, False)
    sel_on = np.concatenate([np.abs(on[d][batches[d].replaced_type == low]) for d in batches if batches[d] is not None])
    sel_off = np.concatenate([np.abs(off[d][batches[d].replaced_type == low]) for d in batches if batches[d] is not None])
    ratio = float(sel_on.mean() / sel_off.mean())
    b_all, b_low = lg.overall_beta(), lg.type_beta(low)
    target = (psi + b_all) / (psi + b_low)
    ok = ratio >= 0.9 * target and target > 1
    assert record(8, ok, f"mean |weight| ratio {ratio:.4f} vs (psi+b_all)/(psi+b_dm) = {target:.4f} "
                         f"({sel_on.size} samples)")


# 9 ------------------------------------------------------------------ frozen league

def test_criterion_9_frozen_league_purity():
    cfg = RunConfig(
        scenario=ScenarioConfig.tiny(episode_limit=30),
        learner=LearnerConfig(batch_episodes=2, ppo_epochs=1, league_interval=5),
        net=NetConfig(hidden=8, gen_hidden=4), league_capacity=3, eval_gate_games=2, parallel_envs=2, seed=9,
    )
    arena = Arena(cfg.scenario)
    ts = init_state(cfg, arena)
    first_seen, changed = {}, []
    for _ in range(100):
        train_iteration(cfg, arena, ts)
        for m in ts.league.members:
            cs = m.checksum()
            if first_seen.setdefault(m.group_id, cs) != cs:
                changed.append(m.group_id)
    ok = not changed and len(first_seen) >= 2 and all(m.frozen for m in ts.league.members)
    assert record(9, ok, f"{len(first_seen)} members tracked over 100 iterations, changed: {changed or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
