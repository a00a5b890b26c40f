"""Acceptance criteria, one test per criterion, each printing a pass/fail line.

The trend criteria (9, 10, 13) use desk-scale models from
``acceptance_models.ensure_models``; a cold cache trains them first (hours).
"""

import math
import time

import numpy as np
import pytest

from conftest import record_acceptance
from gradcheck import numeric_gradient, relative_error

from edgequery.metrics import bin_table, compare_bins, records_from_episodes, records_from_trace, sign_test_greater
from edgequery.nn import Dense, LSTMCell, Tensor, backprop, log_softmax, lstm_step, parameter, softmax
from edgequery.policies import AlwaysQuery, QNetPolicy, ThresholdPolicy, ensemble_argmax, sigmoid_act, sigmoid_probability
from edgequery.sac.agent import SacHyper, SacModels, sac_update
from edgequery.sac.buffer import ReplayBuffer, Transition, TransitionBatch
from edgequery.sac.bundle import CheckpointBundle
from edgequery.sac.returns import nstep_fold, reward
from edgequery.sim import EpisodeConfig, FacilityState, Measurement, facility_enqueue, facility_step, run_episodes
from edgequery.sim.agecurve import bernoulli_arrival_age_curve
from edgequery.sim.source import RandomStream
from edgequery.estimator import EstimatorConfig, EstimatorModel
from edgequery.observation import observation_dim
from edgequery.trace import (
    MTU_BYTES,
    EmulatedLink,
    LinkAssignment,
    TraceExperimentConfig,
    TraceSchedule,
    assign_traces,
    classify_brtt,
    run_trace_experiment,
    synthetic_trace_pool,
)


def verdict(number, title, passed, detail):
    record_acceptance(number, title, bool(passed), detail)
    assert passed, detail


# 1 ------------------------------------------------------------------------------


def mean_service_time(q, packets, seed):
    # server kept busy: slots between consecutive departures are service times
    f = FacilityState(q, rng_seed=seed)
    m = Measurement(None, 0)
    for _ in range(packets):
        facility_enqueue(f, m)
    slots = done = 0
    step = facility_step
    while done < packets:
        slots += 1
        if step(f)[1] is not None:
            done += 1
    return slots / packets


def test_criterion_01_geometric_service_law():
    t = time.time()
    out = {q: mean_service_time(q, 10**6, seed) for seed, q in enumerate((0.1, 0.3, 0.5, 0.9))}
    elapsed = time.time() - t
    ok = all(abs(m * q - 1) < 0.02 for q, m in out.items()) and elapsed < 30
    detail = ", ".join(f"q={q}: {m:.4f} vs {1 / q:.4f}" for q, m in out.items()) + f"; {elapsed:.1f} s"
    verdict(1, "geometric service law", ok, detail)


# 2 ------------------------------------------------------------------------------


def test_criterion_02_age_u_curve():
    t = time.time()
    utils = [round(0.05 * k, 2) for k in range(1, 20)]
    parts, ok = [], True
    for i, q in enumerate((0.3, 0.5)):
        ages = [a for _, a in bernoulli_arrival_age_curve(q, [u * q for u in utils], 10**5, seed=100 + i)]
        lo, hi, best = ages[0] / min(ages), ages[-1] / min(ages), utils[int(np.argmin(ages))]
        ok &= lo >= 1.5 and hi >= 1.5
        parts.append(f"q={q}: ends {lo:.2f}x/{hi:.2f}x of min at u={best}")
    elapsed = time.time() - t
    ok &= elapsed < 120
    verdict(2, "age U-curve", ok, "; ".join(parts) + f"; {elapsed:.1f} s")


# 3 ------------------------------------------------------------------------------


def test_criterion_03_reward_endpoints():
    grid = np.linspace(0, 8e4, 1000)
    values = reward(grid)
    ok = reward(0.0) == 5.0 and reward(8e4) == 0.0 and np.all(np.diff(values) <= 0)
    verdict(3, "reward endpoints", ok, f"r(0)={reward(0.0)}, r(8e4)={reward(8e4)}, monotone on 1000 points")


# 4 ------------------------------------------------------------------------------


def test_criterion_04_nstep_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10_000):
        k = int(rng.integers(1, 61))
        rewards = rng.uniform(0, 5, k)
        gamma = float(rng.uniform(0.01, 0.999))
        boot = None if rng.random() < 0.3 else float(rng.uniform(0, 500))
        brute = 0.0
        for j in range(k):
            brute += gamma**j * rewards[j]
        if boot is not None:
            brute += gamma**k * boot
        got = nstep_fold(list(rewards), boot, gamma)
        worst = max(worst, abs(got - brute) / max(1.0, abs(brute)))
    verdict(4, "n-step oracle", worst <= 1e-12, f"worst relative deviation {worst:.2e} over 10^4 sequences")


# 5 ------------------------------------------------------------------------------


def _gradcheck(build, params):
    analytic = backprop(build(), params)
    numeric = numeric_gradient(lambda: float(build().data), [p.data for p in params])
    return relative_error(analytic, numeric)


def test_criterion_05_gradient_checks():
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for act in ("relu", "identity", "tanh"):
            n_in, n_out, batch = (int(v) for v in rng.integers(1, 9, size=3))
            layer = Dense(n_in, n_out, act, rng)
            x = parameter(rng.normal(size=(batch, n_in)))
            proj = rng.normal(size=(batch, n_out))
            e = _gradcheck(lambda: (layer(x) * proj).sum(), [x, *layer.parameters()])
            worst[f"dense-{act}"] = max(worst.get(f"dense-{act}", 0), e)
        n_in, hidden = (int(v) for v in rng.integers(1, 9, size=2))
        cell = LSTMCell(n_in, hidden, rng)
        xs = rng.normal(size=(3, 2, n_in))
        proj = rng.normal(size=(2, hidden))

        def unrolled():
            h, c = Tensor(np.zeros((2, hidden))), Tensor(np.zeros((2, hidden)))
            for xt in xs:
                h, c = lstm_step(cell, xt, h, c)
            return (h * proj).sum() + (c * c).sum()

        worst["lstm"] = max(worst.get("lstm", 0), _gradcheck(unrolled, cell.parameters()))
        z = parameter(rng.normal(size=(3, int(rng.integers(2, 9)))))
        proj = rng.normal(size=z.shape)
        worst["softmax"] = max(worst.get("softmax", 0), _gradcheck(lambda: (softmax(z) * proj).sum(), [z]))
        worst["log_softmax"] = max(worst.get("log_softmax", 0),
                                   _gradcheck(lambda: (log_softmax(z) * proj).sum(), [z]))
    ok = all(v < 1e-4 for v in worst.values())
    verdict(5, "gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# 6 ------------------------------------------------------------------------------


def _bandit(rewards, target_entropy, updates=5000, seed=0):
    hyper = SacHyper(n=1, target_entropy=target_entropy, batch_size=64)
    m = SacModels.create(1, hyper, seed=seed, value_offset=0.0)
    buf = ReplayBuffer(10_000, seed=seed)
    rng = np.random.default_rng(seed)
    obs = np.array([1.0])
    for _ in range(updates):
        a = int(rng.random() < m.actor.probs(obs)[0, 1])
        buf.add(Transition(obs, a, rewards[a], obs, 1, hyper.gamma, True))
        if len(buf) >= hyper.batch_size:
            sac_update(buf, m, hyper)
    return m.actor.probs(obs)[0]


def test_criterion_06_discrete_sac_bandits():
    t = time.time()
    p_good = _bandit((0.0, 1.0), 0.05)[1]
    t_good = time.time() - t
    t = time.time()
    p = _bandit((1.0, 1.0), math.log(2))
    t_sym = time.time() - t
    h = float(-(p * np.log(p)).sum())
    ok = p_good > 0.95 and abs(h - math.log(2)) < 0.05 and t_good < 60 and t_sym < 60
    verdict(6, "discrete SAC bandits", ok,
            f"pi(good)={p_good:.4f} ({t_good:.1f} s); symmetric H={h:.4f} vs ln2 ({t_sym:.1f} s)")


# 7 ------------------------------------------------------------------------------

CHAIN = {
    (0, 0): (1, 0.0), (0, 1): (2, 1.0),
    (1, 0): (0, 0.5), (1, 1): (2, 0.0),
    (2, 0): (2, 0.0), (2, 1): (0, 2.0),
}


class _UniformActor:
    def __init__(self, n_states):
        self.n = n_states

    def log_probs(self, obs):
        obs = np.atleast_2d(obs)
        return Tensor(np.full((obs.shape[0], 2), -math.log(2)))

    def probs(self, obs):
        return np.full((np.atleast_2d(obs).shape[0], 2), 0.5)

    def parameters(self):
        return []


def test_criterion_07_critic_only_chain():
    gamma = 0.9
    oracle = np.zeros((3, 2))
    for _ in range(2000):
        new = np.zeros_like(oracle)
        for (s, a), (s2, r) in CHAIN.items():
            new[s, a] = r + gamma * oracle[s2].mean()
        oracle = new
    hyper = SacHyper(n=1, gamma=gamma, batch_size=6, lr_actor_critic=3e-3, tau_polyak=0.05)
    m = SacModels.create(3, hyper, seed=0, value_offset=0.0)
    m.actor = _UniformActor(3)
    eye = np.eye(3)
    keys = list(CHAIN)
    batch = TransitionBatch(
        np.array([eye[s] for s, _ in keys]), np.array([a for _, a in keys]),
        np.array([CHAIN[k][1] for k in keys]), np.array([eye[CHAIN[k][0]] for k in keys]),
        np.full(6, gamma), np.zeros(6, dtype=bool),
    )
    for _ in range(6000):
        sac_update(batch, m, hyper, update_actor=False, fixed_alpha=0.0)
    err = float(np.max(np.abs(m.critic.values(eye) - oracle)))
    verdict(7, "critic-only convergence", err < 0.05, f"max |Q - VI| = {err:.4f}")


# 8 ------------------------------------------------------------------------------


def _fixture_bundle():
    hyper = SacHyper(fc_size=4)
    models = SacModels.create(observation_dim("qnet"), hyper, seed=0, value_offset=0.0)
    models.critic.net.layers[-1].zero_()
    return CheckpointBundle("high", "qnet", hyper, EstimatorModel(EstimatorConfig(hidden_size=4, fc_size=4)), models)


def test_criterion_08_ensemble_argmax():
    import itertools

    from edgequery.sim.episode import DecisionView

    bundles = [_fixture_bundle() for _ in range(3)]
    policy = QNetPolicy(bundles)
    view = DecisionView(0, np.zeros((1, 4)), np.zeros(1), np.zeros((1, 4)), np.zeros((1, 4)), np.zeros(1, bool))
    mismatches = checked = 0
    for combo in itertools.product((0.0, 1.0, 2.0), repeat=6):
        for k, b in enumerate(bundles):
            b.models.critic.net.layers[-1].bias.data[:] = combo[2 * k : 2 * k + 2]
        policy.reset([RandomStream(0)])
        policy.estimate(np.zeros((1, 4)), np.zeros(1))
        got = int(policy.act(view)[0])
        best = max(combo)
        expect = 0 if any(v == best for v in combo[0::2]) else 1
        direct = int(ensemble_argmax(np.array(combo).reshape(1, 3, 2))[0][0])
        mismatches += (got != expect) + (direct != expect)
        checked += 1
    example = int(ensemble_argmax(np.array([[[1, 2], [0, 0], [-1, 3]]], dtype=float))[0][0])
    ok = mismatches == 0 and example == 1
    verdict(8, "ensemble argmax", ok, f"{checked} level assignments, {mismatches} mismatches; example -> {example}")


# 11 -----------------------------------------------------------------------------


def test_criterion_11_trace_byte_accounting(tmp_path):
    from edgequery.trace import parse_trace, write_trace

    path = write_trace(tmp_path / "crafted", [2, 2, 3, 7, 7, 7, 8, 12, 15, 20])
    sched = parse_trace(path)
    capacity_ok = sched.capacities() == {2: 3000, 3: 1500, 7: 4500, 8: 1500, 12: 1500, 15: 1500, 20: 1500}
    link = EmulatedLink(sched, keep_log=True)
    sends = [(0, 1024), (0, 1024), (0, 3000), (9, 1500), (13, 100), (21, 2000)]
    times = [link.send(b, t) for t, b in sends]
    fifo_ok = times == [2, 2, 7, 12, 15, 22] and times == sorted(times)
    usage_ok = link.usage == {2: 3000, 3: 1500, 7: 548, 12: 1500, 15: 100, 22: 2000}
    idle = EmulatedLink(sched, keep_log=True)
    no_bank = idle.send(3 * MTU_BYTES, 8) == 15 and idle.usage == {8: 1500, 12: 1500, 15: 1500}
    ok = capacity_ok and fifo_ok and usage_ok and no_bank
    verdict(11, "trace byte accounting", ok,
            f"capacity {capacity_ok}, delivery times {times}, usage {usage_ok}, no banking {no_bank}")


# 12 -----------------------------------------------------------------------------


def test_criterion_12_baseline_sanity():
    cfg = EpisodeConfig(episode_length=500)
    always = run_episodes(cfg, AlwaysQuery(), [1, 2, 3])
    never = run_episodes(cfg, ThresholdPolicy(math.inf), [1, 2, 3])
    n = 100_000
    p = sigmoid_probability(0.0)
    hits = int(sigmoid_act(np.zeros(n), 1, "er", np.random.default_rng(12).random(n)).sum())
    sigma = math.sqrt(n * p * (1 - p))
    ok = (all(s.query_rate == 1.0 for s in always) and all(s.query_rate == 0.0 for s in never)
          and abs(hits - n * p) <= 3 * sigma)
    verdict(12, "baseline sanity", ok,
            f"always {[s.query_rate for s in always]}, threshold inf {[s.query_rate for s in never]}, "
            f"sigmoid(0) {hits}/{n} (3 sigma = {3 * sigma:.0f})")


# trend criteria -------------------------------------------------------------------


@pytest.fixture(scope="session")
def trained():
    from acceptance_models import ensure_models

    paths = ensure_models()
    bundles = {k: CheckpointBundle.load(p) for k, p in paths.items()}
    return bundles


def ensemble(trained):
    return QNetPolicy([trained["low"], trained["mid"], trained["high"]])


EVAL_SEEDS = list(range(50_000, 50_020))


def test_criterion_09_training_trend(trained):
    cfg = EpisodeConfig(episode_length=2000)
    n = len(EVAL_SEEDS)
    qnet_hi = run_episodes(cfg, ensemble(trained), EVAL_SEEDS, [0.6] * n)
    qnet_lo = run_episodes(cfg, ensemble(trained), EVAL_SEEDS, [0.07] * n)
    one_hi = run_episodes(cfg, QNetPolicy([trained["one"]]), EVAL_SEEDS, [0.6] * n)
    diffs = [a.query_rate - b.query_rate for a, b in zip(qnet_hi, qnet_lo)]
    p = sign_test_greater(diffs)
    err_qnet = float(np.mean([s.avg_err for s in qnet_hi]))
    err_one = float(np.mean([s.avg_err for s in one_hi]))
    ok = p < 0.05 and err_qnet <= err_one
    verdict(9, "desk-scale training trend", ok,
            f"query rate q=0.6 {np.mean([s.query_rate for s in qnet_hi]):.3f} vs q=0.07 "
            f"{np.mean([s.query_rate for s in qnet_lo]):.3f} (sign test p={p:.2g}); "
            f"error at q=0.6 QNet {err_qnet:.3f} vs QNet-one {err_one:.3f}")


def test_criterion_10_sim_trace_overlap(trained):
    sim_cfg = EpisodeConfig(episode_length=2000, seed=10)
    sim_stats = run_episodes(sim_cfg, ensemble(trained), list(range(60_000, 60_400)))
    records = records_from_episodes(sim_stats, "sim", "qnet")
    cfg = TraceExperimentConfig(duration_s=120)
    for kind in ("ample", "constrained"):
        pool = synthetic_trace_pool(kind, 8, 120_000, seed=10)
        for k in range(10):
            a = assign_traces(pool, 1000 + k, kind)
            stats = run_trace_experiment(a, [ensemble(trained), ensemble(trained)], cfg, seed=1000 + k)
            records += records_from_trace(stats, f"{kind}-{k}")
    cmp = compare_bins(bin_table(records), 0.25, 0.45)
    ok = len(cmp) > 0 and all(c.within for c in cmp)
    detail = "; ".join(f"[{c.lo:.2f}) sim {c.sim_mean:.2f}+-{c.sim_std:.2f} trace {c.trace_mean:.2f}" for c in cmp)
    verdict(10, "sim/trace scatter overlap", ok, detail or "no shared age bins in [0.25, 0.45)")


def test_criterion_13_constrained_trace_trend(trained):
    cfg = TraceExperimentConfig(duration_s=120)
    pool = synthetic_trace_pool("constrained", 8, 120_000, seed=13)
    diffs, seed = [], 0
    while len(diffs) < 12:
        a = assign_traces(pool, seed, "constrained")
        if classify_brtt(a, cfg=cfg, seed=seed) == "high":
            q = run_trace_experiment(a, [ensemble(trained), ensemble(trained)], cfg, seed=seed)
            b = run_trace_experiment(a, [AlwaysQuery(), AlwaysQuery()], cfg, seed=seed)
            diffs.append(np.mean([x.avg_err for x in b.agents]) - np.mean([x.avg_err for x in q.agents]))
        seed += 1
        assert seed < 200, "too few high-bRTT assignments"
    p = sign_test_greater(diffs)
    verdict(13, "constrained-trace trend", p < 0.05,
            f"always-query minus QNet error over {len(diffs)} experiments: mean {np.mean(diffs):.3f}, "
            f"{sum(d > 0 for d in diffs)} positive, sign test p={p:.2g}")
