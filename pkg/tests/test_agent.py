import math
import os
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
import sim_env
from rampwise.agent import (DEFAULT_RULES, FINGERPRINT_FIELDS, AgentConfig, ContextFingerprint,
                            EmptyWorkflowSet, ExperienceBase, ExperienceRecord, InvalidRecord, IoFailure,
                            TooShort, ZeroNorm, adaptive_epsilon, agent_state, bootstrap, cosine_sim,
                            detect_contradiction, fingerprint, gamma, q_value, record_execution, reward,
                            select_workflow, ucb)

DAY = 86400.0
NOW = 2e9
M_GOOD = {"r2": 0.9, "mae": 10.0, "f1": 0.9}


def rec(workflow="W1", source="real", ts=NOW, metrics=None, ctx=(1.0,) * 10, t=0.0):
    return ExperienceRecord.create(ctx, workflow, metrics or M_GOOD, t, ts, source)


def rec_with_reward(r, workflow="W1", source="real", ts=NOW, ctx=(1.0,) * 10):
    v = (r - 0.1) / 0.9
    out = rec(workflow, source, ts, {"r2": v, "mae": 500 * (1 - v), "f1": v}, ctx)
    assert out.reward == pytest.approx(r, abs=1e-12)
    return out


# -- fingerprint -------------------------------------------------------------------


def test_fingerprint_white_noise_acf():
    fp = fingerprint(np.random.default_rng(0).normal(size=10_000) + 5).as_dict()
    for lag in (1, 6, 12, 24):
        assert abs(fp[f"acf{lag}"]) < 0.05
    assert len(fp) == len(FINGERPRINT_FIELDS)


def test_fingerprint_trend_strength_max():
    fp = fingerprint(np.linspace(0, 1, 10_000)).as_dict()
    assert fp["trend_strength"] == pytest.approx(1.0, abs=1e-3)


def test_fingerprint_deterministic_and_short():
    x = np.random.default_rng(1).random(50_000)
    assert fingerprint(x, seed=3) == fingerprint(x, seed=3)
    with pytest.raises(TooShort):
        fingerprint(np.ones(47))


def test_fingerprint_runtime_large():
    x = np.random.default_rng(2).random(350_640)
    t = time.perf_counter()
    fp = fingerprint(x)
    assert time.perf_counter() - t <= 3.0
    assert all(math.isfinite(v) for v in fp.values)


def test_fingerprint_rejects_non_finite():
    with pytest.raises(ValueError):
        ContextFingerprint((0.0,) * 9 + (math.nan,))


# -- similarity, reward -----------------------------------------------------------------


def test_cosine_examples():
    assert cosine_sim([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ZeroNorm):
        cosine_sim([0, 0], [1, 1])


def test_reward_examples():
    assert reward({"r2": 1, "mae": 0, "f1": 1}, 0) == 1.0
    assert reward({"r2": 0.98, "mae": 15.57, "f1": 0.91}, 480) == pytest.approx(0.94544, abs=1e-5)
    # exact time component zero at one hour
    a = reward({"r2": 0.5, "mae": 100, "f1": 0.5}, 3600)
    assert a == pytest.approx(oracles.reward(0.5, 100, 0.5, 3600), abs=1e-15)


@given(st.floats(-1, 1), st.floats(0, 1000), st.floats(0, 1), st.floats(0, 7200))
def test_reward_matches_oracle_and_affine(r2, mae, f1, t):
    m = {"r2": r2, "mae": mae, "f1": f1}
    assert reward(m, t) == pytest.approx(oracles.reward(r2, mae, f1, t), abs=1e-12)
    h = 1e-3
    d = (reward({**m, "f1": f1 + h}, t) - reward({**m, "f1": f1 - h}, t)) / (2 * h)
    assert d == pytest.approx(0.3, abs=1e-9)


def test_record_reward_invariant():
    good = rec()
    with pytest.raises(InvalidRecord):
        ExperienceRecord(good.context, "W1", good.metrics, 0.0, NOW, "real", good.reward + 1e-6)
    with pytest.raises(InvalidRecord):
        ExperienceRecord(good.context, "W1", good.metrics, 0.0, NOW, "oracle", good.reward)


# -- gamma, Q, UCB, epsilon ----------------------------------------------------------------


def test_gamma_examples():
    r = rec(source="synthetic", ts=NOW - 30 * DAY)
    assert gamma(r, 0, 5, NOW) == pytest.approx(math.exp(-1), abs=1e-9)
    assert gamma(rec(), 0, 10, NOW) == 1.0
    assert gamma(rec(), 0, 2, NOW) == pytest.approx(0.4)


@given(st.floats(0, 400), st.floats(0, 400), st.integers(0, 50), st.integers(0, 50), st.integers(1, 20))
def test_gamma_properties(age1, age2, n1, n2, n_i):
    lo_age, hi_age = sorted((age1, age2))
    lo_n, hi_n = sorted((n1, n2))
    young = rec(source="synthetic", ts=NOW - lo_age * DAY)
    old = rec(source="synthetic", ts=NOW - hi_age * DAY)
    g = gamma(young, lo_n, n_i, NOW)
    assert 0 < g <= 1
    assert gamma(old, lo_n, n_i, NOW) <= g
    assert gamma(young, hi_n, n_i, NOW) <= g
    # real records are not discounted by the real count
    assert gamma(rec(ts=NOW - lo_age * DAY), hi_n, n_i, NOW) == gamma(rec(ts=NOW - lo_age * DAY), 0, n_i, NOW)


def test_q_examples():
    assert q_value("W1", [rec_with_reward(0.8)], NOW) == pytest.approx(0.8)
    assert q_value("W2", [rec_with_reward(0.8)], NOW) is None
    # recency weights 1/3 and 1, i.e. the ratio 1 : 3
    a = rec_with_reward(0.6, ts=NOW - 30 * DAY * math.log(3))
    b = rec_with_reward(1.0, ts=NOW)
    assert q_value("W1", [a, b], NOW) == pytest.approx((0.6 * 1 + 1.0 * 3) / 4)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 90)), min_size=1, max_size=8), st.floats(1, 200))
def test_q_invariant_to_uniform_gamma_scaling(items, shift_days):
    recs = [rec_with_reward(r, ts=NOW - d * DAY) for r, d in items]
    # ageing every record by the same amount scales all recency factors by one constant
    q1 = q_value("W1", recs, NOW)
    q2 = q_value("W1", recs, NOW + shift_days * DAY)
    assert q1 == pytest.approx(q2, abs=1e-9)


def test_ucb_examples():
    assert ucb(0.8, 4, 100, 2) == pytest.approx(oracles.ucb(0.8, 4, 100, 2), abs=1e-12)
    assert ucb(0.8, 4, 100, 2) == pytest.approx(2.945966026289347, abs=1e-6)
    assert ucb(0.3, 1, 1, 2) == 0.3
    assert ucb(0.3, 0, 10) == math.inf


def test_epsilon_clamps():
    assert adaptive_epsilon() == pytest.approx(0.2)
    assert adaptive_epsilon(2.0, 2.0) == 0.6
    assert adaptive_epsilon(0.5, 0.2) == 0.05


def test_synthetic_weight_decays_geometrically():
    syn = [rec(source="synthetic") for _ in range(5)]
    totals = [sum(gamma(r, n, 5, NOW) for r in syn) for n in range(20)]
    ratios = np.array(totals[1:]) / np.array(totals[:-1])
    np.testing.assert_allclose(ratios, 0.95)


# -- contradiction -------------------------------------------------------------------


def _contradiction_records(n_real):
    syn = [rec_with_reward(0.9, "W3", "synthetic") for _ in range(4)]
    real = [rec_with_reward(0.7, "W1") for _ in range(n_real)]
    return syn + real


def test_contradiction_examples():
    agree = [rec_with_reward(0.9, "W3", "synthetic"), rec_with_reward(0.6, "W3")] * 3
    assert not detect_contradiction(agree)["flagged"]
    flagged = detect_contradiction(_contradiction_records(3))
    assert flagged["flagged"] and flagged["best_synthetic"] == "W3" and flagged["best_real"] == "W1"
    assert not detect_contradiction(_contradiction_records(2))["flagged"]


def test_contradiction_excludes_synthetic_in_selection():
    base = ExperienceBase(_contradiction_records(3))
    st_ = agent_state((1.0,) * 10, base, now=NOW)
    assert st_["contradiction"]["flagged"]
    assert st_["n_similar"] == 3 and st_["counts"]["W3"] == 0
    assert st_["factors"]["f_contr"] == 2.0


# -- selection -----------------------------------------------------------------------


def test_cold_start_deterministic():
    picks = [select_workflow((1.0,) * 10, ExperienceBase(), rng=np.random.default_rng(4), now=NOW)
             for _ in range(2)]
    assert picks[0].workflow == picks[1].workflow and picks[0].mode == "explore"


def test_dominant_arm_exploited():
    recs = []
    for w, r in (("W1", 0.5), ("W2", 0.9), ("W3", 0.45), ("W4", 0.4)):
        recs += [rec_with_reward(r, w) for _ in range(15)]
    base = ExperienceBase(recs)

    class Exploit:  # rng whose first uniform draw never falls under epsilon
        def random(self):
            return 0.99

        def integers(self, n):
            return 0

    d = select_workflow((1.0,) * 10, base, rng=Exploit(), now=NOW)
    assert d.workflow == "W2" and d.mode == "exploit"


def test_forced_exploration_at_observed_share():
    # 28 of 72 bootstrap priors favour W3: a 38.9% share
    base = bootstrap(ExperienceBase(), now=NOW)
    assert len(base) == 72
    st_ = agent_state(DEFAULT_RULES[0].prototype, base, now=NOW)
    assert st_["shares"]["W3"] == pytest.approx(28 / 72) and round(28 / 72, 3) == 0.389
    d = select_workflow(DEFAULT_RULES[0].prototype, base, rng=np.random.default_rng(0), now=NOW)
    assert d.mode == "forced"
    assert d.workflow == min(st_["counts"], key=lambda w: (st_["counts"][w], w))


def test_bootstrap_counts_configurable():
    assert len(bootstrap(ExperienceBase(), per_rule=3, preferred_share=2)) == 24
    assert all(r.source == "synthetic" for r in bootstrap(ExperienceBase()).records)


def test_empty_workflow_set():
    with pytest.raises(EmptyWorkflowSet):
        AgentConfig(workflows=())


def test_simulation_learns():
    rates, ok = [], 0
    for seed in range(5):
        opt, reg = sim_env.run(seed)
        rates.append(opt[-50:].mean())
        ok += reg[100:].sum() < reg[:100].sum()
    assert min(rates) >= 0.8
    assert ok == 5


# -- persistence ----------------------------------------------------------------------


def test_save_load_identical_decisions(tmp_path):
    base = bootstrap(ExperienceBase(), now=NOW)
    for k in range(6):
        record_execution(base, rec_with_reward(0.5 + 0.05 * k, "W1", ctx=DEFAULT_RULES[4].prototype))
    path = str(tmp_path / "exp.jsonl")
    base.save(path)
    back = ExperienceBase.load(path)
    assert back.lines() == base.lines()
    for ctx in (DEFAULT_RULES[0].prototype, DEFAULT_RULES[4].prototype):
        a = select_workflow(ctx, base, rng=np.random.default_rng(9), now=NOW)
        b = select_workflow(ctx, back, rng=np.random.default_rng(9), now=NOW)
        assert (a.workflow, a.mode) == (b.workflow, b.mode)


def test_record_execution_persists_and_rolls_back(tmp_path):
    path = str(tmp_path / "exp.jsonl")
    base = ExperienceBase(path=path)
    record_execution(base, rec())
    assert len(ExperienceBase.load(path)) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    bad = ExperienceBase(path=str(blocker / "sub" / "exp.jsonl"))
    with pytest.raises(IoFailure):
        record_execution(bad, rec())
    assert len(bad) == 0
    assert ExperienceBase.load(str(tmp_path / "missing.jsonl")).records == []


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"schema": "other"}\n')
    with pytest.raises(InvalidRecord):
        ExperienceBase.load(str(p))
    assert not os.path.exists(str(p) + ".tmp")
