import io
import json
import math

import numpy as np
import pytest

from molgrammar.attributes import MaskConfig, MaskInconsistencyError, engine_for
from molgrammar.parser import parser_for
from molgrammar.policy import CallablePolicy, PolicyConfig, TransformerPolicy, UniformPolicy
from molgrammar.sampler import (
    _choose, derivation_masks, rollout, rollout_batch, spawn_rngs, step, write_jsonl,
)
from molgrammar.validity import check


@pytest.fixture(scope="module")
def short_engine(grammar):
    return engine_for(grammar, MaskConfig(max_steps=60))


@pytest.fixture(scope="module")
def small_policy(grammar):
    cfg = PolicyConfig(vocab=len(grammar.rules), layers=1, heads=2, d_k=4, d_v=4, d_model=8,
                       d_inner=8, max_len=60, zero_output=False)
    return TransformerPolicy(cfg, seed=4)


def test_choose_inverse_cdf():
    z = np.log(np.array([0.2, 0.3, 0.5, 9.0]))
    allowed = [0, 1, 2]
    assert _choose(z, allowed, 0.1, "exclude")[0] == 0
    assert _choose(z, allowed, 0.3, "exclude")[0] == 1
    rid, lp = _choose(z, allowed, 0.99, "exclude")
    assert rid == 2 and lp == pytest.approx(math.log(0.5))
    assert _choose(z, allowed, 0.3, "subtract")[0] == 1


def test_batch_is_seed_deterministic(short_engine, small_policy):
    a = rollout_batch(small_policy, 11, 6, short_engine)
    b = rollout_batch(small_policy, 11, 6, short_engine)
    assert [r.rule_ids for r in a] == [r.rule_ids for r in b]
    c = rollout_batch(small_policy, 12, 6, short_engine)
    assert [r.rule_ids for r in a] != [r.rule_ids for r in c]


def test_batch_matches_single_rollouts(short_engine, small_policy):
    batch = rollout_batch(small_policy, 5, 4, short_engine)
    singles = [rollout(small_policy, rng, short_engine) for rng in spawn_rngs(5, 4)]
    for x, y in zip(batch, singles):
        assert x.rule_ids == y.rule_ids
        assert x.log_prob == pytest.approx(y.log_prob, abs=1e-9)


def test_mask_modes_sample_identically(short_engine, small_policy):
    a = rollout_batch(small_policy, 3, 5, short_engine, mode="exclude")
    b = rollout_batch(small_policy, 3, 5, short_engine, mode="subtract")
    assert [r.rule_ids for r in a] == [r.rule_ids for r in b]


def test_forced_replay_reproduces_log_probs(short_engine, small_policy):
    r = rollout_batch(small_policy, 8, 1, short_engine)[0]
    again = rollout(small_policy, np.random.default_rng(0), short_engine, forced=r.rule_ids)
    assert again.rule_ids == r.rule_ids
    assert again.log_prob == pytest.approx(r.log_prob, abs=1e-9)
    loss, _ = small_policy.loss_and_grad(r.rule_ids, derivation_masks(short_engine, r.rule_ids))
    assert loss == pytest.approx(-r.log_prob, abs=1e-9)


def test_forced_replay_rejects_masked_rule(engine, grammar):
    ids = parser_for(grammar).parse("C1C1").rule_ids
    with pytest.raises(MaskInconsistencyError):
        rollout(UniformPolicy(engine.n_rules), np.random.default_rng(0), engine, forced=ids)
    with pytest.raises(MaskInconsistencyError):
        derivation_masks(engine, ids)


def test_single_step(engine):
    state = engine.initial_state()
    new, rec = step(state, UniformPolicy(engine.n_rules), np.random.default_rng(1), engine)
    assert state.steps_used == 0 and new.steps_used == 1
    assert rec.mask.sum() == rec.n_allowed
    if rec.n_allowed > 1:
        assert rec.log_prob == pytest.approx(-math.log(rec.n_allowed))


def test_keep_logits(short_engine, small_policy):
    r = rollout_batch(small_policy, 1, 1, short_engine, keep_logits=True)[0]
    for rec in r.records:
        assert rec.logits.shape == (short_engine.n_rules,) and rec.mask[rec.chosen_rule]


def test_forced_steps_are_free(engine):
    r = rollout_batch(UniformPolicy(engine.n_rules), 2, 20, engine)
    for x in r:
        for rec in x.records:
            if rec.n_allowed == 1:
                assert rec.log_prob == 0.0


def test_extreme_logits_stay_valid(engine):
    v = engine.n_rules
    pol = CallablePolicy(v, lambda p: np.where(np.arange(v) % 2 == 0, 1e300, -1e300))
    for r in rollout_batch(pol, 0, 20, engine):
        assert check(r.smiles).valid
        assert r.steps <= engine.config.max_steps


def test_empty_batch_and_errors(engine):
    assert rollout_batch(UniformPolicy(engine.n_rules), 0, 0, engine) == []
    with pytest.raises(ValueError):
        rollout_batch(UniformPolicy(engine.n_rules), 0, -1, engine)


def test_write_jsonl(engine):
    rs = rollout_batch(UniformPolicy(engine.n_rules), 0, 3, engine)
    buf = io.StringIO()
    assert write_jsonl(rs, buf) == 3
    rec = json.loads(buf.getvalue().splitlines()[0])
    assert rec["smiles"] == rs[0].smiles and rec["rule_ids"] == rs[0].rule_ids
    assert len(rec["log_probs"]) == len(rec["rule_ids"])
