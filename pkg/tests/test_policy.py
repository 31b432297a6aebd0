import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from molgrammar.policy import (
    MASK_PENALTY, CheckpointError, CheckpointVersionError, FingerprintMismatchError, Params,
    PolicyConfig, TransformerPolicy, UniformPolicy, anchor_distance, anchored_best_loss,
    init_params, load_checkpoint, masked_log_softmax, param_manifest, pretrain_loss,
    read_checkpoint, save_checkpoint,
)

FP = "ab" * 32
TINY = PolicyConfig(vocab=7, layers=2, heads=2, d_k=4, d_v=3, d_model=8, d_inner=10, max_len=12,
                    zero_output=False)


def test_masked_log_softmax_modes_agree():
    rng = np.random.default_rng(0)
    z = rng.normal(size=9)
    mask = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1], dtype=bool)
    a = masked_log_softmax(z, mask, "exclude")
    b = masked_log_softmax(z, mask, "subtract")
    assert np.all(np.isneginf(a[~mask]))
    np.testing.assert_allclose(a[mask], b[mask], rtol=0, atol=1e-12)
    assert math.isclose(np.exp(a[mask]).sum(), 1.0)
    assert np.all(b[~mask] < -MASK_PENALTY / 2)


def test_masked_log_softmax_errors():
    with pytest.raises(ValueError, match="no rule"):
        masked_log_softmax(np.zeros(3), np.zeros(3, dtype=bool))
    with pytest.raises(ValueError, match="unknown mask mode"):
        masked_log_softmax(np.zeros(3), np.ones(3, dtype=bool), "clip")


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e6, 1e6)),
       arrays(bool, 6).filter(lambda m: m.any()))
def test_masked_log_softmax_normalized(z, mask):
    out = masked_log_softmax(z, mask)
    assert math.isclose(np.exp(out[mask]).sum(), 1.0, rel_tol=1e-9)


def test_params_views_share_memory():
    p = init_params(TINY, 0)
    p.flat[:] = 0.0
    assert np.all(p["embed"] == 0)
    p["out.b"][0] = 3.0
    assert p.flat[p.slices["out.b"].start] == 3.0
    assert p.size == sum(int(np.prod(s)) for _, s in param_manifest(TINY))
    with pytest.raises(ValueError):
        Params(p.manifest, np.zeros(3))


def test_init_is_seeded_and_output_zeroed():
    a, b = init_params(TINY, 1), init_params(TINY, 1)
    assert np.array_equal(a.flat, b.flat)
    cfg = PolicyConfig(vocab=7, layers=1, heads=1, d_k=2, d_v=2, d_model=4, d_inner=4, max_len=5)
    p = init_params(cfg, 0)
    assert not p["out.w"].any() and not p["out.b"].any()
    pol = TransformerPolicy(cfg, p)
    assert not pol.logits([1, 2]).any()


def test_config_round_trip_and_validation():
    assert PolicyConfig.from_dict(TINY.to_dict()) == TINY
    small = PolicyConfig.small(10, max_len=20)
    assert small.vocab == 10 and small.max_len == 20
    with pytest.raises(ValueError):
        PolicyConfig(vocab=0)


def test_logits_match_all_logits():
    pol = TransformerPolicy(TINY, seed=3)
    seq = [1, 4, 2, 6, 0]
    full = pol.all_logits(seq)
    assert full.shape == (len(seq), 7)
    for t in range(len(seq)):
        np.testing.assert_allclose(pol.logits(seq[:t]), full[t], atol=1e-12)


def test_prefix_longer_than_context():
    pol = TransformerPolicy(TINY, seed=0)
    with pytest.raises(ValueError):
        pol.logits(list(range(7)) * 2)


def test_kv_cache_matches_full_forward():
    pol = TransformerPolicy(TINY, seed=5)
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(0, 7, n)) for n in (6, 3, 9)]
    ctx = pol.batch_context(3)
    active = [0, 1, 2]
    t = 0
    while active:
        got = ctx.logits(active)
        for row, b in enumerate(active):
            np.testing.assert_allclose(got[row], pol.logits(seqs[b][:t]), atol=1e-10)
        active = [b for b in active if t < len(seqs[b])]
        ctx.push(active, [seqs[b][t] for b in active])
        t += 1


def test_loss_skips_forced_steps():
    pol = TransformerPolicy(TINY, seed=2)
    ids = [1, 2, 3]
    masks = [np.array([1, 2]), np.array([2]), np.array([0, 3, 5])]
    loss, grad = pol.loss_and_grad(ids, masks)
    full = pol.all_logits(ids)
    expect = -(masked_log_softmax(full[0], np.isin(np.arange(7), [1, 2]))[1]
               + masked_log_softmax(full[2], np.isin(np.arange(7), [0, 3, 5]))[3])
    assert math.isclose(loss, expect, rel_tol=1e-12)
    assert grad.shape == pol.params.flat.shape


def test_loss_rejects_masked_rule():
    pol = TransformerPolicy(TINY, seed=2)
    with pytest.raises(ValueError):
        pol.loss_and_grad([1, 2], [np.array([0, 3]), np.array([2, 4])])


def test_uniform_policy_loss():
    pol = UniformPolicy(5)
    loss, grad = pretrain_loss(pol, [0, 3], [np.array([0, 1, 2]), np.array([3, 4])])
    assert math.isclose(loss, math.log(3) + math.log(2))
    assert grad.size == 0


def test_anchor_terms():
    pol = TransformerPolicy(TINY, seed=1)
    base = pol.params.flat + 0.1
    ids, masks = [1, 2], [np.array([1, 2]), np.array([2, 3])]
    plain, g0 = pretrain_loss(pol, ids, masks)
    loss, g = anchored_best_loss(pol, ids, masks, base, 2.0)
    assert math.isclose(loss, plain + 2.0 * anchor_distance(pol.params.flat, base))
    np.testing.assert_allclose(g, g0 - 0.4, atol=1e-12)
    with pytest.raises(ValueError):
        anchor_distance(np.zeros(3), np.zeros(4))


def test_checkpoint_round_trip(tmp_path):
    pol = TransformerPolicy(TINY, seed=9)
    path = tmp_path / "p.bin"
    save_checkpoint(pol, path, FP, extra={"m": np.arange(3.0)}, meta={"step": 4})
    ck = read_checkpoint(path, FP)
    assert np.array_equal(ck.policy.params.flat, pol.params.flat)
    assert ck.policy.config == TINY
    assert ck.meta == {"step": 4}
    assert np.array_equal(ck.extra["m"], np.arange(3.0))
    assert np.array_equal(load_checkpoint(path).params.flat, pol.params.flat)


def test_checkpoint_errors(tmp_path):
    pol = TransformerPolicy(TINY, seed=9)
    path = tmp_path / "p.bin"
    save_checkpoint(pol, path, FP)
    with pytest.raises(FingerprintMismatchError):
        read_checkpoint(path, "cd" * 32)
    data = bytearray(path.read_bytes())
    corrupt = tmp_path / "c.bin"
    data[100] ^= 0xFF
    corrupt.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(corrupt)
    short = tmp_path / "s.bin"
    short.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        read_checkpoint(short)
    old = tmp_path / "v.bin"
    raw = bytearray(path.read_bytes())
    raw[9:13] = struct.pack("<I", 99)
    old.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(old)
    with pytest.raises(CheckpointError):
        (tmp_path / "junk.bin").write_bytes(b"hello")
        read_checkpoint(tmp_path / "junk.bin")
    with pytest.raises(ValueError):
        save_checkpoint(pol, path, "short")
