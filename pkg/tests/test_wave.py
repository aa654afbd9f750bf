import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from c2ftp.config import Config, ConfigError
from c2ftp.data import SceneTensors
from c2ftp.wave import (
    InteractionEncoder,
    MotionEncoder,
    MultiHeadSelfAttention,
    TemporalAttention,
    WaveDecompose,
    encode_motion,
    fuse_context,
    motion_features,
    superpose_waves,
    surrounding_fc,
    surrounding_fc_row,
    temporal_attention,
    wave_decompose,
)
from oracles import attention_oracle, complex_superpose, complex_surrounding_fc, param_grad_rel_error

D = torch.float64


def t(x):
    return torch.as_tensor(x, dtype=D)


# ---------------------------------------------------------------- superposition


@pytest.mark.parametrize(
    "dtheta, z_r, dphase",
    [(0.0, 7.0, 0.0), (math.pi, 1.0, math.pi), (math.pi / 2, 5.0, math.atan2(4, 3))],
)
def test_superpose_examples(dtheta, z_r, dphase):
    th_i = 0.3
    z, th = superpose_waves(t(3.0), t(th_i), t(4.0), t(th_i + dtheta))
    assert z.item() == pytest.approx(z_r, abs=1e-12)
    assert th.item() == pytest.approx(th_i + dphase, abs=1e-12)


def test_superpose_zero_amplitude_keeps_theta_i():
    z, th = superpose_waves(t(2.0), t(0.7), t(2.0), t(0.7 + math.pi))
    # cos(pi) is not exactly -1 in floating point, so force the exact zero case too
    z0, th0 = superpose_waves(t(0.0), t(0.7), t(0.0), t(-1.2))
    assert z0.item() == 0.0 and th0.item() == 0.7
    assert z.item() == pytest.approx(0.0, abs=1e-7)


amps = arrays(np.float64, 8, elements=st.floats(0, 100))
phases = arrays(np.float64, 8, elements=st.floats(-20, 20))


@given(amps, phases, amps, phases)
def test_superpose_matches_complex_addition(a, ti, b, tj):
    z, th = superpose_waves(t(a), t(ti), t(b), t(tj))
    mag, s = complex_superpose(a, ti, b, tj)
    got = z.numpy() * np.exp(1j * th.numpy())
    scale = np.maximum(a + b, 1e-12)
    assert np.all(np.abs(got - s) <= 1e-6 * scale)
    assert np.all(z.numpy() <= a + b + 1e-9 * scale)
    assert np.all(z.numpy() >= np.abs(a - b) - 1e-9 * scale)


# ---------------------------------------------------------------- surrounding-FC


def test_surrounding_fc_zero_phase_is_real_mix(rng):
    z, wt, wi = rng.normal(size=(4, 3)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    out = surrounding_fc(t(z), t(np.zeros((4, 3))), torch.ones(4, dtype=torch.bool), t(wt), t(wi))
    np.testing.assert_allclose(out.numpy(), wt @ z, atol=1e-12)


def test_surrounding_fc_single_agent_identity(rng):
    z, th = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
    out = surrounding_fc(t(z), t(th), torch.ones(1, dtype=torch.bool), t(np.eye(1)), t(np.eye(1)))
    np.testing.assert_allclose(out.numpy(), z * (np.cos(th) + np.sin(th)), atol=1e-12)


def test_surrounding_fc_all_masked_is_bias(rng):
    bias = t(rng.normal(size=3))
    out = surrounding_fc(t(rng.normal(size=(4, 3))), t(rng.normal(size=(4, 3))), torch.zeros(4, dtype=torch.bool),
                         t(rng.normal(size=(4, 4))), t(rng.normal(size=(4, 4))), bias)
    np.testing.assert_array_equal(out.numpy(), np.broadcast_to(bias.numpy(), (4, 3)))


@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(1, 6))
def test_surrounding_fc_complex_oracle(seed, n, d):
    g = np.random.default_rng(seed)
    z, th = np.abs(g.normal(size=(n, d))), g.normal(size=(n, d)) * 3
    wt, wi = g.normal(size=(n, n)), g.normal(size=(n, n))
    mask = g.random(n) < 0.7
    out = surrounding_fc(t(z), t(th), torch.as_tensor(mask), t(wt), t(wi)).numpy()
    ref = complex_surrounding_fc(z, th, mask, wt, wi)
    assert np.all(np.abs(out - ref) <= 1e-6 * np.maximum(np.abs(ref), 1.0))


@given(st.integers(0, 2**31 - 1))
def test_mask_invariance_bitwise(seed):
    g = np.random.default_rng(seed)
    n, d = 6, 4
    z, th = g.normal(size=(n, d)), g.normal(size=(n, d))
    wt, wi = g.normal(size=(n, n)), g.normal(size=(n, n))
    mask = np.array([1, 1, 0, 1, 0, 0], dtype=bool)
    base = surrounding_fc(t(z), t(th), torch.as_tensor(mask), t(wt), t(wi))
    junk_z, junk_t = z.copy(), th.copy()
    junk_z[~mask] = g.normal(size=((~mask).sum(), d)) * 1e6
    junk_t[~mask] = np.inf
    other = surrounding_fc(t(junk_z), t(junk_t), torch.as_tensor(mask), t(wt), t(wi))
    assert torch.equal(base, other)


@given(st.integers(0, 2**31 - 1))
def test_permutation_contract(seed):
    g = np.random.default_rng(seed)
    n, d = 5, 3
    z, th = g.normal(size=(n, d)), g.normal(size=(n, d))
    wt, wi = g.normal(size=(n, n)), g.normal(size=(n, n))
    mask = g.random(n) < 0.6
    p = g.permutation(n)
    out = surrounding_fc(t(z), t(th), torch.as_tensor(mask), t(wt), t(wi)).numpy()
    perm = surrounding_fc(t(z[p]), t(th[p]), torch.as_tensor(mask[p]), t(wt[p][:, p]), t(wi[p][:, p])).numpy()
    np.testing.assert_allclose(perm, out[p], atol=1e-12)


def test_sparse_row_matches_dense(rng):
    B, n, T, d = 3, 7, 4, 5
    z, th = t(rng.normal(size=(B, n, T, d))), t(rng.normal(size=(B, n, T, d)))
    mask = torch.as_tensor(rng.random((B, n)) < 0.5)
    mask[:, 3] = True
    wt, wi = t(rng.normal(size=(n, n))), t(rng.normal(size=(n, n)))
    bias = t(rng.normal(size=d))
    dense = surrounding_fc(z.transpose(1, 2), th.transpose(1, 2), mask.unsqueeze(1), wt, wi, bias)[:, :, 3]
    scene, cell = mask.nonzero(as_tuple=True)
    sparse = surrounding_fc_row(z[scene, cell], th[scene, cell], scene, cell, 3, B, wt, wi, bias)
    np.testing.assert_allclose(sparse.numpy(), dense.numpy(), atol=1e-12)


# ---------------------------------------------------------------- wave decomposition


def test_wave_decompose_linear_cases(rng):
    m = WaveDecompose(4).double()
    with torch.no_grad():
        for lin in (m.amplitude, m.phase):
            lin.bias.zero_()
    z, th = wave_decompose(torch.zeros(4, dtype=D), m)
    assert torch.all(z == 0) and torch.all(th == 0)
    with torch.no_grad():
        m.amplitude.weight.copy_(torch.eye(4))
    h = t(rng.normal(size=4))
    assert torch.allclose(wave_decompose(h, m)[0], h)
    h = t(rng.normal(size=(3, 4)))
    z, th = wave_decompose(h, m)
    np.testing.assert_allclose(th.detach().numpy(), h.numpy() @ m.phase.weight.detach().numpy().T, atol=1e-12)


# ---------------------------------------------------------------- temporal attention


def _oracle_for(att: TemporalAttention, x):
    a = att.attn
    p = lambda lin: (lin.weight.detach().numpy(), lin.bias.detach().numpy())
    return attention_oracle(x, *p(a.q), *p(a.k), *p(a.v), a.heads,
                            att.norm.weight.detach().numpy(), att.norm.bias.detach().numpy())


@given(st.integers(0, 2**31 - 1), st.integers(1, 10), st.sampled_from([(8, 2), (6, 3), (4, 1)]))
def test_attention_matches_oracle(seed, T, dims):
    d, heads = dims
    torch.manual_seed(seed)
    att = TemporalAttention(d, heads).double()
    x = np.random.default_rng(seed).normal(size=(T, d))
    out, scores = temporal_attention(t(x), att)
    ref, ref_scores = _oracle_for(att, x)
    np.testing.assert_allclose(out.detach().numpy(), ref, atol=1e-6)
    np.testing.assert_allclose(scores.detach().numpy(), ref_scores, atol=1e-6)
    s = scores.detach().numpy()
    assert np.all(s >= 0) and np.allclose(s.sum(-1), 1.0, atol=1e-6)


def test_attention_single_step_and_uniform():
    att = TemporalAttention(4, 2).double()
    x = t(np.random.default_rng(0).normal(size=(1, 4)))
    out, scores = att(x)
    assert torch.equal(scores, torch.ones(2, 1, 1, dtype=D))
    assert torch.allclose(out, att.norm(att.attn.v(x)))
    with torch.no_grad():
        for lin in (att.attn.q, att.attn.k):
            lin.weight.zero_()
            lin.bias.zero_()
    _, scores = att(t(np.random.default_rng(1).normal(size=(5, 4))))
    assert torch.allclose(scores, torch.full_like(scores, 0.2))


def test_attention_head_mismatch():
    with pytest.raises(ConfigError):
        MultiHeadSelfAttention(10, 4)


# ---------------------------------------------------------------- fusion


def test_fuse_identity_block(rng):
    proj = torch.nn.Linear(6, 6).double()
    with torch.no_grad():
        proj.weight.copy_(torch.eye(6))
        proj.bias.zero_()
    h, e = t(rng.normal(size=(4, 3))), t(rng.normal(size=(4, 3)))
    assert torch.equal(fuse_context(h, e, proj), torch.cat([h, e], -1))


def test_fuse_rowwise_and_oracle(rng):
    proj = torch.nn.Linear(6, 5).double()
    h, e = t(rng.normal(size=(4, 3))), t(rng.normal(size=(4, 3)))
    out = fuse_context(h, e, proj)
    sw = [1, 0, 2, 3]
    assert torch.allclose(fuse_context(h[sw], e[sw], proj), out[sw])
    W, b = proj.weight.detach().numpy(), proj.bias.detach().numpy()
    np.testing.assert_allclose(out.detach().numpy(), np.c_[h.numpy(), e.numpy()] @ W.T + b, atol=1e-12)
    with pytest.raises(ValueError):
        fuse_context(h[:3], e, proj)


# ---------------------------------------------------------------- motion encoding


def test_motion_features():
    hist = t(np.c_[np.linspace(-1.4, 0, 15), np.linspace(-28, 0, 15)])
    vel = motion_features(hist, coord_scale=10.0, mode="displacement", hz=5.0)
    assert torch.all(vel[0] == 0)
    np.testing.assert_allclose(vel[1:].numpy(), np.tile([0.05, 1.0], (14, 1)), atol=1e-12)
    gained = motion_features(hist, 10.0, "both", 5.0, lateral_gain=10.0)
    np.testing.assert_allclose(gained[1:, :2].numpy(), np.tile([0.5, 1.0], (14, 1)), atol=1e-12)
    np.testing.assert_allclose(gained[:, 2:].numpy(), hist.numpy() * [1.0, 0.1], atol=1e-12)
    with pytest.raises(ValueError):
        motion_features(torch.zeros(15, 3))
    with pytest.raises(ConfigError):
        motion_features(hist, mode="speed")


def test_encode_motion_deterministic(rng):
    enc = MotionEncoder(8, 6, inputs="position").double()
    zero = torch.zeros(2, 15, 2, dtype=D)
    out = encode_motion(zero, enc)
    assert out.shape == (2, 15, 6)
    assert torch.equal(out[0], out[1]) and torch.equal(out, encode_motion(zero, enc))


@pytest.mark.parametrize("inputs", ["position", "displacement", "both"])
def test_encode_motion_gradcheck(inputs, rng):
    enc = MotionEncoder(5, 4, coord_scale=2.0, inputs=inputs)
    x = t(rng.normal(size=(3, 6, 2)))
    w = t(rng.normal(size=(3, 6, 4)))
    assert param_grad_rel_error(enc, lambda: (encode_motion(x, enc) * w).sum()) < 1e-4


# ---------------------------------------------------------------- full interaction encoder


def test_encoder_social_matches_dense_grid(tiny_cfg, toy_tensors):
    enc = InteractionEncoder(tiny_cfg).double()
    b = toy_tensors.batch(range(12)).to(D)
    with torch.no_grad():
        enc_tar = enc.target_encoder(b.history)
        g, mask = enc.grid(b, enc_tar)
        z, th = enc.wave(g)
        dense = surrounding_fc(z.transpose(1, 2), th.transpose(1, 2), mask.unsqueeze(1), enc.w_real, enc.w_imag,
                               enc.pool_bias)[:, :, enc.center]
        np.testing.assert_allclose(enc.social(b, enc_tar).numpy(), dense.numpy(), atol=1e-12)
        C, _ = enc(b)
    assert C.shape == (12, tiny_cfg.t_h, tiny_cfg.context_dim)
    assert torch.isfinite(C).all()


def test_encoder_without_neighbors_and_ablation(tiny_cfg, toy_scenes):
    import dataclasses

    lone = [dataclasses.replace(w, neighbor_cells=w.neighbor_cells[:0], neighbor_histories=np.zeros((0, 15, 2)))
            for w in toy_scenes[:3]]
    b = SceneTensors(lone).batch([0, 1, 2])
    C, _ = InteractionEncoder(tiny_cfg)(b)
    assert torch.isfinite(C).all()
    off = InteractionEncoder(Config(**{**tiny_cfg.to_dict(), "use_interaction_pooling": False}))
    assert off(b)[0].shape == C.shape


def test_neighbor_encoder_separate(tiny_cfg):
    enc = InteractionEncoder(tiny_cfg)
    assert enc.target_encoder is not enc.neighbor_encoder
    assert not any(p is q for p in enc.target_encoder.parameters() for q in enc.neighbor_encoder.parameters())
