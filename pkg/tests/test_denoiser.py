import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cora.denoiser import (
    DenoiserConfig,
    HookSet,
    ToyDenoiser,
    attention,
    embed_prompt,
    timestep_embedding,
)

import oracles


def _latent(seed, hw=32):
    return np.random.default_rng(seed).normal(size=(4, hw, hw)).astype(np.float32)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(latent_hw=30, token_hw=16)
    with pytest.raises(ValueError):
        DenoiserConfig(d_model=0)
    assert DenoiserConfig().ratio == 2
    assert DenoiserConfig().n_tokens == 256


def test_output_shape_and_tap(denoiser):
    x = _latent(0)
    eps, tap = denoiser.forward(x, 999.0, embed_prompt("cat"))
    assert eps.shape == x.shape and eps.dtype == np.float32
    assert tap.D.shape == (16, 32, 32)
    assert np.isfinite(tap.D).all()
    assert len(tap.q) == len(tap.k) == len(tap.v) == 2
    for q in tap.q:
        assert q.shape == (256, 64)


def test_forward_is_deterministic(denoiser):
    x, c = _latent(1), embed_prompt("a dog")
    e1, t1 = denoiser.forward(x, 500.0, c)
    e2, t2 = denoiser.forward(x.copy(), 500.0, c.copy())
    assert np.array_equal(e1, e2)
    assert np.array_equal(t1.D, t2.D)
    for a, b in zip(t1.k, t2.k):
        assert np.array_equal(a, b)


def test_same_seed_same_weights():
    a = ToyDenoiser(DenoiserConfig(weight_seed=42))
    b = ToyDenoiser(DenoiserConfig(weight_seed=42))
    x = _latent(2)
    assert np.array_equal(a.forward(x, 10.0, embed_prompt(""))[0], b.forward(x, 10.0, embed_prompt(""))[0])
    c = ToyDenoiser(DenoiserConfig(weight_seed=43))
    assert not np.array_equal(a.forward(x, 10.0, embed_prompt(""))[0], c.forward(x, 10.0, embed_prompt(""))[0])


def test_weights_are_read_only(denoiser):
    with pytest.raises(ValueError):
        denoiser.w_stem[0, 0] = 1.0


def test_eps_depends_on_prompt_and_time(denoiser):
    x = _latent(3)
    e_cat = denoiser.forward(x, 500.0, embed_prompt("cat"))[0]
    e_dog = denoiser.forward(x, 500.0, embed_prompt("dog"))[0]
    e_late = denoiser.forward(x, 100.0, embed_prompt("cat"))[0]
    assert not np.allclose(e_cat, e_dog)
    assert not np.allclose(e_cat, e_late)


def test_shape_mismatch_raises(denoiser):
    with pytest.raises(ValueError):
        denoiser.forward(np.zeros((4, 16, 16), np.float32), 1.0, embed_prompt("x"))
    with pytest.raises(ValueError):
        denoiser.forward(_latent(0), 1.0, np.zeros(32, np.float32))


def test_identity_kv_substitution_keeps_eps(denoiser):
    x, c = _latent(4), embed_prompt("a tree")
    base, tap = denoiser.forward(x, 700.0, c)
    hooks = HookSet(record=False, kv_fn=lambda b, q, k, v: (tap.k[b].copy(), tap.v[b].copy()))
    out, _ = denoiser.forward(x, 700.0, c, hooks)
    assert np.array_equal(base, out)


def test_record_only_hooks_are_transparent(denoiser):
    x, c = _latent(5), embed_prompt("sky")
    base, _ = denoiser.forward(x, 300.0, c)
    seen = []
    hooks = HookSet(record=True, q_fn=lambda b, q: (seen.append(b), q)[1])
    out, tap = denoiser.forward(x, 300.0, c, hooks)
    assert np.array_equal(base, out)
    assert seen == [0, 1]
    assert len(tap.q) == 2


def test_query_permutation_hook_changes_output(denoiser):
    x, c = _latent(6), embed_prompt("sky")
    base, _ = denoiser.forward(x, 300.0, c)
    perm = np.roll(np.arange(256), 1)
    out, tap = denoiser.forward(x, 300.0, c, HookSet(q_fn=lambda b, q: q[perm]))
    assert not np.array_equal(base, out)
    # recording still sees the unpermuted queries
    assert np.array_equal(tap.q[0], denoiser.forward(x, 300.0, c)[1].q[0])


def test_attention_single_key():
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(5, 8))
    K = rng.normal(size=(1, 8))
    V = rng.normal(size=(1, 3))
    out = attention(Q, K, V)
    np.testing.assert_allclose(out, np.repeat(V, 5, axis=0), rtol=1e-12)


def test_attention_saturated_one_hot():
    K = np.eye(6)
    V = np.random.default_rng(1).normal(size=(6, 4))
    out = attention(100.0 * K, K, V, scale=1.0)
    np.testing.assert_allclose(out, V, atol=1e-6)


def test_attention_matches_naive_loops():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(4, 8)), rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    scale = 1 / np.sqrt(8)
    np.testing.assert_allclose(attention(Q, K, V, scale), oracles.attention(Q, K, V, scale), atol=1e-6)


def test_attention_width_mismatch():
    with pytest.raises(ValueError):
        attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_attention_rows_are_stochastic(n, m, seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(n, 8)).astype(np.float32) * 3
    K = rng.normal(size=(m, 8)).astype(np.float32) * 3
    _, w = attention(Q, K, np.ones((m, 2), np.float32), return_weights=True)
    assert np.all(np.abs(w.sum(axis=1) - 1) <= 1e-6)
    assert np.all(w >= 0)


def test_embed_prompt_basic():
    a = embed_prompt("a photo of a cat")
    assert np.array_equal(a, embed_prompt("a photo of a cat"))
    assert abs(np.linalg.norm(a.astype(np.float64)) - 1) < 1e-6
    assert np.array_equal(embed_prompt("a b"), embed_prompt("b a"))
    assert np.array_equal(embed_prompt(""), embed_prompt("   "))
    assert embed_prompt("x", d_model=32).shape == (32,)


def test_embed_prompt_distinct_tokens():
    rng = np.random.default_rng(0)
    sims = []
    for _ in range(100):
        a, b = (f"tok{v}" for v in rng.choice(10**6, 2, replace=False))
        va, vb = embed_prompt(a).astype(np.float64), embed_prompt(b).astype(np.float64)
        sims.append(va @ vb)
    assert max(sims) < 0.9


def test_timestep_embedding():
    e = timestep_embedding(0.0, 64)
    assert e.shape == (64,)
    np.testing.assert_array_equal(e[:32], 0.0)
    np.testing.assert_array_equal(e[32:], 1.0)
    assert timestep_embedding(3.0, 7).shape == (7,)


def test_multi_head_forward():
    d = ToyDenoiser(DenoiserConfig(latent_hw=16, token_hw=8, d_model=32, d_feat=8, n_heads=4))
    eps, tap = d.forward(_latent(0, 16), 100.0, embed_prompt("z", 32))
    assert eps.shape == (4, 16, 16)
    assert tap.q[0].shape == (64, 32)


def test_prior_gain_follows_training_schedule(denoiser):
    from cora.schedule import train_alpha_bar

    ab = train_alpha_bar()
    assert denoiser.prior_gain(999) == pytest.approx(np.sqrt(1 - ab[999]))
    assert denoiser.prior_gain(0) == pytest.approx(np.sqrt(1 - ab[0]))
    # fractional (time-shifted) steps interpolate between neighbours
    mid = denoiser.prior_gain(500.5)
    assert min(denoiser.prior_gain(500), denoiser.prior_gain(501)) <= mid <= max(
        denoiser.prior_gain(500), denoiser.prior_gain(501))


def test_prior_skip_decomposition():
    x, c = _latent(7), embed_prompt("a lamp")
    raw = ToyDenoiser(DenoiserConfig(prior_skip=False, residual_scale=1.0))
    skip = ToyDenoiser(DenoiserConfig(prior_skip=True, residual_scale=0.25))
    e_raw = raw.forward(x, 600.0, c)[0].astype(np.float64)
    e_skip = skip.forward(x, 600.0, c)[0].astype(np.float64)
    np.testing.assert_allclose(e_skip, 0.25 * e_raw + skip.prior_gain(600.0) * x, atol=1e-5)
    with pytest.raises(ValueError):
        DenoiserConfig(residual_scale=0.0)


def test_reconstruction_without_prior_skip(schedule):
    from cora.pipeline import edit, identity_config
    from cora.schedule import invert
    from cora.tensor import Rng

    den = ToyDenoiser(DenoiserConfig(prior_skip=False, residual_scale=1.0, weight_seed=5))
    x0 = np.random.default_rng(8).uniform(-1, 1, (4, 32, 32)).astype(np.float32)
    rec = invert(x0, embed_prompt("a cat"), schedule, den, Rng(1))
    x, _ = edit(rec, identity_config(), den)
    assert np.abs(x - x0).max() < 1e-4
