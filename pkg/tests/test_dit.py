import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from blurprior.dit import (
    ConditionFusion,
    Denoiser,
    DiTBlock,
    DiTConfig,
    dit_block,
    fuse_conditions,
    linear_attention,
    pos_embedding_2d,
    reference_attention,
    timestep_embedding,
)
from conftest import attention_margin, randomize_


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


# --- linear attention -----------------------------------------------------------

def test_single_token_collapses_to_value():
    out = linear_attention(_t([[1.0, 0.0]]), _t([[2.0, 0.0]]), _t([[5.0]]))
    assert out.item() == pytest.approx(5.0, rel=1e-6)
    assert reference_attention([[1.0, 0.0]], [[2.0, 0.0]], [[5.0]])[0, 0] == pytest.approx(5.0, rel=1e-6)


def test_identical_keys_average_values(rng):
    q = _t(np.abs(rng.normal(size=(5, 3))) + 0.1)
    k = _t(np.tile([[0.5, 1.0, 0.2]], (7, 1)))
    v = _t(rng.normal(size=(7, 4)))
    out = linear_attention(q, k, v)
    assert torch.allclose(out, v.mean(0).expand(5, 4), rtol=1e-5)


def test_all_negative_queries_give_zero_output():
    q = -torch.rand(4, 3, dtype=torch.float64) - 0.1
    k, v = torch.rand(6, 3, dtype=torch.float64), torch.rand(6, 2, dtype=torch.float64)
    assert torch.count_nonzero(linear_attention(q, k, v)) == 0
    assert np.count_nonzero(reference_attention(q, k, v)) == 0


def test_random_case_matches_reference(rng):
    q, k, v = (rng.normal(size=(64, 16)) for _ in range(3))
    lin = linear_attention(_t(q), _t(k), _t(v)).numpy()
    ref = reference_attention(q, k, v)
    assert np.max(np.abs(lin - ref) / (np.abs(ref) + 1e-12)) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 40), d=st.integers(1, 8), dv=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_oracle_equivalence_property(n, d, dv, seed):
    r = np.random.default_rng(seed)
    q, k, v = r.normal(size=(n, d)), r.normal(size=(n, d)), r.normal(size=(n, dv))
    lin = linear_attention(_t(q), _t(k), _t(v)).numpy()
    ref = reference_attention(q, k, v)
    assert np.all(np.isfinite(lin))
    assert np.allclose(lin, ref, rtol=1e-6, atol=1e-9)


def test_outputs_finite_for_all_negative_inputs():
    q = -torch.rand(8, 4)
    k = -torch.rand(8, 4)
    assert torch.isfinite(linear_attention(q, k, torch.randn(8, 3))).all()


def test_permutation_equivariance(rng):
    q, k, v = (_t(rng.normal(size=(10, 4))) for _ in range(3))
    perm = torch.from_numpy(rng.permutation(10))
    out = linear_attention(q, k, v)
    out_p = linear_attention(q[perm], k[perm], v[perm])
    assert torch.allclose(out_p, out[perm], atol=1e-12)


def test_key_mask_equals_dropping_keys(rng):
    q, k, v = (_t(rng.normal(size=(6, 4))) for _ in range(3))
    mask = _t([1, 1, 0, 1, 0, 1])
    keep = mask.bool()
    assert torch.allclose(linear_attention(q, k, v, key_mask=mask), linear_attention(q, k[keep], v[keep]))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        linear_attention(torch.rand(3, 4), torch.rand(3, 5), torch.rand(3, 2))
    with pytest.raises(ValueError):
        linear_attention(torch.rand(3, 4), torch.rand(3, 4), torch.rand(2, 2))
    with pytest.raises(ValueError):
        reference_attention(np.ones((3, 4)), np.ones((2, 4)), np.ones((3, 1)))


def _best_time(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def test_reference_scales_quadratically():
    r = np.random.default_rng(0)
    small = [r.normal(size=(1024, 32)) for _ in range(3)]
    big = [r.normal(size=(4096, 32)) for _ in range(3)]
    ratio = _best_time(lambda: reference_attention(*big), 3) / _best_time(lambda: reference_attention(*small), 3)
    assert ratio >= 12.0


# --- DiT block -----------------------------------------------------------------------

def test_block_is_identity_at_init():
    cfg = DiTConfig(d_model=16, n_heads=2, text_dim=8)
    blk = DiTBlock(cfg)
    x = torch.randn(2, 9, 16)
    out = dit_block(x, torch.randn(2, 16), torch.randn(2, 3, 8), blk)
    assert out.shape == x.shape
    assert torch.equal(out, x)


def test_block_text_dim_mismatch_rejected():
    cfg = DiTConfig(d_model=16, n_heads=2, text_dim=8)
    blk = randomize_(DiTBlock(cfg), 0)
    with pytest.raises(ValueError):
        blk(torch.randn(1, 4, 16), torch.randn(1, 16), torch.randn(1, 2, 7))


def test_block_without_text_skips_cross_attention():
    cfg = DiTConfig(d_model=16, n_heads=2, text_dim=8)
    blk = randomize_(DiTBlock(cfg), 0)
    x, c = torch.randn(1, 4, 16), torch.randn(1, 16)
    no_text = blk(x, c, None)
    with torch.no_grad():
        blk.cross.proj.weight.zero_()
        blk.cross.proj.bias.zero_()
    assert torch.allclose(no_text, blk(x, c, torch.randn(1, 2, 8)))


def smooth_block_instance(margin=0.02, max_tries=500):
    """Tiny random block plus inputs whose ReLU pre-activations sit at least ``margin`` from 0."""
    cfg = DiTConfig(d_model=8, n_heads=2, text_dim=4, mlp_ratio=2.0)
    for seed in range(max_tries):
        g = torch.Generator().manual_seed(seed)
        blk = randomize_(DiTBlock(cfg), seed=seed, scale=0.4)
        x = torch.randn(1, 4, 8, generator=g)
        c = torch.randn(1, 8, generator=g)
        text = torch.randn(1, 3, 4, generator=g)
        if attention_margin(blk, lambda: blk(x, c, text)) >= margin:
            return blk, x.requires_grad_(), c.requires_grad_(), text.requires_grad_()
    raise AssertionError("no kink-free instance found")


def test_block_gradient_matches_finite_differences(float64, fd_check):
    blk, x, c, text = smooth_block_instance()
    w = torch.randn(1, 4, 8, generator=torch.Generator().manual_seed(0))
    err = fd_check(lambda: (dit_block(x, c, text, blk) * w).sum(), [x, c, text, blk.attn.qkv.weight])
    assert err <= 1e-3


# --- fusion ---------------------------------------------------------------------------

def test_fusion_token_count_and_width():
    fusion = ConditionFusion(c_lat=4, shallow_channels=6, use_motion=True, d_model=32)
    tokens = fuse_conditions(torch.randn(2, 4, 8, 8), torch.randn(2, 6, 64, 64), torch.randn(2, 2, 64, 64),
                             fusion, coarse_latent=torch.randn(2, 4, 8, 8))
    assert tokens.shape == (2, 64, 32)


def test_zero_side_inputs_reduce_to_latent_projection():
    fusion = ConditionFusion(c_lat=4, shallow_channels=6, use_motion=True, d_model=16)
    lat = torch.randn(1, 4, 4, 4)
    tokens = fuse_conditions(lat, torch.zeros(1, 6, 16, 16), torch.zeros(1, 2, 16, 16), fusion)
    w = fusion.proj.weight[:, :4]
    expect = lat.flatten(2).transpose(1, 2) @ w.T + fusion.proj.bias + pos_embedding_2d(4, 4, 16)
    assert torch.allclose(tokens, expect, atol=1e-6)


def test_pooled_motion_preserves_mean():
    field = torch.randn(1, 2, 32, 32, dtype=torch.float64)
    pooled = torch.nn.functional.avg_pool2d(field, 8)
    assert torch.allclose(pooled.mean(dim=(2, 3)), field.mean(dim=(2, 3)), atol=1e-6)


def test_fusion_rejects_inconsistent_dims():
    fusion = ConditionFusion(c_lat=4, shallow_channels=6, use_motion=True, d_model=16)
    with pytest.raises(ValueError):
        fuse_conditions(torch.randn(1, 4, 4, 4), torch.randn(1, 6, 16, 16), torch.randn(1, 2, 16, 20), fusion)
    with pytest.raises(ValueError):
        fuse_conditions(torch.randn(1, 4, 4, 4), torch.randn(1, 5, 16, 16), torch.randn(1, 2, 16, 16), fusion)


def test_positional_embedding_distinguishes_positions():
    pe = pos_embedding_2d(4, 5, 32)
    assert pe.shape == (20, 32)
    assert len({tuple(np.round(r, 6)) for r in pe.numpy()}) == 20


def test_timestep_embedding_shape():
    assert timestep_embedding(torch.tensor([1, 500, 1000]), 16).shape == (3, 16)


# --- denoiser ---------------------------------------------------------------------------

def test_denoiser_outputs_zero_at_init_and_latent_shape():
    cfg = DiTConfig(d_model=32, n_heads=2, n_blocks=2, text_dim=8)
    net = Denoiser(cfg, c_lat=4, shallow_channels=6, use_motion=True)
    x = torch.randn(2, 4, 4, 4)
    out = net(x, torch.tensor([3, 700]), x, torch.randn(2, 6, 32, 32), torch.randn(2, 2, 32, 32),
              torch.randn(2, 3, 8), torch.ones(2, 3))
    assert out.shape == x.shape
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("use_text,shallow,motion", [(False, 0, False), (True, 6, False), (False, 6, True)])
def test_denoiser_toggle_variants_run(use_text, shallow, motion):
    cfg = DiTConfig(d_model=16, n_heads=2, n_blocks=1, text_dim=8, use_text=use_text)
    net = randomize_(Denoiser(cfg, 4, shallow, motion), 0, 0.1)
    x = torch.randn(1, 4, 2, 2)
    out = net(x, torch.tensor([10]), x, torch.randn(1, 6, 16, 16) if shallow else None,
              torch.randn(1, 2, 16, 16) if motion else None, torch.randn(1, 2, 8), None)
    assert torch.isfinite(out).all()


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        DiTConfig(d_model=10, n_heads=4)
