import numpy as np
import pytest
import torch

from blurprior.blur import BlurSpec, apply_spec
from blurprior.evaluation import psnr
from blurprior.images import make_texture, to_tensor
from blurprior.pre_restore import (
    NAFBlock,
    PreRestore,
    PreRestoreConfig,
    naf_block,
    pre_restore_forward,
    sca,
    simple_gate,
)
from conftest import randomize_


# --- SimpleGate ----------------------------------------------------------------

def test_simple_gate_ones_half_passes_other_half():
    y = torch.randn(2, 3, 4, 4)
    out = simple_gate(torch.cat([torch.ones_like(y), y], dim=1))
    assert torch.equal(out, y)


def test_simple_gate_zero_half_annihilates():
    y = torch.randn(1, 2, 3, 3)
    assert torch.count_nonzero(simple_gate(torch.cat([torch.zeros_like(y), y], 1))) == 0


def test_simple_gate_pixel_example():
    x = torch.tensor([2.0, 3.0, 4.0, -1.0]).view(1, 4, 1, 1)
    assert simple_gate(x).flatten().tolist() == [8.0, -3.0]


def test_simple_gate_halves_channels_and_rejects_odd():
    assert simple_gate(torch.randn(1, 6, 2, 2)).shape == (1, 3, 2, 2)
    with pytest.raises(ValueError):
        simple_gate(torch.randn(1, 5, 2, 2))


# --- SCA -------------------------------------------------------------------------

def test_sca_identity_on_constant_channels_squares():
    c = torch.tensor([0.5, -2.0, 3.0])
    x = c.view(1, 3, 1, 1).expand(1, 3, 4, 5).clone()
    out = sca(x, torch.eye(3), torch.zeros(3))
    assert torch.allclose(out, (c ** 2).view(1, 3, 1, 1).expand_as(x))


def test_sca_zero_weights_annihilate():
    x = torch.randn(2, 4, 3, 3)
    assert torch.count_nonzero(sca(x, torch.zeros(4, 4), torch.zeros(4))) == 0


def test_sca_matches_explicit_loop(rng):
    x = rng.normal(size=(1, 2, 2, 2))
    w, b = rng.normal(size=(2, 2)), rng.normal(size=2)
    expect = np.zeros_like(x)
    pooled = [x[0, c].sum() / 4 for c in range(2)]
    for c in range(2):
        gain = sum(w[c, j] * pooled[j] for j in range(2)) + b[c]
        for i in range(2):
            for k in range(2):
                expect[0, c, i, k] = x[0, c, i, k] * gain
    out = sca(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b)).numpy()
    assert np.allclose(out, expect, atol=1e-12)


def test_sca_preserves_shape_and_rejects_mismatch():
    x = torch.randn(2, 4, 5, 3)
    assert sca(x, torch.randn(4, 4), torch.randn(4)).shape == x.shape
    with pytest.raises(ValueError):
        sca(x, torch.randn(3, 3), torch.randn(3))


# --- NAF block ---------------------------------------------------------------------

def test_naf_block_all_zero_weights_is_identity():
    blk = NAFBlock(4)
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
    x = torch.randn(2, 4, 6, 6)
    assert torch.equal(naf_block(x, blk), x)


def test_naf_block_fresh_init_is_identity_and_keeps_shape():
    blk = NAFBlock(8)
    x = torch.randn(1, 8, 5, 7)
    out = naf_block(x, blk)
    assert out.shape == x.shape
    assert torch.equal(out, x)


def test_naf_block_gradient_matches_finite_differences(float64, fd_check):
    torch.manual_seed(0)
    blk = randomize_(NAFBlock(4), seed=1)
    x = torch.randn(1, 4, 8, 8, requires_grad=True)
    w = torch.randn(1, 4, 8, 8)
    params = [blk.sca.weight, blk.beta, blk.dwconv.weight]
    err = fd_check(lambda: (naf_block(x, blk) * w).sum(), [x] + params)
    assert err <= 1e-3


# --- pre-restore UNet ----------------------------------------------------------------

def test_zero_init_residual_passes_input_through():
    net = PreRestore()
    x = torch.rand(2, 3, 16, 16)
    coarse, shallow = pre_restore_forward(x, net)
    assert torch.equal(coarse, x)
    assert shallow.shape == (2, net.cfg.shallow_feature_channels, 16, 16)


def test_shallow_channels_follow_config():
    net = PreRestore(PreRestoreConfig(width=8, shallow_feature_channels=12))
    _, shallow = net(torch.rand(1, 3, 8, 8))
    assert shallow.shape == (1, 12, 8, 8)


def test_single_stage_config_runs():
    net = PreRestore(PreRestoreConfig(n_stages=1))
    coarse, shallow = net(torch.rand(1, 3, 5, 7))
    assert coarse.shape == (1, 3, 5, 7) and shallow.shape[-2:] == (5, 7)


def test_indivisible_dims_report_required_padding():
    with pytest.raises(ValueError, match="pad to 12x16"):
        PreRestore()(torch.rand(1, 3, 10, 16))


def test_constant_input_gives_constant_coarse():
    x = torch.full((1, 3, 8, 8), 0.3)
    coarse, _ = PreRestore()(x)
    assert torch.equal(coarse, x)


def test_config_invariants():
    with pytest.raises(ValueError):
        PreRestoreConfig(width=15)
    with pytest.raises(ValueError):
        PreRestoreConfig(n_stages=0)


@pytest.mark.slow
def test_training_beats_blurred_input_by_one_db():
    """500 L1 steps on 200 pairs of 3-px linear blur (64x64)."""
    torch.manual_seed(0)
    rng = np.random.default_rng(5)
    sharp, blurred = [], []
    for i in range(240):
        img, _ = make_texture(rng, 64)
        spec = BlurSpec("linear", float(rng.choice([0.0, 45.0, 90.0, 135.0])), 3.0)
        sharp.append(to_tensor(img))
        blurred.append(to_tensor(apply_spec(img, spec)[0].astype(np.float32)))
    sharp, blurred = torch.cat(sharp), torch.cat(blurred)
    tr, te = slice(0, 200), slice(200, 240)
    net = PreRestore()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    g = torch.Generator().manual_seed(0)
    losses = []
    for _ in range(500):
        idx = torch.randint(0, 200, (8,), generator=g)
        coarse, _ = net(blurred[tr][idx], clamp=False)
        loss = (coarse - sharp[tr][idx]).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert smooth[-1] < smooth[0]
    with torch.no_grad():
        coarse, _ = net(blurred[te])
    gain = np.mean([psnr(c.permute(1, 2, 0).numpy(), s.permute(1, 2, 0).numpy()) -
                    psnr(b.permute(1, 2, 0).numpy(), s.permute(1, 2, 0).numpy())
                    for c, b, s in zip(coarse, blurred[te], sharp[te])])
    assert gain >= 1.0
