import math

import numpy as np
import pytest
import torch

from stereo_spixel.core import ValidationError
from stereo_spixel.dsfm import (DSFM, ParallaxAttention, align, apply_attention,
                                attention_from_projections, fuse_concat, valid_mask)

from conftest import finite_difference_check


def test_zero_projections_give_uniform_rows():
    z = torch.zeros(1, 3, 2, 4)
    attn = attention_from_projections(z, z)
    assert torch.allclose(attn.m_r2l, torch.full((1, 2, 4, 4), 0.25))
    assert torch.allclose(attn.m_l2r, torch.full((1, 2, 4, 4), 0.25))


def test_two_pixel_softmax_example():
    a = torch.tensor([1.0, 0.0]).reshape(1, 1, 1, 2)
    attn = attention_from_projections(a, a.clone())
    e = math.e
    expected = torch.tensor([[e / (e + 1), 1 / (e + 1)], [0.5, 0.5]])
    assert torch.allclose(attn.m_r2l[0, 0], expected, atol=1e-7)


def test_attention_shape_and_rows(rng):
    mod = DSFM(5)
    fl, fr = torch.randn(2, 5, 3, 7), torch.randn(2, 5, 3, 7)
    _, _, attn, mask = mod(fl, fr)
    for m in attn:
        assert m.shape == (2, 3, 7, 7)
        assert (m >= 0).all()
        assert torch.allclose(m.sum(-1), torch.ones(2, 3, 7), atol=1e-5)
    assert set(torch.unique(mask.o_l2r).tolist()) <= {0.0, 1.0}


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        DSFM(2).attention_maps(torch.randn(1, 2, 4, 4), torch.randn(1, 2, 4, 5))


def test_align_uniform_is_row_mean():
    fl, fr = torch.randn(1, 2, 3, 4), torch.randn(1, 2, 3, 4)
    u = torch.full((1, 3, 4, 4), 0.25)
    al, ar = align(ParallaxAttention(u, u), fl, fr)
    assert torch.allclose(al, fr.mean(-1, keepdim=True).expand_as(fr), atol=1e-6)
    assert torch.allclose(ar, fl.mean(-1, keepdim=True).expand_as(fl), atol=1e-6)


def test_align_identity_attention():
    fl, fr = torch.randn(1, 2, 3, 4), torch.randn(1, 2, 3, 4)
    eye = torch.eye(4).expand(1, 3, 4, 4)
    al, ar = align(ParallaxAttention(eye, eye), fl, fr)
    assert torch.equal(al, fr) and torch.equal(ar, fl)


def test_align_weighted_sum_oracle(rng):
    f = rng.normal(size=(1, 2, 1, 4))
    m = rng.random((1, 1, 4, 4))
    m /= m.sum(-1, keepdims=True)
    out = apply_attention(torch.from_numpy(m), torch.from_numpy(f)).numpy()
    for c in range(2):
        for j in range(4):
            ref = sum(m[0, 0, j, k] * f[0, c, 0, k] for k in range(4))
            assert abs(out[0, c, 0, j] - ref) < 1e-6


def test_mask_uniform_all_ones():
    u = torch.full((1, 2, 4, 4), 0.25)
    mask = valid_mask(ParallaxAttention(u, u))
    assert torch.equal(mask.o_l2r, torch.ones(1, 2, 4))


def test_mask_unattended_column_is_zero():
    m = torch.zeros(1, 1, 3, 3)
    m[..., 0] = 1.0  # everyone attends column 0; columns 1, 2 get nothing
    mask = valid_mask(ParallaxAttention(m, m))
    assert mask.o_l2r[0, 0].tolist() == [1.0, 0.0, 0.0]


def test_mask_column_sum_example():
    m = torch.tensor([[0.95, 0.05], [0.99, 0.01]]).reshape(1, 1, 2, 2)
    mask = valid_mask(ParallaxAttention(m, m))
    assert torch.allclose(m.sum(-2)[0, 0], torch.tensor([1.94, 0.06]))
    assert mask.o_l2r[0, 0].tolist() == [1.0, 0.0]


def test_mask_threshold_is_strict():
    m = torch.tensor([[0.9, 0.1], [1.0, 0.0]], dtype=torch.float64).reshape(1, 1, 2, 2)
    mask = valid_mask(ParallaxAttention(m, m), tau=0.1)
    assert mask.o_l2r[0, 0].tolist() == [1.0, 0.0]


def test_mask_is_detached():
    fl = torch.randn(1, 2, 2, 4, requires_grad=True)
    _, _, _, mask = DSFM(2)(fl, torch.randn(1, 2, 2, 4))
    assert not mask.o_l2r.requires_grad and not mask.o_r2l.requires_grad


def test_fuse_degenerate_masks_are_exact():
    f, fa = torch.randn(1, 3, 4, 5), torch.randn(1, 3, 4, 5)
    assert torch.equal(fuse_concat(f, fa, torch.zeros(1, 4, 5)), torch.cat([f, f], 1))
    assert torch.equal(fuse_concat(f, fa, torch.ones(1, 4, 5)), torch.cat([fa, f], 1))


def test_fuse_checkerboard_is_select():
    f, fa = torch.randn(1, 3, 4, 5), torch.randn(1, 3, 4, 5)
    ii, jj = torch.meshgrid(torch.arange(4), torch.arange(5), indexing="ij")
    mask = ((ii + jj) % 2).float()[None]
    out = fuse_concat(f, fa, mask)
    assert torch.equal(out[:, :3], torch.where(mask[:, None] > 0, fa, f))
    assert torch.equal(out[:, 3:], f)


def test_fuse_bad_mask_shape():
    with pytest.raises(ValidationError):
        fuse_concat(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3), torch.ones(1, 3, 4))


def test_identical_views_give_identical_outputs():
    mod = DSFM(4).eval()
    f = torch.randn(1, 4, 5, 6)
    with torch.no_grad():
        out_l, out_r, _, _ = mod(f, f.clone())
    assert torch.equal(out_l, out_r)
    assert out_l.shape == f.shape


def test_occlusion_off_uses_all_ones():
    _, _, _, mask = DSFM(2, occlusion=False)(torch.randn(1, 2, 3, 4), torch.randn(1, 2, 3, 4))
    assert torch.equal(mask.o_l2r, torch.ones(1, 3, 4))


def test_unshared_projection_is_separate():
    mod = DSFM(2, shared_projection=False)
    assert mod.proj_a is not mod.proj_b


@pytest.mark.parametrize("trial", range(5))
def test_epipolar_locality(trial):
    gen = torch.Generator().manual_seed(trial)
    mod = DSFM(3).eval()
    fl, fr = torch.randn(1, 3, 5, 6, generator=gen), torch.randn(1, 3, 5, 6, generator=gen)
    row = trial % 5
    fr2 = fr.clone()
    fr2[0, :, row, trial % 6] += 3.0
    with torch.no_grad():
        a = mod(fl, fr, reduce=False)
        b = mod(fl, fr2, reduce=False)
    others = [i for i in range(5) if i != row]
    for x, y in ((a[0], b[0]), (a[1], b[1])):
        assert torch.equal(x[:, :, others], y[:, :, others])
        assert not torch.equal(x[:, :, row], y[:, :, row])


def test_gradient_matches_finite_differences():
    mod = DSFM(2).double().eval()
    fr = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    wl = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    wr = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    def readout(fl):
        out_l, out_r, _, _ = mod(fl, fr)
        return (out_l * wl).sum() + (out_r * wr).sum()

    finite_difference_check(readout, torch.randn(1, 2, 4, 4, dtype=torch.float64), n_probe=32)
