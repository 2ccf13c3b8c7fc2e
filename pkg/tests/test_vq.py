import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lgvq.vq import (
    Codebook,
    CodeGrid,
    Decoder,
    DimensionError,
    Encoder,
    TrainingDivergence,
    VQAutoencoder,
    nearest_code,
    quantize,
    straight_through,
    vq_loss,
)


def brute_force_nn(flat, entries):
    """Exhaustive search in float64 with explicit lowest-index tie-breaking."""
    flat = np.asarray(flat, dtype=np.float64)
    entries = np.asarray(entries, dtype=np.float64)
    out = []
    for v in flat:
        best, best_d = 0, None
        for k, e in enumerate(entries):
            d = float(((v - e) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def test_nearest_code_matches_brute_force():
    gen = torch.Generator().manual_seed(3)
    flat = torch.randn(200, 8, generator=gen, dtype=torch.float64)
    entries = torch.randn(16, 8, generator=gen, dtype=torch.float64)
    np.testing.assert_array_equal(nearest_code(flat, entries).numpy(), brute_force_nn(flat, entries))


def test_exact_tie_goes_to_lowest_index():
    entries = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    flat = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    # origin is equidistant from all four; duplicate entries 0 and 3
    assert nearest_code(flat, entries).tolist() == [0, 0, 0]


def test_duplicate_entry_never_selected_over_first():
    entries = torch.tensor([[0.5, 0.5], [2.0, 2.0], [0.5, 0.5]])
    flat = torch.randn(50, 2)
    assert 2 not in nearest_code(flat, entries).tolist()


def test_quantize_single_entry_codebook():
    feats = torch.randn(2, 3, 2, 2)
    codes = quantize(feats, torch.ones(1, 3))
    assert codes.indices.eq(0).all()
    assert torch.equal(codes.embeddings, torch.ones(2, 3, 2, 2))


def test_quantize_shapes_and_lookup():
    feats = torch.randn(2, 4, 3, 5)
    cb = Codebook(10, 4)
    codes = cb(feats)
    assert codes.indices.shape == (2, 3, 5)
    assert codes.embeddings.shape == (2, 4, 3, 5)
    assert torch.equal(cb.lookup(codes.indices), codes.embeddings)
    assert codes.flat_embeddings().shape == (2, 15, 4)
    # row-major flattening: token 6 is grid cell (1, 1)
    assert torch.equal(codes.flat_embeddings()[:, 6], codes.embeddings[:, :, 1, 1])


def test_quantize_rejects_dimension_mismatch():
    with pytest.raises(DimensionError):
        quantize(torch.randn(1, 3, 2, 2), torch.randn(5, 4))


def test_codebook_init_range():
    torch.manual_seed(0)
    cb = Codebook(64, 16)
    assert cb.weight.abs().max() <= 1 / 64
    assert cb.weight.abs().max() > 0.9 / 64
    wide = Codebook(8, 4, bound=0.5)
    assert wide.weight.abs().max() <= 0.5


def test_codebook_needs_two_entries():
    with pytest.raises(ValueError):
        Codebook(1, 4)


def test_quantized_entry_is_fixed_point():
    cb = Codebook(12, 6)
    grid = cb.weight.detach()[torch.tensor([[3, 7], [0, 11]])].permute(2, 0, 1)[None]
    codes = cb(grid)
    assert codes.indices.tolist() == [[[3, 7], [0, 11]]]


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3), st.integers(2, 12), st.integers(1, 6), st.integers(0, 10_000),
)
def test_quantize_property_nearest(b, k, d, seed):
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(b, d, 2, 3, generator=gen, dtype=torch.float64)
    entries = torch.randn(k, d, generator=gen, dtype=torch.float64)
    codes = quantize(feats, entries)
    flat = feats.permute(0, 2, 3, 1).reshape(-1, d)
    np.testing.assert_array_equal(codes.indices.flatten().numpy(), brute_force_nn(flat, entries))
    # idempotent: quantizing the quantized grid changes nothing
    again = quantize(codes.embeddings.detach(), entries)
    assert torch.equal(again.embeddings, codes.embeddings)


def test_straight_through_forward_value_and_identity_gradient():
    feats = torch.randn(2, 3, 2, 2, requires_grad=True)
    cb = Codebook(5, 3)
    codes = cb(feats)
    out = straight_through(feats, codes)
    assert torch.allclose(out, codes.embeddings)
    upstream = torch.randn_like(out)
    (out * upstream).sum().backward()
    assert torch.equal(feats.grad, upstream)
    assert cb.weight.grad is None


def test_straight_through_shape_check():
    codes = CodeGrid(torch.zeros(1, 2, 2, dtype=torch.long), torch.zeros(1, 3, 2, 2))
    with pytest.raises(DimensionError):
        straight_through(torch.zeros(1, 3, 2, 3), codes)


def _setup(seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 3, 4, 4, generator=gen, dtype=torch.float64)
    x_rec = torch.rand(3, 3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    feats = torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    entries = torch.randn(6, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    return x, x_rec, feats, entries


def test_vq_loss_closed_form():
    x, x_rec, feats, entries = _setup()
    codes = quantize(feats, entries)
    loss = vq_loss(x, x_rec, feats, codes, commitment=0.25)
    e = codes.embeddings.detach().numpy()
    f = feats.detach().numpy()
    expected = ((x_rec.detach().numpy() - x.numpy()) ** 2).mean() + 1.25 * ((e - f) ** 2).mean()
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_vq_loss_gradients_match_finite_differences(fd, rel):
    x, x_rec, feats, entries = _setup(1)
    idx = quantize(feats, entries).indices
    mse = torch.nn.functional.mse_loss

    def lookup(e):
        return torch.nn.functional.embedding(idx, e).permute(0, 3, 1, 2)

    vq_loss(x, x_rec, feats, lookup(entries), commitment=0.25).backward()
    frozen_f, frozen_e = feats.detach().clone(), entries.detach().clone()
    # stop-gradient oracles: each input only sees the terms routed to it
    assert rel(x_rec.grad, fd(lambda: mse(x_rec, x).detach(), x_rec)) < 1e-3
    enc = fd(lambda: (0.25 * mse(feats, lookup(frozen_e))).detach(), feats)
    assert rel(feats.grad, enc) < 1e-3
    cb = fd(lambda: mse(lookup(entries), frozen_f).detach(), entries)
    assert rel(entries.grad, cb) < 1e-3


def test_vq_loss_stop_gradient_routing():
    x, _, feats, entries = _setup(2)
    codes = quantize(feats, entries)
    # no commitment: the encoder receives nothing from the code terms
    x_rec = torch.zeros_like(x)
    vq_loss(x, x_rec, feats, codes, commitment=0.0).backward()
    assert torch.count_nonzero(feats.grad) == 0
    used = set(codes.indices.flatten().tolist())
    for k in range(len(entries)):
        if k not in used:
            assert torch.count_nonzero(entries.grad[k]) == 0


def test_reconstruction_gradient_skips_codebook():
    dec = Decoder(hidden=8, z_dim=4, factor=2).double()
    x, _, feats, entries = _setup(3)
    codes = quantize(feats, entries)
    x_rec = dec(straight_through(feats, codes))
    torch.nn.functional.mse_loss(x_rec, x).backward()
    assert entries.grad is None
    assert torch.count_nonzero(feats.grad) > 0


def test_codebook_term_skips_encoder_and_commitment_skips_codebook():
    x, x_rec, feats, entries = _setup(4)
    codes = quantize(feats, entries)
    n = feats.numel()
    vq_loss(x, x_rec.detach(), feats, codes, commitment=0.25).backward()
    diff = (feats - codes.embeddings).detach()
    # encoder sees only the commitment term
    assert torch.allclose(feats.grad, 0.25 * 2 * diff / n, rtol=1e-12, atol=0)
    # codebook row k sees only the codebook term summed over its cells
    expected = torch.zeros_like(entries)
    flat = (-2 * diff / n).permute(0, 2, 3, 1).reshape(-1, 4)
    expected.index_add_(0, codes.indices.flatten(), flat)
    assert torch.allclose(entries.grad, expected, rtol=1e-12, atol=1e-18)


def test_vq_loss_raises_on_nan():
    x, x_rec, feats, entries = _setup()
    codes = quantize(feats, entries)
    bad = x_rec.detach().clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDivergence):
        vq_loss(x, bad, feats, codes)
    with pytest.raises(ValueError):
        vq_loss(x, x_rec, feats, codes, commitment=-1)


@pytest.mark.parametrize("factor", [1, 2, 4, 8])
def test_autoencoder_shapes(factor):
    ae = VQAutoencoder(codebook_size=8, z_dim=4, factor=factor, hidden=8)
    x = torch.rand(2, 3, 16, 16)
    x_rec, feats, codes = ae(x)
    assert feats.shape == (2, 4, 16 // factor, 16 // factor)
    assert x_rec.shape == x.shape
    rec = ae.reconstruct(x)
    assert rec.min() >= 0 and rec.max() <= 1
    assert torch.equal(ae.decode_codes(codes.indices), ae.decode_codes(codes))


def test_encoder_rejects_bad_sizes():
    enc = Encoder(factor=4, hidden=8, z_dim=4)
    with pytest.raises(DimensionError):
        enc(torch.rand(1, 3, 10, 12))
    with pytest.raises(DimensionError):
        enc(torch.rand(3, 8, 8))
    with pytest.raises(ValueError):
        Encoder(factor=3)


def test_decode_single_code_gives_factor_patch():
    ae = VQAutoencoder(codebook_size=5, z_dim=4, factor=4, hidden=8)
    out = ae.decode_codes(torch.arange(5).view(5, 1, 1))
    assert out.shape == (5, 3, 4, 4)
