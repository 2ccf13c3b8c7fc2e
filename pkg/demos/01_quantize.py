"""Quantizing grid features against a codebook.

Run: python demos/01_quantize.py
"""
import torch

from lgvq.vq import Codebook, VQAutoencoder, quantize, straight_through, vq_loss

torch.manual_seed(0)

# A codebook of 8 entries in 4 dimensions, initialised in [-1/8, 1/8].
cb = Codebook(8, 4)
print("codebook range:", cb.weight.min().item(), cb.weight.max().item())

# Grid features are (B, d_z, h, w). Each cell snaps to its nearest entry.
feats = torch.randn(1, 4, 2, 3, requires_grad=True)
codes = quantize(feats, cb.weight)
print("code indices:\n", codes.indices[0])

# Two identical entries: the lower index always wins.
tied = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
print("tie ->", quantize(torch.tensor([[[[1.0]], [[0.0]]]]), tied).indices.item())

# Straight-through: forward value is the code, backward passes straight to the features.
z = straight_through(feats, codes)
z.sum().backward()
print("feature grad is all ones:", bool((feats.grad == 1).all()))

# The full autoencoder and its loss (reconstruction + codebook + 0.25 * commitment).
ae = VQAutoencoder(codebook_size=16, z_dim=4, factor=4, hidden=16)
x = torch.rand(2, 3, 16, 16)
x_rec, f, c = ae(x)
print("grid:", tuple(f.shape), "loss:", vq_loss(x, x_rec, f, c).item())

# Decoding a single code as a 1x1 grid gives one f x f patch.
print("patch per code:", tuple(ae.decode_codes(torch.zeros(1, 1, 1, dtype=torch.long)).shape))
