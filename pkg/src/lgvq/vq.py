"""VQ-VAE backbone: conv encoder/decoder, codebook, quantizer and the VQ loss.

Tensors are channel-first throughout: images are ``(B, C, H, W)`` with values
in ``[0, 1]`` and grid features are ``(B, d_z, H/f, W/f)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class DimensionError(ValueError):
    """Raised when an input does not match the expected shape."""


class TrainingDivergence(FloatingPointError):
    """Raised when a loss evaluates to a non-finite value."""


def _check_factor(f: int) -> int:
    depth = int(round(math.log2(f)))
    if f < 1 or 2**depth != f:
        raise ValueError(f"down-sampling factor must be a power of two, got {f}")
    return depth


class Encoder(nn.Module):
    """Stride-2 conv stack mapping ``(B, C, H, W)`` to ``(B, d_z, H/f, W/f)``."""

    def __init__(self, in_channels: int = 3, hidden: int = 32, z_dim: int = 16, factor: int = 8):
        super().__init__()
        self.factor = factor
        depth = _check_factor(factor)
        layers: list[nn.Module] = [nn.Conv2d(in_channels, hidden, 3, padding=1), nn.ReLU()]
        for _ in range(depth):
            layers += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers += [ResBlock(hidden), nn.Conv2d(hidden, z_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise DimensionError(f"expected (B, C, H, W) image batch, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise DimensionError(f"image size {h}x{w} is not divisible by f={self.factor}")
        return self.net(x)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder` built from transposed convolutions."""

    def __init__(self, out_channels: int = 3, hidden: int = 32, z_dim: int = 16, factor: int = 8):
        super().__init__()
        self.z_dim = z_dim
        depth = _check_factor(factor)
        layers: list[nn.Module] = [nn.Conv2d(z_dim, hidden, 3, padding=1), ResBlock(hidden), nn.ReLU()]
        for _ in range(depth):
            layers += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers += [nn.Conv2d(hidden, out_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.z_dim:
            raise DimensionError(f"expected (B, {self.z_dim}, h, w) codes, got shape {tuple(z.shape)}")
        return self.net(z)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


@dataclass
class CodeGrid:
    """Quantized image: code indices ``(B, h, w)`` and their embeddings ``(B, d_z, h, w)``.

    ``embeddings`` is an index lookup into the codebook, so gradients taken
    through it land on the selected codebook rows.
    """

    indices: torch.Tensor
    embeddings: torch.Tensor

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.indices.shape[-2:])

    def flat_embeddings(self) -> torch.Tensor:
        """Embeddings as a ``(B, h*w, d_z)`` row-major token sequence."""
        return self.embeddings.flatten(2).transpose(1, 2)


class Codebook(nn.Module):
    """K learnable entries of dimension d_z, initialised uniformly in [-bound, bound].

    ``bound`` defaults to 1/K.
    """

    def __init__(self, size: int, dim: int, bound: float | None = None):
        super().__init__()
        if size < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {size}")
        self.size = size
        self.dim = dim
        bound = 1.0 / size if not bound else bound
        self.weight = nn.Parameter(torch.empty(size, dim).uniform_(-bound, bound))

    def forward(self, features: torch.Tensor) -> CodeGrid:
        return quantize(features, self.weight)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """Map ``(B, h, w)`` indices to ``(B, d_z, h, w)`` embeddings."""
        return F.embedding(indices, self.weight).permute(0, 3, 1, 2)


def nearest_code(flat: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the nearest entry for each row of ``flat``; ties go to the lowest index.

    Squared distances are computed elementwise (no ``|a|^2 - 2ab + |b|^2``
    expansion) so that equidistant entries compare exactly equal.
    """
    chunk = max(1, (1 << 22) // max(1, entries.numel()))
    out = []
    with torch.no_grad():
        for rows in flat.split(chunk):
            d = (rows[:, None, :] - entries[None, :, :]).pow(2).sum(-1)
            # argmin returns the first occurrence of the minimum
            out.append(d.argmin(dim=1))
    return torch.cat(out) if out else flat.new_zeros(0, dtype=torch.long)


def quantize(features: torch.Tensor, entries: torch.Tensor) -> CodeGrid:
    """Nearest-neighbour quantization of ``(B, d_z, h, w)`` features.

    Index selection is detached; the returned embeddings are differentiable
    with respect to ``entries`` only.
    """
    if features.dim() != 4 or features.shape[1] != entries.shape[1]:
        raise DimensionError(
            f"features {tuple(features.shape)} do not match codebook dimension {entries.shape[1]}"
        )
    b, d, h, w = features.shape
    flat = features.detach().permute(0, 2, 3, 1).reshape(-1, d)
    idx = nearest_code(flat, entries.detach()).view(b, h, w)
    emb = F.embedding(idx, entries).permute(0, 3, 1, 2)
    return CodeGrid(indices=idx, embeddings=emb)


def straight_through(features: torch.Tensor, codes: CodeGrid) -> torch.Tensor:
    """Forward value of ``codes.embeddings``, backward identity onto ``features``."""
    if features.shape != codes.embeddings.shape:
        raise DimensionError(f"shape mismatch {tuple(features.shape)} vs {tuple(codes.embeddings.shape)}")
    return features + (codes.embeddings - features).detach()


def vq_loss(
    x: torch.Tensor,
    x_rec: torch.Tensor,
    features: torch.Tensor,
    codes: CodeGrid | torch.Tensor,
    commitment: float = 0.25,
) -> torch.Tensor:
    """Reconstruction + codebook + commitment loss.

    Each term is a mean squared error. The codebook term only moves the
    codebook entries and the commitment term only moves the encoder.
    """
    if commitment < 0:
        raise ValueError("commitment weight must be non-negative")
    emb = codes.embeddings if isinstance(codes, CodeGrid) else codes
    rec = F.mse_loss(x_rec, x)
    codebook_term = F.mse_loss(emb, features.detach())
    commit_term = F.mse_loss(features, emb.detach())
    loss = rec + codebook_term + commitment * commit_term
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite VQ loss: {loss.item()}")
    return loss


class VQAutoencoder(nn.Module):
    def __init__(
        self,
        codebook_size: int = 64,
        z_dim: int = 16,
        factor: int = 8,
        hidden: int = 32,
        channels: int = 3,
        codebook_bound: float | None = None,
    ):
        super().__init__()
        self.factor = factor
        self.encoder = Encoder(channels, hidden, z_dim, factor)
        self.decoder = Decoder(channels, hidden, z_dim, factor)
        self.codebook = Codebook(codebook_size, z_dim, codebook_bound)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def quantize(self, features: torch.Tensor) -> CodeGrid:
        return self.codebook(features)

    def decode(self, z: torch.Tensor, clamp: bool = False) -> torch.Tensor:
        out = self.decoder(z)
        return out.clamp(0.0, 1.0) if clamp else out

    def decode_codes(self, codes: CodeGrid | torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """Decode a code grid (or an index tensor) to images, clamped by default."""
        if isinstance(codes, CodeGrid):
            z = codes.embeddings
        else:
            z = self.codebook.lookup(codes)
        return self.decode(z, clamp=clamp)

    def forward(self, x: torch.Tensor):
        """Training pass: returns ``(x_rec, features, codes)`` with raw decoder output."""
        features = self.encode(x)
        codes = self.quantize(features)
        x_rec = self.decode(straight_through(features, codes))
        return x_rec, features, codes

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_codes(self.quantize(self.encode(x)), clamp=True)
