"""Semantic alignment between code tokens and text.

Holds the code transformer that turns a quantized grid into contextual code
tokens with a leading global token, the global InfoNCE alignment loss, and
the masked-text-prediction branch (mask sampling, self-attention adapter,
cross-attention decoder, cross-entropy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .text import word_position_mask


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis. Zero vectors are rejected."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return (a * b).sum(-1) / (na * nb)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine similarity between rows of ``a`` (.., N, d) and ``b`` (.., M, d)."""
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).transpose(-1, -2)


class Block(nn.Module):
    """Pre-norm transformer block with optional cross-attention."""

    def __init__(self, dim: int, heads: int, cross: bool = False, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross = cross
        if cross:
            self.norm_q = nn.LayerNorm(dim)
            self.norm_kv = nn.LayerNorm(dim)
            self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, memory=None, pad_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)[0]
        if self.cross:
            q, kv = self.norm_q(x), self.norm_kv(memory)
            x = x + self.cross_attn(q, kv, kv, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class CodeTransformer(nn.Module):
    """Contextualises a code sequence behind a learnable global token.

    Input is ``(B, L, d_z)`` code embeddings in row-major grid order; output is
    ``(B, 1 + L, d_t)``, with row 0 the global code embedding.
    """

    def __init__(
        self,
        z_dim: int,
        text_dim: int,
        max_tokens: int,
        width: int = 64,
        layers: int = 2,
        heads: int = 4,
    ):
        super().__init__()
        self.max_tokens = max_tokens
        self.in_proj = nn.Linear(z_dim, width)
        self.cls = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, 1 + max_tokens, width) * 0.02)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, text_dim)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        b, length, _ = codes.shape
        if length > self.max_tokens:
            raise ValueError(f"{length} code tokens exceed the configured maximum {self.max_tokens}")
        x = torch.cat([self.cls.expand(b, -1, -1), self.in_proj(codes)], dim=1)
        x = x + self.pos[:, : length + 1]
        for blk in self.blocks:
            x = blk(x)
        return self.out_proj(self.norm(x))


def gsa_loss(
    cls_emb: torch.Tensor,
    eot_emb: torch.Tensor,
    temperature: float | None = None,
    symmetric: bool = False,
) -> torch.Tensor:
    """Global InfoNCE alignment, summed over the batch.

    By default image anchors are scored against in-batch text candidates on raw
    cosine similarity (no temperature). ``symmetric`` averages in the
    text-to-image direction as well.
    """
    if cls_emb.shape != eot_emb.shape:
        raise ValueError(f"shape mismatch {tuple(cls_emb.shape)} vs {tuple(eot_emb.shape)}")
    sim = cosine_matrix(cls_emb, eot_emb)
    if temperature is not None:
        sim = sim / temperature
    loss = -torch.diagonal(F.log_softmax(sim, dim=1)).sum()
    if symmetric:
        loss = 0.5 * (loss - torch.diagonal(F.log_softmax(sim, dim=0)).sum())
    return loss


def truncnorm_mean(mean: float, std: float, low: float, high: float) -> float:
    """Closed-form mean of a normal truncated to ``[low, high]``."""
    a, b = (low - mean) / std, (high - mean) / std
    phi = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)  # noqa: E731
    big_phi = lambda t: 0.5 * (1 + math.erf(t / math.sqrt(2)))  # noqa: E731
    return mean + std * (phi(a) - phi(b)) / (big_phi(b) - big_phi(a))


def sample_mask_ratio(
    generator: torch.Generator,
    size: int | tuple = (),
    mean: float = 0.55,
    std: float = 0.25,
    low: float = 0.5,
    high: float = 1.0,
) -> torch.Tensor:
    """Draw masking ratios from a truncated normal by inverse-CDF sampling."""
    if not low < high:
        raise ValueError("truncation bounds must satisfy low < high")
    size = (size,) if isinstance(size, int) else tuple(size)
    u = torch.rand(size, generator=generator, dtype=torch.float64)
    a = torch.special.ndtr(torch.tensor((low - mean) / std, dtype=torch.float64))
    b = torch.special.ndtr(torch.tensor((high - mean) / std, dtype=torch.float64))
    r = mean + std * torch.special.ndtri(a + u * (b - a))
    return r.clamp(low, high)


def mask_count(ratio: float, n: int) -> int:
    """Number of words to mask for ratio ``r``: ``r * (n - 2)`` rounded half up."""
    return int(math.floor(ratio * (n - 2) + 0.5))


@dataclass
class MaskedSequence:
    """Masked caption embeddings after the self-attention adapter.

    ``mask`` is a ``(B, n)`` boolean array of masked positions and ``targets``
    holds the true token ids at those positions in row-major order.
    """

    embeddings: torch.Tensor
    mask: torch.Tensor
    targets: torch.Tensor
    pad_mask: torch.Tensor

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def choose_mask_positions(
    tokens: torch.Tensor,
    eot_id: int,
    counts: list[int],
    generator: torch.Generator,
) -> torch.Tensor:
    """Pick ``counts[i]`` word positions of row ``i`` uniformly without replacement."""
    words = word_position_mask(tokens, eot_id)
    mask = torch.zeros_like(words)
    for i, k in enumerate(counts):
        pos = words[i].nonzero().flatten()
        k = min(k, len(pos))
        if k:
            pick = torch.randperm(len(pos), generator=generator)[:k]
            mask[i, pos[pick]] = True
    return mask


class MaskAdapter(nn.Module):
    """Position-indexed mask embeddings refined by one self-attention block."""

    def __init__(self, n: int, text_dim: int, heads: int = 4):
        super().__init__()
        self.mask_emb = nn.Parameter(torch.randn(n, text_dim) * 0.02)
        self.block = Block(text_dim, heads)

    def forward(self, seq: torch.Tensor, mask: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = torch.where(mask.unsqueeze(-1), self.mask_emb[: seq.shape[1]].expand_as(seq), seq)
        return self.block(x, pad_mask=pad_mask)


def padding_mask(tokens: torch.Tensor, eot_id: int) -> torch.Tensor:
    """True at positions after EOT."""
    pos = torch.arange(tokens.shape[-1], device=tokens.device)
    return pos > (tokens == eot_id).int().argmax(-1, keepdim=True)


def apply_mask(
    tokens: torch.Tensor,
    seq: torch.Tensor,
    ratios: torch.Tensor | float,
    generator: torch.Generator,
    adapter: MaskAdapter,
    eot_id: int,
) -> MaskedSequence:
    """Mask ``round(r (n-2))`` word positions per caption and adapt the sequence.

    If a caption has fewer words than requested, all of its words are masked.
    """
    b, n = tokens.shape
    ratios = torch.as_tensor(ratios, dtype=torch.float64).expand(b)
    counts = [mask_count(float(r), n) for r in ratios]
    mask = choose_mask_positions(tokens, eot_id, counts, generator)
    return mask_with_positions(tokens, seq, mask, adapter, eot_id)


def mask_with_positions(tokens, seq, mask, adapter: MaskAdapter, eot_id: int) -> MaskedSequence:
    pad = padding_mask(tokens, eot_id)
    emb = adapter(seq, mask, pad)
    return MaskedSequence(embeddings=emb, mask=mask, targets=tokens[mask], pad_mask=pad)


class MaskedWordDecoder(nn.Module):
    """Cross-attention decoder: masked text queries attend to code tokens."""

    def __init__(self, text_dim: int, vocab_size: int, layers: int = 2, heads: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(Block(text_dim, heads, cross=True) for _ in range(layers))
        self.norm = nn.LayerNorm(text_dim)
        self.head = nn.Linear(text_dim, vocab_size)

    def forward(self, code_tokens: torch.Tensor, text: torch.Tensor, pad_mask=None) -> torch.Tensor:
        x = text
        for blk in self.blocks:
            x = blk(x, memory=code_tokens, pad_mask=pad_mask)
        return self.head(self.norm(x))


def predict_masked(code_tokens: torch.Tensor, masked: MaskedSequence, decoder: MaskedWordDecoder) -> torch.Tensor:
    """Vocabulary logits ``(num_masked, V)`` at the masked positions."""
    logits = decoder(code_tokens, masked.embeddings, masked.pad_mask)
    return logits[masked.mask]


def mtp_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; zero when nothing is masked."""
    if targets.numel() == 0:
        return logits.new_zeros(())
    return F.cross_entropy(logits, targets)


class AlignmentModule(nn.Module):
    """Trainable parameters of the text-alignment branches, kept together for checkpointing."""

    def __init__(
        self,
        z_dim: int,
        text_dim: int,
        vocab_size: int,
        n: int,
        grid_tokens: int,
        vt_width: int = 64,
        vt_layers: int = 2,
        vt_heads: int = 4,
        adapter_heads: int = 4,
        mtp_layers: int = 2,
        mtp_heads: int = 4,
    ):
        super().__init__()
        self.code_transformer = CodeTransformer(z_dim, text_dim, grid_tokens, vt_width, vt_layers, vt_heads)
        self.mask_adapter = MaskAdapter(n, text_dim, adapter_heads)
        self.mtp_decoder = MaskedWordDecoder(text_dim, vocab_size, mtp_layers, mtp_heads)

    def encode_codes(self, code_embeddings: torch.Tensor) -> torch.Tensor:
        """``(B, d_z, h, w)`` code embeddings to ``(B, 1 + h*w, d_t)`` code tokens."""
        return self.code_transformer(code_embeddings.flatten(2).transpose(1, 2))
