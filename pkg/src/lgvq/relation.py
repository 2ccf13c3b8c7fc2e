"""Transfer of word-pair similarity structure onto matched codebook entries.

Each word is matched to the code token it is most similar to (global token
excluded); the loss then asks the pre-transformer code embeddings at the
matched grid positions to reproduce the cosine similarity of the word pair.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from typing import Collection, Sequence

import torch
import torch.nn.functional as F

from .text import load_stopwords


@dataclass(frozen=True)
class WordCodeMatch:
    word_id: int
    grid_position: int
    code_embedding: torch.Tensor


def content_word_ids(tokens: Sequence[int], encoder, stopwords: Collection[str] | None = None) -> list[int]:
    """Distinct content-word ids of a caption in first-seen order.

    Drops special tokens (SOT/EOT/PAD/UNK/MASK) and stop-words.
    """
    stop = load_stopwords() if stopwords is None else stopwords
    specials = encoder.special_ids
    out: list[int] = []
    for t in tokens:
        t = int(t)
        if t == encoder.eot_id:
            break
        if t in specials or t in out or encoder.token_string(t) in stop:
            continue
        out.append(t)
    return out


def select_word_pairs(word_ids: Sequence[int], max_pairs: int = 32, seed: int = 0) -> list[tuple[int, int]]:
    """All unordered pairs of distinct words, subsampled to ``max_pairs`` with a seeded draw."""
    uniq = list(dict.fromkeys(int(w) for w in word_ids))
    pairs = list(itertools.combinations(uniq, 2))
    if len(pairs) > max_pairs:
        keep = sorted(random.Random(seed).sample(range(len(pairs)), max_pairs))
        pairs = [pairs[i] for i in keep]
    return pairs


def match_positions(word_vecs: torch.Tensor, code_tokens: torch.Tensor) -> torch.Tensor:
    """Grid position (0-based, global token excluded) best matching each word vector.

    ``code_tokens`` is ``(1 + L, d_t)`` with the global token first. Ties go to
    the lowest position. The result carries no gradient.
    """
    with torch.no_grad():
        sim = F.normalize(word_vecs, dim=-1) @ F.normalize(code_tokens[1:], dim=-1).T
        return sim.argmax(dim=-1)


def match_word_to_code(
    word_vec: torch.Tensor,
    code_tokens: torch.Tensor,
    code_embeddings: torch.Tensor,
    word_id: int = -1,
) -> WordCodeMatch:
    """Match one word vector against ``(1 + L, d_t)`` code tokens.

    ``code_embeddings`` is the ``(L, d_z)`` row-major quantized grid the code
    tokens were computed from; the returned embedding is taken from it.
    """
    if word_vec.norm() == 0:
        raise ValueError("word vector must be non-zero")
    pos = int(match_positions(word_vec[None], code_tokens)[0])
    return WordCodeMatch(word_id, pos, code_embeddings[pos])


def ras_loss(
    pairs: Sequence[tuple[int, int]],
    word_table: torch.Tensor,
    code_tokens: torch.Tensor,
    code_embeddings: torch.Tensor,
) -> torch.Tensor:
    """Summed squared gap between word-pair and matched-code-pair cosine similarity.

    Args:
        pairs: word-id pairs from one caption.
        word_table: frozen ``(V, d_t)`` word embedding table.
        code_tokens: ``(1 + L, d_t)`` contextual code tokens of the image.
        code_embeddings: ``(L, d_z)`` quantized embeddings of the image.
    """
    if not pairs:
        return code_embeddings.new_zeros(())
    ids = sorted({w for p in pairs for w in p})
    slot = {w: k for k, w in enumerate(ids)}
    words = word_table[torch.tensor(ids)].detach()
    pos = match_positions(words, code_tokens.detach())
    codes = F.normalize(code_embeddings[pos], dim=-1)
    words = F.normalize(words, dim=-1)
    i = torch.tensor([slot[a] for a, _ in pairs])
    j = torch.tensor([slot[b] for _, b in pairs])
    s_word = (words[i] * words[j]).sum(-1)
    s_code = (codes[i] * codes[j]).sum(-1)
    return (s_word - s_code).pow(2).sum()


def ras_loss_batch(
    pair_sets: Sequence[Sequence[tuple[int, int]]],
    word_table: torch.Tensor,
    code_tokens: torch.Tensor,
    code_embeddings: torch.Tensor,
) -> torch.Tensor:
    """Mean over the batch of per-caption :func:`ras_loss`.

    ``code_tokens`` is ``(B, 1 + L, d_t)`` and ``code_embeddings`` ``(B, L, d_z)``.
    """
    losses = [ras_loss(p, word_table, code_tokens[b], code_embeddings[b]) for b, p in enumerate(pair_sets)]
    return torch.stack(losses).mean()
