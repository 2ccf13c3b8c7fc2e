"""Tokenization and frozen text encoders.

Two encoders share one duck-typed interface (``n``, ``dim``, ``vocab_size``,
``tokenize``, ``encode``, ``word_embedding``, ``token_string``):

* :class:`ToyTextEncoder` -- a seeded random embedding table over a corpus
  vocabulary. Hermetic, used by the tests.
* :class:`CLIPTextAdapter` -- wraps a pre-trained CLIP text tower from
  ``transformers`` (optional dependency, loaded lazily).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn

PAD, SOT, EOT, UNK, MASK = "<pad>", "<sot>", "<eot>", "<unk>", "<mask>"
RESERVED = (PAD, SOT, EOT, UNK, MASK)
VOCAB_HEADER = "# lgvq vocabulary v1: one token per line, id = line index after this header"

_WORD_RE = re.compile(r"[a-z0-9']+")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def load_stopwords() -> frozenset[str]:
    text = resources.files("lgvq.resources").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


@dataclass(frozen=True)
class Vocabulary:
    """Token list whose index is the token id; the first five ids are reserved."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    pad_id = 0
    sot_id = 1
    eot_id = 2
    unk_id = 3
    mask_id = 4

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        """Vocabulary of every word seen ``min_count`` times, in first-seen order."""
        counts: dict[str, int] = {}
        for text in texts:
            for w in split_words(text):
                counts[w] = counts.get(w, 0) + 1
        words = [w for w, c in counts.items() if c >= min_count and w not in RESERVED]
        return cls(RESERVED + tuple(words))

    def save(self, path: str | Path) -> None:
        header = f"{VOCAB_HEADER}\n# reserved: " + " ".join(f"{t}={i}" for i, t in enumerate(RESERVED))
        Path(path).write_text(header + "\n" + "\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise ValueError(f"{path}: missing vocabulary header")
        return cls(tuple(line for line in lines if not line.startswith("#")))


def tokenize(text: str, vocab: Vocabulary, n: int) -> list[int]:
    """``[SOT, w_1 .. w_k, EOT, PAD ...]`` of length ``n`` with ``k <= n - 2``."""
    if n < 3:
        raise ValueError(f"sequence length must be at least 3, got {n}")
    words = split_words(text)[: n - 2]
    ids = [vocab.sot_id] + [vocab.id(w) for w in words] + [vocab.eot_id]
    return ids + [vocab.pad_id] * (n - len(ids))


def detokenize(tokens: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for t in list(tokens)[1:]:
        if t == vocab.eot_id:
            break
        words.append(vocab.tokens[t])
    return " ".join(words)


def eot_positions(tokens: torch.Tensor, eot_id: int) -> torch.Tensor:
    """Position of the (single) EOT token in each row of a ``(B, n)`` batch."""
    return (tokens == eot_id).int().argmax(dim=-1)


def word_position_mask(tokens: torch.Tensor, eot_id: int) -> torch.Tensor:
    """Boolean ``(B, n)`` mask of positions strictly between SOT and EOT."""
    pos = torch.arange(tokens.shape[-1], device=tokens.device)
    eot = eot_positions(tokens, eot_id)
    return (pos >= 1) & (pos < eot[..., None])


def validate_tokens(tokens: Sequence[int], n: int, vocab_size: int, sot_id: int, eot_id: int) -> None:
    if len(tokens) != n:
        raise ValueError(f"token sequence has length {len(tokens)}, expected {n}")
    if tokens[0] != sot_id:
        raise ValueError("token sequence must start with SOT")
    if list(tokens).count(eot_id) != 1:
        raise ValueError("token sequence must contain exactly one EOT")
    if not all(0 <= t < vocab_size for t in tokens):
        raise ValueError("token id out of range")


class ToyTextEncoder(nn.Module):
    """Frozen random text encoder for desk-scale experiments.

    Every token id owns a seeded random unit vector. The output sequence is the
    table lookup per position, except that the EOT row is replaced by the
    normalised mean of the content-word rows (stop-words excluded; all words
    if the caption has no content word), which serves as the global embedding.
    The table is a buffer, never a parameter, so no optimizer can touch it.
    """

    def __init__(self, vocab: Vocabulary, dim: int = 32, n: int = 16, seed: int = 0):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.n = n
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(len(vocab), dim, generator=gen)
        self.register_buffer("table", table / table.norm(dim=-1, keepdim=True))
        stop = load_stopwords()
        content = [i >= len(RESERVED) and t not in stop for i, t in enumerate(vocab.tokens)]
        self.register_buffer("content", torch.tensor(content), persistent=False)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def sot_id(self) -> int:
        return self.vocab.sot_id

    @property
    def eot_id(self) -> int:
        return self.vocab.eot_id

    @property
    def pad_id(self) -> int:
        return self.vocab.pad_id

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(RESERVED)))

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.vocab, self.n)

    def token_string(self, token_id: int) -> str:
        return self.vocab.tokens[token_id]

    def word_embedding(self, token_id: int) -> torch.Tensor:
        if not 0 <= token_id < self.vocab_size:
            raise IndexError(f"token id {token_id} outside [0, {self.vocab_size})")
        return self.table[token_id]

    @property
    def word_table(self) -> torch.Tensor:
        return self.table

    @torch.no_grad()
    def encode(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(sequence (B, n, d_t), global (B, d_t))`` for a ``(B, n)`` id batch."""
        seq = self.table[tokens]
        words = word_position_mask(tokens, self.eot_id)
        content = words & self.content[tokens]
        use = torch.where(content.any(-1, keepdim=True), content, words).unsqueeze(-1).to(seq.dtype)
        pooled = (seq * use).sum(1)
        empty = use.sum(1) == 0
        pooled = torch.where(empty, self.table[self.eot_id].expand_as(pooled), pooled)
        pooled = pooled / pooled.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        eot = eot_positions(tokens, self.eot_id)
        seq = seq.clone()
        seq[torch.arange(seq.shape[0]), eot] = pooled
        return seq, pooled


class CLIPTextAdapter(nn.Module):
    """Frozen CLIP text tower behind the toy encoder's interface.

    Requires ``transformers`` and a locally available checkpoint; nothing is
    imported until the adapter is constructed. The input token-embedding
    table serves as the word embeddings, the last hidden state as the
    sequence and the EOT hidden state as the global embedding.
    """

    def __init__(self, name: str = "openai/clip-vit-base-patch32", n: int = 77):
        super().__init__()
        from transformers import CLIPTextModel, CLIPTokenizer

        self.tokenizer = CLIPTokenizer.from_pretrained(name)
        self.model = CLIPTextModel.from_pretrained(name).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.n = n
        self.dim = self.model.config.hidden_size
        self.sot_id = self.tokenizer.bos_token_id
        self.eot_id = self.tokenizer.eos_token_id
        self.pad_id = 0

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset({self.sot_id, self.eot_id, self.pad_id, self.tokenizer.unk_token_id})

    def tokenize(self, text: str) -> list[int]:
        ids = self.tokenizer(text, add_special_tokens=False)["input_ids"][: self.n - 2]
        ids = [self.sot_id, *ids, self.eot_id]
        return ids + [self.pad_id] * (self.n - len(ids))

    def token_string(self, token_id: int) -> str:
        return self.tokenizer.decode([token_id]).strip()

    @property
    def word_table(self) -> torch.Tensor:
        return self.model.get_input_embeddings().weight

    def word_embedding(self, token_id: int) -> torch.Tensor:
        return self.word_table[token_id]

    @torch.no_grad()
    def encode(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn = (torch.arange(tokens.shape[1]) <= eot_positions(tokens, self.eot_id)[:, None]).long()
        seq = self.model(input_ids=tokens, attention_mask=attn).last_hidden_state
        glob = seq[torch.arange(seq.shape[0]), eot_positions(tokens, self.eot_id)]
        return seq, glob
