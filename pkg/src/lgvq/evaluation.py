"""Desk-scale diagnostics: PSNR, codebook usage, masked-word recall,
image-to-text retrieval, code/word similarity gap and codebook images."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import CaptionDataset
from .relation import content_word_ids, match_positions, select_word_pairs
from .semantic import cosine_matrix, mask_with_positions
from .text import load_stopwords, word_position_mask

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """PSNR in dB for images in [0, 1]; 100 dB when the MSE is below 1e-10."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return psnr_from_mse(float(((x.double() - y.double()) ** 2).mean()))


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def usage_stats(indices: torch.Tensor | np.ndarray, codebook_size: int) -> tuple[float, float]:
    """``(usage %, perplexity)`` of an index collection over a codebook of ``codebook_size``."""
    idx = np.asarray(indices).ravel()
    if idx.size == 0:
        raise ValueError("no code indices to measure")
    counts = np.bincount(idx, minlength=codebook_size).astype(np.float64)
    p = counts[counts > 0] / idx.size
    entropy = float(-(p * np.log(p)).sum())
    return 100.0 * (counts > 0).sum() / codebook_size, math.exp(entropy)


@torch.no_grad()
def encode_dataset(model, images: torch.Tensor, batch_size: int = 32):
    """Code indices, code embeddings and reconstructions for a stack of images."""
    ae = model.autoencoder
    idx, emb, rec = [], [], []
    for chunk in images.split(batch_size):
        codes = ae.quantize(ae.encode(chunk))
        idx.append(codes.indices)
        emb.append(codes.embeddings)
        rec.append(ae.decode_codes(codes, clamp=True))
    return torch.cat(idx), torch.cat(emb), torch.cat(rec)


@torch.no_grad()
def code_tokens_for(model, code_embeddings: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    return torch.cat([model.alignment.encode_codes(c) for c in code_embeddings.split(batch_size)])


def dataset_psnr(model, dataset: CaptionDataset) -> float:
    """Mean per-image PSNR of clamped reconstructions."""
    model.eval()
    _, _, rec = encode_dataset(model, dataset.images)
    return float(np.mean([psnr(a, b) for a, b in zip(dataset.images, rec)]))


def codebook_usage(model, dataset: CaptionDataset) -> tuple[float, float]:
    model.eval()
    idx, _, _ = encode_dataset(model, dataset.images)
    return usage_stats(idx, model.autoencoder.codebook.size)


def recall_from_logits(logits: torch.Tensor, targets: torch.Tensor, top: int = 1) -> float:
    """Fraction of rows whose target is among the ``top`` highest logits."""
    if targets.numel() == 0:
        raise ValueError("no predictions to score")
    best = logits.topk(top, dim=-1).indices
    return float((best == targets[:, None]).any(-1).double().mean())


@torch.no_grad()
def masked_word_recall(model, dataset: CaptionDataset, k_masked: int = 1, top: int = 1, seed: int = 0) -> float:
    """Recall@top of the cross-attention decoder with ``k_masked`` words masked per caption.

    Scores against the full vocabulary using caption 0 of every record.
    Captions with fewer than ``k_masked`` words are skipped (and logged).
    """
    if k_masked < 1:
        raise ValueError("k_masked must be at least 1")
    model.eval()
    text, align = model.text, model.alignment
    tokens = model.tokenize(dataset.eval_captions())
    words = word_position_mask(tokens, text.eot_id)
    keep = words.sum(-1) >= k_masked
    skipped = int((~keep).sum())
    if skipped:
        log.warning("masked_word_recall: skipped %d captions with fewer than %d words", skipped, k_masked)
    if not keep.any():
        raise ValueError("no caption has enough words to mask")
    tokens = tokens[keep]
    gen = torch.Generator().manual_seed(seed)
    mask = torch.zeros_like(words[keep])
    for i, row in enumerate(words[keep]):
        pos = row.nonzero().flatten()
        mask[i, pos[torch.randperm(len(pos), generator=gen)[:k_masked]]] = True
    _, emb, _ = encode_dataset(model, dataset.images[keep])
    ctok = code_tokens_for(model, emb)
    seq, _ = text.encode(tokens)
    masked = mask_with_positions(tokens, seq, mask, align.mask_adapter, text.eot_id)
    logits = align.mtp_decoder(ctok, masked.embeddings, masked.pad_mask)[masked.mask]
    return recall_from_logits(logits, masked.targets, top)


def retrieval_accuracy(cls_emb: torch.Tensor, eot_emb: torch.Tensor, top: int = 1) -> float:
    """Fraction of images whose paired text ranks in the ``top`` by cosine similarity.

    Ranking is a stable sort, so tied candidates are ordered by index and the
    lowest index wins.
    """
    if len(cls_emb) != len(eot_emb):
        raise ValueError("images and texts must be paired")
    sim = cosine_matrix(cls_emb.double(), eot_emb.double()).numpy()
    order = np.argsort(-sim, axis=1, kind="stable")[:, :top]
    hits = (order == np.arange(len(sim))[:, None]).any(axis=1)
    return float(hits.mean())


@torch.no_grad()
def image_to_text_retrieval(model, images: torch.Tensor, texts: list[str], top: int = 1) -> float:
    model.eval()
    _, emb, _ = encode_dataset(model, images)
    cls = code_tokens_for(model, emb)[:, 0]
    _, eot = model.text.encode(model.tokenize(texts))
    return retrieval_accuracy(cls, eot, top)


@torch.no_grad()
def similarity_gaps(model, dataset: CaptionDataset, max_pairs: int = 32, seed: int = 0, stopwords=None):
    """Per-pair ``(word similarity, matched code similarity)`` over caption 0 of every record."""
    model.eval()
    stop = load_stopwords() if stopwords is None else stopwords
    text = model.text
    tokens = model.tokenize(dataset.eval_captions())
    _, emb, _ = encode_dataset(model, dataset.images)
    ctok = code_tokens_for(model, emb)
    flat = emb.flatten(2).transpose(1, 2)
    table = text.word_table
    out = []
    for b, row in enumerate(tokens):
        pairs = select_word_pairs(content_word_ids(row.tolist(), text, stop), max_pairs, seed + b)
        if not pairs:
            continue
        ids = sorted({w for p in pairs for w in p})
        pos = dict(zip(ids, match_positions(table[torch.tensor(ids)], ctok[b]).tolist()))
        for i, j in pairs:
            sw = float(cosine_matrix(table[i][None], table[j][None]))
            sz = float(cosine_matrix(flat[b, pos[i]][None], flat[b, pos[j]][None]))
            out.append((sw, sz))
    return out


def code_word_similarity_mse(model, dataset: CaptionDataset, max_pairs: int = 32, seed: int = 0) -> float | None:
    """Mean squared gap between word-pair and matched-code-pair similarity; None without pairs."""
    gaps = similarity_gaps(model, dataset, max_pairs, seed)
    if not gaps:
        return None
    return float(np.mean([(a - b) ** 2 for a, b in gaps]))


@torch.no_grad()
def similarity_matrices(model, dataset: CaptionDataset, item: int = 0, stopwords=None):
    """Word-similarity and matched-code-similarity matrices for one training pair.

    Uses the distinct content words of caption 0 of record ``item``. Each word
    is matched to its code position as in training and the code matrix holds
    cosine similarities of the matched codebook entries.

    Returns:
        ``(words, word_sim, code_sim, positions)`` where the matrices are
        ``(m, m)`` float64 arrays and ``positions`` the matched grid indices.
    """
    if not 0 <= item < len(dataset):
        raise IndexError(f"item {item} outside a dataset of {len(dataset)} records")
    model.eval()
    text = model.text
    stop = load_stopwords() if stopwords is None else stopwords
    tokens = model.tokenize([dataset.records[item].captions[0]])[0]
    ids = content_word_ids(tokens.tolist(), text, stop)
    if not ids:
        raise ValueError(f"caption of record {item} has no content words")
    _, emb, _ = encode_dataset(model, dataset.images[item:item + 1])
    ctok = code_tokens_for(model, emb)[0]
    vecs = text.word_table[torch.tensor(ids)].double()
    pos = match_positions(vecs.to(ctok.dtype), ctok)
    codes = emb[0].flatten(1).t()[pos].double()
    words = [text.token_string(i) for i in ids]
    return words, cosine_matrix(vecs, vecs).numpy(), cosine_matrix(codes, codes).numpy(), pos.tolist()


def code_histogram(model, dataset: CaptionDataset) -> np.ndarray:
    """Selection count of every codebook entry over the dataset."""
    model.eval()
    idx, _, _ = encode_dataset(model, dataset.images)
    return np.bincount(idx.flatten().numpy(), minlength=model.autoencoder.codebook.size)


def grid_shape(count: int) -> tuple[int, int]:
    """``(rows, cols)`` for tiling: square when possible, else ``ceil(sqrt)`` columns."""
    cols = math.isqrt(count)
    if cols * cols < count:
        cols += 1
    return math.ceil(count / cols), cols


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    return (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)


@torch.no_grad()
def decode_codebook(model) -> torch.Tensor:
    """Every codebook entry decoded as a 1x1 grid: ``(K, C, f, f)``."""
    model.eval()
    ae = model.autoencoder
    idx = torch.arange(ae.codebook.size).view(-1, 1, 1)
    return ae.decode_codes(idx, clamp=True)


def dump_codebook_images(model, output_dir: str | Path) -> list[Path]:
    """Write one PNG per codebook entry plus ``codebook_grid.png``; returns the paths."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    patches = decode_codebook(model)
    k, _, ph, pw = patches.shape
    paths = []
    width = len(str(k - 1))
    for i, p in enumerate(patches):
        path = out / f"code_{i:0{width}d}.png"
        Image.fromarray(_to_uint8(p)).save(path)
        paths.append(path)
    rows, cols = grid_shape(k)
    canvas = np.zeros((rows * ph, cols * pw, 3), dtype=np.uint8)
    for i, p in enumerate(patches):
        r, c = divmod(i, cols)
        canvas[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = _to_uint8(p)
    grid = out / "codebook_grid.png"
    Image.fromarray(canvas).save(grid)
    paths.append(grid)
    return paths


@dataclass
class EvalReport:
    psnr_db: float
    codebook_usage_pct: float
    codebook_perplexity: float
    recall_at_1: float
    retrieval_top1: float
    sim_mse: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_records(self) -> list[str]:
        return [json.dumps({"metric": k, "value": v}) for k, v in asdict(self).items()]


def evaluate(model, dataset: CaptionDataset, mask_seed: int = 0, max_pairs: int = 32) -> EvalReport:
    usage, ppl = codebook_usage(model, dataset)
    return EvalReport(
        psnr_db=dataset_psnr(model, dataset),
        codebook_usage_pct=usage,
        codebook_perplexity=ppl,
        recall_at_1=masked_word_recall(model, dataset, k_masked=1, top=1, seed=mask_seed),
        retrieval_top1=image_to_text_retrieval(model, dataset.images, dataset.eval_captions(), top=1),
        sim_mse=code_word_similarity_mse(model, dataset, max_pairs=max_pairs, seed=mask_seed),
    )
