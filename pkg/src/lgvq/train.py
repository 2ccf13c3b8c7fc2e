"""Combined objective, optimisation loop and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn

from .config import LossWeights, TrainConfig, parse_lines, from_mapping
from .data import CaptionDataset
from .relation import content_word_ids, ras_loss_batch, select_word_pairs
from .semantic import AlignmentModule, apply_mask, gsa_loss, mtp_loss, predict_masked, sample_mask_ratio
from .text import CLIPTextAdapter, ToyTextEncoder, Vocabulary, load_stopwords
from .vq import TrainingDivergence, VQAutoencoder, vq_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lgvq-ckpt-v1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class LossBundle:
    vq: torch.Tensor
    gsa: torch.Tensor
    mtp: torch.Tensor
    ras: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("vq", "gsa", "mtp", "ras", "total")}


def _scalar(v) -> torch.Tensor:
    return v if isinstance(v, torch.Tensor) else torch.tensor(float(v))


def total_loss(vq, gsa, mtp, ras, weights: LossWeights) -> LossBundle:
    """``vq + alpha*gsa + beta*mtp + gamma*ras``; any non-finite part raises TrainingDivergence."""
    parts = {"vq": _scalar(vq), "gsa": _scalar(gsa), "mtp": _scalar(mtp), "ras": _scalar(ras)}
    bad = [k for k, v in parts.items() if not torch.isfinite(v)]
    if bad:
        report = ", ".join(f"{k}={float(parts[k].detach())}" for k in bad)
        raise TrainingDivergence(f"non-finite loss components: {report}")
    total = parts["vq"] + weights.alpha * parts["gsa"] + weights.beta * parts["mtp"] + weights.gamma * parts["ras"]
    return LossBundle(total=total, **parts)


def build_text_encoder(cfg: TrainConfig, vocab: Vocabulary | None):
    if cfg.text_encoder == "clip":
        return CLIPTextAdapter(cfg.clip_model, n=cfg.seq_len)
    if vocab is None:
        raise ValueError("the toy text encoder needs a vocabulary")
    return ToyTextEncoder(vocab, dim=cfg.text_dim, n=cfg.seq_len, seed=cfg.seed)


class LGVQModel(nn.Module):
    """VQ autoencoder plus alignment networks and a frozen text encoder."""

    def __init__(self, cfg: TrainConfig, text_encoder):
        super().__init__()
        self.cfg = cfg
        self.autoencoder = VQAutoencoder(
            cfg.codebook_size, cfg.z_dim, cfg.factor, cfg.hidden, codebook_bound=cfg.codebook_init_bound
        )
        self.text = text_encoder
        self.alignment = AlignmentModule(
            cfg.z_dim,
            text_encoder.dim,
            text_encoder.vocab_size,
            text_encoder.n,
            cfg.grid_size**2,
            cfg.vt_width,
            cfg.vt_layers,
            cfg.vt_heads,
            cfg.adapter_heads,
            cfg.mtp_layers,
            cfg.mtp_heads,
        )

    def trainable_parameters(self) -> list[nn.Parameter]:
        return list(self.autoencoder.parameters()) + list(self.alignment.parameters())

    def tokenize(self, captions: list[str]) -> torch.Tensor:
        return torch.tensor([self.text.tokenize(c) for c in captions], dtype=torch.long)

    def named_arrays(self) -> dict[str, torch.Tensor]:
        """Checkpointable tensors keyed ``namespace/name``."""
        out = {}
        ae = self.autoencoder
        for ns, mod in (("encoder", ae.encoder), ("decoder", ae.decoder), ("codebook", ae.codebook),
                        ("alignment", self.alignment)):
            for k, v in mod.state_dict().items():
                out[f"{ns}/{k}"] = v
        if isinstance(self.text, ToyTextEncoder):
            out["text/table"] = self.text.table
        return out

    def load_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        ae = self.autoencoder
        for ns, mod in (("encoder", ae.encoder), ("decoder", ae.decoder), ("codebook", ae.codebook),
                        ("alignment", self.alignment)):
            prefix = ns + "/"
            mod.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        if "text/table" in arrays:
            self.text.table.copy_(arrays["text/table"])


def build_model(cfg: TrainConfig, vocab: Vocabulary | None) -> LGVQModel:
    """Fresh model with parameters initialised from ``cfg.seed``."""
    text = build_text_encoder(cfg, vocab)
    torch.manual_seed(cfg.seed)
    return LGVQModel(cfg, text)


def make_optimizer(model: LGVQModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _pair_seed(seed: int, step: int, item: int) -> int:
    return (seed * 1_000_003 + step) * 1009 + item


def compute_losses(
    model: LGVQModel,
    images: torch.Tensor,
    captions: list[str],
    cfg: TrainConfig,
    generator: torch.Generator,
    step: int = 0,
    stopwords=None,
) -> tuple[LossBundle, torch.Tensor]:
    """Forward pass of the full objective. Returns the loss bundle and the batch code indices.

    A text loss runs only when its flag is on and its weight is positive,
    unless ``cfg.compute_disabled`` forces it to run with an effective weight
    of zero.
    """
    ae, align, text = model.autoencoder, model.alignment, model.text
    x_rec, feats, codes = ae(images)
    l_vq = vq_loss(images, x_rec, feats, codes, cfg.commitment)

    run_gsa = cfg.gsa_active() or cfg.compute_disabled
    run_mtp = cfg.mtp_active() or cfg.compute_disabled
    run_ras = cfg.ras_active() or cfg.compute_disabled
    zero = l_vq.new_zeros(())
    l_gsa = l_mtp = l_ras = zero
    if run_gsa or run_mtp or run_ras:
        tokens = model.tokenize(captions)
        seq, glob = text.encode(tokens)
        code_tokens = align.encode_codes(codes.embeddings)
        if run_gsa:
            temp = cfg.gsa_temperature or None
            l_gsa = gsa_loss(code_tokens[:, 0], glob, temperature=temp, symmetric=cfg.gsa_symmetric)
        if run_mtp:
            ratios = sample_mask_ratio(
                generator, len(captions), cfg.mask_mean, cfg.mask_std, cfg.mask_low, cfg.mask_high
            )
            masked = apply_mask(tokens, seq, ratios, generator, align.mask_adapter, text.eot_id)
            l_mtp = mtp_loss(predict_masked(code_tokens, masked, align.mtp_decoder), masked.targets)
        if run_ras:
            stop = load_stopwords() if stopwords is None else stopwords
            pairs = [
                select_word_pairs(content_word_ids(t.tolist(), text, stop), cfg.max_pairs, _pair_seed(cfg.seed, step, i))
                for i, t in enumerate(tokens)
            ]
            l_ras = ras_loss_batch(pairs, text.word_table, code_tokens, codes.flat_embeddings())

    weights = LossWeights(
        cfg.commitment,
        cfg.alpha if cfg.gsa_active() else 0.0,
        cfg.beta if cfg.mtp_active() else 0.0,
        cfg.gamma if cfg.ras_active() else 0.0,
    )
    return total_loss(l_vq, l_gsa, l_mtp, l_ras, weights), codes.indices


def train_step(
    model: LGVQModel,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    captions: list[str],
    cfg: TrainConfig,
    generator: torch.Generator,
    step: int,
) -> dict:
    """One optimizer update; returns the metrics record for 1-based ``step``."""
    model.train()
    bundle, indices = compute_losses(model, images, captions, cfg, generator, step)
    optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    optimizer.step()
    metrics = {"step": step}
    metrics.update(bundle.as_floats())
    if not cfg.compute_disabled:
        for name, active in (("gsa", cfg.gsa_active()), ("mtp", cfg.mtp_active()), ("ras", cfg.ras_active())):
            if not active:
                metrics[name] = 0.0
    metrics["codebook_usage_batch"] = int(indices.unique().numel())
    return metrics


class Trainer:
    """Owns model, optimizer, the masking generator and the step counter."""

    def __init__(self, cfg: TrainConfig, dataset: CaptionDataset, vocab: Vocabulary | None = None, model=None):
        self.cfg = cfg
        self.dataset = dataset
        if vocab is None and cfg.text_encoder == "toy":
            vocab = Vocabulary.build(c for r in dataset.records for c in r.captions)
        self.vocab = vocab
        self.model = model if model is not None else build_model(cfg, vocab)
        self.optimizer = make_optimizer(self.model, cfg)
        self.generator = torch.Generator().manual_seed(cfg.seed + 1)
        self.step = 0

    def train_step(self) -> dict:
        images, caps, _ = self.dataset.batch(self.step, self.cfg.batch_size, self.cfg.seed)
        metrics = train_step(self.model, self.optimizer, images, caps, self.cfg, self.generator, self.step + 1)
        self.step += 1
        return metrics

    def run(
        self,
        steps: int | None = None,
        metrics_path: str | Path | None = None,
        checkpoint_dir: str | Path | None = None,
        callback: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        """Train until ``steps`` total steps (default ``cfg.steps``), appending metrics as JSON lines."""
        target = self.cfg.steps if steps is None else steps
        history = []
        sink = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
        try:
            while self.step < target:
                try:
                    m = self.train_step()
                except TrainingDivergence:
                    if checkpoint_dir is not None:
                        save_checkpoint(Path(checkpoint_dir) / "last_good.pt", self)
                    raise
                history.append(m)
                if sink:
                    sink.write(json.dumps(m) + "\n")
                    sink.flush()
                if callback:
                    callback(m)
                every = self.cfg.checkpoint_every
                if checkpoint_dir is not None and every and self.step % every == 0:
                    save_checkpoint(Path(checkpoint_dir) / f"step_{self.step:06d}.pt", self)
        finally:
            if sink:
                sink.close()
        return history


def save_checkpoint(path: str | Path, trainer: Trainer) -> Path:
    """Write model arrays, config, vocabulary, optimizer and RNG state atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": trainer.cfg.to_text(),
        "vocab": "\n".join(trainer.vocab.tokens) if trainer.vocab is not None else "",
        "step": trainer.step,
        "params": {k: v.detach().clone() for k, v in trainer.model.named_arrays().items()},
        "optimizer": trainer.optimizer.state_dict(),
        "rng": trainer.generator.get_state(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, dataset: CaptionDataset | None = None) -> Trainer:
    """Restore a :class:`Trainer`; raises CheckpointError on unreadable or incompatible files."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises assorted pickle/zip errors on corruption
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else None
        raise CheckpointError(f"incompatible checkpoint {path}: format {found!r}, expected {CHECKPOINT_FORMAT!r}")
    try:
        cfg = from_mapping(parse_lines(payload["config"].splitlines()))
        vocab = Vocabulary(tuple(payload["vocab"].split("\n"))) if payload["vocab"] else None
        trainer = Trainer.__new__(Trainer)
        trainer.cfg, trainer.dataset, trainer.vocab = cfg, dataset, vocab
        trainer.model = LGVQModel(cfg, build_text_encoder(cfg, vocab))
        trainer.model.load_arrays(payload["params"])
        trainer.optimizer = make_optimizer(trainer.model, cfg)
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.generator = torch.Generator()
        trainer.generator.set_state(payload["rng"])
        trainer.step = int(payload["step"])
    except (KeyError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    return trainer
