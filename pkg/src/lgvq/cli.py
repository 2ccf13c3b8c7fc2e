"""``lgvq`` command-line entry point.

Verbs: ``train``, ``eval``, ``diagnose`` and ``dump-codebook``. Exit codes are
0 on success, 2 for configuration errors, 3 for data, file or checkpoint
errors and 4 when training diverges.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import CaptionDataset, DataError
from .evaluation import code_histogram, dump_codebook_images, evaluate, similarity_matrices
from .train import CheckpointError, Trainer, load_checkpoint, save_checkpoint
from .vq import TrainingDivergence

log = logging.getLogger("lgvq")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# keys that may change when a run is resumed from a checkpoint
RESUMABLE_KEYS = {"steps", "checkpoint_every"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lgvq", description="Language-guided VQ codebook training and diagnostics.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        sp.add_argument("--checkpoint", type=Path, help="checkpoint file")
        sp.add_argument("--manifest", type=Path, help="image/caption manifest (JSON lines)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="train a model (resumes when --checkpoint is given)"), "runs/train")
    common(sub.add_parser("eval", help="evaluate a checkpoint on a manifest"), "runs/eval")
    d = sub.add_parser("diagnose", help="similarity matrices and code-usage histogram")
    common(d, "runs/diagnose")
    d.add_argument("--item", type=int, default=0, help="record whose caption 0 is visualised")
    common(sub.add_parser("dump-codebook", help="decode every codebook entry to an image"), "runs/codebook")
    return p


def _overrides(args) -> list[str]:
    items = list(args.overrides)
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    if args.manifest is not None:
        items.append(f"manifest={args.manifest.resolve()}")
    return items


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def cmd_train(args) -> int:
    overrides = _overrides(args)
    if args.checkpoint is not None:
        trainer = load_checkpoint(args.checkpoint)
        if args.config is not None:
            raise ConfigError(["--config: cannot be combined with --checkpoint; use --set for steps"])
        changed = load_config(None, overrides)
        keys = {item.partition("=")[0].strip() for item in overrides}
        bad = sorted(keys - RESUMABLE_KEYS - {"manifest"})
        if bad:
            raise ConfigError([f"{k}: cannot be changed when resuming" for k in bad])
        trainer.cfg = trainer.cfg.replace(**{k: getattr(changed, k) for k in keys if k in RESUMABLE_KEYS})
        if "manifest" in keys:
            trainer.cfg = trainer.cfg.replace(manifest=changed.manifest)
        trainer.dataset = CaptionDataset.from_manifest(trainer.cfg.manifest, trainer.cfg.image_size)
    else:
        cfg = load_config(args.config, overrides)
        if not cfg.manifest:
            raise ConfigError(["manifest: required (set it in the config or pass --manifest)"])
        cfg = cfg.replace(manifest=str(Path(cfg.manifest).resolve()))
        trainer = Trainer(cfg, CaptionDataset.from_manifest(cfg.manifest, cfg.image_size))

    out = args.out
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    trainer.cfg.save(out / "config.txt")
    if trainer.vocab is not None:
        trainer.vocab.save(out / "vocab.txt")
    metrics = out / "metrics.jsonl"
    if args.checkpoint is None and metrics.exists():
        metrics.unlink()

    total = trainer.cfg.steps
    every = max(1, total // 10)

    def progress(m):
        if m["step"] % every == 0 or m["step"] == total:
            log.info("step %d/%d total=%.4f vq=%.4f gsa=%.4f mtp=%.4f ras=%.4f",
                     m["step"], total, m["total"], m["vq"], m["gsa"], m["mtp"], m["ras"])

    try:
        trainer.run(total, metrics_path=metrics, checkpoint_dir=ckpt_dir, callback=progress)
    except TrainingDivergence as exc:
        print(f"lgvq: training diverged at step {trainer.step + 1}: {exc}", file=sys.stderr)
        print(f"lgvq: last good state saved to {ckpt_dir / 'last_good.pt'}", file=sys.stderr)
        return EXIT_DIVERGED
    final = save_checkpoint(ckpt_dir / "final.pt", trainer)
    log.info("wrote %s", final)
    return EXIT_OK


def _load_for_eval(args):
    if args.checkpoint is None:
        raise ConfigError(["--checkpoint: required"])
    trainer = load_checkpoint(args.checkpoint)
    cfg = trainer.cfg
    if args.overrides:
        raise ConfigError(["--set: not accepted here; evaluation uses the checkpoint's configuration"])
    manifest = args.manifest or (Path(cfg.manifest) if cfg.manifest else None)
    if manifest is None:
        raise ConfigError(["--manifest: required (the checkpoint names no manifest)"])
    dataset = CaptionDataset.from_manifest(manifest, cfg.image_size)
    return trainer, dataset


def cmd_eval(args) -> int:
    trainer, dataset = _load_for_eval(args)
    cfg = trainer.cfg
    seed = cfg.eval_mask_seed if args.seed is None else args.seed
    report = evaluate(trainer.model, dataset, mask_seed=seed, max_pairs=cfg.max_pairs)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _write_lines(args.out / "metrics.jsonl", report.to_records())
    print(report.to_json())
    return EXIT_OK


def save_matrix(path: Path, labels: list[str], matrix: np.ndarray) -> None:
    """CSV with a header of labels; values printed with full float64 precision."""
    np.savetxt(path, matrix, delimiter=",", fmt="%.17g", header=",".join(labels), comments="")


def load_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        labels = fh.readline().strip().split(",")
    return labels, np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _heatmap(path: Path, labels: list[str], matrix: np.ndarray, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(labels), 0.8 + 0.6 * len(labels)))
    im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="coolwarm")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    for (i, j), v in np.ndenumerate(matrix):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _histogram(path: Path, counts: np.ndarray) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(np.arange(len(counts)), counts, width=1.0)
    ax.set_xlabel("code index")
    ax.set_ylabel("selections")
    used = int((counts > 0).sum())
    ax.set_title(f"code usage: {used}/{len(counts)} entries used")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_diagnose(args) -> int:
    trainer, dataset = _load_for_eval(args)
    model = trainer.model
    try:
        words, word_sim, code_sim, positions = similarity_matrices(model, dataset, args.item)
    except (IndexError, ValueError) as exc:
        raise DataError(str(exc)) from None
    counts = code_histogram(model, dataset)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "word_similarity.csv", words, word_sim)
    save_matrix(out / "code_similarity.csv", words, code_sim)
    _write_lines(out / "matched_positions.csv", ["word,position"] + [f"{w},{p}" for w, p in zip(words, positions)])
    _write_lines(out / "code_usage.csv", ["code,count"] + [f"{k},{int(c)}" for k, c in enumerate(counts)])
    _heatmap(out / "word_similarity.png", words, word_sim, "word similarity")
    _heatmap(out / "code_similarity.png", words, code_sim, "matched code similarity")
    _histogram(out / "code_usage.png", counts)
    log.info("wrote diagnostics for record %d to %s", args.item, out)
    return EXIT_OK


def cmd_dump_codebook(args) -> int:
    if args.checkpoint is None:
        raise ConfigError(["--checkpoint: required"])
    trainer = load_checkpoint(args.checkpoint)
    paths = dump_codebook_images(trainer.model, args.out)
    log.info("wrote %d images to %s", len(paths), args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "dump-codebook": cmd_dump_codebook}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"lgvq: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as exc:
        print(f"lgvq: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
