"""Image-caption manifests and the synthetic toy corpus.

A manifest is UTF-8 JSON lines, one record per line::

    {"image": "images/0000.png", "captions": ["a red circle ...", "..."]}

Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    captions: tuple[str, ...]


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            image, captions = obj["image"], obj["captions"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest record ({exc})") from None
        if not isinstance(image, str) or not isinstance(captions, list) or not captions:
            raise DataError(f"{path}:{lineno}: need a string 'image' and a non-empty 'captions' list")
        if not all(isinstance(c, str) for c in captions):
            raise DataError(f"{path}:{lineno}: captions must be strings")
        image_path = Path(image) if Path(image).is_absolute() else path.parent / image
        if not image_path.is_file():
            raise DataError(f"{path}:{lineno}: image file not found: {image_path}")
        records.append(ManifestRecord(image_path, tuple(captions)))
    return records


def load_image(path: Path, size: int) -> torch.Tensor:
    """RGB image resized bilinearly to ``size`` x ``size``, as ``(3, size, size)`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


class CaptionDataset:
    """In-memory images plus captions with deterministic, stateless batching.

    The batch for a given step depends only on ``(seed, step)``: each epoch
    visits records in a seeded permutation and picks one caption per record
    with a generator seeded from ``(seed, epoch)``.
    """

    def __init__(self, records: list[ManifestRecord], image_size: int):
        if not records:
            raise DataError("dataset is empty")
        self.records = records
        self.image_size = image_size
        self.images = torch.stack([load_image(r.image_path, image_size) for r in records])

    @classmethod
    def from_manifest(cls, path: str | Path, image_size: int) -> "CaptionDataset":
        return cls(read_manifest(path), image_size)

    def __len__(self) -> int:
        return len(self.records)

    def _epoch_plan(self, seed: int, epoch: int) -> tuple[list[int], list[int]]:
        gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
        order = torch.randperm(len(self), generator=gen).tolist()
        picks = [int(torch.randint(len(r.captions), (1,), generator=gen)) for r in self.records]
        return order, picks

    def epoch_captions(self, seed: int, epoch: int) -> list[str]:
        """Caption drawn for every record (in record order) during ``epoch``."""
        _, picks = self._epoch_plan(seed, epoch)
        return [r.captions[k] for r, k in zip(self.records, picks)]

    def batch(self, step: int, batch_size: int, seed: int) -> tuple[torch.Tensor, list[str], list[int]]:
        """Images, captions and record indices for 0-based training ``step``."""
        n = len(self)
        idx, caps = [], []
        plans: dict[int, tuple[list[int], list[int]]] = {}
        for k in range(step * batch_size, (step + 1) * batch_size):
            epoch, offset = divmod(k, n)
            if epoch not in plans:
                plans[epoch] = self._epoch_plan(seed, epoch)
            order, picks = plans[epoch]
            rec = order[offset]
            idx.append(rec)
            caps.append(self.records[rec].captions[picks[rec]])
        return self.images[idx], caps, idx

    def eval_captions(self) -> list[str]:
        """Caption index 0 of every record."""
        return [r.captions[0] for r in self.records]


# synthetic corpus ---------------------------------------------------------

_COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 215, 40),
    "purple": (150, 50, 200),
    "orange": (245, 140, 20),
    "cyan": (40, 210, 220),
    "pink": (250, 150, 200),
}
_BACKGROUNDS = {"black": (15, 15, 15), "white": (240, 240, 240), "gray": (128, 128, 128)}
_SHAPES = ("circle", "square", "triangle", "cross", "diamond", "bar")
_POSITIONS = {"left": (0.28, 0.5), "right": (0.72, 0.5), "top": (0.5, 0.28), "bottom": (0.5, 0.72)}
# content words are only the four attributes; everything else is a stop-word
_TEMPLATES = (
    "a {color} {shape} at the {pos} on {bg}",
    "the {shape} is {color} and {bg} is behind it at the {pos}",
    "{bg} with a {color} {shape} to the {pos}",
)


def _draw(shape, color, bg, center, size: int) -> Image.Image:
    im = Image.new("RGB", (size, size), bg)
    d = ImageDraw.Draw(im)
    r = size // 6
    cx, cy = int(center[0] * size), int(center[1] * size)
    box = (cx - r, cy - r, cx + r, cy + r)
    if shape == "circle":
        d.ellipse(box, fill=color)
    elif shape == "square":
        d.rectangle(box, fill=color)
    elif shape == "triangle":
        d.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif shape == "diamond":
        d.polygon([(cx, cy - r), (cx - r, cy), (cx, cy + r), (cx + r, cy)], fill=color)
    elif shape == "bar":
        d.rectangle((cx - r, cy - r // 3, cx + r, cy + r // 3), fill=color)
    else:
        w = max(1, r // 3)
        d.rectangle((cx - w, cy - r, cx + w, cy + r), fill=color)
        d.rectangle((cx - r, cy - w, cx + r, cy + w), fill=color)
    return im


def make_toy_corpus(out_dir: str | Path, count: int = 32, size: int = 64, seed: int = 0) -> Path:
    """Write ``count`` synthetic shape images with three captions each; return the manifest path.

    Each image shows one coloured shape at one of four positions on a plain
    background. Every caption names colour, shape, position and background,
    so each content word is grounded in the pixels.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    combos = list(itertools.product(_COLORS, _SHAPES, _POSITIONS, _BACKGROUNDS))
    if not 0 < count <= len(combos):
        raise ValueError(f"toy corpus supports 1 to {len(combos)} distinct images, got {count}")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(combos), size=count, replace=False))
    lines = []
    for k, c in enumerate(chosen):
        color, shape, pos, bg = combos[c]
        name = f"images/{k:04d}.png"
        _draw(shape, _COLORS[color], _BACKGROUNDS[bg], _POSITIONS[pos], size).save(out / name)
        caps = [t.format(color=color, shape=shape, pos=pos, bg=bg) for t in _TEMPLATES]
        lines.append(json.dumps({"image": name, "captions": caps}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
