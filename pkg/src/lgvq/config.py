"""Training configuration: a flat ``key = value`` text file with strict validation.

Lines are ``key = value``; blank lines and ``#`` comments are ignored. Every
key must be a field of :class:`TrainConfig`; unknown keys and bad values are
collected and reported together.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class LossWeights:
    commitment: float = 0.25
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    # data
    manifest: str = ""
    image_size: int = 64
    # autoencoder
    factor: int = 8
    codebook_size: int = 64
    z_dim: int = 16
    hidden: int = 32
    # uniform init half-width; 0 means 1/codebook_size
    codebook_init_bound: float = 0.0
    # text
    text_encoder: str = "toy"
    clip_model: str = "openai/clip-vit-base-patch32"
    text_dim: int = 32
    seq_len: int = 16
    # alignment networks
    vt_width: int = 64
    vt_layers: int = 2
    vt_heads: int = 4
    adapter_heads: int = 4
    mtp_layers: int = 2
    mtp_heads: int = 4
    # optimisation
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    # objective
    commitment: float = 0.25
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    use_gsa: bool = True
    use_mtp: bool = True
    use_ras: bool = True
    # run losses with zero weight / disabled flag anyway (ablation checks only)
    compute_disabled: bool = False
    gsa_temperature: float = 0.0
    gsa_symmetric: bool = False
    mask_mean: float = 0.55
    mask_std: float = 0.25
    mask_low: float = 0.5
    mask_high: float = 1.0
    max_pairs: int = 32
    # bookkeeping
    checkpoint_every: int = 0
    eval_mask_seed: int = 0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.commitment, self.alpha, self.beta, self.gamma)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.factor

    def gsa_active(self) -> bool:
        return self.use_gsa and self.alpha > 0

    def mtp_active(self) -> bool:
        return self.use_mtp and self.beta > 0

    def ras_active(self) -> bool:
        return self.use_ras and self.gamma > 0

    def replace(self, **changes) -> "TrainConfig":
        return from_mapping({**to_mapping(self), **changes})

    def to_text(self) -> str:
        lines = ["# fully resolved lgvq training configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, raw):
    if not isinstance(raw, str):
        if kind is bool and isinstance(raw, bool):
            return raw
        if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if kind is int and isinstance(raw, int) and not isinstance(raw, bool):
            return raw
        if kind is str:
            return str(raw)
        raise ValueError(f"{name}: expected {kind.__name__}, got {raw!r}")
    text = raw.strip()
    if kind is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"{name}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"{name}: expected a number, got {raw!r}") from None
    return text


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(TrainConfig)}


def _validate(cfg: TrainConfig) -> list[str]:
    p = []
    if cfg.factor < 1 or 2 ** round(math.log2(cfg.factor)) != cfg.factor:
        p.append(f"factor: must be a power of two, got {cfg.factor}")
    elif cfg.image_size <= 0 or cfg.image_size % cfg.factor:
        p.append(f"image_size: {cfg.image_size} is not a positive multiple of factor {cfg.factor}")
    if cfg.codebook_size < 2:
        p.append("codebook_size: must be at least 2")
    for name in ("z_dim", "hidden", "text_dim", "vt_width", "batch_size", "vt_layers", "mtp_layers"):
        if getattr(cfg, name) < 1:
            p.append(f"{name}: must be positive")
    if cfg.steps < 0:
        p.append("steps: must be non-negative")
    if cfg.seq_len < 3:
        p.append("seq_len: must be at least 3")
    for name in ("commitment", "alpha", "beta", "gamma", "lr", "gsa_temperature", "codebook_init_bound"):
        if getattr(cfg, name) < 0 or not math.isfinite(getattr(cfg, name)):
            p.append(f"{name}: must be finite and non-negative")
    if not 0 <= cfg.adam_beta1 < 1 or not 0 <= cfg.adam_beta2 < 1:
        p.append("adam_beta1/adam_beta2: must lie in [0, 1)")
    if not 0 <= cfg.mask_low < cfg.mask_high <= 1:
        p.append("mask_low/mask_high: need 0 <= mask_low < mask_high <= 1")
    if cfg.mask_std <= 0:
        p.append("mask_std: must be positive")
    if cfg.max_pairs < 0:
        p.append("max_pairs: must be non-negative")
    if cfg.text_encoder not in ("toy", "clip"):
        p.append(f"text_encoder: must be 'toy' or 'clip', got {cfg.text_encoder!r}")
    for width, heads in (("vt_width", "vt_heads"), ("text_dim", "adapter_heads"), ("text_dim", "mtp_heads")):
        if getattr(cfg, heads) < 1 or getattr(cfg, width) % getattr(cfg, heads):
            p.append(f"{heads}: must divide {width}")
    if cfg.checkpoint_every < 0:
        p.append("checkpoint_every: must be non-negative")
    return p


def from_mapping(values: Mapping[str, object], base: TrainConfig | None = None) -> TrainConfig:
    """Build a validated config from ``values`` layered over ``base`` (defaults if None)."""
    problems = []
    resolved = dataclasses.asdict(base or TrainConfig())
    for key, raw in values.items():
        if key not in _TYPES:
            problems.append(f"{key}: unknown configuration key")
            continue
        try:
            resolved[key] = _coerce(key, _TYPES[key], raw)
        except ValueError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError(problems)
    cfg = TrainConfig(**resolved)
    problems = _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def to_mapping(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    problems = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            problems.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        out[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    return parse_lines(items, source="--set")


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path)))
    values.update(parse_overrides(overrides))
    return from_mapping(values)
