"""
Experiment and runtime configuration.

Experiment files are flat `key = value` text:

    # comment
    backend = classifier
    embed.r1 = 1.0
    ablate.r1 = 0.1, 1, 5

Dotted keys map onto ExperimentConfig fields (`embed.r1` -> `embed_r1`);
comma-separated values are lists.  Unknown keys and unparsable values raise
ConfigError naming the line.  Relative paths resolve against the directory
of the config file.

Runtime settings come from the environment (a `.env` file is loaded once):

    EAAW_THREADS     worker cap for ablation sweeps (default: CPU count)
    EAAW_LOG_LEVEL   logging level for the CLI (default: WARNING)
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

from dotenv import load_dotenv

from eaaw.attacks import ATTACK_KINDS, AttackConfig
from eaaw.embedding import EmbedConfig
from eaaw.errors import ConfigError, PathError
from eaaw.extraction import DEFAULT_MODE, MODES
from eaaw.models import ModelSpec

logger = logging.getLogger(__name__)

_THREADS: int = 1
_LOG_LEVEL: str = "WARNING"
_configured = False

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _ensure_settings() -> None:
    """Lazy one-shot loader for environment settings."""
    global _THREADS, _LOG_LEVEL, _configured
    if _configured:
        return
    load_dotenv()
    raw_threads = os.environ.get("EAAW_THREADS", "").strip()
    try:
        _THREADS = max(1, int(raw_threads)) if raw_threads else max(1, os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigError(f"EAAW_THREADS must be an integer, got {raw_threads!r}") from exc
    level = os.environ.get("EAAW_LOG_LEVEL", "WARNING").strip().upper()
    if level not in _LOG_LEVELS:
        raise ConfigError(f"EAAW_LOG_LEVEL must be one of {_LOG_LEVELS}, got {level!r}")
    _LOG_LEVEL = level
    _configured = True


def worker_count() -> int:
    _ensure_settings()
    return _THREADS


def log_level() -> str:
    _ensure_settings()
    return _LOG_LEVEL


def reset_settings() -> None:
    """Forget cached environment settings (tests change the environment)."""
    global _configured
    _configured = False


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in _items(text))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _items(text))


def _strs(text: str) -> tuple[str, ...]:
    return tuple(_items(text))


def _items(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


@dataclass(frozen=True)
class ExperimentConfig:
    backend: str = "classifier"
    seed: int = 0
    out: str = "runs/default"

    data_kind: str = "blobs"
    data_n_train: int = 2000
    data_n_test: int = 500
    data_n_heldout: int = 500
    data_sigma: float = 0.3
    data_n_classes: int = 10
    data_side: int = 16
    data_vocab: int = 64
    data_seq_len: int = 64
    data_concentration: float = 0.1
    data_spacing: float = 0.1

    model_hidden: tuple[int, ...] = (128, 64)
    model_context_len: int = 32
    model_embed_dim: int = 16

    train_epochs: int = 20
    train_lr: float = 1e-3
    train_optimizer: str = "adam"
    train_batch_size: int = 64

    watermark_k: int = 64
    watermark_source: str = "glyph"

    trigger_kind: str = "sample"
    trigger_count: int = 1

    embed_r1: float = 1.0
    embed_epsilon: float | None = None
    embed_loss: str = "hinge"
    embed_epochs: int = 30
    embed_lr: float = 1e-3
    embed_optimizer: str = "adam"
    embed_lam: float = 1.0
    embed_mask_scheme: str = "leave_one_out"
    embed_n_masks: int | None = None
    embed_mask_seed: int = 0
    embed_batch_size: int = 64
    embed_target_policy: str = "unmasked"
    embed_early_stop: bool = True

    verify_alpha: float = 0.01
    verify_mode: str = DEFAULT_MODE

    attack_kinds: tuple[str, ...] = ("finetune", "prune")
    attack_epochs: int = 20
    attack_lr: float = 1e-4
    attack_rate: float = 0.4
    attack_per_layer: bool = False
    attack_h: int = 1
    attack_tau: float = 0.1
    attack_parts: int = 64

    ablate_r1: tuple[float, ...] = ()
    ablate_n_masks: tuple[int, ...] = ()
    ablate_triggers: tuple[int, ...] = ()
    ablate_epsilon: tuple[float, ...] = ()
    ablate_loss: tuple[str, ...] = ()

    source: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.backend not in ("classifier", "causal_lm"):
            raise ConfigError(f"backend must be classifier or causal_lm, got {self.backend!r}")
        unknown = set(self.attack_kinds) - set(ATTACK_KINDS)
        if unknown:
            raise ConfigError(f"unknown attack kinds: {', '.join(sorted(unknown))}")
        if self.verify_mode not in MODES:
            raise ConfigError(f"verify.mode must be one of {MODES}, got {self.verify_mode!r}")
        if self.verify_mode == "label_only" and self.backend != "classifier":
            raise ConfigError("label_only verification is only defined for the classifier backend")

    # -- derived settings -----------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def model_spec(self) -> ModelSpec:
        if self.backend == "causal_lm":
            return ModelSpec.for_causal_lm(
                vocab_size=self.data_vocab,
                context_len=self.model_context_len,
                embed_dim=self.model_embed_dim,
                hidden=self.model_hidden,
            )
        return ModelSpec.for_classifier(
            input_dim=self.data_side * self.data_side,
            n_classes=self.data_n_classes,
            hidden=self.model_hidden,
        )

    def data_params(self) -> dict[str, Any]:
        if self.data_kind == "token_corpus":
            return {"length": self.data_seq_len, "vocab_size": self.data_vocab, "concentration": self.data_concentration}
        params = {"n_classes": self.data_n_classes, "side": self.data_side, "sigma": self.data_sigma}
        if self.data_kind == "levels":
            params["spacing"] = self.data_spacing
        return params

    def embed_config(self, **overrides) -> EmbedConfig:
        settings = {
            "r1": self.embed_r1,
            "epsilon": self.embed_epsilon,
            "loss": self.embed_loss,
            "epochs": self.embed_epochs,
            "lr": self.embed_lr,
            "optimizer": self.embed_optimizer,
            # label-only extraction has no gradient; those runs embed against probabilities
            "mode": "relative" if self.verify_mode == "relative" else "logits",
            "lam": self.embed_lam,
            "mask_scheme": self.embed_mask_scheme,
            "n_masks": self.embed_n_masks,
            "mask_seed": self.embed_mask_seed,
            "batch_size": self.embed_batch_size,
            "seed": self.seed,
            "target_policy": self.embed_target_policy,
            "early_stop": self.embed_early_stop,
        }
        settings.update(overrides)
        return EmbedConfig(**settings)

    def attack_config(self, kind: str) -> AttackConfig:
        return AttackConfig(
            kind=kind,
            epochs=self.attack_epochs,
            lr=self.attack_lr,
            optimizer=self.train_optimizer,
            batch_size=self.train_batch_size,
            rate=self.attack_rate,
            per_layer=self.attack_per_layer,
            h=self.attack_h,
            tau=self.attack_tau,
            parts=self.attack_parts,
            r1=self.embed_r1,
            seed=self.seed,
        )

    def sweeps(self) -> dict[str, tuple]:
        candidates = {
            "r1": self.ablate_r1,
            "n_masks": self.ablate_n_masks,
            "triggers": self.ablate_triggers,
            "epsilon": self.ablate_epsilon,
            "loss": self.ablate_loss,
        }
        return {name: values for name, values in candidates.items() if values}

    def canonical_text(self) -> str:
        values = asdict(self)
        values.pop("source")
        return "\n".join(f"{key} = {values[key]!r}" for key in sorted(values))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _parser_for(name: str) -> Callable[[str], Any]:
    default = next(f for f in fields(ExperimentConfig) if f.name == name).default
    if name == "embed_n_masks":
        return _optional_int
    if name == "embed_epsilon":
        return _optional_float
    if name in ("model_hidden", "ablate_n_masks", "ablate_triggers"):
        return _ints
    if name == "ablate_r1" or name == "ablate_epsilon":
        return _floats
    if name in ("attack_kinds", "ablate_loss"):
        return _strs
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str.strip


_KEYS = {f.name.replace("_", ".", 1): f.name for f in fields(ExperimentConfig) if f.name != "source"}


def parse_config(text: str, base_dir: str | Path = ".", source: str = "<string>") -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        name = _KEYS.get(key)
        if name is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[name] = _parser_for(name)(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc

    out = Path(values.get("out", ExperimentConfig.out))
    if not out.is_absolute():
        out = Path(base_dir) / out
    values["out"] = str(out)
    return ExperimentConfig(source=source, **values)


def load_config(path: str | Path | None, seed: int | None = None, out: str | Path | None = None) -> ExperimentConfig:
    """Read a config file (or defaults when path is None) and apply CLI overrides."""
    if path is None:
        config = parse_config("", Path.cwd(), "<defaults>")
    else:
        source = Path(path)
        if not source.is_file():
            raise PathError(f"config file not found: {source}")
        config = parse_config(source.read_text(), source.parent, str(source))
    overrides: dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out"] = str(out)
    return replace(config, **overrides) if overrides else config
