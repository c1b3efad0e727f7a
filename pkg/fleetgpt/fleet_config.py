# fleet_config.py
"""
fleet_config.py

Layered run configuration.

Layers (later wins):
  built-in preset ("desk" by default, "published" = published hyperparameters)
  <- config file with `section.key=value` lines
  <- repeated `--set section.key=value` flags
  <- dedicated CLI flags (--seed, --precision)

The fully resolved config renders as sorted `section.key=value` text; its
SHA-256 prefix (config hash) is stamped into every artifact.

`tokenizer.model_dim` and `model.model_dim` are aliases: setting either
sets both.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from fleet_errors import ConfigError

# -----------------------------
# Section dataclasses
# -----------------------------


@dataclass
class TokenizerConfig:
    patch_len: int = 128
    stride: int = 128
    model_dim: int = 512
    prompt_len: int = 10
    task_len: int = 1
    eps: float = 1e-5


@dataclass
class ModelConfig:
    num_layers: int = 4
    model_dim: int = 512
    ffn_hidden: int = 0  # 0 -> 4 * model_dim
    num_heads: int = 1
    dropout: float = 0.0

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden > 0 else 4 * self.model_dim


@dataclass
class TrainingConfig:
    lr: float = 3e-7
    finetune_lr: float = 3e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    pretrain_epochs: int = 5
    finetune_epochs: int = 5
    mask_ratio: float = 0.3
    seed: int = 0
    precision: str = "float32"
    debug_freeze_check: bool = False


@dataclass
class JointLossConfig:
    alpha: float = 10.0
    ad_threshold: float = 0.5
    bp_channels: Tuple[str, ...] = ()  # empty -> the fleet's baseline channel
    ad_channel: str = ""  # empty -> first BP channel


@dataclass
class FinetuneConfig:
    trainable: str = "heads"  # "heads" | "all"
    hide_baseline: bool = True
    cache_features: bool = True
    label_fraction: float = 1.0


@dataclass
class DataConfig:
    window_len: int = 2048
    window_stride: int = 2048
    pretrain_stride: int = 2048
    points: int = 98304
    split: Tuple[float, ...] = (0.7, 0.15, 0.15)
    fleets: Tuple[str, ...] = ("A320", "A330", "C919")
    source_fleets: Tuple[str, ...] = ("A320", "A330")
    target_fleet: str = "C919"


SECTIONS: Tuple[str, ...] = ("tokenizer", "model", "training", "loss", "finetune", "data")
MODEL_DIM_KEYS = ("tokenizer.model_dim", "model.model_dim")


@dataclass
class RunConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    loss: JointLossConfig = field(default_factory=JointLossConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)

    # --- rendering ---
    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return out

    def to_text(self) -> str:
        lines = [f"{k}={_render_value(v)}" for k, v in sorted(self.to_dict().items())]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def copy(self) -> "RunConfig":
        return RunConfig.from_text(self.to_text())

    # --- building ---
    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        apply_overrides(cfg, read_key_values(text))
        return cfg

    @classmethod
    def from_preset(cls, name: str = "desk") -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset: {name!r} (available: {', '.join(sorted(PRESETS))})")
        cfg = cls()
        apply_overrides(cfg, PRESETS[name].items())
        return cfg


# -----------------------------
# Presets
# -----------------------------
PRESETS: Dict[str, Dict[str, Any]] = {
    # Published hyperparameters: the dataclass defaults.
    "published": {},
    # Desk-scale acceptance profile: three small synthetic fleets on one CPU core.
    "desk": {
        "model.model_dim": 64,
        "model.num_layers": 2,
        "training.batch_size": 32,
        "training.lr": 1e-3,
        "training.finetune_lr": 1e-2,
        "data.pretrain_stride": 512,
        "data.fleets": ("fleet_a", "fleet_b", "fleet_c"),
        "data.source_fleets": ("fleet_a", "fleet_b"),
        "data.target_fleet": "fleet_c",
    },
    # Gradient verification: d=8, 2 layers, 4 patches of 4 samples.
    "tiny": {
        "model.model_dim": 8,
        "model.num_layers": 2,
        "tokenizer.patch_len": 4,
        "tokenizer.stride": 4,
        "tokenizer.prompt_len": 2,
        "data.window_len": 16,
        "data.window_stride": 16,
        "data.pretrain_stride": 16,
        "data.points": 320,
        "training.batch_size": 2,
        "training.lr": 1e-3,
        "training.finetune_lr": 1e-3,
        "training.precision": "float64",
        "data.fleets": ("tiny_a", "tiny_b"),
        "data.source_fleets": ("tiny_a",),
        "data.target_fleet": "tiny_b",
    },
}


# -----------------------------
# key=value parsing
# -----------------------------
def read_key_values(source: str) -> List[Tuple[str, str]]:
    """
    Parse `key=value` lines from a path or from literal text.
    Blank lines and lines starting with '#' are skipped.
    """
    text = source
    if "\n" not in source and "=" not in source and os.path.exists(source):
        with open(source, "r", encoding="utf-8") as f:
            text = f.read()
    pairs: List[Tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        pairs.append((key, value.strip()))
    return pairs


def read_config_file(path: str) -> List[Tuple[str, str]]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return read_key_values(f.read())


def _render_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_render_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: Any, current: Any) -> Any:
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(current, tuple) else raw
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if current and isinstance(current[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {raw!r}") from None
    return raw


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply (key, value) pairs in order; unknown keys are errors."""
    for key, raw in pairs:
        keys = MODEL_DIM_KEYS if key in MODEL_DIM_KEYS else (key,)
        for k in keys:
            section, _, name = k.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"Unknown config key: {key!r}")
            block = getattr(cfg, section)
            if name not in {f.name for f in dataclasses.fields(block)}:
                raise ConfigError(f"Unknown config key: {key!r}")
            setattr(block, name, _coerce(k, raw, getattr(block, name)))
    return cfg


def parse_set_flags(items: Optional[List[str]]) -> List[Tuple[str, str]]:
    pairs: List[Tuple[str, str]] = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_config(
    preset: str = "desk",
    config_path: Optional[str] = None,
    set_flags: Optional[List[str]] = None,
    seed: Optional[int] = None,
    precision: Optional[str] = None,
    base: Optional[RunConfig] = None,
) -> RunConfig:
    """base (e.g. a checkpoint's config) replaces the preset as the bottom layer."""
    cfg = base.copy() if base is not None else RunConfig.from_preset(preset)
    if config_path:
        apply_overrides(cfg, read_config_file(config_path))
    apply_overrides(cfg, parse_set_flags(set_flags))
    if seed is not None:
        cfg.training.seed = int(seed)
    if precision is not None:
        apply_overrides(cfg, [("training.precision", precision)])
    validate_run_config(cfg, raise_on_error=True)
    return cfg


# -----------------------------
# Validation
# -----------------------------
@dataclass
class ConfigIssue:
    level: str  # "warn" | "error"
    key: str
    message: str
    hint: str = ""


def validate_run_config(cfg: RunConfig, raise_on_error: bool = False) -> List[ConfigIssue]:
    issues: List[ConfigIssue] = []
    tk, md, tr, ls, ft, dt = cfg.tokenizer, cfg.model, cfg.training, cfg.loss, cfg.finetune, cfg.data

    def err(key: str, message: str, hint: str = "") -> None:
        issues.append(ConfigIssue("error", key, message, hint))

    def warn(key: str, message: str, hint: str = "") -> None:
        issues.append(ConfigIssue("warn", key, message, hint))

    for key, value in (
        ("tokenizer.patch_len", tk.patch_len),
        ("tokenizer.stride", tk.stride),
        ("tokenizer.prompt_len", tk.prompt_len),
        ("tokenizer.task_len", tk.task_len),
        ("model.model_dim", md.model_dim),
        ("model.num_heads", md.num_heads),
        ("training.batch_size", tr.batch_size),
        ("data.window_len", dt.window_len),
        ("data.window_stride", dt.window_stride),
        ("data.pretrain_stride", dt.pretrain_stride),
    ):
        if value < 1:
            err(key, f"must be >= 1, got {value}")
    if md.num_layers < 0:
        err("model.num_layers", f"must be >= 0, got {md.num_layers}")
    if tk.model_dim != md.model_dim:
        err("model.model_dim", f"tokenizer ({tk.model_dim}) and model ({md.model_dim}) widths differ")
    if md.num_heads >= 1 and md.model_dim % md.num_heads:
        err("model.num_heads", f"model_dim {md.model_dim} not divisible by {md.num_heads} heads")
    if tk.patch_len > dt.window_len:
        err("tokenizer.patch_len", f"patch_len {tk.patch_len} exceeds window_len {dt.window_len}")
    if tk.stride > tk.patch_len:
        warn("tokenizer.stride", "stride > patch_len leaves uncovered samples; decoding heads reject it",
             "Use stride <= patch_len (the published setting is stride == patch_len).")
    if not 0.0 <= md.dropout < 1.0:
        err("model.dropout", f"must be in [0, 1), got {md.dropout}")
    if not 0.0 < tr.mask_ratio < 1.0:
        err("training.mask_ratio", f"must be in (0, 1), got {tr.mask_ratio}")
    if tr.precision not in ("float32", "float64"):
        err("training.precision", f"unknown precision {tr.precision!r}", "float32 or float64")
    if ls.alpha <= 0:
        err("loss.alpha", f"must be > 0, got {ls.alpha}")
    elif ls.alpha <= 5:
        warn("loss.alpha", f"alpha={ls.alpha} is at or below the recommended > 5")
    if not 0.0 <= ls.ad_threshold <= 1.0:
        err("loss.ad_threshold", f"must be in [0, 1], got {ls.ad_threshold}")
    if ft.trainable not in ("heads", "all"):
        err("finetune.trainable", f"unknown value {ft.trainable!r}", "heads or all")
    if not 0.0 < ft.label_fraction <= 1.0:
        err("finetune.label_fraction", f"must be in (0, 1], got {ft.label_fraction}")
    if len(dt.split) != 3 or abs(sum(dt.split) - 1.0) > 1e-9 or min(dt.split) < 0:
        err("data.split", f"expected three non-negative fractions summing to 1, got {dt.split}")

    if raise_on_error:
        errors = [i for i in issues if i.level == "error"]
        if errors:
            detail = "; ".join(f"{i.key}: {i.message}" for i in errors)
            raise ConfigError(f"Invalid configuration: {detail}")
    return issues
