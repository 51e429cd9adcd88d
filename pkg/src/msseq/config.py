"""Configuration: presets, key=value config files, and typed views.

Precedence is built-in preset < config file < command-line flags. Unknown
keys are rejected so typos fail loudly instead of silently training the
wrong model.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError

# key -> (python type, desk default, paper default)
_CONFIG_SPEC: dict[str, tuple[type, object, object]] = {
    "preset": (str, "desk", "paper"),
    "seed": (int, 1234, 1234),
    "vocab": (int, 12, 64),
    "n_mels": (int, 20, 80),
    "d_embed": (int, 32, 256),
    "d_prenet": (int, 16, 128),
    "bank_K": (int, 8, 16),
    "conv_channels": (int, 32, 128),
    "highway_layers": (int, 2, 4),
    "d_gru": (int, 32, 128),
    "dropout": (float, 0.5, 0.5),
    "d_attn_rnn": (int, 64, 256),
    "d_dec_rnn": (int, 64, 256),
    "dec_layers": (int, 2, 2),
    "r": (int, 2, 2),
    "batch_size": (int, 8, 32),
    "max_steps": (int, 2000, 100000),
    "peak_lr": (float, 0.004, 0.002),
    "warmup_steps": (int, 400, 4000),
    "beta1": (float, 0.9, 0.9),
    "beta2": (float, 0.999, 0.999),
    "grad_clip": (float, 1.0, 1.0),
    "checkpoint_interval": (int, 500, 5000),
    "mask.p_text": (float, 1.0 / 3.0, 1.0 / 3.0),
    "mask.p_speech": (float, 1.0 / 3.0, 1.0 / 3.0),
    "mask.p_both": (float, 1.0 / 3.0, 1.0 / 3.0),
}

PRESETS = ("desk", "paper")


def preset_config(name: str) -> dict[str, str]:
    """Built-in defaults for a preset, as a flat key=value string dict."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")
    idx = 1 if name == "desk" else 2
    return {k: str(spec[idx]) for k, spec in _CONFIG_SPEC.items()}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse a key=value config file; blank lines and '#' comments allowed."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def merge_config(*layers: dict[str, str]) -> dict[str, str]:
    """Merge config layers (later wins) and validate keys and value types."""
    merged: dict[str, str] = {}
    for layer in layers:
        merged.update(layer)
    for key, value in merged.items():
        if key not in _CONFIG_SPEC:
            raise ConfigError(f"unknown config key {key!r}")
        typ = _CONFIG_SPEC[key][0]
        try:
            typ(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key}={value!r}: {exc}") from exc
    return merged


def cfg_int(cfg: dict[str, str], key: str) -> int:
    return int(cfg[key])


def cfg_float(cfg: dict[str, str], key: str) -> float:
    return float(cfg[key])


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    d_embed: int
    d_prenet: int
    bank_K: int
    conv_channels: int
    highway_layers: int
    d_gru: int
    dropout_rate: float

    @property
    def d_state(self) -> int:
        return 2 * self.d_gru


@dataclasses.dataclass(frozen=True)
class DecoderConfig:
    d_prenet: int
    d_attn_rnn: int
    d_dec_rnn: int
    dec_layers: int
    r: int
    n_mels: int
    dropout_rate: float


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    vocab: int
    n_mels: int
    encoder: EncoderConfig
    decoder: DecoderConfig
    has_text: bool = True
    has_speech: bool = True


def model_config(cfg: dict[str, str], *, has_text: bool = True,
                 has_speech: bool = True) -> ModelConfig:
    enc = EncoderConfig(
        d_embed=cfg_int(cfg, "d_embed"),
        d_prenet=cfg_int(cfg, "d_prenet"),
        bank_K=cfg_int(cfg, "bank_K"),
        conv_channels=cfg_int(cfg, "conv_channels"),
        highway_layers=cfg_int(cfg, "highway_layers"),
        d_gru=cfg_int(cfg, "d_gru"),
        dropout_rate=cfg_float(cfg, "dropout"),
    )
    dec = DecoderConfig(
        d_prenet=cfg_int(cfg, "d_prenet"),
        d_attn_rnn=cfg_int(cfg, "d_attn_rnn"),
        d_dec_rnn=cfg_int(cfg, "d_dec_rnn"),
        dec_layers=cfg_int(cfg, "dec_layers"),
        r=cfg_int(cfg, "r"),
        n_mels=cfg_int(cfg, "n_mels"),
        dropout_rate=cfg_float(cfg, "dropout"),
    )
    return ModelConfig(
        vocab=cfg_int(cfg, "vocab"),
        n_mels=cfg_int(cfg, "n_mels"),
        encoder=enc,
        decoder=dec,
        has_text=has_text,
        has_speech=has_speech,
    )
