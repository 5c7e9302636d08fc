"""Flat, typed run configuration.

One `key = value` text document (or CLI flags mirroring the keys) configures
every command. Unknown keys are rejected, and each run can log the fully
resolved configuration for reproducibility.
"""

from __future__ import annotations


class ConfigError(ValueError):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (parser, default, help)
SCHEMA = {
    "seed": (int, 11, "master seed; every random stream derives from it"),
    "dtype": (str, "float64", "compute precision: float64 or float32"),
    "target_lang": (str, "alpha", "language whose error rate the experiment tracks"),
    # synthetic corpus
    "languages": (int, 4, "number of synthetic languages"),
    "train_utts": (int, 200, "training utterances generated per language"),
    "test_utts": (int, 50, "held-out utterances generated per language"),
    "feat_dim": (int, 20, "acoustic feature dimensionality"),
    "phone_count": (int, 12, "global phone prototypes (includes the boundary phone)"),
    "alphabet_size": (int, 8, "graphemes per language"),
    "noise_sigma": (float, 0.35, "per-dimension feature noise"),
    "utt_min_units": (int, 18, "minimum sampled transcript units per utterance"),
    "utt_max_units": (int, 30, "maximum sampled transcript units per utterance"),
    # corpus filter
    "min_frames": (int, 100, "drop utterances with fewer frames (1 s at 10 ms shift)"),
    "max_transcript": (int, 639, "drop utterances with longer transcripts"),
    # model sizes
    "lfv_dim": (int, 8, "language-vector bottleneck width"),
    "main_width": (int, 64, "main-network layer width (and modulation width)"),
    "subnet_width": (int, 16, "per-language subnet layer width"),
    "lm_width": (int, 64, "character LM hidden width"),
    "lid_hidden": (int, 64, "language-identifier hidden width"),
    # optimizer
    "lr": (float, 0.05, "learning rate for CTC-trained networks"),
    "momentum": (float, 0.9, "Nesterov momentum coefficient"),
    "dropout": (float, 0.2, "dropout rate on main-network layers during joint training"),
    "clip_norm": (float, 5.0, "global gradient-norm clip"),
    "batch_size": (int, 16, "utterances per training batch"),
    "lr_decay": (float, 0.5, "lr multiplier applied when held-out loss stalls"),
    "lr_patience": (int, 2, "stalled epochs tolerated before decaying lr"),
    # per-stage epochs and rates
    "lid_epochs": (int, 8, "language-identifier training epochs"),
    "lid_lr": (float, 0.1, "language-identifier learning rate"),
    "lid_frames_per_lang": (int, 8000, "frame subsample per language per epoch"),
    "subnet_epochs": (int, 10, "monolingual subnet training epochs"),
    "nlc_epochs": (int, 8, "code-network pretraining epochs"),
    "nlc_lr": (float, 0.05, "code-network pretraining learning rate"),
    "joint_epochs": (int, 6, "joint fine-tuning epochs"),
    "lm_epochs": (int, 8, "character LM training epochs"),
    "lm_lr": (float, 0.3, "character LM learning rate"),
    # decoding
    "beam": (int, 16, "beam width for LM-fused decoding"),
    "lm_weight": (float, 0.5, "LM weight during beam decoding"),
}


class Config:
    """Resolved configuration with attribute access."""

    def __init__(self, **overrides):
        values = {k: default for k, (_, default, _) in SCHEMA.items()}
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            parser = SCHEMA[key][0]
            values[key] = parser(val) if not isinstance(val, parser) else val
        if values["dtype"] not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {values['dtype']!r}")
        if values["main_width"] % values["lfv_dim"] != 0:
            raise ConfigError(
                f"main_width {values['main_width']} must be a multiple of lfv_dim {values['lfv_dim']}"
            )
        self._values = values
        for k, v in values.items():
            setattr(self, k, v)

    def replace(self, **overrides):
        merged = dict(self._values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return Config(**merged)

    def as_dict(self):
        return dict(self._values)

    def resolved_text(self):
        return "\n".join(f"{k} = {self._values[k]}" for k in SCHEMA) + "\n"


def parse_config_file(path):
    """Read a `key = value` document; '#' starts a comment."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            overrides[key] = SCHEMA[key][0](val.strip())
    return overrides


def load_config(path=None, **overrides):
    file_overrides = parse_config_file(path) if path else {}
    file_overrides.update({k: v for k, v in overrides.items() if v is not None})
    return Config(**file_overrides)
