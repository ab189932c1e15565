"""Flat key-value run configuration.

Config files are plain text, one `key = value` per line, `#` comments.
Example:

    seed = 7
    wavelet.family = bump
    spectrogram.size = 128x512
    augment.crop_bins = 10
    augment.mixup_alpha = 0.4
    augment.oversample = true
    train.batch_size = 16
    train.epochs = 100
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .augment import AugmentConfig
from .dsp import EVENT_SECONDS, RECORD_SECONDS, WaveletSpec
from .errors import InvalidConfigError
from .training import TrainConfig

PAPER_SIZES = {
    (128, 128), (128, 256), (128, 512),
    (140, 256), (140, 512), (140, 1024),
}


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidConfigError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def _get(kv, key, default, cast):
    if key not in kv:
        return default
    raw = kv[key]
    try:
        if cast is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise InvalidConfigError(f"config key {key}: bad value {raw!r}")


def parse_size(text):
    try:
        f, t = text.lower().split("x")
        return int(f), int(t)
    except ValueError:
        raise InvalidConfigError(f"bad spectrogram size {text!r}, want FxT")


def _int_list(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    wavelet: WaveletSpec = field(default_factory=WaveletSpec)
    size: tuple = (128, 512)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # model hyperparameters (input dims are derived from size and crop)
    doub_inc_channels: int = 128
    inc_res_channels: tuple = (128, 256)
    rn_lambda: float = 0.4
    attn_heads: int = 16
    attn_key_dim: int = 32
    fc_hidden: int = 512
    dropout: float = 0.2

    def target_seconds(self, level):
        return EVENT_SECONDS if level == "event" else RECORD_SECONDS


def load_run_config(path=None, text=None, overrides=None):
    kv = parse_kv(text if text is not None else open(path).read())
    if overrides:
        kv.update({k: v for k, v in overrides.items() if v is not None})

    seed = _get(kv, "seed", 0, int)
    family = _get(kv, "wavelet.family", "bump", str).lower()
    wavelet = WaveletSpec(
        family=family,
        morse_gamma=_get(kv, "wavelet.morse_gamma", 3.0, float),
        morse_beta=_get(kv, "wavelet.morse_beta", 20.0, float),
        amor_center_freq=_get(kv, "wavelet.amor_center_freq", 6.0, float),
        bump_mu=_get(kv, "wavelet.bump_mu", 5.0, float),
        bump_sigma=_get(kv, "wavelet.bump_sigma", 0.6, float),
    )
    size = parse_size(_get(kv, "spectrogram.size", "128x512", str))
    if size not in PAPER_SIZES and not _get(
        kv, "spectrogram.allow_custom_size", False, bool
    ):
        raise InvalidConfigError(
            f"spectrogram size {size[0]}x{size[1]} is nonstandard; set "
            "spectrogram.allow_custom_size = true to use it"
        )
    augment = AugmentConfig(
        crop_bins=_get(kv, "augment.crop_bins", 10, int),
        mixup_alpha=_get(kv, "augment.mixup_alpha", 0.4, float),
        mixup=_get(kv, "augment.mixup", True, bool),
        oversample=_get(kv, "augment.oversample", True, bool),
    )
    train = TrainConfig(
        epochs=_get(kv, "train.epochs", 100, int),
        batch_size=_get(kv, "train.batch_size", 16, int),
        learning_rate=_get(kv, "train.learning_rate", 1e-4, float),
        l2_lambda=_get(kv, "train.l2_lambda", 1e-4, float),
        seed=seed,
        eval_every=_get(kv, "train.eval_every", 1, int),
        early_stop_evals=_get(kv, "train.early_stop_evals", 20, int),
    )
    return RunConfig(
        seed=seed,
        wavelet=wavelet,
        size=size,
        augment=augment,
        train=train,
        doub_inc_channels=_get(kv, "model.doub_inc_channels", 128, int),
        inc_res_channels=_get(kv, "model.inc_res_channels", (128, 256),
                              _int_list),
        rn_lambda=_get(kv, "model.rn_lambda", 0.4, float),
        attn_heads=_get(kv, "model.attn_heads", 16, int),
        attn_key_dim=_get(kv, "model.attn_key_dim", 32, int),
        fc_hidden=_get(kv, "model.fc_hidden", 512, int),
        dropout=_get(kv, "model.dropout", 0.2, float),
    )
