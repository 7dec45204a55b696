"""Flat run configuration with defaults, validation and a stable digest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError

STAGES = ("srd", "sgi", "eval", "probe")


@dataclass(frozen=True)
class RunConfig:
    stage: str = "srd"
    seed: int = 0
    data_dir: str | None = None
    out_dir: str | None = None
    checkpoint: str | None = None
    text_bank: str | None = None
    threads: int | None = None

    # synthetic data
    gen_n: int = 512
    gen_channels: int = 6
    gen_height: int = 64
    gen_width: int = 64
    gen_classes: int = 4

    # frozen encoders
    patch_size: int = 8
    rgb_dim: int = 32
    ms_dim: int = 16
    encoder_depth: int = 2
    rgb_encoder_seed: int = 11
    ms_encoder_seed: int = 23

    # multi-crop views
    n_global_crops: int = 2
    n_local_crops: int = 8
    global_crop_size: int = 128
    local_crop_size: int = 96
    global_crop_scale: tuple = (0.4, 1.0)
    local_crop_scale: tuple = (0.05, 0.4)
    hflip_prob: float = 0.5
    jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    solarize_prob: float = 0.2
    grayscale_prob: float = 0.2

    # stage 1
    tau_s: float = 0.1
    tau_t: float = 0.06
    m_c: float = 0.9
    srd_lr: float = 5e-4
    srd_epochs: int = 5
    srd_batch_size: int = 128
    srd_steps: int | None = None
    srd_weight_decay: float = 0.05
    projector_blocks: int = 2
    projector_seed: int = 5
    projector_head_std: float | None = None
    d_v: int | None = None

    # stage 2
    tau: float = 0.07
    sgi_lr: float = 4e-5
    sgi_epochs: int = 10
    sgi_batch_size: int = 1024
    sgi_steps: int | None = None
    sgi_weight_decay: float = 0.05
    text_dim: int = 512
    text_seed: int = 0
    text_projector_seed: int = 7
    text_pooling: str = "mean"

    # evaluation
    eval_split: str = "eval"
    eval_k: int = 100
    ap_denominator: str = "min"
    ovr_margin: float = 0.0
    probe_epochs: int = 30
    probe_batch_size: int = 128
    probe_lr: float = 1e-4
    probe_weight_decay: float = 0.05
    segment_mosaics: int = 8

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0 < self.tau_t < self.tau_s:
            raise ConfigurationError(f"need 0 < tau_t < tau_s, got tau_t={self.tau_t}, tau_s={self.tau_s}")
        if not 0 <= self.m_c < 1:
            raise ConfigurationError(f"m_c must be in [0, 1), got {self.m_c}")
        if self.text_pooling not in ("mean", "bos", "eos"):
            raise ConfigurationError(f"unknown text_pooling {self.text_pooling!r}")
        if self.ap_denominator not in ("min", "total"):
            raise ConfigurationError(f"unknown ap_denominator {self.ap_denominator!r}")
        object.__setattr__(self, "global_crop_scale", tuple(self.global_crop_scale))
        object.__setattr__(self, "local_crop_scale", tuple(self.local_crop_scale))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_crop_scale"] = list(self.global_crop_scale)
        d["local_crop_scale"] = list(self.local_crop_scale)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def digest(self) -> str:
        """SHA-256 of the resolved config, ignoring where outputs go."""
        d = self.to_dict()
        for k in ("out_dir", "threads"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def require(self, *keys):
        missing = [k for k in keys if getattr(self, k) is None]
        if missing:
            raise ConfigurationError(f"stage {self.stage!r} requires config key(s): {', '.join(missing)}")

    def with_overrides(self, **kw) -> "RunConfig":
        _check_keys(kw)
        return replace(self, **kw)


KEYS = tuple(f.name for f in fields(RunConfig))


def _check_keys(d: dict):
    unknown = sorted(set(d) - set(KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigurationError("config must be a flat JSON object")
    _check_keys(d)
    nested = [k for k, v in d.items() if isinstance(v, dict)]
    if nested:
        raise ConfigurationError(f"config must be flat; nested value under {', '.join(nested)}")
    return RunConfig(**d)


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(d)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_json())
    return path
