"""Dataclass configs, scale profiles, and the layered key=value config file.

Resolution order is defaults < config file < command-line flags; every run
echoes the fully resolved config so it can be replayed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .dataset import CANONICAL_DELTAS
from .megnet import CANONICAL_GEN_EVS, MegnetConfig
from .regnet import RegnetConfig


@dataclass
class ScaleProfile:
    """Network widths for one deployment scale."""

    name: str
    # megnet
    megnet_base_channels: int = 64
    megnet_global_channels: int = 32
    megnet_ev_hidden: int = 32
    megnet_head_hidden: int = 64
    megnet_thumb: int = 32
    # regnet
    c_tok: int = 32
    enc_channels: tuple = (16, 24, 32)
    attn_width: int = 128
    attn_heads: int = 8
    pred_channels: int = 32
    pred_layers: int = 7
    fam_hidden: int = 8

    def megnet_config(self) -> MegnetConfig:
        return MegnetConfig(
            base_channels=self.megnet_base_channels,
            global_channels=self.megnet_global_channels,
            ev_hidden=self.megnet_ev_hidden,
            head_hidden=self.megnet_head_hidden,
            thumb_size=self.megnet_thumb,
        )

    def regnet_config(self, stack_size: int = 5) -> RegnetConfig:
        return RegnetConfig(
            c_tok=self.c_tok,
            enc_channels=tuple(self.enc_channels),
            attn_width=self.attn_width,
            attn_heads=self.attn_heads,
            pred_channels=self.pred_channels,
            pred_layers=self.pred_layers,
            fam_hidden=self.fam_hidden,
            stack_size=stack_size,
        )


DESK = ScaleProfile(name="desk")

# 512x512 inputs -> 32x32x192 token grids.
PAPER = ScaleProfile(
    name="paper",
    c_tok=192,
    enc_channels=(48, 96, 144),
    attn_width=256,
    pred_channels=32,
)

# Tiny widths for 64-bit finite-difference checks of the full pipelines.
MICRO = ScaleProfile(
    name="micro",
    megnet_base_channels=8,
    megnet_global_channels=8,
    megnet_ev_hidden=8,
    megnet_head_hidden=8,
    megnet_thumb=8,
    c_tok=8,
    enc_channels=(4, 6, 8),
    attn_width=16,
    pred_channels=6,
    pred_layers=7,
    fam_hidden=4,
)

PROFILES = {p.name: p for p in (DESK, PAPER, MICRO)}


@dataclass
class TrainConfig:
    """One training stage.

    An epoch is one expected visit per rendition image (megnet stage) or per
    scene (regnet/cotrain stages); ``steps_per_epoch`` overrides that when
    nonzero.
    """

    stage: str = "megnet"  # megnet | regnet | cotrain
    batch_size: int = 16
    patch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    profile: str = "desk"
    precision: str = "f32"  # f32 | f64; gradcheck always runs f64
    charbonnier_epsilon: float = 1e-3
    grad_clip: float = 5.0
    val_fraction: float = 0.10
    val_every: int = 0  # epochs between validations; 0 -> auto
    steps_per_epoch: int = 0  # 0 -> derived from the dataset
    gen_ev_set: tuple = CANONICAL_GEN_EVS
    delta_set: tuple = CANONICAL_DELTAS

    def __post_init__(self):
        if self.stage not in ("megnet", "regnet", "cotrain"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.charbonnier_epsilon <= 0:
            raise ValueError("charbonnier_epsilon must be > 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; have {sorted(PROFILES)}")

    def dtype(self):
        import numpy as np

        return np.float32 if self.precision == "f32" else np.float64

    def scale_profile(self) -> ScaleProfile:
        return PROFILES[self.profile]


# Desk-scale stage defaults: megnet 16/32px/30ep, regnet 4/64px/60ep, cotrain 20ep.
_STAGE_DEFAULTS = {
    "megnet": dict(batch_size=16, patch_size=32, epochs=30),
    "regnet": dict(batch_size=4, patch_size=64, epochs=60),
    "cotrain": dict(batch_size=4, patch_size=64, epochs=20),
}


def default_train_config(stage: str, **overrides) -> TrainConfig:
    base = dict(_STAGE_DEFAULTS[stage])
    base.update(overrides)
    return TrainConfig(stage=stage, **base)


# ---------------------------------------------------------------------------
# layered key=value config files


def parse_config_file(path: str) -> dict:
    """Line-oriented ``key = value``; '#' starts a comment; blank lines ok."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, target):
    if isinstance(target, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        items = [v for v in value.replace(",", " ").split() if v]
        return tuple(type(target[0])(v) if target else float(v) for v in items)
    return value


def apply_overrides(cfg, overrides: dict):
    """Return a copy of dataclass ``cfg`` with string overrides coerced in."""
    fields = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    unknown = set(overrides) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    changes = {k: _coerce(v, fields[k]) for k, v in overrides.items()}
    return dataclasses.replace(cfg, **changes)


def format_resolved(cfg, header: str = "") -> str:
    lines = [f"# resolved config{': ' + header if header else ''}"]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines)
