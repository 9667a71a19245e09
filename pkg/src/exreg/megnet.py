"""Conditional multi-exposure generator.

The base path is three 1x1 conv layers (64 channels, ReLU), so a pixel is
re-rendered independently of its neighbors; a conditional branch turns a
global image code plus the requested EV offset into per-layer, per-channel
affine modulation (alpha_n * f + beta_n).  Modulation heads start at the
exact identity (alpha=1, beta=0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .image import Image, SRGB, chw, from_chw
from .tensor import Tensor

CANONICAL_GEN_EVS = (-1.5, -1.0, 1.0, 1.5)

# EV offsets are fed to the conditioning MLP divided by this, so the
# canonical range maps to [-1, 1].
EV_SCALE = 1.5


@dataclass
class ExposureStack:
    """Renditions of one scene sorted by relative EV; the 0-EV entry is the
    untouched input image."""

    evs: list
    images: list  # list[Image], aligned with evs

    def __post_init__(self):
        if len(self.evs) != len(self.images):
            raise ValueError("evs and images must align")
        if list(self.evs) != sorted(self.evs):
            raise ValueError("stack entries must be sorted ascending by EV")
        if 0.0 not in self.evs:
            raise ValueError("stack must contain the 0-EV input")

    def __len__(self):
        return len(self.evs)

    def zero_index(self) -> int:
        return self.evs.index(0.0)


@dataclass
class MegnetConfig:
    base_channels: int = 64
    global_channels: int = 32
    ev_hidden: int = 32
    head_hidden: int = 64
    thumb_size: int = 32  # global prior is read off a fixed-size thumbnail


class Megnet:
    def __init__(self, cfg: MegnetConfig, rng: np.random.Generator, dtype=np.float64):
        c = cfg.base_channels
        g = cfg.global_channels
        self.cfg = cfg
        self.base = [
            nn.Conv2d(3, c, 1, rng=rng, dtype=dtype),
            nn.Conv2d(c, c, 1, rng=rng, dtype=dtype),
            nn.Conv2d(c, c, 1, rng=rng, dtype=dtype),
        ]
        self.out = nn.Conv2d(c, 3, 1, rng=rng, dtype=dtype)
        # Global prior: strided convs on a thumbnail, then average pooling.
        self.global_enc = [
            nn.Conv2d(3, g, 4, stride=2, padding=1, rng=rng, dtype=dtype, bias_init=0.01),
            nn.Conv2d(g, g, 4, stride=2, padding=1, rng=rng, dtype=dtype, bias_init=0.01),
            nn.Conv2d(g, g, 4, stride=2, padding=1, rng=rng, dtype=dtype, bias_init=0.01),
        ]
        self.ev_mlp = nn.MLP([1, cfg.ev_hidden, cfg.ev_hidden, cfg.ev_hidden],
                             rng=rng, dtype=dtype, bias_init=0.01)
        cond = g + cfg.ev_hidden
        self.heads = [
            nn.MLP([cond, cfg.head_hidden, 2 * c], rng=rng, dtype=dtype, zero_init_last=True)
            for _ in range(3)
        ]
        self.dtype = dtype

    def params(self) -> dict:
        parts = [layer.params(f"base.{i}") for i, layer in enumerate(self.base)]
        parts.append(self.out.params("out"))
        parts += [layer.params(f"global.{i}") for i, layer in enumerate(self.global_enc)]
        parts.append(self.ev_mlp.params("ev"))
        parts += [h.params(f"head.{i}") for i, h in enumerate(self.heads)]
        return nn.merge_params(*parts)

    def _condition(self, x: Tensor, dev: np.ndarray):
        """Per-layer (alpha, beta) from the global image code and the EV offset."""
        n = x.shape[0]
        thumb = T.bilinear_resize(x, self.cfg.thumb_size, self.cfg.thumb_size)
        h = thumb
        for conv in self.global_enc:
            h = T.relu(conv(h))
        code = T.mean(h, axis=(2, 3))  # (N, g)
        ev_in = Tensor((np.asarray(dev, dtype=self.dtype) / EV_SCALE).reshape(n, 1))
        ev_code = self.ev_mlp(ev_in)
        cond = T.concat([code, ev_code], axis=1)
        c = self.cfg.base_channels
        mods = []
        for head in self.heads:
            ab = head(cond)  # (N, 2c), exactly zero at init
            alpha = T.add(T.narrow(ab, 1, 0, c), 1.0)
            beta = T.narrow(ab, 1, c, c)
            mods.append((alpha, beta))
        return mods

    def __call__(self, x: Tensor, dev) -> Tensor:
        """(N,3,H,W) in [0,1] plus per-sample EV offsets -> (N,3,H,W) in [0,1]."""
        dev = np.atleast_1d(np.asarray(dev, dtype=self.dtype))
        if dev.shape != (x.shape[0],):
            raise T.ShapeError(f"dev shape {dev.shape} != batch ({x.shape[0]},)")
        mods = self._condition(x, dev)
        f = x
        for conv, (alpha, beta) in zip(self.base, mods):
            f = T.relu(modulate(conv(f), alpha, beta))
        return T.sigmoid(self.out(f))


def modulate(feature: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine: out[n,c,h,w] = alpha[n,c] * f[n,c,h,w] + beta[n,c]."""
    if feature.ndim != 4:
        raise T.ShapeError(f"modulate: expected N,C,H,W feature, got {feature.shape}")
    n, c = feature.shape[0], feature.shape[1]
    if alpha.shape != (n, c) or beta.shape != (n, c):
        raise T.ShapeError(
            f"modulate: alpha/beta shapes {alpha.shape}/{beta.shape} != ({n},{c})")
    a = T.reshape(alpha, (n, c, 1, 1))
    b = T.reshape(beta, (n, c, 1, 1))
    return T.add(T.mul(feature, a), b)


def megnet_forward(net: Megnet, img: Image, delta_ev: float) -> Image:
    """Re-render ``img`` at ``delta_ev`` stops relative to its own exposure."""
    x = Tensor(chw(img)[None].astype(net.dtype))
    y = net(x, np.array([delta_ev]))
    return from_chw(y.data[0], SRGB)


def generate_stack_tensors(net: Megnet, x: Tensor, ev_set=CANONICAL_GEN_EVS):
    """Batched stack generation: returns (sorted evs incl 0, list of tensors).

    All requested EVs go through one forward pass; the 0-EV slot is the
    input tensor itself.
    """
    evs = [float(e) for e in ev_set]
    if len(set(evs)) != len(evs):
        raise ValueError(f"duplicate EVs in {ev_set}")
    if 0.0 in evs:
        raise ValueError("ev_set must exclude 0; the input occupies it")
    n = x.shape[0]
    entries = {0.0: x}
    if evs:
        rep = T.concat([x] * len(evs), axis=0)
        dev = np.repeat(np.asarray(evs, dtype=net.dtype), n)
        gen = net(rep, dev)
        for i, ev in enumerate(evs):
            entries[ev] = T.narrow(gen, 0, i * n, n)
    order = sorted(entries)
    return order, [entries[e] for e in order]


def generate_stack(net: Megnet, img: Image, ev_set=CANONICAL_GEN_EVS) -> ExposureStack:
    x = Tensor(chw(img)[None].astype(net.dtype))
    evs, tensors = generate_stack_tensors(net, x, ev_set)
    images = [img if ev == 0.0 else from_chw(t.data[0], SRGB) for ev, t in zip(evs, tensors)]
    return ExposureStack(evs=evs, images=images)
