"""Exposure regression network.

The exposure-stack images are encoded into regional tokens at 1/16
resolution; a single-scale predictor estimates a full-resolution exposure
map E*; two 8-head cross-attention blocks regress the token feature at the
location-exposure query (i, j, e*_ij) from the (i, j, e) context tokens; a
transposed-conv decoder reconstructs the corrected image with FAM-adjusted
encoder skips (S_n * ENf_n + B_n, with S_n and B_n predicted from resized
E* by per-layer 1x1 conv nets that start at the exact identity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .image import Image, SRGB, chw, from_chw
from .megnet import EV_SCALE, ExposureStack
from .tensor import Tensor

EV_LIMIT = 1.5  # regression support of E*, in stops


@dataclass
class RegnetConfig:
    c_tok: int = 32
    enc_channels: tuple = (16, 24, 32)  # first three encoder widths; 4th is c_tok
    attn_width: int = 128
    attn_heads: int = 8
    pred_channels: int = 32
    pred_layers: int = 7
    fam_hidden: int = 8
    stack_size: int = 5  # entries per exposure stack (generated EVs + input)


@dataclass
class TokenGrid:
    """Regional features of one stack entry plus their (i,j) grid coordinates."""

    tokens: np.ndarray  # (G, G, C)
    coords: np.ndarray  # (G, G, 2) cell centers in [0,1]^2
    ev: float


@dataclass
class ExposureMap:
    """Predicted per-pixel optimal exposure, in stops, clamped to +-EV_LIMIT."""

    values: np.ndarray  # (H, W)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"expected HxW exposure map, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("exposure map contains non-finite values")
        if np.abs(v).max(initial=0.0) > EV_LIMIT + 1e-9:
            raise ValueError(f"exposure map exceeds +-{EV_LIMIT} stops")
        self.values = v


def token_coords(g: int) -> np.ndarray:
    """(G,G,2) cell-center coordinates; depends only on G."""
    centers = (np.arange(g) + 0.5) / g
    ii, jj = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([ii, jj], axis=-1)


class Regnet:
    def __init__(self, cfg: RegnetConfig, rng: np.random.Generator, dtype=np.float64):
        if cfg.c_tok % cfg.attn_heads or cfg.attn_width % cfg.attn_heads:
            raise ValueError("attention head count must divide c_tok and attn_width")
        self.cfg = cfg
        self.dtype = dtype
        e1, e2, e3 = cfg.enc_channels
        c = cfg.c_tok
        self.encoder = [
            nn.Conv2d(3, e1, 4, stride=2, padding=1, rng=rng, dtype=dtype),
            nn.Conv2d(e1, e2, 4, stride=2, padding=1, rng=rng, dtype=dtype),
            nn.Conv2d(e2, e3, 4, stride=2, padding=1, rng=rng, dtype=dtype),
            nn.Conv2d(e3, c, 4, stride=2, padding=1, rng=rng, dtype=dtype),
        ]
        p = cfg.pred_channels
        pin = 4 * cfg.stack_size  # RGB + constant EV channel per stack entry
        pred = [nn.Conv2d(pin, p, 3, padding=1, rng=rng, dtype=dtype)]
        for _ in range(cfg.pred_layers - 2):
            pred.append(nn.Conv2d(p, p, 3, padding=1, rng=rng, dtype=dtype))
        pred.append(nn.Conv2d(p, 1, 3, padding=1, rng=rng, dtype=dtype))
        self.predictor = pred

        d = cfg.attn_width
        self.embed1 = nn.MLP([3, d, d], rng=rng, dtype=dtype)          # [i,j,e] keys/queries
        self.embed2 = nn.MLP([3 + c, d, d], rng=rng, dtype=dtype)      # [i,j,e || feature]
        self.ln1_g = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.ln2_g = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

        self.decoder = [
            nn.ConvTranspose2d(c, e3, 4, stride=2, padding=1, rng=rng, dtype=dtype),
            nn.ConvTranspose2d(e3, e2, 4, stride=2, padding=1, rng=rng, dtype=dtype),
            nn.ConvTranspose2d(e2, e1, 4, stride=2, padding=1, rng=rng, dtype=dtype),
            nn.ConvTranspose2d(e1, 3, 4, stride=2, padding=1, rng=rng, dtype=dtype),
        ]
        h = cfg.fam_hidden
        self.fam_s = []
        self.fam_b = []
        for _ in range(4):  # one pair per encoder level
            self.fam_s.append([
                nn.Conv2d(1, h, 1, rng=rng, dtype=dtype, bias_init=0.01),
                nn.Conv2d(h, 1, 1, rng=rng, dtype=dtype, zero_init=True),
            ])
            self.fam_b.append([
                nn.Conv2d(1, h, 1, rng=rng, dtype=dtype, bias_init=0.01),
                nn.Conv2d(h, 1, 1, rng=rng, dtype=dtype, zero_init=True),
            ])

    def params(self) -> dict:
        parts = [l.params(f"enc.{i}") for i, l in enumerate(self.encoder)]
        parts += [l.params(f"pred.{i}") for i, l in enumerate(self.predictor)]
        parts.append(self.embed1.params("attn1.embed"))
        parts.append(self.embed2.params("attn2.embed"))
        parts.append({"attn1.ln.g": self.ln1_g, "attn1.ln.b": self.ln1_b,
                      "attn2.ln.g": self.ln2_g, "attn2.ln.b": self.ln2_b})
        parts += [l.params(f"dec.{i}") for i, l in enumerate(self.decoder)]
        for i in range(4):
            for j, l in enumerate(self.fam_s[i]):
                parts.append(l.params(f"fam.{i}.s.{j}"))
            for j, l in enumerate(self.fam_b[i]):
                parts.append(l.params(f"fam.{i}.b.{j}"))
        return nn.merge_params(*parts)

    # -- pipeline pieces ----------------------------------------------------

    def encode_features(self, x: Tensor):
        """Four stride-2 conv layers; returns features at 1/2 .. 1/16 scale."""
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise T.ShapeError(f"input size {x.shape[2]}x{x.shape[3]} not divisible by 16")
        feats = []
        h = x
        for conv in self.encoder:
            h = T.relu(conv(h))
            feats.append(h)
        return feats

    def predict_exposure_tensors(self, stack: list, evs: list) -> Tensor:
        """Full-resolution E* from the stack: (N,1,H,W) in [-EV_LIMIT, EV_LIMIT].

        Each image is concatenated with a constant channel holding its EV
        (scaled by 1/EV_SCALE); the 7-layer predictor never downsamples.
        """
        n, _, hh, ww = stack[0].shape
        chans = []
        for ev, img in zip(evs, stack):
            const = Tensor(np.full((n, 1, hh, ww), ev / EV_SCALE, dtype=self.dtype))
            chans.extend([img, const])
        h = T.concat(chans, axis=1)
        for i, conv in enumerate(self.predictor):
            h = conv(h)
            if i != len(self.predictor) - 1:
                h = T.relu(h)
        return T.mul(T.tanh(h), EV_LIMIT)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor):
        """Multi-head scaled dot-product attention.

        q: (N,Tq,D), k: (N,Tk,D), v: (N,Tk,C) -> ((N,Tq,C), weights (N*H,Tq,Tk)).
        Values are the raw token features; heads split C so their concat
        restores it exactly (a single context token passes through unchanged).
        """
        heads = self.cfg.attn_heads
        nb, tq, dd = q.shape
        tk = k.shape[1]
        c = v.shape[2]
        dh = dd // heads

        def split(t, feat):
            t = T.reshape(t, (nb, t.shape[1], heads, feat // heads))
            t = T.transpose(t, (0, 2, 1, 3))
            return T.reshape(t, (nb * heads, t.shape[2], feat // heads))

        qh = split(q, dd)
        kh = split(k, dd)
        vh = split(v, c)
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, vh)  # (N*H, Tq, C/H)
        out = T.reshape(out, (nb, heads, tq, c // heads))
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (nb, tq, c))
        return out, attn

    def cross_attend_tensors(self, values: Tensor, key_coords: np.ndarray,
                             query_coords2: np.ndarray, e_pool: Tensor,
                             resid0: Tensor):
        """Two-block regression over the (i,j,e) token space.

        values: (N, Tk, C) context tokens; key_coords: (Tk, 3) of [i, j, e];
        query_coords2: (Tq, 2) of [i, j]; e_pool: (N, Tq, 1) pooled E*;
        resid0: (N, Tq, C) tokens of the 0-EV entry, the residual source.
        Returns (f_star, attention weights of both blocks).
        """
        n = values.shape[0]
        tk = key_coords.shape[0]
        tq = query_coords2.shape[0]
        kc = Tensor(np.broadcast_to(key_coords.astype(self.dtype), (n, tk, 3)).copy())
        qc2 = Tensor(np.broadcast_to(query_coords2.astype(self.dtype), (n, tq, 2)).copy())
        qc = T.concat([qc2, T.mul(e_pool, 1.0 / EV_SCALE)], axis=2)  # (N,Tq,3)

        k1 = self.embed1(kc)
        q1 = self.embed1(qc)
        o1, w1 = self._attend(q1, k1, values)
        f1 = T.add(T.mul(T.layer_norm(T.add(resid0, o1)), self.ln1_g), self.ln1_b)

        k2 = self.embed2(T.concat([kc, values], axis=2))
        q2 = self.embed2(T.concat([qc, f1], axis=2))
        o2, w2 = self._attend(q2, k2, values)
        f_star = T.add(T.mul(T.layer_norm(T.add(f1, o2)), self.ln2_g), self.ln2_b)
        return f_star, (w1, w2)

    def fam_adjust_tensors(self, level: int, enf: Tensor, e_star: Tensor) -> Tensor:
        """S_n * ENf_n + B_n with single-channel maps broadcast over channels."""
        e = T.bilinear_resize(e_star, enf.shape[2], enf.shape[3])
        hs = T.relu(self.fam_s[level][0](e))
        s = T.add(self.fam_s[level][1](hs), 1.0)
        hb = T.relu(self.fam_b[level][0](e))
        b = self.fam_b[level][1](hb)
        return T.add(T.mul(enf, s), b)

    def __call__(self, stack: list, evs: list, want_attn: bool = False):
        """Full pipeline on tensor stacks.

        stack: list of (N,3,H,W) tensors sorted ascending by EV; evs: the
        matching EV offsets (0 present).  Returns (Y, E*) and optionally the
        attention weights.
        """
        evs = [float(e) for e in evs]
        if len(stack) != len(evs):
            raise ValueError("stack and evs must align")
        if len(stack) != self.cfg.stack_size:
            raise ValueError(f"stack has {len(stack)} entries, model expects {self.cfg.stack_size}")
        if 0.0 not in evs:
            raise ValueError("stack must contain the 0-EV input")
        n, _, hh, ww = stack[0].shape
        g = hh // 16

        # One batched encoder pass over every stack entry.
        big = T.concat(stack, axis=0) if len(stack) > 1 else stack[0]
        feats = self.encode_features(big)
        zi = evs.index(0.0)
        enf = [T.narrow(f, 0, zi * n, n) for f in feats]  # skips for the input image

        c = self.cfg.c_tok
        per_entry = []
        for e_idx in range(len(stack)):
            tok = T.narrow(feats[3], 0, e_idx * n, n)           # (N,C,G,G)
            tok = T.reshape(T.transpose(tok, (0, 2, 3, 1)), (n, g * g, c))
            per_entry.append(tok)
        values = T.concat(per_entry, axis=1)  # (N, E*G*G, C)

        coords = token_coords(g).reshape(-1, 2)
        key_coords = np.concatenate(
            [np.concatenate([coords, np.full((g * g, 1), ev / EV_SCALE)], axis=1) for ev in evs],
            axis=0)

        e_star = self.predict_exposure_tensors(stack, evs)      # (N,1,H,W)
        e_pool = T.avg_pool2d(e_star, hh // g)                  # (N,1,G,G)
        e_pool = T.reshape(e_pool, (n, g * g, 1))

        f_star, attn = self.cross_attend_tensors(values, key_coords, coords, e_pool,
                                                 resid0=per_entry[zi])

        d = T.reshape(f_star, (n, g, g, c))
        d = T.transpose(d, (0, 3, 1, 2))
        d = T.add(d, self.fam_adjust_tensors(3, enf[3], e_star))
        d = T.add(T.relu(self.decoder[0](d)), self.fam_adjust_tensors(2, enf[2], e_star))
        d = T.add(T.relu(self.decoder[1](d)), self.fam_adjust_tensors(1, enf[1], e_star))
        d = T.add(T.relu(self.decoder[2](d)), self.fam_adjust_tensors(0, enf[0], e_star))
        y = T.sigmoid(self.decoder[3](d))

        if want_attn:
            return y, e_star, attn
        return y, e_star


# ---------------------------------------------------------------------------
# image-level API


def _stack_tensors(net: Regnet, stack: ExposureStack):
    xs = [Tensor(chw(img)[None].astype(net.dtype)) for img in stack.images]
    return xs, [float(e) for e in stack.evs]


def encode(net: Regnet, stack: ExposureStack):
    """Token grids for every stack entry plus the 0-EV encoder features."""
    sizes = {(img.height, img.width) for img in stack.images}
    if len(sizes) != 1:
        raise ValueError(f"stack images differ in size: {sorted(sizes)}")
    xs, evs = _stack_tensors(net, stack)
    big = T.concat(xs, axis=0) if len(xs) > 1 else xs[0]
    feats = net.encode_features(big)
    g = xs[0].shape[2] // 16
    coords = token_coords(g)
    grids = []
    for i, ev in enumerate(evs):
        tok = feats[3].data[i].transpose(1, 2, 0)  # (G,G,C)
        grids.append(TokenGrid(tokens=tok, coords=coords, ev=ev))
    zi = stack.zero_index()
    enf0 = [f.data[zi] for f in feats]
    return grids, enf0


def predict_exposure(net: Regnet, stack: ExposureStack) -> ExposureMap:
    xs, evs = _stack_tensors(net, stack)
    e = net.predict_exposure_tensors(xs, evs)
    return ExposureMap(e.data[0, 0])


def pool_exposure(emap: ExposureMap, g: int) -> np.ndarray:
    """Block-mean E* down to (G,G); spatial size must divide evenly."""
    h, w = emap.values.shape
    if h % g or w % g:
        raise ValueError(f"exposure map {h}x{w} not divisible into {g}x{g} blocks")
    t = T.avg_pool2d(Tensor(emap.values[None, None]), h // g)
    return t.data[0, 0]


def cross_attend(net: Regnet, grids: list, e_star_pooled: np.ndarray) -> np.ndarray:
    """Spec-level cross attention for a single sample: returns (G,G,C)."""
    g = grids[0].coords.shape[0]
    c = grids[0].tokens.shape[2]
    for grid in grids:
        if grid.tokens.shape != (g, g, c):
            raise ValueError("token grids must share G and C")
    values = Tensor(np.concatenate(
        [grid.tokens.reshape(1, g * g, c) for grid in grids], axis=1).astype(net.dtype))
    coords = token_coords(g).reshape(-1, 2)
    key_coords = np.concatenate(
        [np.concatenate([coords, np.full((g * g, 1), grid.ev / EV_SCALE)], axis=1)
         for grid in grids], axis=0)
    e_pool = Tensor(e_star_pooled.reshape(1, g * g, 1).astype(net.dtype))
    zi = [i for i, grid in enumerate(grids) if grid.ev == 0.0]
    resid = Tensor(grids[zi[0] if zi else 0].tokens.reshape(1, g * g, c).astype(net.dtype))
    f_star, _ = net.cross_attend_tensors(values, key_coords, coords, e_pool, resid)
    return f_star.data.reshape(g, g, c)


def fam_adjust(net: Regnet, level: int, enf: np.ndarray, emap: ExposureMap) -> np.ndarray:
    """Spec-level FAM on one encoder feature map (C,h,w) for a single sample."""
    e = Tensor(emap.values[None, None].astype(net.dtype))
    out = net.fam_adjust_tensors(level, Tensor(enf[None].astype(net.dtype)), e)
    return out.data[0]


def regnet_forward(net: Regnet, stack: ExposureStack):
    """Corrected image Y and exposure map E* for one stack."""
    xs, evs = _stack_tensors(net, stack)
    y, e_star = net(xs, evs)
    return from_chw(y.data[0], SRGB), ExposureMap(e_star.data[0, 0])
