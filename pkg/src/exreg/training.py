"""Losses, Adam, and the staged training schedule.

Stages: the generator trains alone on random-EV pairs under L1; the
regressor then trains under the Charbonnier loss with the generator frozen;
finally both are unfrozen and co-trained under the Charbonnier loss.  The
best-validation snapshot (params, moments, step) is what gets checkpointed.
"""

from __future__ import annotations

import dataclasses
import math
import os
import zlib

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .dataset import DatasetManifest, PatchSampler, load_scene
from .megnet import Megnet, generate_stack_tensors
from .metrics import psnr
from .regnet import Regnet
from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def _check_same_shape(out: Tensor, target: Tensor, name: str) -> None:
    if out.shape != target.shape:
        raise T.ShapeError(f"{name}: shape {out.shape} != target {target.shape}")


def l1_loss(out: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    _check_same_shape(out, target, "l1_loss")
    return T.mean(T.abs_(T.sub(out, target)))


def charbonnier_loss(out: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """Mean of sqrt((out-target)^2 + eps^2); equals eps at zero residual."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    _check_same_shape(out, target, "charbonnier_loss")
    d = T.sub(out, target)
    return T.mean(T.sqrt(T.add(T.mul(d, d), eps * eps)))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        out = {f"opt/m/{k}": v.copy() for k, v in self.m.items()}
        out.update({f"opt/v/{k}": v.copy() for k, v in self.v.items()})
        return out


def adam_step(params: dict, state: Adam) -> None:
    """One optimizer step (grads must already be populated)."""
    state.step()


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# train/val split and validation metrics


def split_scene_ids(manifest: DatasetManifest, val_fraction: float):
    """Deterministic id-hash split, stable across runs and processes."""
    train, val = [], []
    cut = int(round(val_fraction * 100))
    for sid in manifest.scene_ids():
        bucket = zlib.crc32(sid.encode("utf-8")) % 100
        (val if bucket < cut else train).append(sid)
    if not train:
        train, val = val, []
    return train, val


def _scene_arrays(manifest: DatasetManifest, scene_ids, dtype):
    scenes = []
    by_id = {s.scene_id: s for s in manifest.scenes}
    for sid in scene_ids:
        rec = load_scene(by_id[sid])
        gt = rec.ground_truth.pixels.transpose(2, 0, 1).astype(dtype)
        rends = [(ev, img.pixels.transpose(2, 0, 1).astype(dtype)) for ev, img in rec.renditions]
        scenes.append((sid, gt, rends))
    return scenes


def validate_megnet(net: Megnet, scenes, deltas) -> float:
    """Mean PSNR of generating each rendition from the 0-EV input."""
    vals = []
    for _, gt, rends in scenes:
        evs = [ev for ev, _ in rends]
        targets = {ev: img for ev, img in rends}
        gen_evs = [d for d in deltas if d in evs and d != 0.0]
        x = Tensor(np.repeat(gt[None], len(gen_evs) + 1, axis=0))
        dev = np.array(gen_evs + [0.0], dtype=net.dtype)
        y = net(x, dev).data
        for i, ev in enumerate(gen_evs):
            vals.append(psnr(y[i].transpose(1, 2, 0), targets[ev].transpose(1, 2, 0)))
        vals.append(psnr(y[-1].transpose(1, 2, 0), gt.transpose(1, 2, 0)))
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


def validate_exreg(mnet: Megnet, rnet: Regnet, scenes, gen_ev_set) -> float:
    """Mean corrected-vs-gt PSNR over every rendition of each scene."""
    vals = []
    for _, gt, rends in scenes:
        x = Tensor(np.stack([img for _, img in rends]))
        evs, stack = generate_stack_tensors(mnet, x, gen_ev_set)
        y, _ = rnet(stack, evs)
        for i in range(y.shape[0]):
            vals.append(psnr(y.data[i].transpose(1, 2, 0), gt.transpose(1, 2, 0)))
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


# ---------------------------------------------------------------------------
# the training loop


def build_nets(cfg: TrainConfig, stack_size: int = None):
    """Fresh seeded networks at the config's scale profile."""
    prof = cfg.scale_profile()
    dtype = cfg.dtype()
    ss = np.random.SeedSequence(cfg.seed)
    rng_m = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=ss.entropy, spawn_key=(1,))))
    rng_r = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=ss.entropy, spawn_key=(2,))))
    n_stack = stack_size if stack_size is not None else len(cfg.gen_ev_set) + 1
    mnet = Megnet(prof.megnet_config(), rng_m, dtype=dtype)
    rnet = Regnet(prof.regnet_config(stack_size=n_stack), rng_r, dtype=dtype)
    return mnet, rnet


def train(cfg: TrainConfig, manifest: DatasetManifest, out_dir: str,
          init_checkpoint: Checkpoint = None, log_print=None) -> Checkpoint:
    """Run one stage and write ``checkpoint.exrg`` + ``train_log.csv``.

    regnet/cotrain require an ``init_checkpoint`` carrying a trained megnet
    section (cotrain additionally a regnet section).
    """
    os.makedirs(out_dir, exist_ok=True)
    dtype = cfg.dtype()
    mnet, rnet = build_nets(cfg)

    if cfg.stage in ("regnet", "cotrain"):
        if init_checkpoint is None or not init_checkpoint.has_section("megnet"):
            raise TrainingError(f"stage {cfg.stage} requires a checkpoint with a megnet section")
        nn.load_into(mnet.params(), init_checkpoint.arrays, "megnet")
        if cfg.stage == "cotrain":
            if not init_checkpoint.has_section("regnet"):
                raise TrainingError("stage cotrain requires a checkpoint with a regnet section")
            nn.load_into(rnet.params(), init_checkpoint.arrays, "regnet")

    m_params = mnet.params()
    r_params = rnet.params()
    if cfg.stage == "megnet":
        trainable = m_params
        nn.set_trainable(r_params, False)
    elif cfg.stage == "regnet":
        trainable = r_params
        nn.set_trainable(m_params, False)  # frozen: bytes must not change
    else:
        trainable = nn.merge_params(
            {f"megnet:{k}": v for k, v in m_params.items()},
            {f"regnet:{k}": v for k, v in r_params.items()})
    nn.set_trainable(trainable, True)

    ss = np.random.SeedSequence(cfg.seed)
    sampler_seed = np.random.SeedSequence(entropy=ss.entropy, spawn_key=(3,))
    train_ids, val_ids = split_scene_ids(manifest, cfg.val_fraction)
    mode = "megnet" if cfg.stage == "megnet" else "regnet"
    sampler = PatchSampler(manifest, cfg.patch_size, sampler_seed, mode=mode,
                           delta_set=cfg.delta_set, scene_ids=train_ids)

    if cfg.steps_per_epoch:
        steps_per_epoch = cfg.steps_per_epoch
    elif cfg.stage == "megnet":
        n_images = sum(len(s[1]) for s in sampler.scenes)
        steps_per_epoch = max(1, math.ceil(n_images / cfg.batch_size))
    else:
        steps_per_epoch = max(1, math.ceil(len(sampler.scenes) / cfg.batch_size))
    val_every = cfg.val_every or max(1, cfg.epochs // 10)

    val_scenes = _scene_arrays(manifest, val_ids or train_ids[:2], dtype)
    opt = Adam(trainable, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def run_validation():
        if cfg.stage == "megnet":
            return validate_megnet(mnet, val_scenes, cfg.delta_set)
        return validate_exreg(mnet, rnet, val_scenes, cfg.gen_ev_set)

    log_rows = [("step", "stage", "loss", "val_psnr")]
    best = None  # (val_psnr, params, moments, step)
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            xs, ys, ds = sampler.sample(cfg.batch_size)
            x = Tensor(xs.astype(dtype))
            y_t = Tensor(ys.astype(dtype))
            with T.Tape() as tape:
                if cfg.stage == "megnet":
                    out = mnet(x, ds)
                    loss = l1_loss(out, y_t)
                else:
                    evs, stack = generate_stack_tensors(mnet, x, cfg.gen_ev_set)
                    out, _ = rnet(stack, evs)
                    loss = charbonnier_loss(out, y_t, cfg.charbonnier_epsilon)
            lval = loss.item()
            if not math.isfinite(lval):
                raise TrainingError(f"non-finite loss at step {step}")
            tape.backward(loss)
            clip_global_norm(trainable, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            epoch_loss += lval
            step += 1

        mean_loss = epoch_loss / steps_per_epoch
        val_psnr = ""
        if (epoch + 1) % val_every == 0 or epoch == cfg.epochs - 1:
            vp = run_validation()
            val_psnr = f"{vp:.4f}"
            if best is None or vp > best[0]:
                best = (vp,
                        {k: p.data.copy() for k, p in trainable.items()},
                        ({k: m.copy() for k, m in opt.m.items()},
                         {k: v.copy() for k, v in opt.v.items()}, opt.t),
                        step)
        log_rows.append((str(step), cfg.stage, f"{mean_loss:.6f}", val_psnr))
        if log_print:
            log_print(f"epoch {epoch + 1}/{cfg.epochs} step {step} "
                      f"loss {mean_loss:.6f} val {val_psnr or '-'}")

    if best is not None:
        for k, arr in best[1].items():
            trainable[k].data = arr
        best_m, best_v, best_t = best[2]
        opt.m, opt.v, opt.t = best_m, best_v, best_t
        best_step = best[3]
        best_val = best[0]
    else:
        best_step = step
        best_val = float("nan")

    arrays = {}
    arrays.update(nn.dump_params(m_params, "megnet"))
    if cfg.stage != "megnet":
        arrays.update(nn.dump_params(r_params, "regnet"))
    arrays.update(opt.state_arrays())
    meta = {
        "format": 1,
        "stage": cfg.stage,
        "step": best_step,
        "best_val_psnr": best_val if math.isfinite(best_val) else None,
        "stack_size": rnet.cfg.stack_size,
        "config": dataclasses.asdict(cfg),
    }
    # asdict keeps tuples; make them JSON-stable lists
    meta["config"]["gen_ev_set"] = list(cfg.gen_ev_set)
    meta["config"]["delta_set"] = list(cfg.delta_set)
    ckpt = Checkpoint(arrays=arrays, meta=meta)
    save_checkpoint(os.path.join(out_dir, "checkpoint.exrg"), ckpt)
    with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(",".join(r) for r in log_rows) + "\n")
    return ckpt


def nets_from_checkpoint(ckpt: Checkpoint, precision: str = "f32"):
    """Rebuild megnet (+ regnet when present) from a checkpoint snapshot."""
    cfg_dict = dict(ckpt.meta.get("config", {}))
    cfg_dict.setdefault("stage", "megnet")
    cfg_dict["precision"] = precision
    cfg_dict["gen_ev_set"] = tuple(cfg_dict.get("gen_ev_set", (-1.5, -1.0, 1.0, 1.5)))
    cfg_dict["delta_set"] = tuple(cfg_dict.get("delta_set", (-1.5, -1.0, 0.0, 1.0, 1.5)))
    cfg = TrainConfig(**cfg_dict)
    stack_size = int(ckpt.meta.get("stack_size", len(cfg.gen_ev_set) + 1))
    mnet, rnet = build_nets(cfg, stack_size=stack_size)
    nn.load_into(mnet.params(), ckpt.arrays, "megnet")
    has_regnet = ckpt.has_section("regnet")
    if has_regnet:
        nn.load_into(rnet.params(), ckpt.arrays, "regnet")
    return mnet, (rnet if has_regnet else None), cfg
