"""Synthetic paired-exposure dataset: procedural linear scenes rendered at a
set of relative EVs, a line-oriented manifest, and deterministic patch
sampling for training.

Each scene is a latent linear-space image (smooth gradients, random shapes,
and a spatially varying illumination field so the locally correct exposure
differs by region).  The ground truth is the scene rendered at 0 EV;
renditions span the configured EV offsets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .image import Image, LINEAR, load_png, render_ev, save_png

CANONICAL_DELTAS = (-1.5, -1.0, 0.0, 1.0, 1.5)
DEFAULT_EV_SET = (-1.5, -1.0, 0.0, 1.0, 1.5)

GT_ROLE = "gt"
EV_ROLE = "ev"


def format_ev(ev: float) -> str:
    return f"{float(ev):g}"


@dataclass
class SceneFiles:
    scene_id: str
    gt_path: str
    renditions: list = field(default_factory=list)  # [(relative_ev, path)] ascending


@dataclass
class SceneRecord:
    scene_id: str
    ground_truth: Image
    renditions: list  # [(relative_ev, Image)]


@dataclass
class DatasetManifest:
    root: str
    split: str
    scenes: list  # list[SceneFiles], sorted by scene_id

    def scene_ids(self):
        return [s.scene_id for s in self.scenes]


def manifest_path(root: str) -> str:
    return os.path.join(root, "manifest.txt")


def save_manifest(manifest: DatasetManifest) -> str:
    path = manifest_path(manifest.root)
    lines = []
    for scene in sorted(manifest.scenes, key=lambda s: s.scene_id):
        rel_gt = os.path.relpath(scene.gt_path, manifest.root)
        lines.append(f"{scene.scene_id}\t{GT_ROLE}\t{format_ev(0.0)}\t{rel_gt}")
        for ev, p in sorted(scene.renditions, key=lambda t: t[0]):
            rel = os.path.relpath(p, manifest.root)
            lines.append(f"{scene.scene_id}\t{EV_ROLE}\t{format_ev(ev)}\t{rel}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def load_manifest(root: str, split: str = None) -> DatasetManifest:
    path = manifest_path(root)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    if split is None:
        split = os.path.basename(os.path.normpath(root))
        if split not in ("train", "test"):
            split = "train"
    scenes = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            scene_id, role, ev_s, rel = parts
            full = os.path.join(root, rel)
            if not os.path.exists(full):
                raise FileNotFoundError(f"{path}:{lineno}: missing image file {full}")
            entry = scenes.setdefault(scene_id, SceneFiles(scene_id, gt_path="", renditions=[]))
            if role == GT_ROLE:
                entry.gt_path = full
            elif role == EV_ROLE:
                ev = float(ev_s)
                if any(e == ev for e, _ in entry.renditions):
                    raise ValueError(f"{path}:{lineno}: duplicate EV {ev_s} for scene {scene_id}")
                entry.renditions.append((ev, full))
            else:
                raise ValueError(f"{path}:{lineno}: unknown role {role!r}")
    ordered = []
    for sid in sorted(scenes):
        s = scenes[sid]
        if not s.gt_path:
            raise ValueError(f"scene {sid} has no ground-truth entry")
        s.renditions.sort(key=lambda t: t[0])
        ordered.append(s)
    return DatasetManifest(root=root, split=split, scenes=ordered)


def load_scene(scene: SceneFiles) -> SceneRecord:
    gt = load_png(scene.gt_path)
    rends = [(ev, load_png(p)) for ev, p in scene.renditions]
    return SceneRecord(scene.scene_id, gt, rends)


# ---------------------------------------------------------------------------
# procedural scene synthesis


def _smooth_field(rng: np.random.Generator, size: int, grid_lo: int, grid_hi: int) -> np.ndarray:
    """Low-frequency random field in roughly [-1,1]."""
    g = int(rng.integers(grid_lo, grid_hi + 1))
    coarse = rng.standard_normal((g, g))
    f = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def make_latent_scene(rng: np.random.Generator, size: int) -> Image:
    """Procedural linear-space scene with region-dependent illumination."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)

    # Reflectance: a shared smooth base with per-channel tints plus flat shapes.
    base = 0.5 * (_smooth_field(rng, size, 2, 4) + 1.0)
    albedo = np.empty((size, size, 3))
    for c in range(3):
        tint = 0.55 + 0.4 * rng.random()
        wobble = 0.15 * _smooth_field(rng, size, 2, 3)
        albedo[:, :, c] = np.clip(base * tint + wobble + 0.15, 0.02, 1.0)

    n_shapes = int(rng.integers(3, 8))
    for _ in range(n_shapes):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.05, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hh, ww = rng.uniform(0.05, 0.3, size=2)
            mask = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < ww)
        blend = rng.uniform(0.6, 1.0)
        albedo[mask] = (1 - blend) * albedo[mask] + blend * color

    k = max(3, (size // 21) | 1)
    albedo = cv2.GaussianBlur(albedo, (k, k), 0)

    # Illumination in stops: different regions want different corrections.
    span = rng.uniform(0.5, 1.2)
    illum = 2.0 ** (span * _smooth_field(rng, size, 2, 5))

    lin = albedo * illum[:, :, None]
    target_mean = rng.uniform(0.16, 0.30)
    lin *= target_mean / max(lin.mean(), 1e-9)
    return Image(np.clip(lin, 0.0, 1.0), LINEAR)


def synthesize_dataset(out_root: str, n_scenes: int, image_size: int, seed: int,
                       ev_set=DEFAULT_EV_SET, split: str = "train",
                       start_index: int = 0, bitdepth: int = 8) -> DatasetManifest:
    """Generate ``n_scenes`` scenes under ``out_root`` and write the manifest.

    Deterministic in ``seed``: the same call produces byte-identical images
    and manifest.  ``start_index`` offsets scene ids so train/test splits
    stay disjoint.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    evs = sorted(set(float(e) for e in ev_set))
    os.makedirs(out_root, exist_ok=True)

    scenes = []
    root_ss = np.random.SeedSequence(seed)
    for i in range(n_scenes):
        idx = start_index + i
        scene_id = f"scene_{idx:05d}"
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            entropy=root_ss.entropy, spawn_key=(idx,))))
        latent = make_latent_scene(rng, image_size)

        gt = render_ev(latent, 0.0)
        gt_path = os.path.join(out_root, f"{scene_id}_gt.png")
        save_png(gt_path, gt, bitdepth=bitdepth)

        rends = []
        for ev in evs:
            img = render_ev(latent, ev)
            p = os.path.join(out_root, f"{scene_id}_ev{format_ev(ev)}.png")
            save_png(p, img, bitdepth=bitdepth)
            rends.append((ev, p))
        scenes.append(SceneFiles(scene_id, gt_path, rends))

    manifest = DatasetManifest(root=out_root, split=split, scenes=scenes)
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# patch sampling


class PatchSampler:
    """Deterministic co-located patch batches from an in-memory dataset.

    mode "megnet": (input patch at EV e, target patch at e+delta, delta) with
    delta drawn from ``delta_set`` restricted to pairs present in the scene.
    mode "regnet": (input patch at a random EV, ground-truth patch, -EV).
    """

    def __init__(self, manifest: DatasetManifest, patch_size: int, seed,
                 mode: str = "megnet", delta_set=CANONICAL_DELTAS, scene_ids=None):
        if mode not in ("megnet", "regnet"):
            raise ValueError(f"unknown sampler mode {mode!r}")
        if not manifest.scenes:
            raise ValueError("empty manifest")
        self.mode = mode
        self.patch = patch_size
        self.deltas = tuple(float(d) for d in delta_set)
        self.rng = np.random.default_rng(seed)

        keep = set(scene_ids) if scene_ids is not None else None
        self.scenes = []
        for scene in manifest.scenes:
            if keep is not None and scene.scene_id not in keep:
                continue
            rec = load_scene(scene)
            size = rec.ground_truth.height
            if patch_size > size or patch_size > rec.ground_truth.width:
                raise ValueError(f"patch_size {patch_size} exceeds image size {size}")
            evs = [ev for ev, _ in rec.renditions]
            imgs = {ev: img.pixels.transpose(2, 0, 1).astype(np.float32) for ev, img in rec.renditions}
            gt = rec.ground_truth.pixels.transpose(2, 0, 1).astype(np.float32)
            self.scenes.append((rec.scene_id, evs, imgs, gt))
        if not self.scenes:
            raise ValueError("no scenes left after filtering")
        # Valid (input_ev, delta) pairs per scene, flattened per delta.
        self._pairs = []
        for _, evs, _, _ in self.scenes:
            evset = set(evs)
            by_delta = {d: [e for e in evs if e + d in evset] for d in self.deltas}
            self._pairs.append(by_delta)

    def sample(self, batch: int):
        p = self.patch
        xs = np.empty((batch, 3, p, p), dtype=np.float32)
        ys = np.empty((batch, 3, p, p), dtype=np.float32)
        ds = np.empty(batch, dtype=np.float64)
        for b in range(batch):
            si = int(self.rng.integers(0, len(self.scenes)))
            _, evs, imgs, gt = self.scenes[si]
            h = imgs[evs[0]].shape[1]
            w = imgs[evs[0]].shape[2]
            top = int(self.rng.integers(0, h - p + 1))
            left = int(self.rng.integers(0, w - p + 1))
            if self.mode == "megnet":
                while True:
                    d = self.deltas[int(self.rng.integers(0, len(self.deltas)))]
                    valid = self._pairs[si][d]
                    if valid:
                        break
                e_in = valid[int(self.rng.integers(0, len(valid)))]
                src = imgs[e_in]
                tgt = imgs[e_in + d]
                ds[b] = d
            else:
                e_in = evs[int(self.rng.integers(0, len(evs)))]
                src = imgs[e_in]
                tgt = gt
                ds[b] = -e_in
            xs[b] = src[:, top:top + p, left:left + p]
            ys[b] = tgt[:, top:top + p, left:left + p]
        return xs, ys, ds


def sample_patch_pairs(manifest: DatasetManifest, patch_size: int, batch: int, seed,
                       mode: str = "megnet", delta_set=CANONICAL_DELTAS):
    """One-shot batch draw (see ``PatchSampler``)."""
    return PatchSampler(manifest, patch_size, seed, mode=mode, delta_set=delta_set).sample(batch)
