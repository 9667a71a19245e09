"""Evaluation suite: PSNR, SSIM, the PSNR-Var consistency metric, the PI
combination formula, and the dataset-level evaluation report.

Conventions (stated in every summary): PSNR is computed on sRGB-encoded
values in [0,1]; identical images report an ``inf`` sentinel; aggregate
means are taken over finite values only; PSNR-Var uses the population
variance (divide by n) and reports both with and without the 0-EV
rendition.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import DatasetManifest, format_ev, load_scene
from .image import Image
from .megnet import generate_stack_tensors
from .tensor import Tensor


def _pixels(img) -> np.ndarray:
    if isinstance(img, Image):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    """10*log10(1/MSE) for images in [0,1]; +inf when the images match."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"psnr: shape {pa.shape} != {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gauss_kernel(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    return k / k.sum()


def _gauss_filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable Gaussian over the valid region of a 2-d array."""
    a = sliding_window_view(img, len(k), axis=1) @ k
    a = sliding_window_view(a, len(k), axis=0) @ k
    return a


def ssim(a, b) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, L=1, per channel then averaged over channels."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"ssim: shape {pa.shape} != {pb.shape}")
    if pa.ndim == 2:
        pa = pa[:, :, None]
        pb = pb[:, :, None]
    if min(pa.shape[0], pa.shape[1]) < _SSIM_WINDOW:
        raise ValueError(f"ssim: image {pa.shape[0]}x{pa.shape[1]} smaller than "
                         f"the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    k = _gauss_kernel()
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    vals = []
    for c in range(pa.shape[2]):
        x, y = pa[:, :, c], pb[:, :, c]
        mx = _gauss_filter_valid(x, k)
        my = _gauss_filter_valid(y, k)
        mxx = _gauss_filter_valid(x * x, k)
        myy = _gauss_filter_valid(y * y, k)
        mxy = _gauss_filter_valid(x * y, k)
        sx = mxx - mx * mx
        sy = myy - my * my
        sxy = mxy - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        vals.append(float(m.mean()))
    return float(np.mean(vals))


def population_variance(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(((v - v.mean()) ** 2).mean())


def psnr_var(outputs, gt) -> tuple:
    """(mean PSNR, population variance) of outputs of one scene vs gt.

    Requires at least two outputs and no infinite PSNR among them.
    """
    if len(outputs) < 2:
        raise ValueError(f"psnr_var needs >= 2 outputs, got {len(outputs)}")
    vals = [psnr(o, gt) for o in outputs]
    if any(not math.isfinite(v) for v in vals):
        raise ValueError("psnr_var: infinite PSNR among the outputs")
    return float(np.mean(vals)), population_variance(vals)


def perceptual_index(ma_score: float, niqe_score: float) -> float:
    """PI = 0.5 * (10 - Ma + NIQE); lower is better."""
    if not (math.isfinite(ma_score) and math.isfinite(niqe_score)):
        raise ValueError("perceptual_index requires finite inputs")
    return 0.5 * (10.0 - ma_score + niqe_score)


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class EvalRow:
    scene_id: str
    ev: float
    psnr_db: float
    ssim: float
    input_psnr_db: float
    input_ssim: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    # group -> {"corrected": x, "input": y}; groups: under, over, all
    group_psnr: dict = field(default_factory=dict)
    group_ssim: dict = field(default_factory=dict)
    # PSNR-Var dataset means, keyed by variant
    psnr_var: dict = field(default_factory=dict)
    pi_mean: float = None
    inf_counts: dict = field(default_factory=dict)
    summary_text: str = ""


def _finite_mean(vals):
    finite = [v for v in vals if math.isfinite(v)]
    return (float(np.mean(finite)) if finite else math.nan), len(vals) - len(finite)


def _group(ev: float) -> str:
    return "under" if ev < 0 else "over"


def evaluate(manifest: DatasetManifest, mnet, rnet, gen_ev_set=(-1.5, -1.0, 1.0, 1.5),
             out_dir: str = None, pi_csv: str = None, corrector=None) -> EvalReport:
    """Correct every rendition of every scene and score it against gt.

    ``corrector`` overrides the model, mapping a (N,3,H,W) float array plus
    EV list to corrected outputs; ``corrector="identity"`` scores the inputs
    themselves (the improvement floor).
    """
    rows = []
    per_scene_corr = {}
    per_scene_in = {}
    for scene in manifest.scenes:
        rec = load_scene(scene)
        gt = rec.ground_truth.pixels
        evs_in = [ev for ev, _ in rec.renditions]
        batch = np.stack([img.pixels.transpose(2, 0, 1) for _, img in rec.renditions])
        if corrector == "identity":
            outs = batch.copy()
        elif corrector is not None:
            outs = corrector(batch, evs_in)
        else:
            x = Tensor(batch.astype(mnet.dtype))
            evs, stack = generate_stack_tensors(mnet, x, gen_ev_set)
            y, _ = rnet(stack, evs)
            outs = y.data.astype(np.float64)
        corr_psnrs = {}
        in_psnrs = {}
        for i, ev in enumerate(evs_in):
            out_hwc = np.clip(outs[i].transpose(1, 2, 0), 0.0, 1.0)
            in_hwc = batch[i].transpose(1, 2, 0)
            row = EvalRow(
                scene_id=rec.scene_id,
                ev=ev,
                psnr_db=psnr(out_hwc, gt),
                ssim=ssim(out_hwc, gt),
                input_psnr_db=psnr(in_hwc, gt),
                input_ssim=ssim(in_hwc, gt),
            )
            rows.append(row)
            corr_psnrs[ev] = row.psnr_db
            in_psnrs[ev] = row.input_psnr_db
        per_scene_corr[rec.scene_id] = corr_psnrs
        per_scene_in[rec.scene_id] = in_psnrs

    report = EvalReport(rows=rows)
    groups = {"under": [], "over": [], "all": []}
    for row in rows:
        groups[_group(row.ev)].append(row)
        groups["all"].append(row)
    for gname, grows in groups.items():
        cp, cinf = _finite_mean([r.psnr_db for r in grows])
        ip, iinf = _finite_mean([r.input_psnr_db for r in grows])
        report.group_psnr[gname] = {"corrected": cp, "input": ip}
        report.group_ssim[gname] = {
            "corrected": float(np.mean([r.ssim for r in grows])) if grows else math.nan,
            "input": float(np.mean([r.input_ssim for r in grows])) if grows else math.nan,
        }
        report.inf_counts[gname] = {"corrected": cinf, "input": iinf}

    def scene_var(per_scene, exclude_zero):
        vs = []
        for vals in per_scene.values():
            sel = [v for ev, v in vals.items() if not (exclude_zero and ev == 0.0)]
            sel = [v for v in sel if math.isfinite(v)]
            if len(sel) >= 2:
                vs.append(population_variance(sel))
        return float(np.mean(vs)) if vs else math.nan

    report.psnr_var = {
        "corrected_all": scene_var(per_scene_corr, exclude_zero=False),
        "corrected_excl0": scene_var(per_scene_corr, exclude_zero=True),
        "input_excl0": scene_var(per_scene_in, exclude_zero=True),
    }

    if pi_csv is not None:
        if not os.path.exists(pi_csv):
            raise FileNotFoundError(f"PI scores file not found: {pi_csv}")
        pis = []
        with open(pi_csv, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("image,"):
                    continue
                name, ma_s, niqe_s = line.split(",")
                pis.append(perceptual_index(float(ma_s), float(niqe_s)))
        report.pi_mean = float(np.mean(pis)) if pis else None

    report.summary_text = _format_summary(report)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "report.csv"), rows, corrected=True)
        _write_csv(os.path.join(out_dir, "baseline_inputs.csv"), rows, corrected=False)
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
            f.write(report.summary_text)
    return report


def _fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def _write_csv(path: str, rows, corrected: bool) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("scene_id,ev,psnr_db,ssim\n")
        for r in rows:
            p = r.psnr_db if corrected else r.input_psnr_db
            s = r.ssim if corrected else r.input_ssim
            f.write(f"{r.scene_id},{format_ev(r.ev)},{'inf' if math.isinf(p) else f'{p:.6f}'},"
                    f"{s:.6f}\n")


def _format_summary(report: EvalReport) -> str:
    lines = [
        "evaluation summary",
        "  PSNR computed on sRGB-encoded values in [0,1]; 'inf' = exact match.",
        "  Aggregate PSNR means include finite values only (inf counts below).",
        "  PSNR-Var: population variance (divide by n) of per-EV PSNRs, mean over scenes.",
        "  Groups: under-exposed EV<0; over-exposed EV>=0 (0 grouped with over).",
        "",
        f"  {'group':<8}{'n':>6}{'corrected PSNR':>16}{'input PSNR':>13}"
        f"{'corrected SSIM':>16}{'input SSIM':>12}",
    ]
    for g in ("under", "over", "all"):
        grows = [r for r in report.rows if g == "all" or _group(r.ev) == g]
        lines.append(
            f"  {g:<8}{len(grows):>6}{_fmt(report.group_psnr[g]['corrected']):>16}"
            f"{_fmt(report.group_psnr[g]['input']):>13}"
            f"{_fmt(report.group_ssim[g]['corrected']):>16}"
            f"{_fmt(report.group_ssim[g]['input']):>12}")
    ic = report.inf_counts.get("all", {})
    lines += [
        "",
        f"  inf PSNR count: corrected={ic.get('corrected', 0)} input={ic.get('input', 0)}",
        f"  PSNR-Var corrected (all EVs):    {_fmt(report.psnr_var.get('corrected_all'))}",
        f"  PSNR-Var corrected (excl 0 EV):  {_fmt(report.psnr_var.get('corrected_excl0'))}",
        f"  PSNR-Var inputs    (excl 0 EV):  {_fmt(report.psnr_var.get('input_excl0'))}",
    ]
    if report.pi_mean is not None:
        lines.append(f"  mean PI: {_fmt(report.pi_mean)}")
    else:
        lines.append("  PI: omitted (no Ma/NIQE score file supplied)")
    return "\n".join(lines) + "\n"
