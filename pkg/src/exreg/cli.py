"""Command-line entry point: dataset synthesis, training, correction,
generation, evaluation, gradcheck, and a fast selftest.

Every subcommand echoes its fully resolved configuration (defaults <
config file < flags) so a run can be replayed from its log.
"""

from __future__ import annotations

import os
import sys


def _peek_threads(argv) -> str:
    t = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            t = argv[i + 1]
        elif a.startswith("--threads="):
            t = a.split("=", 1)[1]
    if t is None:
        t = os.environ.get("EXREG_THREADS", "1")
    return t


# BLAS pools must be sized before numpy loads; --threads 0 leaves the
# library default (all cores).
_THREADS = _peek_threads(sys.argv[1:])
if _THREADS != "0":
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import dataclasses

import numpy as np

from . import config as cfgmod
from . import dataset as ds
from .checkpoint import CheckpointError, load_checkpoint
from .image import load_png, resize_image, save_gray16_png, save_png
from .megnet import generate_stack, megnet_forward
from .metrics import evaluate as run_evaluate
from .regnet import EV_LIMIT, regnet_forward
from .tensor import ShapeError
from .training import TrainingError, nets_from_checkpoint, train as run_train

USER_ERRORS = (ValueError, KeyError, FileNotFoundError, OSError, ShapeError,
               CheckpointError, TrainingError)


def _echo_config(args_dict, out_path=None):
    lines = ["# resolved config"]
    for k in sorted(args_dict):
        lines.append(f"{k} = {args_dict[k]}")
    text = "\n".join(lines)
    print(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text + "\n")


def _parse_ev_list(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def cmd_make_dataset(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    ev_set = _parse_ev_list(args.ev_set)
    _echo_config({
        "subcommand": "make-dataset", "scenes": args.scenes, "test_scenes": args.test_scenes,
        "size": args.size, "seed": args.seed, "out": args.out,
        "ev_set": args.ev_set, "bitdepth": args.bitdepth,
    }, os.path.join(args.out, "config_resolved.txt"))
    ds.synthesize_dataset(os.path.join(args.out, "train"), args.scenes, args.size,
                          seed=args.seed, ev_set=ev_set, split="train", bitdepth=args.bitdepth)
    print(f"wrote train split: {args.scenes} scenes")
    if args.test_scenes > 0:
        ds.synthesize_dataset(os.path.join(args.out, "test"), args.test_scenes, args.size,
                              seed=args.seed, ev_set=ev_set, split="test",
                              start_index=args.scenes, bitdepth=args.bitdepth)
        print(f"wrote test split: {args.test_scenes} scenes")
    return 0


def cmd_train(args) -> int:
    stage_defaults = cfgmod.default_train_config(args.stage)
    overrides = {}
    if args.config:
        overrides.update(cfgmod.parse_config_file(args.config))
    for kv in args.set or []:
        if "=" not in kv:
            raise ValueError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("patch_size", "patch_size"), ("lr", "learning_rate"),
                      ("seed", "seed"), ("profile", "profile"),
                      ("precision", "precision")):
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = str(v)
    cfg = cfgmod.apply_overrides(stage_defaults, overrides)

    os.makedirs(args.out, exist_ok=True)
    _echo_config({f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)},
                 os.path.join(args.out, "config_resolved.txt"))
    manifest = ds.load_manifest(args.data)
    init = load_checkpoint(args.init) if args.init else None
    ckpt = run_train(cfg, manifest, args.out, init_checkpoint=init, log_print=print)
    best = ckpt.meta.get("best_val_psnr")
    print(f"stage {cfg.stage} done; best val PSNR "
          f"{best if best is not None else 'n/a'}; checkpoint at "
          f"{os.path.join(args.out, 'checkpoint.exrg')}")
    return 0


def _load_nets(ckpt_path, need_regnet=False):
    ckpt = load_checkpoint(ckpt_path)
    mnet, rnet, cfg = nets_from_checkpoint(ckpt)
    if need_regnet and rnet is None:
        raise ValueError(f"checkpoint {ckpt_path} has no regnet section; "
                         "train the regnet or cotrain stage first")
    return ckpt, mnet, rnet, cfg


def _pad16(img):
    h = max(16, round(img.height / 16) * 16)
    w = max(16, round(img.width / 16) * 16)
    if (h, w) == (img.height, img.width):
        return img, None
    return resize_image(img, h, w), (img.height, img.width)


def cmd_correct(args) -> int:
    _echo_config({"subcommand": "correct", "ckpt": args.ckpt, "in": args.input,
                  "out": args.output, "dump_exposure_map": args.dump_exposure_map})
    ckpt, mnet, rnet, cfg = _load_nets(args.ckpt, need_regnet=True)
    img = load_png(args.input)
    work, orig_size = _pad16(img)
    stack = generate_stack(mnet, work, cfg.gen_ev_set)
    out, emap = regnet_forward(rnet, stack)
    if orig_size is not None:
        out = resize_image(out, *orig_size)
    save_png(args.output, out)
    print(f"corrected image written to {args.output}")
    if args.dump_exposure_map:
        save_gray16_png(args.dump_exposure_map, emap.values, -EV_LIMIT, EV_LIMIT)
        print(f"exposure map written to {args.dump_exposure_map}")
    return 0


def cmd_generate(args) -> int:
    _echo_config({"subcommand": "generate", "ckpt": args.ckpt, "in": args.input,
                  "out": args.output, "ev": args.ev})
    ckpt, mnet, _, _ = _load_nets(args.ckpt)
    img = load_png(args.input)
    out = megnet_forward(mnet, img, args.ev)
    save_png(args.output, out)
    print(f"generated image at {args.ev:+g} EV written to {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    _echo_config({"subcommand": "evaluate", "data": args.data, "ckpt": args.ckpt,
                  "out": args.out, "ev_set": args.ev_set, "pi_scores": args.pi_scores})
    ckpt, mnet, rnet, cfg = _load_nets(args.ckpt, need_regnet=True)
    manifest = ds.load_manifest(args.data)
    ev_set = _parse_ev_list(args.ev_set) if args.ev_set else cfg.gen_ev_set
    report = run_evaluate(manifest, mnet, rnet, gen_ev_set=ev_set, out_dir=args.out,
                          pi_csv=args.pi_scores)
    print(report.summary_text)
    print(f"report written under {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all, run_network_checks, run_op_checks

    _echo_config({"subcommand": "gradcheck", "seed": args.seed, "fast": args.fast})
    if args.fast:
        results = run_op_checks(args.seed, names={"conv2d", "matmul_2d", "softmax",
                                                  "layer_norm", "transposed_conv2d"})
        results += run_network_checks(args.seed)
    else:
        results = run_all(args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 2


def cmd_selftest(args) -> int:
    import tempfile

    from . import tensor as T
    from .gradcheck import check_megnet, run_op_checks
    from .metrics import perceptual_index, psnr
    from .tensor import Tensor
    from .training import charbonnier_loss

    _echo_config({"subcommand": "selftest"})
    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"ok   {name}")
        except Exception as e:  # noqa: BLE001 - report and count any failure
            failures.append(name)
            print(f"FAIL {name}: {e}")

    def conv_identity():
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        x = np.random.default_rng(0).random((1, 3, 5, 5))
        y = T.conv2d(Tensor(x), Tensor(w))
        assert np.abs(y.data - x).max() < 1e-12

    check("conv2d identity kernel", conv_identity)
    check("softmax symmetry", lambda: np.testing.assert_allclose(
        T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data, [1 / 3] * 3, atol=1e-12))
    check("psnr closed form", lambda: np.testing.assert_allclose(
        psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)), 20.0, atol=1e-9))
    check("charbonnier at zero residual", lambda: np.testing.assert_allclose(
        charbonnier_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).item(),
        1e-3, atol=1e-15))
    check("perceptual index formula", lambda: np.testing.assert_allclose(
        perceptual_index(8.0, 4.0), 3.0, atol=1e-15))

    def quick_gradcheck():
        rs = run_op_checks(0, names={"conv2d", "softmax", "layer_norm"})
        rs.append(check_megnet(0))
        assert all(r.passed for r in rs), [r.name for r in rs if not r.passed]

    check("gradcheck subset", quick_gradcheck)

    def tiny_pipeline():
        from .checkpoint import load_checkpoint as load_ck
        from .training import train as train_fn

        with tempfile.TemporaryDirectory() as td:
            man = ds.synthesize_dataset(os.path.join(td, "train"), 2, 16, seed=5)
            cfg = cfgmod.TrainConfig(stage="megnet", batch_size=2, patch_size=16,
                                     epochs=1, seed=5, val_fraction=0.5)
            ck = train_fn(cfg, man, os.path.join(td, "run"))
            loaded = load_ck(os.path.join(td, "run", "checkpoint.exrg"))
            assert sorted(loaded.arrays) == sorted(ck.arrays)

    check("tiny train + checkpoint round trip", tiny_pipeline)

    print(f"selftest: {5 + 2 - len(failures)}/7 passed")
    return 0 if not failures else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exreg",
                                 description="Exposure correction by multi-dimensional regression")
    ap.add_argument("--threads", default=None,
                    help="BLAS worker threads (default 1; 0 = library default); "
                         "see also EXREG_THREADS")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("make-dataset", help="synthesize a paired-exposure dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--test-scenes", type=int, default=0)
    p.add_argument("--ev-set", default="-1.5 -1 0 1 1.5")
    p.add_argument("--bitdepth", type=int, default=8, choices=(8, 16))
    p.set_defaults(fn=cmd_make_dataset)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=("megnet", "regnet", "cotrain"))
    p.add_argument("--data", required=True, help="dataset root containing manifest.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="checkpoint to initialize from")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any train-config field")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--patch-size", type=int, default=None, dest="patch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--profile", default=None, choices=sorted(cfgmod.PROFILES))
    p.add_argument("--precision", default=None, choices=("f32", "f64"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("correct", help="correct the exposure of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, dest="input")
    p.add_argument("--out", required=True, dest="output")
    p.add_argument("--dump-exposure-map", default=None,
                   help="write E* as 16-bit grayscale PNG mapped from [-1.5,1.5]")
    p.set_defaults(fn=cmd_correct)

    p = sub.add_parser("generate", help="run the generator alone at a given EV offset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, dest="input")
    p.add_argument("--out", required=True, dest="output")
    p.add_argument("--ev", type=float, required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ev-set", default=None, help="generator EV offsets (default: from checkpoint)")
    p.add_argument("--pi-scores", default=None, help="CSV image,ma,niqe for PI aggregation")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fast", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", help="fast build sanity check")
    p.set_defaults(fn=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - internal failure
        import traceback

        traceback.print_exc()
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
