"""Finite-difference validation of every tensor op and of full-network
micro-forwards.

All checks run in float64 with central differences (h = 1e-5) and the
elementwise criterion |g_tape - g_fd| / (|g_fd| + 1e-8) < tol.  Network
checks randomize all parameters first: zero-initialized identity heads
would otherwise leave structurally zero gradients upstream, which say
nothing about the correctness of the backward rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import MICRO
from .megnet import Megnet, generate_stack_tensors, modulate
from .regnet import Regnet
from .tensor import Tensor

FD_STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:<24s} max rel err {self.max_rel_err:.3e} ({self.n_coords} coords)"


def _rel_err(g_tape: np.ndarray, g_fd: np.ndarray) -> float:
    return float((np.abs(g_tape - g_fd) / (np.abs(g_fd) + 1e-8)).max())


def _fd_full(fn, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def check_op(name, make_inputs, fn, rng, n_instances=3, tol=TOL) -> CheckResult:
    """Full elementwise FD vs tape gradients on random small instances."""
    worst = 0.0
    coords = 0
    for _ in range(n_instances):
        xs = make_inputs(rng)
        ts = [Tensor(x, requires_grad=True) for x in xs]
        probe = {}

        def scalar_of(out):
            if "p" not in probe:
                probe["p"] = rng.standard_normal(out.shape)
            return float(np.sum(out.data * probe["p"]))

        with T.Tape() as tape:
            out = fn(*ts)
            loss = T.sum_(T.mul(out, Tensor(probe.setdefault("p", rng.standard_normal(out.shape)))))
        tape.backward(loss)
        for j, (x, t) in enumerate(zip(xs, ts)):
            def f(xx, j=j):
                ys = [a.copy() for a in xs]
                ys[j] = xx
                return scalar_of(fn(*[Tensor(a) for a in ys]))

            gfd = _fd_full(f, x)
            worst = max(worst, _rel_err(t.grad, gfd))
            coords += x.size
    return CheckResult(name, worst, coords, tol)


def _sn(rng, *shape):
    return rng.standard_normal(shape)


# Every registered op, with shapes small enough for full elementwise FD.
OP_CHECKS = [
    ("add", lambda r: [_sn(r, 3, 4), _sn(r, 3, 4)], T.add),
    ("add_broadcast", lambda r: [_sn(r, 2, 3, 4, 4), _sn(r, 1, 3, 1, 1)], T.add),
    ("sub", lambda r: [_sn(r, 3, 4), _sn(r, 1, 4)], T.sub),
    ("mul", lambda r: [_sn(r, 3, 4), _sn(r, 3, 4)], T.mul),
    ("neg", lambda r: [_sn(r, 3, 4)], T.neg),
    ("relu", lambda r: [_sn(r, 4, 5) + 0.05], T.relu),
    ("sigmoid", lambda r: [_sn(r, 3, 4)], T.sigmoid),
    ("tanh", lambda r: [_sn(r, 3, 4)], T.tanh),
    ("sqrt", lambda r: [r.random((3, 4)) + 0.5], T.sqrt),
    ("abs", lambda r: [_sn(r, 3, 4) + 0.1], T.abs_),
    ("sum", lambda r: [_sn(r, 2, 3, 4)], lambda x: T.sum_(x, axis=(0, 2))),
    ("mean", lambda r: [_sn(r, 2, 3, 4)], lambda x: T.mean(x, axis=1)),
    ("mean_all", lambda r: [_sn(r, 3, 4)], T.mean),
    ("reshape", lambda r: [_sn(r, 2, 6)], lambda x: T.reshape(x, (3, 4))),
    ("transpose", lambda r: [_sn(r, 2, 3, 4)], lambda x: T.transpose(x, (2, 0, 1))),
    ("narrow", lambda r: [_sn(r, 3, 6)], lambda x: T.narrow(x, 1, 2, 3)),
    ("concat", lambda r: [_sn(r, 2, 3), _sn(r, 2, 2)], lambda a, b: T.concat([a, b], axis=1)),
    ("matmul_2d", lambda r: [_sn(r, 3, 4), _sn(r, 4, 5)], T.matmul),
    ("matmul_3d", lambda r: [_sn(r, 2, 3, 4), _sn(r, 2, 4, 5)], T.matmul),
    ("softmax", lambda r: [_sn(r, 3, 5)], lambda x: T.softmax(x, axis=1)),
    ("layer_norm", lambda r: [_sn(r, 4, 6)], T.layer_norm),
    ("conv2d", lambda r: [_sn(r, 2, 3, 6, 6), _sn(r, 4, 3, 3, 3), _sn(r, 4)],
     lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1)),
    ("conv2d_stride2", lambda r: [_sn(r, 1, 2, 6, 6), _sn(r, 3, 2, 4, 4), _sn(r, 3)],
     lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1)),
    ("transposed_conv2d", lambda r: [_sn(r, 1, 3, 3, 3), _sn(r, 3, 2, 4, 4), _sn(r, 2)],
     lambda x, w, b: T.transposed_conv2d(x, w, b, stride=2, padding=1)),
    ("avg_pool2d", lambda r: [_sn(r, 2, 3, 6, 6)], lambda x: T.avg_pool2d(x, 2)),
    ("bilinear_resize_up", lambda r: [_sn(r, 2, 2, 4, 4)], lambda x: T.bilinear_resize(x, 7, 5)),
    ("bilinear_resize_down", lambda r: [_sn(r, 1, 2, 8, 8)], lambda x: T.bilinear_resize(x, 3, 3)),
    ("modulate", lambda r: [_sn(r, 2, 4, 3, 3), _sn(r, 2, 4), _sn(r, 2, 4)], modulate),
]


def run_op_checks(seed: int = 0, tol: float = TOL, names=None):
    rng = np.random.default_rng(seed)
    results = []
    for name, make, fn in OP_CHECKS:
        if names is not None and name not in names:
            continue
        results.append(check_op(name, make, fn, rng, tol=tol))
    return results


# ---------------------------------------------------------------------------
# whole-network micro checks


def _randomize_params(params: dict, rng: np.random.Generator, scale=0.3) -> None:
    for p in params.values():
        p.data = rng.uniform(-scale, scale, size=p.shape)


def _network_check(name, params: dict, inputs: list, forward, rng,
                   coords_per_param=2, input_coords=6, tol=TOL) -> CheckResult:
    """FD over sampled parameter/input coordinates vs one tape backward.

    Central-difference roundoff noise is about |loss|*1e-15/h, so tiny
    gradients need a larger step to be certified at 1e-4 relative
    tolerance; the step is widened per coordinate until the noise floor
    sits two decades under the gradient.  Two kinds of coordinates are
    excluded, with the excluded fraction capped so the check stays
    meaningful: gradients under 3e-8 (no f64 FD step can resolve them) and
    coordinates whose two FD estimates (h and h/5) disagree, which sit next
    to a ReLU kink where central differences are not a valid oracle.  A
    wrong backward rule yields h-stable, above-noise FD values and fails.
    """
    probe = {}

    def run():
        out = forward()
        if "p" not in probe:
            probe["p"] = rng.standard_normal(out.shape)
        return out

    with T.Tape() as tape:
        out = run()
        loss = T.sum_(T.mul(out, Tensor(probe["p"])))
    tape.backward(loss)

    def loss_value():
        return float(np.sum(run().data * probe["p"]))

    def central(t, idx, h):
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = loss_value()
        t.data[idx] = orig - h
        fm = loss_value()
        t.data[idx] = orig
        return (fp - fm) / (2 * h)

    worst = 0.0
    n = 0
    skipped = 0
    targets = [(f"param:{k}", p, coords_per_param) for k, p in params.items()]
    targets += [(f"input:{i}", x, input_coords) for i, x in enumerate(inputs)]
    for _, t, k in targets:
        idxs = rng.choice(t.size, size=min(k, t.size), replace=False)
        g_tape = t.grad if t.grad is not None else np.zeros(t.shape)
        for flat in idxs:
            idx = np.unravel_index(flat, t.shape)
            fd = central(t, idx, FD_STEP)
            if fd == 0.0 and g_tape[idx] == 0.0:
                n += 1  # exactly zero on both sides (e.g. a dead ReLU unit)
                continue
            gmag = max(abs(fd), abs(g_tape[idx]))
            if gmag < 3e-8:
                skipped += 1
                continue
            h = FD_STEP if gmag >= 1e-5 else min(2e-3, 1e-10 / gmag)
            if h != FD_STEP:
                fd = central(t, idx, h)
            err = abs(g_tape[idx] - fd) / (abs(fd) + 1e-8)
            if err >= tol:
                fd2 = central(t, idx, h / 5)
                if abs(fd - fd2) / (abs(fd2) + 1e-8) > 10 * tol:
                    skipped += 1  # FD self-inconsistent: kink-adjacent
                    continue
                err = abs(g_tape[idx] - fd2) / (abs(fd2) + 1e-8)
            worst = max(worst, err)
            n += 1
    if n == 0 or skipped > 0.25 * (n + skipped):
        return CheckResult(name + " (too many unverifiable coords)", float("inf"), n, tol)
    return CheckResult(name, worst, n, tol)


def check_megnet(seed: int = 0, size: int = 8, tol: float = TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = Megnet(MICRO.megnet_config(), rng, dtype=np.float64)
    params = net.params()
    _randomize_params(params, rng)
    x = Tensor(rng.uniform(0.05, 0.95, size=(1, 3, size, size)), requires_grad=True)
    dev = np.array([0.7])
    return _network_check("megnet_micro_forward", params, [x],
                          lambda: net(x, dev), rng, tol=tol)


def check_regnet(seed: int = 0, size: int = 16, tol: float = TOL) -> CheckResult:
    # Full-pipeline micro check: generator stack plus the regressor; 16x16 is
    # the smallest size the 1/16-resolution token grid admits.
    rng = np.random.default_rng(seed)
    mnet = Megnet(MICRO.megnet_config(), rng, dtype=np.float64)
    rnet = Regnet(MICRO.regnet_config(), rng, dtype=np.float64)
    params = {f"megnet:{k}": v for k, v in mnet.params().items()}
    params.update({f"regnet:{k}": v for k, v in rnet.params().items()})
    _randomize_params(params, rng)
    x = Tensor(rng.uniform(0.05, 0.95, size=(1, 3, size, size)), requires_grad=True)

    def forward():
        evs, stack = generate_stack_tensors(mnet, x)
        y, _ = rnet(stack, evs)
        return y

    return _network_check("exreg_micro_forward", params, [x], forward, rng,
                          coords_per_param=2, input_coords=6, tol=tol)


def run_network_checks(seed: int = 0, tol: float = TOL):
    return [check_megnet(seed, tol=tol), check_regnet(seed, tol=tol)]


def run_all(seed: int = 0, tol: float = TOL):
    return run_op_checks(seed, tol) + run_network_checks(seed, tol)
