"""Central finite-difference checks for every autodiff op.

Each case builds random 64-bit instances, reduces the op output to a scalar
through a fixed random projection, and compares tape gradients against
(f(x+h) - f(x-h)) / 2h elementwise. Error metric per element is
|a - fd| / max(1, |a|, |fd|).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

H = 1e-5
TOL = 1e-4
TOL_BN = 1e-3  # batch stats amplify FD truncation error


@dataclass
class CheckResult:
    op: str
    instances: int
    max_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_err <= self.tol


def finite_diff(value_fn, arrays, h=H):
    """Central-difference gradients of a scalar function of several arrays."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value_fn(arrays)
            flat[i] = orig - h
            fm = value_fn(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(a: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
    return float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0


def _tape_value(apply_fn, arrays) -> float:
    tape = ad.Tape(np.float64)
    ts = [tape.leaf(a) for a in arrays]
    return float(apply_fn(tape, ts).data)


def _tape_grads(apply_fn, arrays):
    tape = ad.Tape(np.float64)
    ts = [tape.leaf(a) for a in arrays]
    tape.backward(apply_fn(tape, ts))
    return [tape.grad(t) for t in ts]


def _project(tape, out, proj):
    return ad.sum_all(ad.mul(out, tape.leaf(proj)))


def _check(apply_fn, arrays) -> float:
    auto = _tape_grads(apply_fn, arrays)
    fd = finite_diff(lambda arrs: _tape_value(apply_fn, arrs), arrays)
    return max(max_rel_err(a, f) for a, f in zip(auto, fd))


def _rand(rng, shape):
    return rng.standard_normal(shape)


def _case_binary(name):
    def build(rng, instance):
        shape = (3, 4)
        a = _rand(rng, shape)
        # every other instance exercises the scalar broadcast path
        b = _rand(rng, ()) if instance % 2 else _rand(rng, shape)
        proj = _rand(rng, shape)

        def apply(tape, ts):
            return _project(tape, ad.elementwise(name, ts[0], ts[1]), proj)

        return [a, b], apply, TOL

    return build


def _case_scale(rng, instance):
    a = _rand(rng, (3, 4))
    c = float(rng.uniform(-2, 2))
    proj = _rand(rng, (3, 4))

    def apply(tape, ts):
        return _project(tape, ad.scale(ts[0], c), proj)

    return [a], apply, TOL


def _case_unary(fn, sampler):
    def build(rng, instance):
        a = sampler(rng)
        proj = _rand(rng, a.shape)

        def apply(tape, ts):
            return _project(tape, fn(ts[0]), proj)

        return [a], apply, TOL

    return build


def _relu_input(rng):
    a = _rand(rng, (3, 4))
    a[np.abs(a) < 0.05] += 0.1  # keep clear of the kink so FD is valid
    return a


def _case_matmul(rng, instance):
    a, b = _rand(rng, (3, 4)), _rand(rng, (4, 5))
    proj = _rand(rng, (3, 5))

    def apply(tape, ts):
        return _project(tape, ad.matmul(ts[0], ts[1]), proj)

    return [a, b], apply, TOL


def _case_bias_add(rng, instance):
    x, b = _rand(rng, (4, 5)), _rand(rng, (5,))
    proj = _rand(rng, (4, 5))

    def apply(tape, ts):
        return _project(tape, ad.bias_add(ts[0], ts[1]), proj)

    return [x, b], apply, TOL


def _case_reshape(rng, instance):
    a = _rand(rng, (3, 4))
    proj = _rand(rng, (2, 6))

    def apply(tape, ts):
        return _project(tape, ad.reshape(ts[0], (2, 6)), proj)

    return [a], apply, TOL


def _case_pick(rng, instance):
    a = _rand(rng, (7,))
    idx = int(rng.integers(7))

    def apply(tape, ts):
        return ad.pick(ts[0], idx)

    return [a], apply, TOL


def _case_sum(rng, instance):
    a = _rand(rng, (3, 4))

    def apply(tape, ts):
        return ad.sum_all(ts[0])

    return [a], apply, TOL


def _case_mean(rng, instance):
    a = _rand(rng, (3, 4))

    def apply(tape, ts):
        return ad.mean_all(ts[0])

    return [a], apply, TOL


def _case_conv2d(rng, instance):
    stride = 1 + instance % 2
    padding = instance % 3 % 2
    x = _rand(rng, (2, 2, 5, 5))
    k = _rand(rng, (3, 2, 3, 3))
    oh = ad._conv_out_size(5, 3, stride, padding)
    proj = _rand(rng, (2, 3, oh, oh))

    def apply(tape, ts):
        return _project(tape, ad.conv2d(ts[0], ts[1], stride=stride, padding=padding), proj)

    return [x, k], apply, TOL


def _case_batch_norm(rng, instance):
    shape = (6, 3) if instance % 2 else (2, 3, 4, 4)
    x = _rand(rng, shape)
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = _rand(rng, (3,))
    proj = _rand(rng, shape)

    def apply(tape, ts):
        return _project(tape, ad.batch_norm(ts[0], ts[1], ts[2]), proj)

    return [x, gamma, beta], apply, TOL_BN


def _case_softmax(rng, instance):
    a = _rand(rng, (6,))
    proj = _rand(rng, (6,))

    def apply(tape, ts):
        return _project(tape, ad.softmax(ts[0]), proj)

    return [a], apply, TOL


def _case_cross_entropy(rng, instance):
    z = _rand(rng, (5, 4))
    t = rng.integers(0, 4, size=5)

    def apply(tape, ts):
        return ad.cross_entropy(ts[0], t)

    return [z], apply, TOL


def _case_mse(rng, instance):
    p, t = _rand(rng, (3, 4)), _rand(rng, (3, 4))

    def apply(tape, ts):
        return ad.mse(ts[0], ts[1])

    return [p, t], apply, TOL


def _case_network(rng, instance):
    """Two conv blocks (conv, batch norm, relu) into a linear head."""
    x = _rand(rng, (2, 2, 6, 6))
    k1 = _rand(rng, (3, 2, 3, 3)) * 0.5
    g1, b1 = rng.uniform(0.5, 1.5, 3), _rand(rng, (3,)) * 0.1
    k2 = _rand(rng, (4, 3, 3, 3)) * 0.5
    g2, b2 = rng.uniform(0.5, 1.5, 4), _rand(rng, (4,)) * 0.1
    w = _rand(rng, (36, 3)) * 0.3
    b = _rand(rng, (3,)) * 0.1
    t = rng.integers(0, 3, size=2)

    def apply(tape, ts):
        xt, k1t, g1t, b1t, k2t, g2t, b2t, wt, bt = ts
        h = ad.relu(ad.batch_norm(ad.conv2d(xt, k1t, stride=2, padding=1), g1t, b1t))
        h = ad.relu(ad.batch_norm(ad.conv2d(h, k2t, stride=1, padding=1), g2t, b2t))
        h = ad.reshape(h, (2, 36))
        logits = ad.bias_add(ad.matmul(h, wt), bt)
        return ad.cross_entropy(logits, t)

    return [x, k1, g1, b1, k2, g2, b2, w, b], apply, TOL_BN


CASES = [
    ("add", _case_binary("add")),
    ("sub", _case_binary("sub")),
    ("mul", _case_binary("mul")),
    ("scale", _case_scale),
    ("neg", _case_unary(ad.neg, lambda rng: _rand(rng, (3, 4)))),
    ("relu", _case_unary(ad.relu, _relu_input)),
    ("exp", _case_unary(ad.exp, lambda rng: _rand(rng, (3, 4)))),
    ("log", _case_unary(ad.log, lambda rng: rng.uniform(0.2, 3.0, (3, 4)))),
    ("matmul", _case_matmul),
    ("bias_add", _case_bias_add),
    ("reshape", _case_reshape),
    ("pick", _case_pick),
    ("sum_all", _case_sum),
    ("mean_all", _case_mean),
    ("conv2d", _case_conv2d),
    ("batch_norm", _case_batch_norm),
    ("softmax", _case_softmax),
    ("cross_entropy", _case_cross_entropy),
    ("mse", _case_mse),
    ("two_conv_block_network", _case_network),
]


def run_gradcheck(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    results = []
    for case_index, (name, build) in enumerate(CASES):
        rng = np.random.default_rng((seed, case_index))
        worst = 0.0
        tol = TOL
        for i in range(instances):
            arrays, apply_fn, tol = build(rng, i)
            worst = max(worst, _check(apply_fn, arrays))
        results.append(CheckResult(name, instances, worst, tol))
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{r.op:<26} n={r.instances:<3} max_err={r.max_err:.3e} tol={r.tol:.0e} {status}")
    return "\n".join(lines)
