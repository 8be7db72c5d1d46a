"""Finite-difference sweep over every differentiable op.

Each case maps a seeded generator to a scalar function of one input; the
function contracts the op's output with a fixed random weight so that every
output element contributes to the checked gradient.  ``ste_round`` is absent on
purpose: its backward is a designed surrogate, not the derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad


@dataclass
class Case:
    name: str
    build: Callable  # (rng, dtype) -> (f, x0)


def _away_from(v: np.ndarray, points=(0.0,), margin: float = 0.05) -> np.ndarray:
    """Push samples off non-differentiable points by at least ``margin``."""
    v = v.copy()
    for p in points:
        close = np.abs(v - p) < margin
        v[close] = p + np.where(v[close] >= p, margin, -margin) * 2
    return v


def _contract(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.sum(ad.mul(out, w))


def _unary(name, op, sample=lambda rng, s: rng.normal(size=s)):
    def build(rng, dtype):
        x0 = sample(rng, (3, 4)).astype(dtype)
        w = rng.normal(size=x0.shape).astype(dtype)
        return (lambda x: _contract(op(x), w)), x0
    return Case(name, build)


def _binary(name, op, shape_other, which):
    def build(rng, dtype):
        a = rng.normal(size=(2, 3, 4)).astype(dtype)
        b = rng.normal(size=shape_other).astype(dtype)
        w = rng.normal(size=(2, 3, 4)).astype(dtype)
        if which == 0:
            return (lambda x: _contract(op(x, b), w)), a
        return (lambda x: _contract(op(a, x), w)), b
    return Case(name, build)


def _conv(which: str, transpose: bool, stride: int, pad: int):
    def build(rng, dtype):
        if transpose:
            x = rng.normal(size=(2, 3, 3, 4)).astype(dtype)
            k = rng.normal(size=(3, 2, 3, 3)).astype(dtype) * 0.5
            op = ad.conv_transpose2d
        else:
            x = rng.normal(size=(2, 3, 6, 5)).astype(dtype)
            k = rng.normal(size=(2, 3, 3, 3)).astype(dtype) * 0.5
            op = ad.conv2d
        b = rng.normal(size=(2,)).astype(dtype)
        args = {"x": x, "w": k, "b": b}
        out_shape = op(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), stride=stride, pad=pad).shape
        wt = rng.normal(size=out_shape).astype(dtype)

        def f(t):
            vals = dict(args)
            vals[which] = t
            return _contract(op(ad.as_tensor(vals["x"]), ad.as_tensor(vals["w"]), ad.as_tensor(vals["b"]),
                                stride=stride, pad=pad), wt)
        return f, args[which]
    kind = "conv_transpose2d" if transpose else "conv2d"
    return Case(f"{kind}[{which},s{stride},p{pad}]", build)


def _ce(rng, dtype):
    labels = rng.integers(0, 3, size=(2, 4, 4))
    x0 = rng.normal(size=(2, 3, 4, 4)).astype(dtype)
    return (lambda x: ad.softmax_cross_entropy(x, labels)), x0


def _bce(rng, dtype):
    t = rng.integers(0, 2, size=(4, 3))
    x0 = rng.normal(size=(4, 3)).astype(dtype) * 2
    return (lambda x: ad.bce_with_logits(x, t)), x0


def _mse(which):
    def build(rng, dtype):
        a = rng.normal(size=(3, 5)).astype(dtype)
        b = rng.normal(size=(3, 5)).astype(dtype)
        if which == 0:
            return (lambda x: ad.mse(x, b)), a
        return (lambda x: ad.mse(a, x)), b
    return Case(f"mse[{which}]", build)


def _reduce(name, op):
    def build(rng, dtype):
        x0 = rng.normal(size=(2, 3, 4)).astype(dtype)
        red = op(ad.Tensor(x0))
        w = rng.normal(size=red.shape).astype(dtype)
        return (lambda x: _contract(op(x), w) if red.ndim else ad.scale(op(x), float(w))), x0
    return Case(name, build)


def _sum_log2(rng, dtype):
    x0 = rng.uniform(0.2, 2.0, size=(3, 4)).astype(dtype)
    return ad.sum_log2, x0


def _detach_product(rng, dtype):
    x0 = rng.normal(size=(3, 4)).astype(dtype)
    return (lambda x: ad.sum(ad.mul(x, ad.detach(x)))), x0


def _upsample(rng, dtype):
    x0 = rng.normal(size=(1, 2, 3, 3)).astype(dtype)
    w = rng.normal(size=(1, 2, 6, 6)).astype(dtype)
    return (lambda x: _contract(ad.upsample2x(x), w)), x0


def _reshape(rng, dtype):
    x0 = rng.normal(size=(2, 6)).astype(dtype)
    w = rng.normal(size=(3, 4)).astype(dtype)
    return (lambda x: _contract(ad.reshape(x, (3, 4)), w)), x0


def _likelihood(param: str):
    def build(rng, dtype):
        from .codec import FactorizedEntropyModel

        em = FactorizedEntropyModel(3, support=8, init_scale=1.5)
        em.mu.data = rng.normal(size=em.mu.shape).astype(dtype) * 0.5
        em.log_scale.data = (rng.normal(size=em.log_scale.shape) * 0.3).astype(dtype)
        # integer offsets keep v away from the (non-differentiable) support ends
        v = (rng.integers(-3, 4, size=(2, 3, 2, 2)) + rng.uniform(-0.4, 0.4, size=(2, 3, 2, 2))).astype(dtype)
        base = {"mu": em.mu.data.copy(), "log_scale": em.log_scale.data.copy(), "v": v}

        def f(t):
            vals = dict(base)
            vals[param] = t
            em.mu = ad.Parameter(vals["mu"], "mu", "entropy_model") if param != "mu" else t
            em.log_scale = (ad.Parameter(vals["log_scale"], "log_scale", "entropy_model")
                            if param != "log_scale" else t)
            return ad.scale(ad.sum_log2(em.likelihood(ad.as_tensor(vals["v"]))), -1.0)
        return f, base[param]
    return Case(f"rate[{param}]", build)


CASES: list[Case] = [
    _binary("add[a]", ad.add, (4,), 0), _binary("add[b,broadcast]", ad.add, (4,), 1),
    _binary("sub[a]", ad.sub, (3, 1), 0), _binary("sub[b,broadcast]", ad.sub, (3, 1), 1),
    _binary("mul[a]", ad.mul, (2, 3, 4), 0), _binary("mul[b,broadcast]", ad.mul, (1, 4), 1),
    _unary("scale", lambda x: ad.scale(x, -2.5)),
    _unary("relu", ad.relu, lambda rng, s: _away_from(rng.normal(size=s))),
    _unary("leaky_relu", lambda x: ad.leaky_relu(x, 0.1), lambda rng, s: _away_from(rng.normal(size=s))),
    _unary("sigmoid", ad.sigmoid, lambda rng, s: rng.normal(size=s) * 3),
    _unary("exp", ad.exp),
    _unary("log", ad.log, lambda rng, s: rng.uniform(0.3, 3.0, size=s)),
    _unary("clamp_min", lambda x: ad.clamp_min(x, 0.2), lambda rng, s: _away_from(rng.normal(size=s), (0.2,))),
    Case("reshape", _reshape), Case("upsample2x", _upsample),
    _reduce("sum", ad.sum), _reduce("sum[axis=1]", lambda x: ad.sum(x, axis=1)),
    _reduce("mean", ad.mean), _reduce("mean[axis=(0,2)]", lambda x: ad.mean(x, axis=(0, 2))),
    Case("sum_log2", _sum_log2),
    Case("softmax_cross_entropy", _ce), Case("bce_with_logits", _bce), _mse(0), _mse(1),
    Case("detach_product", _detach_product),
    *[_conv(w, t, s, p) for t in (False, True) for (s, p) in ((1, 1), (2, 1), (2, 0)) for w in ("x", "w", "b")],
    _likelihood("v"), _likelihood("mu"), _likelihood("log_scale"),
]


def run_suite(seeds=range(10), dtype=np.float64, eps: float | None = None,
              tol: float | None = None) -> list[ad.GradCheckReport]:
    """Grad-check every case at every seed; defaults follow the precision.

    For float32 the analytic pass runs in float32 while the difference quotient
    (step 1e-3) is taken in float64: in float32 the quotient's own roundoff,
    about ulp(f)/eps, is of the same order as the tolerance.
    """
    single = np.dtype(dtype) == np.float32
    eps = eps if eps is not None else (1e-3 if single else 1e-6)
    tol = tol if tol is not None else (1e-3 if single else 1e-6)
    reports = []
    for case in CASES:
        for seed in seeds:
            rng = np.random.default_rng([seed, sum(map(ord, case.name))])
            f, x0 = case.build(rng, dtype)
            reports.append(ad.grad_check(f, x0, eps=eps, tol=tol, name=f"{case.name}#seed{seed}",
                                         numeric_dtype=np.float64 if single else None))
    return reports
