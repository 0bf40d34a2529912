"""Per-op gradient probes against central finite differences.

Every probe reduces the op output to a scalar with fixed random weights so
that all output entries feed the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad


def _away(rng, shape, lo, hi, avoid=(), margin=1e-2):
    x = rng.uniform(lo, hi, shape)
    for a in avoid:
        near = np.abs(x - a) < margin
        x[near] = a + np.where(x[near] >= a, margin, -margin) * 2.0
    return x


@dataclass(frozen=True)
class Probe:
    kind: str
    sample: Callable[[np.random.Generator], list]
    build: Callable[[ad.Tape, list], ad.Var]


def _k(rng):
    return rng.normal(size=(3, 3))


_CONV_KERNEL = np.random.default_rng(7).normal(size=(3, 3))

PROBES = [
    Probe("add", lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda t, v: v[0] + v[1]),
    Probe("sub", lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda t, v: v[0] - v[1]),
    Probe("mul", lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda t, v: v[0] * v[1]),
    Probe("div", lambda r: [r.normal(size=(4,)),
                            r.choice([-1.0, 1.0], 4) * r.uniform(0.5, 2.0, 4)],
          lambda t, v: v[0] / v[1]),
    Probe("matmul", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda t, v: v[0] @ v[1]),
    Probe("scale", lambda r: [r.normal(size=(5,))], lambda t, v: v[0] * 1.7),
    Probe("shift", lambda r: [r.normal(size=(5,))], lambda t, v: v[0] + 0.3),
    Probe("sum", lambda r: [r.normal(size=(3, 3))], lambda t, v: ad.sum(v[0])),
    Probe("mean", lambda r: [r.normal(size=(3, 3))], lambda t, v: ad.mean(v[0])),
    Probe("sigmoid", lambda r: [r.uniform(-3, 3, (6,))], lambda t, v: ad.sigmoid(v[0])),
    Probe("tanh", lambda r: [r.uniform(-2, 2, (6,))], lambda t, v: ad.tanh(v[0])),
    Probe("exp", lambda r: [r.uniform(-2, 2, (6,))], lambda t, v: ad.exp(v[0])),
    Probe("smooth_abs", lambda r: [_away(r, (6,), -2, 2, (0.0,))], lambda t, v: ad.smooth_abs(v[0])),
    Probe("relu", lambda r: [_away(r, (6,), -2, 2, (0.0,))], lambda t, v: ad.relu(v[0])),
    Probe("max0", lambda r: [_away(r, (6,), -2, 2, (0.0,))], lambda t, v: ad.max0(v[0])),
    Probe("max_with", lambda r: [_away(r, (6,), -1, 1, (0.25,))], lambda t, v: ad.max_with(v[0], 0.25)),
    Probe("dot", lambda r: [r.normal(size=(5,)), r.normal(size=(5,))], lambda t, v: ad.dot(v[0], v[1])),
    Probe("cosine", lambda r: [r.normal(size=(5,)), r.normal(size=(5,))],
          lambda t, v: ad.cosine(v[0], v[1])),
    Probe("render", lambda r: [r.uniform(0.1, 1.0, 3), r.uniform(3.0, 13.0, (3, 2))],
          lambda t, v: ad.render(v[0], v[1], 2.0, 16, 16)),
    Probe("conv2d", lambda r: [r.normal(size=(8, 8))], lambda t, v: ad.conv2d(v[0], _CONV_KERNEL)),
    Probe("clamp01", lambda r: [_away(r, (6,), -0.5, 1.5, (0.0, 1.0))], lambda t, v: ad.clamp01(v[0])),
    Probe("reshape", lambda r: [r.normal(size=(2, 3))], lambda t, v: ad.reshape(v[0], (3, 2))),
]


def probe_error(probe: Probe, rng: np.random.Generator, h: float = 1e-6) -> float:
    """Max elementwise |backward - fd| / (|fd| + 1e-8) at one random point."""
    inputs = probe.sample(rng)
    sizes = [x.size for x in inputs]
    shapes = [x.shape for x in inputs]
    tape0 = ad.Tape()
    out_shape = probe.build(tape0, [tape0.leaf(x) for x in inputs]).shape
    w = rng.uniform(0.5, 1.5, out_shape) * rng.choice([-1.0, 1.0], out_shape)

    def root(tape, leaves):
        out = probe.build(tape, leaves)
        if out.shape == ():
            return out * float(w)
        return ad.sum(out * tape.const(w))

    def split(flat):
        parts, i = [], 0
        for n, s in zip(sizes, shapes):
            parts.append(flat[i:i + n].reshape(s))
            i += n
        return parts

    flat = np.concatenate([x.reshape(-1) for x in inputs])
    tape = ad.Tape()
    leaves = [tape.leaf(x) for x in inputs]
    grads = ad.backward(root(tape, leaves))
    g = np.concatenate([np.asarray(grads[lf]).reshape(-1) for lf in leaves])

    def f(z):
        t = ad.Tape()
        return float(root(t, [t.leaf(p) for p in split(z)]).value)

    fd = ad.finite_difference(f, flat, h)
    return float(np.max(np.abs(g - fd) / (np.abs(fd) + 1e-8)))


def check_all_ops(points: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op kind over ``points`` random inputs."""
    rng = np.random.default_rng(seed)
    return {p.kind: max(probe_error(p, rng) for _ in range(points)) for p in PROBES}
