"""Finite-difference gradient checks for kernels and whole networks.

Everything here runs in float64; the relative error of an analytic
gradient ``a`` against a numeric one ``n`` is ``|a - n| / max(|a|, |n|)``
taken over the whole checked vector (2-norms), with a floor so that
all-zero gradients compare equal.  Network checks set that floor from the
overall gradient scale: a conv bias feeding a train-mode batch norm has an
exactly-zero gradient, and its finite difference is pure rounding noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import Network, NetworkSpec, build

TOLERANCE = 1e-4


def rel_error(analytic, numeric, floor: float = 1e-5) -> float:
    a, n = np.ravel(analytic).astype(np.float64), np.ravel(numeric).astype(np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    ``indices`` restricts the check to a subset of flat positions; the
    result then has one entry per index.
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def tiny_spec(name: str, C: int = 3, width: int = 2) -> NetworkSpec:
    """Full-depth architecture with narrow layers, for cheap checks."""
    if name == "fcn":
        return build("fcn", C, width=width, hidden=2 * width)
    if name == "discriminator":
        return build("discriminator", C, width=width, dense=2 * width)
    return build(name, C, width=width)


def check_network(spec: NetworkSpec, seed: int = 0, batch: int = 4, extra: int = 2, per_param: int = 6,
                  h: float = 1e-6) -> list[CheckResult]:
    """Compare tape gradients of ``sum(R * net(x))`` with central differences.

    Runs in train mode (batch statistics, fixed dropout masks) without
    touching running statistics.  Checks up to ``per_param`` random entries
    of every parameter plus the input(s).
    """
    rng = np.random.default_rng(seed)
    net = Network(spec, seed=seed, dtype=np.float64)
    # move affine params off their trivial init; zero biases on an all-zero
    # ReLU input would otherwise sit exactly on the kink
    for p in net.params:
        if p.name.endswith(".gamma"):
            p.value[...] = rng.uniform(0.5, 1.5, p.value.shape)
        elif p.name.endswith((".beta", ".b")):
            p.value[...] = rng.normal(0, 0.1, p.value.shape)
    if spec.is_discriminator:
        side = spec.patch - 2 * len([l for l in spec.image_branch for _ in range(l.repeat)])
        x = rng.random((batch, spec.class_count, side, side))
        image = rng.normal(size=(batch, 1, spec.patch, spec.patch))
    else:
        from .nets import receptive_field

        side = receptive_field(spec) + extra
        x = rng.normal(size=(batch, spec.in_channels, side, side))
        image = None
    key = (seed, 0)

    def run(tape=None, xin=None):
        xv = ad.Var(x) if xin is None else xin
        out = net.forward(xv, tape, "train", key, update_stats=False, image=image)
        return out

    R = rng.normal(size=run().value.shape)

    def loss() -> float:
        return float((run().value * R).sum())

    tape = ad.Tape()
    xin = ad.Var(x, ad.Node("input", (), None, ad.Param("input", net.group, x)))
    tape.nodes.append(xin.node)
    out = run(tape, xin)
    net.params.zero_grad()
    tape.backward(out, R)
    # ReLU/max-pool kinks: a central difference that straddles one disagrees
    # with its half-step twin far beyond rounding noise.  Such an entry is
    # retried with shorter steps (fewer kinks in reach) and skipped in favour
    # of the next candidate if that does not help either.  Rounding noise
    # scales with the summed magnitudes, not with the sum.
    mag = max(1.0, float(np.abs(run().value * R).sum()))
    eps = np.finfo(np.float64).eps
    checked = []
    for p in list(net.params) + [xin.node.param]:
        idx, num = [], []
        for i in rng.permutation(p.value.size):
            for step in (h, h / 10, h / 100):
                n1, n2 = numeric_grad(loss, p.value, step, [i])[0], numeric_grad(loss, p.value, step / 2, [i])[0]
                if abs(n1 - n2) <= max(50 * eps * mag / step, 1e-6 * abs(n1)):
                    idx.append(i)
                    num.append(n1)
                    break
            if len(idx) == per_param:
                break
        if not idx:
            raise RuntimeError(f"{p.name}: every entry straddles a kink")
        checked.append((p.name, p.grad.reshape(-1)[idx], np.array(num)))
    scale = np.sqrt(np.mean(np.concatenate([a for _, a, _ in checked]) ** 2))
    floor = max(1e-5, 1e-3 * scale)
    return [CheckResult(name, rel_error(a, n, floor)) for name, a, n in checked]


def check_named(name: str, seed: int = 0, **kw) -> list[CheckResult]:
    return check_network(tiny_spec(name), seed, **kw)
