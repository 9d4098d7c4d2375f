"""Central finite differences and a registry of gradient checks.

The registry covers every operator in :mod:`ops`; :mod:`biphasic.losses`
registers its own cases on import.  ``run_gradcheck`` compares analytic
gradients from :func:`backward` against :func:`finite_difference_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Graph, NonFiniteError, Tensor, backward, evaluate, no_grad


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr.reshape(base.shape)))
        val = float(out.data.sum()) if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NonFiniteError("finite_difference_grad: f returned a non-finite value")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(flat)
        flat[i] = orig - eps
        lo = value(flat)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over elements of |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


@dataclass
class GradCase:
    """A function of named inputs plus a sampler for them.

    The checked scalar is the sum of ``fn``'s output.  Sampled entries whose
    key starts with ``_`` are passed as plain arrays and not differentiated.
    """

    name: str
    fn: Callable[..., Tensor]
    sample: Callable[[np.random.Generator], dict[str, np.ndarray]]
    tolerance: float = 1e-4


@dataclass
class GradReport:
    name: str
    trials: int
    max_rel_error: float
    passed: bool
    failures: list[str] = field(default_factory=list)


REGISTRY: dict[str, GradCase] = {}


def register(case: GradCase) -> GradCase:
    REGISTRY[case.name] = case
    return case


def check_case(case: GradCase, trials: int = 100, seed: int = 0, eps: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for trial in range(trials):
        drawn = case.sample(rng)
        consts = {k: v for k, v in drawn.items() if k.startswith("_")}
        arrays = {k: v for k, v in drawn.items() if not k.startswith("_")}
        inputs = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        graph = Graph(lambda **kw: case.fn(**kw, **consts).sum(), name=case.name)
        evaluate(graph, inputs)
        grads = backward(graph)
        for name in arrays:

            def partial(t: Tensor, name=name):
                kw = {k: Tensor(v) for k, v in arrays.items()}
                kw[name] = t
                return case.fn(**kw, **consts).sum()

            numeric = finite_difference_grad(partial, Tensor(arrays[name]), eps)
            err = relative_error(grads[name], numeric)
            worst = max(worst, err)
            if err > case.tolerance:
                failures.append(f"trial {trial} input {name!r}: rel error {err:.3e}")
    return GradReport(case.name, trials, worst, not failures, failures)


def run_gradcheck(names: Sequence[str] | None = None, trials: int = 100, seed: int = 0) -> list[GradReport]:
    from .. import losses  # noqa: F401  (registers loss cases)

    selected = list(REGISTRY) if not names else list(names)
    unknown = [n for n in selected if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    return [check_case(REGISTRY[n], trials=trials, seed=seed) for n in selected]


# -- samplers ---------------------------------------------------------------


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, *shape, margin=1e-2):
    """Uniform in [-2, 2] with |x| >= margin, for ops with a kink at 0."""
    x = _u(rng, *shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _weights(rng, *shape):
    return _u(rng, *shape, lo=-1.0, hi=1.0)


# random projections keep the checked scalar sensitive to every output element
def _proj(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _register_ops() -> None:
    def projected(name, fn, out_shape, sample, tol=1e-4):
        def proj_sample(rng):
            d = sample(rng)
            d["_p"] = _proj(rng, out_shape)
            return d

        def proj_fn(_p, **kw):
            return ops.mul(fn(**kw), _p)

        register(GradCase(name, proj_fn, proj_sample, tol))

    projected("add", lambda a, b: ops.add(a, b), (3, 4), lambda r: {"a": _u(r, 3, 4), "b": _u(r, 1, 4)})
    projected("sub", lambda a, b: ops.sub(a, b), (3, 4), lambda r: {"a": _u(r, 3, 4), "b": _u(r, 3, 1)})
    projected("mul", lambda a, b: ops.mul(a, b), (3, 4), lambda r: {"a": _u(r, 3, 4), "b": _u(r, 3, 4)})
    projected(
        "div",
        lambda a, b: ops.div(a, b),
        (3, 4),
        lambda r: {"a": _u(r, 3, 4), "b": _u(r, 3, 4, lo=0.5, hi=2.0) * r.choice([-1, 1], size=(3, 4))},
    )
    projected("neg", lambda a: ops.neg(a), (5,), lambda r: {"a": _u(r, 5)})
    projected("pow", lambda a: ops.power(a, 3.0), (5,), lambda r: {"a": _u(r, 5)})
    projected("square", lambda a: ops.square(a), (5,), lambda r: {"a": _u(r, 5)})
    projected("sqrt", lambda a: ops.sqrt(a), (5,), lambda r: {"a": _u(r, 5, lo=0.1, hi=2.0)})
    projected("abs", lambda a: ops.abs(a), (6,), lambda r: {"a": _away_from_zero(r, 6)})
    projected("exp", lambda a: ops.exp(a), (5,), lambda r: {"a": _u(r, 5)})
    projected("log", lambda a: ops.log(a), (5,), lambda r: {"a": _u(r, 5, lo=0.1, hi=2.0)})
    projected("clamp_min", lambda a: ops.clamp_min(a, 0.0), (6,), lambda r: {"a": _away_from_zero(r, 6)})
    projected("relu", lambda a: ops.relu(a), (6,), lambda r: {"a": _away_from_zero(r, 6)})
    projected("leaky_relu", lambda a: ops.leaky_relu(a, 0.2), (6,), lambda r: {"a": _away_from_zero(r, 6)})
    projected("tanh", lambda a: ops.tanh(a), (6,), lambda r: {"a": _u(r, 6)})
    projected("sigmoid", lambda a: ops.sigmoid(a), (6,), lambda r: {"a": _u(r, 6)})
    projected("softplus", lambda a: ops.softplus(a), (6,), lambda r: {"a": _u(r, 6)})
    projected("softmax", lambda a: ops.softmax(a, axis=1), (2, 4), lambda r: {"a": _u(r, 2, 4)})
    projected("log_softmax", lambda a: ops.log_softmax(a, axis=1), (2, 4), lambda r: {"a": _u(r, 2, 4)})
    projected("logsumexp", lambda a: ops.logsumexp(a, axis=1), (3,), lambda r: {"a": _u(r, 3, 4)})
    projected("norm", lambda a: ops.norm(a, axis=1), (3,), lambda r: {"a": _u(r, 3, 4)})
    projected("sum", lambda a: ops.sum(a, axis=0), (4,), lambda r: {"a": _u(r, 3, 4)})
    projected("mean", lambda a: ops.mean(a, axis=(0, 2), keepdims=True), (1, 3, 1), lambda r: {"a": _u(r, 2, 3, 4)})
    projected("reshape", lambda a: ops.reshape(a, (4, 3)), (4, 3), lambda r: {"a": _u(r, 3, 4)})
    projected("transpose", lambda a: ops.transpose(a, (1, 0)), (4, 3), lambda r: {"a": _u(r, 3, 4)})
    projected("broadcast_to", lambda a: ops.broadcast_to(a, (2, 3, 4)), (2, 3, 4), lambda r: {"a": _u(r, 3, 1)})
    projected("getitem", lambda a: ops.getitem(a, (slice(None), slice(1, 3))), (3, 2), lambda r: {"a": _u(r, 3, 4)})
    projected(
        "concat",
        lambda a, b: ops.concat([a, b], axis=1),
        (2, 5),
        lambda r: {"a": _u(r, 2, 2), "b": _u(r, 2, 3)},
    )
    projected("matmul", lambda a, b: ops.matmul(a, b), (3, 2), lambda r: {"a": _u(r, 3, 4), "b": _u(r, 4, 2)})
    projected(
        "conv2d",
        lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
        (2, 3, 5, 5),
        lambda r: {"x": _u(r, 2, 2, 5, 5), "w": _weights(r, 3, 2, 3, 3), "b": _u(r, 3)},
    )
    projected(
        "conv2d_stride2",
        lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
        (2, 3, 3, 3),
        lambda r: {"x": _u(r, 2, 2, 6, 6), "w": _weights(r, 3, 2, 4, 4), "b": _u(r, 3)},
    )
    projected(
        "conv_transpose2d",
        lambda x, w, b: ops.conv_transpose2d(x, w, b, stride=2, padding=1),
        (2, 2, 6, 6),
        lambda r: {"x": _u(r, 2, 3, 3, 3), "w": _weights(r, 3, 2, 4, 4), "b": _u(r, 2)},
    )
    projected("avg_pool2d", lambda x: ops.avg_pool2d(x, 2), (1, 2, 2, 2), lambda r: {"x": _u(r, 1, 2, 4, 4)})
    projected(
        "upsample_nearest", lambda x: ops.upsample_nearest(x, 2), (1, 2, 6, 6), lambda r: {"x": _u(r, 1, 2, 3, 3)}
    )
    projected(
        "upsample_bilinear", lambda x: ops.upsample_bilinear(x, 2), (1, 2, 6, 8), lambda r: {"x": _u(r, 1, 2, 3, 4)}
    )
    projected(
        "instance_norm",
        lambda x, gamma, beta: ops.instance_norm(x, gamma, beta),
        (2, 3, 3, 3),
        lambda r: {"x": _u(r, 2, 3, 3, 3), "gamma": _u(r, 3), "beta": _u(r, 3)},
    )


_register_ops()
