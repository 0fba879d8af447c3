"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward

# gradients smaller than this are compared on an absolute scale; the limit is
# where float64 central differences stop resolving relative error 1e-4
GRAD_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, indices=None) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr`` (perturbed in place).

    The step at each entry is ``1e-5 * max(1, |value|)``.
    """
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out_flat = out.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        h = 1e-5 * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out_flat[i] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare analytic and numeric gradients of ``loss_fn()`` for each tensor.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of the
    tensors on every call. Returns the max relative error per tensor name.
    When ``max_entries`` is given, a seeded random subset of entries of each
    tensor is probed instead of all of them.
    """
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in tensors.items()}
    rng = np.random.default_rng(seed)

    def f() -> float:
        return float(loss_fn().data)

    errors = {}
    for name, t in tensors.items():
        size = t.data.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            idx = np.arange(size)
        num = numeric_grad(f, t.data, idx)
        a = analytic[name].reshape(-1)[idx]
        errors[name] = relative_error(a, num.reshape(-1)[idx])
    return errors


# ---------------------------------------------------------------- suites

GRAD_TOLERANCE = 1e-4


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    from . import tensor as T

    return T.tsum(T.mul(out, T.Tensor(proj)))


def _away_from_kinks(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, np.sign(x) * 0.05 + x, x)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """One small differentiable case per tensor-core op, each reduced to a scalar."""
    from . import tensor as T

    rng = np.random.default_rng(seed)

    def t(shape, name, kink_free=False):
        data = _away_from_kinks(rng, shape) if kink_free else rng.normal(size=shape)
        return Tensor(data, requires_grad=True, name=name)

    s4 = (2, 3, 4, 4)
    cases: dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]] = {}

    def unary(name, fn, shape=s4, kink_free=False):
        x = t(shape, "x", kink_free)
        proj = rng.normal(size=fn(Tensor(x.data)).shape)
        cases[name] = (lambda: _projected(fn(x), proj), {"x": x})

    def binary(name, fn, sa=s4, sb=s4):
        a, b = t(sa, "a"), t(sb, "b")
        proj = rng.normal(size=fn(Tensor(a.data), Tensor(b.data)).shape)
        cases[name] = (lambda: _projected(fn(a, b), proj), {"a": a, "b": b})

    binary("add", T.add)
    binary("mul", T.mul)
    binary("elementwise_add", lambda a, b: T.elementwise(a, b, "add"))
    unary("scale", lambda x: T.scale(x, -1.7))
    unary("relu", T.relu, kink_free=True)
    unary("sigmoid", T.sigmoid)
    unary("reshape", lambda x: T.reshape(x, (2, 48)))
    unary("resample_down2", lambda x: T.resample(x, "down2"))
    unary("resample_up2", lambda x: T.resample(x, "up2"))
    unary("global_avg_pool", T.global_avg_pool)
    binary("concat_channels", T.concat_channels, s4, (2, 2, 4, 4))
    a, b, c = t(s4, "a"), t((2, 1, 4, 4), "b"), t((2, 2, 4, 4), "c")
    proj_cm = rng.normal(size=(2, 6, 4, 4))
    cases["concat_many"] = (lambda: _projected(T.concat_many([a, b, c]), proj_cm), {"a": a, "b": b, "c": c})
    x, g = t(s4, "x"), t((2, 3), "gate")
    proj_sc = rng.normal(size=s4)
    cases["scale_channels"] = (lambda: _projected(T.scale_channels(x, g), proj_sc), {"x": x, "gate": g})
    x2 = t((3, 5), "x")
    w2, b2 = t((4, 5), "weight"), t((4,), "bias")
    proj_l = rng.normal(size=(3, 4))
    cases["linear"] = (lambda: _projected(T.linear(x2, w2, b2), proj_l), {"x": x2, "weight": w2, "bias": b2})
    xs = t((1, 2, 3), "x")
    cases["tsum"] = (lambda: T.tsum(T.mul(xs, xs)), {"x": xs})
    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 1)):
        xc = t((2, 3, 6, 6), "x")
        wc, bc = t((4, 3, k, k), "weight"), t((4,), "bias")
        shape = T.conv2d(Tensor(xc.data), Tensor(wc.data), Tensor(bc.data), stride, pad).shape
        proj_c = rng.normal(size=shape)
        cases[f"conv2d_k{k}_s{stride}_p{pad}"] = (
            lambda xc=xc, wc=wc, bc=bc, stride=stride, pad=pad, proj_c=proj_c: _projected(
                T.conv2d(xc, wc, bc, stride, pad), proj_c
            ),
            {"x": xc, "weight": wc, "bias": bc},
        )
    for training in (True, False):
        xb = t(s4, "x")
        gb, bb = t((3,), "gamma"), t((3,), "beta")
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        proj_b = rng.normal(size=s4)
        cases[f"batch_norm_{'train' if training else 'eval'}"] = (
            lambda xb=xb, gb=gb, bb=bb, rm=rm, rv=rv, training=training, proj_b=proj_b: _projected(
                T.batch_norm(xb, gb, bb, rm.copy(), rv.copy(), training), proj_b
            ),
            {"x": xb, "gamma": gb, "beta": bb},
        )
    return cases


def op_suite(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error of every tensor-core op case."""
    return {name: max(check_gradients(fn, ts).values()) for name, (fn, ts) in op_cases(seed).items()}


def variant_suite(seed: int = 0, max_entries: int | None = 64) -> dict[str, float]:
    """Max relative gradient error of each fusion variant at shape (2, 6+4, 4, 4).

    Every parameter and both inputs are probed (a seeded subset of at most
    ``max_entries`` entries per tensor).
    """
    from .fusion import VARIANTS, FusionConfig, FusionStep

    cfg = FusionConfig(H=4, W=4, fc_hidden=0)
    out = {}
    for v in VARIANTS:
        rng = np.random.default_rng(seed)
        step = FusionStep(v, cfg, rng).train()
        L = Tensor(rng.normal(size=(2, cfg.C1, 4, 4)), requires_grad=True, name="lidar")
        C = Tensor(rng.normal(size=(2, cfg.C2, 4, 4)), requires_grad=True, name="camera")
        proj = rng.normal(size=(2, step.out_channels, 4, 4))
        tensors = {"lidar": L, "camera": C, **step.store.params}
        errs = check_gradients(lambda: _projected(step(L, C), proj), tensors, max_entries, seed)
        out[v] = max(errs.values())
    return out
