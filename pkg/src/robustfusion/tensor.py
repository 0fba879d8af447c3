"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the fusion steps and the toy detector need are provided.
Every op records its inputs and a closure computing the vector-Jacobian
product; :func:`backward` walks the recorded graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires it.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when an operand's shape violates an op's contract."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class DetachedError(RuntimeError):
    """Raised when backward is invoked on a tensor outside the graph."""


class MissingGradientError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"parameter {name!r} has no gradient; was it used in the forward pass?")
        self.name = name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data, dtype=DTYPE)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _vjp=vjp if needs else None)


def _require_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (B, C, H, W), got shape {x.shape}", axis="rank")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so callers reset them
    (``ParamStore.zero_grad``) between steps.
    """
    if not loss.requires_grad:
        raise DetachedError("backward() called on a tensor that does not require grad")
    if loss.data.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}", axis="loss")
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if not node._parents:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
        if node.grad is not None or node.name is not None:
            # named intermediates keep their gradient for inspection
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs identical shapes, got {a.shape} and {b.shape}", axis="shape")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs identical shapes, got {a.shape} and {b.shape}", axis="shape")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def elementwise(a: Tensor, b: Tensor, op: str = "add") -> Tensor:
    if op != "add":
        raise ValueError(f"unsupported elementwise op {op!r}")
    return add(a, b)


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- structural


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b`` after ``a`` along the channel axis."""
    _require_rank4(a, "first operand")
    _require_rank4(b, "second operand")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"concat_channels: {name} mismatch {a.shape[axis]} vs {b.shape[axis]}", axis=name
            )
    ca = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def concat_many(parts: Sequence[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = concat_channels(out, p)
    return out


def resample(x: Tensor, mode: str) -> Tensor:
    """2x average-pool down (``down2``) or nearest-neighbour up (``up2``)."""
    _require_rank4(x, "resample input")
    B, C, H, W = x.shape
    if mode == "down2":
        if H % 2 or W % 2:
            raise DimensionError(
                f"down2 needs even spatial dims, got {H}x{W}; pad the input first",
                axis="height" if H % 2 else "width",
            )
        out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

        def vjp(g):
            return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

        return _result(out, (x,), vjp)
    if mode == "up2":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def vjp(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

        return _result(out, (x,), vjp)
    raise ValueError(f"unknown resample mode {mode!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank4(x, "global_avg_pool input")
    B, C, H, W = x.shape
    n = H * W
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each (batch, channel) plane of ``x`` by ``gate[b, c]``."""
    _require_rank4(x, "scale_channels input")
    B, C = x.shape[:2]
    if gate.shape != (B, C):
        raise DimensionError(f"gate shape {gate.shape} does not match (B, C)=({B}, {C})", axis="channels")
    xd, gd = x.data, gate.data
    return _result(
        xd * gd[:, :, None, None],
        (x, gate),
        lambda g: (g * gd[:, :, None, None], np.sum(g * xd, axis=(2, 3))),
    )


# ---------------------------------------------------------------- learned ops


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for a batch of row vectors."""
    if x.ndim != 2:
        raise DimensionError(f"linear input must be (N, D), got {x.shape}", axis="rank")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"linear weight {weight.shape} incompatible with input width {x.shape[1]}", axis="features"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear bias {bias.shape} must be ({weight.shape[0]},)", axis="features")
    xd, wd = x.data, weight.data
    return _result(
        xd @ wd.T + bias.data,
        (x, weight, bias),
        lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)),
    )


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over a (B, C, H, W) tensor.

    The im2col layout is (input channel, kernel row, kernel column), which
    fixes the reduction order of each output cell.
    """
    _require_rank4(x, "conv2d input")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be (C_out, C_in, k, k), got {weight.shape}", axis="rank")
    B, C, H, W = x.shape
    O, Ci, k, k2 = weight.shape
    if Ci != C:
        raise DimensionError(f"conv2d: weight expects {Ci} input channels, input has {C}", axis="channels")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {k}x{k2}", axis="kernel")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    if bias.shape != (O,):
        raise DimensionError(f"conv2d bias {bias.shape} must be ({O},)", axis="channels")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {H}x{W}", axis="height" if Ho < 1 else "width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, k, stride)  # (B, C, Ho, Wo, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw, gb

    return _result(out, (x, weight, bias), vjp)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over (batch, height, width).

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    _require_rank4(x, "batch_norm input")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm affine params must be ({C},)", axis="channels")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv[None, :, None, None]

        def vjp_eval(g):
            return g * gd * inv[None, :, None, None], np.sum(g * xhat, axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _result(xhat * gd + beta.data[None, :, None, None], (x, gamma, beta), vjp_eval)

    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean[None, :, None, None]
    var = (centered**2).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean
    running_var *= momentum
    running_var += (1.0 - momentum) * (var * n / (n - 1) if n > 1 else var)

    def vjp(g):
        gxhat = g * gd
        gx = (
            inv[None, :, None, None]
            / n
            * (
                n * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * np.sum(gxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
            )
        )
        return gx, np.sum(g * xhat, axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(xhat * gd + beta.data[None, :, None, None], (x, gamma, beta), vjp)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named learnable tensors, non-learnable buffers, and Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=DTYPE)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def merge(self, other: "ParamStore") -> None:
        for name, p in other.params.items():
            if name in self.params:
                raise KeyError(f"duplicate parameter name {name!r}")
            self.params[name] = p
            self.m[name] = other.m[name]
            self.v[name] = other.v[name]
        for name, b in other.buffers.items():
            if name in self.buffers:
                raise KeyError(f"duplicate buffer name {name!r}")
            self.buffers[name] = b

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for n, p in self.params.items():
            new.add(n, p.data)
            new.m[n] = self.m[n].copy()
            new.v[n] = self.v[n].copy()
        for n, b in self.buffers.items():
            new.add_buffer(n, b)
        new.step_count = self.step_count
        return new


def adam_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update, applied in place; returns ``store``."""
    b1, b2 = betas
    for name, p in store.params.items():
        if p.grad is None:
            raise MissingGradientError(name)
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.params.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"RFCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def _pad_shape(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise DimensionError(f"checkpoint records at most rank 4, got {shape}", axis="rank")
    return (1,) * (4 - len(shape)) + tuple(shape)  # type: ignore[return-value]


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays in the flat little-endian checkpoint format.

    Layout: magic (8 bytes), version u32, count u32, then per record
    name length u32, UTF-8 name, shape as 4 x u32 (left-padded with 1s),
    float64 payload in C order.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<4I", *_pad_shape(arr.shape)))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint; every array comes back with its padded rank-4 shape."""
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        shape = struct.unpack_from("<4I", buf, off)
        off += 16
        size = int(np.prod(shape))
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(DTYPE)
        off += 8 * size
    return out


def load_into(store: ParamStore, arrays: dict[str, np.ndarray]) -> None:
    for name, p in store.params.items():
        p.data[...] = arrays[name].reshape(p.shape)
    for name, b in store.buffers.items():
        b[...] = arrays[name].reshape(b.shape)


def parameters(store: ParamStore) -> Iterable[Tensor]:
    return store.params.values()
