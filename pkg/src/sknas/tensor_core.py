"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately minimal: exactly the operator set the searchable supernet
needs, recorded on an explicit tape.  Everything runs in float64 with a
fixed reduction order so repeated runs are bit-identical.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NondeterministicFunctionError",
    "active_tape",
    "no_tape",
    "record",
    "backward",
    "scalar",
    "add",
    "mul",
    "neg",
    "tsum",
    "mask_mul",
    "masked_sum_sq",
    "scale_by",
    "log",
    "clamp_min",
    "conv2d_depthwise",
    "conv2d_pointwise",
    "relu6",
    "channel_affine",
    "global_avg_pool",
    "dense",
    "softmax_cross_entropy",
    "sigmoid",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when an operation's input shapes are inconsistent."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NondeterministicFunctionError(RuntimeError):
    """Raised when a function under test returns different values for identical inputs."""


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``data`` is row-major; ``grad`` (when present) always has the same
    shape.  Tensors are treated as immutable during a forward pass; the
    training loop mutates ``data`` in place between passes.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"tensor of shape {self.shape} is not a scalar")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Scalar arithmetic sugar used by the runtime model; full ops live below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of operations; replaying it in reverse drives backprop.

    The tape is cleared only explicitly.  Use as a context manager to make
    it the active tape for a block (tapes nest as a stack).
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.pop()


_STACK: list[Tape | None] = [Tape()]


def active_tape() -> Tape | None:
    return _STACK[-1]


class no_tape:
    """Context manager that disables recording (cheap inference passes)."""

    def __enter__(self):
        _STACK.append(None)
        return self

    def __exit__(self, *exc):
        _STACK.pop()


def record(out: Tensor, backward_fn: Callable) -> None:
    """Append a custom entry to the active tape.

    ``backward_fn(grad_out, accumulate)`` must route ``grad_out`` to the
    entry's inputs via ``accumulate(tensor, grad_array)``.
    """
    tape = _STACK[-1]
    if tape is not None:
        tape._entries.append((out, backward_fn))


def _result(value: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    taping = _STACK[-1] is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=taping)
    if taping:
        record(out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

    Replays the tape in reverse recorded order.  Repeated calls without
    zeroing gradients accumulate.
    """
    if loss.data.shape != ():
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    if tape is None:
        tape = _STACK[-1]
    if tape is None or len(tape) == 0:
        raise RuntimeError("backward: no recorded operations on the active tape")

    # grads holds [tensor, array, owned]; borrowed arrays from backward
    # closures are never mutated, only replaced on the second contribution.
    grads: dict[int, list] = {id(loss): [loss, np.ones((), dtype=np.float64), True]}

    def accumulate(t: Tensor, g) -> None:
        entry = grads.get(id(t))
        if entry is None:
            grads[id(t)] = [t, g, False]
        elif entry[2]:
            entry[1] += g
        else:
            entry[1] = entry[1] + g
            entry[2] = True

    for out, backward_fn in reversed(tape._entries):
        entry = grads.get(id(out))
        if entry is None:
            continue
        backward_fn(entry[1], accumulate)

    for t, g, _ in grads.values():
        if t.requires_grad:
            g = np.asarray(g, dtype=np.float64)
            t.grad = g if t.grad is None else t.grad + g


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.float64(value), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError("add", f"shape mismatch {a.shape} vs {b.shape}")

        def bwd(go, acc):
            acc(a, go)
            acc(b, go)

        return _result(a.data + b.data, (a, b), bwd)

    c = float(b)

    def bwd(go, acc):
        acc(a, go)

    return _result(a.data + c, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError("mul", f"shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data

        def bwd(go, acc):
            acc(a, go * bd)
            acc(b, go * ad)

        return _result(ad * bd, (a, b), bwd)

    c = float(b)

    def bwd(go, acc):
        acc(a, go * c)

    return _result(a.data * c, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(go, acc):
        acc(a, -go)

    return _result(-a.data, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape

    def bwd(go, acc):
        acc(a, np.full(shape, float(go), dtype=np.float64))

    return _result(a.data.sum(), (a,), bwd)


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant 0/1 mask (not a differentiable input)."""
    if a.shape != mask.shape:
        raise ShapeError("mask_mul", f"mask shape {mask.shape} != tensor shape {a.shape}")

    def bwd(go, acc):
        acc(a, go * mask)

    return _result(a.data * mask, (a,), bwd)


def masked_sum_sq(a: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of squared elements over a constant 0/1 mask; scalar output."""
    if a.shape != mask.shape:
        raise ShapeError("masked_sum_sq", f"mask shape {mask.shape} != tensor shape {a.shape}")
    ad = a.data

    def bwd(go, acc):
        acc(a, (2.0 * float(go)) * ad * mask)

    return _result((ad * ad * mask).sum(), (a,), bwd)


def scale_by(a: Tensor, g: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (gate), differentiable in both."""
    if g.data.shape != ():
        raise ShapeError("scale_by", f"gate must be scalar, got shape {g.data.shape}")
    ad, gd = a.data, float(g.data)

    def bwd(go, acc):
        acc(a, go * gd)
        acc(g, np.float64((go * ad).sum()))

    return _result(ad * gd, (a, g), bwd)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(go, acc):
        acc(a, go / ad)

    return _result(np.log(ad), (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is zero through the clamped branch."""
    ad = a.data
    open_mask = ad > floor

    def bwd(go, acc):
        acc(a, go * open_mask)

    return _result(np.maximum(ad, floor), (a,), bwd)


def sigmoid(z: np.ndarray | float) -> np.ndarray:
    """Numerically stable logistic function on raw arrays (not a taped op)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# network ops


def _window_view(xp: np.ndarray, ho: int, wo: int, k: int, stride: int) -> np.ndarray:
    """Zero-copy [N,C,Ho,Wo,K,K] view of sliding windows over a padded input."""
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(xp.shape[0], xp.shape[1], ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False,
    )


def conv2d_depthwise(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """Per-channel KxK convolution with zero padding of K//2 on each side.

    Output spatial size is ceil(H/stride); windows are centered on the
    strided grid, which makes a 5x5 kernel with a zeroed outer shell agree
    exactly with the 3x3 convolution of its center.
    """
    if x.data.ndim != 4:
        raise ShapeError("conv2d_depthwise", f"input must be [N,C,H,W], got {x.shape}")
    if w.data.ndim != 3 or w.shape[1] != w.shape[2]:
        raise ShapeError("conv2d_depthwise", f"weights must be [C,K,K], got {w.shape}")
    if w.shape[1] % 2 == 0:
        raise ShapeError("conv2d_depthwise", f"kernel size {w.shape[1]} must be odd")
    if stride not in (1, 2):
        raise ShapeError("conv2d_depthwise", f"stride must be 1 or 2, got {stride}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            "conv2d_depthwise",
            f"channel mismatch: input has {x.shape[1]} channels, weights have {w.shape[0]}",
        )

    n, c, h, win = x.shape
    k = w.shape[1]
    p = k // 2
    ho = (h - 1) // stride + 1
    wo = (win - 1) // stride + 1

    xp = np.zeros((n, c, h + 2 * p, win + 2 * p), dtype=np.float64)
    xp[:, :, p : p + h, p : p + win] = x.data
    windows = _window_view(xp, ho, wo, k, stride)
    wd = w.data
    out = np.einsum("nchwab,cab->nchw", windows, wd)

    def bwd(go, acc):
        if w.requires_grad:
            acc(w, np.einsum("nchw,nchwab->cab", go, windows))
        if x.requires_grad:
            # Transposed pass: correlate the stride-dilated output gradient
            # with the flipped kernel; windows then have stride 1.
            hd = stride * (ho - 1) + 1
            wd_len = stride * (wo - 1) + 1
            gp = np.zeros((n, c, hd + 2 * (k - 1), wd_len + 2 * (k - 1)), dtype=np.float64)
            gp[:, :, k - 1 : k - 1 + hd : stride, k - 1 : k - 1 + wd_len : stride] = go
            gwin = _window_view(gp, hd + k - 1, wd_len + k - 1, k, 1)
            gxp = np.einsum("nchwab,cab->nchw", gwin, wd[:, ::-1, ::-1])
            acc(x, gxp[:, :, p : p + h, p : p + win])

    return _result(out, (x, w), bwd)


def conv2d_pointwise(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution: per-pixel linear map over channels, w is [Cout,Cin]."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d_pointwise", f"input must be [N,C,H,W], got {x.shape}")
    if w.data.ndim != 2:
        raise ShapeError("conv2d_pointwise", f"weights must be [Cout,Cin], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            "conv2d_pointwise",
            f"channel mismatch: input has {x.shape[1]} channels, weights expect {w.shape[1]}",
        )
    n, c, h, win = x.shape
    xd, wd = x.data, w.data
    x2 = xd.reshape(n, c, h * win)
    out = np.matmul(wd, x2).reshape(n, wd.shape[0], h, win)

    def bwd(go, acc):
        go2 = go.reshape(n, wd.shape[0], h * win)
        if x.requires_grad:
            acc(x, np.matmul(wd.T, go2).reshape(n, c, h, win))
        if w.requires_grad:
            acc(w, np.matmul(go2, x2.transpose(0, 2, 1)).sum(axis=0))

    return _result(out, (x, w), bwd)


def relu6(x: Tensor) -> Tensor:
    xd = x.data
    gate = (xd > 0.0) & (xd < 6.0)  # subgradient 0 at both kinks

    def bwd(go, acc):
        acc(x, go * gate)

    return _result(np.clip(xd, 0.0, 6.0), (x,), bwd)


def channel_affine(x: Tensor, scale: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel learned scale (and optional bias) on an [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise ShapeError("channel_affine", f"input must be [N,C,H,W], got {x.shape}")
    if scale.shape != (x.shape[1],):
        raise ShapeError("channel_affine", f"scale shape {scale.shape} != ({x.shape[1]},)")
    if bias is not None and bias.shape != (x.shape[1],):
        raise ShapeError("channel_affine", f"bias shape {bias.shape} != ({x.shape[1]},)")
    xd, sd = x.data, scale.data
    out = xd * sd[None, :, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bwd(go, acc):
        if x.requires_grad:
            acc(x, go * sd[None, :, None, None])
        if scale.requires_grad:
            acc(scale, (go * xd).sum(axis=(0, 2, 3)))
        if bias is not None and bias.requires_grad:
            acc(bias, go.sum(axis=(0, 2, 3)))

    inputs = (x, scale) if bias is None else (x, scale, bias)
    return _result(out, inputs, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", f"input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bwd(go, acc):
        acc(x, np.broadcast_to(go[:, :, None, None] * inv, (n, c, h, w)).copy())

    return _result(x.data.mean(axis=(2, 3)), (x,), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map [N,F] @ [F,O] + [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("dense", f"expected x [N,F] and w [F,O], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError("dense", f"feature mismatch: x has {x.shape[1]}, w expects {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError("dense", f"bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data

    def bwd(go, acc):
        if x.requires_grad:
            acc(x, go @ wd.T)
        if w.requires_grad:
            acc(w, xd.T @ go)
        if b.requires_grad:
            acc(b, go.sum(axis=0))

    return _result(xd @ wd + b.data, (x, w, b), bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", f"logits must be [N,K], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        bad = int(np.argmax((labels < 0) | (labels >= k)))
        raise ValueError(
            f"softmax_cross_entropy: label {int(labels[bad])} at index {bad} out of range [0, {k})"
        )

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(n), labels].mean()

    def bwd(go, acc):
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1.0
        acc(logits, g * (float(go) / n))

    return _result(np.float64(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f: Callable[[Tensor], Tensor], w: Tensor, h: float = 1e-5) -> float:
    """Compare autodiff gradients of ``f`` at ``w`` against central differences.

    Returns max over elements of |autodiff - central| / max(1e-8, |central|).
    ``f`` must be deterministic; this is verified by evaluating it twice.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: step must be positive")

    with Tape():
        y0 = f(w).item()
    with Tape():
        y1 = f(w).item()
    if y0 != y1:
        raise NondeterministicFunctionError(
            f"function returned {y0!r} then {y1!r} for identical inputs"
        )

    was_requires = w.requires_grad
    w.requires_grad = True
    saved_grad = w.grad
    w.grad = None
    try:
        with Tape() as tape:
            loss = f(w)
            backward(loss, tape)
        # a parameter the function never touches has zero gradient
        autodiff = np.zeros_like(w.data) if w.grad is None else np.asarray(w.grad).copy()
    finally:
        w.grad = saved_grad
        w.requires_grad = was_requires

    flat = w.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with Tape():
            fp = f(w).item()
        flat[i] = orig - h
        with Tape():
            fm = f(w).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)

    numeric = numeric.reshape(w.shape)
    rel = np.abs(autodiff - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(rel.max())
