"""Dense float32 tensors with reverse-mode automatic differentiation.

The operator set is exactly what the SR models and the attribution
pipeline need: 2-D convolution (stride 1, square odd kernels, zero
padding), pixel shuffle, ReLU/PReLU, elementwise arithmetic, basic
slicing, ``abs`` and ``sum``. Values are stored as float32; every
reduction accumulates in float64 and rounds once at the end, so
repeated runs on identical inputs are bit-identical. (``gradcheck``
briefly widens storage to float64 for its difference probes; nothing
else ever changes the storage dtype.)

Operator results keep references to their parent tensors, forming an
implicit computation graph. ``backward()`` on a scalar traverses that
graph once in reverse topological order and deposits gradients on every
``requires_grad`` leaf. Gradients are linear in the backward seed:
seeding with 2.0 doubles every gradient exactly, because scaling by a
power of two commutes with float arithmetic.

Kink conventions: ``relu`` and ``abs`` use subgradient 0 at exactly 0;
``prelu`` assigns input 0 to its negative branch (derivative = slope).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "conv2d",
    "pixel_shuffle",
    "relu",
    "prelu",
    "identity",
    "gradcheck",
    "GradCheckReport",
]

_STORAGE_DTYPE = np.float32


@contextlib.contextmanager
def _wide_evaluation():
    """Store values in float64 for the duration of the scope.

    Every expressible graph is piecewise linear with float32
    coefficients; widening the storage does not change which linear piece
    is active, it only removes per-op rounding. The finite-difference
    oracle runs its probes here so that secants measure the function
    instead of float32 storage noise, while analytic gradients keep
    flowing through the normal float32 path.
    """
    global _STORAGE_DTYPE
    _STORAGE_DTYPE = np.float64
    try:
        yield
    finally:
        _STORAGE_DTYPE = np.float32


class Tensor:
    """A dense float32 array plus optional gradient state."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_STORAGE_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple["Tensor", ...] = ()
        self._backprop: Optional[Callable[[], None]] = None

    # ------------------------------------------------------------------ basics

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -------------------------------------------------------------- arithmetic

    def __add__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        _require_same_shape(self, other, "add")
        out = _node(self.data + other.data, (self, other))
        if out.requires_grad:
            def backprop():
                _accumulate(self, out.grad)
                _accumulate(other, out.grad)
            out._backprop = backprop
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        _require_same_shape(self, other, "sub")
        out = _node(self.data - other.data, (self, other))
        if out.requires_grad:
            def backprop():
                _accumulate(self, out.grad)
                _accumulate(other, -out.grad)
            out._backprop = backprop
        return out

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            scale = self.data.dtype.type(other)
            out = _node(self.data * scale, (self,))
            if out.requires_grad:
                def backprop():
                    _accumulate(self, out.grad * scale)
                out._backprop = backprop
            return out
        other = _as_tensor(other)
        _require_same_shape(self, other, "mul")
        out = _node(self.data * other.data, (self, other))
        if out.requires_grad:
            def backprop():
                _accumulate(self, out.grad * other.data)
                _accumulate(other, out.grad * self.data)
            out._backprop = backprop
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __abs__(self) -> "Tensor":
        out = _node(np.abs(self.data), (self,))
        if out.requires_grad:
            sign = np.sign(self.data)  # sign(0) == 0: subgradient convention
            def backprop():
                _accumulate(self, out.grad * sign)
            out._backprop = backprop
        return out

    def __getitem__(self, key) -> "Tensor":
        # np.array keeps scalar picks 0-d, where ascontiguousarray would
        # promote them to shape (1,) and break positional grad scatter
        out = _node(np.array(self.data[key]), (self,))
        if out.requires_grad:
            shape = self.data.shape
            def backprop():
                buf = np.zeros(shape, dtype=out.grad.dtype)
                buf[key] = out.grad
                _accumulate(self, buf)
            out._backprop = backprop
        return out

    def sum(self) -> "Tensor":
        """Sum of all entries as a scalar tensor (float64 accumulator)."""
        total = np.asarray(np.sum(self.data, dtype=np.float64), dtype=_STORAGE_DTYPE)
        out = _node(total, (self,))
        if out.requires_grad:
            shape = self.data.shape
            def backprop():
                _accumulate(self, np.full(shape, out.grad, dtype=out.grad.dtype))
            out._backprop = backprop
        return out

    # ---------------------------------------------------------------- backward

    def backward(self, seed: float = 1.0) -> None:
        """Propagate gradients from this scalar to all requires_grad leaves."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("output does not depend on any requires_grad tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.full(self.data.shape, seed, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backprop is not None:
                node._backprop()


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _STORAGE_DTYPE else data.astype(_STORAGE_DTYPE)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = parents if out.requires_grad else ()
    out._backprop = None
    return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    raise ContractError(f"expected a Tensor, got {type(value).__name__}")


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Never accumulates in place, so shared gradient arrays stay safe to alias.
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


# ------------------------------------------------------------------- operators


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Stride-1 cross-correlation of a (c_in,h,w) tensor with a
    (c_out,c_in,k,k) kernel, zero padding on both spatial axes.

    The product sums run in float64 (via the im2col matmul) and round to
    float32 once, in both the forward and the backward pass.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d input must be (c,h,w), got {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d kernel must be (c_out,c_in,k,k), got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square with odd side, got {kh}x{kw}")
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.data.shape[0]}, kernel expects {c_in}")
    if bias.data.shape != (c_out,):
        raise DimensionError(f"conv2d bias must be ({c_out},), got {bias.shape}")
    if padding < 0:
        raise ConfigError(f"conv2d padding must be >= 0, got {padding}")
    _, h, w = x.data.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    ho, wo = hp - kh + 1, wp - kw + 1

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, ho * wo)
    weights = kernel.data.reshape(c_out, c_in * kh * kw)
    acc = weights.astype(np.float64) @ cols.astype(np.float64)
    acc += bias.data.astype(np.float64)[:, None]
    out = _node(acc.astype(_STORAGE_DTYPE).reshape(c_out, ho, wo), (x, kernel, bias))

    if out.requires_grad:
        def backprop():
            dtype = out.grad.dtype
            g = out.grad.reshape(c_out, ho * wo).astype(np.float64)
            if kernel.requires_grad:
                gk = g @ cols.astype(np.float64).T
                _accumulate(kernel, gk.astype(dtype).reshape(kernel.data.shape))
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=1).astype(dtype))
            if x.requires_grad:
                gcols = weights.astype(np.float64).T @ g
                gcols = gcols.reshape(c_in, kh, kw, ho, wo)
                gpad = np.zeros((c_in, hp, wp), dtype=np.float64)
                for a in range(kh):
                    for b in range(kw):
                        gpad[:, a:a + ho, b:b + wo] += gcols[:, a, b]
                gx = gpad[:, padding:padding + h, padding:padding + w]
                _accumulate(x, gx.astype(dtype))
        out._backprop = backprop
    return out


def pixel_shuffle(x: Tensor, upscale: int) -> Tensor:
    """Depth-to-space: (c*s*s, h, w) -> (c, s*h, s*w).

    Output pixel (c, s*i + dy, s*j + dx) takes input channel
    c*s*s + dy*s + dx at position (i, j). The backward pass is the exact
    inverse permutation.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"pixel_shuffle input must be (c,h,w), got {x.shape}")
    if upscale < 1:
        raise ConfigError(f"pixel_shuffle factor must be >= 1, got {upscale}")
    c, h, w = x.data.shape
    s = upscale
    if c % (s * s) != 0:
        raise DimensionError(f"pixel_shuffle needs channels divisible by {s * s}, got {c}")
    co = c // (s * s)
    shuffled = x.data.reshape(co, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(co, h * s, w * s)
    out = _node(np.ascontiguousarray(shuffled), (x,))
    if out.requires_grad:
        def backprop():
            g = out.grad.reshape(co, h, s, w, s).transpose(0, 2, 4, 1, 3)
            _accumulate(x, np.ascontiguousarray(g.reshape(c, h, w)))
        out._backprop = backprop
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        mask = x.data > 0
        def backprop():
            _accumulate(x, out.grad * mask)
        out._backprop = backprop
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with a single learnable slope of shape (1,)."""
    if slope.data.shape != (1,):
        raise DimensionError(f"prelu slope must have shape (1,), got {slope.shape}")
    positive = x.data > 0
    s = slope.data[0]
    out = _node(np.where(positive, x.data, s * x.data), (x, slope))
    if out.requires_grad:
        def backprop():
            if x.requires_grad:
                _accumulate(x, np.where(positive, out.grad, out.grad * s))
            if slope.requires_grad:
                gs = np.sum(out.grad * x.data * ~positive, dtype=np.float64)
                _accumulate(slope, np.asarray([gs], dtype=out.grad.dtype))
        out._backprop = backprop
    return out


def identity(x: Tensor) -> Tensor:
    out = _node(x.data, (x,))
    if out.requires_grad:
        def backprop():
            _accumulate(x, out.grad)
        out._backprop = backprop
    return out


# ------------------------------------------------------------------ gradcheck


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check of one scalar function."""

    checked: int
    skipped: int
    max_rel_err: float
    failures: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.checked > 0 and not self.failures


def gradcheck(fn, x0: np.ndarray, *, num_coords: int = 50, step: float = 1e-3,
              rtol: float = 1e-3, atol: float = 1e-4,
              rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps a Tensor to a scalar Tensor. The analytic gradient flows
    through the regular float32 path; the difference probes run in the
    float64 evaluation scope, where the piecewise-linear graphs this
    engine expresses make central differences exact away from kinks
    regardless of step size. A coordinate whose differences at ``step``,
    ``step/2`` and ``step/4`` do not all agree sits next to a kink and
    is skipped rather than judged; requiring agreement at two step
    ratios keeps a coincidental cancellation across several kinks
    inside one stencil from passing as a clean coordinate.
    """
    rng = rng or np.random.default_rng(0)
    x0 = np.asarray(x0, dtype=np.float32)

    leaf = Tensor(x0.copy(), requires_grad=True)
    y = fn(leaf)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ContractError("gradcheck target must return a scalar Tensor")
    y.backward()
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(x0)).ravel()

    def value_at(flat: np.ndarray) -> float:
        return float(fn(Tensor(flat.reshape(x0.shape))).data)

    n = x0.size
    coords = rng.permutation(n)[:min(num_coords, n)]
    flat = x0.ravel().astype(np.float64)

    checked = skipped = 0
    max_rel = 0.0
    failures: list[tuple[int, float, float]] = []
    with _wide_evaluation():
        for i in coords:
            def central(h: float) -> float:
                probe = flat.copy()
                probe[i] = flat[i] + h
                hi = value_at(probe)
                probe[i] = flat[i] - h
                lo = value_at(probe)
                return (hi - lo) / (2.0 * h)

            fd_full = central(step)
            fd_half = central(step / 2.0)
            fd_quarter = central(step / 4.0)
            spread = max(abs(fd_full - fd_half), abs(fd_half - fd_quarter))
            scale = max(abs(fd_full), abs(fd_half), abs(fd_quarter))
            if spread > rtol * scale + atol:
                skipped += 1  # kink inside the stencil
                continue
            checked += 1
            an = float(analytic[i])
            err = abs(an - fd_quarter)
            rel = err / max(abs(an), abs(fd_quarter), atol)
            max_rel = max(max_rel, rel)
            if err > rtol * max(abs(an), abs(fd_quarter)) + atol:
                failures.append((int(i), an, fd_quarter))
    return GradCheckReport(checked=checked, skipped=skipped, max_rel_err=max_rel,
                           failures=failures)
