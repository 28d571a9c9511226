"""Minimal reverse-mode autodiff over dense numpy arrays.

Tape-style: every op records its parents and a backward closure on the
output tensor; the tape is rebuilt on every forward pass. Backward walks
the graph in exact reverse topological order, so gradient accumulation
is deterministic. Second-order quantities (Hessian-vector products and
the Hessian diagonal) are obtained by central finite differences of
gradients, keeping the engine strictly first order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    """Dense array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every requires_grad tensor.

        Each call runs one clean reverse pass and adds its result to .grad,
        so repeated calls without clearing grads accumulate; the trainer
        rebuilds the tape every step so leaves start fresh each pass.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ShapeError("backward", self.data.shape)
        order = trace(self)
        ctx: dict[int, np.ndarray] = {}

        def acc(t: "Tensor", g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            prev = ctx.get(id(t))
            ctx[id(t)] = g if prev is None else prev + g

        acc(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is None:
                continue
            g = ctx.get(id(node))
            if g is None:
                continue
            node._backward(g, acc)
        for node in order:
            if not node.requires_grad:
                continue
            g = ctx.get(id(node))
            if g is None:
                continue
            node.grad = np.array(g) if node.grad is None else node.grad + g


def trace(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below root (deterministic, parents first)."""
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
        # reversed so parents are visited left-to-right in the final order
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def clear_grads(root: Tensor) -> None:
    """Drop accumulated gradients everywhere below root (leaves included)."""
    for node in trace(root):
        node.grad = None


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    else:
        out._op = op
    return out


def constant(data) -> Tensor:
    """Wrap data as a non-differentiable tensor."""
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def backward(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    return _make(out_data, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports adding a (C,) bias to (N,C) or (N,C,H,W)."""
    if a.shape == b.shape:
        reduce_axes: tuple[int, ...] | None = None
        b_data = b.data
    elif b.data.ndim == 1 and a.data.ndim == 2 and b.shape[0] == a.shape[1]:
        reduce_axes = (0,)
        b_data = b.data
    elif b.data.ndim == 1 and a.data.ndim == 4 and b.shape[0] == a.shape[1]:
        reduce_axes = (0, 2, 3)
        b_data = b.data.reshape(1, -1, 1, 1)
    else:
        raise ShapeError("add", a.shape, b.shape)
    out_data = a.data + b_data

    def backward(g, acc):
        acc(a, g)
        acc(b, g if reduce_axes is None else g.sum(axis=reduce_axes))

    return _make(out_data, "add", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    out_data = a.data.T.copy()

    def backward(g, acc):
        acc(a, g.T)

    return _make(out_data, "transpose", (a,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    out_data = a.data - b.data

    def backward(g, acc):
        acc(a, g)
        acc(b, -g)

    return _make(out_data, "sub", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    out_data = a.data * c

    def backward(g, acc):
        acc(a, g * c)

    return _make(out_data, "scale", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g, acc):
        acc(a, g * mask)

    return _make(out_data, "relu", (a,), backward)


def flatten(a: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(rest))."""
    n = a.shape[0]
    out_data = a.data.reshape(n, -1)
    in_shape = a.shape

    def backward(g, acc):
        acc(a, g.reshape(in_shape))

    return _make(out_data, "flatten", (a,), backward)


def avg_pool2d(a: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling; H and W must be divisible by kernel."""
    if a.data.ndim != 4 or a.shape[2] % kernel or a.shape[3] % kernel:
        raise ShapeError("avg_pool2d", a.shape, (kernel, kernel))
    n, c, h, w = a.shape
    k = kernel
    out_data = a.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g, acc):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        acc(a, up)

    return _make(out_data, "avg_pool2d", (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C), mean over the spatial dims."""
    if a.data.ndim != 4:
        raise ShapeError("global_avg_pool", a.shape)
    n, c, h, w = a.shape
    out_data = a.data.mean(axis=(2, 3))

    def backward(g, acc):
        acc(a, np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w))

    return _make(out_data, "global_avg_pool", (a,), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, c, ho, wo, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW input, (Cout,Cin,kh,kw) weight."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    cols, ho, wo = _im2col(xp, kh, kw, stride)  # (n, L, cin*kh*kw)
    wf = w.data.reshape(cout, -1)
    out_data = (cols @ wf.T).transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def backward(g, acc):
        gf = g.reshape(n, cout, ho * wo).transpose(0, 2, 1)  # (n, L, cout)
        gw = np.einsum("nlo,nlk->ok", gf, cols)
        acc(w, gw.reshape(w.shape))
        if x.requires_grad:
            gcols = gf @ wf  # (n, L, cin*kh*kw)
            gx = np.zeros_like(xp)
            patch = gcols.reshape(n, ho, wo, cin, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        patch[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if pad:
                gx = gx[:, :, pad:-pad, pad:-pad]
            acc(x, gx)

    return _make(out_data, "conv2d", (x, w), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    s = np.exp(_log_softmax(a.data))

    def backward(g, acc):
        acc(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, "softmax", (a,), backward)


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean-over-batch cross-entropy between softmax(logits) and a target
    distribution. Differentiable w.r.t. logits; targets are treated as
    constants (the teacher is always frozen here).
    """
    if logits.shape != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    t = targets.data
    logp = _log_softmax(logits.data)
    n = logits.shape[0] if logits.data.ndim > 1 else 1
    out_data = np.asarray(-(t * logp).sum() / n, dtype=logits.dtype)
    if not np.isfinite(out_data):
        raise NumericError("cross_entropy produced a non-finite value")

    def backward(g, acc):
        s = np.exp(logp)
        tsum = t.sum(axis=-1, keepdims=True)
        acc(logits, g * (s * tsum - t) / n)

    return _make(out_data, "cross_entropy", (logits, targets), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all entries of the squared difference."""
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    out_data = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def backward(g, acc):
        acc(a, g * 2.0 * diff / n)
        acc(b, g * -2.0 * diff / n)

    return _make(out_data, "mse", (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries."""
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g, acc):
        acc(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(out_data, "sum", (a,), backward)


def l2_norm_sq(a: Tensor) -> Tensor:
    """Sum of squared entries."""
    out_data = np.asarray((a.data * a.data).sum(), dtype=a.dtype)

    def backward(g, acc):
        acc(a, g * 2.0 * a.data)

    return _make(out_data, "l2_norm_sq", (a,), backward)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum(a * weights) with constant weights; picks out scalar outputs for
    per-coordinate backward passes (Jacobian rows)."""
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape:
        raise ShapeError("weighted_sum", a.shape, w.shape)
    out_data = np.asarray((a.data * w).sum(), dtype=a.dtype)

    def backward(g, acc):
        acc(a, g * w)

    return _make(out_data, "weighted_sum", (a,), backward)


# ---------------------------------------------------------------------------
# second-order helpers (finite differences of gradients)
# ---------------------------------------------------------------------------

GradFn = Callable[[np.ndarray], np.ndarray]


def hvp(grad_fn: GradFn, theta: np.ndarray, v: np.ndarray, eps0: float = 1e-3) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient:
    Hv ~ [g(theta + eps v) - g(theta - eps v)] / (2 eps), eps = eps0 / ||v||.

    grad_fn maps a flat parameter vector to the flat gradient of the loss.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("hvp: probe vector is not finite")
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        raise ValueError("hvp: probe vector has zero norm")
    eps = eps0 / nv
    gp = grad_fn(theta + eps * v)
    gm = grad_fn(theta - eps * v)
    out = (gp - gm) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise NumericError("hvp: non-finite result from finite-difference step")
    return out


def hessian_diag(grad_fn: GradFn, theta: np.ndarray, samples: int = 8,
                 rng: np.random.Generator | None = None, eps0: float = 1e-3,
                 mode: str = "auto") -> np.ndarray:
    """Estimate diag(H) for the loss behind grad_fn.

    mode "hutchinson": (1/K) sum_k v_k * (H v_k) with Rademacher probes
    from rng; unbiased, and exact for diagonal Hessians at any K.
    mode "exact": one HVP per unit vector (P passes), exact up to the FD
    step; intended for small nets.
    mode "auto": exact when P <= 64, hutchinson otherwise.
    """
    theta = np.asarray(theta, dtype=np.float64)
    p = theta.size
    if mode == "auto":
        mode = "exact" if p <= 64 else "hutchinson"
    if mode == "exact":
        diag = np.empty(p)
        e = np.zeros(p)
        for i in range(p):
            e[i] = 1.0
            diag[i] = hvp(grad_fn, theta, e, eps0)[i]
            e[i] = 0.0
        return diag
    if mode != "hutchinson":
        raise ValueError(f"hessian_diag: unknown mode {mode!r}")
    if samples < 1:
        raise ValueError("hessian_diag: samples must be >= 1")
    if rng is None:
        raise ValueError("hessian_diag: hutchinson mode needs a seeded rng")
    acc = np.zeros(p)
    for _ in range(samples):
        v = rng.integers(0, 2, size=p).astype(np.float64) * 2.0 - 1.0
        acc += v * hvp(grad_fn, theta, v, eps0)
    return acc / samples


def check_finite(arr: np.ndarray, context: str) -> np.ndarray:
    """Raise NumericError naming the context if arr has NaN or Inf entries."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")
    return arr
