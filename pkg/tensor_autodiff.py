#!/usr/bin/env python3
"""Define-by-run reverse-mode autodiff over numpy arrays.

A `Graph` records one node per op as the forward pass executes; `backward`
walks the tape in reverse. Training runs in float32; `gradient_check` re-runs
the same function in a float64 graph against central differences.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import seeds
from errors import ContractError, DomainError, ShapeError

log = logging.getLogger(__name__)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def parameter(cls, data, name: str = "", dtype=np.float32) -> "Tensor":
        return cls(np.array(data, dtype=dtype), requires_grad=True, name=name, dtype=dtype)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: List[Tensor]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Graph:
    """Tape of op records for one forward pass.

    `training` switches batch-norm statistics and dropout; dropout masks come from
    a counter-based stream keyed by (seed, layer name, step). With `grad=False`
    nothing is recorded, for inference and frozen-encoder passes.
    """

    def __init__(self, training: bool = False, seed: int = 0, step: int = 0, dtype=np.float32,
                 check_finite: bool = False, grad: bool = True):
        self.training = training
        self.grad = grad
        self.seed = seed
        self.step = step
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: List[Node] = []
        self.buffer_updates: List[Tuple[np.ndarray, np.ndarray]] = []

    # -- plumbing -----------------------------------------------------------------

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x), dtype=self.dtype)

    def _data(self, t: Tensor) -> np.ndarray:
        return t.data if t.data.dtype == self.dtype else t.data.astype(self.dtype)

    def _record(self, kind: str, inputs: List[Tensor], out_data: np.ndarray, backward) -> Tensor:
        out_data = np.asarray(out_data, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise DomainError(f"non-finite output at node {len(self.nodes)} ({kind})")
        out = Tensor(out_data, requires_grad=self.grad and any(t.requires_grad for t in inputs), dtype=None)
        if out.requires_grad:
            self.nodes.append(Node(kind, inputs, out, backward))
        return out

    def _binary(self, kind: str, a, b, fn):
        a, b = self.lift(a), self.lift(b)
        try:
            return a, b, fn(self._data(a), self._data(b))
        except ValueError as e:
            raise ShapeError(f"{kind}: {e}")

    def forward(self, fn: Callable, *inputs):
        """Run `fn(graph, *tensors)`; plain arrays are lifted to constants."""
        return fn(self, *(self.lift(x) for x in inputs))

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
        """Gradients of a scalar `loss` for every tracked leaf (zeros for `wrt` entries it never touched)."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = t

        result: Dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            if key in grads:
                result[t] = np.asarray(grads[key], dtype=t.data.dtype).reshape(t.shape)
        for t in wrt or ():
            if t not in result:
                result[t] = np.zeros_like(t.data)
        for t, g in result.items():
            t.grad = g
        return result

    def commit_buffers(self) -> None:
        """Write batch-norm running statistics gathered during a training forward."""
        for target, value in self.buffer_updates:
            target[...] = value
        self.buffer_updates.clear()

    # -- elementwise ----------------------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b, out = self._binary("add", a, b, np.add)
        return self._record("add", [a, b], out, lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))

    def sub(self, a, b) -> Tensor:
        a, b, out = self._binary("sub", a, b, np.subtract)
        return self._record("sub", [a, b], out, lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))

    def mul(self, a, b) -> Tensor:
        a, b, out = self._binary("mul", a, b, np.multiply)
        A, B = self._data(a), self._data(b)
        return self._record("mul", [a, b], out,
                            lambda g: (unbroadcast(g * B, a.shape), unbroadcast(g * A, b.shape)))

    def div(self, a, b) -> Tensor:
        a, b, out = self._binary("div", a, b, np.divide)
        A, B = self._data(a), self._data(b)
        return self._record("div", [a, b], out,
                            lambda g: (unbroadcast(g / B, a.shape), unbroadcast(-g * A / (B * B), b.shape)))

    def neg(self, x) -> Tensor:
        x = self.lift(x)
        return self._record("neg", [x], -self._data(x), lambda g: (-g,))

    def _unary(self, kind: str, x, fn, dfn) -> Tensor:
        x = self.lift(x)
        X = self._data(x)
        out = fn(X)
        return self._record(kind, [x], out, lambda g: (g * dfn(X, out),))

    def exp(self, x) -> Tensor:
        return self._unary("exp", x, np.exp, lambda X, Y: Y)

    def log(self, x) -> Tensor:
        return self._unary("log", x, np.log, lambda X, Y: 1.0 / X)

    def sqrt(self, x) -> Tensor:
        return self._unary("sqrt", x, np.sqrt, lambda X, Y: 0.5 / Y)

    def tanh(self, x) -> Tensor:
        return self._unary("tanh", x, np.tanh, lambda X, Y: 1.0 - Y * Y)

    def sigmoid(self, x) -> Tensor:
        return self._unary("sigmoid", x, lambda X: 0.5 * (1.0 + np.tanh(0.5 * X)), lambda X, Y: Y * (1.0 - Y))

    def relu(self, x) -> Tensor:
        return self._unary("relu", x, lambda X: np.maximum(X, 0), lambda X, Y: (X > 0).astype(X.dtype))

    def cos(self, x) -> Tensor:
        return self._unary("cos", x, np.cos, lambda X, Y: -np.sin(X))

    def arccos(self, x) -> Tensor:
        return self._unary("arccos", x, np.arccos, lambda X, Y: -1.0 / np.sqrt(1.0 - X * X))

    def clip(self, x, lo: float, hi: float) -> Tensor:
        x = self.lift(x)
        X = self._data(x)
        inside = ((X >= lo) & (X <= hi)).astype(X.dtype)
        return self._record("clip", [x], np.clip(X, lo, hi), lambda g: (g * inside,))

    def select(self, cond: np.ndarray, a, b) -> Tensor:
        """Elementwise `a` where `cond` else `b`; `cond` is a constant mask."""
        a, b = self.lift(a), self.lift(b)
        cond = np.asarray(cond, dtype=bool)
        try:
            out = np.where(cond, self._data(a), self._data(b))
        except ValueError as e:
            raise ShapeError(f"select: {e}")
        return self._record("select", [a, b], out, lambda g: (
            unbroadcast(np.where(cond, g, 0), a.shape), unbroadcast(np.where(cond, 0, g), b.shape)))

    # -- reductions and shape -----------------------------------------------------

    def sum(self, x, axis=None, keepdims: bool = False) -> Tensor:
        x = self.lift(x)
        X = self._data(x)
        out = X.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, X.shape).copy(),)
        return self._record("sum", [x], out, backward)

    def mean(self, x, axis=None, keepdims: bool = False) -> Tensor:
        x = self.lift(x)
        count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return self.div(self.sum(x, axis, keepdims), float(count))

    def reshape(self, x, shape) -> Tensor:
        x = self.lift(x)
        X = self._data(x)
        try:
            out = X.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: {e}")
        return self._record("reshape", [x], out, lambda g: (g.reshape(X.shape),))

    def transpose(self, x, axes=None) -> Tensor:
        x = self.lift(x)
        X = self._data(x)
        axes = tuple(axes) if axes is not None else tuple(reversed(range(X.ndim)))
        inverse = tuple(np.argsort(axes))
        return self._record("transpose", [x], X.transpose(axes), lambda g: (g.transpose(inverse),))

    def concat(self, xs: Sequence, axis: int = -1) -> Tensor:
        xs = [self.lift(x) for x in xs]
        try:
            out = np.concatenate([self._data(x) for x in xs], axis=axis)
        except ValueError as e:
            raise ShapeError(f"concat: {e}")
        splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return self._record("concat", xs, out, lambda g: tuple(np.split(g, splits, axis=axis)))

    def stack(self, xs: Sequence, axis: int = 0) -> Tensor:
        xs = [self.lift(x) for x in xs]
        try:
            out = np.stack([self._data(x) for x in xs], axis=axis)
        except ValueError as e:
            raise ShapeError(f"stack: {e}")
        return self._record("stack", xs, out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))

    def index(self, x, key) -> Tensor:
        x = self.lift(x)
        X = self._data(x)

        def backward(g):
            gx = np.zeros_like(X)
            np.add.at(gx, key, g)
            return (gx,)
        return self._record("index", [x], X[key], backward)

    # -- normalising maps ---------------------------------------------------------

    def softmax(self, x, axis: int = -1) -> Tensor:
        x = self.lift(x)
        X = self._data(x)
        e = np.exp(X - X.max(axis=axis, keepdims=True))
        s = e / e.sum(axis=axis, keepdims=True)
        return self._record("softmax", [x], s,
                            lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))

    def logsumexp(self, x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
        """log sum exp over `axis`, counting only entries where `mask` is true."""
        x = self.lift(x)
        X = self._data(x)
        m = np.ones(X.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), X.shape)
        shifted = np.where(m, X, -np.inf)
        top = shifted.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        with np.errstate(under="ignore"):
            e = np.where(m, np.exp(np.where(m, X - top, 0.0)), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        with np.errstate(divide="ignore"):
            out = np.squeeze(np.log(s) + top, axis=axis)
        w = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
        return self._record("logsumexp", [x], out, lambda g: (np.expand_dims(g, axis) * w,))

    def l2_normalize(self, x, axis: int = -1, eps: float = 1e-12) -> Tensor:
        norm = self.sqrt(self.add(self.sum(self.mul(x, x), axis=axis, keepdims=True), eps))
        return self.div(x, norm)

    # -- linear algebra -------------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b, out = self._binary("matmul", a, b, np.matmul)
        A, B = self._data(a), self._data(b)

        def backward(g):
            ga = np.matmul(g, np.swapaxes(B, -1, -2))
            gb = np.matmul(np.swapaxes(A, -1, -2), g)
            return unbroadcast(ga, A.shape), unbroadcast(gb, B.shape)
        return self._record("matmul", [a, b], out, backward)

    def dense(self, x, w, b) -> Tensor:
        return self.add(self.matmul(x, w), b)

    # -- layers ---------------------------------------------------------------------

    def conv2d(self, x, w, b) -> Tensor:
        """Same-padded stride-1 cross-correlation. x: N x C x H x W, w: F x C x k x k, b: F."""
        x, w, b = self.lift(x), self.lift(w), self.lift(b)
        X, Wt, Bv = self._data(x), self._data(w), self._data(b)
        if X.ndim != 4 or Wt.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-D input and kernel, got {X.shape} and {Wt.shape}")
        if X.shape[1] != Wt.shape[1]:
            raise ShapeError(f"conv2d: input has {X.shape[1]} channels, kernel expects {Wt.shape[1]}")
        n, c, h, wd = X.shape
        f, k = Wt.shape[0], Wt.shape[2]
        p = k // 2
        xp = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((n, c, k, k, h, wd), dtype=X.dtype)
        for di in range(k):
            for dj in range(k):
                cols[:, :, di, dj] = xp[:, :, di:di + h, dj:dj + wd]
        cols = cols.reshape(n, c * k * k, h, wd)
        wm = Wt.reshape(f, c * k * k)
        out = np.einsum("fk,nkhw->nfhw", wm, cols, optimize=True) + Bv[None, :, None, None]

        def backward(g):
            gw = np.einsum("nfhw,nkhw->fk", g, cols, optimize=True).reshape(Wt.shape)
            gcols = np.einsum("fk,nfhw->nkhw", wm, g, optimize=True).reshape(n, c, k, k, h, wd)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + h, dj:dj + wd] += gcols[:, :, di, dj]
            return gxp[:, :, p:p + h, p:p + wd], gw, g.sum(axis=(0, 2, 3))
        return self._record("conv2d", [x, w, b], out, backward)

    def batch_norm(self, x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                   momentum: float = 0.99, eps: float = 1e-3) -> Tensor:
        """Per-channel normalisation over every axis but 1.

        Training uses batch statistics and queues running-stat updates on the graph;
        eval uses the running statistics.
        """
        x, gamma, beta = self.lift(x), self.lift(gamma), self.lift(beta)
        X, G = self._data(x), self._data(gamma)
        axes = tuple(i for i in range(X.ndim) if i != 1)
        bshape = [1] * X.ndim
        bshape[1] = X.shape[1]
        if G.shape != (X.shape[1],):
            raise ShapeError(f"batch_norm: {X.shape[1]} channels but gamma has shape {G.shape}")
        g_r = G.reshape(bshape)
        b_r = self._data(beta).reshape(bshape)

        if self.training:
            mu = X.mean(axis=axes)
            var = X.var(axis=axes)
            self.buffer_updates.append((running_mean, (momentum * running_mean + (1 - momentum) * mu)
                                        .astype(running_mean.dtype)))
            self.buffer_updates.append((running_var, (momentum * running_var + (1 - momentum) * var)
                                        .astype(running_var.dtype)))
        else:
            mu, var = running_mean.astype(self.dtype), running_var.astype(self.dtype)
        inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
        xhat = (X - mu.reshape(bshape)) * inv
        out = g_r * xhat + b_r
        m = X.size / X.shape[1]
        training = self.training

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * g_r
            if not training:
                return dxhat * inv, dgamma, dbeta
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx, dgamma, dbeta
        return self._record("batch_norm", [x, gamma, beta], out, backward)

    def spatial_dropout(self, x, rate: float, name: str) -> Tensor:
        """Drop whole channels (N x C masks) in training; identity in eval."""
        x = self.lift(x)
        if not self.training or rate <= 0:
            return x
        X = self._data(x)
        stream = seeds.philox(self.seed, "dropout", name, self.step)
        keep = stream.random(X.shape[:2]) >= rate
        mask = (keep / (1.0 - rate)).astype(X.dtype).reshape(X.shape[:2] + (1,) * (X.ndim - 2))
        return self._record("spatial_dropout", [x], X * mask, lambda g: (g * mask,))

    def maxpool2d(self, x, size: int = 2) -> Tensor:
        """Non-overlapping max pool; trailing rows/columns that do not fill a window are dropped."""
        x = self.lift(x)
        X = self._data(x)
        n, c, h, w = X.shape
        h2, w2 = h // size, w // size
        if h2 == 0 or w2 == 0:
            raise ShapeError(f"maxpool2d: {h}x{w} input smaller than {size}x{size} pool")
        blocks = (X[:, :, :h2 * size, :w2 * size]
                  .reshape(n, c, h2, size, w2, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, size * size))
        idx = blocks.argmax(axis=-1)[..., None]
        out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

        def backward(g):
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, idx, g[..., None], axis=-1)
            gb = gb.reshape(n, c, h2, w2, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * size, w2 * size)
            gx = np.zeros_like(X)
            gx[:, :, :h2 * size, :w2 * size] = gb
            return (gx,)
        return self._record("maxpool2d", [x], out, backward)

    def lstm(self, x, wx, wh, b) -> Tensor:
        """Fused LSTM over N x T x D, zero initial state, gate order (i, f, g, o). Returns N x T x H."""
        x, wx, wh, b = self.lift(x), self.lift(wx), self.lift(wh), self.lift(b)
        X, Wx, Wh, B = self._data(x), self._data(wx), self._data(wh), self._data(b)
        if X.ndim != 3 or X.shape[2] != Wx.shape[0]:
            raise ShapeError(f"lstm: input {X.shape} does not match input weights {Wx.shape}")
        n, steps, _ = X.shape
        hid = Wh.shape[0]
        if Wx.shape[1] != 4 * hid or Wh.shape != (hid, 4 * hid) or B.shape != (4 * hid,):
            raise ShapeError(f"lstm: inconsistent weights {Wx.shape}, {Wh.shape}, {B.shape}")

        def sig(z):
            return 0.5 * (1.0 + np.tanh(0.5 * z))

        hs = np.zeros((n, steps + 1, hid), dtype=X.dtype)
        cs = np.zeros((n, steps + 1, hid), dtype=X.dtype)
        gates = np.empty((n, steps, 4 * hid), dtype=X.dtype)
        xw = X @ Wx + B
        for t in range(steps):
            z = xw[:, t] + hs[:, t] @ Wh
            i, f, o = sig(z[:, :hid]), sig(z[:, hid:2 * hid]), sig(z[:, 3 * hid:])
            gg = np.tanh(z[:, 2 * hid:3 * hid])
            gates[:, t] = np.concatenate([i, f, gg, o], axis=1)
            cs[:, t + 1] = f * cs[:, t] + i * gg
            hs[:, t + 1] = o * np.tanh(cs[:, t + 1])

        def backward(g):
            dX = np.zeros_like(X)
            dWx, dWh, dB = np.zeros_like(Wx), np.zeros_like(Wh), np.zeros_like(B)
            dh_next = np.zeros((n, hid), dtype=X.dtype)
            dc_next = np.zeros((n, hid), dtype=X.dtype)
            for t in reversed(range(steps)):
                i, f, gg, o = np.split(gates[:, t], 4, axis=1)
                tc = np.tanh(cs[:, t + 1])
                dh = g[:, t] + dh_next
                dc = dh * o * (1.0 - tc * tc) + dc_next
                dz = np.concatenate([
                    dc * gg * i * (1.0 - i),
                    dc * cs[:, t] * f * (1.0 - f),
                    dc * i * (1.0 - gg * gg),
                    dh * tc * o * (1.0 - o),
                ], axis=1)
                dWx += X[:, t].T @ dz
                dWh += hs[:, t].T @ dz
                dB += dz.sum(axis=0)
                dX[:, t] = dz @ Wx.T
                dh_next = dz @ Wh.T
                dc_next = dc * f
            return dX, dWx, dWh, dB
        return self._record("lstm", [x, wx, wh, b], hs[:, 1:], backward)


def lstm_forward(g: Graph, seq, params: Dict[str, Tensor]) -> Tensor:
    """Hidden states for a T x d_in sequence (or an N x T x d_in batch)."""
    seq = g.lift(seq)
    single = seq.data.ndim == 2
    if single:
        seq = g.reshape(seq, (1,) + seq.shape)
    hs = g.lstm(seq, params["wx"], params["wh"], params["b"])
    return g.reshape(hs, hs.shape[1:]) if single else hs


def additive_attention(g: Graph, h, w, b, u) -> Tuple[Tensor, Tensor]:
    """e_t = u . tanh(W h_t + b); weights = softmax(e); summary = sum_t weights_t h_t.

    `h` is N x T x d (a single T x d sequence is also accepted); returns (N x T, N x d).
    """
    h = g.lift(h)
    single = h.data.ndim == 2
    if single:
        h = g.reshape(h, (1,) + h.shape)
    n, t, _ = h.shape
    proj = g.tanh(g.add(g.matmul(h, w), b))
    scores = g.reshape(g.matmul(proj, g.reshape(u, (-1, 1))), (n, t))
    weights = g.softmax(scores, axis=1)
    summary = g.sum(g.mul(g.reshape(weights, (n, t, 1)), h), axis=1)
    if single:
        return g.reshape(weights, (t,)), g.reshape(summary, (h.shape[2],))
    return weights, summary


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update, in place. Parameters without a gradient are left alone."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p, dtype=np.float64))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * np.square(grad, dtype=np.float64)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params: Dict[str, Tensor], grads: Dict[Tensor, np.ndarray]) -> None:
        arrays = {name: t.data for name, t in params.items()}
        by_name = {name: grads[t] for name, t in params.items() if t in grads}
        adam_step(arrays, by_name, self.state, self.lr, self.beta1, self.beta2, self.eps)


def gradient_check(fn: Callable[[Graph], Tensor], params: Sequence[Tensor], tol: float = 1e-3,
                   step: float = 1e-3, training: bool = False) -> float:
    """Max elementwise relative error between backward and central differences.

    Runs `fn` in float64 graphs; parameters are promoted for the duration and restored
    afterwards. Relative error is |a - b| / max(|a|, |b|, 1e-8).
    """
    params = list(params)
    originals = [p.data for p in params]
    for p in params:
        p.data = np.array(p.data, dtype=np.float64)

    def evaluate() -> float:
        return float(fn(Graph(training=training, dtype=np.float64)).data)

    worst = 0.0
    try:
        graph = Graph(training=training, dtype=np.float64)
        analytic = graph.backward(fn(graph), wrt=params)
        for p in params:
            flat = p.data.reshape(-1)
            a = analytic[p].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                plus = evaluate()
                flat[i] = orig - step
                minus = evaluate()
                flat[i] = orig
                numeric = (plus - minus) / (2.0 * step)
                err = abs(a[i] - numeric) / max(abs(a[i]), abs(numeric), 1e-8)
                worst = max(worst, err)
    finally:
        for p, data in zip(params, originals):
            p.data = data
            p.grad = None
    if worst > tol:
        log.warning("Gradient check failed: max relative error %.3e > %.1e", worst, tol)
    return worst
