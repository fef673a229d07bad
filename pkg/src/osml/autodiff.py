"""Minimal reverse-mode autodiff on dense numpy arrays.

A Tape records every op as a node (kind, input node ids, backward closure).
Creation order is topological, so one reverse sweep visits each node exactly
once. Tensors are tape-bound values; persistent parameters live off-tape as
plain numpy arrays in a ParamSet (str -> ndarray) and are registered as
leaves per forward pass.

Broadcasting is restricted to scalar-with-tensor and equal shapes.
"""

from __future__ import annotations

import numpy as np

# Parameter storage between episodes: name -> float ndarray.
ParamSet = dict


class Tensor:
    """A value on a tape. Do not mutate .data after creation."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class _Node:
    __slots__ = ("kind", "inputs", "grad_fn")

    def __init__(self, kind, inputs, grad_fn):
        self.kind = kind
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Append-only op recorder with a single-sweep backward pass."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._nodes: list[_Node] = []
        self._grads: list | None = None

    def _record(self, kind, data, inputs, grad_fn) -> Tensor:
        node_id = len(self._nodes)
        self._nodes.append(_Node(kind, inputs, grad_fn))
        return Tensor(data, self, node_id)

    def leaf(self, value) -> Tensor:
        """Register a constant or parameter value as a differentiable leaf."""
        arr = np.asarray(value, dtype=self.dtype)
        return self._record("leaf", arr, (), None)

    def leaves(self, params: ParamSet) -> dict:
        """Register every entry of a ParamSet; returns name -> Tensor."""
        return {name: self.leaf(arr) for name, arr in params.items()}

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of a scalar loss into every reachable node.

        Each node is visited exactly once, in reverse creation order.
        Unreachable nodes keep a None gradient (read back as zeros).
        """
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: list = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.grad_fn is None:
                continue
            for input_id, piece in zip(node.inputs, node.grad_fn(g)):
                if piece is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = piece.copy()
                else:
                    grads[input_id] += piece
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. t (zeros if unreached)."""
        if self._grads is None:
            raise RuntimeError("backward() has not been run on this tape")
        g = self._grads[t.node_id]
        return np.zeros_like(t.data) if g is None else g


def backward(loss: Tensor, leaves: dict) -> dict:
    """Run the reverse sweep and extract gradients for named leaf tensors."""
    tape = loss.tape
    tape.backward(loss)
    return {name: tape.grad(t) for name, t in leaves.items()}


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors belong to different tapes")
        return x
    return tape.leaf(x)


def _check_pair(a: np.ndarray, b: np.ndarray, op: str):
    # scalar-with-tensor or equal shapes only; nothing here needs more
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape).astype(g.dtype, copy=False)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.tape)
    _check_pair(a.data, b.data, "add")
    out = a.data + b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return a.tape._record("add", out, (a.node_id, b.node_id), grad_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.tape)
    _check_pair(a.data, b.data, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape))

    return a.tape._record("sub", out, (a.node_id, b.node_id), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.tape)
    _check_pair(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def grad_fn(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return a.tape._record("mul", out, (a.node_id, b.node_id), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant; no gradient flows to c."""
    c = float(c)
    out = a.data * c

    def grad_fn(g):
        return (g * c,)

    return a.tape._record("scale", out, (a.node_id,), grad_fn)


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (-g,)

    return a.tape._record("neg", -a.data, (a.node_id,), grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0  # subgradient at 0 is 0

    def grad_fn(g):
        return (g * mask,)

    return a.tape._record("relu", out, (a.node_id,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return a.tape._record("exp", out, (a.node_id,), grad_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: nonpositive input")
    ad = a.data
    out = np.log(ad)

    def grad_fn(g):
        return (g / ad,)

    return a.tape._record("log", out, (a.node_id,), grad_fn)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "exp": exp,
    "log": log,
    "neg": neg,
}


def elementwise(kind: str, *inputs):
    if kind not in ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ELEMENTWISE[kind](*inputs)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a.tape)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad @ bd

    def grad_fn(g):
        return (g @ bd.T, ad.T @ g)

    return a.tape._record("matmul", out, (a.node_id, b.node_id), grad_fn)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add of a length-F vector onto an (N, F) matrix."""
    b = _as_tensor(b, x.tape)
    xd, bd = x.data, b.data
    if xd.ndim != 2 or bd.shape != (xd.shape[1],):
        raise ValueError(f"bias_add: incompatible shapes {xd.shape} and {bd.shape}")
    out = xd + bd[None, :]

    def grad_fn(g):
        return (g, g.sum(axis=0))

    return x.tape._record("bias_add", out, (x.node_id, b.node_id), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old),)

    return a.tape._record("reshape", out, (a.node_id,), grad_fn)


def pick(a: Tensor, index: int) -> Tensor:
    """Select one element of a 1-D tensor as a scalar."""
    if a.data.ndim != 1:
        raise ValueError("pick expects a 1-D tensor")
    index = int(index)
    n = a.data.shape[0]
    if not 0 <= index < n:
        raise ValueError(f"pick: index {index} out of range for length {n}")
    out = a.data[index].reshape(())

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return a.tape._record("pick", out, (a.node_id,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    out = a.data.sum().reshape(())

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return a.tape._record("sum_all", out, (a.node_id,), grad_fn)


def mean_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    out = a.data.mean().reshape(())

    def grad_fn(g):
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),)

    return a.tape._record("mean_all", out, (a.node_id,), grad_fn)


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _patches(x_pad: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    n, c = x_pad.shape[:2]
    sn, sc, sh, sw = x_pad.strides
    shape = (n, c, kh, kw, oh, ow)
    strides = (sn, sc, sh, sw, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(x_pad, shape, strides)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCKK kernel, zero padding."""
    kernel = _as_tensor(kernel, x.tape)
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ValueError("conv2d expects NCHW input and FCKK kernel")
    n, c, h, w = xd.shape
    f, ck, kh, kw = kd.shape
    if ck != c:
        raise ValueError(f"conv2d: channel mismatch {c} vs {ck}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    if padding:
        x_pad = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        x_pad = xd
    pat = _patches(x_pad, kh, kw, stride, oh, ow)
    out = np.tensordot(pat, kd, axes=([1, 2, 3], [1, 2, 3]))  # (N, OH, OW, F)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def grad_fn(g):
        dk = np.tensordot(g, pat, axes=([0, 2, 3], [0, 4, 5]))  # (F, C, KH, KW)
        dx_pad = np.zeros_like(x_pad)
        for i in range(kh):
            for j in range(kw):
                piece = np.tensordot(g, kd[:, :, i, j], axes=([1], [0]))  # (N, OH, OW, C)
                dx_pad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    piece.transpose(0, 3, 1, 2)
                )
        if padding:
            dx = dx_pad[:, :, padding : padding + h, padding : padding + w]
        else:
            dx = dx_pad
        return (np.ascontiguousarray(dx), dk)

    return x.tape._record("conv2d", out, (x.node_id, kernel.node_id), grad_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize per channel with current-batch statistics (transductive)."""
    gamma = _as_tensor(gamma, x.tape)
    beta = _as_tensor(beta, x.tape)
    xd = x.data
    if xd.ndim == 2:
        axes = (0,)
        pshape = (1, -1)
    elif xd.ndim == 4:
        axes = (0, 2, 3)
        pshape = (1, -1, 1, 1)
    else:
        raise ValueError("batch_norm expects (N, C) or (N, C, H, W) input")
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("batch_norm: gamma/beta must have shape (channels,)")
    m = xd.size // c
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)  # biased
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gb = gamma.data.reshape(pshape)
    out = gb * xhat + beta.data.reshape(pshape)

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gb
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return (dx, dgamma, dbeta)

    return x.tape._record("batch_norm", out, (x.node_id, gamma.node_id, beta.node_id), grad_fn)


def softmax(a: Tensor) -> Tensor:
    """Stable softmax over a 1-D tensor."""
    if a.data.ndim != 1:
        raise ValueError("softmax expects a 1-D tensor")
    z = a.data - a.data.max()
    e = np.exp(z)
    out = e / e.sum()

    def grad_fn(g):
        return (out * (g - np.dot(g, out)),)

    return a.tape._record("softmax", out, (a.node_id,), grad_fn)


def _row_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer class targets."""
    zd = logits.data
    if zd.ndim != 2:
        raise ValueError("cross_entropy expects (N, C) logits")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != zd.shape[0]:
        raise ValueError("cross_entropy: targets must be (N,) class indices")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("cross_entropy: targets must be integers")
    n, c = zd.shape
    if t.min() < 0 or t.max() >= c:
        raise ValueError("cross_entropy: target class out of range")
    zmax = zd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zd - zmax).sum(axis=1)) + zmax[:, 0]
    losses = lse - zd[np.arange(n), t]
    out = np.asarray(losses.mean(), dtype=zd.dtype).reshape(())

    def grad_fn(g):
        p = _row_softmax(zd)
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)

    return logits.tape._record("cross_entropy", out, (logits.node_id,), grad_fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; target may be a Tensor or array."""
    if isinstance(target, Tensor):
        t = target
    else:
        t = pred.tape.leaf(target)
    if pred.data.shape != t.data.shape:
        raise ValueError(f"mse: shape mismatch {pred.data.shape} vs {t.data.shape}")
    diff = pred.data - t.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype).reshape(())

    def grad_fn(g):
        d = diff * (2.0 * g / n)
        return (d, -d)

    return pred.tape._record("mse", out, (pred.node_id, t.node_id), grad_fn)


def loss(kind: str, prediction: Tensor, target) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(prediction, target)
    if kind == "mse":
        return mse(prediction, target)
    raise ValueError(f"unknown loss kind {kind!r}")


def sgd_step(params: ParamSet, grads: dict, lr: float) -> ParamSet:
    """One SGD step, p - lr * g per entry; returns an updated copy."""
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p.copy()
            continue
        if np.shape(g) != p.shape:
            raise ValueError(f"sgd_step: gradient shape {np.shape(g)} != {p.shape} for {name!r}")
        out[name] = p - lr * g
    return out


def clone_params(params: ParamSet) -> ParamSet:
    return {name: p.copy() for name, p in params.items()}
