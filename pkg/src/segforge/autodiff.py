"""Reverse-mode automatic differentiation over dense tensors.

Provides exactly the operator set the segmentation network needs: conv2d,
maxpool2d, nearest-neighbor upsampling, batchnorm2d, relu, channel softmax,
channel concatenation, and inverted dropout. Each op executes eagerly and
records one node on an explicit :class:`Graph`; :func:`backward` walks the
tape in reverse topological (i.e. reverse execution) order, accumulating
gradients additively wherever a tensor fans out into several consumers.

Compute is float32 by default. The gradient-check oracle re-executes the same
graph on float64 tensors, so every op preserves the dtype of its inputs; the
convolution kernels dispatch to the compiled lane only for float32.
"""
from __future__ import annotations

import numpy as np

from segforge import _kernels


class AutodiffError(ValueError):
    """Invalid op arguments or graph misuse."""


class Tensor:
    """Dense tensor: ``data`` (float32 or float64, C-order), optional ``grad``."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise AutodiffError(f"tensor dtype must be float32 or float64, got {dtype}")
        arr = np.asarray(data, dtype=dtype)  # ascontiguousarray would promote 0-d to 1-d
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.size == 0:
            raise AutodiffError(f"tensor dims must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flags = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Graph:
    """Topologically ordered record of executed ops for one forward pass.

    A graph instance is confined to one execution context at a time. Ops that
    touch no gradient-requiring tensor are executed but not taped.
    """

    __slots__ = ("_tape", "_backward_done")

    def __init__(self):
        self._tape = []
        self._backward_done = False

    def record(self, out: Tensor, parents, backward_fn) -> Tensor:
        """Register one executed op.

        ``backward_fn(dout)`` must return one gradient array (or None) per
        parent, in order. This hook is also how composite scalar losses attach
        themselves to the graph with an analytic backward rule.
        """
        parents = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            self._tape.append(_Node(out, parents, backward_fn))
        return out

    def reset(self) -> None:
        """Clear gradients produced by this graph and allow another backward."""
        for node in self._tape:
            node.out.grad = None
            for p in node.parents:
                p.grad = None
        self._backward_done = False


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``grad`` for every gradient-requiring tensor reachable from loss.

    Gradients add into any pre-existing ``grad`` (fixed-order shard summing);
    within one call, fan-out contributions accumulate additively. A second
    backward on the same graph without ``reset()`` is rejected because it
    would double-count.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("loss must be a Tensor")
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.data.shape}")
    if graph._backward_done:
        raise AutodiffError("second backward on this graph without reset()")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tensor with requires_grad")
    acc = {id(loss): np.ones_like(loss.data)}
    held = {id(loss): loss}
    for node in reversed(graph._tape):
        dout = acc.pop(id(node.out), None)
        if dout is None:
            continue
        tensor = held.pop(id(node.out))
        tensor.grad = dout if tensor.grad is None else tensor.grad + dout
        grads = node.backward_fn(dout)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            prev = acc.get(id(parent))
            acc[id(parent)] = g if prev is None else prev + g
            held[id(parent)] = parent
    for key, tensor in held.items():
        tensor.grad = acc[key] if tensor.grad is None else tensor.grad + acc[key]
    graph._backward_done = True


def _expect_ndim(t: Tensor, ndim: int, name: str) -> None:
    if not isinstance(t, Tensor):
        raise AutodiffError(f"{name} must be a Tensor")
    if t.data.ndim != ndim:
        raise AutodiffError(f"{name} must have {ndim} axes, got shape {t.data.shape}")


def _wrap(data: np.ndarray) -> Tensor:
    return Tensor(data, dtype=data.dtype)


def conv2d(g: Graph, x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation (no kernel flip) plus per-channel bias.

    x (N,Cin,H,W), w (Cout,Cin,k,k), b (Cout,). Same-padding requires odd k.
    """
    _expect_ndim(x, 4, "x")
    _expect_ndim(w, 4, "w")
    _expect_ndim(b, 1, "b")
    n, cin, h, wid = x.shape
    cout, cw, kh, kw = w.shape
    if kh != kw:
        raise AutodiffError(f"kernel must be square, got {kh}x{kw}")
    if cw != cin:
        raise AutodiffError(f"channel mismatch: input has {cin}, kernel expects {cw}")
    if b.shape != (cout,):
        raise AutodiffError(f"bias shape {b.shape} does not match {cout} output channels")
    if stride < 1:
        raise AutodiffError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        if kh % 2 == 0:
            raise AutodiffError(f"same-padding requires an odd kernel, got k={kh}")
        pad = (kh - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise AutodiffError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise AutodiffError(f"kernel k={kh} does not fit input {h}x{wid} with padding {padding}")
    cols = _kernels.im2col(x.data, kh, pad, stride)  # (N, Cin*k*k, Ho*Wo)
    w2d = w.data.reshape(cout, cin * kh * kw)
    out2d = np.matmul(w2d, cols)
    out2d += b.data[:, None]
    out = _wrap(out2d.reshape(n, cout, ho, wo))

    def backward_fn(dout):
        d2 = np.ascontiguousarray(dout.reshape(n, cout, ho * wo))
        db = d2.sum(axis=(0, 2)) if b.requires_grad else None
        dw = None
        if w.requires_grad:
            dw = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w2d.T, d2)
            dx = _kernels.col2im(np.ascontiguousarray(dcols), (n, cin, h, wid), kh, pad, stride)
        return (dx, dw, db)

    return g.record(out, (x, w, b), backward_fn)


def maxpool2d(g: Graph, x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2 stride-2 max pooling; ties route the gradient to the first index."""
    _expect_ndim(x, 4, "x")
    if window != 2 or stride != 2:
        raise AutodiffError(f"only window=2, stride=2 is supported, got {window}/{stride}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise AutodiffError(f"maxpool2d needs H, W divisible by 2, got {h}x{w}")
    win = np.ascontiguousarray(
        x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence wins on ties
    out = _wrap(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def backward_fn(dout):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(dx).reshape(n, c, h, w),)

    return g.record(out, (x,), backward_fn)


def upsample2d_nearest(g: Graph, x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling; backward is the factor x factor block sum."""
    _expect_ndim(x, 4, "x")
    if int(factor) != factor or factor < 1:
        raise AutodiffError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    n, c, h, w = x.shape
    out = _wrap(x.data.repeat(factor, axis=2).repeat(factor, axis=3))

    def backward_fn(dout):
        if factor == 1:
            return (dout,)
        return (dout.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return g.record(out, (x,), backward_fn)


class BatchNormState:
    """Per-channel running statistics; ``batches_seen`` gates infer mode."""

    __slots__ = ("running_mean", "running_var", "batches_seen")

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_seen = 0


def batchnorm2d(g: Graph, x: Tensor, gamma: Tensor, beta: Tensor,
                state: BatchNormState, mode: str, momentum: float = 0.9,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics (population variance) and folds
    them into the running stats as running <- momentum*running + (1-momentum)*batch.
    Infer mode uses the running stats and is rejected before any train step.
    Backward implements the full batch-statistics chain rule.
    """
    _expect_ndim(x, 4, "x")
    _expect_ndim(gamma, 1, "gamma")
    _expect_ndim(beta, 1, "beta")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise AutodiffError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if state.running_mean.shape != (c,):
        raise AutodiffError(
            f"running stats cover {state.running_mean.shape[0]} channels, input has {c}")
    if mode not in ("train", "infer"):
        raise AutodiffError(f"mode must be 'train' or 'infer', got {mode!r}")
    ga = gamma.data[None, :, None, None]
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise AutodiffError(f"train mode needs N*H*W >= 2 per channel, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        sdtype = state.running_mean.dtype
        state.running_mean = (momentum * state.running_mean
                              + (1.0 - momentum) * mu).astype(sdtype)
        state.running_var = (momentum * state.running_var
                             + (1.0 - momentum) * var).astype(sdtype)
        state.batches_seen += 1
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out = _wrap(ga * xhat + beta.data[None, :, None, None])

        def backward_fn(dout):
            dbeta = dout.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dgamma = (dout * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = dout * ga
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return (dx, dgamma, dbeta)

    else:
        if state.batches_seen == 0:
            raise AutodiffError("infer mode before any train step: running stats uninitialized")
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = _wrap(ga * xhat + beta.data[None, :, None, None])

        def backward_fn(dout):
            dbeta = dout.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dgamma = (dout * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dx = dout * ga * inv[None, :, None, None] if x.requires_grad else None
            return (dx, dgamma, dbeta)

    return g.record(out, (x, gamma, beta), backward_fn)


def relu(g: Graph, x: Tensor) -> Tensor:
    out = _wrap(np.maximum(x.data, 0))

    def backward_fn(dout):
        return (dout * (x.data > 0),)

    return g.record(out, (x,), backward_fn)


def softmax_channel(g: Graph, x: Tensor) -> Tensor:
    """Softmax over the channel axis, per pixel; rows sum to 1 within 1e-6."""
    _expect_ndim(x, 4, "x")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _wrap(p)

    def backward_fn(dout):
        return (p * (dout - (dout * p).sum(axis=1, keepdims=True)),)

    return g.record(out, (x,), backward_fn)


def concat_channel(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    _expect_ndim(a, 4, "a")
    _expect_ndim(b, 4, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise AutodiffError(f"cannot concat shapes {a.shape} and {b.shape} on channels")
    ca = a.shape[1]
    out = _wrap(np.concatenate([a.data, b.data], axis=1))

    def backward_fn(dout):
        da = dout[:, :ca] if a.requires_grad else None
        db = dout[:, ca:] if b.requires_grad else None
        return (da, db)

    return g.record(out, (a, b), backward_fn)


def dropout(g: Graph, x: Tensor, rate: float, mode: str, seed: int) -> Tensor:
    """Inverted dropout: keep with probability 1-rate, scale kept by 1/(1-rate)."""
    if not (0.0 <= rate < 1.0):
        raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise AutodiffError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        out = _wrap(x.data.copy())

        def backward_fn(dout):
            return (dout,)

        return g.record(out, (x,), backward_fn)
    rng = np.random.default_rng(seed)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) * scale
    out = _wrap(x.data * mask)

    def backward_fn(dout):
        return (dout * mask,)

    return g.record(out, (x,), backward_fn)
