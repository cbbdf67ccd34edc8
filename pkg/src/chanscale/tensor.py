"""Dense tensor operators and a small reverse-mode gradient tape.

Tensors are plain numpy arrays in channels-last layout: a feature map is
``(h, w, c)`` and a batch of them ``(n, h, w, c)``; convolution kernels are
``(k, k, c_in, c_out)``.  Every operator accepts either a single feature map
or a batch and returns the same rank it was given.

Only float32 and float64 are supported.  All floating arrays meeting in one
operator must share a dtype; nothing is silently up- or down-cast.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, PrecisionError, ShapeError, TapeError

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

BCE_CLAMP = 1e-7


def check_precision(*arrays):
    """Raise unless all arrays share one of the supported float dtypes."""
    dtypes = {np.asarray(a).dtype for a in arrays}
    if len(dtypes) != 1:
        raise PrecisionError(f"mixed precision in one operation: {sorted(map(str, dtypes))}")
    (dtype,) = dtypes
    if dtype not in FLOAT_TYPES:
        raise PrecisionError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


def _as_batch(x, name="input"):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be (h, w, c) or (n, h, w, c), got shape {x.shape}")


def _restore(y, squeezed):
    return y[0] if squeezed else y


# ---------------------------------------------------------------------------
# forward operators


def _im2col(x, k):
    """(n, h, w, c) -> (n*h*w, k*k*c) with zero 'same' padding, kernel order (i, j, c)."""
    n, h, w, c = x.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _check_conv(x, kernel, bias):
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"kernel must be (k, k, c_in, c_out), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd for same padding, got kernel {kernel.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(
            f"input channels do not match kernel: input {x.shape}, kernel {kernel.shape}"
        )
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")


def conv2d_forward(x, kernel, bias=None):
    """Stride-1 cross-correlation with zero 'same' padding, plus bias."""
    xb, squeezed = _as_batch(x)
    kernel = np.asarray(kernel)
    if bias is not None:
        bias = np.asarray(bias)
    _check_conv(np.asarray(x), kernel, bias)
    check_precision(xb, kernel, *(() if bias is None else (bias,)))
    n, h, w, _ = xb.shape
    k, _, c_in, c_out = kernel.shape
    y = _im2col(xb, k) @ kernel.reshape(k * k * c_in, c_out)
    if bias is not None:
        y += bias
    return _restore(y.reshape(n, h, w, c_out), squeezed)


def channel_scaling_forward(x, s):
    """Multiply channel ``i`` of ``x`` by ``s[i]``; ``s`` must lie in [0, 1]."""
    x = np.asarray(x)
    s = np.asarray(s)
    if s.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise ShapeError(f"scaling vector of shape {s.shape} does not match input {x.shape}")
    check_precision(x, s)
    if np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s)):
        raise ContractError("scaling weights must lie in [0, 1]")
    return x * s


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def sigmoid(v):
    return expit(v)


def max_pool_2x2(x):
    xb, squeezed = _as_batch(x)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 max-pool needs even spatial extents, got {xb.shape[1:3]}")
    y = xb.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
    return _restore(y, squeezed)


def global_average_pool(x):
    """(h, w, c) -> (c,) or (n, h, w, c) -> (n, c)."""
    xb, squeezed = _as_batch(x)
    y = xb.mean(axis=(1, 2))
    return y[0] if squeezed else y


def dense_forward(v, weight, bias):
    """``v @ weight + bias`` for ``v`` of shape (n_in,) or (batch, n_in)."""
    v = np.asarray(v)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[1],) or v.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"dense shapes inconsistent: input {v.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    check_precision(v, weight, bias)
    return v @ weight + bias


def bce(p, labels, clamp=BCE_CLAMP):
    """Mean binary cross-entropy with predictions clamped into [clamp, 1 - clamp]."""
    p = np.asarray(p)
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0 or 1")
    if p.shape != labels.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match labels {labels.shape}")
    pc = np.clip(p, clamp, 1 - clamp)
    y = labels.astype(p.dtype)
    return -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))


# ---------------------------------------------------------------------------
# tape


class Node:
    """One value recorded on a :class:`GradientTape`."""

    __slots__ = ("value", "parents", "requires_grad", "index")

    def __init__(self, value, parents, requires_grad, index):
        self.value = value
        self.parents = parents  # tuple of (Node, vjp) pairs
        self.requires_grad = requires_grad
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)


class GradientTape:
    """Records a forward computation so :func:`backprop` can reverse it.

    Values are saved by reference; the operators never mutate their inputs,
    so the recorded activations stay valid for the life of the tape.  A tape
    belongs to one thread at a time.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.activations: dict[str, Node] = {}

    # -- leaves ---------------------------------------------------------
    def _new(self, value, parents=(), requires_grad=None):
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in parents)
        if not requires_grad:
            parents = ()
        node = Node(value, tuple(parents), requires_grad, len(self.nodes))
        self.nodes.append(node)
        return node

    def constant(self, value):
        return self._new(np.asarray(value), requires_grad=False)

    def parameter(self, name, value):
        if name in self.params:
            raise TapeError(f"parameter {name!r} recorded twice")
        node = self._new(np.asarray(value), requires_grad=True)
        self.params[name] = node
        return node

    def watch(self, name, node):
        """Name an intermediate activation so its gradient can be requested.

        Only the most recently recorded node can be watched, since gradient
        requirements propagate forward at record time.
        """
        if node.index != len(self.nodes) - 1:
            raise TapeError(f"activation {name!r} watched after it was consumed")
        node.requires_grad = True
        self.activations[name] = node
        return node

    # -- operators ------------------------------------------------------
    def conv2d(self, x, kernel, bias):
        y = conv2d_forward(x.value, kernel.value, bias.value)
        k = kernel.value.shape[0]
        parents = []
        if x.requires_grad:
            flipped = np.ascontiguousarray(kernel.value[::-1, ::-1].transpose(0, 1, 3, 2))
            parents.append((x, lambda g: conv2d_forward(g, flipped)))
        if kernel.requires_grad:
            xb, _ = _as_batch(x.value)

            def kernel_vjp(g):
                gb, _ = _as_batch(g)
                cols = _im2col(xb, k)
                return (cols.T @ gb.reshape(-1, gb.shape[-1])).reshape(kernel.value.shape)

            parents.append((kernel, kernel_vjp))
        if bias.requires_grad:
            parents.append((bias, lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0)))
        return self._new(y, parents)

    def relu(self, x):
        y = relu(x.value)
        mask = x.value > 0
        return self._new(y, [(x, lambda g: g * mask)])

    def channel_scaling(self, x, s):
        y = channel_scaling_forward(x.value, s.value)
        parents = []
        if x.requires_grad:
            parents.append((x, lambda g: g * s.value))
        if s.requires_grad:
            xv = x.value
            parents.append((s, lambda g: (g * xv).reshape(-1, xv.shape[-1]).sum(axis=0)))
        return self._new(y, parents)

    def max_pool_2x2(self, x):
        y = max_pool_2x2(x.value)
        if not x.requires_grad:
            return self._new(y)
        xb, squeezed = _as_batch(x.value)
        n, h, w, c = xb.shape
        blocks = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
        # ties route to the first maximum
        winner = blocks.argmax(axis=-1)

        def vjp(g):
            gb, _ = _as_batch(g)
            out = np.zeros(blocks.shape, dtype=gb.dtype)
            np.put_along_axis(out, winner[..., None], gb[..., None], axis=-1)
            out = out.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
            return _restore(out.reshape(n, h, w, c), squeezed)

        return self._new(y, [(x, vjp)])

    def global_average_pool(self, x):
        y = global_average_pool(x.value)
        shape = x.value.shape
        area = shape[-3] * shape[-2]

        def vjp(g):
            g = g / area
            if len(shape) == 4:
                return np.broadcast_to(g[:, None, None, :], shape).copy()
            return np.broadcast_to(g[None, None, :], shape).copy()

        return self._new(y, [(x, vjp)])

    def dense(self, v, weight, bias):
        y = dense_forward(v.value, weight.value, bias.value)
        parents = []
        if v.requires_grad:
            parents.append((v, lambda g: g @ weight.value.T))
        if weight.requires_grad:
            vv = np.atleast_2d(v.value)
            parents.append((weight, lambda g: vv.T @ np.atleast_2d(g)))
        if bias.requires_grad:
            parents.append((bias, lambda g: np.atleast_2d(g).sum(axis=0)))
        return self._new(y, parents)

    def column(self, x, j):
        """Column ``j`` of a (batch, m) array, or element ``j`` of a vector."""
        xv = x.value
        y = xv[..., j]

        def vjp(g):
            out = np.zeros_like(xv)
            out[..., j] = g
            return out

        return self._new(y, [(x, vjp)])

    def sigmoid(self, x):
        p = sigmoid(x.value)
        return self._new(p, [(x, lambda g: g * p * (1 - p))])

    def bce(self, p, labels, clamp=BCE_CLAMP):
        loss = bce(p.value, labels, clamp)
        pv = p.value
        y = np.asarray(labels).astype(pv.dtype)
        inside = (pv >= clamp) & (pv <= 1 - clamp)
        pc = np.clip(pv, clamp, 1 - clamp)

        def vjp(g):
            d = (-y / pc + (1 - y) / (1 - pc)) / pv.size
            return g * np.where(inside, d, 0)

        return self._new(np.asarray(loss, dtype=pv.dtype), [(p, vjp)])

    def l1(self, nodes, lam):
        """``lam * sum(|s|)`` over several vectors; subgradient 0 at exactly 0."""
        nodes = list(nodes)
        if not nodes:
            return self.constant(np.zeros(()))
        dtype = check_precision(*(n.value for n in nodes))
        total = sum(np.abs(n.value).sum() for n in nodes) * dtype.type(lam)
        parents = [(n, lambda g, v=n.value: g * dtype.type(lam) * np.sign(v)) for n in nodes]
        return self._new(np.asarray(total, dtype=dtype), parents)

    def add(self, a, b):
        y = a.value + b.value
        return self._new(y, [(a, lambda g: g), (b, lambda g: g)])


def backprop(tape, loss, loss_gradient=1.0, activations: Iterable[str] = ()):
    """Reverse pass from the scalar ``loss``.

    Returns ``{name: gradient}`` for every parameter on the tape plus every
    requested activation name.  The tape itself is not modified, so repeated
    calls return identical gradients.
    """
    if not tape.nodes:
        raise TapeError("tape is empty")
    if np.ndim(loss.value) != 0:
        raise TapeError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
    activations = list(activations)
    for name in activations:
        if name not in tape.activations:
            raise TapeError(f"activation {name!r} was not recorded")

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.index] = np.asarray(loss_gradient, dtype=np.asarray(loss.value).dtype)
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.get(node.index)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + contrib
            else:
                grads[parent.index] = contrib

    out = {}
    for name, node in tape.params.items():
        g = grads.get(node.index)
        out[name] = np.zeros_like(node.value) if g is None else np.asarray(g).reshape(node.value.shape)
    for name in activations:
        node = tape.activations[name]
        g = grads.get(node.index)
        out[name] = np.zeros_like(node.value) if g is None else np.asarray(g).reshape(node.value.shape)
    return out


def finite_diff_gradient(f: Callable[[np.ndarray], float], theta, eps=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(theta))
        flat[i] = orig - eps
        fm = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractError(f"non-finite function value while differencing coordinate {i}")
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(theta.shape)
