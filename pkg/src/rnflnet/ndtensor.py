"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine covers exactly the layer set a small residual CNN needs:
convolution, batch norm, ReLU, 2x2 max pooling, global average pooling,
fully connected layers, elementwise add (the residual shortcut), sigmoid,
and two losses (MSE, BCE on logits). Every op records the output tensor
as a node of an acyclic graph; ``backward`` walks the graph once in
reverse topological order and accumulates gradients additively, so
fan-out (a tensor feeding both a residual branch and its shortcut) just
works.

Conventions:

- float64 everywhere, row-major NCHW layout, batch dimension first.
- ReLU uses subgradient 0 at 0.
- Max pooling breaks ties by the first (row-major) element of the
  window, which makes backward deterministic.
- Tensors are immutable after forward; batch-norm running statistics
  are the single piece of explicit mutable state and are updated in
  place only when asked to.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are legal."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    Non-leaf tensors double as op nodes: ``op`` names the operation that
    produced them, ``parents`` holds the input tensors, and ``_backward``
    is a closure over whatever forward values the backward rule needs.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        op = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.data.shape}{op}, requires_grad={self.requires_grad})"


def _make_output(data, op, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def backward(loss):
    """Backpropagate from a scalar loss through the recorded graph.

    Every ``requires_grad`` tensor reachable from ``loss`` ends up with
    ``grad`` holding d(loss)/d(tensor). Gradients accumulate additively
    across multiple uses of the same tensor.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; no graph was recorded")

    # Iterative post-order DFS; reversed post-order is reverse topological
    # order, so each node's closure runs exactly once, after all its users.
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(extent, kernel, stride, pad):
    return (extent + 2 * pad - kernel) // stride + 1


def _im2col(x, kernel, stride, pad):
    """Unfold NCHW into (N, C*K*K, Ho*Wo) patch columns."""
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, kernel, stride, pad)
    wo = _conv_out_extent(w, kernel, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kernel, kernel, ho, wo), dtype=np.float64)
    for i in range(kernel):
        i_end = i + stride * ho
        for j in range(kernel):
            j_end = j + stride * wo
            cols[:, :, i, j, :, :] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * kernel * kernel, ho * wo)


def _col2im(cols, x_shape, kernel, stride, pad):
    """Scatter-add patch columns back onto an NCHW buffer (im2col adjoint)."""
    n, c, h, w = x_shape
    ho = _conv_out_extent(h, kernel, stride, pad)
    wo = _conv_out_extent(w, kernel, stride, pad)
    cols = cols.reshape(n, c, kernel, kernel, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kernel):
        i_end = i + stride * ho
        for j in range(kernel):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j, :, :]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D convolution (cross-correlation), NCHW input, OIKK weight.

    Output spatial extent is floor((H + 2*pad - K)/stride) + 1 per axis.
    ``bias`` may be None for convolutions that feed straight into batch
    norm.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects OIKK weight, got shape {weight.data.shape}")
    n, c, h, w = x.data.shape
    o, i, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match {o} output channels")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh} with stride {stride}, pad {pad} does not fit input {h}x{w}"
        )

    cols = _im2col(x.data, kh, stride, pad)            # (N, C*K*K, Ho*Wo)
    w2 = weight.data.reshape(o, -1)                    # (O, C*K*K)
    out = np.matmul(w2, cols)                          # (N, O, Ho*Wo)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def backward_fn(g):
        g2 = g.reshape(n, o, -1)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            _accumulate(x, _col2im(dcols, x.data.shape, kh, stride, pad))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make_output(out, "conv2d", parents, backward_fn)


# ---------------------------------------------------------------------------
# batch norm


def batchnorm2d(x, gamma, beta, running_mean, running_var, train,
                momentum=0.1, eps=1e-5, update_running=True):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics and, when
    ``update_running`` is set, folds them into the running buffers with
    the given momentum. Eval mode normalizes with the running buffers.
    Running buffers are plain state: mutated in place, never part of the
    gradient graph.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.data.shape != (c,):
            raise ShapeError(f"batchnorm2d: {name} shape {t.data.shape} != ({c},)")

    if train:
        m = n * h * w
        if m < 2:
            raise ValueError(
                "batchnorm2d: train mode needs at least 2 values per channel "
                f"(got N*H*W = {m}); batch variance is degenerate"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
            running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx_hat = g * gamma.data[None, :, None, None]
            if train:
                dx = inv_std[None, :, None, None] * (
                    gx_hat
                    - gx_hat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                dx = gx_hat * inv_std[None, :, None, None]
            _accumulate(x, dx)

    return _make_output(out, "batchnorm2d", (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# elementwise / pooling / linear


def relu(x):
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def backward_fn(g):
        _accumulate(x, g * mask)

    return _make_output(out, "relu", (x,), backward_fn)


def maxpool2x2(x):
    """2x2 max pooling with stride 2; spatial extents must be even."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, 4)
    # argmax returns the first maximal index: row-major tie break.
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not x.requires_grad:
            return
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, dx)

    return _make_output(out, "maxpool2x2", (x,), backward_fn)


def global_avg_pool(x):
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _make_output(out, "global_avg_pool", (x,), backward_fn)


def linear(x, weight, bias=None):
    """Fully connected layer: (N, F) @ (F, O) + (O,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"linear expects 2-D input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"linear: input features {x.data.shape[1]} != weight rows {weight.data.shape[0]}"
        )
    out = x.data @ weight.data
    if bias is not None:
        if bias.data.shape != (weight.data.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.data.shape} does not match output")
        out = out + bias.data

    def backward_fn(g):
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make_output(out, "linear", parents, backward_fn)


def add(a, b):
    """Elementwise sum of two same-shape tensors (the residual shortcut)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make_output(out, "add", (a, b), backward_fn)


def sigmoid(x):
    z = x.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def backward_fn(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make_output(out, "sigmoid", (x,), backward_fn)


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum())

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make_output(out, "sum", (x,), backward_fn)


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target):
    """Mean squared error over all elements (scalar)."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    if not np.isfinite(out):
        raise NonFiniteError("mse_loss produced a non-finite value")
    n = diff.size

    def backward_fn(g):
        scale = g * 2.0 / n
        if pred.requires_grad:
            _accumulate(pred, scale * diff)
        if target.requires_grad:
            _accumulate(target, -scale * diff)

    return _make_output(out, "mse_loss", (pred, target), backward_fn)


def bce_loss(logits, targets):
    """Binary cross-entropy on raw logits, numerically stable (scalar).

    loss = mean( max(z, 0) - z*y + log(1 + exp(-|z|)) ), which never
    exponentiates a positive argument.
    """
    if logits.data.shape != targets.data.shape:
        raise ShapeError(
            f"bce_loss: shape mismatch {logits.data.shape} vs {targets.data.shape}"
        )
    z = logits.data
    y = targets.data
    out = np.asarray((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())
    if not np.isfinite(out):
        raise NonFiniteError("bce_loss produced a non-finite value")
    n = z.size

    def backward_fn(g):
        if logits.requires_grad:
            s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                         np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
            _accumulate(logits, g * (s - y) / n)
        if targets.requires_grad:
            _accumulate(targets, g * (-z) / n)

    return _make_output(out, "bce_loss", (logits, targets), backward_fn)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(graph_builder, input_shapes, eps=1e-5, seed=0, nudge=1e-3):
    """Compare analytic gradients against central finite differences.

    ``graph_builder`` receives one requires-grad tensor per entry of
    ``input_shapes`` and must return a scalar loss tensor. Inputs are
    drawn standard-normal and nudged at least ``nudge`` away from zero
    so ReLU kinks do not sit inside the difference stencil. Relative
    error is |a - n| / max(1e-8, |a| + |n|), reduced with max over all
    elements of all inputs.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    rng = np.random.default_rng(seed)
    arrays = []
    for shape in input_shapes:
        a = rng.standard_normal(shape)
        a = np.where(np.abs(a) < nudge, np.where(a < 0, -nudge, nudge), a)
        arrays.append(a)

    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    loss = graph_builder(*inputs)
    if loss.data.size != 1:
        raise ValueError("graph_builder must return a scalar loss")
    backward(loss)
    analytic = []
    for t in inputs:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.isfinite(g).all():
            raise NonFiniteError("analytic gradient is not finite")
        analytic.append(g)

    def loss_value():
        with no_grad():
            return float(graph_builder(*(Tensor(a) for a in arrays)).data)

    max_rel = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        grad_flat = analytic[k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_value()
            flat[j] = orig - eps
            down = loss_value()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            if not math.isfinite(numeric):
                raise NonFiniteError("numeric gradient is not finite")
            rel = abs(grad_flat[j] - numeric) / max(1e-8, abs(grad_flat[j]) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
    return max_rel
