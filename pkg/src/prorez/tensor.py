"""Dense 4-D tensor kernels with hand-written backward passes.

Public functions take and return NCHW arrays ``(n, c, h, w)``. The
``*_nhwc`` kernels are the hot path used by :mod:`prorez.netspec`; they
keep channels last so that im2col rows are contiguous.

All convolutions are 3x3, pad 1, stride 1. All pools are 2x2 max, stride 2,
with ties routed to the first maximum in scan order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError, NumericError, ShapeError, UsageError, ValidationError

LAYER_KINDS = ("conv", "relu", "maxpool2", "linear")


@dataclass
class LayerParams:
    """Weights, bias and the momentum buffers that mirror them.

    Conv weights are ``(out, in, 3, 3)``; linear weights ``(out, in, 1, 1)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    velocity_w: np.ndarray = field(default=None, repr=False)
    velocity_b: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.velocity_w is None:
            self.velocity_w = np.zeros_like(self.weight)
        if self.velocity_b is None:
            self.velocity_b = np.zeros_like(self.bias)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kind(self) -> str:
        return "linear" if self.weight.shape[2:] == (1, 1) else "conv"

    def copy(self, dtype=None) -> "LayerParams":
        dtype = dtype or self.weight.dtype
        return LayerParams(
            self.weight.astype(dtype, copy=True),
            self.bias.astype(dtype, copy=True),
            self.velocity_w.astype(dtype, copy=True),
            self.velocity_b.astype(dtype, copy=True),
        )


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# NHWC kernels
# ---------------------------------------------------------------------------

def conv_weight_matrix(weight: np.ndarray) -> np.ndarray:
    """(out, in, 3, 3) -> (9*in, out) with rows ordered (ky, kx, in)."""
    o, c = weight.shape[:2]
    return weight.transpose(2, 3, 1, 0).reshape(9 * c, o)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv_forward_nhwc(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Returns the output and the im2col matrix needed by the backward pass."""
    n, h, w, c = x.shape
    if c != weight.shape[1]:
        raise ShapeError(
            f"conv input has {c} channels but weights expect {weight.shape[1]}: "
            f"input shape (n,h,w,c)={x.shape}, weight shape={weight.shape}"
        )
    cols = _im2col(x)
    out = cols @ conv_weight_matrix(weight)
    out += bias
    return out.reshape(n, h, w, weight.shape[0]), cols


def conv_backward_nhwc(cols, x_shape, weight, grad_out, need_input_grad=True):
    n, h, w, c = x_shape
    o = weight.shape[0]
    g = grad_out.reshape(-1, o)
    grad_w = (cols.T @ g).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
    grad_b = g.sum(axis=0)
    if not need_input_grad:
        return None, grad_w, grad_b
    # input gradient = same-padded conv of grad_out with the flipped, channel-swapped kernel
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_in = _im2col(np.ascontiguousarray(grad_out)) @ conv_weight_matrix(flipped)
    return grad_in.reshape(n, h, w, c), grad_w, grad_b


def _pool_views(x: np.ndarray, spatial: tuple[int, int]):
    ay, ax = spatial
    sl = [slice(None)] * x.ndim
    views = []
    for dy in (0, 1):
        for dx in (0, 1):
            s = list(sl)
            s[ay] = slice(dy, None, 2)
            s[ax] = slice(dx, None, 2)
            views.append(tuple(s))
    return views


def maxpool_forward(x: np.ndarray, spatial=(1, 2)) -> np.ndarray:
    ay, ax = spatial
    if x.shape[ay] % 2 or x.shape[ax] % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got shape {x.shape}")
    a, b, c, d = (x[v] for v in _pool_views(x, spatial))
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def maxpool_backward(x: np.ndarray, out: np.ndarray, grad_out: np.ndarray, spatial=(1, 2)):
    grad_in = np.zeros_like(x, dtype=grad_out.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for v in _pool_views(x, spatial):
        hit = (x[v] == out) & ~taken
        grad_in[v] = grad_out * hit
        taken |= hit
    return grad_in


# ---------------------------------------------------------------------------
# NCHW public surface
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, params: LayerParams, pad: int = 1, stride: int = 1) -> np.ndarray:
    x = check_tensor4(x, "conv input")
    if pad != 1 or stride != 1:
        raise UsageError("only 3x3 convolutions with pad=1, stride=1 are supported")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv channel mismatch: input shape {x.shape} vs weight shape {params.weight.shape}"
        )
    y, _ = conv_forward_nhwc(x.transpose(0, 2, 3, 1), params.weight, params.bias)
    return y.transpose(0, 3, 1, 2)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def maxpool2_forward(x: np.ndarray) -> np.ndarray:
    return maxpool_forward(check_tensor4(x, "maxpool input"), spatial=(2, 3))


def linear_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    x = check_tensor4(x, "linear input")
    flat = x.reshape(x.shape[0], -1)
    w = params.weight.reshape(params.out_channels, -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"linear input has {flat.shape[1]} features, weights expect {w.shape[1]}")
    return (flat @ w.T + params.bias)[:, :, None, None]


def layer_forward(kind: str, x: np.ndarray, params: LayerParams | None = None) -> np.ndarray:
    if kind == "conv":
        return conv2d_forward(x, _need(params, kind))
    if kind == "relu":
        return relu_forward(x)
    if kind == "maxpool2":
        return maxpool2_forward(x)
    if kind == "linear":
        return linear_forward(x, _need(params, kind))
    raise UsageError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


def _need(params, kind):
    if params is None:
        raise UsageError(f"layer kind {kind!r} requires params")
    return params


def layer_backward(kind: str, cached_input: np.ndarray, grad_out: np.ndarray,
                   params: LayerParams | None = None):
    """Backward pass of a single layer.

    Returns ``(grad_in, grad_params)`` where ``grad_params`` is
    ``(grad_weight, grad_bias)`` for conv/linear and ``None`` otherwise.
    """
    x = check_tensor4(cached_input, "cached input")
    g = check_tensor4(grad_out, "grad_out")
    if kind not in LAYER_KINDS:
        raise UsageError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
    if kind in ("conv", "linear"):
        _need(params, kind)
    expected = layer_forward(kind, x, params).shape
    if g.shape != expected:
        raise ShapeError(f"{kind} grad_out shape {g.shape} != forward output shape {expected}")

    if kind == "relu":
        return g * (x > 0), None
    if kind == "maxpool2":
        out = maxpool2_forward(x)
        return maxpool_backward(x, out, g, spatial=(2, 3)), None
    if kind == "linear":
        flat = x.reshape(x.shape[0], -1)
        g2 = g.reshape(g.shape[0], -1)
        w = params.weight.reshape(params.out_channels, -1)
        grad_in = (g2 @ w).reshape(x.shape)
        grad_w = (g2.T @ flat).reshape(params.weight.shape)
        return grad_in, (grad_w, g2.sum(axis=0))
    xn = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    cols = _im2col(xn)
    gx, gw, gb = conv_backward_nhwc(cols, xn.shape, params.weight,
                                    np.ascontiguousarray(g.transpose(0, 2, 3, 1)))
    return gx.transpose(0, 3, 1, 2), (gw, gb)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    ``logits`` may be ``(n, C)`` or ``(n, C, 1, 1)``; the gradient comes back
    in the same shape.
    """
    shape = logits.shape
    z = logits.reshape(shape[0], -1)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = z.shape
    if n < 1:
        raise ValidationError("softmax_cross_entropy needs a non-empty batch")
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValidationError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - shifted[rows, labels]))
    grad = np.exp(shifted - logsumexp[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.reshape(shape)


def sgd_momentum_step(params: Sequence[LayerParams], grads, lr: float, momentum: float,
                      names: Sequence[str] | None = None) -> Sequence[LayerParams]:
    """In-place ``v <- momentum*v + g; p <- p - lr*v`` on every layer."""
    if not lr > 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValidationError(f"momentum must be in [0, 1), got {momentum}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter layers but {len(grads)} gradients")
    for i, (p, (gw, gb)) in enumerate(zip(params, grads)):
        if gw.shape != p.weight.shape or gb.shape != p.bias.shape:
            raise ShapeError(f"gradient shapes {gw.shape}/{gb.shape} do not match layer {i} "
                             f"parameters {p.weight.shape}/{p.bias.shape}")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            label = names[i] if names else f"layer {i}"
            raise DivergenceError(f"non-finite gradient in {label}; training diverged")
        p.velocity_w *= momentum
        p.velocity_w += gw
        p.velocity_b *= momentum
        p.velocity_b += gb
        p.weight -= lr * p.velocity_w
        p.bias -= lr * p.velocity_b
    return params


def gradcheck_network(model, x: np.ndarray, labels, eps: float = 1e-5,
                      max_params: int | None = None, seed: int = 0,
                      max_per_tensor: int | None = None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``model`` must expose ``parameters()`` and ``loss_and_grads(x, labels)``.
    Run it on a float64 model. With ``max_params`` set, a seeded random subset
    of scalar parameters is perturbed instead of all of them;
    ``max_per_tensor`` instead caps the sample within each weight and bias
    array so every tensor is covered.
    """
    loss, grads = model.loss_and_grads(x, labels)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss in gradcheck")
    layers = model.parameters()
    rng = np.random.default_rng(seed)
    slots = []
    for li, p in enumerate(layers):
        for which, arr in ((0, p.weight), (1, p.bias)):
            ks = range(arr.size)
            if max_per_tensor is not None and arr.size > max_per_tensor:
                ks = sorted(rng.choice(arr.size, size=max_per_tensor, replace=False).tolist())
            slots += [(li, which, k) for k in ks]
    if max_params is not None and max_params < len(slots):
        pick = rng.choice(len(slots), size=max_params, replace=False)
        slots = [slots[i] for i in sorted(pick)]

    def loss_at() -> float:
        value = model.loss(x, labels)
        if not np.isfinite(value):
            raise NumericError("non-finite loss in gradcheck")
        return value

    worst = 0.0
    for li, which, k in slots:
        arr = layers[li].weight if which == 0 else layers[li].bias
        flat = arr.reshape(-1)
        orig = flat[k]
        h = eps * max(1.0, abs(orig))
        flat[k] = orig + h
        up = loss_at()
        flat[k] = orig - h
        down = loss_at()
        flat[k] = orig
        fd = (up - down) / (2 * h)
        analytic = float(grads[li][which].reshape(-1)[k])
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
