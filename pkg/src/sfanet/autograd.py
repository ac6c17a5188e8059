"""Dense tensors with reverse-mode automatic differentiation.

Everything the network and losses need lives here: a numpy-backed Tensor
that records the operations applied to it, the convolution / normalization /
pooling / resampling primitives with their adjoints, and ``backward`` which
replays the recorded tape in exact reverse execution order.

Tensors are immutable after construction except for gradient accumulation.
A graph is consumed by ``backward``; intermediate results keep their ``grad``
buffers but drop their graph links, so memory is released after every step.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "BatchNormState",
    "UninitializedStatsError",
    "no_grad",
    "grad_enabled",
    "backward",
    "conv2d",
    "conv2d_reference",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "maxpool2x2",
    "upsample2x",
    "concat_channels",
    "mul_broadcast_channel",
    "bce_with_logits",
]

_GRAD_ENABLED = True
_SEQ = itertools.count()


class UninitializedStatsError(RuntimeError):
    """Eval-mode normalization requested before any running-stat update."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval forwards, inference)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional real array, optionally participating in the grad tape.

    ``data`` is a numpy float array (float32 for training builds, float64 for
    gradient-check builds). ``grad`` is lazily allocated with the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._seq = next(_SEQ)

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- grad plumbing ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _sub(self, other)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __neg__(self):
        return _mul(self, -1.0)

    def sum(self) -> "Tensor":
        return _sum(self)

    def mean(self) -> "Tensor":
        return _mul(_sum(self), 1.0 / self.size)


class Parameter(Tensor):
    """Named leaf tensor; the name encodes layer identity for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _make_output(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the tape node when grads are live."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Visits the recorded operations in exact reverse execution order,
    accumulates gradients into every reachable tensor with
    ``requires_grad``, then drops the graph references (the tape is
    cleared; ``grad`` buffers survive).
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    loss.accumulate_grad(np.ones_like(loss.data))
    for t in nodes:
        if t._backward_fn is not None and t.grad is not None:
            t._backward_fn(t.grad)
    for t in nodes:
        t._parents = ()
        t._backward_fn = None


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = _make_output(a.data + b.data, (a, b), None)

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        out._backward_fn = bwd if out.requires_grad else None
        return out
    val = float(b)
    out = _make_output(a.data + val, (a,), None)

    def bwd_scalar(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    out._backward_fn = bwd_scalar if out.requires_grad else None
    return out


def _sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = _make_output(a.data - b.data, (a, b), None)

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(-g)

        out._backward_fn = bwd if out.requires_grad else None
        return out
    return _add(a, -float(b))


def _mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = _make_output(a.data * b.data, (a, b), None)

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad(g * a.data)

        out._backward_fn = bwd if out.requires_grad else None
        return out
    val = float(b)
    out = _make_output(a.data * val, (a,), None)

    def bwd_scalar(g):
        if a.requires_grad:
            a.accumulate_grad(g * val)

    out._backward_fn = bwd_scalar if out.requires_grad else None
    return out


def _sum(a: Tensor) -> Tensor:
    out = _make_output(np.asarray(a.data.sum(), dtype=a.dtype), (a,), None)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    out._backward_fn = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    out_data = np.maximum(x.data, 0)
    out = _make_output(out_data, (x,), None)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * (out_data > 0))

    out._backward_fn = bwd if out.requires_grad else None
    return out


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, overflow-safe at large |x|."""
    s = _sigmoid_stable(x.data)
    out = _make_output(s, (x,), None)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * s * (1.0 - s))

    out._backward_fn = bwd if out.requires_grad else None
    return out


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Per-element binary cross entropy computed from pre-sigmoid logits.

    Fused form max(z,0) - z*t + log1p(exp(-|z|)): identical to
    -t*log(sigmoid(z)) - (1-t)*log(1-sigmoid(z)) but never evaluates log(0).
    """
    _check_same_shape(logits, target, "bce_with_logits")
    z = logits.data
    t = target.data
    val = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _make_output(val, (logits, target), None)

    def bwd(g):
        if logits.requires_grad:
            logits.accumulate_grad(g * (_sigmoid_stable(z) - t))
        if target.requires_grad:
            target.accumulate_grad(g * (-z))

    out._backward_fn = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_checks(x: Tensor, weight: Tensor, bias, stride: int, pad):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    cout, cin_w, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if stride != 1:
        raise ValueError(f"conv2d: only stride 1 is supported, got {stride}")
    if x.shape[1] != cin_w:
        raise ValueError(
            f"conv2d: input channels {x.shape} do not match weight {weight.shape}"
        )
    if pad is None:
        pad = kh // 2
    if pad != kh // 2:
        raise ValueError(f"conv2d: pad must be k//2 (same padding), got {pad} for k={kh}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    return pad


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int | None = None) -> Tensor:
    """Same-padding 2-d convolution (cross-correlation), stride 1, k in {1,3}.

    Lowered to one GEMM per call: window patches are gathered into a
    (Cin*k*k, N*H*W) matrix and multiplied against the flattened weight.
    Matches :func:`conv2d_reference` to 1e-10.
    """
    pad = _conv_checks(x, weight, bias, stride, pad)
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape

    if k == 1:
        cols = x.data.reshape(n, cin, h * w)  # [N, Cin, HW], a view
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        # contiguous patch buffer laid out to match weight.reshape(Cout, Cin*k*k)
        patches = np.empty((n, cin, k * k, h, w), dtype=x.dtype)
        for u in range(k):
            for v in range(k):
                patches[:, :, u * k + v] = xp[:, :, u:u + h, v:v + w]
        cols = patches.reshape(n, cin * k * k, h * w)
    wmat = weight.data.reshape(cout, cin * k * k)
    out_data = np.matmul(wmat, cols).reshape(n, cout, h, w)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make_output(out_data, parents, None)

    def bwd(g):
        gmat = g.reshape(n, cout, h * w)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(dw.reshape(cout, cin, k, k))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)  # [N, Cin*k*k, HW]
            if k == 1:
                x.accumulate_grad(dcols.reshape(n, cin, h, w))
            else:
                dwin = dcols.reshape(n, cin, k * k, h, w)
                dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
                for u in range(k):
                    for v in range(k):
                        dxp[:, :, u:u + h, v:v + w] += dwin[:, :, u * k + v]
                x.accumulate_grad(dxp[:, :, pad:pad + h, pad:pad + w])

    out._backward_fn = bwd if out.requires_grad else None
    return out


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                     stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Direct nested-loop convolution on raw arrays; the semantic reference.

    Slow and only used in tests and cross-checks. The GEMM path in
    :func:`conv2d` must agree with this to 1e-10.
    """
    n, cin, h, w = x.shape
    cout, cin_w, k, _ = weight.shape
    assert cin == cin_w and stride == 1
    if pad is None:
        pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, h, w), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[ni, ci, i + u, j + v] * weight[co, ci, u, v]
                    out[ni, co, i, j] = acc + (bias[co] if bias is not None else 0.0)
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics for one normalization layer.

    ``running_var`` tracks the biased (population) batch variance, the same
    estimator used to normalize, so train and eval agree in the limit.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            num_batches=0,
        )


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by the batch mean/variance (biased) and updates the
    running statistics in place; eval mode normalizes by the running
    statistics and fails if they were never updated.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: expected 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={c}"
        )
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        if m < 2:
            raise ValueError(f"batchnorm2d: need N*H*W >= 2 per channel, got {m}")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=axes)  # biased
        state.running_mean = ((1.0 - momentum) * state.running_mean + momentum * mean).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1.0 - momentum) * state.running_var + momentum * var).astype(
            state.running_var.dtype
        )
        state.num_batches += 1
    else:
        if state.num_batches == 0:
            raise UninitializedStatsError(
                "batchnorm2d: eval mode requested before any running-stat update"
            )
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        centered = x.data - mean[None, :, None, None]

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = centered * ivar[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _make_output(out_data, (x, gamma, beta), None)

    def bwd(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if x.requires_grad:
            give = g * gamma.data[None, :, None, None]
            if training:
                gm = give.mean(axis=axes)
                gxm = (give * xhat).mean(axis=axes)
                dx = ivar[None, :, None, None] * (
                    give - gm[None, :, None, None] - xhat * gxm[None, :, None, None]
                )
            else:
                dx = give * ivar[None, :, None, None]
            x.accumulate_grad(dx)

    out._backward_fn = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# pooling / resampling / fusion
# ---------------------------------------------------------------------------


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    window position in row-major order."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2x2: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: H and W must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h2, w2, 4
    )
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _make_output(out_data, (x,), None)

    def bwd(g):
        if x.requires_grad:
            dwin = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
                n, c, h, w
            )
            x.accumulate_grad(dx)

    out._backward_fn = bwd if out.requires_grad else None
    return out


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double H and W. Nearest-neighbor replication; the adjoint sums each
    2x2 replica block."""
    if mode != "nearest":
        raise ValueError(f"upsample2x: unsupported mode {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"upsample2x: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = _make_output(out_data, (x,), None)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    out._backward_fn = bwd if out.requires_grad else None
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradient splits at the seam."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels: expected 4-d inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = _make_output(np.concatenate([a.data, b.data], axis=1), (a, b), None)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :ca])
        if b.requires_grad:
            b.accumulate_grad(g[:, ca:])

    out._backward_fn = bwd if out.requires_grad else None
    return out


def mul_broadcast_channel(features: Tensor, gate: Tensor) -> Tensor:
    """Multiply [N,C,H,W] features by a [N,1,H,W] map broadcast across C."""
    if features.ndim != 4 or gate.ndim != 4 or gate.shape[1] != 1:
        raise ValueError(
            f"mul_broadcast_channel: expected [N,C,H,W] and [N,1,H,W], "
            f"got {features.shape} and {gate.shape}"
        )
    if features.shape[0] != gate.shape[0] or features.shape[2:] != gate.shape[2:]:
        raise ValueError(
            f"mul_broadcast_channel: spatial mismatch {features.shape} vs {gate.shape}"
        )
    out = _make_output(features.data * gate.data, (features, gate), None)

    def bwd(g):
        if features.requires_grad:
            features.accumulate_grad(g * gate.data)
        if gate.requires_grad:
            gate.accumulate_grad((g * features.data).sum(axis=1, keepdims=True))

    out._backward_fn = bwd if out.requires_grad else None
    return out
