"""Dense tensor arithmetic with reverse-mode differentiation.

Just enough machinery for a small two-stage convolutional detector:
stride-1 convolutions with odd kernels, 2x2 max pooling, global pools,
channel concatenation, a linear head, pointwise nonlinearities, and the
elementwise/reduction arithmetic the losses are composed from. No
broadcasting beyond bias-add over channels, no dynamic shapes.

Recording model: every differentiable op accepts `Tensor` operands (raw
numpy arrays and python scalars are wrapped as constants). If any operand
belongs to a `Tape`, the op appends one record holding the values its
backward rule needs; record order is execution order, which is already a
topological order of the graph. `backward` replays the records once, in
reverse, accumulating gradients in that fixed order.

Determinism: reductions and matmuls delegate to numpy, whose summation
order (pairwise) is fixed within one build of the stack; bit-identical
reruns on the same build are guaranteed, cross-build bit equality is not.

Precision: ops compute in the dtype of their operands (float32 for
training and adaptation, float64 for gradient verification). Constants
are cast to the operand dtype so a graph never promotes silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, ShapeError

# sigmoid pre-activation clamp; keeps exp() finite in float32
SIGMOID_CLAMP = 30.0


class Tensor:
    """A value node: numpy payload plus (optional) position on a tape."""

    __slots__ = ("data", "tape", "nid", "needs_grad")

    def __init__(self, data, tape=None, nid=-1, needs_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.tape = tape
        self.nid = nid
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" node={self.nid}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; defined in terms of the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of executed differentiable operations.

    Each record is (output id, backward rule); parent ids are captured in
    the rule's closure together with whatever forward values it caches.
    Node ids are assigned in execution order, so inputs always precede
    outputs and one reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self._next_id = 0
        self._records: list[tuple[int, Callable[[np.ndarray], list[tuple[int, np.ndarray]]]]] = []
        self._leaves: list[tuple[str, int, np.ndarray]] = []

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, data: np.ndarray, name: str | None = None) -> Tensor:
        """Register a leaf. Named leaves are the trainable parameters."""
        t = Tensor(data, self, self._new_id(), needs_grad=name is not None)
        if name is not None:
            self._leaves.append((name, t.nid, t.data))
        return t

    def _record(self, out_data: np.ndarray, backward_rule, needs_grad: bool) -> Tensor:
        out = Tensor(out_data, self, self._new_id(), needs_grad=needs_grad)
        if needs_grad:
            self._records.append((out.nid, backward_rule))
        return out

    def __len__(self):
        return len(self._records)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap non-Tensor operands as constants in the Tensor operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    arr = np.asarray(a)
    return Tensor(arr), Tensor(np.asarray(b, dtype=arr.dtype))


def _tape_of(*tensors: Tensor):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(tape, out_data, parents: Sequence[Tensor], backward_rule) -> Tensor:
    """Create the output tensor, recording a backward rule when needed."""
    needs = False
    for p in parents:
        if p.needs_grad:
            needs = True
            break
    if tape is None:
        return Tensor(out_data, needs_grad=needs)
    return tape._record(out_data, backward_rule, needs)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
    out = a.data + b.data

    def rule(g):
        grads = []
        if a.needs_grad:
            grads.append((a.nid, g if a.data.shape == out.shape else np.sum(g)))
        if b.needs_grad:
            grads.append((b.nid, g if b.data.shape == out.shape else np.sum(g)))
        return grads

    return _emit(_tape_of(a, b), out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return add(a, neg(b))


def neg(a) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))

    def rule(g):
        return [(a.nid, -g)] if a.needs_grad else []

    return _emit(a.tape, -a.data, (a,), rule)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def rule(g):
        grads = []
        if a.needs_grad:
            ga = g * b_data
            grads.append((a.nid, ga if a_data.shape == out.shape else np.sum(ga)))
        if b.needs_grad:
            gb = g * a_data
            grads.append((b.nid, gb if b_data.shape == out.shape else np.sum(gb)))
        return grads

    return _emit(_tape_of(a, b), out, (a, b), rule)


def log(a: Tensor) -> Tensor:
    inv = 1.0 / a.data

    def rule(g):
        return [(a.nid, g * inv)] if a.needs_grad else []

    return _emit(a.tape, np.log(a.data), (a,), rule)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def rule(g):
        return [(a.nid, g * mask)] if a.needs_grad else []

    return _emit(a.tape, out, (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype

    def rule(g):
        return [(a.nid, np.full(shape, g, dtype=dtype))] if a.needs_grad else []

    return _emit(a.tape, np.sum(a.data), (a,), rule)


def mean_all(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    n = a.data.size

    def rule(g):
        return [(a.nid, np.full(shape, g / n, dtype=dtype))] if a.needs_grad else []

    return _emit(a.tape, np.mean(a.data), (a,), rule)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    def rule(g):
        return [(a.nid, g * (a.data > 0))] if a.needs_grad else []

    return _emit(a.tape, np.maximum(a.data, 0), (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function; pre-activation clamped to +-SIGMOID_CLAMP."""
    z = np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    s = 1.0 / (1.0 + np.exp(-z))

    def rule(g):
        if not a.needs_grad:
            return []
        inside = (a.data > -SIGMOID_CLAMP) & (a.data < SIGMOID_CLAMP)
        return [(a.nid, g * s * (1.0 - s) * inside)]

    return _emit(a.tape, s, (a,), rule)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    m = np.max(a.data, axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def rule(g):
        return [(a.nid, g - soft * np.sum(g, axis=-1, keepdims=True))] if a.needs_grad else []

    return _emit(a.tape, out, (a,), rule)


# ---------------------------------------------------------------------------
# convolution / pooling / structure


def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad the two trailing axes (faster than np.pad for this case)."""
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def _im2col(padded: np.ndarray, kh: int, kw: int):
    """(N,C,Hp,Wp) -> ((N, C*kh*kw, H*W) patch matrix, H, W) for stride-1 windows."""
    n, c, hp, wp = padded.shape
    h, w = hp - kh + 1, wp - kw + 1
    if kh == 1 and kw == 1:
        return padded.reshape(n, c, h * w), h, w
    s0, s1, s2, s3 = padded.strides
    view = as_strided(padded, (n, c, kh, kw, h, w), (s0, s1, s2, s3, s2, s3))
    return view.reshape(n, c * kh * kw, h * w), h, w


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation with zero same-padding or no padding.

    x: (N,Cin,H,W), kernel: (Cout,Cin,kh,kw) with kh,kw odd, bias: (Cout,).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (N,Cin,H,W), got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d (Cout,Cin,kh,kw), got {kernel.shape}")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel axes (kh,kw)=({kh},{kw}) must be odd")
    if kcin != cin:
        raise ShapeError(f"conv2d: input channel axis {cin} != kernel channel axis {kcin}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias axis {bias.shape} != output channel axis ({cout},)")
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")

    ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)
    if padding == "valid" and (h < kh or w < kw):
        raise ShapeError(f"conv2d: spatial axes ({h},{w}) smaller than kernel ({kh},{kw})")
    cols, ho, wo = _im2col(_pad2d(x.data, ph, pw), kh, kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, cout, ho, wo) + bias.data[None, :, None, None]

    def rule(g):
        grads = []
        gm = g.reshape(n, cout, ho * wo)
        if kernel.needs_grad:
            gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            grads.append((kernel.nid, gk.reshape(kernel.data.shape)))
        if bias.needs_grad:
            grads.append((bias.nid, g.sum(axis=(0, 2, 3))))
        if x.needs_grad:
            # correlate the padded upstream gradient with the flipped kernel
            gcols, _, _ = _im2col(_pad2d(g, kh - 1 - ph, kw - 1 - pw), kh, kw)
            kt = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            grads.append((x.nid, np.matmul(kt.reshape(cin, cout * kh * kw), gcols).reshape(n, cin, h, w)))
        return grads

    return _emit(_tape_of(x, kernel, bias), out, (x, kernel, bias), rule)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first max."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: input must be 4-d (N,C,H,W), got {x.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial axes ({h},{w}) must be even")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))

    def rule(g):
        if not x.needs_grad:
            return []
        # recompute the window argmax only when a gradient actually flows;
        # the (row-major) first max of each window receives the gradient
        win = np.ascontiguousarray(x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5))
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = np.argmax(win, axis=-1)
        gz = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gz, idx[..., None], g[..., None], axis=-1)
        gz = gz.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return [(x.nid, np.ascontiguousarray(gz).reshape(n, c, h, w))]

    return _emit(x.tape, out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    n, c, h, w = x.data.shape

    def rule(g):
        if not x.needs_grad:
            return []
        return [(x.nid, np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy())]

    return _emit(x.tape, x.data.mean(axis=(2, 3)), (x,), rule)


def global_max_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial max; ties route to the first (row-major) max."""
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        if not x.needs_grad:
            return []
        gz = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gz, idx[..., None], g[..., None], axis=-1)
        return [(x.nid, gz.reshape(n, c, h, w))]

    return _emit(x.tape, out, (x,), rule)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate along axis 1 (channels for 4-d, features for 2-d)."""
    parts = list(parts)
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def rule(g):
        grads = []
        start = 0
        for p, width in zip(parts, widths):
            if p.needs_grad:
                grads.append((p.nid, g[:, start : start + width]))
            start += width
        return grads

    return _emit(_tape_of(*parts), out, parts, rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x: (N,F), weight: (O,F), bias: (O,) -> (N,O)."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear: input must be 2-d (N,F), got {x.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: feature axis {x.data.shape[1]} != weight axis {weight.data.shape[1]}"
        )
    out = x.data @ weight.data.T + bias.data
    x_data = x.data

    def rule(g):
        grads = []
        if weight.needs_grad:
            grads.append((weight.nid, g.T @ x_data))
        if bias.needs_grad:
            grads.append((bias.nid, g.sum(axis=0)))
        if x.needs_grad:
            grads.append((x.nid, g @ weight.data))
        return grads

    return _emit(_tape_of(x, weight, bias), out, (x, weight, bias), rule)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss w.r.t. every named leaf.

    Returns one entry per registered parameter; parameters the loss does
    not depend on get exact zeros.
    """
    if loss.tape is not tape:
        raise ContractError("loss node does not belong to this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.data)}
    for out_id, rule in reversed(tape._records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for pid, pg in rule(g):
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return {
        name: grads[nid].reshape(data.shape) if nid in grads else np.zeros_like(data)
        for name, nid, data in tape._leaves
    }
