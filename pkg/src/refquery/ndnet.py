"""Minimal numeric core.

Float32 tensors (float64 supported for gradient checking), the fixed
operator set used by the network, reverse-mode gradients over a recorded
computation tape, the two training losses, and the Adam update rule.
Operators are pure functions over immutable inputs; a tape/optimizer pair
is single-owner.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import EmptyBatchError, InvalidShapeError, StaleTapeError

EPS_NORM = 1e-12   # L2-normalization degenerate guard
EPS_PROB = 1e-7    # BCE probability clamp


# ---------------------------------------------------------------------------
# Tensor and tape

class Tensor:
    """Dense array of 32-bit (or 64-bit) floats in row-major order."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Tape:
    """Records one forward pass for a single backward sweep.

    Use as a context manager; at most one tape is active at a time. A tape
    is consumed by backward() and raises StaleTapeError on reuse.
    """

    def __init__(self):
        self._nodes = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        if self.consumed:
            raise StaleTapeError("cannot record on a consumed tape")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out, backward_fn):
        if self.consumed:
            raise StaleTapeError("cannot record on a consumed tape")
        self._nodes.append((out, backward_fn))


_ACTIVE_TAPE: Tape | None = None


def _record(out: Tensor, inputs, backward_fn):
    """Attach a backward closure to the active tape if gradients are needed."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, backward_fn)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor, params: "ParamSet | None" = None):
    """Run reverse-mode accumulation from a scalar loss over a recorded tape.

    Populates ``.grad`` on every tensor that requires gradients. When a
    ParamSet is given, returns its gradient dict (zero arrays for frozen
    parameters). The tape is consumed and cannot be reused.
    """
    if tape.consumed:
        raise StaleTapeError("tape already consumed by a previous backward()")
    if loss.data.ndim != 0:
        raise InvalidShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, fn in reversed(tape._nodes):
        if out.grad is not None:
            fn(out.grad)
    tape._nodes.clear()
    if params is not None:
        return params.gradients()
    return None


# ---------------------------------------------------------------------------
# FLOP instrumentation (used by the cost model's dual-route check)

class FlopCounter:
    """Counts floating-point ops of forward passes: 2 per multiply-accumulate,
    1 per elementwise op. Activate via ``with FlopCounter() as fc:``."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        global _ACTIVE_FLOPS
        if _ACTIVE_FLOPS is not None:
            raise RuntimeError("a flop counter is already active")
        _ACTIVE_FLOPS = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_FLOPS
        _ACTIVE_FLOPS = None
        return False


_ACTIVE_FLOPS: FlopCounter | None = None


def _count_flops(n):
    if _ACTIVE_FLOPS is not None:
        _ACTIVE_FLOPS.total += int(n)


# ---------------------------------------------------------------------------
# Shape helpers

def _ceil_div(a, b):
    return -(-a // b)


def _to_batched(x: Tensor, feature_ndim):
    """View data as (batch, ...) adding a leading axis when absent."""
    if x.data.ndim == feature_ndim:
        return x.data[None, ...], True
    if x.data.ndim == feature_ndim + 1:
        return x.data, False
    raise InvalidShapeError(
        f"expected {feature_ndim}-d or {feature_ndim + 1}-d input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Operators

def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Same-padded 1-d convolution.

    ``x`` is (len, in_ch) or (batch, len, in_ch); ``weight`` is
    (k, in_ch, out_ch) with odd k; stride 1 or 2. Output length is
    ceil(len / stride); out-of-range taps read as zero.
    """
    if weight.data.ndim != 3:
        raise InvalidShapeError(f"conv1d weight must be (k, in_ch, out_ch), got {weight.shape}")
    k, in_ch, out_ch = weight.shape
    if k % 2 == 0:
        raise InvalidShapeError(f"conv1d kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise InvalidShapeError(f"conv1d stride must be 1 or 2, got {stride}")
    if bias.data.shape != (out_ch,):
        raise InvalidShapeError(f"conv1d bias must be ({out_ch},), got {bias.shape}")

    xd, squeezed = _to_batched(x, 2)
    batch, length, ch = xd.shape
    if ch != in_ch:
        raise InvalidShapeError(
            f"conv1d input has {ch} channels but kernel expects {in_ch}")

    out_len = _ceil_div(length, stride)
    pad_total = max((out_len - 1) * stride + k - length, 0)
    pl = pad_total // 2
    pr = pad_total - pl
    xp = np.pad(xd, ((0, 0), (pl, pr), (0, 0)))

    def _im2col(arr):
        win = np.lib.stride_tricks.sliding_window_view(arr, k, axis=1)
        win = win[:, ::stride][:, :out_len]          # (batch, out_len, in_ch, k)
        cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2))
        return cols.reshape(batch * out_len, k * in_ch)

    cols = _im2col(xp)
    w2 = weight.data.reshape(k * in_ch, out_ch)
    y2 = cols @ w2
    y2 += bias.data
    yd = y2.reshape(batch, out_len, out_ch)
    _count_flops(batch * out_len * out_ch * (2 * k * in_ch + 1))
    out = Tensor(yd[0] if squeezed else yd)

    def _backward(g):
        g2 = g.reshape(batch * out_len, out_ch)
        if weight.requires_grad:
            c = _im2col(xp)
            _accumulate(weight, (c.T @ g2).reshape(k, in_ch, out_ch))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(batch, out_len, k, in_ch)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + stride * (out_len - 1) + 1:stride, :] += gcols[:, :, j, :]
            gx = gxp[:, pl:pl + length, :]
            _accumulate(x, gx[0] if squeezed else gx)

    _record(out, (x, weight, bias), _backward)
    return out


def maxpool1d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Ceil-mode max pooling with window 2, stride 2.

    A trailing partial window of size 1 is pooled as itself.
    """
    if window != 2 or stride != 2:
        raise InvalidShapeError("maxpool1d supports window=2, stride=2 only")
    xd, squeezed = _to_batched(x, 2)
    batch, length, ch = xd.shape
    if length < 1:
        raise InvalidShapeError("maxpool1d needs input length >= 1")
    out_len = _ceil_div(length, 2)
    if length % 2 == 1:
        pad_val = np.array(-np.inf, dtype=xd.dtype)
        xp = np.concatenate([xd, np.full((batch, 1, ch), pad_val)], axis=1)
    else:
        xp = xd
    xr = xp.reshape(batch, out_len, 2, ch)
    idx = xr.argmax(axis=2)
    yd = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    _count_flops(batch * out_len * ch)
    out = Tensor(yd[0] if squeezed else yd)

    def _backward(g):
        if not x.requires_grad:
            return
        g3 = g.reshape(batch, out_len, ch)
        gxp = np.zeros_like(xp)
        np.put_along_axis(gxp.reshape(batch, out_len, 2, ch),
                          idx[:, :, None, :], g3[:, :, None, :], axis=2)
        gx = gxp[:, :length, :]
        _accumulate(x, gx[0] if squeezed else gx)

    _record(out, (x,), _backward)
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight + bias for x of shape (n,) or (batch, n)."""
    if weight.data.ndim != 2:
        raise InvalidShapeError(f"dense weight must be 2-d, got {weight.shape}")
    n, m = weight.shape
    xd, squeezed = _to_batched(x, 1)
    if xd.shape[1] != n:
        raise InvalidShapeError(
            f"dense input width {xd.shape[1]} does not match weight rows {n}")
    if bias.data.shape != (m,):
        raise InvalidShapeError(f"dense bias must be ({m},), got {bias.shape}")
    yd = xd @ weight.data + bias.data
    _count_flops(xd.shape[0] * (2 * n * m + m))
    out = Tensor(yd[0] if squeezed else yd)

    def _backward(g):
        g2 = g.reshape(xd.shape[0], m)
        if weight.requires_grad:
            _accumulate(weight, xd.T @ g2)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 @ weight.data.T
            _accumulate(x, gx[0] if squeezed else gx)

    _record(out, (x, weight, bias), _backward)
    return out


def relu(x: Tensor) -> Tensor:
    yd = np.maximum(x.data, 0)
    _count_flops(x.size)
    out = Tensor(yd)

    def _backward(g):
        _accumulate(x, g * (x.data > 0))

    _record(out, (x,), _backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    yd = np.empty_like(xd)
    pos = xd >= 0
    yd[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    yd[~pos] = ex / (1.0 + ex)
    _count_flops(x.size)
    out = Tensor(yd)

    def _backward(g):
        _accumulate(x, g * yd * (1.0 - yd))

    _record(out, (x,), _backward)
    return out


def l2_normalize(x: Tensor) -> Tensor:
    """Scale rows to unit Euclidean norm; rows with norm <= 1e-12 pass through."""
    xd, squeezed = _to_batched(x, 1)
    norms = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    safe = norms > EPS_NORM
    scale = np.where(safe, norms, 1.0)
    yd = xd / scale
    _count_flops(xd.shape[0] * (3 * xd.shape[1] + 1))
    out = Tensor(yd[0] if squeezed else yd)

    def _backward(g):
        if not x.requires_grad:
            return
        g2 = g.reshape(xd.shape)
        dot = (yd * g2).sum(axis=1, keepdims=True)
        gx = np.where(safe, (g2 - yd * dot) / scale, g2)
        _accumulate(x, gx[0] if squeezed else gx)

    _record(out, (x,), _backward)
    return out


def _broadcast_reduce(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, dtype=a.dtype)
    yd = a.data + b.data
    _count_flops(yd.size)
    out = Tensor(yd)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _broadcast_reduce(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _broadcast_reduce(g, b.shape))

    _record(out, (a, b), _backward)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, dtype=a.dtype)
    yd = a.data - b.data
    _count_flops(yd.size)
    out = Tensor(yd)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _broadcast_reduce(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _broadcast_reduce(-g, b.shape))

    _record(out, (a, b), _backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, dtype=a.dtype)
    yd = a.data * b.data
    _count_flops(yd.size)
    out = Tensor(yd)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _broadcast_reduce(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _broadcast_reduce(g * a.data, b.shape))

    _record(out, (a, b), _backward)
    return out


def square(x: Tensor) -> Tensor:
    yd = x.data * x.data
    _count_flops(x.size)
    out = Tensor(yd)

    def _backward(g):
        _accumulate(x, g * (2.0 * x.data))

    _record(out, (x,), _backward)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    yd = np.concatenate(datas, axis=axis)
    out = Tensor(yd)
    ax = axis if axis >= 0 else yd.ndim + axis
    sizes = [d.shape[ax] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def _backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    _record(out, tuple(tensors), _backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    yd = x.data.reshape(shape)
    out = Tensor(yd)

    def _backward(g):
        _accumulate(x, g.reshape(x.shape))

    _record(out, (x,), _backward)
    return out


def broadcast_to(x: Tensor, shape) -> Tensor:
    yd = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    out = Tensor(yd)

    def _backward(g):
        _accumulate(x, _broadcast_reduce(g, x.shape))

    _record(out, (x,), _backward)
    return out


def take_rows(x: Tensor, indices) -> Tensor:
    """Row gather; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.intp)
    yd = x.data[idx]
    out = Tensor(yd)

    def _backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    _record(out, (x,), _backward)
    return out


# ---------------------------------------------------------------------------
# Losses

def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, dtype=pred.dtype)
    if pred.data.shape != target.data.shape:
        raise InvalidShapeError(
            f"mse_loss shapes differ: {pred.shape} vs {target.data.shape}")
    n = pred.size
    if n == 0:
        raise EmptyBatchError("mse_loss over an empty batch")
    diff = pred.data - target.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=pred.dtype))

    def _backward(g):
        _accumulate(pred, g * (2.0 / n) * diff)

    _record(out, (pred,), _backward)
    return out


def bce_loss(prob: Tensor, label) -> Tensor:
    """Mean binary cross-entropy on probabilities in (0, 1).

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    label = _as_tensor(label, dtype=prob.dtype)
    if prob.data.shape != label.data.shape:
        raise InvalidShapeError(
            f"bce_loss shapes differ: {prob.shape} vs {label.data.shape}")
    n = prob.size
    if n == 0:
        raise EmptyBatchError("bce_loss over an empty batch")
    lo = prob.data.dtype.type(EPS_PROB)
    hi = prob.data.dtype.type(1.0) - lo
    p = np.clip(prob.data, lo, hi)
    y = label.data
    out = Tensor(np.asarray(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean(),
                            dtype=prob.dtype))

    def _backward(g):
        inside = (prob.data >= lo) & (prob.data <= hi)
        _accumulate(prob, g * inside * (p - y) / (p * (1.0 - p) * n))

    _record(out, (prob,), _backward)
    return out


# ---------------------------------------------------------------------------
# Parameter sets

class ParamSet:
    """Named parameter tensors with per-parameter trainable flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = trainable
        self._tensors[name] = tensor
        self._trainable[name] = trainable
        return tensor

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [n for n, f in self._trainable.items() if f]

    def set_all_trainable(self, flag: bool):
        for name, t in self._tensors.items():
            self._trainable[name] = flag
            t.requires_grad = flag

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Accumulated gradients per parameter; frozen parameters get zeros."""
        out = {}
        for name, t in self._tensors.items():
            if self._trainable[name] and t.grad is not None:
                out[name] = t.grad
            else:
                out[name] = np.zeros_like(t.data)
        return out

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def num_trainable_values(self) -> int:
        return sum(t.size for n, t in self._tensors.items() if self._trainable[n])

    def checksum(self) -> str:
        """SHA-256 over names and raw little-endian bytes, order-independent."""
        h = hashlib.sha256()
        for name in sorted(self._tensors):
            h.update(name.encode())
            arr = self._tensors[name].data
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def restore(self, values: dict[str, np.ndarray]):
        for name, arr in values.items():
            t = self._tensors[name]
            if t.data.shape != arr.shape:
                raise InvalidShapeError(f"snapshot shape mismatch for {name!r}")
            t.data = arr.copy()

    @staticmethod
    def merged(*sets: "ParamSet") -> "ParamSet":
        """Combined view sharing the underlying tensors."""
        out = ParamSet()
        for ps in sets:
            for name, t in ps._tensors.items():
                if name in out._tensors:
                    raise ValueError(f"duplicate parameter name {name!r} in merge")
                out._tensors[name] = t
                out._trainable[name] = ps._trainable[name]
        return out


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    """Bias-corrected Adam over a ParamSet's trainable parameters."""

    def __init__(self, params: ParamSet, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._names = tuple(params.trainable_names())
        self.m = {n: np.zeros_like(params[n].data) for n in self._names}
        self.v = {n: np.zeros_like(params[n].data) for n in self._names}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray] | None = None):
        """Apply one update to the trainable parameters.

        ``grads`` defaults to the accumulated ``.grad`` fields; parameters
        with no gradient this step are skipped. Frozen parameters are never
        touched. The trainable-flag set must match the one seen at init.
        """
        if tuple(params.trainable_names()) != self._names:
            raise ValueError("trainable-flag set changed during an optimization run")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in self._names:
            p = params[name]
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise InvalidShapeError(f"gradient shape mismatch for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: AdamState, params: ParamSet,
              grads: dict[str, np.ndarray] | None = None):
    """Functional wrapper around AdamState.step."""
    state.step(params, grads)
    return params, state
