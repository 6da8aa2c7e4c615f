"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the decoder needs: broadcast arithmetic,
matmul, softmax, layer norm, embedding lookup, causal convolution, and a
fused causal attention with optional extra key/value slots and rotary
positions. Arrays are float64 by default; float32 can be selected for
speed builds via set_default_dtype (gradient tolerances are stated for
float64).

A tensor is immutable after creation except for gradient accumulation,
and one compute graph belongs to a single logical thread.
"""

from __future__ import annotations

import math

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

# Running count of attention score evaluations (query-key pairs, including
# masked ones), used to check the analytical attention-cost law.
_ATTN_SCORE_OPS = 0


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


def attention_score_ops() -> int:
    """Number of query-key score evaluations since the last reset."""
    return _ATTN_SCORE_OPS


def reset_attention_score_ops() -> None:
    global _ATTN_SCORE_OPS
    _ATTN_SCORE_OPS = 0


class no_grad:
    """Context manager that disables graph recording (eval / generation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """A dense n-dimensional array node in a compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backprop", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backprop = None
        self._backward_done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every reachable node by reverse traversal.

        The loss must be scalar, and a graph can be walked only once;
        build a fresh forward graph for another pass.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if self._backward_done:
            raise RuntimeError("backward already ran on this graph; rebuild the forward pass first")
        self._backward_done = True

        # Iterative post-order: each node appended exactly once.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backprop is not None:
                node._backprop()

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _result(np.add(self.data, other.data), (self, other), "add")
        if out._prev:
            def _bp():
                if _tracked(self):
                    self._accum(_unbroadcast(out.grad, self.shape))
                if _tracked(other):
                    other._accum(_unbroadcast(out.grad, other.shape))
            out._backprop = _bp
        return out

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _result(np.multiply(self.data, other.data), (self, other), "mul")
        if out._prev:
            def _bp():
                if _tracked(self):
                    self._accum(_unbroadcast(out.grad * other.data, self.shape))
                if _tracked(other):
                    other._accum(_unbroadcast(out.grad * self.data, other.shape))
            out._backprop = _bp
        return out

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __radd__(self, other):
        return self + other

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor/tensor division is not an op this engine needs")
        return self * (1.0 / c)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        out = _result(np.maximum(self.data, 0.0), (self,), "relu")
        if out._prev:
            def _bp():
                self._accum(out.grad * (self.data > 0))
            out._backprop = _bp
        return out

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _result(self.data.reshape(shape), (self,), "reshape")
        if out._prev:
            def _bp():
                self._accum(out.grad.reshape(self.shape))
            out._backprop = _bp
        return out

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        out = _result(np.transpose(self.data, axes), (self,), "transpose")
        if out._prev:
            inv = np.argsort(axes)
            def _bp():
                self._accum(np.transpose(out.grad, inv))
            out._backprop = _bp
        return out

    def __getitem__(self, key) -> "Tensor":
        # Basic slicing only: views never alias repeated elements.
        out = _result(self.data[key], (self,), "slice")
        if out._prev:
            def _bp():
                g = np.zeros_like(self.data)
                g[key] += out.grad
                self._accum(g)
            out._backprop = _bp
        return out

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out._prev:
            def _bp():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape))
            out._backprop = _bp
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or bool(t._prev)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(_tracked(p) for p in parents):
        out._prev = parents
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product over the last two axes, broadcasting the rest."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out._prev:
        def _bp():
            if _tracked(a):
                ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.shape))
            if _tracked(b):
                gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
                b._accum(_unbroadcast(gb, b.shape))
        out._backprop = _bp
    return out


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out._prev:
        sizes = [t.shape[axis] for t in tensors]
        def _bp():
            offset = 0
            for t, n in zip(tensors, sizes):
                if _tracked(t):
                    idx = [slice(None)] * out.ndim
                    idx[axis] = slice(offset, offset + n)
                    t._accum(out.grad[tuple(idx)])
                offset += n
        out._backprop = _bp
    return out


def broadcast_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    t = _as_tensor(t)
    out = _result(np.broadcast_to(t.data, shape).copy(), (t,), "broadcast_to")
    if out._prev:
        def _bp():
            t._accum(_unbroadcast(out.grad, t.shape))
        out._backprop = _bp
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; ids is a plain integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    out = _result(table.data[ids], (table,), "embedding")
    if out._prev:
        def _bp():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table._accum(g)
        out._backprop = _bp
    return out


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per last-axis slice: out[...] = x[..., idx[...]]."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ValueError("index shape must equal x.shape[:-1]")
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    out = _result(out_data, (x,), "gather_last")
    if out._prev:
        def _bp():
            g = np.zeros_like(x.data)
            np.put_along_axis(g, idx[..., None], out.grad[..., None], axis=-1)
            x._accum(g)
        out._backprop = _bp
    return out


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (x,), "softmax_last")
    if out._prev:
        def _bp():
            g = out.grad
            x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))
        out._backprop = _bp
    return out


def log_softmax_last(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = _result(shifted - logz, (x,), "log_softmax_last")
    if out._prev:
        sm = np.exp(out.data)
        def _bp():
            g = out.grad
            x._accum(g - sm * g.sum(axis=-1, keepdims=True))
        out._backprop = _bp
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-slice normalization over the last axis, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out._prev:
        d = x.shape[-1]
        lead = tuple(range(x.ndim - 1))
        def _bp():
            g = out.grad
            if _tracked(gain):
                gain._accum((g * xhat).sum(axis=lead))
            if _tracked(bias):
                bias._accum(g.sum(axis=lead))
            if _tracked(x):
                gh = g * gain.data
                gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
                x._accum(gx)
        out._backprop = _bp
    return out


def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Left-padded 1-d convolution over the second-to-last axis.

    x is (..., t, c_in), kernel is (width, c_in, c_out); output position i
    sees only x[..., <= i, :], and the final tap multiplies x[..., i, :].
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    w = kernel.shape[0]
    t = x.shape[-2]
    pad_width = [(0, 0)] * x.ndim
    pad_width[-2] = (w - 1, 0)
    xp = np.pad(x.data, pad_width)
    out_data = np.zeros(x.shape[:-1] + (kernel.shape[2],), dtype=x.data.dtype)
    for j in range(w):
        out_data += np.matmul(xp[..., j:j + t, :], kernel.data[j])
    out = _result(out_data, (x, kernel), "causal_conv1d")
    if out._prev:
        def _bp():
            g = out.grad
            if _tracked(kernel):
                gk = np.zeros_like(kernel.data)
                for j in range(w):
                    seg = xp[..., j:j + t, :]
                    gk[j] = np.tensordot(seg.reshape(-1, seg.shape[-1]),
                                         g.reshape(-1, g.shape[-1]), axes=(0, 0))
                kernel._accum(gk)
            if _tracked(x):
                gp = np.zeros_like(xp)
                for j in range(w):
                    gp[..., j:j + t, :] += np.matmul(g, kernel.data[j].T)
                x._accum(gp[..., w - 1:, :])
        out._backprop = _bp
    return out


def _rotation(positions: np.ndarray, d: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    # Pairwise rotation angles for dims (0,1), (2,3), ... with base 10000.
    half = d // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, invert: bool = False) -> np.ndarray:
    if invert:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def causal_attention(q: Tensor, k: Tensor, v: Tensor,
                     extra_k: Tensor | None = None, extra_v: Tensor | None = None,
                     rotary: bool = False, q_start: int | None = None) -> Tensor:
    """Scaled dot-product attention under a causal mask.

    q is (..., t_q, d); k and v are (..., t_k, d) and share leading dims
    with q. Query row i sits at absolute position q_start + i (default:
    the last t_q key positions) and attends keys at positions <= its own,
    plus every slot of extra_k/extra_v (..., r, d), which are always
    visible. With rotary=True, q and k are rotated by their absolute
    positions and extra slots sit at offsets -r..-1 before position 0.

    Masked lanes underflow to exactly zero weight, so outputs are
    bit-insensitive to future positions.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[:-2] != k.shape[:-2] or k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    has_extra = extra_k is not None
    if has_extra != (extra_v is not None):
        raise ValueError("extra_k and extra_v must be given together")
    if has_extra:
        extra_k, extra_v = _as_tensor(extra_k), _as_tensor(extra_v)
        if extra_k.shape != extra_v.shape or extra_k.shape[:-2] != k.shape[:-2] \
                or extra_k.shape[-1] != k.shape[-1]:
            raise ValueError("extra key/value shapes must match k/v apart from slot count")

    t_q, d = q.shape[-2], q.shape[-1]
    t_k = k.shape[-2]
    r = extra_k.shape[-2] if has_extra else 0
    if q_start is None:
        q_start = t_k - t_q
    if rotary and d % 2 != 0:
        raise ValueError("rotary positions need an even head dim")

    global _ATTN_SCORE_OPS
    lead = 1
    for s in q.shape[:-2]:
        lead *= s
    _ATTN_SCORE_OPS += lead * t_q * (t_k + r)

    dtype = q.data.dtype
    if rotary:
        cos_q, sin_q = _rotation(q_start + np.arange(t_q), d, dtype)
        cos_k, sin_k = _rotation(np.arange(t_k), d, dtype)
        qr = _rotate(q.data, cos_q, sin_q)
        kr = _rotate(k.data, cos_k, sin_k)
        if has_extra:
            cos_e, sin_e = _rotation(np.arange(-r, 0), d, dtype)
            ekr = _rotate(extra_k.data, cos_e, sin_e)
    else:
        qr, kr = q.data, k.data
        if has_extra:
            ekr = extra_k.data

    scale = 1.0 / math.sqrt(d)
    scores = np.matmul(qr, np.swapaxes(kr, -1, -2)) * scale
    allowed = (q_start + np.arange(t_q))[:, None] >= np.arange(t_k)[None, :]
    scores = np.where(allowed, scores, -np.inf)
    if has_extra:
        scores = np.concatenate(
            [np.matmul(qr, np.swapaxes(ekr, -1, -2)) * scale, scores], axis=-1)

    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=-1, keepdims=True)

    out_data = np.matmul(weights[..., r:], v.data)
    if has_extra:
        out_data += np.matmul(weights[..., :r], extra_v.data)

    parents = (q, k, v) + ((extra_k, extra_v) if has_extra else ())
    out = _result(out_data, parents, "causal_attention")
    if out._prev:
        def _bp():
            g = out.grad
            gw_causal = np.matmul(g, np.swapaxes(v.data, -1, -2))
            if has_extra:
                gw = np.concatenate(
                    [np.matmul(g, np.swapaxes(extra_v.data, -1, -2)), gw_causal], axis=-1)
            else:
                gw = gw_causal
            gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
            gs_causal = gs[..., r:]
            gqr = np.matmul(gs_causal, kr) * scale
            if _tracked(k):
                gkr = np.matmul(np.swapaxes(gs_causal, -1, -2), qr) * scale
                k._accum(_rotate(gkr, cos_k, sin_k, invert=True) if rotary else gkr)
            if _tracked(v):
                v._accum(np.matmul(np.swapaxes(weights[..., r:], -1, -2), g))
            if has_extra:
                gs_extra = gs[..., :r]
                gqr += np.matmul(gs_extra, ekr) * scale
                if _tracked(extra_k):
                    gek = np.matmul(np.swapaxes(gs_extra, -1, -2), qr) * scale
                    extra_k._accum(_rotate(gek, cos_e, sin_e, invert=True) if rotary else gek)
                if _tracked(extra_v):
                    extra_v._accum(np.matmul(np.swapaxes(weights[..., :r], -1, -2), g))
            if _tracked(q):
                q._accum(_rotate(gqr, cos_q, sin_q, invert=True) if rotary else gqr)
        out._backprop = _bp
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout from an explicit RNG stream; rng=None disables."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * Tensor(keep)
