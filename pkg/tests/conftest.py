"""Shared oracles: central finite differences and independent reference
implementations kept deliberately separate from the library code paths."""

from __future__ import annotations

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom))


def ref_rotate(vec: np.ndarray, pos: float, base: float = 10000.0) -> np.ndarray:
    """Rotary rotation of one vector via complex multiplication (independent
    of the library's sin/cos formulation)."""
    d = vec.shape[-1]
    half = d // 2
    freqs = base ** (-np.arange(half) * 2.0 / d)
    z = vec[0::2] + 1j * vec[1::2]
    z = z * np.exp(1j * pos * freqs)
    out = np.empty_like(vec)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def ref_attention(q, k, v, extra_k=None, extra_v=None, rotary=False, q_start=None):
    """Dense masked-softmax attention, one query at a time, by explicit loops."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    t_q, d = q.shape[-2], q.shape[-1]
    t_k = k.shape[-2]
    r = 0 if extra_k is None else extra_k.shape[-2]
    if q_start is None:
        q_start = t_k - t_q
    out = np.zeros(q.shape[:-1] + (v.shape[-1],))
    for lead in np.ndindex(q.shape[:-2]):
        for i in range(t_q):
            qi = q[lead + (i,)]
            if rotary:
                qi = ref_rotate(qi, q_start + i)
            keys, vals = [], []
            for e in range(r):
                ke = extra_k[lead + (e,)]
                if rotary:
                    ke = ref_rotate(ke, e - r)
                keys.append(ke)
                vals.append(extra_v[lead + (e,)])
            for j in range(t_k):
                if j > q_start + i:
                    continue
                kj = k[lead + (j,)]
                if rotary:
                    kj = ref_rotate(kj, j)
                keys.append(kj)
                vals.append(v[lead + (j,)])
            scores = np.array([float(qi @ kj) for kj in keys]) / np.sqrt(d)
            w = np.exp(scores - scores.max())
            w = w / w.sum()
            out[lead + (i,)] = sum(wi * vi for wi, vi in zip(w, vals))
    return out


def prepare_generic_point(model, ids, make_params, min_kink_dist=1e-3, max_tries=50):
    """Re-draw jittered parameters until no ReLU pre-activation lies near its
    kink, where central differences would disagree with the true gradient.

    make_params(try_index) must install fresh parameters on the model.
    """
    from megabyte.tensor import Tensor

    for attempt in range(max_tries):
        make_params(attempt)
        dists = []
        orig_relu = Tensor.relu

        def spying(self):
            dists.append(float(np.abs(self.data).min()))
            return orig_relu(self)

        Tensor.relu = spying
        try:
            model.forward(np.asarray(ids))
        finally:
            Tensor.relu = orig_relu
        if not dists or min(dists) > min_kink_dist:
            return attempt
    raise AssertionError("could not find a kink-free parameter point")


def ref_causal_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct loop convolution: out[i] sums kernel taps against x[<= i]."""
    w, c_in, c_out = kernel.shape
    t = x.shape[0]
    out = np.zeros((t, c_out))
    for i in range(t):
        for j in range(w):
            src = i - (w - 1) + j
            if src < 0:
                continue
            for a in range(c_in):
                for b in range(c_out):
                    out[i, b] += x[src, a] * kernel[j, a, b]
    return out
