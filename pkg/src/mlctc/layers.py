"""Sequence layers: per-frame dense maps, masked LSTMs run in either
direction, bidirectional merging, multiplicative modulation, and inverted
dropout. All activations travel as SeqBatch (frames x batch x dim plus true
lengths); frames at or beyond a sequence's length hold zeros and never
receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import Param, ShapeError, ensure_finite

MERGE_MODES = ("pairwise_max", "pairwise_sum", "concat")
GATES = ("i", "f", "o", "g")


@dataclass
class SeqBatch:
    """A batch of variable-length frame sequences, zero-padded to (T, B, D)."""

    data: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.data.ndim != 3:
            raise ShapeError(f"SeqBatch data must be (T,B,D), got {self.data.shape}")
        if self.lengths.shape != (self.data.shape[1],):
            raise ShapeError(
                f"lengths shape {self.lengths.shape} does not match batch {self.data.shape[1]}"
            )
        if np.any(self.lengths < 0) or np.any(self.lengths > self.data.shape[0]):
            raise ShapeError(
                f"lengths must lie in [0, T={self.data.shape[0]}], got {self.lengths}"
            )

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def batch(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]

    def mask(self, dtype=None):
        """(T, B, 1) with 1.0 on valid frames."""
        t = np.arange(self.frames)[:, None]
        m = (t < self.lengths[None, :]).astype(dtype or self.data.dtype)
        return m[:, :, None]

    def with_data(self, data):
        return SeqBatch(data, self.lengths)


def uniform_init(rng, name, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(name, -bound, bound, shape, dtype)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

class Dense:
    """Per-frame affine map on the trailing axis."""

    def __init__(self, name, d_in, d_out, rng, dtype=np.float64, zero_init=False):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = uniform_init(rng, f"{name}.w", d_in, (d_in, d_out), dtype)
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: input dim {x.shape[-1]} != {self.d_in}")
        out = x @ self.w.value + self.b.value
        ensure_finite(out, f"{self.name} output")
        return out, x

    def backward(self, dout, cache):
        x = cache
        flat_x = x.reshape(-1, self.d_in)
        flat_d = dout.reshape(-1, self.d_out)
        self.w.grad += flat_x.T @ flat_d
        self.b.grad += flat_d.sum(axis=0)
        return dout @ self.w.value.T


# ---------------------------------------------------------------------------
# lstm
# ---------------------------------------------------------------------------

def _lstm_loop_forward(xw, u, mask, reverse=False):
    """Masked LSTM recurrence from zero states.

    xw: (T,B,4H) input projections with bias added, gate order i,f,o,g.
    mask: (T,B,1). Returns h, c, gates (post-nonlinearity), tanh(c).
    Masked frames produce h = c = 0 exactly, so a reversed scan starts
    fresh at each sequence's own last valid frame and outputs stay aligned
    to the original frame indices.
    """
    T, B, H4 = xw.shape
    H = H4 // 4
    dt = xw.dtype
    gates = np.empty((T, B, H4), dtype=dt)
    c = np.empty((T, B, H), dtype=dt)
    h = np.empty((T, B, H), dtype=dt)
    tanh_c = np.empty((T, B, H), dtype=dt)
    hprev = np.zeros((B, H), dtype=dt)
    cprev = np.zeros((B, H), dtype=dt)
    pre = np.empty((B, H4), dtype=dt)
    order = range(T - 1, -1, -1) if reverse else range(T)
    with np.errstate(over="ignore"):
        for t in order:
            np.dot(hprev, u, out=pre)
            pre += xw[t]
            g = gates[t]
            np.multiply(pre[:, : 3 * H], -1.0, out=g[:, : 3 * H])
            np.exp(g[:, : 3 * H], out=g[:, : 3 * H])
            g[:, : 3 * H] += 1.0
            np.reciprocal(g[:, : 3 * H], out=g[:, : 3 * H])
            np.tanh(pre[:, 3 * H :], out=g[:, 3 * H :])
            ct = c[t]
            np.multiply(g[:, H : 2 * H], cprev, out=ct)
            ct += g[:, :H] * g[:, 3 * H :]
            ct *= mask[t]
            np.tanh(ct, out=tanh_c[t])
            np.multiply(g[:, 2 * H : 3 * H], tanh_c[t], out=h[t])
            hprev = h[t]
            cprev = ct
    return h, c, gates, tanh_c


def _lstm_loop_backward(dh_out, gates, c, tanh_c, u, mask, reverse=False):
    """Cotangent sweep of the recurrence (opposite time order); returns d(xw)."""
    T, B, H4 = gates.shape
    H = H4 // 4
    dxw = np.empty_like(gates)
    dhn = np.zeros((B, H), dtype=gates.dtype)
    dcn = np.zeros((B, H), dtype=gates.dtype)
    ut = np.ascontiguousarray(u.T)
    order = range(T) if reverse else range(T - 1, -1, -1)
    first = T - 1 if reverse else 0
    step = 1 if reverse else -1
    for t in order:
        g = gates[t]
        i, f = g[:, :H], g[:, H : 2 * H]
        o, gg = g[:, 2 * H : 3 * H], g[:, 3 * H :]
        tc = tanh_c[t]
        dh = dh_out[t] + dhn
        do = dh * tc
        dci = dh * o
        dci *= 1.0 - tc * tc
        dci += dcn
        dci *= mask[t]
        d = dxw[t]
        np.multiply(dci * gg, i * (1.0 - i), out=d[:, :H])
        if t != first:
            np.multiply(dci * c[t + step], f * (1.0 - f), out=d[:, H : 2 * H])
        else:
            d[:, H : 2 * H] = 0.0  # initial cell state is zero
        np.multiply(do, o * (1.0 - o), out=d[:, 2 * H : 3 * H])
        np.multiply(dci * i, 1.0 - gg * gg, out=d[:, 3 * H :])
        dhn = np.dot(d, ut)
        dcn = dci * f
    return dxw


class LstmDirection:
    """One direction of an LSTM layer with per-gate weight tensors.

    The backward direction runs the same masked recurrence in reversed time
    order; zeroed states at padding mean each sequence's reverse scan starts
    fresh at its own last frame, and outputs stay aligned to the original
    frame indices.
    """

    def __init__(self, name, d_in, hidden, rng, dtype=np.float64, reverse=False):
        self.name = name
        self.d_in = d_in
        self.hidden = hidden
        self.reverse = reverse
        self.w = {}
        self.u = {}
        self.b = {}
        for gate in GATES:
            self.w[gate] = Param(
                f"{name}.w_{gate}",
                uniform_init(rng, f"{name}.w_{gate}", d_in, (d_in, hidden), dtype),
            )
            self.u[gate] = Param(
                f"{name}.u_{gate}",
                uniform_init(rng, f"{name}.u_{gate}", hidden, (hidden, hidden), dtype),
            )
            bias = np.full(hidden, 1.0 if gate == "f" else 0.0, dtype=dtype)
            self.b[gate] = Param(f"{name}.b_{gate}", bias)

    def params(self):
        return [self.w[g] for g in GATES] + [self.u[g] for g in GATES] + [self.b[g] for g in GATES]

    def _fused(self):
        w = np.concatenate([self.w[g].value for g in GATES], axis=1)
        u = np.concatenate([self.u[g].value for g in GATES], axis=1)
        b = np.concatenate([self.b[g].value for g in GATES])
        return w, u, b

    def forward(self, x, lengths):
        T, B, D = x.shape
        if D != self.d_in:
            raise ShapeError(f"{self.name}: input dim {D} != {self.d_in}")
        if np.any(lengths > T):
            raise ShapeError(f"{self.name}: lengths exceed frame count {T}")
        w, u, b = self._fused()
        xw = x.reshape(T * B, D) @ w
        xw += b
        xw = xw.reshape(T, B, 4 * self.hidden)
        t_idx = np.arange(T)[:, None]
        mask = (t_idx < lengths[None, :]).astype(x.dtype)[:, :, None]
        h, c, gates, tanh_c = _lstm_loop_forward(xw, u, mask, self.reverse)
        ensure_finite(h, f"{self.name} output")
        return h, (x, h, c, gates, tanh_c, mask)

    def backward(self, dout, cache):
        x, h, c, gates, tanh_c, mask = cache
        _, u, _ = self._fused()
        dxw = _lstm_loop_backward(dout, gates, c, tanh_c, u, mask, self.reverse)
        T, B, _ = x.shape
        flat_x = x.reshape(T * B, self.d_in)
        flat_d = dxw.reshape(T * B, 4 * self.hidden)
        zeros = np.zeros((1, B, self.hidden), dtype=h.dtype)
        if self.reverse:
            hprev = np.concatenate([h[1:], zeros], axis=0)  # state feeding t is h[t+1]
        else:
            hprev = np.concatenate([zeros, h[:-1]], axis=0)
        dw = flat_x.T @ flat_d
        du = hprev.reshape(T * B, self.hidden).T @ flat_d
        db = flat_d.sum(axis=0)
        H = self.hidden
        for k, gate in enumerate(GATES):
            self.w[gate].grad += dw[:, k * H : (k + 1) * H]
            self.u[gate].grad += du[:, k * H : (k + 1) * H]
            self.b[gate].grad += db[k * H : (k + 1) * H]
        w = np.concatenate([self.w[g].value for g in GATES], axis=1)
        dx = (flat_d @ w.T).reshape(T, B, self.d_in)
        return dx


# ---------------------------------------------------------------------------
# direction merging
# ---------------------------------------------------------------------------

def merge_directions(fwd_out, bwd_out, mode):
    """Combine forward/backward outputs cell-by-cell (index i with index i).

    pairwise modes keep width H; concat doubles it.
    """
    if mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {mode!r}")
    if fwd_out.shape != bwd_out.shape:
        raise ShapeError(f"merge shapes {fwd_out.shape} vs {bwd_out.shape}")
    if mode == "pairwise_max":
        return np.maximum(fwd_out, bwd_out)
    if mode == "pairwise_sum":
        return fwd_out + bwd_out
    return np.concatenate([fwd_out, bwd_out], axis=-1)


def merge_directions_backward(dout, fwd_out, bwd_out, mode):
    if mode == "pairwise_max":
        first = fwd_out >= bwd_out  # ties route to the forward direction
        return dout * first, dout * (~first)
    if mode == "pairwise_sum":
        return dout, dout
    h = fwd_out.shape[-1]
    return dout[..., :h], dout[..., h:]


class BiLstm:
    """Bidirectional LSTM layer with a configurable direction merge."""

    def __init__(self, name, d_in, hidden, merge, rng, dtype=np.float64):
        if merge not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {merge!r}")
        self.name = name
        self.d_in = d_in
        self.hidden = hidden
        self.merge = merge
        self.fwd = LstmDirection(f"{name}.fwd", d_in, hidden, rng, dtype, reverse=False)
        self.bwd = LstmDirection(f"{name}.bwd", d_in, hidden, rng, dtype, reverse=True)

    @property
    def d_out(self):
        return 2 * self.hidden if self.merge == "concat" else self.hidden

    def params(self):
        return self.fwd.params() + self.bwd.params()

    def forward(self, sb: SeqBatch):
        hf, cache_f = self.fwd.forward(sb.data, sb.lengths)
        hb, cache_b = self.bwd.forward(sb.data, sb.lengths)
        out = merge_directions(hf, hb, self.merge)
        return sb.with_data(out), (hf, hb, cache_f, cache_b)

    def backward(self, dout, cache):
        hf, hb, cache_f, cache_b = cache
        df, db = merge_directions_backward(dout, hf, hb, self.merge)
        dx = self.fwd.backward(df, cache_f)
        dx += self.bwd.backward(db, cache_b)
        return dx


# ---------------------------------------------------------------------------
# modulation and dropout
# ---------------------------------------------------------------------------

def modulate(acts: SeqBatch, codes: SeqBatch):
    """Gate activations by per-frame coefficients (elementwise product).

    Gradients flow to both operands, so a coefficient producer trained
    jointly with the gated network receives its share of the error signal.
    """
    if acts.data.shape != codes.data.shape:
        raise ShapeError(f"modulate shapes {acts.data.shape} vs {codes.data.shape}")
    if not np.array_equal(acts.lengths, codes.lengths):
        raise ShapeError("modulate length vectors differ")
    return acts.with_data(acts.data * codes.data)


def modulate_backward(dout, acts: SeqBatch, codes: SeqBatch):
    return dout * codes.data, dout * acts.data


def dropout(x, rate, gen, training):
    """Inverted dropout: zero with prob ``rate``, scale survivors by 1/(1-rate).

    Evaluation mode is the identity. ``gen`` is a numpy Generator consumed
    only in training mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = (gen.random(x.shape) >= rate).astype(x.dtype)
    keep /= 1.0 - rate
    return x * keep, keep


def dropout_backward(dout, keep):
    if keep is None:
        return dout
    return dout * keep
