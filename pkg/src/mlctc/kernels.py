"""Numerical primitives underneath every network in the package.

Plain numpy arrays are the tensor type. Each differentiable operation has a
hand-derived reverse-mode companion (``*_backward``) that maps output
cotangents to input cotangents, and ``grad_check`` verifies any scalar loss
against central finite differences. Everything here is deterministic given a
seed: random draws come from named Philox substreams so that adding a
parameter never shifts the draws of another.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(name):
    if name not in DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(DTYPES)}")
    return DTYPES[name]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf where finite values are required."""


class GradCheckError(AssertionError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""


def ensure_finite(x, what="tensor"):
    """Raise NonFiniteError unless every entry of x is finite."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
    return x


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    """c[i,j] = sum_k a[i,k] b[k,j]; raises ShapeError on inner mismatch."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(dc, a, b):
    """Cotangents of matmul: dA = dC B^T, dB = A^T dC."""
    return dc @ b.T, a.T @ dc


def sigmoid(x):
    """Numerically saturating logistic; exact 0/1 at extreme inputs is fine."""
    x = np.asarray(x)
    out = np.empty(x.shape, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {
    "tanh": (np.tanh, lambda y, x: 1.0 - y * y),
    "sigmoid": (sigmoid, lambda y, x: y * (1.0 - y)),
}


def elementwise(op, *inputs):
    """Pointwise op in {add, mul, tanh, sigmoid, max}.

    Binary ops require both operands to share one shape. ``max`` ties route
    to the first operand in the backward pass.
    """
    if op in _UNARY:
        (x,) = inputs
        out = _UNARY[op][0](np.asarray(x))
    elif op in ("add", "mul", "max"):
        a, b = (np.asarray(v) for v in inputs)
        if a.shape != b.shape:
            raise ShapeError(f"elementwise {op} shapes {a.shape} vs {b.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = {"add": np.add, "mul": np.multiply, "max": np.maximum}[op](a, b)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ensure_finite(out, f"elementwise {op} output")


def elementwise_backward(op, dout, *inputs):
    """Cotangents of elementwise; returns one gradient per input."""
    if op in _UNARY:
        (x,) = inputs
        fn, dfn = _UNARY[op]
        y = fn(np.asarray(x))
        return (dout * dfn(y, x),)
    a, b = (np.asarray(v) for v in inputs)
    if op == "add":
        return dout, dout
    if op == "mul":
        return dout * b, dout * a
    if op == "max":
        first = a >= b  # ties go to the first operand
        return dout * first, dout * (~first)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax_rows(x):
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    x = ensure_finite(np.asarray(x), "softmax input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x):
    """Row-wise log softmax; rows log-sum-exp to 0."""
    x = ensure_finite(np.asarray(x), "log_softmax input")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(dout, logp):
    """d(loss)/d(logits) given d(loss)/d(log_softmax(logits))."""
    return dout - np.exp(logp) * dout.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class Param:
    """A named weight tensor paired with its accumulated cotangent."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

class Rng:
    """Named, splittable Philox streams derived from one 64-bit seed.

    ``stream(name)`` always returns a generator positioned at the start of
    that name's substream, so draws for one parameter are independent of how
    many other parameters exist. Philox is counter-based and produces
    identical output across platforms.
    """

    def __init__(self, seed):
        self.seed = int(seed)

    def stream(self, name):
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64).copy()
        key[0] ^= np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, name, low, high, shape, dtype=np.float64):
        return self.stream(name).uniform(low, high, size=shape).astype(dtype)

    def derive(self, name):
        """A child Rng whose streams are disjoint from the parent's."""
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        child = int.from_bytes(digest[16:24], "little") ^ self.seed
        return Rng(child)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    n_coords: int
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"grad_check over {self.n_coords} coordinates: "
            f"max rel err {self.max_rel_err:.3e} at {self.worst_param}{list(self.worst_index)} "
            f"(analytic {self.analytic:.9g}, numeric {self.numeric:.9g})"
        )


def grad_check(loss_fn, params, eps=1e-5, tol=1e-4, max_coords_per_param=None, seed=0):
    """Compare analytic gradients against central finite differences.

    ``loss_fn(values)`` takes a dict of parameter arrays and returns
    ``(loss, grads)`` with one gradient array per parameter. Every coordinate
    (or a seeded subsample of ``max_coords_per_param`` per parameter) is
    perturbed by +-eps; the relative error |analytic - numeric| /
    max(1, |analytic|) must stay within ``tol``. Returns a report on success
    and raises GradCheckError naming the worst coordinate on failure.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_fn(values)
    pick = np.random.Generator(np.random.Philox(key=seed))

    n_checked = 0
    worst = (-1.0, "", (), 0.0, 0.0)
    for name in sorted(values):
        flat = values[name].reshape(-1)
        gflat = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            idx = np.sort(pick.choice(flat.size, size=max_coords_per_param, replace=False))
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up, _ = loss_fn(values)
            flat[i] = keep - eps
            dn, _ = loss_fn(values)
            flat[i] = keep
            numeric = (up - dn) / (2.0 * eps)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(1.0, abs(analytic))
            n_checked += 1
            if rel > worst[0]:
                shape = values[name].shape
                worst = (rel, name, np.unravel_index(i, shape) if shape else (), analytic, numeric)

    report = GradCheckReport(n_checked, worst[0], worst[1], worst[2], worst[3], worst[4])
    if report.max_rel_err > tol:
        raise GradCheckError(f"FAILED (tol {tol:g}): {report}")
    return report
