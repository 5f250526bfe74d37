"""Dense float64 matrix arithmetic with paired adjoint operations.

Matrices are 2-D C-contiguous ``numpy.ndarray`` of float64 (row-major);
vectors are 1-D float64 arrays.  Every public operation validates shapes
and leaves only finite values behind.  Each differentiable operation has
an adjoint partner (``*_backward``) used by the hand-written backward
passes of the model modules; a central finite-difference checker serves
as the independent gradient oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, NumericError

EPS_NORM = 1e-12


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a float64 matrix, optionally checking its shape."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {m.shape[1]}")
    return m


def as_vector(data, size: int | None = None) -> np.ndarray:
    """Coerce to a float64 vector, optionally checking its length."""
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got ndim={v.ndim}")
    if size is not None and v.shape[0] != size:
        raise DimensionError(f"expected length {size}, got {v.shape[0]}")
    return v


def check_finite(a: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"{what} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with shape validation."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def matmul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Adjoint of ``matmul``: returns (dA, dB) = (dC @ B.T, A.T @ dC)."""
    return d_out @ b.T, a.T @ d_out


def l2_normalize(v: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """Return v / max(||v||, eps); a (near-)zero vector stays (near-)zero."""
    if eps < 0:
        raise NumericError("eps must be >= 0")
    n = float(np.linalg.norm(v))
    return check_finite(v / max(n, eps), "l2_normalize")


def l2_normalize_backward(d_out: np.ndarray, v: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """Adjoint of ``l2_normalize`` at input v."""
    n = float(np.linalg.norm(v))
    if n <= eps:
        return d_out / eps if eps > 0 else np.zeros_like(d_out)
    u = v / n
    return (d_out - u * float(u @ d_out)) / n


def l2_normalize_rows(m: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """Row-wise l2_normalize; each row is bit-identical to the vector form."""
    out = np.empty_like(m, dtype=np.float64)
    for i in range(m.shape[0]):
        out[i] = l2_normalize(m[i], eps)
    return out


def l2_normalize_rows_backward(d_out: np.ndarray, m: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    out = np.empty_like(m)
    for i in range(m.shape[0]):
        out[i] = l2_normalize_backward(d_out[i], m[i], eps)
    return out


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_backward(d_out, s):
    """Adjoint of ``sigmoid`` given its output s: d_out * s * (1 - s)."""
    return d_out * s * (1.0 - s)


def softmax(z: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-D logit vector."""
    z = as_vector(z)
    e = np.exp(z - z.max())
    return check_finite(e / e.sum(), "softmax")


@dataclass
class ParamTensor:
    """A learnable tensor with its gradient and Adam moment buffers.

    All four arrays share one shape.  Gradients accumulate across uses of
    a shared parameter; callers reset them with ``zero_grad``.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @classmethod
    def init_uniform(cls, name: str, shape: tuple, fan_in: int, rng: np.random.Generator) -> "ParamTensor":
        """Uniform init in +/- 1/sqrt(fan_in), drawn from the given generator."""
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return cls(name, rng.uniform(-bound, bound, size=shape))

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != param {self.name} shape {self.value.shape}")
        self.grad += g


def finite_diff_grad(
    loss_fn: Callable[[], float],
    params: Iterable[ParamTensor],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate (L(t+h)-L(t-h))/(2h) per scalar.

    ``loss_fn`` must be deterministic and must read the parameter values in
    place.  Parameters are restored exactly after probing.
    """
    if h <= 0:
        raise NumericError("finite-difference step h must be > 0")
    grads: dict[str, np.ndarray] = {}
    seen = set()
    for p in params:
        if id(p) in seen:
            continue
        seen.add(id(p))
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lo_hi = loss_fn()
            flat[k] = orig - h
            lo_lo = loss_fn()
            flat[k] = orig
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise NumericError(f"non-finite loss while probing {p.name}[{k}]")
            gflat[k] = (lo_hi - lo_lo) / (2.0 * h)
        grads[p.name] = g
    return grads


def group_relative_error(analytic: np.ndarray, estimate: np.ndarray) -> float:
    """Max absolute difference scaled by the larger of the two gradient scales."""
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(estimate).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - estimate).max(initial=0.0)) / scale
