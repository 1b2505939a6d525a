"""Dense third-order tensor algebra.

Tensors are plain ``numpy`` arrays stored slice-major: a tensor with ``I`` rows,
``J`` columns and ``T`` slots has array shape ``(T, I, J)`` so that frontal
slice ``t`` is the contiguous matrix ``X[t]``.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

IDENTITY = "identity"
DFT = "dft"
TRANSFORM_KINDS = (IDENTITY, DFT)

# tolerance on the imaginary part left over after an inverse transform
IMAG_TOL = 1e-9


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


def as_tensor3(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be third-order (T, I, J), got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return x


@dataclass(frozen=True)
class Transform:
    """An invertible ``T x T`` mixing matrix along the slot mode.

    ``matrix`` acts on tubes: ``(X x_3 M)[t] = sum_s M[t, s] X[s]``.
    """

    kind: str
    size: int
    matrix: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def identity(cls, size: int) -> "Transform":
        eye = np.eye(size)
        return cls(IDENTITY, size, eye, eye)

    @classmethod
    def dft(cls, size: int) -> "Transform":
        k = np.arange(size)
        m = np.exp(-2j * np.pi * np.outer(k, k) / size)
        return cls(DFT, size, m, np.conj(m) / size)

    @classmethod
    def make(cls, kind: str, size: int) -> "Transform":
        if size < 1:
            raise ValueError("transform size must be >= 1")
        if kind == IDENTITY:
            return cls.identity(size)
        if kind == DFT:
            return cls.dft(size)
        raise ValueError(f"unknown transform kind {kind!r}; expected one of {TRANSFORM_KINDS}")

    @property
    def is_identity(self) -> bool:
        return self.kind == IDENTITY


def _drop_imag(x: np.ndarray, what: str) -> np.ndarray:
    if not np.iscomplexobj(x):
        return x
    scale = max(1.0, float(np.max(np.abs(x.real), initial=0.0)))
    residue = float(np.max(np.abs(x.imag), initial=0.0))
    if residue > IMAG_TOL * scale:
        raise FloatingPointError(f"{what}: imaginary residue {residue:.3e} exceeds tolerance")
    return np.ascontiguousarray(x.real)


def mode3_product(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Multiply every tube ``x[:, i, j]`` by the matrix ``m``.

    Complex results whose imaginary part is numerical noise are returned real;
    a genuinely complex result (e.g. a forward DFT) is returned as is.
    """
    x = as_tensor3(x)
    m = np.asarray(m)
    if m.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"mode-3 matrix {m.shape} does not match {x.shape[0]} slots")
    out = np.tensordot(m, x, axes=(1, 0))
    if np.iscomplexobj(out):
        scale = max(1.0, float(np.max(np.abs(out.real), initial=0.0)))
        if float(np.max(np.abs(out.imag), initial=0.0)) <= IMAG_TOL * scale:
            return np.ascontiguousarray(out.real)
    return out


def facewise_product(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Slice-by-slice matrix product: ``out[t] = x[t] @ y[t]``."""
    x = as_tensor3(x, "left operand")
    y = as_tensor3(y, "right operand")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"slot mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[2] != y.shape[1]:
        raise ShapeError(f"inner dimension mismatch: {x.shape} x {y.shape}")
    return np.matmul(x, y)


def t_product(x: np.ndarray, y: np.ndarray, tf: Transform) -> np.ndarray:
    """Transform both operands along the slots, multiply face-wise, transform back."""
    x = as_tensor3(x, "left operand")
    y = as_tensor3(y, "right operand")
    if tf.size != x.shape[0]:
        raise ShapeError(f"transform size {tf.size} does not match {x.shape[0]} slots")
    if tf.is_identity:
        return facewise_product(x, y)
    if tf.kind == DFT and not (np.iscomplexobj(x) or np.iscomplexobj(y)):
        # same composition with the transform applied by real FFTs
        t = tf.size
        prod = facewise_product(np.fft.rfft(x, axis=0), np.fft.rfft(y, axis=0))
        return np.fft.irfft(prod, n=t, axis=0)
    prod = facewise_product(mode3_product(x, tf.matrix), mode3_product(y, tf.matrix))
    return _drop_imag(np.tensordot(tf.inverse, prod, axes=(1, 0)), "t_product")


def t_product_backward(
    x: np.ndarray, y: np.ndarray, grad: np.ndarray, tf: Transform
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. ``x`` and ``y`` given ``grad = dL/d(x * y)``.

    With ``xh = x x_3 M`` and ``gh = grad x_3 M^-T`` the adjoints are
    ``dx = (gh . yh^T) x_3 M^T`` and ``dy = (xh^T . gh) x_3 M^T`` (plain
    transposes, no conjugation).
    """
    if tf.is_identity:
        return np.matmul(grad, y.transpose(0, 2, 1)), np.matmul(x.transpose(0, 2, 1), grad)
    if tf.kind == DFT:
        # for the DFT the adjoints are circular cross-correlations
        t = tf.size
        gf = np.fft.rfft(grad, axis=0)
        dx = np.fft.irfft(np.matmul(gf, np.conj(np.fft.rfft(y, axis=0)).transpose(0, 2, 1)), n=t, axis=0)
        dy = np.fft.irfft(np.matmul(np.conj(np.fft.rfft(x, axis=0)).transpose(0, 2, 1), gf), n=t, axis=0)
        return dx, dy
    m = tf.matrix
    xh = np.tensordot(m, x, axes=(1, 0))
    yh = np.tensordot(m, y, axes=(1, 0))
    gh = np.tensordot(tf.inverse.T, grad, axes=(1, 0))
    dx = np.tensordot(m.T, np.matmul(gh, yh.transpose(0, 2, 1)), axes=(1, 0))
    dy = np.tensordot(m.T, np.matmul(xh.transpose(0, 2, 1), gh), axes=(1, 0))
    return _drop_imag(dx, "t_product grad"), _drop_imag(dy, "t_product grad")


def slice_matrix_power(a: np.ndarray, k: int) -> np.ndarray:
    """Per-slice matrix power by repeated multiplication; ``k = 0`` gives identity slices."""
    a = as_tensor3(a)
    if a.shape[1] != a.shape[2]:
        raise ShapeError(f"slices must be square, got {a.shape[1:]}")
    if k < 0:
        raise ValueError("negative matrix powers are not supported")
    out = np.broadcast_to(np.eye(a.shape[1], dtype=a.dtype), a.shape).copy()
    for _ in range(k):
        out = np.matmul(out, a)
    return out


def slice_powers(a: np.ndarray, k_max: int) -> list[np.ndarray]:
    """``[a^1, ..., a^k_max]`` per slice, sharing the intermediate products."""
    a = as_tensor3(a)
    powers = [a]
    for _ in range(k_max - 1):
        powers.append(np.matmul(powers[-1], a))
    return powers


def elementwise(x: np.ndarray, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    out = np.asarray(f(x))
    if out.shape != np.shape(x):
        raise ShapeError(f"map changed shape {np.shape(x)} -> {out.shape}")
    return out


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if np.shape(x) != np.shape(y):
        raise ShapeError(f"cannot add shapes {np.shape(x)} and {np.shape(y)}")
    return np.add(x, y)


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return np.multiply(x, c)


def concat_cols(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Concatenate along the column dimension: ``(T, N, F) ++ (T, N, G) -> (T, N, F+G)``."""
    x = as_tensor3(x)
    y = as_tensor3(y)
    if x.shape[:2] != y.shape[:2]:
        raise ShapeError(f"cannot concatenate {x.shape} with {y.shape}")
    return np.concatenate([x, y], axis=2)


def sigmoid(x):
    return expit(x)


def diagonal(x: np.ndarray) -> np.ndarray:
    """Main diagonals of the square slices, as a ``(T, N)`` array."""
    return np.diagonal(as_tensor3(x), axis1=1, axis2=2).copy()
