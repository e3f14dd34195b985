"""Deterministic numeric kernels: seeded RNG, activations, finite differences.

Everything computes in float64.  The RNG is a counter-based splitmix64
generator implemented with plain integer arithmetic so that streams are
bit-identical across platforms and interpreter builds; it must never be
shared between concurrent tasks.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class SeededRng:
    """splitmix64 counter RNG with uniform, gaussian and shuffle helpers.

    Identical seed plus identical call sequence yields identical outputs
    on every platform.  Gaussians come from the Box-Muller transform, two
    uniform draws per sample, no cached spare.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def uniform(self) -> float:
        """Uniform draw in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * _INV_2_53

    def gaussian(self) -> float:
        """Standard normal draw via Box-Muller."""
        u1 = 1.0 - self.uniform()  # (0, 1]: keeps log() finite
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def uniform_array(self, shape) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(out.size):
            out[i] = self.uniform()
        return out.reshape(shape)

    def gaussian_array(self, shape) -> np.ndarray:
        """Row-major array of standard normals; draw order is index order."""
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(out.size):
            out[i] = self.gaussian()
        return out.reshape(shape)

    def derive(self, tag: str | int) -> "SeededRng":
        """Independent substream keyed by ``tag``; the parent is untouched."""
        if isinstance(tag, int):
            salt = tag & _MASK64
        else:
            salt = _fnv1a64(tag.encode("utf-8"))
        return SeededRng(_mix64(self._state ^ _mix64(salt)))

    def snapshot(self) -> "SeededRng":
        """New generator that will replay this one's upcoming stream."""
        return SeededRng(self._state)


def as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product with explicit dimension checking."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec shapes do not agree: {m.shape} x {v.shape}")
    return m @ v


def softmax(v) -> np.ndarray:
    """Normalized exponentials, computed with max-subtraction.

    The denominator sums in ascending value order, so the result is
    bit-identical under any permutation of the logits.
    """
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax input contains non-finite entries")
    shifted = np.exp(v - v.max())
    return shifted / np.sort(shifted).sum()


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax; same arithmetic as :func:`softmax` per row."""
    shifted = np.exp(m - m.max(axis=1, keepdims=True))
    return shifted / np.sort(shifted, axis=1).sum(axis=1, keepdims=True)


def softplus(x):
    """ln(1 + e^x), stable for large |x|.  Accepts scalars or arrays.

    Written as max(x, 0) + log1p(e^-|x|) so that
    softplus(x) - softplus(-x) == x holds exactly in floating point.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    """Logistic function, the derivative of softplus."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x):
    """x * Phi(x) in the tanh approximation.  Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))
    return float(out) if out.ndim == 0 else out


def gelu_prime(x):
    """Derivative of :func:`gelu`."""
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return float(out) if out.ndim == 0 else out


def gaussian(rng: SeededRng) -> float:
    """Single standard-normal draw from ``rng``."""
    return rng.gaussian()


def finite_difference_gradient(f, p, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    p = as_vector(p).copy()
    if h <= 0:
        raise ValueError("step size must be positive")
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        f_plus = f(p)
        p[i] = orig - h
        f_minus = f(p)
        p[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"function value is non-finite near coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
