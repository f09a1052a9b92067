"""Dense linear-algebra, randomness and verification primitives.

Matrices are plain ``float64`` numpy arrays. Randomness goes through
:func:`make_rng`, which wraps numpy's Philox counter-based bit generator so a
given seed yields the same stream on every platform.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class InvalidDimensionError(ValueError):
    pass


class CapacityError(ValueError):
    """Raised when an embedding dimension cannot host the requested basis."""

    def __init__(self, message: str, required_d: int):
        super().__init__(message)
        self.required_d = required_d


class EmptySupportError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic stream for ``seed`` (Philox-4x64, counter based)."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def sample_unit_sphere(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. uniform unit vectors in R^d, as the columns of a d x n matrix."""
    if d < 1 or n < 1:
        raise InvalidDimensionError(f"need d >= 1 and n >= 1, got d={d}, n={n}")
    g = rng.standard_normal((d, n))
    norms = np.linalg.norm(g, axis=0)
    # a zero draw has probability 0, but guard anyway
    while np.any(norms == 0.0):
        bad = norms == 0.0
        g[:, bad] = rng.standard_normal((d, int(bad.sum())))
        norms = np.linalg.norm(g, axis=0)
    return g / norms


def orthonormal_basis(d: int, n: int) -> np.ndarray:
    """First ``n`` standard basis vectors of R^d."""
    if d < 1 or n < 1:
        raise InvalidDimensionError(f"need d >= 1 and n >= 1, got d={d}, n={n}")
    if n > d:
        raise CapacityError(f"{n} orthonormal vectors need d >= {n}, got d={d}", required_d=n)
    return np.eye(d, n)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def softmax_masked(scores, mask=None, axis: int = 0) -> np.ndarray:
    """Softmax along ``axis`` where ``mask`` False entries get probability exactly 0.

    Denied entries are set to -inf before normalisation. Every slice along
    ``axis`` must keep at least one allowed entry.
    """
    s = np.asarray(scores, dtype=np.float64)
    if mask is None:
        mask = np.ones(s.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    if not np.all(mask.any(axis=axis)):
        raise EmptySupportError("softmax over a slice with every position masked")
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def finite_diff_grad(
    loss: Callable[[np.ndarray], float], at: np.ndarray, step: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(at, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        up = float(loss(x))
        x[idx] = old - step
        down = float(loss(x))
        x[idx] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing entry {idx}")
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, eps: float = 1e-300) -> float:
    """max |a - b| / max(max |a|, max |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), eps)
    return float(np.abs(a - b).max(initial=0.0)) / scale
