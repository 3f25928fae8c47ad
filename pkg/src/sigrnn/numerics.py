"""Dense float64 linear algebra, RNG, and weight initialization.

Everything in the package runs on row-major (feature-fastest) float64
numpy arrays. Rank-3 blocks are laid out (batch, time, feature). The
helpers here are the only place shapes get validated, so every caller
can assume agreement after a call returns.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

FLOAT = np.float64


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    out = np.asarray(a, dtype=FLOAT)
    if out.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D array, got shape {out.shape}")
    return out


def as_tensor3(a, name: str = "tensor") -> np.ndarray:
    """Coerce to a (batch, time, feature) float64 array."""
    out = np.asarray(a, dtype=FLOAT)
    if out.ndim != 3:
        raise ShapeError(f"{name}: expected a (B, T, F) array, got shape {out.shape}")
    return out


def as_vector(a, name: str = "vector") -> np.ndarray:
    out = np.asarray(a, dtype=FLOAT)
    if out.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D array, got shape {out.shape}")
    return out


def batched_linear(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Contract a (B, T, I) block with an (I, J) kernel into (B, T, J).

    Y[b, t, j] = sum_i X[b, t, i] * K[i, j], batch and time preserved.
    """
    x = as_tensor3(x, "batched_linear input")
    kernel = as_matrix(kernel, "batched_linear kernel")
    if x.shape[2] != kernel.shape[0]:
        raise ShapeError(
            f"batched_linear: input features {x.shape} do not match "
            f"kernel rows {kernel.shape}"
        )
    return np.einsum("bti,ij->btj", x, kernel)


def matvec_affine(w: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b for W of shape (H, D), x of shape (D,), b of shape (H,)."""
    w = as_matrix(w, "matvec_affine weight")
    x = as_vector(x, "matvec_affine input")
    b = as_vector(b, "matvec_affine bias")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeError(
            f"matvec_affine: weight {w.shape} incompatible with "
            f"input {x.shape} and bias {b.shape}"
        )
    return w @ x + b


class RngStream:
    """Deterministic random stream (PCG64) keyed by a 64-bit seed.

    Identical seeds give bit-identical sequences on every platform for a
    fixed numpy version; all randomness in the package flows through one
    of these so runs are reproducible end to end.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(FLOAT)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(FLOAT)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def child(self, tag: int) -> "RngStream":
        """Derive an independent stream; used to keep init and shuffling separate."""
        return RngStream((self.seed * 0x9E3779B97F4A7C15 + tag) % (2**63))


def glorot_uniform(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """Uniform on [-L, L] with L = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"glorot_uniform: dimensions must be >= 1, got ({rows}, {cols})")
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, (rows, cols))


def orthogonal(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """Orthogonal init via QR of a Gaussian draw, sign-fixed to be unique."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"orthogonal: dimensions must be >= 1, got ({rows}, {cols})")
    a = rng.normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols], dtype=FLOAT)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically safe logistic function."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
