"""Streaming truncated path signatures over piecewise-linear paths.

A truncated signature of depth M over an N-dimensional path is stored as
one flat float64 vector of length sum_{k=1..M} N^k: level-major, and
within level k the multi-index (i1..ik) sits at the row-major offset
sum_j ij * N^(k-j) (0-based). The constant level-0 term is always 1 and
is not stored; downstream gate biases absorb it.

Paths are piecewise-linear interpolants of their samples, so prefix
signatures update exactly via the tensor exponential of each increment
(Chen's identity). `oracle_signature` recomputes signatures by direct
level-by-level quadrature on a subdivided grid and shares no code with
the streaming route; tests compare the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import FLOAT, as_matrix, as_tensor3, batched_linear

MAX_DEPTH = 4


def sig_dim(path_dim: int, depth: int) -> int:
    """Length of a flat truncated signature: sum_{k=1..depth} path_dim^k."""
    if path_dim < 1 or depth < 1:
        raise ConfigError(f"sig_dim: need path_dim >= 1 and depth >= 1, got ({path_dim}, {depth})")
    return sum(path_dim**k for k in range(1, depth + 1))


@dataclass(frozen=True)
class SigSpec:
    """Shape of a truncated signature: path dimension and truncation depth."""

    path_dim: int
    depth: int

    def __post_init__(self):
        if self.path_dim < 1:
            raise ConfigError(f"SigSpec: path_dim must be >= 1, got {self.path_dim}")
        if not 1 <= self.depth <= MAX_DEPTH:
            # cost guard: dimension grows as N^depth
            raise ConfigError(f"SigSpec: depth must be in [1, {MAX_DEPTH}], got {self.depth}")

    @property
    def dim(self) -> int:
        return sig_dim(self.path_dim, self.depth)

    def level_slice(self, k: int) -> slice:
        """Slice of the flat vector holding level k (1-based)."""
        if not 1 <= k <= self.depth:
            raise ConfigError(f"level {k} outside [1, {self.depth}]")
        start = sum(self.path_dim**j for j in range(1, k))
        return slice(start, start + self.path_dim**k)


@dataclass(frozen=True)
class SignatureVector:
    """One truncated signature in the flat level-major layout."""

    spec: SigSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=FLOAT)
        if v.shape != (self.spec.dim,):
            raise ShapeError(
                f"SignatureVector: values shape {v.shape} does not match "
                f"spec dim ({self.spec.dim},)"
            )
        object.__setattr__(self, "values", v)

    def level(self, k: int) -> np.ndarray:
        """Level k as a (N,)*k tensor view."""
        n = self.spec.path_dim
        return self.values[self.spec.level_slice(k)].reshape((n,) * k)


@dataclass(frozen=True)
class SignatureStream:
    """Per-timestep prefix signatures of one path; row t is sig over samples 1..t+1."""

    spec: SigSpec
    values: np.ndarray  # (T, sig_dim)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=FLOAT)
        if v.ndim != 2 or v.shape[1] != self.spec.dim:
            raise ShapeError(
                f"SignatureStream: values shape {v.shape} does not match "
                f"spec dim {self.spec.dim}"
            )
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    def step(self, t: int) -> SignatureVector:
        """Prefix signature at 0-based step t."""
        return SignatureVector(self.spec, self.values[t].copy())


@dataclass(frozen=True)
class ProjectionParams:
    """Learnable linear map (no bias) from raw inputs to the signature path space.

    kernel has shape (input_dim, path_dim); applying it is exactly
    batched_linear, i.e. x_t -> x_t @ kernel per timestep.
    """

    kernel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kernel", as_matrix(self.kernel, "projection kernel"))

    @property
    def input_dim(self) -> int:
        return self.kernel.shape[0]

    @property
    def path_dim(self) -> int:
        return self.kernel.shape[1]


def project_input(x: np.ndarray, params: ProjectionParams) -> np.ndarray:
    """Project (B, T, d) inputs into the signature path space, (B, T, p)."""
    return batched_linear(x, params.kernel)


# ---------------------------------------------------------------------------
# Batched flat-level kernels. Levels of a batch are (B, N^k) blocks of one
# (B, sig_dim) array; the cells engine works on these directly.
# ---------------------------------------------------------------------------


def _levels(flat: np.ndarray, spec: SigSpec) -> list[np.ndarray]:
    """Views of the per-level blocks of a (..., sig_dim) array."""
    return [flat[..., spec.level_slice(k)] for k in range(1, spec.depth + 1)]


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Flat outer product: (B, m) x (B, n) -> (B, m*n)."""
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


def _segment_exp_levels(delta: np.ndarray, spec: SigSpec) -> list[np.ndarray]:
    """Levels of the signature of one linear segment: delta^(x)k / k!."""
    levels = [delta]
    for k in range(2, spec.depth + 1):
        levels.append(_outer(levels[-1], delta) / k)
    return levels


def _chen_levels(a: list[np.ndarray], b: list[np.ndarray], spec: SigSpec) -> list[np.ndarray]:
    """Truncated tensor-algebra product of two level lists (level-0 terms are 1)."""
    out = []
    for k in range(1, spec.depth + 1):
        acc = a[k - 1] + b[k - 1]
        for i in range(1, k):
            acc = acc + _outer(a[i - 1], b[k - i - 1])
        out.append(acc)
    return out


def sig_stream_batch(path: np.ndarray, spec: SigSpec) -> np.ndarray:
    """Raw prefix-signature stream of a (B, T, N) batch, as (B, T, sig_dim).

    Step 0 is the empty-path signature (all zeros); step t extends step
    t-1 by the tensor exponential of the increment x_t - x_{t-1}. Cost
    per step is O(sig_dim * depth) on top of the batch axis.
    """
    path = as_tensor3(path, "signature path")
    batch, steps, n = path.shape
    if steps < 1:
        raise ShapeError("sig_stream_batch: need at least one timestep")
    if n != spec.path_dim:
        raise ShapeError(
            f"sig_stream_batch: path features {path.shape} do not match "
            f"spec path_dim {spec.path_dim}"
        )
    out = np.zeros((batch, steps, spec.dim), dtype=FLOAT)
    if steps == 1:
        return out
    prev = [np.zeros((batch, n**k), dtype=FLOAT) for k in range(1, spec.depth + 1)]
    for t in range(1, steps):
        seg = _segment_exp_levels(path[:, t] - path[:, t - 1], spec)
        prev = _chen_levels(prev, seg, spec)
        out[:, t] = np.concatenate(prev, axis=1)
    return out


def sig_stream_backward(
    path: np.ndarray, stream: np.ndarray, d_stream: np.ndarray, spec: SigSpec
) -> np.ndarray:
    """Backpropagate through sig_stream_batch.

    path: (B, T, N) forward input; stream: its raw forward output;
    d_stream: loss gradient w.r.t. every raw stream entry. Returns the
    loss gradient w.r.t. the path samples, (B, T, N).

    Walks the recursion in reverse: the Chen step is bilinear in the
    running prefix and the segment exponential, so each side backprops
    as a partial contraction of the upstream level gradients.
    """
    path = as_tensor3(path, "signature path")
    batch, steps, n = path.shape
    d_path = np.zeros_like(path)
    if steps == 1:
        return d_path
    d_levels = [np.ascontiguousarray(g) for g in _levels(d_stream[:, steps - 1], spec)]
    for t in range(steps - 1, 0, -1):
        delta = path[:, t] - path[:, t - 1]
        seg = _segment_exp_levels(delta, spec)
        prev = _levels(stream[:, t - 1], spec)
        # gradients w.r.t. the segment-exponential levels and the previous prefix
        d_seg = []
        d_prev = []
        for k in range(1, spec.depth + 1):
            g_seg = d_levels[k - 1].copy()
            g_prev = d_levels[k - 1].copy()
            for a in range(1, spec.depth - k + 1):
                up = d_levels[a + k - 1].reshape(batch, n**a, n**k)
                g_seg += np.einsum("xab,xa->xb", up, prev[a - 1])
            for b in range(1, spec.depth - k + 1):
                up = d_levels[k + b - 1].reshape(batch, n**k, n**b)
                g_prev += np.einsum("xab,xb->xa", up, seg[b - 1])
            d_seg.append(g_seg)
            d_prev.append(g_prev)
        # through the tensor exponential: seg_k = seg_{k-1} (x) delta / k
        d_delta = np.zeros_like(delta)
        for k in range(spec.depth, 0, -1):
            up = d_seg[k - 1].reshape(batch, n ** (k - 1), n)
            if k > 1:
                d_seg[k - 2] += np.einsum("xan,xn->xa", up, delta) / k
                d_delta += np.einsum("xan,xa->xn", up, seg[k - 2]) / k
            else:
                d_delta += up[:, 0, :]
        d_path[:, t] += d_delta
        d_path[:, t - 1] -= d_delta
        d_levels = [
            g + h for g, h in zip(d_prev, _levels(np.ascontiguousarray(d_stream[:, t - 1]), spec))
        ]
    # step 0 is the constant empty signature; its gradient stops here
    return d_path


def normalize_stream_values(values: np.ndarray) -> np.ndarray:
    """Divide step t (0-based) by the 1-based sample count t+1, elementwise."""
    steps = values.shape[-2]
    divisors = np.arange(1, steps + 1, dtype=FLOAT).reshape((steps, 1))
    return values / divisors


# ---------------------------------------------------------------------------
# Single-path operations (the public spec surface).
# ---------------------------------------------------------------------------


def segment_signature(delta: np.ndarray, spec: SigSpec) -> SignatureVector:
    """Signature of one linear segment with the given increment."""
    delta = np.asarray(delta, dtype=FLOAT)
    if delta.shape != (spec.path_dim,):
        raise ShapeError(
            f"segment_signature: increment shape {delta.shape} does not match "
            f"spec path_dim {spec.path_dim}"
        )
    levels = _segment_exp_levels(delta[None, :], spec)
    return SignatureVector(spec, np.concatenate(levels, axis=1)[0])


def chen_concat(a: SignatureVector, b: SignatureVector) -> SignatureVector:
    """Signature of the concatenated path, via the truncated tensor product."""
    if a.spec != b.spec:
        raise ShapeError(f"chen_concat: specs differ ({a.spec} vs {b.spec})")
    levels = _chen_levels(
        _levels(a.values[None, :], a.spec), _levels(b.values[None, :], a.spec), a.spec
    )
    return SignatureVector(a.spec, np.concatenate(levels, axis=1)[0])


def stream_signature(path: np.ndarray, spec: SigSpec):
    """Prefix-signature stream(s) of a sampled path.

    A (T, N) array yields one SignatureStream; a (B, T, N) batch yields a
    list of B streams. Step 0 is always the all-zero empty signature.
    """
    arr = np.asarray(path, dtype=FLOAT)
    if arr.ndim == 2:
        values = sig_stream_batch(arr[None, :, :], spec)
        return SignatureStream(spec, values[0])
    values = sig_stream_batch(arr, spec)
    return [SignatureStream(spec, values[b]) for b in range(values.shape[0])]


def time_normalize(stream: SignatureStream) -> SignatureStream:
    """Scale step t by 1/(t+1) so magnitudes stay comparable across lengths."""
    return SignatureStream(stream.spec, normalize_stream_values(stream.values))


def oracle_signature(
    samples: np.ndarray, spec: SigSpec, subdivisions: int = 1, rule: str = "simpson"
) -> SignatureVector:
    """Signature by direct level-by-level quadrature; the reference oracle.

    Each segment of the piecewise-linear interpolant is split into
    `subdivisions` pieces and the iterated integrals are accumulated on
    the resulting grid, one level at a time, with no tensor-algebra
    shortcuts.

    rule="simpson" integrates each piece with Simpson's rule, which is
    exact for the polynomial integrands a piecewise-linear path produces
    up to depth 4, so any subdivision count returns the true signature.
    rule="left" uses left-endpoint Riemann sums and converges at rate
    O(1/subdivisions); it exists to demonstrate convergence from first
    principles.
    """
    samples = np.asarray(samples, dtype=FLOAT)
    if samples.ndim != 2 or samples.shape[1] != spec.path_dim:
        raise ShapeError(
            f"oracle_signature: samples shape {samples.shape} does not match "
            f"spec path_dim {spec.path_dim}"
        )
    if subdivisions < 1:
        raise ConfigError(f"oracle_signature: subdivisions must be >= 1, got {subdivisions}")
    if rule not in ("simpson", "left"):
        raise ConfigError(f"oracle_signature: unknown rule {rule!r}")
    steps, n = samples.shape
    if steps < 2:
        return SignatureVector(spec, np.zeros(spec.dim, dtype=FLOAT))

    if rule == "left":
        grid = _refine(samples, subdivisions)
        inc = np.diff(grid, axis=0)  # (P, N)
        prev = np.cumsum(np.vstack([np.zeros((1, n)), inc]), axis=0)  # level 1, exact
        parts = [prev[-1].copy()]
        for _ in range(2, spec.depth + 1):
            contrib = prev[:-1, :, None] * inc[:, None, :]  # left-endpoint value
            prev = np.vstack(
                [np.zeros((1, contrib.shape[1] * n)), np.cumsum(contrib.reshape(len(inc), -1), axis=0)]
            )
            parts.append(prev[-1].copy())
        return SignatureVector(spec, np.concatenate(parts))

    # Simpson: level k lives on a grid of stride 2^(k-1) fine pieces, so each
    # quadrature sees its integrand's midpoint one level down.
    grid = _refine(samples, subdivisions * 2 ** (spec.depth - 1))
    prev = np.cumsum(np.vstack([np.zeros((1, n)), np.diff(grid, axis=0)]), axis=0)
    parts = [prev[-1].copy()]
    coarse = grid
    for _ in range(2, spec.depth + 1):
        coarse = coarse[::2]
        inc = np.diff(coarse, axis=0)
        avg = (prev[0:-1:2] + 4.0 * prev[1::2] + prev[2::2]) / 6.0
        contrib = avg[:, :, None] * inc[:, None, :]
        prev = np.vstack(
            [np.zeros((1, contrib.shape[1] * n)), np.cumsum(contrib.reshape(len(inc), -1), axis=0)]
        )
        parts.append(prev[-1].copy())
    return SignatureVector(spec, np.concatenate(parts))


def _refine(samples: np.ndarray, pieces: int) -> np.ndarray:
    """Evaluate the piecewise-linear interpolant on `pieces` sub-steps per segment."""
    steps, n = samples.shape
    w = np.linspace(0.0, 1.0, pieces + 1)[:-1]
    left = samples[:-1]  # (steps-1, N)
    span = np.diff(samples, axis=0)
    fine = left[:, None, :] + w[None, :, None] * span[:, None, :]
    return np.vstack([fine.reshape(-1, n), samples[-1:]])
