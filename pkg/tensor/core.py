"""
Tensor core: dense float64 linear algebra and seeded randomness.

A Matrix is a 2-D numpy float64 array (rows = samples, cols = features).
Reductions go through numpy in a fixed order, so results are deterministic
for a given input.

Rng
---
Wraps numpy's PCG64 generator: 128-bit state advanced by the LCG
    state <- state * 0x2360ED051FC65DA44385DF649FCCF645 + inc  (mod 2^128)
with the XSL-RR output permutation. Streams are identical across platforms
for equal seeds. Normals are drawn by Box-Muller from pairs of uniforms:
    z0 = sqrt(-2 ln u1) cos(2 pi u2),  z1 = sqrt(-2 ln u1) sin(2 pi u2)
with u1 in (0, 1]. All z0 values of a draw come first, then the z1 values.

Splitting rule: `Rng(seed).spawn(key)` is seeded by
SeedSequence(seed, spawn_key=(key,)); spawning again appends to the key.
Independent workers each take their own spawned child.
"""
import logging

import numpy as np
from scipy.linalg import svdvals

from errors import ShapeError

log = logging.getLogger(__name__)


class Rng:
    def __init__(self, seed=0, _seq=None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed(self):
        return self._seq.entropy

    def spawn(self, key):
        """Independent child stream keyed by `key` (an int)."""
        seq = np.random.SeedSequence(
            self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (int(key),)
        )
        return Rng(_seq=seq)

    def uniform(self, size, low=0.0, high=1.0):
        return low + (high - low) * self._gen.random(size)

    def normal(self, count):
        """`count` standard normals via Box-Muller."""
        count = int(count)
        if count <= 0:
            return np.zeros(0)
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:count]

    def permutation(self, n):
        return self._gen.permutation(n)


def as_matrix(x, name="matrix"):
    """Coerce to a C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D", m.shape, ("rows", "cols"))
    return m


def matmul(a, b):
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def frobenius_norm(m):
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def _power_start(n):
    # fixed start vector so estimates are reproducible
    v = Rng(0x5EED).normal(n) + 1e-3
    return v / np.linalg.norm(v)


def operator_norm_estimate(m, iters=100):
    """
    Largest singular value by power iteration on m^T m.

    The estimate ||m v_k|| is a Rayleigh quotient of m^T m, so it never
    exceeds the true spectral norm and is nondecreasing in `iters`.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    m = as_matrix(m)
    if not np.any(m):
        return 0.0
    v = _power_start(m.shape[1])
    estimate = 0.0
    for _ in range(iters):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector fell in the null space
            return estimate
        v = w / norm
        estimate = float(np.linalg.norm(m @ v))
    return estimate


def spectral_norm(m):
    """Exact largest singular value (SVD)."""
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    return float(svdvals(m)[0])


def gauss_draw(rng, rows, cols, mean=0.0, std=1.0):
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return mean + std * rng.normal(rows * cols).reshape(rows, cols)


def all_finite(m):
    return bool(np.all(np.isfinite(m)))
