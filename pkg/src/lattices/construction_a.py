"""Construction-A lattices gamma * (C + pZ^n) over prime fields.

Nearest-point search is exact: every coset c + pZ^n of the code is rounded
coordinatewise and the closest candidate wins. Codewords are enumerated in
lexicographic order of their message vectors, and the first minimum is kept,
so ties resolve the same way on every run.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional, Tuple

import galois
import numpy as np

from src.utils.errors import BelowThreshold, DimensionMismatch

logger = logging.getLogger(__name__)

# candidates held in memory per nearest-point chunk
_CHUNK_ELEMENTS = 1 << 20


@lru_cache(maxsize=None)
def prime_field(p: int):
    return galois.GF(p)


def code_rank(code: np.ndarray, p: int) -> int:
    if code.shape[0] == 0:
        return 0
    return int(np.linalg.matrix_rank(prime_field(p)(np.asarray(code, dtype=np.int64) % p)))


def random_code(n: int, k: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform full-rank k x n generator over F_p, by rejection."""
    if not 0 <= k <= n:
        raise ValueError(f"Code dimension {k} must lie in [0, {n}]")
    while True:
        code = rng.integers(0, p, size=(k, n))
        if code_rank(code, p) == k:
            return code


@dataclass(frozen=True, eq=False)
class Lattice:
    p: int
    code: np.ndarray
    scale: float = 1.0

    @property
    def n(self) -> int:
        return self.code.shape[1]

    @property
    def k(self) -> int:
        return self.code.shape[0]

    @property
    def volume(self) -> float:
        return self.scale ** self.n * float(self.p) ** (self.n - self.k)

    @cached_property
    def codewords(self) -> np.ndarray:
        """All p^k codewords as rows, lexicographic in the message."""
        if self.k == 0:
            return np.zeros((1, self.n))
        messages = np.array(list(itertools.product(range(self.p), repeat=self.k)), dtype=np.int64)
        return ((messages @ self.code) % self.p).astype(float)

    @cached_property
    def _rref(self) -> np.ndarray:
        if self.k == 0:
            return np.zeros((0, self.n), dtype=np.int64)
        return prime_field(self.p)(self.code % self.p).row_reduce().view(np.ndarray).astype(np.int64)

    @cached_property
    def pivots(self) -> Tuple[int, ...]:
        return tuple(int(np.flatnonzero(row)[0]) for row in self._rref)

    @cached_property
    def basis(self) -> np.ndarray:
        """Unscaled n x n basis: reduced code rows plus p*e_j off the pivots."""
        rows = [row.astype(float) for row in self._rref]
        for j in range(self.n):
            if j not in self.pivots:
                e = np.zeros(self.n)
                e[j] = self.p
                rows.append(e)
        return np.array(rows)

    def messages_of(self, words: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Message rows m with m @ code = word (mod p), plus a mask of rows that are codewords."""
        words = np.atleast_2d(np.asarray(words, dtype=np.int64)) % self.p
        if self.k == 0:
            ok = ~words.any(axis=1)
            return np.zeros((len(words), 0), dtype=np.int64), ok
        gf = prime_field(self.p)
        inverse = np.linalg.inv(gf(self.code[:, list(self.pivots)]))
        msgs = (gf(words[:, list(self.pivots)]) @ inverse).view(np.ndarray).astype(np.int64)
        ok = np.all((msgs @ self.code) % self.p == words, axis=1)
        return msgs, ok

    def rescaled(self, scale: float) -> 'Lattice':
        return Lattice(p=self.p, code=self.code, scale=scale)


def construction_a(code, p: int, scale: float = 1.0) -> Lattice:
    code = np.atleast_2d(np.asarray(code, dtype=np.int64)) % p
    if scale <= 0 or not math.isfinite(scale):
        raise ValueError(f"Scale must be positive, got {scale}")
    if code_rank(code, p) != code.shape[0]:
        raise ValueError(f"Generator of shape {code.shape} is not full rank over F_{p}")
    return Lattice(p=p, code=code, scale=float(scale))


def cubic_lattice(n: int, scale: float = 1.0) -> Lattice:
    """gamma * Z^n, written as the full binary code plus 2Z^n."""
    return Lattice(p=2, code=np.eye(n, dtype=np.int64), scale=float(scale))


def _check(lattice: Lattice, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != lattice.n:
        raise DimensionMismatch(f"Expected vectors of length {lattice.n}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("Input contains non-finite values")
    return x


def nearest_point(lattice: Lattice, x) -> np.ndarray:
    """Closest lattice point to x (one vector or a stack of rows)."""
    x = _check(lattice, x)
    flat = x.reshape(-1, lattice.n) / lattice.scale
    words = lattice.codewords
    step = max(1, _CHUNK_ELEMENTS // (len(words) * lattice.n))
    out = np.empty_like(flat)
    for start in range(0, len(flat), step):
        z = flat[start:start + step, None, :]
        cand = words + lattice.p * np.floor((z - words) / lattice.p + 0.5)
        best = ((z - cand) ** 2).sum(axis=2).argmin(axis=1)
        out[start:start + step] = cand[np.arange(len(best)), best]
    return (out * lattice.scale).reshape(x.shape)


def mod_lattice(lattice: Lattice, x) -> np.ndarray:
    x = _check(lattice, x)
    return x - nearest_point(lattice, x)


def sample_dither(lattice: Lattice, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Uniform draw(s) on the Voronoi cell: parallelepiped sample reduced mod the lattice."""
    shape = (lattice.n,) if size is None else (size, lattice.n)
    u = rng.random(shape)
    return mod_lattice(lattice, (u @ lattice.basis) * lattice.scale)


def cell_sq_norms(lattice: Lattice, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    if num_samples < 10_000:
        raise ValueError(f"Second-moment estimate needs at least 10000 samples, got {num_samples}")
    u = sample_dither(lattice, rng, size=num_samples)
    return (u ** 2).sum(axis=1)


def moment_from_norms(sq_norms: np.ndarray, n: int) -> Tuple[float, float]:
    per = sq_norms / n
    return float(per.mean()), float(per.std(ddof=1) / math.sqrt(len(per)))


def second_moment(lattice: Lattice, num_samples: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Monte-Carlo (1/n) E||U||^2 with U uniform on the Voronoi cell; returns (estimate, stderr)."""
    return moment_from_norms(cell_sq_norms(lattice, num_samples, rng), lattice.n)


def gram_volume(lattice: Lattice) -> float:
    b = lattice.basis * lattice.scale
    return float(math.sqrt(abs(np.linalg.det(b @ b.T))))


def effective_radius(lattice: Lattice) -> float:
    """Radius of the ball whose volume equals the cell volume."""
    n = lattice.n
    log_ball = 0.5 * n * math.log(math.pi) - math.lgamma(0.5 * n + 1)
    return math.exp((math.log(lattice.volume) - log_ball) / n)


def poltyrev_exponent(mu: float) -> float:
    two_pi_e = 2 * math.pi * math.e
    if mu < two_pi_e:
        raise BelowThreshold(f"Volume-to-noise ratio {mu:.6g} is below 2*pi*e")
    if mu >= 4 * two_pi_e:
        return mu / (8 * two_pi_e)
    if mu >= 2 * two_pi_e:
        return 0.5 * math.log(mu / (8 * math.pi))
    return mu / (2 * two_pi_e) - 0.5 * math.log(mu / (2 * math.pi))


if __name__ == '__main__':
    import argparse
    parser = argparse.ArgumentParser()
    parser.add_argument('--n', type=int, default=2)
    parser.add_argument('--p', type=int, default=3)
    parser.add_argument('--k', type=int, default=1)
    parser.add_argument('--samples', type=int, default=100000)
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    lat = construction_a(random_code(args.n, args.k, args.p, rng), args.p)
    est, err = second_moment(lat, args.samples, rng)
    print(f"volume={lat.volume:.6g} gram={gram_volume(lat):.6g} sigma2={est:.6g}+-{err:.2g} "
          f"G*2pie={est / lat.volume ** (2 / lat.n) * 2 * math.pi * math.e:.4f}")
