import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from src.lattices.construction_a import (
    Lattice,
    cell_sq_norms,
    effective_radius,
    moment_from_norms,
    mod_lattice,
    nearest_point,
    random_code,
)
from src.utils.errors import DimensionMismatch, InfeasibleChain, NonIntegralRate, NotInFundamentalCell

logger = logging.getLogger(__name__)

TWO_PI_E = 2 * math.pi * math.e

# (rho_uv, sigma^2 of the neighbor's fine lattice)
Neighbor = Tuple[float, float]


@dataclass(frozen=True, eq=False)
class LatticeChain:
    """One terminal's nested triple coarse < middle < fine.

    The fine code's first `coarse_dim` rows generate the coarse code and its
    first `coarse_dim + k_a` rows the middle code. Measured fields stay NaN for
    chains assembled by hand.
    """
    fine: Lattice
    middle: Lattice
    coarse: Lattice
    k_v: int
    k_a: int
    coarse_dim: int = 0
    delta: float = 0.0
    sigma2: float = float('nan')
    sigma2_stderr: float = float('nan')
    middle_margin: float = float('nan')
    covering_ratio: float = float('nan')
    normalized_moment: float = float('nan')
    attempts: int = 1

    @property
    def n(self) -> int:
        return self.fine.n

    @property
    def p(self) -> int:
        return self.fine.p

    @property
    def scale(self) -> float:
        return self.fine.scale

    @property
    def nesting_ratio(self) -> int:
        return self.p ** self.k_v

    @property
    def rate_bits(self) -> float:
        """Quantization rate (k_v / n) log2 p in bits per sample."""
        return self.k_v * math.log2(self.p) / self.n

    @property
    def analog_bits(self) -> float:
        """Bits per block of one analog broadcast."""
        return math.log2(self.middle.volume / self.fine.volume)

    @property
    def coarse_margin(self) -> float:
        return self.coarse.volume ** (2 / self.n) / (TWO_PI_E * (1 + self.sigma2) * (1 + self.delta))

    def with_neighbors(self, neighbors: Sequence[Neighbor]) -> 'LatticeChain':
        margin = middle_margin(self.middle.volume, self.n, self.sigma2, neighbors, self.delta)
        return replace(self, middle_margin=margin)


def sigma2_target(rq_bits: float, delta: float) -> float:
    """Second moment a fine lattice at rate rq_bits is expected to reach with design margin delta."""
    denom = 2.0 ** (2 * (rq_bits - math.log2(1 + delta))) - 1.0
    return 1.0 / denom if denom > 0 else math.inf


def middle_margin(middle_volume: float, n: int, sigma2_v: float, neighbors: Sequence[Neighbor],
                  delta: float) -> float:
    if not neighbors:
        return math.inf
    worst = max(1 - rho * rho + sigma2_v + rho * rho * s2u for rho, s2u in neighbors)
    return middle_volume ** (2 / n) / (TWO_PI_E * worst * (1 + delta))


def _solve_scale(p: int, n: int, coarse_dim: int, unit_sigma2: float, delta: float) -> Optional[float]:
    # vol_b^{2/n} = gamma^2 * p^{2(n-b)/n} and sigma^2 = gamma^2 * unit_sigma2
    unit_coarse = float(p) ** (2 * (n - coarse_dim) / n)
    denom = unit_coarse - TWO_PI_E * (1 + delta) * unit_sigma2
    if denom <= 0:
        return None
    return math.sqrt(TWO_PI_E * (1 + delta) / denom)


def _build_once(n, p, k_v, k_a, neighbors, delta, rng, coarse_dim, sigma2_samples, max_retries):
    for attempt in range(1, max_retries + 1):
        code = random_code(n, k_v + coarse_dim, p, rng)
        unit = Lattice(p=p, code=code, scale=1.0)
        sq = cell_sq_norms(unit, sigma2_samples, rng)
        s0, s0_err = moment_from_norms(sq, n)
        gamma = _solve_scale(p, n, coarse_dim, s0, delta)
        if gamma is None:
            logger.info(f"Attempt {attempt}: coarse cell too small for the measured second moment {s0:.4g}")
            continue
        fine = unit.rescaled(gamma)
        middle = Lattice(p=p, code=code[:coarse_dim + k_a], scale=gamma)
        coarse = Lattice(p=p, code=code[:coarse_dim], scale=gamma)
        sigma2 = gamma * gamma * s0
        margin = middle_margin(middle.volume, n, sigma2, neighbors, delta)
        if margin < 1.0:
            logger.info(f"Attempt {attempt}: middle lattice margin {margin:.4f} < 1 (n={n}, p={p}, k_a={k_a})")
            continue
        return LatticeChain(
            fine=fine, middle=middle, coarse=coarse, k_v=k_v, k_a=k_a, coarse_dim=coarse_dim, delta=delta,
            sigma2=sigma2, sigma2_stderr=gamma * gamma * s0_err, middle_margin=margin,
            covering_ratio=float(np.sqrt(sq.max())) / effective_radius(unit),
            normalized_moment=s0 / unit.volume ** (2 / n) * TWO_PI_E,
            attempts=attempt,
        )
    raise InfeasibleChain(f"No chain with n={n}, p={p}, k_v={k_v}, k_a={k_a} met the middle-lattice "
                          f"volume condition at delta={delta} after {max_retries} attempts")


def build_chain(n: int, p: int, k_v: int, k_a: Optional[int], rho_neighbors: Sequence[float], delta: float,
                rng: np.random.Generator, sigma2_neighbors: Optional[Sequence[float]] = None,
                rq_target: Optional[float] = None, coarse_dim: int = 0, sigma2_samples: int = 100_000,
                max_retries: int = 8) -> LatticeChain:
    """Random nested Construction-A chain scaled so the coarse cell meets its volume target exactly.

    Neighbor second moments default to `sigma2_target` at this chain's rate. With
    k_a=None every k_a from k_v - 1 down to 0 is tried and the first feasible
    one is kept.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if k_v < 1 or k_v + coarse_dim > n or coarse_dim < 0:
        raise ValueError(f"Need 1 <= k_v and k_v + coarse_dim <= n, got k_v={k_v}, coarse_dim={coarse_dim}, n={n}")
    rate = k_v * math.log2(p) / n
    if rq_target is not None and abs(rate - rq_target) > 1e-9:
        raise NonIntegralRate(f"(k_v/n) log2 p = {rate:.6g} does not equal the target rate {rq_target:.6g}")
    if sigma2_neighbors is None:
        sigma2_neighbors = [sigma2_target(rate, delta)] * len(rho_neighbors)
    neighbors = list(zip(rho_neighbors, sigma2_neighbors))

    if k_a is not None:
        if not 0 <= k_a <= k_v:
            raise ValueError(f"k_a must lie in [0, {k_v}], got {k_a}")
        return _build_once(n, p, k_v, k_a, neighbors, delta, rng, coarse_dim, sigma2_samples, max_retries)

    for candidate in range(k_v - 1, -1, -1):
        try:
            chain = _build_once(n, p, k_v, candidate, neighbors, delta, rng, coarse_dim, sigma2_samples,
                                max_retries)
        except InfeasibleChain:
            continue
        logger.info(f"Chosen k_a={candidate} for n={n}, p={p}, k_v={k_v}")
        return chain
    raise InfeasibleChain(f"No k_a in [0, {k_v - 1}] meets the middle-lattice volume condition at delta={delta}")


def coset_index(chain: LatticeChain, y) -> np.ndarray:
    """F_p^{k_v} coordinates of fine-lattice points lying in the coarse Voronoi cell."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != chain.n:
        raise DimensionMismatch(f"Expected vectors of length {chain.n}, got shape {y.shape}")
    rows = y.reshape(-1, chain.n)
    z = rows / chain.scale
    zi = np.rint(z)
    if not np.allclose(z, zi, atol=1e-6):
        raise NotInFundamentalCell("Input is not a fine-lattice point")
    if not np.allclose(nearest_point(chain.coarse, rows), 0.0, atol=1e-9 * chain.scale):
        raise NotInFundamentalCell("Input lies outside the coarse Voronoi cell")
    msgs, ok = chain.fine.messages_of(zi.astype(np.int64))
    if not ok.all():
        raise NotInFundamentalCell("Input is not a fine-lattice point")
    index = msgs[:, chain.coarse_dim:]
    return index.reshape(y.shape[:-1] + (chain.k_v,))


def coset_point(chain: LatticeChain, index) -> np.ndarray:
    """Inverse of coset_index."""
    index = np.asarray(index, dtype=np.int64)
    rows = index.reshape(-1, chain.k_v) % chain.p
    msgs = np.hstack([np.zeros((len(rows), chain.coarse_dim), dtype=np.int64), rows])
    words = (msgs @ chain.fine.code) % chain.p
    points = mod_lattice(chain.coarse, words * chain.scale)
    return points.reshape(index.shape[:-1] + (chain.n,))


def chain_record(chain: LatticeChain) -> Dict[str, Any]:
    return {
        'n': chain.n,
        'p': chain.p,
        'k_v': chain.k_v,
        'k_a': chain.k_a,
        'coarse_dim': chain.coarse_dim,
        'gamma': chain.scale,
        'sigma2': chain.sigma2,
        'sigma2_stderr': chain.sigma2_stderr,
        'nesting_ratio': chain.nesting_ratio,
        'vol_ratio_coarse_fine': chain.coarse.volume / chain.fine.volume,
        'vol_ratio_middle_fine': chain.middle.volume / chain.fine.volume,
        'rate_bits': chain.rate_bits,
        'coarse_margin': chain.coarse_margin,
        'middle_margin': chain.middle_margin,
        'covering_ratio': chain.covering_ratio,
        'normalized_moment': chain.normalized_moment,
        'attempts': chain.attempts,
    }
