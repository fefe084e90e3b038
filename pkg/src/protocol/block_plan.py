import logging
import math
from dataclasses import dataclass
from typing import Dict, Hashable, Mapping

from src.rates.rate_engine import RateConstraints, RateReport, r_key
from src.sources.tree_source import CorrelatedTree, RootedSubtree
from src.utils.errors import DegenerateKey, NonIntegralRate

logger = logging.getLogger(__name__)

DEFAULT_N_OUT_CAP = 10_000


@dataclass(frozen=True, eq=False)
class BlockPlan:
    tree: CorrelatedTree
    constraints: RateConstraints
    report: RateReport
    n: int
    p: int
    k_v: Dict[int, int]
    delta: float
    n_out: int
    n_out_uncapped: int
    k_out: int

    @property
    def subtree(self) -> RootedSubtree:
        return self.report.best_subtree

    @property
    def members(self):
        return self.subtree.members

    @property
    def total_samples(self) -> int:
        return self.n * self.n_out

    @property
    def k(self) -> int:
        """Extension degree of the key field: sum of k_v over V*."""
        return sum(self.k_v[v] for v in self.members)

    @property
    def alpha(self) -> float:
        return self.report.alpha

    @property
    def capped(self) -> bool:
        return self.n_out < self.n_out_uncapped


def constraints_from_k(tree: CorrelatedTree, n: int, p: int, k_map: Mapping[Hashable, int]) -> RateConstraints:
    """R_q = k_v log2(p) / n for every vertex named in k_map."""
    return RateConstraints.from_names(tree, {name: int(k) * math.log2(p) / n for name, k in k_map.items()})


def integral_dimensions(tree: CorrelatedTree, constraints: RateConstraints, n: int, p: int) -> Dict[int, int]:
    dims = {}
    for v in tree.vertices:
        exact = n * constraints[v] / math.log2(p)
        k_v = int(round(exact))
        if k_v < 1 or abs(exact - k_v) > 1e-9:
            raise NonIntegralRate(f"Vertex {tree.name(v)!r}: n*R_q/log2(p) = {exact:.6g} is not a positive integer")
        dims[v] = k_v
    return dims


def plan_blocks(tree: CorrelatedTree, constraints: RateConstraints, n: int, p: int, delta: float,
                n_out_cap: int = DEFAULT_N_OUT_CAP) -> BlockPlan:
    if not 0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    if n < 1:
        raise ValueError(f"Block length must be positive, got {n}")
    k_v = integral_dimensions(tree, constraints, n, p)
    report = r_key(tree, constraints)
    if report.r_key <= 0:
        raise DegenerateKey("No rooted subtree yields a positive key rate")

    members = report.best_subtree.members
    uncapped = min(p ** k_v[v] for v in members) - 1
    n_out = min(uncapped, n_out_cap)
    if n_out < uncapped:
        logger.warning(f"N_out capped at {n_out} (full length {uncapped})")
    k_out = int(math.floor(n_out * (1 - 2 * delta) + 1e-12))
    if n_out < 1 or k_out < 1:
        raise DegenerateKey(f"N_out={n_out}, K_out={k_out} leaves no message symbols")

    plan = BlockPlan(tree=tree, constraints=constraints, report=report, n=n, p=p, k_v=k_v, delta=delta,
                     n_out=n_out, n_out_uncapped=uncapped, k_out=k_out)
    logger.info(f"Plan: root {tree.name(plan.subtree.root)!r}, V*={plan.subtree.label(tree)}, "
                f"n={n}, N_out={n_out}, K_out={k_out}, k={plan.k}, alpha={plan.alpha:.3f}")
    return plan
