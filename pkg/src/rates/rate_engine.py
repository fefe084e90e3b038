"""Closed-form achievable secret-key rates for Gaussian Markov trees.

All rates are in bits per sample. Every exponential of a rate is taken in
base 2 (2^{2R}), which keeps the entropy and communication expressions
consistent with base-2 quantization rates. ``units='nats'`` evaluates the
printed expressions verbatim, with e^{2R} inside a base-2 logarithm, for
comparison only.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Hashable, List, Mapping, Optional, Tuple

import pandas as pd

from src.sources.tree_source import (
    CorrelatedTree,
    RootedSubtree,
    check_subtree,
    enumerate_rooted_subtrees,
)

logger = logging.getLogger(__name__)

CAPACITY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RateConstraints:
    """Quantization rate R_q^(v) in bits/sample for every vertex id."""
    rq: Dict[int, float]

    def __post_init__(self):
        for v, r in self.rq.items():
            if not (math.isfinite(r) and r > 0):
                raise ValueError(f"Quantization rate of vertex {v} must be positive and finite, got {r}")

    @classmethod
    def uniform(cls, tree: CorrelatedTree, rate: float) -> 'RateConstraints':
        return cls({v: float(rate) for v in tree.vertices})

    @classmethod
    def from_names(cls, tree: CorrelatedTree, rates: Mapping[Hashable, float]) -> 'RateConstraints':
        rq = {tree.index(name): float(r) for name, r in rates.items()}
        missing = [tree.name(v) for v in tree.vertices if v not in rq]
        if missing:
            raise ValueError(f"Missing quantization rates for vertices {missing}")
        return cls(rq)

    def __getitem__(self, v: int) -> float:
        return self.rq[v]


@dataclass(frozen=True)
class SubtreeRates:
    subtree: RootedSubtree
    r_ent: float
    r_com: float

    @property
    def candidate(self) -> float:
        return self.r_ent - self.r_com


@dataclass(frozen=True)
class RateReport:
    records: Tuple[SubtreeRates, ...]
    best: SubtreeRates
    r_key: float
    alpha: float

    @property
    def best_subtree(self) -> RootedSubtree:
        return self.best.subtree

    def to_frame(self, tree: CorrelatedTree) -> pd.DataFrame:
        rows = [{
            'root': str(tree.name(rec.subtree.root)),
            'members': rec.subtree.label(tree),
            'r_ent': rec.r_ent,
            'r_com': rec.r_com,
            'candidate': rec.candidate,
            'chosen': rec is self.best,
        } for rec in self.records]
        return pd.DataFrame(rows, columns=['root', 'members', 'r_ent', 'r_com', 'candidate', 'chosen'])


def _exp2r(rate: float, units: str) -> float:
    if units == 'bits':
        return 2.0 ** (2.0 * rate)
    if units == 'nats':
        return math.exp(2.0 * rate)
    raise ValueError(f"Unknown units: {units}")


def r_ent(tree: CorrelatedTree, subtree: RootedSubtree, constraints: RateConstraints,
          units: str = 'bits') -> float:
    """Lower bound on the joint entropy rate of the quantized V* sources."""
    check_subtree(tree, subtree)
    total = constraints[subtree.root]
    for u in subtree.members[1:]:
        rho2 = tree.correlation(u, subtree.parent[u]) ** 2
        total += 0.5 * math.log2((_exp2r(constraints[u], units) - 1.0) * (1.0 - rho2) + 1.0)
    return total


def _com_term(rho: float, rq_v: float, rq_u: float, units: str, variant: str) -> float:
    a_v = _exp2r(rq_v, units)
    a_u = _exp2r(rq_u, units)
    rho2 = rho * rho
    if variant == 'published':
        last = rho2 * a_v / (a_u - 1.0)
    elif variant == 'sigma2':
        # sigma^2 = 1/(2^{2R} - 1) substituted directly
        last = rho2 * (a_v - 1.0) / (a_u - 1.0)
    else:
        raise ValueError(f"Unknown r_com variant: {variant}")
    return 0.5 * math.log2((a_v - 1.0) * (1.0 - rho2) + 1.0 + last)


def terminal_com_rate(tree: CorrelatedTree, v: int, constraints: RateConstraints,
                      units: str = 'bits', variant: str = 'published') -> float:
    return max(_com_term(tree.correlation(u, v), constraints[v], constraints[u], units, variant)
               for u in tree.neighbors(v))


def r_com(tree: CorrelatedTree, subtree: RootedSubtree, constraints: RateConstraints,
          units: str = 'bits', variant: str = 'published') -> float:
    """Sum rate of public communication; the max runs over neighbors in the full tree."""
    check_subtree(tree, subtree)
    return sum(terminal_com_rate(tree, v, constraints, units, variant) for v in subtree.members)


def alpha(subtree: RootedSubtree, constraints: RateConstraints) -> float:
    rates = [constraints[v] for v in subtree.members]
    return max(rates) / min(rates)


def r_key(tree: CorrelatedTree, constraints: RateConstraints, units: str = 'bits',
          variant: str = 'published') -> RateReport:
    records = []
    for subtree in enumerate_rooted_subtrees(tree):
        records.append(SubtreeRates(
            subtree=subtree,
            r_ent=r_ent(tree, subtree, constraints, units),
            r_com=r_com(tree, subtree, constraints, units, variant),
        ))
    # strict '>' keeps the smallest root among ties
    best = records[0]
    for rec in records[1:]:
        if rec.candidate > best.candidate:
            best = rec
    value = max(0.0, best.candidate)
    if value == 0.0:
        logger.warning("No rooted subtree yields a positive key rate")
    return RateReport(records=tuple(records), best=best, r_key=value,
                      alpha=alpha(best.subtree, constraints))


def _half_log2_inv(rho: float) -> float:
    return 0.5 * math.log2(1.0 / (1.0 - rho * rho))


def fine_limit_terms(tree: CorrelatedTree, subtree: RootedSubtree) -> Tuple[float, Dict[int, float]]:
    """Root term and per-member correction terms of the fine-quantization rate."""
    root = subtree.root
    root_term = min(_half_log2_inv(tree.correlation(root, v)) for v in tree.neighbors(root))
    corrections = {}
    for u in subtree.members[1:]:
        par = 1.0 - tree.correlation(u, subtree.parent[u]) ** 2
        corrections[u] = min(0.5 * math.log2(par / (1.0 - tree.correlation(u, v) ** 2))
                             for v in tree.neighbors(u))
    return root_term, corrections


def r_key_fine(tree: CorrelatedTree) -> Tuple[float, RootedSubtree]:
    best_value, best_subtree = None, None
    for subtree in enumerate_rooted_subtrees(tree):
        root_term, corrections = fine_limit_terms(tree, subtree)
        value = root_term + sum(corrections.values())
        if best_value is None or value > best_value:
            best_value, best_subtree = value, subtree
    return max(0.0, best_value), best_subtree


def c_key_infinity(tree: CorrelatedTree) -> float:
    """Secret-key capacity without rate constraints: the weakest edge."""
    if not tree.edges:
        return 0.0
    return min(_half_log2_inv(tree.rho[e]) for e in tree.edges)


def two_user_rate(rho: float, rq_u: float, rq_v: float, units: str = 'bits') -> float:
    """Key rate with u communicating and v silent."""
    a_u = _exp2r(rq_u, units)
    a_v = _exp2r(rq_v, units)
    rho2 = rho * rho
    return 0.5 * math.log2(a_u / ((a_u - 1.0) * (1.0 - rho2) + 1.0 + rho2 * a_u / (a_v - 1.0)))


def r_nn(rho: float, rq_u: float, units: str = 'bits') -> float:
    a_u = _exp2r(rq_u, units)
    return 0.5 * math.log2(a_u / ((a_u - 1.0) * (1.0 - rho * rho) + 1.0))


class FineLimitKind(str, Enum):
    ACHIEVES_CAPACITY = 'AchievesCapacity'
    STRICTLY_SUBOPTIMAL = 'StrictlySuboptimal'


@dataclass(frozen=True)
class FineLimitClass:
    kind: FineLimitKind
    r_key_fine: float
    c_key: float
    gap: float
    witness: RootedSubtree


def classify_fine_limit(tree: CorrelatedTree, tolerance: float = CAPACITY_TOLERANCE) -> FineLimitClass:
    value, subtree = r_key_fine(tree)
    capacity = c_key_infinity(tree)
    gap = capacity - value
    kind = FineLimitKind.ACHIEVES_CAPACITY if abs(gap) <= tolerance else FineLimitKind.STRICTLY_SUBOPTIMAL
    return FineLimitClass(kind=kind, r_key_fine=value, c_key=capacity, gap=gap, witness=subtree)


def parent_minimizing_subtree(tree: CorrelatedTree) -> Optional[RootedSubtree]:
    """A rooted subtree whose members all have their weakest neighbor as parent
    and whose root touches a weakest edge, or None.
    """
    weakest = min(abs(tree.rho[e]) for e in tree.edges)
    for subtree in enumerate_rooted_subtrees(tree):
        root = subtree.root
        if min(abs(tree.correlation(root, v)) for v in tree.neighbors(root)) != weakest:
            continue
        ok = all(
            abs(tree.correlation(u, subtree.parent[u])) == min(abs(tree.correlation(u, v)) for v in tree.neighbors(u))
            for u in subtree.members[1:]
        )
        if ok:
            return subtree
    return None


if __name__ == '__main__':
    import argparse
    from src.sources.tree_source import build_tree
    parser = argparse.ArgumentParser()
    parser.add_argument('--rho', type=float, nargs='+', required=True, help='Edge correlations of a path')
    parser.add_argument('--rq', type=float, default=1.0)
    args = parser.parse_args()
    path = build_tree(range(1, len(args.rho) + 2), [(i + 1, i + 2, r) for i, r in enumerate(args.rho)])
    report = r_key(path, RateConstraints.uniform(path, args.rq))
    print(report.to_frame(path).to_string(index=False))
    print(classify_fine_limit(path))
