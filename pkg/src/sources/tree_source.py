import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from src.utils.errors import (
    BadCorrelation,
    MismatchedSubtree,
    NotATree,
    SingletonTree,
    UnknownVertex,
)

logger = logging.getLogger(__name__)


def _edge_key(u: int, v: int) -> Tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True, eq=False)
class CorrelatedTree:
    """Gaussian Markov tree source: topology plus one correlation per edge.

    Vertices are the integers 0..m-1 assigned at parse time; `names` keeps the
    external labels for reporting.
    """
    names: Tuple[Hashable, ...]
    edges: Tuple[Tuple[int, int], ...]
    rho: Dict[Tuple[int, int], float] = field(repr=False)

    @property
    def vertices(self) -> range:
        return range(len(self.names))

    @cached_property
    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.vertices)
        for (u, v) in self.edges:
            g.add_edge(u, v, rho=self.rho[(u, v)])
        return g

    @cached_property
    def _index(self) -> Dict[Hashable, int]:
        return {name: i for i, name in enumerate(self.names)}

    def index(self, name: Hashable) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownVertex(f"Unknown vertex: {name!r}")

    def name(self, v: int) -> Hashable:
        return self.names[v]

    def neighbors(self, v: int) -> Tuple[int, ...]:
        return tuple(sorted(self.graph.neighbors(v)))

    def correlation(self, u: int, v: int) -> float:
        """Edge correlation rho_uv of two adjacent vertices."""
        key = _edge_key(u, v)
        if key not in self.rho:
            raise UnknownVertex(f"No edge between {self.name(u)!r} and {self.name(v)!r}")
        return self.rho[key]


@dataclass(frozen=True, eq=False)
class RootedSubtree:
    root: int
    members: Tuple[int, ...]
    parent: Dict[int, int]
    tree_neighbors: Dict[int, Tuple[int, ...]]

    def label(self, tree: CorrelatedTree) -> str:
        return '{' + ','.join(str(tree.name(v)) for v in self.members) + '}'


@dataclass(frozen=True, eq=False)
class SourceBlock:
    """Samples of every vertex for one block: row v holds x_v^(i)."""
    samples: np.ndarray
    index: int = 0

    @property
    def n(self) -> int:
        return self.samples.shape[1]


def build_tree(vertices: Iterable[Hashable], weighted_edges: Iterable[Sequence[Any]]) -> CorrelatedTree:
    names = tuple(vertices)
    index = {name: i for i, name in enumerate(names)}
    if len(index) != len(names):
        raise NotATree(f"Duplicate vertex names in {names}")

    edges: List[Tuple[int, int]] = []
    rho: Dict[Tuple[int, int], float] = {}
    for u_name, v_name, r in weighted_edges:
        for name in (u_name, v_name):
            if name not in index:
                raise UnknownVertex(f"Edge endpoint {name!r} is not a declared vertex")
        r = float(r)
        if not np.isfinite(r) or abs(r) >= 1.0:
            raise BadCorrelation(f"Correlation on edge ({u_name!r}, {v_name!r}) must lie in (-1, 1), got {r}")
        key = _edge_key(index[u_name], index[v_name])
        if key[0] == key[1] or key in rho:
            raise NotATree(f"Self-loop or repeated edge ({u_name!r}, {v_name!r})")
        if r == 0.0:
            logger.warning(f"Edge ({u_name!r}, {v_name!r}) has rho = 0; every rate through it collapses to 0")
        edges.append(key)
        rho[key] = r

    if not names:
        raise NotATree("A tree needs at least one vertex")
    g = nx.Graph()
    g.add_nodes_from(range(len(names)))
    g.add_edges_from(edges)
    if len(edges) != len(names) - 1 or not nx.is_tree(g):
        raise NotATree(f"{len(names)} vertices and {len(edges)} edges do not form a tree")

    return CorrelatedTree(names=names, edges=tuple(sorted(edges)), rho=rho)


def path_correlation(tree: CorrelatedTree, u: int, v: int) -> float:
    """Product of edge correlations on the unique u-v path (1 when u == v)."""
    for w in (u, v):
        if w not in tree.vertices:
            raise UnknownVertex(f"Unknown vertex id: {w}")
    path = nx.shortest_path(tree.graph, u, v)
    out = 1.0
    for a, b in zip(path[:-1], path[1:]):
        out *= tree.correlation(a, b)
    return out


def covariance_matrix(tree: CorrelatedTree) -> np.ndarray:
    m = len(tree.names)
    phi = np.eye(m)
    for u in range(m):
        for v in range(u + 1, m):
            phi[u, v] = phi[v, u] = path_correlation(tree, u, v)
    return phi


def _bfs_order(tree: CorrelatedTree, root: int) -> List[Tuple[int, int]]:
    return list(nx.bfs_edges(tree.graph, root, sort_neighbors=sorted))


def sample_block(tree: CorrelatedTree, n: int, rng: np.random.Generator, index: int = 0) -> SourceBlock:
    """Draw n iid samples of the whole tree source.

    Traverses from vertex 0 in BFS order, setting
    X_child = rho * X_parent + sqrt(1 - rho^2) * Z.
    """
    if n < 1:
        raise ValueError(f"Block length must be positive, got {n}")
    x = np.empty((len(tree.names), n))
    x[0] = rng.standard_normal(n)
    for parent, child in _bfs_order(tree, 0):
        r = tree.correlation(parent, child)
        x[child] = r * x[parent] + np.sqrt(1.0 - r * r) * rng.standard_normal(n)
    return SourceBlock(samples=x, index=index)


def rooted_subtree(tree: CorrelatedTree, root: int) -> RootedSubtree:
    """Root T at `root` and delete every leaf of the rooted tree."""
    if root not in tree.vertices:
        raise UnknownVertex(f"Unknown vertex id: {root}")
    order = _bfs_order(tree, root)
    parent_of = {child: parent for parent, child in order}
    has_children = {parent for parent, _ in order}
    members = [root] + [child for _, child in order if child in has_children]
    # a member's parent has a child, so it is a member too
    return RootedSubtree(
        root=root,
        members=tuple(members),
        parent={v: parent_of[v] for v in members if v != root},
        tree_neighbors={v: tree.neighbors(v) for v in tree.vertices},
    )


def enumerate_rooted_subtrees(tree: CorrelatedTree) -> List[RootedSubtree]:
    if len(tree.names) < 2:
        raise SingletonTree("Key agreement needs at least two terminals")
    return [rooted_subtree(tree, r) for r in tree.vertices]


def check_subtree(tree: CorrelatedTree, subtree: RootedSubtree) -> None:
    """Raise MismatchedSubtree unless `subtree` is the one `tree` yields for its root."""
    if subtree.root not in tree.vertices:
        raise MismatchedSubtree(f"Root {subtree.root} is not a vertex of the tree")
    expected = rooted_subtree(tree, subtree.root)
    if expected.members != subtree.members or expected.parent != subtree.parent:
        raise MismatchedSubtree(f"Subtree rooted at {tree.name(subtree.root)!r} was not derived from this tree")
    if subtree.tree_neighbors != expected.tree_neighbors:
        raise MismatchedSubtree("Neighbor map does not match the tree")


def first_hop_toward(tree: CorrelatedTree, subtree: RootedSubtree, u: int) -> Optional[int]:
    """Neighbor of u on the path to the closest member of V* (None if u is a member)."""
    if u in subtree.members:
        return None
    best = min(subtree.members, key=lambda m: (nx.shortest_path_length(tree.graph, u, m), m))
    return nx.shortest_path(tree.graph, u, best)[1]


if __name__ == '__main__':
    import argparse
    parser = argparse.ArgumentParser()
    parser.add_argument('--rho', type=float, nargs='+', required=True, help='Edge correlations of a path')
    parser.add_argument('--samples', type=int, default=100000)
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()
    path = build_tree(range(len(args.rho) + 1), [(i, i + 1, r) for i, r in enumerate(args.rho)])
    block = sample_block(path, args.samples, np.random.default_rng(args.seed))
    print(np.round(np.corrcoef(block.samples), 4))
    print(np.round(covariance_matrix(path), 4))
