"""Viewing graph processing: triplet scoring, spanning-tree seeded triplet
selection and connectivity-preserving greedy pruning into a triplet cover.

The triplet graph G_T has one node per triplet and an edge between two
triplets that share two cameras. The cover handed to the solver keeps
G_T connected and covers as many views as the filtered candidates do.
"""
import itertools
from collections import Counter
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np

from averaging.config import CoverConfig, parallel_map
from averaging.errors import DisconnectedGraphError, EmptyCoverError, ZeroTranslationError
from averaging.geom import decompose_essential, project_to_essential
from averaging.nview import MultiviewEssential

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]
Views = Tuple[int, int, int]


@dataclass
class ViewingGraph:
    """Views 0..n-1 with weighted edges carrying measured essential blocks.

    Measurements are stored for i < j; `measurement(j, i)` is the transpose.
    """
    n: int
    edges: Dict[Pair, Tuple[float, np.ndarray]] = field(default_factory=dict)

    def add_edge(self, i: int, j: int, measurement: np.ndarray, weight: float = 1.0) -> None:
        if i == j:
            raise ValueError(f"self edge on view {i}")
        if weight < 0:
            raise ValueError("edge weights must be non-negative")
        M = np.asarray(measurement, dtype=float).reshape(3, 3)
        if i > j:
            i, j, M = j, i, M.T
        self.edges[(i, j)] = (float(weight), M)

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def weight(self, i: int, j: int) -> float:
        return self.edges[(min(i, j), max(i, j))][0]

    def measurement(self, i: int, j: int) -> np.ndarray:
        M = self.edges[(min(i, j), max(i, j))][1]
        return M if i < j else M.T

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        for (i, j), (w, _) in sorted(self.edges.items()):
            graph.add_edge(i, j, weight=w)
        return graph

    def to_multiview(self) -> MultiviewEssential:
        return MultiviewEssential(self.n, {k: M for k, (_, M) in self.edges.items()})

    @classmethod
    def from_multiview(cls, E: MultiviewEssential, weights: Optional[Dict[Pair, float]] = None) -> "ViewingGraph":
        graph = cls(E.n)
        for (i, j), M in E.items():
            graph.add_edge(i, j, M, (weights or {}).get((i, j), 1.0))
        return graph


@dataclass
class Triplet:
    views: Views
    collinearity: float = 0.0
    translation: float = 0.0
    rotation: float = 0.0

    def __post_init__(self):
        views = tuple(sorted(int(v) for v in self.views))
        if len(set(views)) != 3:
            raise ValueError(f"triplet needs three distinct views, got {self.views}")
        self.views = views

    def pairs(self) -> List[Pair]:
        i, j, k = self.views
        return [(i, j), (i, k), (j, k)]


@dataclass
class TripletCover:
    triplets: List[Triplet]
    triplet_edges: List[Tuple[int, int]]
    covered_views: Set[int]
    # candidate triplets scored before filtering and pruning
    candidates: int = 0

    @classmethod
    def from_triplets(cls, triplets: Iterable[Union[Triplet, Sequence[int]]]) -> "TripletCover":
        items = [t if isinstance(t, Triplet) else Triplet(tuple(t)) for t in triplets]
        covered = set(itertools.chain.from_iterable(t.views for t in items))
        return cls(items, _shared_pair_edges(items), covered)

    def graph(self) -> nx.Graph:
        """G_T as a networkx graph on triplet indices."""
        g = nx.Graph()
        g.add_nodes_from(range(len(self.triplets)))
        g.add_edges_from(self.triplet_edges)
        return g

    def is_connected(self) -> bool:
        return bool(self.triplets) and nx.is_connected(self.graph())

    def shared_views(self, a: int, b: int) -> Tuple[int, int]:
        shared = sorted(set(self.triplets[a].views) & set(self.triplets[b].views))
        return shared[0], shared[1]


def _shared_pair_edges(triplets: Sequence[Triplet]) -> List[Tuple[int, int]]:
    by_pair: Dict[Pair, List[int]] = {}
    for idx, t in enumerate(triplets):
        for p in t.pairs():
            by_pair.setdefault(p, []).append(idx)
    edges = set()
    for members in by_pair.values():
        edges.update(itertools.combinations(sorted(members), 2))
    return sorted(edges)


# Scores

def _angle(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroTranslationError("relative translation has zero length")
    return float(np.arccos(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))


def triangle_angles(d_ij, d_ik, d_jk) -> Tuple[float, float, float]:
    """Interior angles at i, j, k of the triangle with edge vectors i->j, i->k, j->k."""
    d_ij, d_ik, d_jk = (np.asarray(v, dtype=float) for v in (d_ij, d_ik, d_jk))
    return _angle(d_ij, d_ik), _angle(-d_ij, d_jk), _angle(-d_ik, -d_jk)


def collinearity_score(t_ij, t_ik, t_jk) -> float:
    """Smallest triangle angle; 0 for collinear centers."""
    return min(triangle_angles(t_ij, t_ik, t_jk))


def translation_consistency_score(theta_i: float, theta_j: float, theta_k: float) -> float:
    return abs(theta_i + theta_j + theta_k - np.pi)


def rotation_consistency_score(R_ij: np.ndarray, R_jk: np.ndarray, R_ki: np.ndarray) -> float:
    return float(np.linalg.norm(R_ij @ R_jk @ R_ki - np.eye(3)))


def score_triplet(G: ViewingGraph, views: Sequence[int]) -> Triplet:
    """Scores of one triplet from its measured blocks.

    The relative rotations are the decomposition choices that best close the
    rotation loop. Directions are expressed in camera i's frame and their
    signs (lost to pairwise scaling) are the joint choice closest to a
    triangle.
    """
    i, j, k = sorted(views)
    blocks = [project_to_essential(G.measurement(a, b)) for a, b in ((i, j), (j, k), (i, k))]
    options = [decompose_essential(M) for M in blocks]

    best = None
    for c_ij, c_jk, c_ik in itertools.product(*options):
        score = rotation_consistency_score(c_ij.rotation, c_jk.rotation, c_ik.rotation.T)
        if best is None or score < best[0]:
            best = (score, c_ij, c_jk, c_ik)
    rotation_score, c_ij, c_jk, c_ik = best

    d_ij = -c_ij.direction
    d_ik = -c_ik.direction
    d_jk = -(c_ij.rotation @ c_jk.direction)
    angles, translation_score = None, None
    # Negating all three directions leaves the angles unchanged
    for s_ik, s_jk in itertools.product((1.0, -1.0), repeat=2):
        candidate = triangle_angles(d_ij, s_ik * d_ik, s_jk * d_jk)
        score = translation_consistency_score(*candidate)
        if translation_score is None or score < translation_score - 1e-12:
            angles, translation_score = candidate, score

    return Triplet((i, j, k), min(angles), translation_score, rotation_score)


# Selection

def select_spanning_trees(G: ViewingGraph, count: int) -> Set[Pair]:
    """Union of `count` edge-disjoint maximum-weight spanning forests."""
    if count < 1:
        raise ValueError("count must be positive")
    remaining = G.to_networkx()
    if not nx.is_connected(remaining):
        raise DisconnectedGraphError(f"viewing graph with {G.n} views is not connected")
    union: Set[Pair] = set()
    for _ in range(count):
        forest = nx.maximum_spanning_tree(remaining, weight="weight")
        edges = {(min(u, v), max(u, v)) for u, v in forest.edges()}
        if not edges:
            break
        union |= edges
        remaining.remove_edges_from(edges)
    return union


def enumerate_candidate_triplets(G: ViewingGraph, tree_edges: Iterable[Pair]) -> List[Views]:
    """3-cliques of G with at least two edges in the spanning-tree union."""
    tree_neighbors: Dict[int, Set[int]] = {}
    for u, v in tree_edges:
        tree_neighbors.setdefault(u, set()).add(v)
        tree_neighbors.setdefault(v, set()).add(u)
    found = set()
    for j, nbrs in tree_neighbors.items():
        for i, k in itertools.combinations(sorted(nbrs), 2):
            if G.has_edge(i, k):
                found.add(tuple(sorted((i, j, k))))
    return sorted(found)


def _passes(t: Triplet, cfg: CoverConfig) -> bool:
    return (t.collinearity >= cfg.collinearity_min
            and t.rotation <= cfg.rotation_max
            and t.translation <= cfg.translation_max)


def _coverage(triplets: Iterable[Triplet]) -> Set[int]:
    return set(itertools.chain.from_iterable(t.views for t in triplets))


def _pair_counts(triplets: Iterable[Triplet]) -> Counter:
    return Counter(itertools.chain.from_iterable(t.pairs() for t in triplets))


def build_cover(G: ViewingGraph, cfg: Optional[CoverConfig] = None, threads: Optional[int] = None) -> TripletCover:
    """Filter scored candidate triplets, then prune G_T greedily.

    Removal candidates are visited from the worst rotation score down; a
    triplet is dropped only if G_T stays connected with the same covered views.
    Every measured pair also keeps at least `cfg.pair_redundancy` covering
    triplets, or all it had if fewer.
    """
    cfg = cfg or CoverConfig()
    trees = select_spanning_trees(G, cfg.tree_count)
    candidates = enumerate_candidate_triplets(G, trees)
    scored = parallel_map(lambda views: score_triplet(G, views), candidates, threads)
    kept = [t for t in scored if _passes(t, cfg)]
    logger.info(f"{len(candidates)} candidate triplets, {len(kept)} pass thresholds")
    if not kept:
        raise EmptyCoverError("no triplet passes the consistency thresholds")

    cover = TripletCover.from_triplets(kept)
    components = list(nx.connected_components(cover.graph()))
    if len(components) > 1:
        sizes = sorted((len(_coverage(kept[x] for x in c)) for c in components), reverse=True)
        raise EmptyCoverError(
            f"triplet graph splits into {len(components)} components covering {sizes} views "
            f"of {len(cover.covered_views)}; no single connected cover exists")

    graph = cover.graph()
    target = cover.covered_views
    floor = {p: min(cfg.pair_redundancy, c) for p, c in _pair_counts(kept).items()}
    counts = _pair_counts(kept)
    alive = set(range(len(kept)))
    order = sorted(alive, key=lambda x: (-kept[x].rotation, kept[x].views))
    for x in order:
        if len(alive) == 1:
            break
        trial = alive - {x}
        if not nx.is_connected(graph.subgraph(trial)) or _coverage(kept[y] for y in trial) != target:
            logger.debug(f"kept triplet {kept[x].views}")
        elif any(counts[p] - 1 < floor[p] for p in kept[x].pairs()):
            logger.debug(f"kept triplet {kept[x].views} (pair redundancy)")
        else:
            alive = trial
            counts.subtract(kept[x].pairs())
            logger.debug(f"pruned triplet {kept[x].views} (rotation score {kept[x].rotation:.3e})")

    result = TripletCover.from_triplets(kept[x] for x in sorted(alive))
    result.candidates = len(candidates)
    logger.info(f"cover: {len(result.triplets)} triplets over {len(result.covered_views)} views")
    return result
