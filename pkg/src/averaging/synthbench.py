"""Synthetic scenes, measurement corruption and benchmark runs.

Every random concern (layout, noise, outliers, missing pairs, pairwise
scales) draws from its own child stream of the scene seed, so switching
one corruption on or off leaves the other draws untouched.
"""
import itertools
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
import pandas as pd

from averaging.admm import solve
from averaging.config import AdmmConfig, CoverConfig, ToleranceConfig, parallel_map
from averaging.cover import ViewingGraph, build_cover
from averaging.errors import AveragingError, LayoutDegenerateError, NotConvergedError, RetrySampling, StageError
from averaging.geom import CameraPose, axis_angle, random_rotation, relative_essential, skew
from averaging.register import align_to_reference, naive_triplet_poses, reconstruct
from averaging.resilience import resample

logger = logging.getLogger(__name__)

LAYOUTS = ("ring", "random-box", "clustered")
WEIGHT_EPS = 1e-3


@dataclass
class SceneSpec:
    n: int = 10
    layout: str = "ring"
    sigma_R: float = 0.0
    sigma_t: float = 0.0
    scale_pairs: bool = False
    outlier_fraction: float = 0.0
    missing_fraction: float = 0.0
    seed: int = 0
    sigma_entry: float = 0.0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("a scene needs at least three views")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if min(self.sigma_R, self.sigma_t, self.sigma_entry) < 0:
            raise ValueError("noise levels must be non-negative")
        for name in ("outlier_fraction", "missing_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")


class Scene(NamedTuple):
    poses: List[CameraPose]
    graph: ViewingGraph
    outliers: Set[Tuple[int, int]]


@dataclass
class BenchReport:
    n: int
    views_posed: int
    R_f_mean: float
    R_d_mean: float
    R_d_median: float
    center_mean: float
    center_median: float
    naive_R_f_mean: float = float("nan")
    naive_R_d_mean: float = float("nan")
    naive_skipped: int = 0
    triplets_before: int = 0
    triplets_after: int = 0
    iterations: int = 0
    converged: bool = True
    final_primal: float = float("nan")
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, float]:
        row = asdict(self)
        timings = row.pop("timings")
        row.update({f"time_{k}": v for k, v in timings.items()})
        return row


def _centers(layout: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if layout == "ring":
        phase = rng.uniform(0, 2 * np.pi)
        angles = phase + 2 * np.pi * np.arange(n) / n + rng.normal(0, 0.05, n)
        return np.column_stack([5 * np.cos(angles), 5 * np.sin(angles), rng.uniform(-0.5, 0.5, n)])
    if layout == "random-box":
        return rng.uniform(-5, 5, size=(n, 3))
    hubs = rng.uniform(-6, 6, size=(3, 3))
    return hubs[rng.integers(0, 3, n)] + rng.normal(0, 1.0, size=(n, 3))


@resample(max_attempts=20)
def _draw_layout(layout: str, n: int, rng: np.random.Generator) -> List[CameraPose]:
    centers = _centers(layout, n, rng)
    S = np.linalg.svd(centers - centers.mean(axis=0), compute_uv=False)
    if S[1] < 0.05 * S[0]:
        raise RetrySampling("centers nearly collinear")
    gaps = [np.linalg.norm(a - b) for a, b in itertools.combinations(centers, 2)]
    if min(gaps) < 1e-3:
        raise RetrySampling("centers nearly coincide")
    return [CameraPose(random_rotation(rng), c) for c in centers]


def random_poses(n: int, rng: np.random.Generator, layout: str = "random-box") -> List[CameraPose]:
    """n poses with uniformly random orientations and non-collinear centers."""
    try:
        return _draw_layout(layout, n, rng)
    except RetrySampling as exc:
        raise LayoutDegenerateError(f"{layout} layout stayed degenerate: {exc}") from exc


@resample(max_attempts=50)
def _draw_missing(pairs: List[Tuple[int, int]], count: int, n: int, rng: np.random.Generator) -> Set[Tuple[int, int]]:
    if count == 0:
        return set()
    dropped = {pairs[x] for x in rng.choice(len(pairs), size=count, replace=False)}
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(p for p in pairs if p not in dropped)
    if not nx.is_connected(g):
        raise RetrySampling("dropping pairs disconnects the graph")
    return dropped


def _perturbed_essential(a: CameraPose, b: CameraPose, sigma_R: float, sigma_t: float, rng: np.random.Generator) -> np.ndarray:
    R = a.rotation.T @ b.rotation
    u = a.rotation.T @ (a.center - b.center)
    axis = rng.normal(size=3)
    R = axis_angle(axis, rng.normal(0, sigma_R)) @ R
    # rotate the direction about an axis orthogonal to it
    ortho = np.cross(u, rng.normal(size=3))
    u = axis_angle(ortho, rng.normal(0, sigma_t)) @ u
    return skew(u) @ R


def _deviation(measured: np.ndarray, clean: np.ndarray) -> float:
    m = measured / np.linalg.norm(measured)
    c = clean / np.linalg.norm(clean)
    return float(min(np.linalg.norm(m - c), np.linalg.norm(m + c)))


def generate_scene(spec: SceneSpec) -> Scene:
    """Ground-truth poses and the corrupted viewing graph for a spec."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(6)]
    rng_layout, rng_noise, rng_outlier, rng_missing, rng_scale, rng_entry = streams

    poses = random_poses(spec.n, rng_layout, spec.layout)

    pairs = list(itertools.combinations(range(spec.n), 2))
    missing_count = int(round(spec.missing_fraction * len(pairs)))
    try:
        missing = _draw_missing(pairs, missing_count, spec.n, rng_missing)
    except RetrySampling as exc:
        raise LayoutDegenerateError(f"could not drop {missing_count} pairs and stay connected") from exc
    kept = [p for p in pairs if p not in missing]

    outlier_count = int(round(spec.outlier_fraction * len(kept)))
    outliers = {kept[x] for x in rng_outlier.choice(len(kept), size=outlier_count, replace=False)}

    graph = ViewingGraph(spec.n)
    for i, j in kept:
        clean = relative_essential(poses[i], poses[j])
        if (i, j) in outliers:
            fake = [CameraPose(random_rotation(rng_outlier), rng_outlier.uniform(-5, 5, 3)) for _ in range(2)]
            measured = relative_essential(*fake)
        else:
            measured = _perturbed_essential(poses[i], poses[j], spec.sigma_R, spec.sigma_t, rng_noise)
        noise = rng_entry.normal(size=(3, 3))
        if spec.sigma_entry > 0:
            measured = measured + spec.sigma_entry * np.linalg.norm(measured) * noise
        scale = rng_scale.uniform(0.2, 5.0) * rng_scale.choice((-1.0, 1.0))
        if spec.scale_pairs:
            measured = scale * measured
        # rounded so pairwise rescaling cannot reorder equal weights
        weight = round(1.0 / (_deviation(measured, clean) + WEIGHT_EPS), 6)
        graph.add_edge(i, j, measured, weight)

    logger.debug(f"scene seed={spec.seed}: {len(kept)} pairs, {len(outliers)} outliers, {len(missing)} missing")
    return Scene(poses, graph, outliers)


def _stage(name: str, timings: Dict[str, float], fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except AveragingError as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - start


def run_pipeline(
    scene: Scene,
    cover_cfg: Optional[CoverConfig] = None,
    admm_cfg: Optional[AdmmConfig] = None,
    tol: Optional[ToleranceConfig] = None,
    baseline: bool = True,
    threads: Optional[int] = None,
) -> BenchReport:
    """cover -> admm -> register -> align, with the naive per-triplet baseline."""
    timings: Dict[str, float] = {}
    E_hat = scene.graph.to_multiview()

    cover = _stage("cover", timings, build_cover, scene.graph, cover_cfg, threads)

    def averaged():
        try:
            E, trace = solve(E_hat, cover, admm_cfg, tol, threads)
            return E, trace, True
        except NotConvergedError as exc:
            logger.warning(f"{exc}; continuing with the best iterate")
            return exc.best, exc.trace, False

    E, trace, converged = _stage("admm", timings, averaged)
    recon = _stage("register", timings, reconstruct, E, cover, None, tol, threads)
    alignment = _stage("align", timings, align_to_reference, recon, scene.poses)
    summary = alignment.summary()

    report = BenchReport(
        n=len(scene.poses),
        views_posed=len(recon.covered_views),
        R_f_mean=summary["R_f_mean"],
        R_d_mean=summary["R_d_mean"],
        R_d_median=summary["R_d_median"],
        center_mean=summary["center_mean"],
        center_median=summary["center_median"],
        triplets_before=cover.candidates,
        triplets_after=len(cover.triplets),
        iterations=len(trace),
        converged=converged,
        final_primal=float(trace[["primal_B", "primal_D"]].iloc[-1].max()) if len(trace) else float("nan"),
        timings=timings,
    )
    if baseline:
        naive, skipped = _stage("baseline", timings, naive_triplet_poses, E_hat, cover, tol, threads)
        naive_summary = _stage("baseline_align", timings, align_to_reference, naive, scene.poses).summary()
        report.naive_R_f_mean = naive_summary["R_f_mean"]
        report.naive_R_d_mean = naive_summary["R_d_mean"]
        report.naive_skipped = skipped
    return report


def run_sweep(specs: Sequence[SceneSpec], threads: Optional[int] = None, **pipeline_kwargs) -> pd.DataFrame:
    """One row per spec: the spec fields followed by its BenchReport."""
    def run(spec: SceneSpec) -> Dict[str, float]:
        report = run_pipeline(generate_scene(spec), threads=1, **pipeline_kwargs)
        return {**asdict(spec), **report.to_dict()}

    return pd.DataFrame(parallel_map(run, specs, threads))
