"""Camera poses from solved triplets: per-triplet extraction, similarity
stitching over the triplet graph and alignment against a reference."""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from averaging.config import ToleranceConfig, parallel_map
from averaging.cover import TripletCover
from averaging.errors import (
    AveragingError,
    ConfigurationMismatchError,
    InconsistentPairError,
    InsufficientOverlapError,
)
from averaging.geom import (
    CameraPose,
    Similarity,
    apply_similarity,
    chordal_mean,
    project_to_essential,
    rotation_angle_deg,
    similarity_from_two_pose_pairs,
)
from averaging.nview import MultiviewEssential, recover_poses, remove_block_scales

logger = logging.getLogger(__name__)

# Frobenius gap between the two shared-camera rotation estimates above
# which two triplets are taken to disagree on a configuration (a twisted
# pair differs by about 2.83).
MISMATCH_TOL = 1.0


@dataclass
class TripletPoses:
    index: int
    views: Tuple[int, int, int]
    poses: List[CameraPose]

    def pose_of(self, view: int) -> CameraPose:
        return self.poses[self.views.index(view)]


@dataclass
class GlobalReconstruction:
    poses: List[Optional[CameraPose]]
    anchor: int
    residuals: Dict[Tuple[int, int], float] = field(default_factory=dict)
    transforms: Dict[int, Similarity] = field(default_factory=dict)

    @property
    def covered_views(self) -> List[int]:
        return [v for v, p in enumerate(self.poses) if p is not None]


@dataclass
class Alignment:
    """Similarity mapping the estimate onto the reference, plus per-view errors."""
    similarity: Similarity
    views: List[int]
    rotation_frobenius: np.ndarray
    rotation_deg: np.ndarray
    center_error: np.ndarray
    relative_center_error: np.ndarray

    def summary(self) -> Dict[str, float]:
        return {
            "R_f_mean": float(np.mean(self.rotation_frobenius)),
            "R_d_mean": float(np.mean(self.rotation_deg)),
            "R_d_median": float(np.median(self.rotation_deg)),
            "center_mean": float(np.mean(self.center_error)),
            "center_median": float(np.median(self.center_error)),
            "relative_center_max": float(np.max(self.relative_center_error)),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "view": self.views,
            "R_f": self.rotation_frobenius,
            "R_d": self.rotation_deg,
            "center_error": self.center_error,
            "relative_center_error": self.relative_center_error,
        })


def extract_triplet_poses(
    E9: Union[np.ndarray, MultiviewEssential],
    views: Sequence[int],
    index: int = 0,
    accept_tol: Optional[float] = None,
    tol: Optional[ToleranceConfig] = None,
) -> TripletPoses:
    """Poses of one triplet in a local frame.

    The per-view scales cbrt(det V_i) are divided out first, so scaled
    consistency is enough. `accept_tol=None` projects to the nearest block
    rotation structure without rejecting.
    """
    E = E9 if isinstance(E9, MultiviewEssential) else MultiviewEssential.from_dense(E9)
    tol = tol or ToleranceConfig()
    E = remove_block_scales(E, gap=tol.eigen_gap)
    poses = recover_poses(E, mode="scaled", tol=tol,
                          accept_tol=float("inf") if accept_tol is None else accept_tol)
    return TripletPoses(index, tuple(sorted(views)), poses)


def _pose_gap(a: CameraPose, b: CameraPose, scale: float) -> float:
    return max(float(np.linalg.norm(a.rotation - b.rotation)),
               float(np.linalg.norm(a.center - b.center)) / scale)


def _spread(centers: np.ndarray) -> float:
    centered = centers - centers.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(centered ** 2, axis=1)))) or 1.0


def stitch(
    cover: TripletCover,
    triplet_poses: Union[Sequence[TripletPoses], Mapping[int, TripletPoses]],
    anchor: Optional[int] = None,
    n: Optional[int] = None,
    skip_mismatches: bool = False,
) -> GlobalReconstruction:
    """Breadth-first registration of all triplets into the anchor's frame.

    Each newly reached triplet is mapped by the similarity taking its two
    shared cameras onto the parent's registered copies. The first pose a
    view receives is kept. A shared pair whose rotations disagree raises
    ConfigurationMismatchError, or with `skip_mismatches` leaves the triplet
    to be reached from another neighbor.
    """
    if not isinstance(triplet_poses, Mapping):
        triplet_poses = {tp.index: tp for tp in triplet_poses}
    available = sorted(triplet_poses)
    if not available:
        raise InsufficientOverlapError("no triplet poses to stitch")
    if anchor is None:
        anchor = min(available, key=lambda k: (cover.triplets[k].rotation, k))
    n = n if n is not None else max(cover.covered_views) + 1

    graph = cover.graph().subgraph(available)
    transforms: Dict[int, Similarity] = {anchor: Similarity.identity()}
    mapped: Dict[int, Dict[int, CameraPose]] = {
        anchor: dict(zip(triplet_poses[anchor].views, triplet_poses[anchor].poses))
    }
    poses: List[Optional[CameraPose]] = [None] * n
    for v, p in mapped[anchor].items():
        poses[v] = p

    queue = deque([anchor])
    while queue:
        a = queue.popleft()
        for b in sorted(graph.neighbors(a)):
            if b in transforms:
                continue
            u, v = cover.shared_views(a, b)
            local = triplet_poses[b]
            try:
                S = _similarity_between(local, mapped[a], u, v)
            except InconsistentPairError as exc:
                edge = (min(a, b), max(a, b))
                if not skip_mismatches:
                    raise ConfigurationMismatchError(f"triplets {edge} disagree on views ({u}, {v}): {exc}", edge) from exc
                logger.debug(f"skipping edge {edge}: {exc}")
                continue
            transforms[b] = S
            mapped[b] = {view: apply_similarity(S, p) for view, p in zip(local.views, local.poses)}
            for view, p in mapped[b].items():
                if poses[view] is None:
                    poses[view] = p
            queue.append(b)

    missing = set(available) - set(transforms)
    if missing:
        logger.warning(f"{len(missing)} triplets could not be registered")

    centers = np.array([p.center for p in poses if p is not None])
    scale = _spread(centers)
    residuals = {}
    for a, b in cover.triplet_edges:
        if a in mapped and b in mapped:
            shared = cover.shared_views(a, b)
            residuals[(a, b)] = max(_pose_gap(mapped[a][s], mapped[b][s], scale) for s in shared)
    return GlobalReconstruction(poses, anchor, residuals, transforms)


def _similarity_between(local: TripletPoses, parent: Mapping[int, CameraPose], u: int, v: int) -> Similarity:
    return similarity_from_two_pose_pairs(
        [local.pose_of(u), local.pose_of(v)],
        [parent[u], parent[v]],
        tol=MISMATCH_TOL,
    )


def _poses_list(est) -> List[Optional[CameraPose]]:
    return est.poses if isinstance(est, GlobalReconstruction) else list(est)


def _is_collinear(centers: np.ndarray) -> bool:
    S = np.linalg.svd(centers - centers.mean(axis=0), compute_uv=False)
    return S[0] == 0 or S[1] <= 1e-9 * S[0]


def align_to_reference(
    est: Union[GlobalReconstruction, Sequence[Optional[CameraPose]]],
    ref: Sequence[Optional[CameraPose]],
    rotation_source: str = "centers",
) -> Alignment:
    """Fit the similarity taking the estimate onto the reference and report errors.

    `rotation_source="centers"` takes the rotation from an orthogonal
    Procrustes fit of the centered camera centers (a reflection there means
    a negative scale); `"rotations"` uses the chordal mean of the per-view
    relative rotations instead. The scale is signed in both cases.
    """
    est_poses = _poses_list(est)
    views = [v for v in range(min(len(est_poses), len(ref))) if est_poses[v] is not None and ref[v] is not None]
    if len(views) < 3:
        raise InsufficientOverlapError(f"only {len(views)} common views")
    c_est = np.array([est_poses[v].center for v in views])
    c_ref = np.array([ref[v].center for v in views])
    if _is_collinear(c_est) or _is_collinear(c_ref):
        raise InsufficientOverlapError("common view centers are collinear")

    mu_est, mu_ref = c_est.mean(axis=0), c_ref.mean(axis=0)
    x, y = c_est - mu_est, c_ref - mu_ref
    if rotation_source == "centers":
        U, S, Vt = np.linalg.svd(y.T @ x)
        O = U @ Vt
        sign = 1.0
        if np.linalg.det(O) < 0:
            O, sign = -O, -1.0
        R = O
        scale = sign * float(np.sum(S) / np.sum(x ** 2))
    elif rotation_source == "rotations":
        R = chordal_mean([ref[v].rotation @ est_poses[v].rotation.T for v in views])
        scale = float(np.sum((x @ R.T) * y) / np.sum(x ** 2))
    else:
        raise ValueError(f"unknown rotation source {rotation_source!r}")
    similarity = Similarity(scale, R, mu_ref - scale * (R @ mu_est))

    spread = _spread(c_ref)
    r_f, r_d, c_err = [], [], []
    for v in views:
        aligned = apply_similarity(similarity, est_poses[v])
        r_f.append(float(np.linalg.norm(aligned.rotation - ref[v].rotation)))
        r_d.append(rotation_angle_deg(ref[v].rotation.T @ aligned.rotation))
        c_err.append(float(np.linalg.norm(aligned.center - ref[v].center)))
    c_err = np.array(c_err)
    return Alignment(similarity, views, np.array(r_f), np.array(r_d), c_err, c_err / spread)


def _extract_all(
    E: MultiviewEssential,
    cover: TripletCover,
    accept_tol: Optional[float],
    tol: Optional[ToleranceConfig],
    threads: Optional[int],
    skip_failures: bool,
) -> Tuple[Dict[int, TripletPoses], int]:
    def extract(index):
        views = cover.triplets[index].views
        try:
            return extract_triplet_poses(E.triplet_block(views), views, index, accept_tol, tol)
        except AveragingError as exc:
            if not skip_failures:
                raise
            logger.debug(f"triplet {views} not recovered: {exc}")
            return None

    results = parallel_map(extract, range(len(cover.triplets)), threads)
    found = {k: r for k, r in enumerate(results) if r is not None}
    return found, len(results) - len(found)


def reconstruct(
    E_solved: MultiviewEssential,
    cover: TripletCover,
    accept_tol: Optional[float] = None,
    tol: Optional[ToleranceConfig] = None,
    threads: Optional[int] = None,
) -> GlobalReconstruction:
    """extract_triplet_poses on every cover triplet, then stitch."""
    poses, _ = _extract_all(E_solved, cover, accept_tol, tol, threads, skip_failures=False)
    return stitch(cover, poses, n=E_solved.n)


def naive_triplet_poses(
    E_hat: MultiviewEssential,
    cover: TripletCover,
    tol: Optional[ToleranceConfig] = None,
    threads: Optional[int] = None,
) -> Tuple[GlobalReconstruction, int]:
    """Baseline without averaging: each triplet recovered from its raw,
    normalized and essential-projected measurements, then stitched.

    Returns the reconstruction and the number of triplets skipped.
    """
    cleaned = MultiviewEssential(E_hat.n, {
        k: project_to_essential(M / np.linalg.norm(M)) for k, M in E_hat.items()
    })
    poses, skipped = _extract_all(cleaned, cover, None, tol, threads, skip_failures=True)
    if not poses:
        raise InsufficientOverlapError("no triplet could be recovered from raw measurements")
    return stitch(cover, poses, n=E_hat.n, skip_mismatches=True), skipped
