"""Scalar-level 3D geometry: skew operators, SO(3) projections, relative
pose/essential conversions and similarity transforms.

Conventions: a camera with orientation R and center t maps a world point X
to R^T (X - t). The relative essential matrix of cameras a, b is
R_a^T ([t_a]x - [t_b]x) R_b. A similarity S(s, R, t) maps world points by
X -> s R X + t, hence poses by (R_p, t_p) -> (R R_p, s R t_p + t).
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from averaging.errors import (
    AsymmetryError,
    SingularInputError,
    CoincidentCentersError,
    DegenerateEssentialError,
    InconsistentPairError,
    CollinearDegenerateError,
)

ORTHOGONALITY_TOL = 1e-8

# Pi/2 rotation about z used by the essential decomposition
_W = np.array([
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
])


@dataclass(frozen=True)
class CameraPose:
    """Camera orientation R in SO(3) and center t in world units."""
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))

    def validate(self, tol: float = ORTHOGONALITY_TOL) -> "CameraPose":
        if not is_rotation(self.rotation, tol):
            raise ValueError("pose rotation is not in SO(3)")
        return self


@dataclass(frozen=True)
class Similarity:
    """Scale, rotation and translation; the scale may be negative but not zero."""
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale == 0:
            raise ValueError("similarity scale must be nonzero")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(1.0, np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class RelativeConfiguration:
    """One decomposition of an essential matrix: E ~ [direction]x rotation."""
    rotation: np.ndarray
    direction: np.ndarray

    def poses(self) -> Tuple[CameraPose, CameraPose]:
        """Pose pair (identity at origin, second camera) reproducing the block."""
        return CameraPose(np.eye(3), np.zeros(3)), CameraPose(self.rotation, -self.direction)


def skew(v: Sequence[float]) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def unskew(M: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Vector of the antisymmetric part of M."""
    M = np.asarray(M, dtype=float)
    if np.linalg.norm(M + M.T) > tol * max(1.0, np.linalg.norm(M)):
        raise AsymmetryError(f"matrix is not antisymmetric (|M+M^T|={np.linalg.norm(M + M.T):.3e})")
    A = 0.5 * (M - M.T)
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


def is_rotation(R: np.ndarray, tol: float = ORTHOGONALITY_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.linalg.norm(R.T @ R - np.eye(3)) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest SO(3) matrix in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def scaled_rotation(M: np.ndarray) -> Tuple[np.ndarray, float]:
    """Closest scale * rotation to M; no singularity check.

    The scale is the mean singular value, negated when the orthogonal
    polar factor is a reflection so that the returned rotation has det +1.
    """
    U, S, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    Q = U @ Vt
    scale = float(np.mean(S))
    if np.linalg.det(Q) < 0:
        return -Q, -scale
    return Q, scale


def project_to_scaled_rotation(M: np.ndarray, tol: float = 1e-12) -> Tuple[np.ndarray, float]:
    """(R, scale) with scale * R the closest scaled rotation to M."""
    S = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if S[-1] < tol:
        raise SingularInputError(f"smallest singular value {S[-1]:.3e} below {tol:.1e}")
    return scaled_rotation(M)


def chordal_mean(rotations: Sequence[np.ndarray]) -> np.ndarray:
    return project_to_rotation(np.mean(np.asarray(rotations, dtype=float), axis=0))


def rotation_angle_deg(R: np.ndarray) -> float:
    """Rotation angle in degrees (stable for tiny angles)."""
    chord = np.linalg.norm(np.asarray(R, dtype=float) - np.eye(3)) / (2.0 * np.sqrt(2.0))
    return float(np.degrees(2.0 * np.arcsin(min(1.0, chord))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation; deterministic for a seeded generator."""
    return ScipyRotation.random(None, rng).as_matrix()


def axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float).reshape(3)
    norm = np.linalg.norm(axis)
    if norm == 0:
        return np.eye(3)
    return ScipyRotation.from_rotvec(axis / norm * angle).as_matrix()


def is_essential(M: np.ndarray, tol: float = 1e-6) -> bool:
    """Rank 2 with equal nonzero singular values, relative to the largest."""
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3) or not np.all(np.isfinite(M)):
        return False
    S = np.linalg.svd(M, compute_uv=False)
    if S[0] <= 0:
        return False
    return S[2] <= tol * S[0] and (S[0] - S[1]) <= tol * S[0]


def project_to_essential(M: np.ndarray) -> np.ndarray:
    """Replace the singular values by (s, s, 0) with s the mean of the top two."""
    U, S, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    s = 0.5 * (S[0] + S[1])
    return U @ np.diag([s, s, 0.0]) @ Vt


def relative_essential(a: CameraPose, b: CameraPose, tol: float = 1e-12) -> np.ndarray:
    """E_ab = R_a^T ([t_a]x - [t_b]x) R_b."""
    d = a.center - b.center
    if np.linalg.norm(d) <= tol:
        raise CoincidentCentersError("relative essential of coincident centers")
    return a.rotation.T @ skew(d) @ b.rotation


def decompose_essential(E: np.ndarray, tol: float = 1e-6) -> List[RelativeConfiguration]:
    """The two relative configurations reproducing E with its sign fixed.

    Each configuration (R, u) satisfies E = |E|_F / sqrt(2) * [u]x R with
    unit u. Output is ordered lexicographically by rotation entries; callers
    should treat it as an unordered pair.
    """
    E = np.asarray(E, dtype=float)
    U, S, Vt = np.linalg.svd(E)
    if S[0] <= 0 or S[2] > tol * S[0] or (S[0] - S[1]) > tol * S[0]:
        raise DegenerateEssentialError(f"singular values {S} are not (s, s, 0)")
    if np.linalg.det(U) < 0:
        U[:, 2] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[2, :] *= -1
    u = U[:, 2]

    configs = []
    for R in (U @ _W @ Vt, U @ _W.T @ Vt):
        sign = np.sign(np.sum(E * (skew(u) @ R))) or 1.0
        configs.append(RelativeConfiguration(R, sign * u))
    configs.sort(key=lambda c: tuple(np.round(c.rotation.ravel(), 12)))
    return configs


def apply_similarity(S: Similarity, p: CameraPose) -> CameraPose:
    return CameraPose(S.rotation @ p.rotation, S.scale * (S.rotation @ p.center) + S.translation)


def invert_similarity(S: Similarity) -> Similarity:
    Rt = S.rotation.T
    return Similarity(1.0 / S.scale, Rt, -(Rt @ S.translation) / S.scale)


def compose_similarity(outer: Similarity, inner: Similarity) -> Similarity:
    """outer after inner."""
    return Similarity(
        outer.scale * inner.scale,
        outer.rotation @ inner.rotation,
        outer.scale * (outer.rotation @ inner.translation) + outer.translation,
    )


def similarity_from_two_pose_pairs(
    src: Sequence[CameraPose],
    dst: Sequence[CameraPose],
    tol: float = 1e-6,
) -> Similarity:
    """Similarity S with apply_similarity(S, src[k]) ~ dst[k] for k = 0, 1.

    The rotation is the chordal mean of the two per-camera estimates, which
    must agree within `tol` (Frobenius). The scale is signed: a negative
    value means the baseline direction flips.
    """
    gap_src = src[1].center - src[0].center
    gap_dst = dst[1].center - dst[0].center
    if np.linalg.norm(gap_src) <= 1e-12 or np.linalg.norm(gap_dst) <= 1e-12:
        raise CollinearDegenerateError("shared cameras have coincident centers")

    estimates = [d.rotation @ s.rotation.T for s, d in zip(src, dst)]
    disagreement = np.linalg.norm(estimates[0] - estimates[1])
    if disagreement > tol:
        raise InconsistentPairError(f"pose pairs disagree on rotation by {disagreement:.3e}")
    R = chordal_mean(estimates)

    scale = float(np.dot(R @ gap_src, gap_dst) / np.dot(gap_src, gap_src))
    if scale == 0:
        raise CollinearDegenerateError("baselines are orthogonal after rotation")
    src_mid = 0.5 * (src[0].center + src[1].center)
    dst_mid = 0.5 * (dst[0].center + dst[1].center)
    return Similarity(scale, R, dst_mid - scale * (R @ src_mid))
