"""n-view essential matrices: construction, spectral consistency checks,
Euclidean pose recovery and the fundamental-but-not-essential counter-example.

A multiview essential matrix is the 3n x 3n symmetric block matrix whose
(i, j) block is E_ij, with zero diagonal blocks. It is consistent when its
blocks come from one set of camera poses. Consistency is decided on the
thin spectral decomposition E = X S+ X^T + Y S- Y^T: the positive and
negative eigenvalues must pair up (S+ = -S-) and for some choice of
eigenvector signs I_s the matrix sqrt(0.5) (X + Y I_s) must be a block
(scaled) rotation matrix.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from averaging.config import ToleranceConfig
from averaging.errors import (
    CollinearDegenerateError,
    EigenvalueMultiplicityError,
    IncompleteMatrixError,
    InvalidEssentialError,
    NoValidSignError,
    PairingError,
    RetrySampling,
    SingularInputError,
)
from averaging.geom import (
    CameraPose,
    decompose_essential,
    is_essential,
    project_to_rotation,
    random_rotation,
    relative_essential,
    scaled_rotation,
    skew,
)
from averaging.resilience import resample

logger = logging.getLogger(__name__)

SQRT_HALF = np.sqrt(0.5)

Pair = Tuple[int, int]


def _pair(i: int, j: int) -> Pair:
    return (i, j) if i < j else (j, i)


class MultiviewEssential:
    """Symmetric block matrix of pairwise essential matrices with a mask.

    Blocks are stored for i < j; block(j, i) is the transpose and the
    diagonal blocks are zero. Unobserved blocks are absent (None).
    """

    def __init__(
        self,
        n: int,
        blocks: Mapping[Pair, np.ndarray],
        validate: bool = False,
        tol: float = 1e-6,
    ):
        if n < 2:
            raise ValueError("a multiview matrix needs at least two views")
        self.n = n
        self._blocks: Dict[Pair, np.ndarray] = {}
        for (i, j), M in blocks.items():
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"invalid block index ({i}, {j}) for n={n}")
            M = np.array(M, dtype=float).reshape(3, 3)
            if i > j:
                i, j, M = j, i, M.T
            if validate and not is_essential(M, tol):
                raise InvalidEssentialError(f"block ({i}, {j}) is not an essential matrix")
            self._blocks[(i, j)] = M

    @property
    def mask(self) -> FrozenSet[Pair]:
        return frozenset(self._blocks)

    @property
    def observed_pairs(self) -> List[Pair]:
        return sorted(self._blocks)

    @property
    def is_complete(self) -> bool:
        return len(self._blocks) == self.n * (self.n - 1) // 2

    def items(self) -> Iterable[Tuple[Pair, np.ndarray]]:
        for key in sorted(self._blocks):
            yield key, self._blocks[key]

    def block(self, i: int, j: int) -> Optional[np.ndarray]:
        if i == j:
            return np.zeros((3, 3))
        if i < j:
            return self._blocks.get((i, j))
        M = self._blocks.get((j, i))
        return None if M is None else M.T

    def dense(self) -> np.ndarray:
        """3n x 3n matrix with zeros in unobserved blocks."""
        out = np.zeros((3 * self.n, 3 * self.n))
        for (i, j), M in self._blocks.items():
            out[3 * i:3 * i + 3, 3 * j:3 * j + 3] = M
            out[3 * j:3 * j + 3, 3 * i:3 * i + 3] = M.T
        return out

    def triplet_block(self, views: Sequence[int]) -> np.ndarray:
        """Principal submatrix for the given views (9 x 9 for a triplet)."""
        k = len(views)
        out = np.zeros((3 * k, 3 * k))
        for a, b in itertools.combinations(range(k), 2):
            M = self.block(views[a], views[b])
            if M is None:
                raise IncompleteMatrixError(f"block ({views[a]}, {views[b]}) is not observed")
            out[3 * a:3 * a + 3, 3 * b:3 * b + 3] = M
            out[3 * b:3 * b + 3, 3 * a:3 * a + 3] = M.T
        return out

    def with_blocks(self, updates: Mapping[Pair, np.ndarray]) -> "MultiviewEssential":
        merged = dict(self._blocks)
        for (i, j), M in updates.items():
            M = np.asarray(M, dtype=float)
            merged[_pair(i, j)] = M if i < j else M.T
        return MultiviewEssential(self.n, merged)

    @classmethod
    def from_dense(cls, M: np.ndarray, mask: Optional[Iterable[Pair]] = None) -> "MultiviewEssential":
        M = np.asarray(M, dtype=float)
        n = M.shape[0] // 3
        pairs = itertools.combinations(range(n), 2) if mask is None else (_pair(*p) for p in mask)
        return cls(n, {(i, j): M[3 * i:3 * i + 3, 3 * j:3 * j + 3] for i, j in pairs})

    def __repr__(self) -> str:
        return f"MultiviewEssential(n={self.n}, observed={len(self._blocks)})"


@dataclass(frozen=True)
class SpectralForm:
    """Thin spectral decomposition [X, Y] diag(S+, S-) [X, Y]^T."""
    X: np.ndarray
    Y: np.ndarray
    sigma_plus: np.ndarray
    sigma_minus: np.ndarray

    def reassemble(self) -> np.ndarray:
        return (self.X * self.sigma_plus) @ self.X.T + (self.Y * self.sigma_minus) @ self.Y.T

    def with_column_signs(self, x_signs: Sequence[float], y_signs: Sequence[float]) -> "SpectralForm":
        return SpectralForm(self.X * np.asarray(x_signs), self.Y * np.asarray(y_signs),
                            self.sigma_plus, self.sigma_minus)


@dataclass(frozen=True)
class SvdForm:
    """Thin SVD of the form [U, V] diag(S, S) [V, U]^T."""
    U_hat: np.ndarray
    V_hat: np.ndarray
    sigma: np.ndarray

    def reassemble(self) -> np.ndarray:
        A = (self.U_hat * self.sigma) @ self.V_hat.T
        return A + A.T


@dataclass(frozen=True)
class SignConfiguration:
    """Diagonal sign matrix I_s applied to the negative eigenvectors."""
    signs: Tuple[int, int, int]

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(np.asarray(self.signs, dtype=float))

    @classmethod
    def all(cls) -> List["SignConfiguration"]:
        return [cls(s) for s in itertools.product((1, -1), repeat=3)]


@dataclass
class FundamentalReport:
    """Rank and inertia conditions of a consistent n-view fundamental matrix."""
    ok: bool
    rank_residual: float
    rank_margin: float
    positive_count: int
    negative_count: int
    row_rank_margins: List[float] = field(default_factory=list)
    block_rank_ok: bool = True


@dataclass
class ConsistencyReport:
    fundamental_ok: bool
    fundamental: FundamentalReport
    essential_ok: bool
    eigenvalue_pairing_residual: float
    block_rotation_residual: float
    best_sign: SignConfiguration
    mode: str = "scaled"
    best_score: float = 0.0


# Construction

def build_from_poses(poses: Sequence[CameraPose], mask: Optional[Iterable[Pair]] = None) -> MultiviewEssential:
    """Multiview matrix with E_ij = R_i^T ([t_i]x - [t_j]x) R_j on the mask."""
    n = len(poses)
    if n < 2:
        raise ValueError("need at least two poses")
    pairs = itertools.combinations(range(n), 2) if mask is None else sorted(_pair(*p) for p in mask)
    return MultiviewEssential(n, {(i, j): relative_essential(poses[i], poses[j]) for i, j in pairs})


def normalize_blocks(E: MultiviewEssential) -> MultiviewEssential:
    """Scale each observed block to unit Frobenius norm."""
    return MultiviewEssential(E.n, {k: M / np.linalg.norm(M) for k, M in E.items()})


def rescale_pairs(E: MultiviewEssential, scales: Mapping[Pair, float]) -> MultiviewEssential:
    return MultiviewEssential(E.n, {k: M * scales.get(k, 1.0) for k, M in E.items()})


def congruence_scale(E: MultiviewEssential, alphas: Sequence[float]) -> MultiviewEssential:
    """diag(a_i I) E diag(a_i I): block (i, j) scaled by a_i a_j."""
    return MultiviewEssential(E.n, {(i, j): alphas[i] * alphas[j] * M for (i, j), M in E.items()})


# Spectral machinery

def spectral_decompose(M: np.ndarray, check_distinct: bool = False, gap: float = 1e-6) -> SpectralForm:
    """Three largest (descending) and three smallest (ascending) eigenpairs."""
    M = np.asarray(M, dtype=float)
    w, Q = np.linalg.eigh(0.5 * (M + M.T))
    if check_distinct:
        _check_distinct(w, gap)
    return SpectralForm(
        X=Q[:, ::-1][:, :3].copy(),
        Y=Q[:, :3].copy(),
        sigma_plus=w[::-1][:3].copy(),
        sigma_minus=w[:3].copy(),
    )


def _check_distinct(w: np.ndarray, gap: float) -> None:
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    if scale == 0:
        raise EigenvalueMultiplicityError("matrix is zero")
    six = np.concatenate([w[:3], w[-3:]])
    values = np.sort(np.append(six, 0.0))
    gaps = np.diff(values)
    if np.min(gaps) <= gap * scale:
        raise EigenvalueMultiplicityError(
            f"nonzero eigenvalues not distinct (min gap {np.min(gaps):.3e}, scale {scale:.3e})"
        )


def svd_to_spectral(f: SvdForm, tol: float = 1e-8) -> SpectralForm:
    """X = sqrt(.5)(U + V), Y = sqrt(.5)(V - U), S- = -S."""
    W = np.hstack([f.U_hat, f.V_hat])
    if np.linalg.norm(W.T @ W - np.eye(W.shape[1])) > tol:
        raise PairingError("[U, V] does not have orthonormal columns")
    return SpectralForm(
        X=SQRT_HALF * (f.U_hat + f.V_hat),
        Y=SQRT_HALF * (f.V_hat - f.U_hat),
        sigma_plus=np.asarray(f.sigma, dtype=float).copy(),
        sigma_minus=-np.asarray(f.sigma, dtype=float),
    )


def spectral_to_svd(s: SpectralForm, tol: float = 1e-8) -> SvdForm:
    """Inverse of svd_to_spectral; requires S+ = -S-."""
    scale = max(float(np.max(np.abs(s.sigma_plus))), float(np.max(np.abs(s.sigma_minus))), 1e-300)
    residual = float(np.max(np.abs(s.sigma_plus + s.sigma_minus)))
    if residual > tol * scale or np.any(s.sigma_plus <= 0):
        raise PairingError(f"eigenvalues do not pair (residual {residual:.3e})")
    return SvdForm(
        U_hat=SQRT_HALF * (s.X - s.Y),
        V_hat=SQRT_HALF * (s.X + s.Y),
        sigma=0.5 * (s.sigma_plus - s.sigma_minus),
    )


def _blocks_of(V: np.ndarray) -> List[np.ndarray]:
    return [V[3 * i:3 * i + 3] for i in range(V.shape[0] // 3)]


def block_rotation_score(X: np.ndarray, Y: np.ndarray, s: SignConfiguration) -> float:
    """Sum over blocks of |diag(G)|_2 / |G|_F with G the Gram of (X + Y I_s)_i."""
    score = 0.0
    for B in _blocks_of(X + Y * np.asarray(s.signs, dtype=float)):
        G = B.T @ B
        denom = np.linalg.norm(G)
        if denom > 0:
            score += float(np.linalg.norm(np.diag(G)) / denom)
    return score


def scaled_block_residual(V: np.ndarray) -> float:
    """Max over blocks of |G / mean(diag G) - I|_F."""
    worst = 0.0
    for B in _blocks_of(V):
        G = B.T @ B
        m = np.trace(G) / 3.0
        if m <= 0:
            return float("inf")
        worst = max(worst, float(np.linalg.norm(G / m - np.eye(3))))
    return worst


def strict_block_residual(V: np.ndarray) -> float:
    """Max distance of sqrt(n) V_i from SO(3) after removing the global sign."""
    n = V.shape[0] // 3
    if np.linalg.det(V[:3]) < 0:
        V = -V
    worst = 0.0
    for B in _blocks_of(np.sqrt(n) * V):
        worst = max(worst, float(np.linalg.norm(B - project_to_rotation(B))))
    return worst


def _best_sign(form: SpectralForm, mode: str) -> Tuple[SignConfiguration, float]:
    residual_fn = strict_block_residual if mode == "strict" else scaled_block_residual
    best, best_residual = None, float("inf")
    for s in SignConfiguration.all():
        r = residual_fn(SQRT_HALF * (form.X + form.Y * np.asarray(s.signs, dtype=float)))
        if r < best_residual:
            best, best_residual = s, r
    return best, best_residual


# Checkers

def check_fundamental_consistency(E: MultiviewEssential, tol: Optional[ToleranceConfig] = None) -> FundamentalReport:
    """Rank-6, inertia (3+, 3-), full row-rank block rows, rank-2 blocks."""
    tol = tol or ToleranceConfig()
    if not E.is_complete:
        raise IncompleteMatrixError("fundamental check needs every block")
    M = E.dense()
    S = np.linalg.svd(M, compute_uv=False)
    if S[0] == 0:
        return FundamentalReport(False, 0.0, 0.0, 0, 0, [0.0] * E.n, False)
    rank_residual = float(S[6] / S[0]) if S.size > 6 else 0.0
    rank_margin = float(S[5] / S[0]) if S.size > 5 else 0.0

    w = np.linalg.eigvalsh(M)
    cut = tol.fundamental_rank_tol * np.max(np.abs(w))
    positive = int(np.sum(w > cut))
    negative = int(np.sum(w < -cut))

    row_margins = []
    for i in range(E.n):
        sv = np.linalg.svd(M[3 * i:3 * i + 3], compute_uv=False)
        row_margins.append(float(sv[2] / sv[0]) if sv[0] > 0 else 0.0)

    block_rank_ok = True
    for _, B in E.items():
        sv = np.linalg.svd(B, compute_uv=False)
        if sv[0] == 0 or sv[2] > tol.essential_tol * sv[0] or sv[1] <= tol.essential_tol * sv[0]:
            block_rank_ok = False
            break

    ok = (
        rank_residual <= tol.fundamental_rank_tol
        and rank_margin > tol.fundamental_rank_tol
        and positive == 3 and negative == 3
        and min(row_margins) > tol.fundamental_rank_tol
        and block_rank_ok
    )
    return FundamentalReport(ok, rank_residual, rank_margin, positive, negative, row_margins, block_rank_ok)


def check_essential_consistency(
    E: MultiviewEssential,
    mode: str = "scaled",
    tol: Optional[ToleranceConfig] = None,
) -> ConsistencyReport:
    """Spectral consistency test over all eight sign configurations.

    `mode="strict"` requires every block of sqrt(.5)(X + Y I_s) to be a
    rotation scaled by the common 1/sqrt(n); `mode="scaled"` accepts a
    separate nonzero scale per block. Residuals are relative to the largest
    eigenvalue magnitude.
    """
    if mode not in ("strict", "scaled"):
        raise ValueError(f"unknown mode {mode!r}")
    tol = tol or ToleranceConfig()
    fundamental = check_fundamental_consistency(E, tol)
    form = spectral_decompose(E.dense(), check_distinct=True, gap=tol.eigen_gap)

    scale = max(float(np.max(np.abs(form.sigma_plus))), float(np.max(np.abs(form.sigma_minus))))
    pairing = float(np.max(np.abs(form.sigma_plus + form.sigma_minus))) / scale
    best, residual = _best_sign(form, mode)

    essential_ok = (
        fundamental.ok
        and pairing <= tol.pairing_tol
        and residual <= tol.block_rotation_tol
    )
    logger.debug(f"consistency ({mode}): pairing={pairing:.3e} block={residual:.3e} sign={best.signs}")
    return ConsistencyReport(
        fundamental_ok=fundamental.ok,
        fundamental=fundamental,
        essential_ok=essential_ok,
        eigenvalue_pairing_residual=pairing,
        block_rotation_residual=residual,
        best_sign=best,
        mode=mode,
        best_score=block_rotation_score(form.X, form.Y, best),
    )


# Recovery

def poses_from_spectral(
    form: SpectralForm,
    mode: str = "scaled",
    accept_tol: Optional[float] = 1e-6,
) -> List[CameraPose]:
    """Camera poses from a spectral form of a consistent matrix.

    Picks I_s, builds V = sqrt(.5)(X + Y I_s) and U = sqrt(.5)(X - Y I_s),
    factors every V_i as a_i Q_i with Q_i in SO(3) (a_i = cbrt(det V_i) in the
    noiseless case) and reads the centers from the skew matrices
    V_i^-1 U_i S. With `accept_tol=None` the best configuration is projected
    whatever its residual.
    """
    best, residual = _best_sign(form, mode)
    if accept_tol is not None and residual > accept_tol:
        raise NoValidSignError(f"no sign configuration gives a block rotation (best residual {residual:.3e})")

    signs = np.asarray(best.signs, dtype=float)
    V = SQRT_HALF * (form.X + form.Y * signs)
    U = SQRT_HALF * (form.X - form.Y * signs)
    if mode == "strict" and np.linalg.det(V[:3]) < 0:
        V, U = -V, -U
    sigma = 0.5 * (form.sigma_plus - form.sigma_minus)

    rotations, scales, t_hat = [], [], []
    for Vi, Ui in zip(_blocks_of(V), _blocks_of(U)):
        Q, beta = scaled_rotation(Vi)
        T = (Q.T @ (Ui * sigma)) / beta
        A = 0.5 * (T - T.T)
        rotations.append(Q.T)
        scales.append(beta)
        t_hat.append(np.array([A[2, 1], A[0, 2], A[1, 0]]))

    c = float(np.mean(np.square(scales)))
    return [CameraPose(R, c * t) for R, t in zip(rotations, t_hat)]


def recover_poses(
    E: MultiviewEssential,
    mode: str = "scaled",
    tol: Optional[ToleranceConfig] = None,
    accept_tol: Optional[float] = None,
) -> List[CameraPose]:
    """Euclidean reconstruction of a consistent, fully observed matrix.

    The result reproduces E up to one global similarity (strict mode: up to
    one global scale) and, in scaled mode, per-pair scales.
    """
    tol = tol or ToleranceConfig()
    if not E.is_complete:
        raise IncompleteMatrixError("pose recovery needs every block")
    M = E.dense()
    _require_rank_six(M, tol.eigen_gap)
    form = spectral_decompose(M, check_distinct=True, gap=tol.eigen_gap)
    return poses_from_spectral(form, mode, tol.block_rotation_tol if accept_tol is None else accept_tol)


def _require_rank_six(M: np.ndarray, gap: float) -> None:
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    magnitudes = np.sort(np.abs(w))[::-1]
    if magnitudes[0] == 0 or magnitudes[5] <= gap * magnitudes[0]:
        raise CollinearDegenerateError("matrix rank below 6 (collinear or coincident centers)")


def remove_block_scales(E: MultiviewEssential, mode: str = "scaled", gap: float = 1e-6) -> MultiviewEssential:
    """diag(1/a_i) E diag(1/a_i) with a_i = cbrt(det V_i); consistent if E is scaled-consistent."""
    M = E.dense()
    _require_rank_six(M, gap)
    form = spectral_decompose(M, check_distinct=True, gap=gap)
    best, _ = _best_sign(form, mode)
    V = SQRT_HALF * (form.X + form.Y * np.asarray(best.signs, dtype=float))
    alphas = [float(np.cbrt(np.linalg.det(B))) for B in _blocks_of(V)]
    if min(abs(a) for a in alphas) == 0:
        raise SingularInputError("a block of V is singular")
    return congruence_scale(E, [1.0 / a for a in alphas])


def relative_rotation_loops(E: MultiviewEssential) -> List[float]:
    """|R12 R23 R31 - I|_F for the 8 combinations of block decompositions."""
    if E.n != 3 or not E.is_complete:
        raise IncompleteMatrixError("loop residuals need a complete 3-view matrix")
    r12 = [c.rotation for c in decompose_essential(E.block(0, 1))]
    r23 = [c.rotation for c in decompose_essential(E.block(1, 2))]
    r13 = [c.rotation for c in decompose_essential(E.block(0, 2))]
    return [float(np.linalg.norm(a @ b @ c.T - np.eye(3))) for a, b, c in itertools.product(r12, r23, r13)]


# Counter-example

@resample(max_attempts=100)
def _draw_counterexample(rng: np.random.Generator, tol: ToleranceConfig) -> Tuple[MultiviewEssential, ConsistencyReport]:
    R_star = random_rotation(rng)
    R_2star = random_rotation(rng)
    U, S, Vt = np.linalg.svd(R_star - R_2star)
    if S[2] > 1e-9 * S[0] or S[1] <= 1e-9 * S[0]:
        raise RetrySampling("R* - R** is not of rank 2")
    R2 = random_rotation(rng)
    R3 = R_2star

    t3 = U[:, 0] * S[0]
    t2 = t3 - U[:, 1] * S[1]
    # With a = v1, b = v2: R3 + t3 a^T + (t3 - t2) b^T == R*, so the camera-3
    # block V3 = R3^T + a t3^T turns F13 into [-t3]x R3 and F23 into R2^T [t2 - t3]x R*.
    E = MultiviewEssential(3, {
        (0, 1): skew(-t2) @ R2,
        (0, 2): skew(-t3) @ R3,
        (1, 2): R2.T @ skew(t2 - t3) @ R_star,
    })
    try:
        report = check_essential_consistency(E, "scaled", tol)
    except EigenvalueMultiplicityError as exc:
        raise RetrySampling(str(exc)) from exc
    if min(relative_rotation_loops(E)) <= 0.1:
        raise RetrySampling("a relative rotation loop nearly closes")
    if not report.fundamental_ok or report.essential_ok or report.block_rotation_residual <= 0.05:
        raise RetrySampling("draw does not separate fundamental from essential consistency")
    return E, report


def generate_counterexample(seed: int, tol: Optional[ToleranceConfig] = None) -> Tuple[MultiviewEssential, ConsistencyReport]:
    """Consistent 3-view fundamental matrix of essential blocks that is not
    a consistent essential matrix."""
    rng = np.random.default_rng(seed)
    return _draw_counterexample(rng, tol or ToleranceConfig())
