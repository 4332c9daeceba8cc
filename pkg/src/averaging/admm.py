"""ADMM averaging of measured essential matrices.

Minimizes the squared distance between E and the measurements over the
observed pattern, subject to every cover triplet's 9x9 submatrix being a
consistent 3-view essential matrix. Two auxiliary copies per triplet carry
the constraints: B_k (paired spectrum, rank 6) and D_k (block rotation
structure), tied to E by the multipliers Gamma_k and Phi_k:

    L = |P(E - E_hat)|^2 + sum_k a1/2 |B_k - E_k + Gamma_k|^2
                         + sum_k a2/2 |D_k - E_k + Phi_k|^2

where E_k is triplet k's submatrix of E and P keeps observed blocks.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from averaging.config import AdmmConfig, ToleranceConfig, get_config, parallel_map
from averaging.cover import Triplet, TripletCover
from averaging.errors import EigenvalueMultiplicityError, IncompleteMatrixError, NotConvergedError
from averaging.geom import project_to_essential
from averaging.nview import (
    SQRT_HALF,
    MultiviewEssential,
    SignConfiguration,
    normalize_blocks,
)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iteration", "objective", "primal_B", "primal_D", "relative_change", "skipped"]

Views = Tuple[int, int, int]


def _triplet_views(cover: Union[TripletCover, Sequence]) -> List[Views]:
    items = cover.triplets if isinstance(cover, TripletCover) else cover
    return [t.views if isinstance(t, Triplet) else tuple(sorted(t)) for t in items]


@dataclass
class AdmmState:
    E: MultiviewEssential
    triplets: List[Views]
    B: List[np.ndarray]
    D: List[np.ndarray]
    Gamma: List[np.ndarray]
    Phi: List[np.ndarray]
    iteration: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def initial(cls, E_hat: MultiviewEssential, cover: Union[TripletCover, Sequence]) -> "AdmmState":
        triplets = _triplet_views(cover)
        for views in triplets:
            for a, b in ((views[0], views[1]), (views[0], views[2]), (views[1], views[2])):
                if E_hat.block(a, b) is None:
                    raise IncompleteMatrixError(f"triplet {views} misses measurement ({a}, {b})")
        blocks = [E_hat.triplet_block(v) for v in triplets]
        return cls(
            E=E_hat,
            triplets=triplets,
            B=[M.copy() for M in blocks],
            D=[M.copy() for M in blocks],
            Gamma=[np.zeros((9, 9)) for _ in blocks],
            Phi=[np.zeros((9, 9)) for _ in blocks],
        )

    def trace(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=TRACE_COLUMNS)


def data_objective(E: MultiviewEssential, E_hat: MultiviewEssential, triplets: Sequence[Views]) -> float:
    """sum_k |E_k - E_hat_k|^2 over the cover triplets."""
    return float(sum(np.sum((E.triplet_block(v) - E_hat.triplet_block(v)) ** 2) for v in triplets))


def lagrangian(E: MultiviewEssential, E_hat: MultiviewEssential, state: AdmmState, cfg: AdmmConfig) -> float:
    value = 0.0
    for (i, j), M in E_hat.items():
        value += 2.0 * float(np.sum((E.block(i, j) - M) ** 2))
    for views, B, D, G, P in zip(state.triplets, state.B, state.D, state.Gamma, state.Phi):
        Ek = E.triplet_block(views)
        value += 0.5 * cfg.alpha1 * float(np.sum((B - Ek + G) ** 2))
        value += 0.5 * cfg.alpha2 * float(np.sum((D - Ek + P) ** 2))
    return value


def step_E(state: AdmmState, E_hat: MultiviewEssential, cfg: AdmmConfig, project: bool = True) -> MultiviewEssential:
    """Closed-form minimizer of L over E, then (s, s, 0) projection per block.

    For an observed block (i, j) covered by c triplets:
        E_ij = [2 E_hat_ij + a1 sum M_k + a2 sum N_k] / [2 + (a1 + a2) c]
    with M_k, N_k the symmetrized (i, j) blocks of B_k + Gamma_k, D_k + Phi_k.
    """
    num: Dict[Tuple[int, int], np.ndarray] = {}
    count: Dict[Tuple[int, int], int] = {}
    for views, B, D, G, P in zip(state.triplets, state.B, state.D, state.Gamma, state.Phi):
        BG, DP = B + G, D + P
        for a, b in ((0, 1), (0, 2), (1, 2)):
            key = (views[a], views[b])
            sa, sb = slice(3 * a, 3 * a + 3), slice(3 * b, 3 * b + 3)
            M = 0.5 * (BG[sa, sb] + BG[sb, sa].T)
            N = 0.5 * (DP[sa, sb] + DP[sb, sa].T)
            num[key] = num.get(key, 0.0) + cfg.alpha1 * M + cfg.alpha2 * N
            count[key] = count.get(key, 0) + 1

    def update(item):
        key, M_hat = item
        c = count.get(key, 0)
        block = (2.0 * M_hat + num.get(key, 0.0)) / (2.0 + (cfg.alpha1 + cfg.alpha2) * c)
        return key, project_to_essential(block) if project else block

    return MultiviewEssential(state.E.n, dict(parallel_map(update, list(E_hat.items()))))


def _sym_stack(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


# rows follow SignConfiguration.all()
SIGN_TABLE = np.array([s.signs for s in SignConfiguration.all()], dtype=float)


def project_B(E_blks: np.ndarray, Gamma_blks: np.ndarray) -> np.ndarray:
    """step_B over a stack of triplet blocks, shape (m, 9, 9)."""
    w, Q = np.linalg.eigh(_sym_stack(E_blks - Gamma_blks))
    w, Q = w[:, ::-1], Q[:, :, ::-1]
    paired = 0.5 * (w - w[:, ::-1])
    paired[:, 3:6] = 0.0
    return _sym_stack((Q * paired[:, None, :]) @ np.swapaxes(Q, 1, 2))


def step_B(E_blk: np.ndarray, Gamma_blk: np.ndarray) -> np.ndarray:
    """Nearest matrix with paired spectrum sharing the eigenvectors of E - Gamma.

    With eigenvalues l_0 >= ... >= l_8, the new spectrum is
    (l_i - l_{8-i}) / 2 for the outer six and 0 for the middle three.
    """
    return project_B(E_blk[None], Gamma_blk[None])[0]


def _degenerate(w: np.ndarray, gap: float) -> np.ndarray:
    """Per-row version of the distinct nonzero eigenvalue check."""
    scale = np.max(np.abs(w), axis=1)
    values = np.sort(np.concatenate([w[:, :3], w[:, -3:], np.zeros((len(w), 1))], axis=1), axis=1)
    return (scale == 0) | (np.min(np.diff(values, axis=1), axis=1) <= gap * scale)


def _best_signs(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    m = len(X)
    Z = X[:, None] + Y[:, None] * SIGN_TABLE[None, :, None, :]
    B = Z.reshape(m, len(SIGN_TABLE), 3, 3, 3)
    G = np.swapaxes(B, -1, -2) @ B
    diag = np.linalg.norm(np.diagonal(G, axis1=-2, axis2=-1), axis=-1)
    frob = np.linalg.norm(G, axis=(-2, -1))
    ratio = np.divide(diag, frob, out=np.zeros_like(diag), where=frob > 0)
    scores = ratio.sum(axis=-1)

    # first configuration wins unless a later one is better by more than 1e-12
    best = np.zeros(m, dtype=int)
    for c in range(1, len(SIGN_TABLE)):
        better = scores[:, c] > scores[np.arange(m), best] + 1e-12
        best[better] = c
    return SIGN_TABLE[best]


def _rotation_projection(D: np.ndarray, gap: float) -> Tuple[np.ndarray, np.ndarray]:
    """One block-rotation projection per row; also flags degenerate spectra."""
    m = len(D)
    w, Q = np.linalg.eigh(_sym_stack(D))
    bad = _degenerate(w, gap)
    X, Y = Q[:, :, ::-1][:, :, :3], Q[:, :, :3]
    sigma_plus, sigma_minus = w[:, ::-1][:, :3], w[:, :3]

    s = _best_signs(X, Y)[:, None, :]
    V = SQRT_HALF * (X + Y * s)
    U = SQRT_HALF * (X - Y * s)
    Ub, S, Vt = np.linalg.svd(V.reshape(m, 3, 3, 3))
    # mean singular value times the polar factor; a reflection flips both signs
    V = (S.mean(axis=-1)[..., None, None] * (Ub @ Vt)).reshape(m, 9, 3)

    X = SQRT_HALF * (U + V)
    Y = SQRT_HALF * (V - U)
    XT, YT = np.swapaxes(X, 1, 2), np.swapaxes(Y, 1, 2)
    return _sym_stack((X * sigma_plus[:, None, :]) @ XT + (Y * sigma_minus[:, None, :]) @ YT), bad


def project_D(E_blks: np.ndarray, Phi_blks: np.ndarray, cfg: AdmmConfig,
              gap: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """step_D over a stack of triplet blocks.

    Each row iterates until its own change is small; a row whose spectrum
    turns degenerate stops there and is flagged in the returned mask.
    """
    D = _sym_stack(E_blks - Phi_blks)
    active = np.ones(len(D), dtype=bool)
    failed = np.zeros(len(D), dtype=bool)
    for _ in range(cfg.inner_D_max_iters):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        D_next, bad = _rotation_projection(D[idx], gap)
        failed[idx[bad]] = True
        ok = idx[~bad]
        D_next = D_next[~bad]
        change = np.linalg.norm(D_next - D[ok], axis=(1, 2))
        D[ok] = D_next
        settled = change <= cfg.inner_D_tol * np.maximum(1.0, np.linalg.norm(D_next, axis=(1, 2)))
        active[idx[bad]] = False
        active[ok[settled]] = False
    return D, failed


def step_D(E_blk: np.ndarray, Phi_blk: np.ndarray, cfg: AdmmConfig, gap: float = 1e-6) -> np.ndarray:
    """Block-rotation projection of E - Phi, iterated to a fixed point.

    Raises EigenvalueMultiplicityError when the spectrum is degenerate; the
    solver then keeps the previous D for that triplet.
    """
    D, failed = project_D(E_blk[None], Phi_blk[None], cfg, gap)
    if failed[0]:
        raise EigenvalueMultiplicityError("nonzero eigenvalues of the D-step input are not distinct")
    return D[0]


def step_duals(state: AdmmState, blocks: Optional[Sequence[np.ndarray]] = None) -> None:
    """Gamma += B - E_k, Phi += D - E_k."""
    if blocks is None:
        blocks = [state.E.triplet_block(views) for views in state.triplets]
    for idx, Ek in enumerate(blocks):
        state.Gamma[idx] = state.Gamma[idx] + state.B[idx] - Ek
        state.Phi[idx] = state.Phi[idx] + state.D[idx] - Ek


def _chunks(m: int, workers: int) -> List[slice]:
    bounds = np.linspace(0, m, min(max(workers, 1), max(m, 1)) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _relative_change(new: MultiviewEssential, old: MultiviewEssential) -> float:
    num = sum(np.sum((M - old.block(i, j)) ** 2) for (i, j), M in new.items())
    den = sum(np.sum(M ** 2) for _, M in old.items())
    return float(np.sqrt(num / den)) if den > 0 else float("inf")


def _restore_scales(E: MultiviewEssential, norms: Dict[Tuple[int, int], float]) -> MultiviewEssential:
    return MultiviewEssential(E.n, {k: M * norms[k] for k, M in E.items()})


def solve(
    E_hat: MultiviewEssential,
    cover: Union[TripletCover, Sequence],
    cfg: Optional[AdmmConfig] = None,
    tol: Optional[ToleranceConfig] = None,
    threads: Optional[int] = None,
) -> Tuple[MultiviewEssential, pd.DataFrame]:
    """Average E_hat under per-triplet consistency constraints.

    Returns the solved matrix (blocks at the input's Frobenius norms when
    blocks are normalized internally) and the per-iteration trace. Raises
    NotConvergedError carrying the iterate with the smallest primal residual.
    """
    cfg = cfg or get_config().admm
    tol = tol or get_config().tolerances
    norms = {k: float(np.linalg.norm(M)) for k, M in E_hat.items()}
    if cfg.normalize_blocks:
        E_hat = normalize_blocks(E_hat)

    state = AdmmState.initial(E_hat, cover)
    logger.info(f"ADMM over {len(state.triplets)} triplets, {len(norms)} blocks "
                f"(alpha1={cfg.alpha1}, alpha2={cfg.alpha2})")

    def finish(E: MultiviewEssential) -> MultiviewEssential:
        return _restore_scales(E, norms) if cfg.normalize_blocks else E

    best_E, best_primal = state.E, float("inf")
    hat_blocks = np.stack([E_hat.triplet_block(v) for v in state.triplets])
    chunks = _chunks(len(state.triplets), threads if threads is not None else get_config().threads)
    for it in range(1, cfg.max_outer_iters + 1):
        E_prev = state.E
        state.E = step_E(state, E_hat, cfg)
        blocks = np.stack([state.E.triplet_block(v) for v in state.triplets])
        Gamma, Phi = np.stack(state.Gamma), np.stack(state.Phi)

        B = np.concatenate(parallel_map(lambda sl: project_B(blocks[sl], Gamma[sl]), chunks, threads))
        parts = parallel_map(lambda sl: project_D(blocks[sl], Phi[sl], cfg, tol.eigen_gap), chunks, threads)
        D = np.concatenate([p[0] for p in parts])
        failed = np.concatenate([p[1] for p in parts])
        skipped = int(failed.sum())
        if skipped:
            logger.debug(f"D-step skipped for triplets {[state.triplets[k] for k in np.flatnonzero(failed)]}")
            D[failed] = np.stack(state.D)[failed]
        state.B, state.D = list(B), list(D)
        step_duals(state, blocks)
        state.iteration = it

        primal_B = float(np.max(np.linalg.norm(B - blocks, axis=(1, 2))))
        primal_D = float(np.max(np.linalg.norm(D - blocks, axis=(1, 2))))
        change = _relative_change(state.E, E_prev)
        state.history.append({
            "iteration": it,
            "objective": float(np.sum((blocks - hat_blocks) ** 2)),
            "primal_B": primal_B,
            "primal_D": primal_D,
            "relative_change": change,
            "skipped": skipped,
        })

        primal = max(primal_B, primal_D)
        if primal < best_primal:
            best_E, best_primal = state.E, primal
        # the first E-step reproduces E_hat, so a zero change there says nothing
        if primal < cfg.primal_tol or (it > 1 and change < cfg.outer_tol):
            logger.info(f"ADMM converged after {it} iterations (primal {primal:.2e}, change {change:.2e})")
            return finish(state.E), state.trace()
        if it % 50 == 0:
            logger.debug(f"iteration {it}: primal {primal:.3e}, change {change:.3e}")

    raise NotConvergedError(
        f"ADMM did not converge in {cfg.max_outer_iters} iterations (best primal {best_primal:.3e})",
        best=finish(best_E),
        trace=state.trace(),
    )
