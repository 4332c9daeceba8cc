#!/usr/bin/env python3
"""Tests for n-view essential matrices: consistency checks, spectral forms,
pose recovery and the counter-example."""
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

# add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from averaging.config import ToleranceConfig
from averaging.errors import (
    CollinearDegenerateError,
    IncompleteMatrixError,
    InvalidEssentialError,
    PairingError,
)
from averaging.geom import CameraPose, axis_angle, is_essential, random_rotation, skew
from averaging.nview import (
    SQRT_HALF,
    MultiviewEssential,
    SignConfiguration,
    SpectralForm,
    SvdForm,
    block_rotation_score,
    build_from_poses,
    check_essential_consistency,
    check_fundamental_consistency,
    congruence_scale,
    generate_counterexample,
    poses_from_spectral,
    recover_poses,
    relative_rotation_loops,
    remove_block_scales,
    rescale_pairs,
    scaled_block_residual,
    spectral_decompose,
    spectral_to_svd,
    svd_to_spectral,
)
from averaging.register import align_to_reference
from averaging.synthbench import random_poses

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _scene(seed, n):
    return random_poses(n, np.random.default_rng(seed))


def test_multiview_blocks_and_dense():
    poses = _scene(0, 4)
    E = build_from_poses(poses)
    M = E.dense()
    assert np.allclose(M, M.T)
    assert E.is_complete and len(E.observed_pairs) == 6
    assert np.allclose(E.block(2, 1), E.block(1, 2).T)
    assert np.allclose(E.block(3, 3), 0)
    assert np.allclose(M[3:6, 9:12], E.block(1, 3))
    same = MultiviewEssential.from_dense(M)
    assert all(np.allclose(same.block(i, j), E.block(i, j)) for i, j in E.observed_pairs)
    T = E.triplet_block((0, 2, 3))
    assert T.shape == (9, 9) and np.allclose(T[3:6, 6:9], E.block(2, 3))


def test_partial_mask():
    poses = _scene(1, 4)
    E = build_from_poses(poses, mask=[(0, 1), (2, 1), (2, 3)])
    assert not E.is_complete
    assert E.block(0, 3) is None
    assert E.observed_pairs == [(0, 1), (1, 2), (2, 3)]
    with pytest.raises(IncompleteMatrixError):
        check_essential_consistency(E)
    with pytest.raises(IncompleteMatrixError):
        recover_poses(E)


def test_validation_rejects_rank_three_block():
    with pytest.raises(InvalidEssentialError):
        MultiviewEssential(3, {(0, 1): np.eye(3)}, validate=True)


@given(seeds, st.integers(min_value=3, max_value=12))
@settings(max_examples=40, deadline=None)
def test_forward_consistency(seed, n):
    E = build_from_poses(_scene(seed, n))
    for mode in ("scaled", "strict"):
        report = check_essential_consistency(E, mode)
        assert report.fundamental_ok
        assert report.essential_ok
        assert report.eigenvalue_pairing_residual < 1e-8
        assert report.block_rotation_residual < 1e-8


def test_fundamental_report_counts():
    report = check_fundamental_consistency(build_from_poses(_scene(4, 5)))
    assert report.ok
    assert report.positive_count == 3 and report.negative_count == 3
    assert report.rank_residual < 1e-8 < report.rank_margin
    assert report.block_rank_ok


def test_pairwise_scaling_preserves_scaled_consistency():
    E = build_from_poses(_scene(5, 5))
    alphas = [1.0, 2.0, 0.5, 3.0, 1.5]
    scaled = congruence_scale(E, alphas)
    assert check_essential_consistency(scaled, "scaled").essential_ok
    assert not check_essential_consistency(scaled, "strict").essential_ok
    # dividing out cbrt(det V_i) restores strict consistency
    restored = remove_block_scales(scaled)
    assert check_essential_consistency(restored, "strict").essential_ok


def test_negated_matrix_is_consistent():
    E = build_from_poses(_scene(6, 4))
    flipped = rescale_pairs(E, {pair: -1.0 for pair in E.observed_pairs})
    assert check_essential_consistency(flipped, "strict").essential_ok


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_counterexample(seed):
    E, report = generate_counterexample(seed % 1000)
    assert all(is_essential(M) for _, M in E.items())
    assert report.fundamental_ok
    assert not report.essential_ok
    assert report.eigenvalue_pairing_residual < 1e-8
    assert report.block_rotation_residual > 0.01
    assert min(relative_rotation_loops(E)) > 0.1


def test_counterexample_is_deterministic():
    a, _ = generate_counterexample(3)
    b, _ = generate_counterexample(3)
    assert np.array_equal(a.dense(), b.dense())


def _random_svd_form(rng, rows=9):
    W, _ = np.linalg.qr(rng.normal(size=(rows, 6)))
    sigma = np.sort(rng.uniform(0.5, 3.0, 3))[::-1]
    return SvdForm(W[:, :3], W[:, 3:], sigma)


@given(seeds)
@settings(max_examples=100, deadline=None)
def test_svd_spectral_mapping(seed):
    f = _random_svd_form(np.random.default_rng(seed))
    s = svd_to_spectral(f)
    M = f.reassemble()
    assert np.abs(s.reassemble() - M).max() < 1e-11
    back = spectral_to_svd(s)
    assert np.abs(back.U_hat - f.U_hat).max() < 1e-11
    assert np.abs(back.V_hat - f.V_hat).max() < 1e-11
    # the eigen route reassembles too, whatever the eigenvector signs
    assert np.abs(spectral_to_svd(spectral_decompose(M)).reassemble() - M).max() < 1e-11


def test_spectral_to_svd_requires_pairing():
    rng = np.random.default_rng(0)
    s = svd_to_spectral(_random_svd_form(rng))
    broken = SpectralForm(s.X, s.Y, s.sigma_plus, s.sigma_minus * 1.1)
    with pytest.raises(PairingError):
        spectral_to_svd(broken)
    with pytest.raises(PairingError):
        svd_to_spectral(SvdForm(np.eye(9)[:, :3], np.eye(9)[:, :3], np.ones(3)))


def test_sign_configurations():
    configs = SignConfiguration.all()
    assert len(configs) == 8 and len(set(configs)) == 8
    assert configs[0].signs == (1, 1, 1)


def test_block_rotation_score_on_consistent_input():
    E = build_from_poses(_scene(8, 3))
    form = spectral_decompose(E.dense())
    scores = [block_rotation_score(form.X, form.Y, s) for s in SignConfiguration.all()]
    assert max(scores) == pytest.approx(3.0, abs=1e-9)


@given(seeds, st.integers(min_value=3, max_value=12))
@settings(max_examples=50, deadline=None)
def test_factors_are_orthogonal_with_weighted_centers_at_origin(seed, n):
    rng = np.random.default_rng(seed)
    poses = _scene(seed, n)
    alphas = rng.uniform(0.5, 2.0, n)
    w = alphas ** 2
    shift = (w[:, None] * np.array([p.center for p in poses])).sum(axis=0) / w.sum()
    centered = [CameraPose(p.rotation, p.center - shift) for p in poses]
    U = np.vstack([a * p.rotation.T @ skew(p.center) for a, p in zip(alphas, centered)])
    V = np.vstack([a * p.rotation.T for a, p in zip(alphas, centered)])
    assert np.abs(V.T @ U).max() < 1e-9
    E = congruence_scale(build_from_poses(poses), alphas).dense()
    assert np.abs(U @ V.T + V @ U.T - E).max() < 1e-9


@given(seeds, st.integers(min_value=3, max_value=8), st.sampled_from([0.0, 0.02]))
@settings(max_examples=40, deadline=None)
def test_block_test_agrees_between_svd_and_eigen_routes(seed, n, bend):
    rng = np.random.default_rng(seed)
    E = build_from_poses(_scene(seed, n))
    if bend:
        E = E.with_blocks({(0, 1): E.block(0, 1) @ axis_angle(rng.normal(size=3), bend)})
    form = spectral_decompose(E.dense())
    residuals = []
    for s in SignConfiguration.all():
        signs = np.asarray(s.signs, dtype=float)
        V_hat = spectral_to_svd(form.with_column_signs(np.ones(3), signs), tol=np.inf).V_hat
        V_s = SQRT_HALF * (form.X + form.Y * signs)
        assert np.abs(V_hat - V_s).max() < 1e-12
        residuals.append(scaled_block_residual(V_hat))

    report = check_essential_consistency(E, mode="scaled")
    assert min(residuals) == pytest.approx(report.block_rotation_residual, abs=1e-9)
    assert (min(residuals) <= ToleranceConfig().block_rotation_tol) == (bend == 0.0)
    assert report.essential_ok == (bend == 0.0)


@given(seeds, st.integers(min_value=3, max_value=20))
@settings(max_examples=30, deadline=None)
def test_recovery_round_trip(seed, n):
    truth = _scene(seed, n)
    E = build_from_poses(truth)
    for mode in ("scaled", "strict"):
        alignment = align_to_reference(recover_poses(E, mode), truth)
        assert alignment.rotation_deg.max() < 1e-6
        assert alignment.relative_center_error.max() < 1e-8


def test_recovered_poses_reproduce_matrix():
    truth = _scene(12, 5)
    E = build_from_poses(truth)
    rebuilt = build_from_poses(recover_poses(E, "strict"))
    for (i, j), M in E.items():
        R = rebuilt.block(i, j)
        assert np.allclose(R / np.linalg.norm(R), M / np.linalg.norm(M), atol=1e-9)


def test_recovery_under_congruence_scaling():
    truth = _scene(13, 6)
    E = congruence_scale(build_from_poses(truth), [0.5, 2.0, 1.0, 3.0, 0.7, 1.3])
    alignment = align_to_reference(recover_poses(E, "scaled"), truth)
    assert alignment.rotation_deg.max() < 1e-6
    assert alignment.relative_center_error.max() < 1e-8


def test_collinear_centers_rejected():
    rotations = [random_rotation(np.random.default_rng(k)) for k in range(3)]
    poses = [CameraPose(R, [float(k), 0.0, 0.0]) for k, R in enumerate(rotations)]
    with pytest.raises(CollinearDegenerateError):
        recover_poses(build_from_poses(poses))


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_recovery_unique_under_eigenvector_signs(seed):
    rng = np.random.default_rng(seed)
    truth = random_poses(int(rng.integers(3, 9)), rng)
    form = spectral_decompose(build_from_poses(truth).dense(), check_distinct=True)
    flipped = form.with_column_signs(rng.choice([-1.0, 1.0], 3), rng.choice([-1.0, 1.0], 3))
    a = poses_from_spectral(form)
    b = poses_from_spectral(flipped)
    alignment = align_to_reference(b, a)
    assert alignment.rotation_frobenius.max() < 1e-7
    assert alignment.relative_center_error.max() < 1e-7


def test_rotation_loops_close_for_real_triplet():
    E = build_from_poses(_scene(14, 3))
    loops = relative_rotation_loops(E)
    assert len(loops) == 8
    assert min(loops) < 1e-9


def test_consistency_fails_for_perturbed_rotation():
    truth = _scene(15, 4)
    E = build_from_poses(truth)
    bent = CameraPose(truth[1].rotation @ axis_angle([0, 1, 0], 0.4), truth[1].center)
    wrong = build_from_poses([truth[0], bent])
    mixed = E.with_blocks({(0, 1): wrong.block(0, 1)})
    assert not check_essential_consistency(mixed).essential_ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
