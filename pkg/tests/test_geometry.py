import itertools
import math

import numpy as np
import pytest

from pcda.geometry import (
    Assignment,
    DomainTag,
    PointCloud,
    batch_mappings,
    emd_approx,
    emd_exact,
    emd_gradient,
    emd_oracle,
    matched_cost,
    normalize_cloud,
    resample_cloud,
    solve,
)
from pcda.geometry._kernels import auction_assign, fps_indices


def brute_force_fps(points, n, start):
    """Reference FPS written without any vectorisation."""
    chosen = [start]
    while len(chosen) < n:
        best, best_d = None, -1.0
        for i in range(len(points)):
            d = min(math.dist(points[i], points[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


class TestPointCloud:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)), 0)
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)), 0)

    def test_rejects_non_finite(self):
        pts = np.zeros((3, 3))
        pts[1, 2] = np.nan
        with pytest.raises(ValueError):
            PointCloud(pts, 0)

    def test_label_rules(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            PointCloud(np.zeros((2, 3)), None, DomainTag.SYNTHETIC)
        cloud = PointCloud(np.zeros((2, 3)), None, DomainTag.TARGET)
        assert cloud.label is None


class TestNormalize:
    def test_fixed_point(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0.5, 0], [0, -0.5, 0]])
        out = normalize_cloud(PointCloud(pts, 2))
        np.testing.assert_array_equal(out.points, pts)
        assert out.label == 2

    def test_single_point_goes_to_origin(self):
        out = normalize_cloud(PointCloud(np.array([[5.0, 5.0, 5.0]]), 0))
        np.testing.assert_array_equal(out.points, np.zeros((1, 3)))

    def test_random_centroid_and_radius(self, rng):
        out = normalize_cloud(PointCloud(rng.normal(size=(4, 3)) * 7 + 3, 1, DomainTag.SOURCE))
        assert np.abs(out.points.mean(axis=0)).max() < 1e-9
        assert abs(np.linalg.norm(out.points, axis=1).max() - 1.0) < 1e-9
        assert out.domain_tag is DomainTag.SOURCE

    def test_degenerate_cloud_is_only_centred(self):
        out = normalize_cloud(PointCloud(np.full((5, 3), 2.5), 0))
        np.testing.assert_array_equal(out.points, np.zeros((5, 3)))


class TestResample:
    def test_same_size_is_permutation(self, rng, kernel_path):
        pts = rng.normal(size=(32, 3))
        out = resample_cloud(PointCloud(pts, 0), 32, seed=3).points
        np.testing.assert_array_equal(np.sort(out, axis=0), np.sort(pts, axis=0))
        assert {tuple(p) for p in out} == {tuple(p) for p in pts}

    def test_single_point_padding(self):
        out = resample_cloud(PointCloud(np.array([[1.0, 2.0, 3.0]]), 0), 4, seed=0).points
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_cube_corners_pick_antipodes(self, kernel_path):
        corners = np.array(list(itertools.product([-1.0, 1.0], repeat=3)))
        for seed in range(16):
            out = resample_cloud(PointCloud(corners, 0), 2, seed).points
            assert np.linalg.norm(out[0] - out[1]) == pytest.approx(2 * math.sqrt(3))

    def test_fps_matches_brute_force(self, rng, kernel_path):
        pts = rng.normal(size=(40, 3))
        for start in range(0, 40, 7):
            assert list(fps_indices(pts, 9, start)) == brute_force_fps(pts, 9, start)

    def test_pure_function_of_seed(self, rng, kernel_path):
        cloud = PointCloud(rng.normal(size=(50, 3)), 0)
        a = resample_cloud(cloud, 20, seed=11).points
        b = resample_cloud(cloud, 20, seed=11).points
        np.testing.assert_array_equal(a, b)
        up = resample_cloud(cloud, 80, seed=5).points
        assert up.shape == (80, 3)
        np.testing.assert_array_equal(up[:50], cloud.points)

    def test_zero_target_size(self):
        with pytest.raises(ValueError):
            resample_cloud(PointCloud(np.zeros((3, 3)), 0), 0, seed=0)

    def test_paths_agree(self, rng, monkeypatch):
        pts = rng.normal(size=(64, 3))
        monkeypatch.setenv("PCDA_DISABLE_NUMBA", "1")
        ref = fps_indices(pts, 16, 5)
        monkeypatch.delenv("PCDA_DISABLE_NUMBA")
        np.testing.assert_array_equal(fps_indices(pts, 16, 5), ref)


class TestEMDExact:
    def test_identity(self, rng):
        a = rng.normal(size=(20, 3))
        assert emd_exact(a, a).cost == 0.0

    def test_single_pair(self):
        assert emd_exact(np.zeros((1, 3)), np.array([[1.0, 0, 0]])).cost == 1.0

    def test_symmetry(self, rng):
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
        assert emd_exact(a, b).cost == pytest.approx(emd_exact(b, a).cost, rel=1e-9)

    def test_translation_single_point(self, rng):
        a = rng.normal(size=(1, 3))
        t = rng.normal(size=3)
        assert emd_exact(a, a + t).cost == pytest.approx(np.linalg.norm(t), rel=1e-12)

    def test_six_points_against_enumeration(self, rng):
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        best = min(np.mean([np.linalg.norm(a[i] - b[p[i]]) for i in range(6)])
                   for p in itertools.permutations(range(6)))
        assert emd_exact(a, b).cost == pytest.approx(best, rel=1e-12)

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError):
            emd_exact(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))

    def test_assignment_contract(self, rng):
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
        res = emd_exact(PointCloud(a, 0), PointCloud(b, 1))
        assert res.is_bijection()
        assert res.cost == pytest.approx(matched_cost(a, b, res.mapping), rel=1e-9)


class TestEMDOracle:
    def test_single_point(self):
        res = emd_oracle(np.zeros((1, 3)), np.ones((1, 3)))
        assert list(res.mapping) == [0]

    def test_colinear_pair(self):
        a = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        b = np.array([[1.0, 0, 0], [3.0, 0, 0]])
        res = emd_oracle(a, b)
        assert list(res.mapping) == [0, 1]
        assert res.cost == 1.0

    def test_agrees_with_exact(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert emd_oracle(a, b).cost == pytest.approx(emd_exact(a, b).cost, rel=1e-9)

    def test_refuses_large(self, rng):
        with pytest.raises(ValueError):
            emd_oracle(rng.normal(size=(9, 3)), rng.normal(size=(9, 3)))


class TestEMDApprox:
    def test_identity(self, rng, kernel_path):
        a = rng.normal(size=(40, 3))
        res = emd_approx(a, a, 1e-3)
        assert res.cost == 0.0

    def test_within_bound(self, rng, kernel_path):
        for _ in range(5):
            a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
            exact = emd_exact(a, b).cost
            for eps in (1e-1, 1e-2, 1e-3):
                res = emd_approx(a, b, eps)
                assert res.is_bijection()
                assert exact - 1e-12 <= res.cost <= exact + eps

    def test_large_epsilon_still_bijection(self, rng, kernel_path):
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
        assert emd_approx(a, b, 10.0).is_bijection()

    def test_deterministic(self, rng, kernel_path):
        a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        np.testing.assert_array_equal(emd_approx(a, b, 1e-2).mapping, emd_approx(a, b, 1e-2).mapping)

    def test_bad_epsilon(self, rng):
        with pytest.raises(ValueError):
            emd_approx(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), 0.0)

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError):
            emd_approx(rng.normal(size=(3, 3)), rng.normal(size=(4, 3)))

    def test_auction_on_integer_costs(self, kernel_path):
        # with eps < 1/N an integer assignment problem is solved exactly
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
        mapping = auction_assign(cost, 0.1)
        assert cost[np.arange(3), mapping].sum() == 5.0

    def test_batch_matches_single(self, rng, kernel_path):
        a, b = rng.normal(size=(4, 32, 3)), rng.normal(size=(4, 32, 3))
        maps = batch_mappings(a, b, "approx", 1e-3)
        for k in range(4):
            assert sorted(maps[k]) == list(range(32))
            exact = emd_exact(a[k], b[k]).cost
            assert matched_cost(a[k], b[k], maps[k]) <= exact + 1e-3
        exact_maps = batch_mappings(a, b, "exact")
        for k in range(4):
            np.testing.assert_array_equal(exact_maps[k], emd_exact(a[k], b[k]).mapping)

    def test_solve_dispatch(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert solve(a, b, "oracle").cost == pytest.approx(solve(a, b, "exact").cost)
        with pytest.raises(ValueError):
            solve(a, b, "sinkhorn")


class TestEMDGradient:
    def test_coincident_is_zero(self, rng):
        a = rng.normal(size=(6, 3))
        grad = emd_gradient(a, a, Assignment(np.arange(6), 0.0))
        np.testing.assert_array_equal(grad, np.zeros((6, 3)))

    def test_unit_direction(self):
        grad = emd_gradient(np.array([[1.0, 0, 0]]), np.zeros((1, 3)), Assignment(np.array([0]), 1.0))
        np.testing.assert_array_equal(grad, [[1.0, 0, 0]])

    def test_finite_differences(self, rng):
        h = 1e-6
        for _ in range(50):
            a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
            res = emd_exact(a, b)
            grad = emd_gradient(a, b, res)
            fd = np.zeros_like(a)
            for i, j in itertools.product(range(4), range(3)):
                ap, am = a.copy(), a.copy()
                ap[i, j] += h
                am[i, j] -= h
                fd[i, j] = (matched_cost(ap, b, res.mapping) - matched_cost(am, b, res.mapping)) / (2 * h)
            assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-5


class TestNonFinite:
    def test_rejected_by_every_solver(self):
        a = np.zeros((3, 3))
        b = np.ones((3, 3))
        b[1, 1] = np.nan
        for method in ("approx", "exact", "oracle"):
            with pytest.raises(ValueError):
                solve(a, b, method)
        with pytest.raises(ValueError):
            batch_mappings(a[None], b[None])
