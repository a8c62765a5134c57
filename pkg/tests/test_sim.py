import json

import numpy as np
import pytest
from scipy import stats

from lfdiff.errors import InvalidParameterError, SimulationError
from lfdiff.mesh import UNIT_AREA_RADIUS as R
from lfdiff.sim import (
    GroundTruth,
    TrajectoryConfig,
    constant_truth,
    load_observations,
    occupancy_cells,
    occupancy_check,
    reflect,
    save_observations,
    simulate,
    truth_catalog,
)

LABELS = ["f0", "f0_1", "f0_2", "f0_3"]


def joint_cells(points):
    """Index of (X_i, X_{i+1}) in 8 x 8 equal-area cells."""
    r2 = np.sum(points**2, axis=1) / R**2
    ring = np.minimum((2 * r2).astype(int), 1)
    sector = np.minimum((np.mod(np.arctan2(points[:, 1], points[:, 0]), 2 * np.pi) / (np.pi / 2)).astype(int), 3)
    c = 4 * ring + sector
    return 8 * c[:-1] + c[1:]


class TestGroundTruth:
    @pytest.mark.parametrize("label", LABELS)
    def test_gradient_matches_finite_differences(self, label):
        truth = truth_catalog(label)
        rng = np.random.default_rng(0)
        r = R * np.sqrt(rng.random(100))
        a = 2 * np.pi * rng.random(100)
        x = np.column_stack([r * np.cos(a), r * np.sin(a)])
        h = 1e-6
        fd = np.column_stack([(truth.f(x + h * e) - truth.f(x - h * e)) / (2 * h) for e in np.eye(2)])
        np.testing.assert_allclose(truth.grad_f(x), fd, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("label", LABELS)
    def test_bounded_below(self, label):
        g = np.linspace(-R, R, 201)
        X, Y = np.meshgrid(g, g)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        pts = pts[np.hypot(*pts.T) <= R]
        assert truth_catalog(label).f(pts).min() > 0.1

    def test_first_truth_formula(self):
        x = np.array([0.2, 0.2])
        expected = 1.1 + 10 * np.exp(-(7.25 * 0.2 - 1.5) ** 2 - (7.25 * 0.2 - 1.5) ** 2) + 10 * np.exp(
            -(7.25 * 0.2 + 1.5) ** 2 - (7.25 * 0.2 - 1.5) ** 2
        )
        assert truth_catalog("f0").f(x) == pytest.approx(expected, rel=1e-15)

    def test_unknown_label(self):
        with pytest.raises(InvalidParameterError):
            truth_catalog("f9")


class TestTrajectoryConfig:
    def test_full_scale_configuration(self):
        cfg = TrajectoryConfig()
        assert cfg.validate() == 10_000
        assert cfg.total_steps // cfg.stride == 50_000

    def test_non_integer_ratio(self):
        with pytest.raises(InvalidParameterError):
            TrajectoryConfig(dt=3e-6).validate()

    def test_start_outside(self):
        with pytest.raises(InvalidParameterError):
            TrajectoryConfig(x0=(0.6, 0.0)).validate()


class TestReflect:
    def test_interior_unchanged(self):
        np.testing.assert_array_equal(reflect([0.1, -0.2]), [0.1, -0.2])

    def test_tangent_mirror(self):
        np.testing.assert_allclose(reflect([1.2 * R, 0.0]), [0.8 * R, 0.0], rtol=1e-15)

    def test_mirror_lands_inside(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            r = R * (1 + rng.random() * 0.999)
            a = 2 * np.pi * rng.random()
            assert np.hypot(*reflect([r * np.cos(a), r * np.sin(a)])) < R

    def test_cap_exceeded(self):
        with pytest.raises(SimulationError):
            reflect([1e6, 0.0])


class TestSimulate:
    def test_increment_variance(self):
        c = 1.7
        dt = 1e-8
        res = simulate(constant_truth(c), TrajectoryConfig(dt=dt, D=dt, total_steps=100_000, seed=2))
        inc = np.diff(res.observations.points, axis=0)
        assert res.n_reflections == 0
        np.testing.assert_allclose(inc.var(axis=0, ddof=1), 2 * c * dt, rtol=0.03)

    def test_zero_noise_constant_field(self):
        res = simulate(constant_truth(1.0), TrajectoryConfig(total_steps=50_000, x0=(0.1, 0.2)), noise=False)
        np.testing.assert_array_equal(res.observations.points, np.tile([0.1, 0.2], (6, 1)))

    def test_interpreted_path_matches_compiled(self):
        truth = truth_catalog("f0")
        wrapped = GroundTruth("custom", kind="callable", f_callable=truth.f, grad_callable=truth.grad_f)
        cfg = TrajectoryConfig(dt=1e-4, D=1e-2, total_steps=2000, seed=3)
        np.testing.assert_allclose(
            simulate(wrapped, cfg).observations.points, simulate(truth, cfg).observations.points, atol=1e-12
        )

    def test_points_inside_and_deterministic(self):
        cfg = TrajectoryConfig(total_steps=2_000_000, seed=4)
        a = simulate(truth_catalog("f0"), cfg)
        b = simulate(truth_catalog("f0"), cfg)
        np.testing.assert_array_equal(a.observations.points, b.observations.points)
        assert a.observations.n == 200
        assert np.all(np.hypot(*a.observations.points.T) < R)

    def test_reflection_cap_error(self):
        with pytest.raises(SimulationError):
            simulate(constant_truth(1e9), TrajectoryConfig(dt=1e-2, D=1e-2, total_steps=100, seed=0))

    def test_dt_halving_weak_convergence(self):
        truth = truth_catalog("f0")
        coarse = simulate(truth, TrajectoryConfig(dt=5e-6, total_steps=10**8, seed=0)).observations.points
        fine = simulate(truth, TrajectoryConfig(dt=2.5e-6, total_steps=2 * 10**8, seed=100)).observations.points
        p = np.bincount(joint_cells(coarse), minlength=64) / (len(coarse) - 1)
        q = np.bincount(joint_cells(fine), minlength=64) / (len(fine) - 1)
        assert 0.5 * np.abs(p - q).sum() <= 0.05


class TestOccupancy:
    def test_uniform_null(self):
        rng = np.random.default_rng(5)
        r = R * np.sqrt(rng.random(10_000))
        a = 2 * np.pi * rng.random(10_000)
        chi2, _ = occupancy_check(np.column_stack([r * np.cos(a), r * np.sin(a)]), 20)
        assert chi2 < stats.chi2.ppf(0.999, 19)

    def test_identical_points(self):
        assert occupancy_check(np.full((1000, 2), 0.1), 20)[0] > 1e3

    def test_equal_area_cells(self):
        counts = occupancy_cells(np.zeros((0, 2)), 20)
        assert counts.shape == (20,)

    def test_constant_field_trajectory(self):
        res = simulate(constant_truth(1.0), TrajectoryConfig(dt=5e-4, D=5e-2, total_steps=2_000_000, seed=6))
        _, p = occupancy_check(res.observations, 20)
        assert p > 1e-3

    def test_too_few_points(self):
        with pytest.raises(InvalidParameterError):
            occupancy_check(np.zeros((10, 2)))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        res = simulate(truth_catalog("f0_1"), TrajectoryConfig(total_steps=200_000, seed=7))
        save_observations(tmp_path / "obs.csv", tmp_path / "obs.json", res)
        back = load_observations(tmp_path / "obs.csv", path_meta=tmp_path / "obs.json")
        np.testing.assert_array_equal(back.points, res.observations.points)
        assert back.D == 0.05
        meta = json.loads((tmp_path / "obs.json").read_text())
        assert meta["truth"] == "f0_1" and meta["seed"] == 7
