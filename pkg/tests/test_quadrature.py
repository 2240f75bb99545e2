import math

import numpy as np
import pytest

from berglab import geometry as geo
from berglab import quadrature as quad

DISK = geo.UnitDisk()
BALL = geo.UnitBall(2)
EGG2 = geo.EggDomain(2)

ONES = lambda W: np.ones(W.shape[0])


class TestPolarGauss:
    PG = quad.QuadratureSpec(strategy="polar_gauss", radial_nodes=64,
                             angular_nodes=64, n_samples=1,
                             rel_tolerance=1e-9, seed=1)

    def test_disk_area_machine_exact(self):
        est = quad.integrate(DISK, ONES, self.PG)
        assert abs(est.real - math.pi) <= 1e-10
        assert not est.flagged

    def test_disk_second_moment(self):
        est = quad.integrate(DISK, lambda W: np.abs(W[:, 0]) ** 2, self.PG)
        assert est.real == pytest.approx(math.pi / 2, abs=1e-12)

    def test_ball_volume(self):
        pg = self.PG.with_(radial_nodes=16, angular_nodes=12)
        est = quad.integrate(BALL, ONES, pg)
        assert est.real == pytest.approx(math.pi ** 2 / 2, abs=1e-10)

    def test_ball_monomial_norm(self):
        # ||z1^1 z2^2||^2 = pi^2 1! 2! / 5! on the unit ball
        pg = self.PG.with_(radial_nodes=16, angular_nodes=12)
        f = lambda W: np.abs(W[:, 0]) ** 2 * np.abs(W[:, 1]) ** 4
        est = quad.integrate(BALL, f, pg)
        assert est.real == pytest.approx(math.pi ** 2 * 2 / 120, rel=1e-10)

    def test_unsupported_domain(self):
        with pytest.raises(quad.QuadratureError):
            quad.integrate(EGG2, ONES, self.PG)

    def test_node_doubling_flags_rough_integrand(self):
        rough = lambda W: (np.abs(W[:, 0]) < 0.537).astype(float)
        est = quad.integrate(DISK, rough, self.PG.with_(radial_nodes=8,
                                                        angular_nodes=8,
                                                        rel_tolerance=1e-12))
        assert est.flagged


class TestMonteCarlo:
    def test_uniform_area(self):
        spec = quad.QuadratureSpec(strategy="uniform", n_samples=10 ** 6,
                                   rel_tolerance=0.01, seed=3)
        est = quad.integrate(DISK, ONES, spec)
        assert abs(est.real - math.pi) <= 3 * est.std_error
        assert est.std_error <= 3e-3

    def test_determinism(self):
        spec = quad.QuadratureSpec(strategy="stratified", n_samples=20000,
                                   rel_tolerance=0.05, seed=17)
        f = lambda W: np.abs(W[:, 0])
        e1 = quad.integrate(DISK, f, spec)
        e2 = quad.integrate(DISK, f, spec)
        assert e1.value == e2.value and e1.std_error == e2.std_error

    def test_same_seed_same_points(self):
        spec = quad.QuadratureSpec(strategy="uniform", n_samples=5000,
                                   rel_tolerance=0.05, seed=23)
        p1 = quad.sample_domain(DISK, spec)
        p2 = quad.sample_domain(DISK, spec)
        assert np.array_equal(p1.points, p2.points)
        assert np.array_equal(p1.weights, p2.weights)

    def test_hand_integral(self):
        spec = quad.QuadratureSpec(strategy="stratified", n_samples=100_000,
                                   rel_tolerance=0.02, seed=5)
        est = quad.integrate(DISK, lambda W: np.abs(W[:, 0]) ** 2, spec)
        assert est.real == pytest.approx(math.pi / 2, rel=0.02)

    def test_divergent_integrand_flags(self):
        # (1 - |w|^2)^(-1.5) is non-integrable; the flag is the contract
        spec = quad.QuadratureSpec(strategy="stratified", n_samples=60_000,
                                   rel_tolerance=0.05, seed=7, layer_count=10)
        f = lambda W: (1 - np.abs(W[:, 0]) ** 2) ** -1.5
        est1 = quad.integrate(DISK, f, spec)
        est2 = quad.integrate(DISK, f, spec.with_(layer_count=20))
        assert est1.flagged and est2.flagged
        # with an explicit resolution floor the truncated integral is clean
        # and grows like floor^(-1/2) under refinement
        t1 = quad.integrate(DISK, f, spec.with_(depth_floor=1e-4))
        t2 = quad.integrate(DISK, f, spec.with_(depth_floor=1e-6))
        assert t2.real > 5.0 * t1.real

    def test_nan_integrand_flagged_with_count(self):
        def f(W):
            v = np.ones(W.shape[0])
            v[::7] = np.nan
            return v
        spec = quad.QuadratureSpec(strategy="uniform", n_samples=2000,
                                   rel_tolerance=0.05, seed=2)
        est = quad.integrate(DISK, f, spec)
        assert est.flagged and est.bad_count > 0

    def test_error_slope_minus_half(self):
        ses = []
        ns = [10 ** 4, 10 ** 5, 10 ** 6]
        for n in ns:
            spec = quad.QuadratureSpec(strategy="uniform", n_samples=n,
                                       rel_tolerance=0.05, seed=13)
            ses.append(quad.integrate(DISK, lambda W: np.abs(W[:, 0]) ** 2,
                                      spec).std_error)
        slope = np.polyfit(np.log(ns), np.log(ses), 1)[0]
        assert -0.65 <= slope <= -0.35

    def test_cross_strategy_agreement_smooth(self):
        # PolarGauss and MC agree within 3 SE on random smooth integrands
        rng = np.random.default_rng(31)
        pg = quad.QuadratureSpec(strategy="polar_gauss", radial_nodes=48,
                                 angular_nodes=48, n_samples=1,
                                 rel_tolerance=1e-8, seed=1)
        mc = quad.QuadratureSpec(strategy="uniform", n_samples=150_000,
                                 rel_tolerance=0.05, seed=337)
        for trial in range(20):
            c = rng.uniform(-0.6, 0.6) + 1j * rng.uniform(-0.6, 0.6)
            s = rng.uniform(0.3, 1.0)
            a = rng.uniform(0.5, 2.0)
            f = lambda W: a * np.exp(-np.abs(W[:, 0] - c) ** 2 / s ** 2)
            v1 = quad.integrate(DISK, f, pg).real
            e2 = quad.integrate(DISK, f, mc.with_(seed=337 + trial))
            assert abs(v1 - e2.real) <= 3 * max(e2.std_error, 1e-6 * abs(v1))


class TestIntegrateBall:
    SPEC = quad.QuadratureSpec(strategy="stratified", n_samples=20_000,
                               rel_tolerance=0.05, seed=11)

    def test_measure_consistency(self):
        ball = geo.QuasiBall.of(DISK, 0.9, 0.05)
        a = quad.integrate_ball(DISK, ball, ONES, self.SPEC)
        b = geo.quasi_ball_measure(DISK, ball, self.SPEC)
        assert a.value == b.value

    def test_superset_ball_equals_integrate(self):
        ball = geo.QuasiBall.of(DISK, 0.1, 10.0)  # contains the whole disk
        f = lambda W: np.abs(W[:, 0]) ** 2
        a = quad.integrate_ball(DISK, ball, f, self.SPEC.with_(strategy="uniform"))
        assert a.real == pytest.approx(math.pi / 2, rel=0.05)

    def test_strategy_cross_check(self):
        ball = geo.QuasiBall.of(DISK, 1 - 0.02, 0.15)
        f = lambda W: (1 - np.abs(W[:, 0]) ** 2) ** 0.5
        a = quad.integrate_ball(DISK, ball, f, self.SPEC)
        b = quad.integrate_ball(DISK, ball, f,
                                self.SPEC.with_(strategy="uniform",
                                                n_samples=200_000, seed=12))
        se = math.hypot(a.std_error, b.std_error)
        assert abs(a.real - b.real) <= 3 * se

    def test_polar_gauss_rejected(self):
        ball = geo.QuasiBall.of(DISK, 0.9, 0.05)
        with pytest.raises(quad.QuadratureError):
            quad.integrate_ball(DISK, ball, ONES,
                                self.SPEC.with_(strategy="polar_gauss"))

    def test_egg_ball_positive(self):
        ball = geo.QuasiBall.of(EGG2, [0.9, 0.1], 0.05)
        est = quad.integrate_ball(EGG2, ball, ONES,
                                  self.SPEC.with_(n_samples=4000))
        assert est.real > 0

    def test_ball_average_constant_exact(self):
        ball = geo.QuasiBall.of(BALL, [0.9, 0.1], 0.08)
        est = quad.ball_average(BALL, ball, lambda W: 3.0 * np.ones(W.shape[0]),
                                self.SPEC)
        assert est.value == 3.0

    def test_depth_floor_truncates(self):
        ball = geo.QuasiBall.of(DISK, 1 - 0.02, 0.1)
        pts = quad.sample_ball_region(DISK, ball,
                                      self.SPEC.with_(depth_floor=0.01))
        assert np.all(1.0 - np.abs(pts.points[:, 0]) >= 0.01 - 1e-12)


class TestSpecValidation:
    def test_bad_fields(self):
        with pytest.raises(quad.QuadratureError):
            quad.QuadratureSpec(n_samples=0)
        with pytest.raises(quad.QuadratureError):
            quad.QuadratureSpec(rel_tolerance=0.0)
        with pytest.raises(quad.QuadratureError):
            quad.QuadratureSpec(strategy="qmc")
        with pytest.raises(quad.QuadratureError):
            quad.QuadratureSpec(layer_count=0)

    def test_flag_rule(self):
        assert quad._flag(1.0, 0.2, 0.05)
        assert not quad._flag(1.0, 0.01, 0.05)
        assert not quad._flag(0.0, 0.0, 0.05)   # a true zero is not flagged

    def test_parallel_map_order(self):
        out = quad.parallel_map(lambda x: x * x, list(range(20)), threads=4)
        assert out == [x * x for x in range(20)]
