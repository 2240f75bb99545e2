import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from berglab import geometry as geo
from berglab import quadrature as quad

DISK = geo.UnitDisk()
BALL = geo.UnitBall(2)
EGG2 = geo.EggDomain(2)
PROD = geo.ProductDisk(2)

SPEC = quad.QuadratureSpec(strategy="stratified", n_samples=12000,
                           rel_tolerance=0.05, seed=11)


def disk_ball_measure_oracle(s0, r, nphi=40001):
    """1-D reduction of the disk quasi-ball area, independent of MC."""
    phi = np.linspace(-np.pi, np.pi, nphi)
    budget = r - np.abs(1 - np.exp(1j * phi))
    lo = np.clip(s0 - budget, 0, 1)
    hi = np.clip(s0 + budget, 0, 1)
    length = np.where(budget > 0, 0.5 * (hi ** 2 - lo ** 2), 0.0)
    return trapezoid(length, phi)


# ---------------------------------------------------------------------------
# ball metric
# ---------------------------------------------------------------------------

class TestBallMetric:
    def test_hand_values(self):
        assert geo.ball_metric(DISK, 0.5, 0.9) == pytest.approx(0.4)
        assert geo.ball_metric(DISK, 0.5, 0.5j) == pytest.approx(math.sqrt(2))

    def test_identity(self):
        assert geo.ball_metric(DISK, 0.3 + 0.2j, 0.3 + 0.2j) == 0.0

    def test_origin_fallback_flags(self):
        with pytest.warns(geo.MetricFallbackWarning):
            d = geo.ball_metric(DISK, 0.0, 0.5)
        assert d == pytest.approx(0.5 + 1.0)
        with pytest.warns(geo.MetricFallbackWarning):
            assert geo.ball_metric(DISK, 0.0, 0.0) == 0.0

    def test_rejects_non_radial_domain(self):
        with pytest.raises(geo.GeometryError):
            geo.ball_metric(EGG2, [0.1, 0.1], [0.2, 0.2])

    @given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9),
           st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
    @settings(max_examples=60, deadline=None)
    def test_symmetry(self, a, b, c, d):
        z, w = complex(a, b), complex(c, d)
        if abs(z) < 1e-6 or abs(w) < 1e-6 or abs(z) >= 1 or abs(w) >= 1:
            return
        assert geo.ball_metric(DISK, z, w) == geo.ball_metric(DISK, w, z)

    def test_quasi_triangle_disk_is_metric(self):
        c = geo.triangle_constant_probe(DISK, 50_000, seed=3)
        assert c <= 1.0 + 1e-9


# ---------------------------------------------------------------------------
# frames and tangential radii
# ---------------------------------------------------------------------------

class TestPolydiscFrame:
    def test_tau1_exact(self):
        fr = geo.polydisc_frame(BALL, [0.5, 0.1], 0.01)
        assert fr.tau[0] == 0.01

    def test_ball_strongly_pseudoconvex_scaling(self):
        fr = geo.polydisc_frame(BALL, [0.99, 0.0], 1e-3)
        assert 0.5 <= fr.tau[1] / math.sqrt(1e-3) <= 2.0

    def test_egg_flat_point_scaling(self):
        fr = geo.polydisc_frame(EGG2, [1 - 1e-3, 0.0], 1e-3)
        assert 0.5 <= fr.tau[1] / (1e-3) ** 0.25 <= 2.0

    def test_tau_nondecreasing_in_delta(self):
        taus = [geo.polydisc_frame(EGG2, [0.9, 0.2], d).tau[1]
                for d in (1e-4, 1e-3, 1e-2)]
        assert taus[0] <= taus[1] <= taus[2]

    def test_gradient_degenerate_center_errors(self):
        with pytest.raises(geo.FrameError):
            geo.polydisc_frame(BALL, [0.0, 0.0], 1e-3)

    def test_frame_orthonormal(self):
        fr = geo.polydisc_frame(EGG2, [0.7, 0.3], 1e-2)
        basis = np.vstack([fr.normal_dir[None, :], fr.tangent_dirs])
        gram = basis @ basis.conj().T
        assert np.allclose(gram, np.eye(2), atol=1e-12)

    def test_rho_control_on_sampled_frames(self):
        # |rho(z) - rho(q)| <= C delta for z in P(q, delta) across (q, delta)
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(12):
            q = geo._near_boundary_point(EGG2, rng, depth=rng.uniform(0.01, 0.2))
            delta = 10 ** rng.uniform(-3, -1.2)
            fr = geo.polydisc_frame(EGG2, q, delta)
            u = np.sqrt(rng.uniform(0, 1, (200, 2)))
            ph = np.exp(2j * np.pi * rng.uniform(0, 1, (200, 2)))
            pts = fr.point(u * ph * fr.tau[None, :])
            inside = EGG2.contains(pts)
            if inside.any():
                dev = np.max(np.abs(EGG2.rho(pts[inside]) - EGG2.rho(q)[0]))
                worst = max(worst, dev / delta)
        assert worst <= 4.0


# ---------------------------------------------------------------------------
# polydisc metric
# ---------------------------------------------------------------------------

class TestPolydiscMetric:
    def test_identity(self):
        z = np.array([0.5, 0.2 + 0.1j])
        assert geo.polydisc_metric(EGG2, z, z) == 0.0

    def test_egg_flat_point_cost(self):
        z = np.array([1 - 1e-3, 0.0])
        w = z + np.array([0.0, 0.1])
        m = geo.polydisc_metric_onesided(EGG2, z, w)
        assert 1e-4 / 4 <= m <= 1e-4 * 4

    def test_symmetrized_and_symmetric(self):
        z = np.array([0.8, 0.1])
        w = np.array([0.75, 0.15 + 0.05j])
        d1 = geo.polydisc_metric(EGG2, z, w)
        d2 = geo.polydisc_metric(EGG2, w, z)
        assert d1 == pytest.approx(d2)
        assert d1 == pytest.approx(
            geo.polydisc_metric_onesided(EGG2, z, w)
            + geo.polydisc_metric_onesided(EGG2, w, z))

    def test_equivalent_to_ball_metric_on_ball(self):
        # ratio over random near-boundary pairs lies in a fixed interval
        rng = np.random.default_rng(1)
        dirs = quad._sphere_dirs(rng, 200, 2)
        Z = (1 - rng.uniform(0.005, 0.1, 200))[:, None] * dirs
        step = rng.uniform(0.002, 0.02, 200)
        W = Z + step[:, None] * quad._sphere_dirs(rng, 200, 2)
        keep = BALL.contains(W)
        Z, W = Z[keep][:100], W[keep][:100]
        dp = np.array([geo.polydisc_metric(BALL, z, w) for z, w in zip(Z, W)])
        db = BALL.metric(Z, W)
        ratio = dp / db
        assert 0.2 <= ratio.min() and ratio.max() <= 5.0

    def test_saturation_warning(self):
        z = np.array([0.9, 0.0])
        w = np.array([-0.9, 0.0])
        with pytest.warns(geo.MetricFallbackWarning):
            m = geo.polydisc_metric_onesided(EGG2, z, w)
        assert m == geo.DELTA_MAX


# ---------------------------------------------------------------------------
# boundary distance
# ---------------------------------------------------------------------------

class TestBoundaryDistance:
    def test_disk_radial(self):
        assert geo.boundary_distance(DISK, 0.9) == pytest.approx(0.1, abs=1e-9)

    def test_disk_center_fallback(self):
        assert geo.boundary_distance(DISK, 0.0) == pytest.approx(1.0, abs=1e-9)

    def test_ball_comparable_to_euclidean(self):
        bd = geo.boundary_distance(BALL, [0.5, 0.5])
        eu = 1 - math.sqrt(0.5)
        assert 0.25 * eu <= bd <= 4.0 * eu

    def test_exterior_point_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.boundary_distance(DISK, 1.5)

    def test_comparability_invariant(self):
        # quasi/euclid distance ratio bounded over near-boundary samples
        rng = np.random.default_rng(4)
        for dom in (DISK, BALL, EGG2):
            Z = geo._uniform_interior(dom, rng, 3000)
            dist = dom.euclid_boundary_distance(Z)
            sel = (dist > 1e-3) & (dist < 0.2)
            Z = Z[sel][:1000]
            qd = dom.quasi_boundary_distance(Z)
            ratio = qd / dom.euclid_boundary_distance(Z)
            assert np.isfinite(ratio).all()
            assert ratio.max() / ratio.min() < 25.0

    def test_subadditivity_disk_exact(self):
        # d(z, b) <= d(z', b) + d(z, z') holds with constant 1 on the disk
        rng = np.random.default_rng(6)
        Z = geo._uniform_interior(DISK, rng, 400)
        W = geo._uniform_interior(DISK, rng, 400)
        lhs = DISK.quasi_boundary_distance(Z)
        rhs = DISK.quasi_boundary_distance(W) + DISK.metric(Z, W)
        assert np.all(lhs <= rhs + 1e-12)


# ---------------------------------------------------------------------------
# quasi-ball measures
# ---------------------------------------------------------------------------

class TestQuasiBallMeasure:
    def test_matches_oracle(self):
        ball = geo.QuasiBall.of(DISK, 0.9, 0.05)
        est = geo.quasi_ball_measure(DISK, ball, SPEC)
        oracle = disk_ball_measure_oracle(0.9, 0.05)
        assert est.real == pytest.approx(oracle, rel=0.05)

    def test_exponent_two_scaling(self):
        m1 = geo.quasi_ball_measure(DISK, geo.QuasiBall.of(DISK, 0.9, 0.05),
                                    SPEC).real
        m2 = geo.quasi_ball_measure(DISK, geo.QuasiBall.of(DISK, 0.9, 0.10),
                                    SPEC).real
        assert 3.0 <= m2 / m1 <= 5.0

    def test_ball_loglog_slope_three(self):
        rs = np.array([0.02, 0.04, 0.08, 0.16])
        mus = []
        for r in rs:
            c = np.array([1 - 0.3 * r, 0.0])
            mus.append(geo.quasi_ball_measure(
                BALL, geo.QuasiBall(c, float(r), "ball"), SPEC).real)
        slope = np.polyfit(np.log(rs), np.log(mus), 1)[0]
        assert 2.6 <= slope <= 3.4

    def test_degenerate_radius(self):
        # radius below metric resolution: nonnegative and essentially zero
        ball = geo.QuasiBall.of(DISK, 0.5, 1e-9)
        est = geo.quasi_ball_measure(DISK, ball, SPEC)
        assert 0.0 <= est.real <= SPEC.rel_tolerance


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

class TestTriangleProbe:
    def test_deterministic(self):
        c1 = geo.triangle_constant_probe(DISK, 20_000, seed=9)
        c2 = geo.triangle_constant_probe(DISK, 20_000, seed=9)
        assert c1 == c2

    def test_stable_under_doubling(self):
        c1 = geo.triangle_constant_probe(BALL, 100_000, seed=2)
        c2 = geo.triangle_constant_probe(BALL, 200_000, seed=2)
        assert abs(c1 - c2) / c1 <= 0.10

    def test_requires_positive_count(self):
        with pytest.raises(geo.GeometryError):
            geo.triangle_constant_probe(DISK, 0, seed=1)


class TestHomogeneityFit:
    def _family(self, dom, seed=3):
        rng = np.random.default_rng(seed)
        fam = []
        for r in (0.02, 0.04, 0.08):
            for _ in range(3):
                c = geo._near_boundary_point(dom, rng, depth=0.1 * r)
                fam.append(geo.QuasiBall.of(dom, c, r))
        return fam

    def test_disk_window(self):
        c0, m = geo.homogeneity_fit(DISK, self._family(DISK), [1, 1.5, 2], SPEC)
        assert 1.8 <= m <= 2.2
        assert c0 >= 1.0

    def test_ball_window(self):
        c0, m = geo.homogeneity_fit(BALL, self._family(BALL), [1, 1.5, 2], SPEC)
        assert 2.6 <= m <= 3.4

    def test_single_lambda_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.homogeneity_fit(DISK, self._family(DISK), [1.0], SPEC)

    def test_doubling_on_held_out_family(self):
        c0, m = geo.homogeneity_fit(DISK, self._family(DISK), [1, 1.5, 2], SPEC)
        rng = np.random.default_rng(77)
        for _ in range(4):
            c = geo._near_boundary_point(DISK, rng, depth=0.004)
            b = geo.QuasiBall.of(DISK, c, 0.04)
            mu1 = geo.quasi_ball_measure(DISK, b, SPEC).real
            mu2 = geo.quasi_ball_measure(
                DISK, geo.QuasiBall(b.center, 2 * b.radius, b.metric_tag),
                SPEC).real
            assert mu2 <= c0 * 2 ** m * mu1 * 1.10


class TestEngulfing:
    def test_identical_centers_c_is_one(self):
        q = np.array([0.95 + 0j])
        res = geo.engulfing_probe(DISK, q, q, 1e-2, 2000, seed=1)
        assert res.hypothesis_met
        assert res.C == pytest.approx(1.0, abs=0.02)

    def test_disjoint_polydiscs_hypothesis_unmet(self):
        res = geo.engulfing_probe(DISK, [0.9], [-0.9], 1e-3, 2000, seed=1)
        assert not res.hypothesis_met
        assert res.C is None

    def test_doubling_constant_range_and_stability(self):
        ds = []
        for delta in (1e-2, 1e-3, 1e-4):
            res = geo.engulfing_probe(DISK, [0.99], [0.99 * np.exp(0.01j)],
                                      delta, 3000, seed=2)
            ds.append(res.D)
        assert all(1.0 <= D <= 8.0 for D in ds)
        assert max(ds) / min(ds) <= 1.5

    def test_near_centers_finite_c(self):
        r1 = geo.engulfing_probe(DISK, [0.99], [0.99 * np.exp(0.01j)],
                                 1e-2, 2000, seed=3)
        r2 = geo.engulfing_probe(DISK, [0.99], [0.99 * np.exp(0.01j)],
                                 1e-2, 4000, seed=4)
        assert r1.hypothesis_met and r2.hypothesis_met
        assert abs(r1.C - r2.C) / r1.C <= 0.25


class TestBoundarySlab:
    B0 = geo.QuasiBall.of(DISK, 1 - 0.05, 0.2)

    def test_limit_is_whole_ball(self):
        r = geo.boundary_slab_measure(DISK, self.B0, 0.999, SPEC)
        assert r == pytest.approx(1.0, abs=0.05)

    def test_linear_in_s(self):
        ratios = {s: geo.boundary_slab_measure(DISK, self.B0, s, SPEC)
                  for s in (0.2, 0.1, 0.05)}
        assert ratios[0.1] <= 0.5
        over_s = [ratios[s] / s for s in (0.2, 0.1, 0.05)]
        assert max(over_s) <= 2.0 * min(over_s)

    def test_half_versus_quarter(self):
        r1 = geo.boundary_slab_measure(DISK, self.B0, 0.5, SPEC)
        r2 = geo.boundary_slab_measure(DISK, self.B0, 0.25, SPEC)
        assert 1.3 <= r1 / r2 <= 3.0

    def test_interior_ball_rejected(self):
        b = geo.QuasiBall.of(DISK, 0.2, 0.05)
        with pytest.raises(geo.HypothesisNotMet):
            geo.boundary_slab_measure(DISK, b, 0.1, SPEC)


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

class TestDomains:
    def test_egg1_equals_ball2_rho(self):
        rng = np.random.default_rng(0)
        egg1 = geo.EggDomain(1)
        Z = 0.9 * quad._sphere_dirs(rng, 1000, 2) * rng.uniform(0, 1, 1000)[:, None]
        assert np.array_equal(egg1.rho(Z), BALL.rho(Z))

    def test_rho_signs(self):
        for dom in (DISK, BALL, EGG2, PROD):
            z = np.zeros((1, dom.dimension), dtype=complex)
            z[0, 0] = 0.5
            assert dom.contains(z)[0]
            z[0, 0] = 1.5
            assert not dom.contains(z)[0]

    def test_volumes(self):
        assert DISK.volume == pytest.approx(math.pi)
        assert BALL.volume == pytest.approx(math.pi ** 2 / 2)
        assert geo.EggDomain(1).volume == pytest.approx(math.pi ** 2 / 2)
        assert PROD.volume == pytest.approx(math.pi ** 2)

    def test_egg_volume_against_mc(self):
        est = quad.integrate(EGG2, lambda W: np.ones(W.shape[0]),
                             quad.QuadratureSpec(strategy="uniform",
                                                 n_samples=200_000,
                                                 rel_tolerance=0.05, seed=8))
        assert est.real == pytest.approx(EGG2.volume, rel=0.02)

    def test_product_metric_is_factor_sum(self):
        z = np.array([0.5, 0.3j])
        w = np.array([0.6, 0.4j])
        expected = (geo.ball_metric(DISK, 0.5, 0.6)
                    + geo.ball_metric(DISK, 0.3j, 0.4j))
        assert PROD.metric(z, w)[0] == pytest.approx(expected)

    def test_make_domain(self):
        assert geo.make_domain("disk").kind == "disk"
        assert geo.make_domain("ball", n=3).dimension == 3
        assert geo.make_domain("egg", m=4).m == 4
        with pytest.raises(geo.GeometryError):
            geo.make_domain("torus")

    def test_point_validation(self):
        with pytest.raises(geo.GeometryError):
            geo.as_point([0.1, float("nan")], 2)
        with pytest.raises(geo.GeometryError):
            geo.as_point([0.1, 0.2, 0.3], 2)


class TestCalibration:
    def test_cached_and_sane(self):
        cal1 = geo.calibrate(DISK)
        cal2 = geo.calibrate(DISK)
        assert cal1 is cal2
        assert cal1.triangle_c >= 1.0
        assert 1.8 <= cal1.m <= 2.2

    def test_k_prime(self):
        cal = geo.calibrate(DISK)
        kp = cal.k_prime(0.1)
        assert kp == pytest.approx(cal.cd * 0.1 / (1 - cal.cd * 0.1))
        with pytest.raises(geo.GeometryError):
            cal.k_prime(0.9)
