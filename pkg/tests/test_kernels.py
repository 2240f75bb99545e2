import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import beta as beta_fn

from berglab import geometry as geo
from berglab import kernels as ker
from berglab import quadrature as quad

DISK = geo.UnitDisk()
BALL = geo.UnitBall(2)
EGG1 = geo.EggDomain(1)
EGG2 = geo.EggDomain(2)

SPEC = quad.QuadratureSpec(strategy="stratified", n_samples=3000,
                           rel_tolerance=0.2, seed=3)


class TestBasisNorms:
    def test_constant_monomial_m1(self):
        nt = ker.basis_norms(EGG1, 0)
        assert nt[0, 0] == pytest.approx(math.pi ** 2 / 2)

    @given(st.integers(0, 8), st.integers(0, 8))
    @settings(max_examples=40, deadline=None)
    def test_m1_reduces_to_ball_factorials(self, a, b):
        nt = ker.basis_norms(EGG1, 8)
        expected = (math.pi ** 2 * math.factorial(a) * math.factorial(b)
                    / math.factorial(a + b + 2))
        assert nt[a, b] == pytest.approx(expected, rel=1e-12)

    def test_m2_beta_value(self):
        nt = ker.basis_norms(EGG2, 0)
        assert nt[0, 0] == pytest.approx((math.pi ** 2 / 2) * beta_fn(0.5, 2))

    def test_m2_against_direct_quadrature(self):
        # ||z2^1||^2 on EggDomain(2) by 4-D MC
        nt = ker.basis_norms(EGG2, 1)
        est = quad.integrate(EGG2, lambda W: np.abs(W[:, 1]) ** 2,
                             quad.QuadratureSpec(strategy="uniform",
                                                 n_samples=400_000,
                                                 rel_tolerance=0.05, seed=5))
        assert est.real == pytest.approx(nt[0, 1], rel=0.03)

    def test_rejects_non_egg(self):
        with pytest.raises(ker.KernelError):
            ker.basis_norms(DISK, 4)

    def test_csv_export(self, tmp_path):
        nt = ker.basis_norms(EGG2, 3)
        path = tmp_path / "norms.csv"
        ker.export_norm_table(nt, path)
        rows = path.read_text().strip().split("\n")
        assert rows[0] == "a,b,norm2"
        assert len(rows) == 1 + 16
        a, b, v = rows[1].split(",")
        assert (int(a), int(b)) == (0, 0)
        assert float(v) == nt[0, 0]


class TestKernelEvaluator:
    def test_disk_center_value(self):
        ev = ker.KernelEvaluator(DISK)
        assert ev(0, 0) == pytest.approx(1 / math.pi)

    def test_disk_constant_in_z_against_zero(self):
        ev = ker.KernelEvaluator(DISK)
        for z in (0.3, -0.5j, 0.8):
            assert ev(z, 0) == pytest.approx(1 / math.pi)

    def test_conjugate_symmetry(self):
        rng = np.random.default_rng(2)
        for ev in (ker.KernelEvaluator(DISK), ker.KernelEvaluator(BALL),
                   ker.KernelEvaluator(geo.ProductDisk(2))):
            n = ev.domain.dimension
            Z = 0.7 * quad._sphere_dirs(rng, 50, n) * rng.uniform(0, 1, 50)[:, None]
            W = 0.7 * quad._sphere_dirs(rng, 50, n) * rng.uniform(0, 1, 50)[:, None]
            k1, _ = ev.eval_batch(Z, W)
            k2, _ = ev.eval_batch(W, Z)
            assert np.allclose(k1, np.conj(k2), rtol=1e-12)

    def test_diagonal_blowup_along_ray(self):
        ev = ker.KernelEvaluator(DISK)
        vals = [abs(ev(r, r)) for r in (0.0, 0.5, 0.9, 0.99)]
        assert all(vals[i] < vals[i + 1] for i in range(3))

    def test_cross_validation_egg1_vs_ball(self):
        ev_b = ker.KernelEvaluator(EGG1, mode="basis", max_degree=60)
        ev_c = ker.KernelEvaluator(BALL, mode="closed")
        rng = np.random.default_rng(7)
        Z = quad._sphere_dirs(rng, 100, 2) * (0.6 * rng.uniform(0, 1, 100)[:, None])
        W = quad._sphere_dirs(rng, 100, 2) * (0.6 * rng.uniform(0, 1, 100)[:, None])
        kb, fl = ev_b.eval_batch(Z, W)
        kc, _ = ev_c.eval_batch(Z, W)
        assert not fl.any()
        assert np.max(np.abs(kb - kc) / np.abs(kc)) <= 1e-6

    def test_truncation_budget_flags_near_boundary(self):
        ev = ker.KernelEvaluator(EGG2, mode="basis", max_degree=20)
        with pytest.warns(ker.TruncationWarning):
            ev([0.97, 0.0], [0.97, 0.0])

    def test_mode_validation(self):
        with pytest.raises(ker.KernelError):
            ker.KernelEvaluator(EGG2, mode="closed")
        with pytest.raises(ker.KernelError):
            ker.KernelEvaluator(DISK, mode="basis")
        with pytest.raises(ker.KernelError):
            ker.KernelEvaluator(DISK, mode="fancy")

    def test_product_disk_factorizes(self):
        prod = geo.ProductDisk(2)
        ev = ker.KernelEvaluator(prod)
        ev1 = ker.KernelEvaluator(DISK)
        z = [0.3 + 0.1j, -0.2]
        w = [0.1, 0.4j]
        expected = ev1(z[0], w[0]) * ev1(z[1], w[1])
        assert ev(z, w) == pytest.approx(expected)

    def test_reproducing_self_consistency(self):
        # int K(z,w) K(w,u) dmu(w) = K(z,u) at interior pairs
        ev = ker.KernelEvaluator(DISK)
        pg = quad.QuadratureSpec(strategy="polar_gauss", radial_nodes=64,
                                 angular_nodes=64, n_samples=1,
                                 rel_tolerance=1e-8, seed=1)
        pts = quad._polar_gauss_points(DISK, pg)
        rng = np.random.default_rng(2)
        for _ in range(5):
            z = complex(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6))
            u = complex(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6))
            kzw, _ = ev.eval_batch(np.full((len(pts.points), 1), z), pts.points)
            kwu, _ = ev.eval_batch(pts.points, np.full((len(pts.points), 1), u))
            lhs = np.sum(pts.weights * kzw * kwu)
            assert abs(lhs - ev(z, u)) / abs(ev(z, u)) <= 1e-10


class TestSizeProbes:
    SAMP = ker.PairSampler(n_pairs=600, seed=1)

    def test_size_finite_and_stable(self):
        ev = ker.KernelEvaluator(DISK)
        f1 = ker.size_probe(ev, self.SAMP, SPEC)
        f2 = ker.size_probe(ev, ker.PairSampler(n_pairs=1200, seed=2), SPEC)
        assert math.isfinite(f1.constant) and f1.constant > 0
        assert abs(f1.constant - f2.constant) / f1.constant <= 0.20

    def test_degenerate_pairs_skipped(self):
        ev = ker.KernelEvaluator(DISK)

        def sampler(domain):
            Z = np.array([[0.5 + 0j], [0.6 + 0j], [0.55 + 0.1j]])
            return np.vstack([Z, Z[:1]]), np.vstack([Z, Z[:1]])  # all z = w

        with pytest.raises(ker.KernelError):
            ker.size_probe(ev, sampler, SPEC)

    def test_ball_size_consistent_with_cubed_distance(self):
        # mu(B) ~ r^3 on the ball, so |K| d^3 should be bounded too
        ev = ker.KernelEvaluator(BALL)
        samp = ker.PairSampler(n_pairs=400, seed=3)
        Z, W = samp(BALL)
        d = BALL.metric(Z, W)
        K, _ = ev.eval_batch(Z, W)
        assert np.max(np.abs(K) * d ** 3) < 50.0

    def test_boundary_size_disk_remark_form(self):
        # |K(z,w)| <= C / (1 - |z|)^2 over sampled pairs
        ev = ker.KernelEvaluator(DISK)
        Z, W = self.SAMP(DISK)
        K, _ = ev.eval_batch(Z, W)
        bound = np.abs(K) * (1 - np.abs(Z[:, 0])) ** 2
        assert np.max(bound) < 10.0

    def test_boundary_size_min_structure(self):
        # z far interior, w near boundary: the bound follows the z factor
        ev = ker.KernelEvaluator(DISK)
        z = np.array([[0.1 + 0j]])
        w = np.array([[0.999 + 0j]])
        K = abs(ev(z[0], w[0]))
        bz = float(DISK.quasi_boundary_distance(z)[0])
        mu_z = geo.quasi_ball_measure(DISK, geo.QuasiBall(z[0], bz, "ball"),
                                      SPEC).real
        assert K * mu_z < 2.0  # the z-side factor keeps the product small


class TestSmoothness:
    def test_disk_nu_near_one(self):
        ev = ker.KernelEvaluator(DISK)
        fit = ker.smoothness_probe(ev, ker.PairSampler(n_pairs=800, seed=2),
                                   4.0, SPEC)
        assert fit.exponent >= 0.5

    def test_stable_under_c2_doubling(self):
        ev = ker.KernelEvaluator(DISK)
        f4 = ker.smoothness_probe(ev, ker.PairSampler(n_pairs=800, seed=2),
                                  4.0, SPEC)
        f8 = ker.smoothness_probe(ev, ker.PairSampler(n_pairs=800, seed=2),
                                  8.0, SPEC)
        assert abs(f4.exponent - f8.exponent) <= 0.2


class TestDerivativeProbe:
    def test_alpha_zero_consistent_with_size(self):
        # in the separation-dominated regime delta ~ M(z,w), the two bound
        # normalizations agree within a bounded factor
        ev = ker.KernelEvaluator(DISK)
        samp = ker.PairSampler(n_pairs=500, seed=1, sep_mult_range=(8.0, 32.0))
        d0 = ker.derivative_probe(ev, samp, SPEC, direction=None)
        sz = ker.size_probe(ev, samp, SPEC)
        assert 0.25 <= d0.constant / sz.constant <= 4.0

    def test_disk_first_derivative_stable(self):
        ev = ker.KernelEvaluator(DISK)
        f1 = ker.derivative_probe(ev, ker.PairSampler(n_pairs=500, seed=1),
                                  SPEC, direction=1)
        f2 = ker.derivative_probe(ev, ker.PairSampler(n_pairs=1000, seed=2),
                                  SPEC, direction=1)
        assert math.isfinite(f1.constant)
        assert abs(f1.constant - f2.constant) / f1.constant <= 0.3

    def test_w_side_matches_z_side_scale(self):
        ev = ker.KernelEvaluator(DISK)
        samp = ker.PairSampler(n_pairs=500, seed=1)
        fz = ker.derivative_probe(ev, samp, SPEC, direction=1, side="z")
        fw = ker.derivative_probe(ev, samp, SPEC, direction=1, side="w")
        assert 0.25 <= fz.constant / fw.constant <= 4.0

    def test_egg_flat_point_tangential_scaling(self):
        # normalized by delta^2 tau2^2 * tau2, the tangential derivative
        # statistic is flat in depth; without the tau2^(-3) = delta^(-3/4)
        # growth the normalization would drift across this depth range
        ev = ker.KernelEvaluator(EGG2, mode="basis", max_degree=50)

        def flat_sampler(depth):
            def fn(domain):
                a = np.full(8, depth)
                Z = np.stack([1.0 - a, np.zeros(8)], axis=1).astype(complex)
                W = Z.copy()
                W[:, 1] += 0.3 * a ** 0.25
                return Z, W
            return fn

        stats = [ker.derivative_probe(ev, flat_sampler(dep), SPEC,
                                      direction=2).constant
                 for dep in (0.2, 0.3, 0.45)]
        assert max(stats) / min(stats) <= 2.0

    def test_bad_direction(self):
        ev = ker.KernelEvaluator(DISK)
        with pytest.raises(ker.KernelError):
            ker.derivative_probe(ev, self_samp(), SPEC, direction=5)


def self_samp():
    return ker.PairSampler(n_pairs=50, seed=1)


class TestLowerBound:
    def test_disk_inf_positive_and_stable(self):
        ev = ker.KernelEvaluator(DISK)
        samp = ker.PairSampler(n_pairs=800, seed=4, sep_mult_range=(5.0, 40.0))
        fit = ker.lower_bound_probe(ev, 0.2, samp, SPEC)
        assert fit.constant >= 0.01
        fit2 = ker.lower_bound_probe(
            ev, 0.2, ker.PairSampler(n_pairs=1600, seed=5,
                                     sep_mult_range=(5.0, 40.0)), SPEC)
        assert abs(fit.constant - fit2.constant) / fit.constant <= 0.5

    def test_hypothesis_filter_counts(self):
        ev = ker.KernelEvaluator(DISK)
        samp = ker.PairSampler(n_pairs=400, seed=4, sep_mult_range=(1.0, 40.0))
        fit = ker.lower_bound_probe(ev, 0.2, samp, SPEC)
        assert fit.excluded > 0

    def test_no_admissible_pairs(self):
        ev = ker.KernelEvaluator(DISK)
        samp = ker.PairSampler(n_pairs=50, seed=4, sep_mult_range=(1.0, 1.5))
        with pytest.raises(ker.KernelError):
            ker.lower_bound_probe(ev, 0.01, samp, SPEC)

    def test_ball_inf_positive(self):
        ev = ker.KernelEvaluator(BALL)
        samp = ker.PairSampler(n_pairs=600, seed=6, sep_mult_range=(5.0, 30.0))
        fit = ker.lower_bound_probe(ev, 0.2, samp, SPEC)
        assert fit.constant > 0
