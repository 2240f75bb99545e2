"""Bergman projection, positive operator, maximal function, and experiments.

The projection P f(z) = int K(z,w) f(w) dmu(w) and its positive companion
P+ (kernel |K|) are realized by quadrature; the boundary-ball maximal
function M is realized as a max of averages over a precomputed seeded
family of boundary-touching quasi-balls (a certified lower bound for the
true sup). On top of these sit the weighted-norm ratio estimator, the
good-lambda experiment, the regularizer lemma suite, the two-ball kernel
lower bound, and the B_p necessity probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import quadrature as quad
from . import weights as wt
from .geometry import Domain, GeometryError, QuasiBall, as_point, as_points
from .kernels import KernelEvaluator, KernelError
from .quadrature import QuadratureSpec, substream

__all__ = [
    "OperatorError",
    "TestFunction",
    "holo_poly",
    "anti_holo",
    "indicator_ball",
    "weighted_indicator",
    "random_bump",
    "bergman_project",
    "positive_project",
    "MaximalFamilySpec",
    "MaximalEstimator",
    "maximal_function",
    "weighted_norm_ratio",
    "NormRatioReport",
    "GoodLambdaReport",
    "good_lambda_experiment",
    "LemmaSuiteReport",
    "regularizer_lemma_suite",
    "TwoBallResult",
    "two_ball_lower_bound",
    "NecessityRow",
    "necessity_probe",
]

CHUNK = 2048   # row-chunking for kernel matrices


class OperatorError(Exception):
    pass


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """A bounded-on-interior test function; fn maps (m, n) points to (m,)."""

    fn: object
    tag: str
    support_ball: QuasiBall | None = None

    def __call__(self, Z) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(np.asarray(Z, dtype=complex))))


def holo_poly(coeffs: dict) -> TestFunction:
    """Holomorphic polynomial sum c_alpha z^alpha; alpha a multi-index tuple."""
    items = [(tuple(a), complex(c)) for a, c in coeffs.items()]

    def fn(Z):
        out = np.zeros(Z.shape[0], dtype=complex)
        for alpha, c in items:
            term = np.full(Z.shape[0], c, dtype=complex)
            for j, a in enumerate(alpha):
                if a:
                    term = term * Z[:, j] ** a
            out += term
        return out

    return TestFunction(fn, f"holo_poly[{len(items)} terms]")


def anti_holo(k: int, coord: int = 0) -> TestFunction:
    """conj(w_coord)^k, annihilated by the projection for k >= 1."""
    return TestFunction(lambda Z: np.conj(Z[:, coord]) ** k, f"anti_holo[{k}]")


def indicator_ball(domain: Domain, ball: QuasiBall) -> TestFunction:
    def fn(Z):
        return (domain.metric(Z, ball.center) < ball.radius).astype(float)
    return TestFunction(fn, f"chi_B(r={ball.radius:g})", support_ball=ball)


def weighted_indicator(domain: Domain, sigma_dual: wt.Weight,
                       ball: QuasiBall) -> TestFunction:
    def fn(Z):
        inside = domain.metric(Z, ball.center) < ball.radius
        out = np.zeros(Z.shape[0])
        if inside.any():
            out[inside] = sigma_dual.eval(Z[inside])
        return out
    return TestFunction(fn, f"sigma'chi_B(r={ball.radius:g})", support_ball=ball)


def random_bump(domain: Domain, seed: int) -> TestFunction:
    """Gaussian bump at a seeded interior location."""
    rng = substream(seed, 0xB07)
    c = geo._uniform_interior(domain, rng, 1)[0] * 0.9
    s = float(rng.uniform(0.08, 0.5))
    amp = float(rng.uniform(0.5, 2.0))

    def fn(Z):
        return amp * np.exp(-np.sum(np.abs(Z - c[None, :]) ** 2, axis=-1) / s ** 2)

    return TestFunction(fn, f"bump[{seed}]")


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def _kernel_matrix(ev: KernelEvaluator, Z: np.ndarray, W: np.ndarray) -> np.ndarray:
    """K(z_i, w_j) for closed-form evaluators, (nz, nw)."""
    d = ev.domain
    if ev.mode != "closed":
        raise KernelError("kernel matrices require a closed-form evaluator")
    if d.kind == "disk":
        return 1.0 / (math.pi * (1.0 - np.outer(Z[:, 0], np.conj(W[:, 0]))) ** 2)
    if d.kind == "ball" or (d.kind == "egg" and d.m == 1):
        n = 2 if d.kind == "egg" else d.dimension
        inner = Z @ np.conj(W.T)
        return (math.factorial(n) / math.pi ** n) / (1.0 - inner) ** (n + 1)
    if d.kind == "product":
        out = np.ones((Z.shape[0], W.shape[0]), dtype=complex)
        for j in range(d.dimension):
            out /= math.pi * (1.0 - np.outer(Z[:, j], np.conj(W[:, j]))) ** 2
        return out
    raise KernelError(f"no closed-form kernel matrix for {d.kind}")


def _project_grid(ev: KernelEvaluator, f_vals: np.ndarray, W: np.ndarray,
                  w_weights: np.ndarray, Z: np.ndarray,
                  positive: bool = False) -> np.ndarray:
    """(P f)(z_i) or (P+ f)(z_i) from precomputed integrand nodes, chunked."""
    out = np.empty((Z.shape[0],) + f_vals.shape[1:], dtype=complex)
    wf = (w_weights[:, None] * f_vals) if f_vals.ndim == 2 else (w_weights * f_vals)
    for i in range(0, Z.shape[0], CHUNK):
        K = _kernel_matrix(ev, Z[i:i + CHUNK], W)
        if positive:
            K = np.abs(K)
        out[i:i + CHUNK] = K @ wf
    return out


def bergman_project(ev: KernelEvaluator, f: TestFunction, z,
                    spec: QuadratureSpec) -> quad.IntegralEstimate:
    """P f(z) = int_Omega K(z, w) f(w) dmu(w), with quadrature error."""
    zp = as_point(z, ev.domain.dimension)

    def integrand(W):
        K, _ = ev.eval_batch(np.broadcast_to(zp, W.shape), W)
        return K * f(W)

    return quad.integrate(ev.domain, integrand, spec)


def positive_project(ev: KernelEvaluator, f: TestFunction, z,
                     spec: QuadratureSpec) -> quad.IntegralEstimate:
    """P+ f(z) = int_Omega |K(z, w)| f(w) dmu(w)."""
    zp = as_point(z, ev.domain.dimension)

    def integrand(W):
        K, _ = ev.eval_batch(np.broadcast_to(zp, W.shape), W)
        return np.abs(K) * f(W)

    return quad.integrate(ev.domain, integrand, spec)


def _support_nodes(domain: Domain, f: TestFunction,
                   spec: QuadratureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Integration nodes adapted to f: its support ball when it has one."""
    if f.support_ball is not None:
        pts = quad.sample_ball_region(domain, f.support_ball,
                                      spec.with_(strategy="stratified"
                                                 if domain.is_radial else spec.strategy))
        return pts.points, pts.weights
    pts = quad.sample_domain(domain, spec)
    return pts.points, pts.weights


# ---------------------------------------------------------------------------
# maximal function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaximalFamilySpec:
    n_directions: int = 160
    n_scales: int = 11          # ball radii 2^0 .. 2^-(n_scales-1)
    depth_fraction: float = 0.5
    inner_samples: int = 320
    seed: int = 0
    include_global: bool = True  # add huge balls so every point is covered


class MaximalEstimator:
    """Max of ball averages over a seeded boundary-touching family.

    All per-ball sample points are precomputed and concatenated, so a new
    test function costs one vectorized evaluation plus a segmented
    reduction. Values are lower bounds for the true maximal function and
    refine monotonically as the family grows.
    """

    def __init__(self, domain: Domain, fspec: MaximalFamilySpec,
                 spec: QuadratureSpec):
        self.domain = domain
        self.fspec = fspec
        rng = substream(fspec.seed, 0x4A)
        dirs = quad._sphere_dirs(rng, fspec.n_directions, domain.dimension)
        centers, radii = [], []
        for j in range(fspec.n_scales):
            s = 2.0 ** (-j)
            for i in range(fspec.n_directions):
                centers.append(wt._point_at_depth(domain, dirs[i],
                                                  fspec.depth_fraction * s))
                radii.append(s)
        if fspec.include_global:
            # global balls containing every point, so evaluate() never fails
            for i in range(min(8, fspec.n_directions)):
                centers.append(wt._point_at_depth(domain, dirs[i], 0.4))
                radii.append(3.5)
        self.centers = np.asarray(centers)
        self.radii = np.asarray(radii)
        pts_list, w_list, ids = [], [], []
        for b in range(len(radii)):
            seed_b = int(np.random.SeedSequence(
                entropy=spec.seed, spawn_key=(0x4B, b)).generate_state(1)[0])
            ball = QuasiBall(self.centers[b], float(self.radii[b]), domain.metric_tag)
            ps = quad.sample_ball_region(
                domain, ball,
                spec.with_(seed=seed_b, n_samples=fspec.inner_samples,
                           strategy="stratified" if domain.is_radial else "uniform"))
            member = domain.metric(ps.points, ball.center) < ball.radius
            # drop measure-zero points hugging the boundary; they poison
            # downstream vanishing-radius ball evaluations
            member &= domain.euclid_boundary_distance(ps.points) > 1e-12
            pts_list.append(ps.points[member])
            w_list.append(ps.weights[member])
            ids.append(np.full(int(member.sum()), b))
        self.pts = np.vstack(pts_list)
        self.w = np.concatenate(w_list)
        self.ids = np.concatenate(ids)
        self.n_balls = len(radii)
        self.offsets = np.searchsorted(self.ids, np.arange(self.n_balls + 1))
        self.denom = np.bincount(self.ids, weights=self.w, minlength=self.n_balls)
        if np.any(self.denom <= 0):
            raise OperatorError("maximal family contains an unresolved ball")

    def averages(self, f) -> np.ndarray:
        """<|f|>_B for every family ball."""
        vals = np.abs(np.asarray(f(self.pts)))
        num = np.bincount(self.ids, weights=self.w * vals, minlength=self.n_balls)
        return num / self.denom

    def containment(self, Z) -> np.ndarray:
        """Boolean (m, n_balls) matrix of ball membership, chunk-built."""
        Zp = as_points(Z, self.domain.dimension)
        out = np.empty((Zp.shape[0], self.n_balls), dtype=bool)
        for i in range(0, Zp.shape[0], CHUNK):
            zc = Zp[i:i + CHUNK]
            d = self.domain.metric(zc[:, None, :], self.centers[None, :, :])
            out[i:i + CHUNK] = d < self.radii[None, :]
        return out

    def evaluate(self, f, Z, averages: np.ndarray | None = None,
                 contained: np.ndarray | None = None) -> np.ndarray:
        """M f at each point of Z: max average over containing balls."""
        avg = self.averages(f) if averages is None else averages
        if contained is None:
            contained = self.containment(Z)
        out = np.max(np.where(contained, avg[None, :], -np.inf), axis=1)
        if np.any(~np.isfinite(out)):
            raise OperatorError("a point is contained in no admissible family ball")
        return out

    def evaluate_single(self, f, z0: np.ndarray) -> float:
        """M f at one point, evaluating f only on the containing balls.

        This is the cheap path when f itself is expensive (e.g. a
        regularized weight computed by inner quadrature).
        """
        row = self.containment(z0[None, :])[0]
        balls = np.flatnonzero(row)
        if balls.size == 0:
            raise OperatorError("the point is contained in no family ball")
        segs = [np.arange(self.offsets[b], self.offsets[b + 1]) for b in balls]
        idx = np.concatenate(segs)
        vals = np.abs(np.asarray(f(self.pts[idx])))
        best, pos = -math.inf, 0
        for b, s in zip(balls, segs):
            v = vals[pos:pos + len(s)]
            best = max(best, float(np.sum(self.w[s] * v) / self.denom[b]))
            pos += len(s)
        return best


_MAXIMAL_CACHE: dict = {}


def _maximal_estimator(domain: Domain, fspec: MaximalFamilySpec,
                       spec: QuadratureSpec) -> MaximalEstimator:
    key = (domain.kind, domain.dimension, getattr(domain, "m", 0),
           fspec, spec.seed, spec.n_samples)
    if key not in _MAXIMAL_CACHE:
        _MAXIMAL_CACHE[key] = MaximalEstimator(domain, fspec, spec)
    return _MAXIMAL_CACHE[key]


def maximal_function(domain: Domain, f: TestFunction, z,
                     fspec: MaximalFamilySpec, spec: QuadratureSpec) -> float:
    """M f(z): sup of <|f|>_B over boundary-touching balls containing z.

    Reported as a family lower bound; errors if no family ball contains z.
    """
    est = _maximal_estimator(domain, fspec, spec)
    zp = as_point(z, domain.dimension)
    return float(est.evaluate(f, zp[None, :])[0])


# ---------------------------------------------------------------------------
# weighted norm ratios
# ---------------------------------------------------------------------------

@dataclass
class NormRatioReport:
    op_tag: str
    sup_ratio: float
    per_function: list
    excluded: int
    n_grid: int


def _inner_projection_nodes(domain: Domain, spec: QuadratureSpec
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic inner nodes for P/P+ on grids.

    Gauss-Legendre radial nodes resolve the kernel peak near the boundary;
    the angular count bounds how deep probe points may sit (aliasing decays
    like |z|^angular_nodes for smooth integrands).
    """
    if domain.kind == "disk":
        ispec = spec.with_(strategy="polar_gauss", radial_nodes=48, angular_nodes=192)
    elif domain.kind == "ball" and domain.dimension == 2:
        ispec = spec.with_(strategy="polar_gauss", radial_nodes=12, angular_nodes=20)
    else:
        pts = quad.sample_domain(domain, spec.with_(
            strategy="stratified" if domain.kind == "egg" else "uniform",
            n_samples=max(spec.n_samples, 20000)))
        return pts.points, pts.weights
    pts = quad._polar_gauss_points(domain, ispec)
    return pts.points, pts.weights


def weighted_norm_ratio(op_tag: str, ev: KernelEvaluator, sigma: wt.Weight,
                        p: float, f_bundle: list[TestFunction],
                        spec: QuadratureSpec,
                        fspec: MaximalFamilySpec | None = None,
                        depth_floor: float = 0.02) -> NormRatioReport:
    """sup over the bundle of ||T f||_{L^p_sigma} / ||f||_{L^p_sigma}.

    T is P, P+ or M. Norms are computed on a fixed probe grid kept
    depth_floor inside the boundary; P and P+ use a deterministic inner
    rule whose accuracy at the probe points is uniform over the bundle.
    """
    if op_tag not in ("P", "P+", "M"):
        raise OperatorError(f"unknown operator tag {op_tag!r}")
    if not f_bundle:
        raise OperatorError("empty test-function bundle")
    domain = ev.domain
    gspec = spec.with_(depth_floor=spec.depth_floor or depth_floor,
                       strategy="stratified" if domain.is_radial else spec.strategy)
    pts = quad.sample_domain(domain, gspec)
    X, w = pts.points, pts.weights
    sig = sigma.eval(X)
    est = _maximal_estimator(domain, fspec or MaximalFamilySpec(seed=spec.seed),
                             spec) if op_tag == "M" else None
    if op_tag in ("P", "P+"):
        W_in, w_in = _inner_projection_nodes(domain, spec)

    def norm_p(vals):
        return float(np.sum(w * sig * np.abs(vals) ** p)) ** (1.0 / p)

    norms_f, keep = [], []
    for f in f_bundle:
        nf = norm_p(f(X))
        norms_f.append(nf)
        keep.append(nf > 0)
    excluded = int(len(f_bundle) - sum(keep))
    if not any(keep):
        raise OperatorError("all bundle functions had zero norm")
    kept = [f for f, k_ in zip(f_bundle, keep) if k_]
    if op_tag == "M":
        contained = est.containment(X)
        t_norms = [norm_p(est.evaluate(f, X, contained=contained)) for f in kept]
    else:
        # one kernel-matrix pass over the whole bundle
        F = np.stack([np.asarray(f(W_in), dtype=complex) for f in kept], axis=1)
        TV = _project_grid(ev, F, W_in, w_in, X, positive=(op_tag == "P+"))
        t_norms = [norm_p(TV[:, j]) for j in range(TV.shape[1])]
    ratios = [(f.tag, tn / nf) for f, tn, nf in
              zip(kept, t_norms, [n for n in norms_f if n > 0])]
    return NormRatioReport(op_tag, float(max(r for _, r in ratios)), ratios,
                           excluded, X.shape[0])


# ---------------------------------------------------------------------------
# good-lambda experiment
# ---------------------------------------------------------------------------

@dataclass
class GoodLambdaReport:
    gamma_grid: list
    lambda_grid: list
    ratio_table: np.ndarray      # (n_lambda, n_gamma), NaN = undefined cell
    se_table: np.ndarray
    fitted_exponent: float
    fitted_c: float
    m_used: float
    n_points: int


def good_lambda_experiment(ev: KernelEvaluator, f: TestFunction,
                           sigma: wt.Weight, p: float, gamma_grid, lambda_grid,
                           spec: QuadratureSpec,
                           fspec: MaximalFamilySpec | None = None,
                           lambda_quantiles: bool = False) -> GoodLambdaReport:
    """Empirical good-lambda table for P+ against M.

    Each cell is sigma({P+f > 2 lambda, M f <= gamma lambda}) /
    sigma({P+f > lambda}); the exponent is fitted on log ratio vs log gamma
    (averaging over lambda). With lambda_quantiles=True the lambda grid is
    read as quantile levels of the sampled P+f distribution.
    """
    domain = ev.domain
    fvals_probe = np.abs(f(quad.sample_domain(
        domain, spec.with_(n_samples=512)).points))
    if np.max(fvals_probe) == 0 and f.support_ball is None:
        table = np.full((len(lambda_grid), len(gamma_grid)), np.nan)
        return GoodLambdaReport(list(gamma_grid), list(lambda_grid), table,
                                table.copy(), math.nan, math.nan,
                                geo.calibrate(domain).m, 0)
    pts = quad.sample_domain(domain, spec)
    X, w, groups = pts.points, pts.weights, pts.groups
    W, ww = _support_nodes(domain, f, spec.with_(seed=spec.seed + 1,
                                                 n_samples=max(spec.n_samples // 8, 2000)))
    fw = np.abs(np.asarray(f(W), dtype=float))
    pf = np.abs(_project_grid(ev, fw.astype(complex), W, ww, X, positive=True))
    est = _maximal_estimator(domain, fspec or MaximalFamilySpec(seed=spec.seed), spec)
    mf = est.evaluate(f, X)
    sig = sigma.eval(X) * w
    lambdas = list(lambda_grid)
    if lambda_quantiles:
        pos = pf[pf > 0]
        lambdas = [float(np.quantile(pos, q)) for q in lambda_grid]
    norm_l, nroot = len(lambdas), len(gamma_grid)
    table = np.full((norm_l, nroot), np.nan)
    se_tab = np.full((norm_l, nroot), np.nan)
    for a, lam in enumerate(lambdas):
        den_mask = pf > lam
        den = float(np.sum(sig[den_mask]))
        if den <= 0:
            continue
        for b, gam in enumerate(gamma_grid):
            num_mask = (pf > 2.0 * lam) & (mf <= gam * lam)
            num = float(np.sum(sig[num_mask]))
            table[a, b] = num / den
            se_num = quad._group_se(num_mask.astype(float) * sigma.eval(X), w,
                                    groups, pts.n_groups)
            se_den = quad._group_se(den_mask.astype(float) * sigma.eval(X), w,
                                    groups, pts.n_groups)
            se_tab[a, b] = (table[a, b] * math.hypot(se_num / max(num, 1e-300),
                                                     se_den / max(den, 1e-300))
                            if num > 0 else se_num / max(den, 1e-300))
    mean_ratio = np.nanmean(table, axis=0)
    fit_mask = np.isfinite(mean_ratio) & (mean_ratio > 0)
    if fit_mask.sum() >= 2:
        slope, intercept = np.polyfit(np.log(np.asarray(gamma_grid)[fit_mask]),
                                      np.log(mean_ratio[fit_mask]), 1)
        expo, const = float(slope), float(np.exp(intercept))
    else:
        expo, const = math.nan, math.nan
    return GoodLambdaReport(list(gamma_grid), lambdas, table, se_tab,
                            expo, const, geo.calibrate(domain).m, X.shape[0])


# ---------------------------------------------------------------------------
# regularizer lemma suite
# ---------------------------------------------------------------------------

@dataclass
class LemmaSuiteReport:
    k: float
    k_prime: float
    lemma4_max_ratio: float       # M f <~ M(R_k f) at sampled z0
    lemma5_max_ratio: float       # int f R_k(g) <~ int R_k'(f) g
    lemma6_max_abslog: float      # R_k(M g) ~= M g
    prop3_containment: float      # fraction of z' in B_k(z) with z in B_k'(z')
    prop4_alpha_max: float        # dilation needed for B~ to swallow B_k(w)
    n_instances: int


def regularizer_lemma_suite(domain: Domain, k: float, n_instances: int,
                            seed: int, spec: QuadratureSpec,
                            fspec: MaximalFamilySpec | None = None) -> LemmaSuiteReport:
    """Max LHS/RHS ratios for the regularizer lemmas on random instances."""
    cal = geo.calibrate(domain)
    kp = cal.k_prime(k)
    fspec = fspec or MaximalFamilySpec(n_directions=96, n_scales=10,
                                       inner_samples=192, seed=seed)
    est = _maximal_estimator(domain, fspec, spec)
    rng = substream(seed, 0x13A)
    grid = quad.sample_domain(domain, spec.with_(
        strategy="stratified" if domain.is_radial else "uniform",
        n_samples=1500, seed=seed + 17))
    r4 = r5 = r6 = p4 = 0.0
    p3_ok = p3_tot = 0
    for inst in range(n_instances):
        f = _suite_function(domain, rng)
        g = _suite_function(domain, rng)
        depth = math.exp(rng.uniform(math.log(5e-3), math.log(0.3)))
        z0 = wt._point_at_depth(domain, quad._sphere_dirs(rng, 1, domain.dimension)[0],
                                depth)
        ispec = spec.with_(seed=seed + 1000 + inst)
        # Lemma 4: M f(z0) <= C M(R_k f)(z0)
        mf0 = est.evaluate_single(f, z0)
        m_rkf0 = est.evaluate_single(
            lambda Z, _f=f: np.abs(wt.regularize_batch(
                domain, _weight_of(_f), k, Z, ispec, n_inner=96)), z0)
        if m_rkf0 > 0:
            r4 = max(r4, mf0 / m_rkf0)
        # Lemma 5: int f R_k(g) <= C int R_k'(f) g. Each side concentrates
        # on the outer factor's support, or on the k-reach of the inner
        # indicator's support; localized patches resolve what a global grid
        # undersamples
        def side_nodes(outer, inner):
            ball = outer.support_ball
            if ball is None and inner.support_ball is not None:
                ib = inner.support_ball
                ball = QuasiBall(ib.center, 3.0 * ib.radius, ib.metric_tag)
            if ball is None:
                return grid.points, grid.weights
            ps = quad.sample_ball_region(
                domain, ball,
                ispec.with_(n_samples=600,
                            strategy="stratified" if domain.is_radial
                            else "uniform"))
            inside = domain.metric(ps.points, ball.center) < ball.radius
            return ps.points[inside], ps.weights[inside]

        Xf, wf = side_nodes(f, g)
        Xg, wg = side_nodes(g, f)
        fv = np.abs(np.asarray(f(Xf), dtype=float))
        gv = np.abs(np.asarray(g(Xg), dtype=float))
        rk_g = wt.regularize_batch(domain, _weight_of(g), k, Xf,
                                   ispec, n_inner=96)
        rkp_f = wt.regularize_batch(domain, _weight_of(f), kp, Xg,
                                    ispec.with_(seed=ispec.seed + 1), n_inner=96)
        lhs = float(np.sum(wf * fv * rk_g))
        rhs = float(np.sum(wg * rkp_f * gv))
        if rhs > 1e-12 * max(lhs, 1.0):
            r5 = max(r5, lhs / rhs)
        # Lemma 6: R_k(M g)(z0) ~= M g(z0)
        g_avgs = est.averages(g)
        mg = lambda Z, _a=g_avgs: est.evaluate(g, Z, averages=_a)
        rk_mg = wt.regularize_batch(domain, wt.Weight(mg, 2.0), k,
                                    z0[None, :], ispec, n_inner=96)[0]
        mg0 = est.evaluate(g, z0[None, :], averages=g_avgs)[0]
        if mg0 > 0 and rk_mg > 0:
            r6 = max(r6, abs(math.log(rk_mg / mg0)))
        # Proposition 3 containment
        bd0 = float(domain.quasi_boundary_distance(z0[None, :])[0])
        zp = _points_in_ball(domain, z0, k * bd0, rng, 24)
        if len(zp):
            dzp = domain.metric(zp, z0)
            bdp = domain.quasi_boundary_distance(zp)
            p3_ok += int(np.sum(dzp < kp * bdp))
            p3_tot += len(zp)
        # Proposition 4: inflate a touching ball to swallow its B_k(w)
        r_ball = bd0 * float(rng.uniform(1.1, 2.5))
        ws = _points_in_ball(domain, z0, r_ball, rng, 24)
        if len(ws):
            bws = domain.quasi_boundary_distance(ws)
            for wpt, bw in zip(ws[:8], bws[:8]):
                xs = _points_in_ball(domain, wpt, k * bw, rng, 8)
                if len(xs):
                    p4 = max(p4, float(np.max(domain.metric(xs, z0))) / r_ball)
    return LemmaSuiteReport(k, kp, r4, r5, r6,
                            p3_ok / max(p3_tot, 1), p4, n_instances)


def _weight_of(f: TestFunction) -> wt.Weight:
    return wt.Weight(lambda Z, _f=f: np.abs(np.asarray(_f(Z), dtype=complex)).astype(float),
                     p=2.0, tag=f.tag)


def _suite_function(domain: Domain, rng) -> TestFunction:
    kind = rng.integers(0, 3)
    seed = int(rng.integers(0, 2 ** 31))
    if kind == 0:
        return random_bump(domain, seed)
    if kind == 1:
        t = float(rng.uniform(-0.3, 1.0))
        w = wt.power_weight(t, 2.0)
        return TestFunction(lambda Z: w.eval(Z), f"power[{t:.2f}]")
    depth = math.exp(rng.uniform(math.log(0.01), math.log(0.3)))
    c = wt._point_at_depth(domain, quad._sphere_dirs(rng, 1, domain.dimension)[0],
                           depth)
    ball = QuasiBall(c, 2.0 * depth, domain.metric_tag)
    return indicator_ball(domain, ball)


def _points_in_ball(domain: Domain, center: np.ndarray, radius: float,
                    rng, count: int) -> np.ndarray:
    """A few interior points of B(center, radius), by frame-box rejection."""
    basis, halfw = domain.ball_sampling_frames(center[None, :],
                                               np.array([radius]))
    basis, halfw = basis[0], halfw[0]
    for _ in range(12):
        u = rng.uniform(-1, 1, size=(8 * count, 2 * domain.dimension))
        off = (u[:, 0::2] * halfw[None, :, 0]
               + 1j * u[:, 1::2] * halfw[None, :, 1])
        X = center[None, :] + off @ basis
        keep = domain.contains(X) & (domain.metric(X, center) < radius)
        if keep.sum() >= count:
            return X[keep][:count]
    X = X[keep]
    return X


# ---------------------------------------------------------------------------
# two-ball lower bound and necessity
# ---------------------------------------------------------------------------

@dataclass
class TwoBallResult:
    ball1: QuasiBall
    ball2: QuasiBall
    inf_constant: float
    separation: float
    margin: float


def two_ball_lower_bound(ev: KernelEvaluator, R: float, spec: QuadratureSpec,
                         C2: float = 4.0, sep_factor: float | None = None,
                         annulus_width: float = 0.25, seed: int = 0,
                         direction: np.ndarray | None = None) -> TwoBallResult:
    """Construct the separated ball pair of the kernel lower-bound argument.

    B1 touches the boundary with radius R; B2 (same radius, same depth) is
    scanned over an annulus of quasi-separations sep_factor*R*(1 +-
    annulus_width), keeping candidates whose separation margin
    min d(center1, B2) - C2 * max d(center1, B1) is nonnegative and picking
    the largest margin. Returns the inf over a grid in B2 of
    |P[chi_B1](z)| / <chi_B1>_B1 (the average of chi over B1 is 1).
    """
    domain = ev.domain
    if not domain.is_radial:
        raise OperatorError("two_ball_lower_bound requires the disk or ball")
    n = domain.dimension
    rng = substream(seed, 0x2BA)
    omega = (direction if direction is not None
             else quad._sphere_dirs(rng, 1, n)[0])
    depth = 0.5 * R
    c1 = (1.0 - depth) * omega
    b1 = QuasiBall(c1, R, domain.metric_tag)
    # sample points of B1 once; they carry the quadrature for P[chi_B1]
    pts = quad.sample_ball_region(domain, b1, spec.with_(strategy="stratified"))
    member = domain.metric(pts.points, c1) < R
    W, ww = pts.points[member], pts.weights[member]
    mu1 = float(np.sum(ww))
    if n == 1:
        xi = (1j * omega[0]).reshape(1)
    else:
        xi = quad._sphere_dirs(rng, 1, n)[0]
        xi = xi - np.sum(xi * np.conj(omega)) * omega
        xi /= np.linalg.norm(xi)
    sep = sep_factor if sep_factor is not None else C2
    target = sep * R
    cands = np.linspace(target * (1 - annulus_width), target * (1 + annulus_width), 9)
    d_b1_max = float(np.max(domain.metric(W, c1)))
    best = None
    for d_ang in cands:
        if n == 1:
            # phase rotation: |1 - e^(i phi)| = 2 sin(phi / 2)
            phi = 2.0 * math.asin(min(d_ang, 2.0) / 2.0)
            alpha, om_c, om_s = phi, math.cos(phi), math.sin(phi)
        else:
            # real rotation: |1 - <om2, omega>| = 1 - cos(alpha)
            alpha = math.acos(max(-1.0, 1.0 - min(d_ang, 1.9)))
            om_c, om_s = math.cos(alpha), math.sin(alpha)
        om2 = omega * om_c + xi * om_s
        c2 = (1.0 - depth) * om2
        b2 = QuasiBall(c2, R, domain.metric_tag)
        zg = _points_in_ball(domain, c2, 0.9 * R, rng, 48)
        if not len(zg):
            continue
        margin = float(np.min(domain.metric(zg, c1))) - C2 * d_b1_max
        if margin >= 0 and (best is None or margin > best[0]):
            best = (margin, b2, zg, float(domain.metric(c2[None, :], c1)[0]))
    if best is None:
        raise OperatorError(
            f"no admissible B2 in the annulus {target}*(1 +- {annulus_width})")
    margin, b2, zg, separation = best
    pvals = _project_grid(ev, np.ones(len(W), dtype=complex), W, ww, zg)
    inf_c = float(np.min(np.abs(pvals)))
    return TwoBallResult(b1, b2, inf_c, separation, margin)


@dataclass
class NecessityRow:
    radius: float
    bp_product: float
    ratio_chi: float
    ratio_dual: float

    @property
    def max_ratio(self) -> float:
        return max(self.ratio_chi, self.ratio_dual)


def necessity_probe(ev: KernelEvaluator, sigma: wt.Weight, p: float,
                    radii, spec: QuadratureSpec, C2: float = 4.0,
                    seed: int = 0) -> list[NecessityRow]:
    """Per-radius B_p products on B1 against projection norm ratios.

    For each radius the two-ball pair is built, the per-ball product
    <sigma>_B1 <sigma'>_B1^(p-1) is estimated at resolution radius/8, and
    the ratios ||P f|| / ||f|| in L^p_sigma are computed for f = chi_B2 and
    f = sigma' chi_B1 on a boundary-refined grid of matching resolution.
    """
    domain = ev.domain
    radii = sorted(radii, reverse=True)
    sig_d = wt.dual_weight(wt.Weight(sigma.fn, p, sigma.tag))
    rows = []
    for R in radii:
        tb = two_ball_lower_bound(ev, R, spec, C2=C2, seed=seed)
        floor = R / 8.0
        bspec = spec.with_(depth_floor=floor, strategy="stratified"
                           if domain.is_radial else spec.strategy)
        prod, _, _ = wt._per_ball_product(
            domain, wt.Weight(sigma.fn, p, sigma.tag), tb.ball1, bspec)
        grid = quad.sample_domain(domain, spec.with_(depth_floor=floor,
                                                     strategy="stratified"
                                                     if domain.is_radial else spec.strategy,
                                                     seed=spec.seed + 3))
        X, w = grid.points, grid.weights
        sig_x = sigma.eval(X)

        def norm_p(vals):
            return float(np.sum(w * sig_x * np.abs(vals) ** p)) ** (1.0 / p)

        ratios = []
        for f in (indicator_ball(domain, tb.ball2),
                  weighted_indicator(domain, sig_d, tb.ball1)):
            Wn, wn = _support_nodes(domain, f,
                                    bspec.with_(seed=spec.seed + 11,
                                                n_samples=max(spec.n_samples // 4, 2000)))
            fw = np.asarray(f(Wn), dtype=complex)
            nf = float(np.sum(wn * sigma.eval(Wn) * np.abs(fw) ** p)) ** (1.0 / p)
            if nf <= 0:
                ratios.append(math.nan)
                continue
            pv = _project_grid(ev, fw, Wn, wn, X)
            ratios.append(norm_p(pv) / nf)
        rows.append(NecessityRow(float(R), float(prod), ratios[0], ratios[1]))
    return rows
