"""Weight families, Bekolle-Bonami and A_p characteristics, regularization.

A weight is a positive a.e. function with an exponent p in (1, inf); its
dual is sigma' = sigma^(-1/(p-1)) at the dual exponent q = p/(p-1). The
B_p characteristic is the sup over boundary-touching quasi-balls of
<sigma>_B <sigma'>_B^(p-1); the A_p characteristic drops the touching
constraint. Suprema over infinite ball families are approximated by
deterministic seeded families with a radius floor; the per-ball averages
are resolved down to an absolute boundary-depth floor tied to the family's
smallest radius, so non-integrable duals show up as floor-driven growth
rather than silent truncation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import quadrature as quad
from .geometry import Domain, GeometryError, HypothesisNotMet, QuasiBall, as_points
from .quadrature import QuadratureSpec, substream

__all__ = [
    "WeightError",
    "Weight",
    "power_weight",
    "unit_weight",
    "table_weight",
    "dual_weight",
    "BallFamilySpec",
    "ball_family",
    "BpEstimate",
    "bp_characteristic",
    "ap_characteristic",
    "regularize",
    "regularize_batch",
    "regularized_weight",
    "weight_doubling_probe",
    "duality_identity_check",
]


class WeightError(Exception):
    pass


@dataclass(frozen=True)
class Weight:
    """Positive weight with its exponent p; fn evaluates batches (m, n) -> (m,)."""

    fn: object
    p: float
    tag: str = "custom"

    def __post_init__(self):
        if not self.p > 1.0:
            raise WeightError("weight exponent p must exceed 1")

    def eval(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=complex))
        return np.asarray(self.fn(Z), dtype=float)

    def __call__(self, Z) -> np.ndarray:
        return self.eval(Z)


def power_weight(t: float, p: float = 2.0) -> Weight:
    """sigma(z) = (1 - |z|^2)^t."""
    def fn(Z):
        base = np.maximum(1.0 - np.sum(np.abs(Z) ** 2, axis=-1), 1e-300)
        return base ** t
    return Weight(fn, p, tag=f"power:{t:g}")


def unit_weight(p: float = 2.0) -> Weight:
    return Weight(lambda Z: np.ones(Z.shape[0]), p, tag="unit")


def table_weight(path, p: float = 2.0, dimension: int = 1) -> Weight:
    """Nearest-neighbor weight from a CSV of sample points and values.

    Columns: re_1, im_1, ..., re_n, im_n, value (header row optional).
    """
    from scipy.spatial import cKDTree
    raw = np.genfromtxt(path, delimiter=",", skip_header=0)
    if raw.ndim == 1:
        raw = raw[None, :]
    if np.isnan(raw[0]).any():       # header row
        raw = raw[1:]
    if raw.shape[1] != 2 * dimension + 1:
        raise WeightError(f"table weight expects {2 * dimension + 1} columns")
    pts = raw[:, :-1]
    vals = raw[:, -1]
    if np.any(vals <= 0):
        raise WeightError("table weight values must be positive")
    tree = cKDTree(pts)

    def fn(Z):
        X = np.empty((Z.shape[0], 2 * dimension))
        X[:, 0::2] = Z.real
        X[:, 1::2] = Z.imag
        _, idx = tree.query(X)
        return vals[idx]

    return Weight(fn, p, tag="table")


def dual_weight(w: Weight) -> Weight:
    """sigma' = sigma^(-1/(p-1)) at the dual exponent q = p/(p-1)."""
    if not w.p > 1.0:
        raise WeightError("dual weight requires p > 1")
    q = w.p / (w.p - 1.0)
    if w.tag.startswith("power:"):
        t = float(w.tag.split(":")[1])
        return power_weight(-t / (w.p - 1.0), q)
    if w.tag == "unit":
        return unit_weight(q)
    base = w.fn
    expo = -1.0 / (w.p - 1.0)
    return Weight(lambda Z: np.asarray(base(Z)) ** expo, q, tag=f"dual({w.tag})")


# ---------------------------------------------------------------------------
# ball families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BallFamilySpec:
    boundary_touching: bool = True
    n_centers: int = 8
    radius_grid: tuple = (2 ** -2, 2 ** -3, 2 ** -4, 2 ** -5, 2 ** -6, 2 ** -7, 2 ** -8)
    seed: int = 0


def ball_family(domain: Domain, spec: BallFamilySpec) -> list[QuasiBall]:
    """Deterministic seeded quasi-ball family.

    With boundary_touching, each center is pushed toward the boundary until
    its quasi-boundary-distance is below the ball's radius.
    """
    if not spec.radius_grid:
        raise WeightError("radius_grid must be nonempty")
    rng = substream(spec.seed, 0xFA317)
    balls = []
    dirs = quad._sphere_dirs(rng, spec.n_centers, domain.dimension)
    fracs = rng.uniform(0.35, 0.65, size=(spec.n_centers, len(spec.radius_grid)))
    interior_depths = rng.uniform(0.3, 0.7, size=spec.n_centers)
    for i in range(spec.n_centers):
        for j, R in enumerate(sorted(spec.radius_grid, reverse=True)):
            if spec.boundary_touching:
                depth = fracs[i, j] * R
                for _ in range(30):
                    c = _point_at_depth(domain, dirs[i], depth)
                    if float(domain.quasi_boundary_distance(c[None, :])[0]) < R:
                        break
                    depth *= 0.5
                balls.append(QuasiBall(c, float(R), domain.metric_tag))
            else:
                c = _point_at_depth(domain, dirs[i], interior_depths[i])
                balls.append(QuasiBall(c, float(R), domain.metric_tag))
    return balls


def _point_at_depth(domain: Domain, direction: np.ndarray, depth: float) -> np.ndarray:
    """Interior point at the given Euclidean depth along a boundary ray."""
    if domain.is_radial:
        return (1.0 - max(depth, 1e-9)) * direction
    # walk from a scaled interior point out to the boundary, then back in
    z0 = 0.2 * direction
    P = geo._normal_exit_points(domain, z0[None, :])[0]
    nu = P - z0
    nu /= np.linalg.norm(nu)
    return P - max(depth, 1e-9) * nu


# ---------------------------------------------------------------------------
# characteristics
# ---------------------------------------------------------------------------

@dataclass
class BpEstimate:
    value: float
    p: float
    n_balls: int
    argmax_ball: QuasiBall
    min_radius: float
    per_ball_values: list = field(default_factory=list)
    per_ball_se: list = field(default_factory=list)
    divergence_flag: bool = False
    depth_floor: float = 0.0


def _per_ball_product(domain: Domain, sigma: Weight, ball: QuasiBall,
                      spec: QuadratureSpec, *, independent_streams: bool = False):
    """(<sigma>_B <sigma'>_B^(p-1), combined rel-SE-derived SE) for one ball."""
    sig_d = dual_weight(sigma)
    pts = quad.sample_ball_region(domain, ball, spec)
    a1 = quad.ball_average(domain, ball, sigma.eval, spec, pts=pts)
    if independent_streams:
        pts2 = quad.sample_ball_region(domain, ball, spec.with_(seed=spec.seed + 104729))
        a2 = quad.ball_average(domain, ball, sig_d.eval, spec, pts=pts2)
    else:
        a2 = quad.ball_average(domain, ball, sig_d.eval, spec, pts=pts)
    pm1 = sigma.p - 1.0
    value = a1.real * a2.real ** pm1
    rel = math.hypot(a1.std_error / max(a1.real, 1e-300),
                     pm1 * a2.std_error / max(a2.real, 1e-300))
    return value, value * rel, (a1, a2)


def _characteristic(domain: Domain, sigma: Weight, family: list[QuasiBall],
                    spec: QuadratureSpec, threads: int = 1) -> BpEstimate:
    if not family:
        raise WeightError("ball family must be nonempty")
    min_radius = min(b.radius for b in family)
    floor = spec.depth_floor if spec.depth_floor is not None else min_radius / 4.0
    base = spec.with_(depth_floor=floor, strategy="stratified"
                      if domain.is_radial else spec.strategy)

    def one(i):
        b = family[i]
        seed_i = int(np.random.SeedSequence(
            entropy=spec.seed, spawn_key=(0xB9, i)).generate_state(1)[0])
        v, se, _ = _per_ball_product(domain, sigma, b, base.with_(seed=seed_i))
        return v, se

    results = quad.parallel_map(one, list(range(len(family))), threads)
    values = [r[0] for r in results]
    ses = [r[1] for r in results]
    k = int(np.argmax(values))
    # divergence check: refine the top ball (finer floor, more samples)
    seed_k = int(np.random.SeedSequence(
        entropy=spec.seed, spawn_key=(0xB9F, k)).generate_state(1)[0])
    refined, r_se, _ = _per_ball_product(
        domain, sigma, family[k],
        base.with_(seed=seed_k, depth_floor=floor / 4.0,
                   n_samples=2 * spec.n_samples))
    change = abs(refined - values[k]) / max(values[k], 1e-300)
    diverging = change > max(0.25, 5.0 * ses[k] / max(values[k], 1e-300))
    return BpEstimate(
        value=float(np.max(values)),
        p=sigma.p,
        n_balls=len(family),
        argmax_ball=family[k],
        min_radius=min_radius,
        per_ball_values=[float(v) for v in values],
        per_ball_se=[float(s) for s in ses],
        divergence_flag=bool(diverging),
        depth_floor=floor,
    )


def bp_characteristic(domain: Domain, sigma: Weight, family: list[QuasiBall],
                      spec: QuadratureSpec, threads: int = 1) -> BpEstimate:
    """Bekolle-Bonami characteristic over a boundary-touching family."""
    for b in family:
        bd = float(domain.quasi_boundary_distance(b.center[None, :])[0])
        if not b.radius > bd:
            raise WeightError("bp_characteristic requires boundary-touching balls")
    return _characteristic(domain, sigma, family, spec, threads)


def ap_characteristic(domain: Domain, sigma: Weight, family: list[QuasiBall],
                      spec: QuadratureSpec, threads: int = 1) -> BpEstimate:
    """Same per-ball product over an unconstrained (interior included) family."""
    return _characteristic(domain, sigma, family, spec, threads)


# ---------------------------------------------------------------------------
# regularizing operator
# ---------------------------------------------------------------------------

def _check_k(domain: Domain, k: float) -> geo.GeometryCalibration:
    cal = geo.calibrate(domain)
    if not (0.0 < k < 1.0 / (2.0 * cal.cd)):
        raise WeightError(
            f"k must lie in (0, {1.0 / (2.0 * cal.cd):.4f}) for {domain.kind}")
    return cal


def regularize(domain: Domain, sigma: Weight, k: float, z,
               spec: QuadratureSpec) -> float:
    """R_k(sigma)(z): average of sigma over B_k(z) = B(z, k d(z, bOmega))."""
    _check_k(domain, k)
    zp = as_points(z, domain.dimension)
    return float(regularize_batch(domain, sigma, k, zp, spec, strict=True)[0])


def regularize_batch(domain: Domain, sigma: Weight, k: float, Z,
                     spec: QuadratureSpec, n_inner: int = 256,
                     strict: bool = False) -> np.ndarray:
    """Vectorized R_k(sigma) over a batch of points.

    Each point gets n_inner uniform draws in its ball's frame box; the
    average is self-normalized, so it sits inside [inf, sup] of sigma on
    the ball by construction. Points whose ball is unresolved (vanishing
    radius, or the cusp wedge near the origin where any box is loose)
    degenerate to the center value unless strict is set; a wholesale
    resolution failure always raises.
    """
    _check_k(domain, k)
    Zp = as_points(Z, domain.dimension)
    m, n = Zp.shape
    radii = k * domain.quasi_boundary_distance(Zp)
    rng = substream(spec.seed, 0x4E6)
    basis, halfw = domain.ball_sampling_frames(Zp, radii)
    U = rng.uniform(-1.0, 1.0, size=(m, n_inner, 2 * n))
    off = (U[..., 0::2] * halfw[:, None, :, 0]
           + 1j * U[..., 1::2] * halfw[:, None, :, 1])
    X = Zp[:, None, :] + np.einsum("mkj,mjl->mkl", off, basis)
    Xf = X.reshape(-1, n)
    member = (domain.contains(Xf)
              & (domain.metric(Xf, np.repeat(Zp, n_inner, axis=0))
                 < np.repeat(radii, n_inner)))
    vals = np.zeros(Xf.shape[0])
    if member.any():
        vals[member] = sigma.eval(Xf[member])
    vals = vals.reshape(m, n_inner)
    member = member.reshape(m, n_inner)
    hits = member.sum(axis=1)
    empty = hits == 0
    if np.any(empty):
        real_misses = empty & (radii > 1e-9)
        if (strict and real_misses.any()) or np.mean(empty) > 0.25:
            raise WeightError("empty-ball resolution failure in regularize")
        out = np.empty(m)
        out[~empty] = vals[~empty].sum(axis=1) / hits[~empty]
        out[empty] = sigma.eval(Zp[empty])
        return out
    return vals.sum(axis=1) / hits


def regularized_weight(domain: Domain, sigma: Weight, k: float,
                       spec: QuadratureSpec, n_inner: int = 256) -> Weight:
    """R_k(sigma) wrapped as a Weight (same exponent p)."""
    def fn(Z):
        return regularize_batch(domain, sigma, k, Z, spec, n_inner)
    return Weight(fn, sigma.p, tag=f"R_{k:g}({sigma.tag})")


# ---------------------------------------------------------------------------
# doubling and duality probes
# ---------------------------------------------------------------------------

def weight_doubling_probe(domain: Domain, sigma: Weight, ball: QuasiBall,
                          lam: float, lam2: float, spec: QuadratureSpec) -> float:
    """sigma(lam2 B) / sigma(B) for a ball whose lam-dilate touches bOmega."""
    if lam <= 1.0 or lam2 <= 1.0:
        if lam2 == 1.0:
            return 1.0
        raise WeightError("lambda and lambda' must exceed 1")
    bd = float(domain.quasi_boundary_distance(ball.center[None, :])[0])
    if not lam * ball.radius > bd:
        raise HypothesisNotMet("lambda-dilated ball does not touch the boundary")
    big = QuasiBall(ball.center, lam2 * ball.radius, ball.metric_tag)
    i1 = quad.integrate_ball(domain, big, sigma.eval, spec)
    i2 = quad.integrate_ball(domain, ball, sigma.eval,
                             spec.with_(seed=spec.seed + 7919))
    if i2.real <= 0:
        raise WeightError("vanishing sigma(B) in doubling probe")
    return float(i1.real / i2.real)


def duality_identity_check(domain: Domain, sigma: Weight,
                           family: list[QuasiBall], spec: QuadratureSpec,
                           threads: int = 1) -> float:
    """Max over balls of |B_q(sigma') - B_p(sigma)^(q-1)| in SE units.

    The two sides are exactly equal per ball; estimating them from
    independent sample streams turns the identity into a consistency test
    of the MC machinery.
    """
    if not family:
        raise WeightError("ball family must be nonempty")
    sig_d = dual_weight(sigma)
    q = sig_d.p
    floor = spec.depth_floor if spec.depth_floor is not None else \
        min(b.radius for b in family) / 4.0
    base = spec.with_(depth_floor=floor)

    def one(i):
        b = family[i]
        s1 = int(np.random.SeedSequence(entropy=spec.seed,
                                        spawn_key=(0xD7, i)).generate_state(1)[0])
        s2 = int(np.random.SeedSequence(entropy=spec.seed,
                                        spawn_key=(0xD8, i)).generate_state(1)[0])
        side_a, se_a, _ = _per_ball_product(domain, sig_d, b, base.with_(seed=s1))
        side_b, se_b, _ = _per_ball_product(domain, sigma, b, base.with_(seed=s2))
        dev = side_a - side_b ** (q - 1.0)
        se = math.hypot(se_a, (q - 1.0) * side_b ** (q - 2.0) * se_b)
        return abs(dev) / max(se, 1e-300)

    devs = quad.parallel_map(one, list(range(len(family))), threads)
    return float(np.max(devs))
