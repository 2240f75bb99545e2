"""Bergman kernels on model domains and statistical estimate probes.

Closed forms on the disk, ball, and product of disks (fully normalized so
the reproducing property holds exactly); truncated orthonormal-monomial
expansions on egg domains, with an explicit geometric tail budget. The
probes turn the kernel size/smoothness/boundary/derivative/lower-bound
estimates into sup- or inf-statistics over sampled point pairs.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

from . import geometry as geo
from . import quadrature as quad
from .geometry import Domain, GeometryError, QuasiBall, as_point, as_points
from .quadrature import QuadratureSpec, substream

__all__ = [
    "KernelError",
    "TruncationWarning",
    "EstimateFit",
    "KernelEvaluator",
    "kernel_eval",
    "basis_norms",
    "export_norm_table",
    "PairSampler",
    "size_probe",
    "smoothness_probe",
    "boundary_size_probe",
    "derivative_probe",
    "lower_bound_probe",
    "local_polydisc_m",
]

TAIL_BUDGET = 1e-8       # basis evaluation refuses past this relative tail
DEFAULT_DEGREE = 60


class KernelError(Exception):
    pass


class TruncationWarning(UserWarning):
    """A truncated-basis evaluation exceeded its convergence budget."""


@dataclass(frozen=True)
class EstimateFit:
    """A probed constant (sup or inf statistic) with an optional exponent.

    max_violation_ratio records how far the extreme sample sits above the
    sample median, as a heavy-tail diagnostic.
    """

    constant: float
    exponent: float | None
    n_samples: int
    max_violation_ratio: float
    excluded: int = 0


def basis_norms(domain: Domain, max_degree: int) -> np.ndarray:
    """Squared L^2 norms of the monomials z1^a z2^b on an egg domain.

    norms[a, b] = (pi^2 / ((a+1) m)) * Beta((b+1)/m, a+2).
    """
    if domain.kind != "egg":
        raise KernelError("basis_norms is defined for egg domains")
    if max_degree < 0:
        raise KernelError("max_degree must be >= 0")
    m = domain.m
    a = np.arange(max_degree + 1)[:, None]
    b = np.arange(max_degree + 1)[None, :]
    logb = betaln((b + 1) / m, a + 2)
    return np.exp(math.log(math.pi ** 2 / m) - np.log(a + 1.0) + logb)


def export_norm_table(norms: np.ndarray, path) -> None:
    """Write a monomial norm table as CSV with columns a, b, norm2."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "norm2"])
        for a in range(norms.shape[0]):
            for b in range(norms.shape[1]):
                w.writerow([a, b, repr(float(norms[a, b]))])


class KernelEvaluator:
    """Pointwise Bergman kernel K(z, w), closed form or truncated basis."""

    def __init__(self, domain: Domain, mode: str | None = None,
                 max_degree: int = DEFAULT_DEGREE):
        mode = mode or domain.kernel_mode
        if mode not in ("closed", "basis"):
            raise KernelError(f"unknown kernel mode {mode!r}")
        if mode == "closed" and domain.kind == "egg" and domain.m != 1:
            raise KernelError("egg domains with m > 1 have no closed-form kernel")
        if mode == "basis" and domain.kind != "egg":
            raise KernelError("truncated-basis mode is implemented for egg domains")
        self.domain = domain
        self.mode = mode
        self.max_degree = int(max_degree)
        self.norm_table = basis_norms(domain, max_degree) if mode == "basis" else None

    def eval_batch(self, Z, W) -> tuple[np.ndarray, np.ndarray]:
        """Kernel values and truncation flags for batches of pairs."""
        n = self.domain.dimension
        Zp = as_points(Z, n)
        Wp = as_points(W, n)
        Zp, Wp = np.broadcast_arrays(Zp, Wp)
        if self.mode == "closed":
            return self._closed(Zp, Wp), np.zeros(Zp.shape[0], dtype=bool)
        return self._basis(Zp, Wp)

    def __call__(self, z, w) -> complex:
        v, f = self.eval_batch(as_point(z, self.domain.dimension)[None, :],
                               as_point(w, self.domain.dimension)[None, :])
        if f[0]:
            warnings.warn("truncated-basis kernel exceeded its tail budget",
                          TruncationWarning)
        return complex(v[0])

    def _closed(self, Z, W) -> np.ndarray:
        d = self.domain
        if d.kind == "disk":
            return 1.0 / (math.pi * (1.0 - Z[:, 0] * np.conj(W[:, 0])) ** 2)
        if d.kind == "ball" or (d.kind == "egg" and d.m == 1):
            n = 2 if d.kind == "egg" else d.dimension
            inner = np.sum(Z * np.conj(W), axis=-1)
            c = math.factorial(n) / math.pi ** n
            return c / (1.0 - inner) ** (n + 1)
        if d.kind == "product":
            out = np.ones(Z.shape[0], dtype=complex)
            for j in range(d.dimension):
                out /= math.pi * (1.0 - Z[:, j] * np.conj(W[:, j])) ** 2
            return out
        raise KernelError(f"no closed form for {d.kind}")

    def _basis(self, Z, W) -> tuple[np.ndarray, np.ndarray]:
        N = self.max_degree
        C = 1.0 / self.norm_table
        x = Z[:, 0] * np.conj(W[:, 0])
        y = Z[:, 1] * np.conj(W[:, 1])
        deg = np.arange(N + 1)
        X = x[:, None] ** deg[None, :]
        Y = y[:, None] ** deg[None, :]
        K = np.einsum("ma,ab,mb->m", X, C, Y)
        # geometric tail bound from the last two anti-diagonals of |terms|
        ax = np.abs(x)[:, None] ** deg[None, :]
        ay = np.abs(y)[:, None] ** deg[None, :]
        a_idx = deg
        dN = np.zeros(Z.shape[0])
        dN1 = np.zeros(Z.shape[0])
        for a in a_idx:
            dN += ax[:, a] * ay[:, N - a] * C[a, N - a]
            if a <= N - 1:
                dN1 += ax[:, a] * ay[:, N - 1 - a] * C[a, N - 1 - a]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dN1 > 0, dN / dN1, 0.0)
        tail = np.where(ratio < 1.0, dN * ratio / np.maximum(1.0 - ratio, 1e-12), np.inf)
        flags = tail > TAIL_BUDGET * np.maximum(np.abs(K), 1e-300)
        return K, flags


def kernel_eval(ev: KernelEvaluator, z, w) -> complex:
    """Evaluate K(z, w); truncation budget violations raise a warning."""
    return ev(z, w)


# ---------------------------------------------------------------------------
# local polydisc quantities (closed forms where available)
# ---------------------------------------------------------------------------

def local_polydisc_m(domain: Domain, Z, W) -> np.ndarray:
    """One-sided local metric M(z, w) = inf{eps : w in P(z, eps)}.

    Closed form on the disk (Euclidean) and ball (max of the normal
    component and squared tangential components); bisection elsewhere.
    """
    n = domain.dimension
    Zp = as_points(Z, n)
    Wp = as_points(W, n)
    Zp, Wp = np.broadcast_arrays(Zp, Wp)
    if domain.kind == "disk":
        return np.abs(Wp[:, 0] - Zp[:, 0])
    if domain.kind == "ball":
        rz = np.linalg.norm(Zp, axis=-1)
        nu = Zp / np.maximum(rz, 1e-300)[:, None]
        diff = Wp - Zp
        c1 = np.abs(np.sum(diff * np.conj(nu), axis=-1))
        tang_sq = np.maximum(np.sum(np.abs(diff) ** 2, axis=-1) - c1 ** 2, 0.0)
        return np.maximum(c1, tang_sq)
    return geo._polydisc_metric_batch(domain, Zp, Wp)


def _frame_dirs(domain: Domain, Z: np.ndarray) -> np.ndarray:
    """Orthonormal frame rows (normal first) at each point, shape (m, n, n)."""
    g = domain.grad_rho(Z)
    gn = np.linalg.norm(g, axis=-1)
    out = np.empty((Z.shape[0], Z.shape[1], Z.shape[1]), dtype=complex)
    for i in range(Z.shape[0]):
        if gn[i] < 1e-13:
            raise GeometryError("vanishing gradient in frame construction")
        out[i] = geo._unitary_frame(np.conj(g[i]) / gn[i])
    return out


def _frame_taus(domain: Domain, Z: np.ndarray, deltas: np.ndarray,
                dirs: np.ndarray) -> np.ndarray:
    """tau_j(z, delta) for each point, shape (m, n); tau_1 = delta."""
    m, n = Z.shape
    taus = np.empty((m, n))
    taus[:, 0] = deltas
    if domain.kind in ("disk",):
        return taus
    if domain.kind == "ball":
        taus[:, 1:] = np.sqrt(deltas)[:, None]
        return taus
    for j in range(1, n):
        taus[:, j] = geo._tau_batch(domain, Z, dirs[:, j, :], deltas)
    return taus


# ---------------------------------------------------------------------------
# pair samplers
# ---------------------------------------------------------------------------

@dataclass
class PairSampler:
    """Near-boundary pair generator for the kernel probes.

    On radial domains the pairs are constructed exactly: z at a log-uniform
    Euclidean depth, w at quasi-distance depth*mult with the separation
    split between the radial and angular terms. Elsewhere pairs are local
    perturbations of shell-rejected interior points.
    """

    n_pairs: int = 1000
    seed: int = 0
    depth_range: tuple = (2e-3, 0.1)
    sep_mult_range: tuple = (1.0, 8.0)

    def __call__(self, domain: Domain) -> tuple[np.ndarray, np.ndarray]:
        rng = substream(self.seed, 0x9A17)
        k = self.n_pairs
        if domain.is_radial:
            n = domain.dimension
            a = np.exp(rng.uniform(math.log(self.depth_range[0]),
                                   math.log(self.depth_range[1]), k))
            mult = np.exp(rng.uniform(math.log(self.sep_mult_range[0]),
                                      math.log(self.sep_mult_range[1]), k))
            d = np.minimum(a * mult, 1.5)
            omega = quad._sphere_dirs(rng, k, n)
            Z = (1.0 - a)[:, None] * omega
            u = rng.uniform(0.0, 0.7, k)
            d_rad = u * d
            d_ang = d - d_rad
            if n == 1:
                phi = 2.0 * np.arcsin(np.minimum(d_ang, 2.0) / 2.0)
                om2 = omega[:, 0] * np.exp(1j * phi * np.sign(rng.uniform(-1, 1, k)))
                W = ((1.0 - a - d_rad) * om2)[:, None]
            else:
                alpha = np.arccos(np.clip(1.0 - d_ang, -1.0, 1.0))
                xi = quad._sphere_dirs(rng, k, n)
                inner = np.sum(xi * np.conj(omega), axis=-1)
                xi = xi - inner[:, None] * omega
                xi /= np.linalg.norm(xi, axis=-1)[:, None]
                om2 = omega * np.cos(alpha)[:, None] + xi * np.sin(alpha)[:, None]
                W = (1.0 - a - d_rad)[:, None] * om2
            keep = domain.contains(W) & domain.contains(Z)
            return Z[keep], W[keep]
        # generic: shell rejection plus a local complex step
        Z = _shell_points(domain, rng, k, self.depth_range)
        step = np.exp(rng.uniform(math.log(self.depth_range[0]),
                                  math.log(0.3), k))
        dirs = quad._sphere_dirs(rng, k, domain.dimension)
        W = Z + step[:, None] * dirs
        keep = domain.contains(W)
        return Z[keep], W[keep]


def _shell_points(domain: Domain, rng, k: int, depth_range) -> np.ndarray:
    got, need = [], k
    for _ in range(500):
        Z = quad._draw_box(rng, -np.ones(2 * domain.dimension),
                           np.ones(2 * domain.dimension), max(4 * need, 128))
        dist = domain.euclid_boundary_distance(Z)
        Z = Z[domain.contains(Z) & (dist >= depth_range[0]) & (dist <= depth_range[1])]
        got.append(Z[:need])
        need -= len(got[-1])
        if need <= 0:
            return np.vstack(got)
    raise KernelError("shell rejection sampling failed")


# ---------------------------------------------------------------------------
# measures used by the probes
# ---------------------------------------------------------------------------

def _ball_measures(domain: Domain, centers: np.ndarray, radii: np.ndarray,
                   spec: QuadratureSpec, threads: int = 1) -> np.ndarray:
    """mu(B(center_i, r_i)) for each i; flagged estimates become NaN."""
    mspec = spec if spec.strategy != "polar_gauss" else spec.with_(strategy="stratified")

    def one(i):
        try:
            ball = QuasiBall(centers[i], float(radii[i]), domain.metric_tag)
            est = geo.quasi_ball_measure(domain, ball, mspec)
        except (quad.QuadratureError, GeometryError):
            return math.nan
        return math.nan if est.flagged else float(est.real)

    vals = quad.parallel_map(one, list(range(len(radii))), threads)
    return np.asarray(vals)


def _fit_from_stats(stats: np.ndarray, n_total: int, kind: str = "sup",
                    exponent: float | None = None,
                    excluded: int = 0) -> EstimateFit:
    stats = stats[np.isfinite(stats) & (stats > 0)]
    if stats.size == 0:
        raise KernelError("no admissible samples in probe")
    extreme = float(np.max(stats) if kind == "sup" else np.min(stats))
    med = float(np.median(stats))
    ratio = extreme / med if kind == "sup" else med / max(extreme, 1e-300)
    return EstimateFit(extreme, exponent, int(stats.size), float(ratio),
                       excluded=excluded + (n_total - int(stats.size)))


def size_probe(ev: KernelEvaluator, sampler, spec: QuadratureSpec,
               threads: int = 1) -> EstimateFit:
    """Sup over pairs of |K(z,w)| mu(B(z, d(z,w))): the C1 estimate."""
    domain = ev.domain
    Z, W = sampler(domain)
    d = domain.metric(Z, W)
    good = d > 1e-12          # z = w pairs are degenerate and skipped
    Z, W, d = Z[good], W[good], d[good]
    K, flags = ev.eval_batch(Z, W)
    mu = _ball_measures(domain, Z, d, spec, threads)
    stats = np.abs(K) * mu
    stats[flags] = math.nan
    return _fit_from_stats(stats, len(d), "sup")


def boundary_size_probe(ev: KernelEvaluator, sampler, spec: QuadratureSpec,
                        threads: int = 1) -> EstimateFit:
    """Sup of |K(z,w)| max{mu(B(z, d(z,b))), mu(B(w, d(w,b)))}: the C3 estimate."""
    domain = ev.domain
    Z, W = sampler(domain)
    K, flags = ev.eval_batch(Z, W)
    bz = domain.quasi_boundary_distance(Z)
    bw = domain.quasi_boundary_distance(W)
    mu_z = _ball_measures(domain, Z, bz, spec, threads)
    mu_w = _ball_measures(domain, W, bw, spec, threads)
    stats = np.abs(K) * np.fmax(mu_z, mu_w)
    stats[flags] = math.nan
    return _fit_from_stats(stats, len(bz), "sup")


def smoothness_probe(ev: KernelEvaluator, sampler, C2: float,
                     spec: QuadratureSpec, threads: int = 1,
                     ratio_range: tuple = (0.02, 1.0)) -> EstimateFit:
    """Fit the Hoelder exponent nu of the kernel smoothness estimate.

    For pairs (z, w) and perturbations z' with d(z,w) >= C2 d(z,z'),
    regresses log(|K(z,w)-K(z',w)| mu(B(z,d(z,w)))) on log(d(z,z')/d(z,w));
    the slope is nu, the intercept the constant.
    """
    domain = ev.domain
    Z, W = sampler(domain)
    d = domain.metric(Z, W)
    good = d > 1e-10
    Z, W, d = Z[good], W[good], d[good]
    m = len(d)
    if m < 8:
        raise KernelError("too few admissible pairs for the smoothness fit")
    rng = substream(getattr(sampler, "seed", 0), 0x57)
    ratios = np.exp(rng.uniform(math.log(ratio_range[0]),
                                math.log(min(ratio_range[1], 1.0) / C2), m))
    t_target = ratios * d
    Zp, ok = _points_at_distance(domain, Z, t_target, rng)
    Z, W, d, Zp, ratios = Z[ok], W[ok], d[ok], Zp[ok], ratios[ok]
    K1, f1 = ev.eval_batch(Z, W)
    K2, f2 = ev.eval_batch(Zp, W)
    mu = _ball_measures(domain, Z, d, spec, threads)
    y = np.abs(K1 - K2) * mu
    keep = np.isfinite(y) & (y > 0) & ~f1 & ~f2
    if keep.sum() < 8:
        raise KernelError("too few admissible triples for the smoothness fit")
    slope, intercept = np.polyfit(np.log(ratios[keep]), np.log(y[keep]), 1)
    stats = y[keep] / ratios[keep] ** slope
    med = float(np.median(stats))
    return EstimateFit(float(np.exp(intercept)), float(slope), int(keep.sum()),
                       float(np.max(stats) / med), excluded=int(m - keep.sum()))


def _points_at_distance(domain: Domain, Z: np.ndarray, t: np.ndarray, rng):
    """Interior points z' with d(z, z') close to the targets t (bisection)."""
    m, n = Z.shape
    dirs = quad._sphere_dirs(rng, m, n)
    lo = np.zeros(m)
    hi = np.full(m, 1e-4)
    for _ in range(60):
        dd = domain.metric(Z + hi[:, None] * dirs, Z)
        grow = dd < t
        if not grow.any():
            break
        lo[grow] = hi[grow]
        hi[grow] = hi[grow] * 2.0
        if np.all(hi > 8.0):
            break
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        dd = domain.metric(Z + mid[:, None] * dirs, Z)
        low = dd < t
        lo[low] = mid[low]
        hi[~low] = mid[~low]
    eta = 0.5 * (lo + hi)
    Zp = Z + eta[:, None] * dirs
    dd = domain.metric(Zp, Z)
    ok = domain.contains(Zp) & (np.abs(dd - t) <= 0.2 * t)
    return Zp, ok


def derivative_probe(ev: KernelEvaluator, sampler, spec: QuadratureSpec,
                     direction: int | None = None, side: str = "z",
                     threads: int = 1) -> EstimateFit:
    """Sup of |D K| delta^(2+a1) prod tau_k^(2+ak) in frame coordinates.

    direction None tests the undifferentiated bound (alpha = 0); direction j
    (1-based, 1 = complex normal) applies one central difference along the
    j-th frame direction at z (side="z") or w (side="w").
    delta = |rho(z)| + |rho(w)| + M(z, w).
    """
    domain = ev.domain
    Z, W = sampler(domain)
    if side == "w":
        Z, W = W, Z
    deltas = (np.abs(domain.rho(Z)) + np.abs(domain.rho(W))
              + local_polydisc_m(domain, Z, W))
    dirs = _frame_dirs(domain, Z)
    taus = _frame_taus(domain, Z, deltas, dirs)
    excluded = 0
    if direction is None:
        K, flags = ev.eval_batch(Z, W)
        D = np.abs(K)
        weight_extra = np.ones(len(D))
    else:
        j = direction - 1
        if not 0 <= j < domain.dimension:
            raise KernelError("direction out of range")
        h = 1e-2 * deltas
        under = h < 1e-9          # step underflow very near the boundary
        excluded = int(under.sum())
        e = dirs[:, j, :]
        Kp, fp = ev.eval_batch(Z + h[:, None] * e, W)
        Km, fm = ev.eval_batch(Z - h[:, None] * e, W)
        flags = fp | fm | under
        D = np.abs(Kp - Km) / (2.0 * h)
        weight_extra = deltas if j == 0 else taus[:, j]
    stats = D * deltas ** 2 * np.prod(taus[:, 1:] ** 2, axis=1) * weight_extra
    stats[flags] = math.nan
    return _fit_from_stats(stats, len(stats), "sup", excluded=excluded)


def lower_bound_probe(ev: KernelEvaluator, kappa: float, sampler,
                      spec: QuadratureSpec, eps0: float = 0.5,
                      threads: int = 1) -> EstimateFit:
    """Inf over admissible pairs of |K(z,w)| mu(B(w, d(z,w))).

    Pairs must satisfy max{d(z,b), d(w,b)} <= kappa d(z,w) and
    d(z,w) <= eps0; violating pairs are excluded and counted.
    """
    domain = ev.domain
    Z, W = sampler(domain)
    d = domain.metric(Z, W)
    bz = domain.quasi_boundary_distance(Z)
    bw = domain.quasi_boundary_distance(W)
    admissible = (np.fmax(bz, bw) <= kappa * d) & (d <= eps0) & (d > 1e-12)
    excluded = int((~admissible).sum())
    if not admissible.any():
        raise KernelError("no pairs satisfy the lower-bound hypothesis")
    Z, W, d = Z[admissible], W[admissible], d[admissible]
    K, flags = ev.eval_batch(Z, W)
    mu = _ball_measures(domain, W, d, spec, threads)
    stats = np.abs(K) * mu
    stats[flags] = math.nan
    return _fit_from_stats(stats, len(d), "inf", excluded=excluded)
