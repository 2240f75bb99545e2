"""Integration engine: seeded Monte Carlo and deterministic polar rules.

Three strategies:

  * ``uniform``     -- i.i.d. uniform points via bounding-box rejection
  * ``stratified``  -- boundary-distance layers {2^-j-1 < dist <= 2^-j},
                       equal samples per layer; exact radial sampling on the
                       disk/ball, indicator layers elsewhere
  * ``polar_gauss`` -- tensor Gauss-Legendre in squared-radius times a
                       uniform angular grid (disk and ball only)

Every estimate carries a standard error (jackknife over blocks for MC,
node-doubling for the deterministic rule) and a quality flag. All sampling
is driven by per-purpose substreams of a single seed, so results are
bit-identical across reruns and thread counts.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "QuadratureError",
    "QuadratureSpec",
    "IntegralEstimate",
    "PointSet",
    "substream",
    "parallel_map",
    "sample_domain",
    "sample_ball_region",
    "integrate",
    "integrate_ball",
]

ABS_VALUE_FLOOR = 1e-12   # below this |value|, relative error is meaningless
MIN_HIT_RATE = 1e-4       # membership rate floor for ball-restricted MC
BLOCKS_PER_STRATUM = 8
UNIFORM_BLOCKS = 32


class QuadratureError(Exception):
    pass


def substream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic per-purpose random stream, independent of call order."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def parallel_map(fn, items, threads: int = 1) -> list:
    """Map fn over items; results are index-ordered and thread-count invariant."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


@dataclass(frozen=True)
class QuadratureSpec:
    strategy: str = "uniform"          # uniform | stratified | polar_gauss
    n_samples: int = 20_000
    rel_tolerance: float = 0.05
    seed: int = 0
    layer_count: int = 8
    radial_nodes: int = 64
    angular_nodes: int = 64
    depth_floor: float | None = None   # absolute boundary-layer floor override

    def __post_init__(self):
        if self.n_samples < 1:
            raise QuadratureError("n_samples must be >= 1")
        if self.rel_tolerance <= 0:
            raise QuadratureError("rel_tolerance must be positive")
        if self.layer_count < 1:
            raise QuadratureError("layer_count must be >= 1")
        if self.strategy not in ("uniform", "stratified", "polar_gauss"):
            raise QuadratureError(f"unknown strategy {self.strategy!r}")

    def with_(self, **kw) -> "QuadratureSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class IntegralEstimate:
    value: complex | float
    std_error: float
    n_effective: int
    flagged: bool
    bad_count: int = 0   # NaN/inf integrand values encountered

    @property
    def real(self) -> float:
        return float(np.real(self.value))


@dataclass(frozen=True)
class PointSet:
    """Weighted points: sum(w_i f(x_i)) estimates the integral over Omega."""

    points: np.ndarray       # (m, n) complex
    weights: np.ndarray      # (m,)
    groups: np.ndarray       # (m,) int; stratum*BLOCKS + block, for error bars
    n_groups: int
    deterministic: bool = False


def _flag(value, std_error: float, rel_tolerance: float) -> bool:
    return std_error > rel_tolerance * max(abs(value), ABS_VALUE_FLOOR)


def _group_se(values: np.ndarray, weights: np.ndarray, groups: np.ndarray,
              n_groups: int) -> float:
    """Standard error of sum(w v) from block estimates within strata.

    Blocks are equal-size splits of each stratum's index stream; the
    stratum variance is the variance of its block totals.
    """
    if np.iscomplexobj(values):
        return math.hypot(
            _group_se(values.real, weights, groups, n_groups),
            _group_se(values.imag, weights, groups, n_groups),
        )
    wv = weights * values
    sums = np.bincount(groups, weights=wv, minlength=n_groups)
    var = 0.0
    for s in range(n_groups // BLOCKS_PER_STRATUM):
        blk = sums[s * BLOCKS_PER_STRATUM:(s + 1) * BLOCKS_PER_STRATUM]
        b = len(blk)
        # block totals sum to the stratum total; SE of the sum is
        # b * std(blocks) / sqrt(b) = sqrt(b * var(blocks))
        var += b * np.var(blk, ddof=1) if b > 1 else 0.0
    return math.sqrt(max(var, 0.0))


# ---------------------------------------------------------------------------
# global domain sampling
# ---------------------------------------------------------------------------

def _box_volume(lo: np.ndarray, hi: np.ndarray) -> float:
    return float(np.prod(hi - lo))


def _draw_box(rng, lo, hi, k):
    X = rng.uniform(size=(k, lo.shape[0])) * (hi - lo)[None, :] + lo[None, :]
    return X[:, 0::2] + 1j * X[:, 1::2]


def _sphere_dirs(rng, k, n):
    """Uniform directions on the unit sphere of C^n = R^(2n)."""
    X = rng.standard_normal((k, 2 * n))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X[:, 0::2] + 1j * X[:, 1::2]


def _layer_edges(layer_count: int, top: float = 1.0,
                 floor: float | None = None) -> list[tuple[float, float]]:
    """Boundary-distance layers [(hi, lo)], geometric halvings from `top`.

    With floor=None the last layer reaches distance 0 (unbiased sampling);
    with a floor the layers stop there, making the point set an explicit
    resolution-limited truncation of the region.
    """
    layers = [(math.inf, top)]  # top layer absorbs everything deeper
    e = top
    if floor is None:
        for _ in range(layer_count - 1):
            layers.append((e, e / 2.0))
            e /= 2.0
        layers.append((e, 0.0))
    else:
        if floor >= top:
            return layers
        while e > floor * (1.0 + 1e-9):
            nxt = max(e / 2.0, floor)
            layers.append((e, nxt))
            e = nxt
    return layers


def sample_domain(domain, spec: QuadratureSpec) -> PointSet:
    """Weighted point set for integrals over the whole domain."""
    n = domain.dimension
    if spec.strategy == "polar_gauss":
        return _polar_gauss_points(domain, spec)
    rng = substream(spec.seed, 0xD0)
    lo = -np.ones(2 * n)
    hi = np.ones(2 * n)
    vol_box = _box_volume(lo, hi)
    if spec.strategy == "uniform":
        Z = _draw_box(rng, lo, hi, spec.n_samples)
        inside = domain.contains(Z)
        if inside.mean() < 1e-3:
            raise QuadratureError("bounding-box acceptance rate below 1e-3")
        groups = np.arange(spec.n_samples) % UNIFORM_BLOCKS
        w = np.full(int(inside.sum()), vol_box / spec.n_samples)
        return PointSet(Z[inside], w, groups[inside], UNIFORM_BLOCKS)
    # stratified
    layers = _layer_edges(spec.layer_count, top=0.5 * _min_half_width(domain),
                          floor=spec.depth_floor)
    per = max(spec.n_samples // len(layers), 8)
    pts, wts, grp = [], [], []
    if domain.is_radial:
        for j, (d_hi, d_lo) in enumerate(layers):
            s_lo = max(0.0, 1.0 - min(d_hi, 1.0))
            s_hi = 1.0 - d_lo
            c_lo, c_hi = s_lo ** (2 * n), s_hi ** (2 * n)
            if c_hi <= c_lo:
                continue
            rng_j = substream(spec.seed, 0xD1, j)
            s = (rng_j.uniform(size=per) * (c_hi - c_lo) + c_lo) ** (1.0 / (2 * n))
            Z = s[:, None] * _sphere_dirs(rng_j, per, n)
            vol_j = domain.volume * (c_hi - c_lo)
            pts.append(Z)
            wts.append(np.full(per, vol_j / per))
            grp.append(j * BLOCKS_PER_STRATUM + np.arange(per) % BLOCKS_PER_STRATUM)
    else:
        for j, (d_hi, d_lo) in enumerate(layers):
            rng_j = substream(spec.seed, 0xD1, j)
            Z = _draw_box(rng_j, lo, hi, per)
            dist = domain.euclid_boundary_distance(Z)
            keep = domain.contains(Z) & (dist > d_lo) & (dist <= d_hi)
            pts.append(Z[keep])
            wts.append(np.full(int(keep.sum()), vol_box / per))
            grp.append(j * BLOCKS_PER_STRATUM + np.flatnonzero(keep) % BLOCKS_PER_STRATUM)
    n_groups = len(layers) * BLOCKS_PER_STRATUM
    return PointSet(np.vstack(pts), np.concatenate(wts), np.concatenate(grp), n_groups)


def _min_half_width(domain) -> float:
    return 1.0


def _polar_gauss_points(domain, spec: QuadratureSpec, *, doubled=False) -> PointSet:
    nr = spec.radial_nodes * (2 if doubled else 1)
    na = spec.angular_nodes * (2 if doubled else 1)
    x, w = np.polynomial.legendre.leggauss(nr)
    v = 0.5 * (x + 1.0)         # nodes on [0, 1]
    wv = 0.5 * w
    theta = 2.0 * np.pi * np.arange(na) / na
    if domain.kind == "disk":
        r = np.sqrt(v)
        Z = (r[:, None] * np.exp(1j * theta)[None, :]).reshape(-1, 1)
        W = (np.pi * wv[:, None] * np.ones(na)[None, :] / na).reshape(-1)
    elif domain.kind == "ball" and domain.dimension == 2:
        # r1^2 = v u, r2^2 = v (1 - u) maps [0,1]^2 onto the simplex
        V, U = np.meshgrid(v, v, indexing="ij")
        WV, WU = np.meshgrid(wv, wv, indexing="ij")
        r1 = np.sqrt(V * U)
        r2 = np.sqrt(V * (1.0 - U))
        base_w = 0.25 * V * WV * WU * (2.0 * np.pi / na) ** 2
        e = np.exp(1j * theta)
        z1 = r1.reshape(-1, 1, 1) * e[None, :, None]
        z2 = r2.reshape(-1, 1, 1) * e[None, None, :]
        Z = np.stack([np.broadcast_to(z1, (r1.size, na, na)).reshape(-1),
                      np.broadcast_to(z2, (r1.size, na, na)).reshape(-1)], axis=-1)
        W = np.repeat(base_w.reshape(-1), na * na)
    else:
        raise QuadratureError("polar_gauss supports the disk and UnitBall(2) only")
    groups = np.arange(Z.shape[0]) % UNIFORM_BLOCKS
    return PointSet(Z, W, groups, UNIFORM_BLOCKS, deterministic=True)


def integrate(domain, integrand, spec: QuadratureSpec) -> IntegralEstimate:
    """Estimate the integral of `integrand` over the domain."""
    if spec.strategy == "polar_gauss":
        pts = _polar_gauss_points(domain, spec)
        v1 = _eval_clean(integrand, pts.points)[0]
        i1 = complex(np.sum(pts.weights * v1))
        pts2 = _polar_gauss_points(domain, spec, doubled=True)
        v2, bad = _eval_clean(integrand, pts2.points)
        i2 = complex(np.sum(pts2.weights * v2))
        se = abs(i2 - i1)
        val = i1 if abs(i1.imag) > 0 else i1.real
        return IntegralEstimate(val, se, pts.points.shape[0],
                                bool(bad) or _flag(i1, se, spec.rel_tolerance), bad)
    pts = sample_domain(domain, spec)
    return _weighted_estimate(integrand, pts, spec)


def _eval_clean(integrand, Z):
    vals = np.asarray(integrand(Z))
    bad = ~np.isfinite(vals)
    if np.iscomplexobj(vals):
        bad = ~(np.isfinite(vals.real) & np.isfinite(vals.imag))
    nbad = int(bad.sum())
    if nbad:
        vals = np.where(bad, 0.0, vals)
    return vals, nbad


def _weighted_estimate(integrand, pts: PointSet, spec: QuadratureSpec,
                       mask=None) -> IntegralEstimate:
    vals, bad = _eval_clean(integrand, pts.points)
    if mask is not None:
        vals = vals * mask
    total = np.sum(pts.weights * vals)
    se = _group_se(vals, pts.weights, pts.groups, pts.n_groups)
    value = complex(total) if np.iscomplexobj(vals) else float(total)
    if isinstance(value, complex) and value.imag == 0:
        value = value.real
    flagged = bool(bad) or _flag(value, se, spec.rel_tolerance)
    return IntegralEstimate(value, se, pts.points.shape[0], flagged, bad)


# ---------------------------------------------------------------------------
# quasi-ball restricted integration
# ---------------------------------------------------------------------------

def sample_ball_region(domain, ball, spec: QuadratureSpec) -> PointSet:
    """Weighted points covering a region that contains the quasi-ball.

    The caller restricts to the ball by metric membership. On the disk and
    ball the region is an exact polar patch (radial span times angular
    patch) sampled without rejection and radially stratified toward the
    boundary; elsewhere it is a frame-aligned box around the ball.
    """
    if spec.strategy == "polar_gauss":
        raise QuadratureError("integrate_ball requires an MC strategy")
    if domain.is_radial and spec.strategy == "stratified":
        return _polar_patch_points(domain, ball, spec)
    basis, halfw = domain.ball_sampling_frames(ball.center[None, :],
                                               np.array([ball.radius]))
    basis, halfw = basis[0], halfw[0]
    vol_box = float(np.prod(4.0 * halfw[:, 0] * halfw[:, 1]))
    n = domain.dimension

    def frame_draw(rng, k):
        u = rng.uniform(-1.0, 1.0, size=(k, 2 * n))
        off = (u[:, 0::2] * halfw[None, :, 0]
               + 1j * u[:, 1::2] * halfw[None, :, 1])
        return ball.center[None, :] + off @ basis

    if spec.strategy == "uniform":
        rng = substream(spec.seed, 0xB0)
        Z = frame_draw(rng, spec.n_samples)
        keep = domain.contains(Z)
        if spec.depth_floor is not None:
            keep &= domain.euclid_boundary_distance(Z) > spec.depth_floor
        groups = np.arange(spec.n_samples) % UNIFORM_BLOCKS
        w = np.full(int(keep.sum()), vol_box / spec.n_samples)
        return PointSet(Z[keep], w, groups[keep], UNIFORM_BLOCKS)
    # indicator-stratified frame-box sampling (egg / product domains)
    top = max(2.0 * float(np.max(halfw)), 1e-6)
    layers = _layer_edges(spec.layer_count, top=top, floor=spec.depth_floor)
    per = max(spec.n_samples // len(layers), 8)
    pts, wts, grp = [], [], []
    for j, (d_hi, d_lo) in enumerate(layers):
        rng_j = substream(spec.seed, 0xB1, j)
        Z = frame_draw(rng_j, per)
        dist = domain.euclid_boundary_distance(Z)
        keep = domain.contains(Z) & (dist > d_lo) & (dist <= d_hi)
        pts.append(Z[keep])
        wts.append(np.full(int(keep.sum()), vol_box / per))
        grp.append(j * BLOCKS_PER_STRATUM + np.flatnonzero(keep) % BLOCKS_PER_STRATUM)
    return PointSet(np.vstack(pts), np.concatenate(wts), np.concatenate(grp),
                    len(layers) * BLOCKS_PER_STRATUM)


def _disk_patch_angle(r: float) -> float:
    """Half-angle of {theta : |1 - e^(i theta)| <= r}."""
    return math.pi if r >= 2.0 else 2.0 * math.asin(0.5 * r)


def _lens_area(r: float) -> float:
    """Area of {u in unit disk : |1 - u| <= r}."""
    if r >= 2.0:
        return math.pi
    return (math.acos(1.0 - 0.5 * r * r) + r * r * math.acos(0.5 * r)
            - 0.5 * r * math.sqrt(4.0 - r * r))


def _polar_patch_points(domain, ball, spec: QuadratureSpec) -> PointSet:
    """Exact stratified sampler of the polar patch containing a disk/ball quasi-ball.

    The patch is {s in [s0-r, s0+r]} x {directions with |1-<w,c>|/|w||c| <= r},
    with the radial span cut into geometric boundary layers.
    """
    n = domain.dimension
    c = ball.center
    r = ball.radius
    s0 = float(np.linalg.norm(c))
    if s0 < 1e-12:
        # ball centered at the origin: fall back to full angular range
        s_lo, s_hi = 0.0, min(1.0, r)
        frac = 1.0
        omega0 = None
    else:
        s_lo = max(0.0, s0 - r)
        s_hi = min(1.0, s0 + r)
        omega0 = c / s0
        frac = (_disk_patch_angle(min(r, 2.0)) / math.pi if n == 1
                else _lens_area(min(r, 2.0)) / math.pi)
    top = 1.0 - s_lo
    bottom = 1.0 - s_hi
    floor = spec.depth_floor
    layers = _layer_edges(spec.layer_count, top=top, floor=floor)
    layers = [(min(h, top), max(l, bottom)) for (h, l) in layers if min(h, top) > max(l, bottom)]
    if not layers:
        layers = [(top, bottom)]
    per = max(spec.n_samples // len(layers), 8)
    pts, wts, grp = [], [], []
    for j, (d_hi, d_lo) in enumerate(layers):
        a_lo, a_hi = 1.0 - d_hi, 1.0 - d_lo      # radial bounds of the layer
        c_lo, c_hi = a_lo ** (2 * n), a_hi ** (2 * n)
        if c_hi <= c_lo:
            continue
        rng_j = substream(spec.seed, 0xB2, j)
        s = (rng_j.uniform(size=per) * (c_hi - c_lo) + c_lo) ** (1.0 / (2 * n))
        if omega0 is None:
            dirs = _sphere_dirs(rng_j, per, n)
        elif n == 1:
            half = _disk_patch_angle(min(r, 2.0))
            th = rng_j.uniform(-half, half, size=per)
            dirs = (omega0[0] * np.exp(1j * th)).reshape(-1, 1)
        else:
            dirs = _patch_dirs_ball(rng_j, omega0, min(r, 2.0), per)
        Z = s[:, None] * dirs
        vol_j = domain.volume * (c_hi - c_lo) * frac
        pts.append(Z)
        wts.append(np.full(per, vol_j / per))
        grp.append(j * BLOCKS_PER_STRATUM + np.arange(per) % BLOCKS_PER_STRATUM)
    return PointSet(np.vstack(pts), np.concatenate(wts), np.concatenate(grp),
                    len(layers) * BLOCKS_PER_STRATUM)


def _patch_dirs_ball(rng, omega0: np.ndarray, r: float, k: int) -> np.ndarray:
    """Uniform S^3 directions omega with |1 - <omega, omega0>| <= r.

    For uniform omega the component u = <omega, omega0> is uniform on the
    unit disk, so sample u by rejection from the disk of radius r at 1 and
    recombine with a uniform orthogonal phase.
    """
    us = np.empty(k, dtype=complex)
    got = 0
    while got < k:
        draw = max(2 * (k - got), 64)
        rho = r * np.sqrt(rng.uniform(size=draw))
        psi = rng.uniform(0, 2 * np.pi, size=draw)
        u = 1.0 - rho * np.exp(1j * psi)
        u = u[np.abs(u) <= 1.0][:k - got]
        us[got:got + len(u)] = u
        got += len(u)
    phase = np.exp(2j * np.pi * rng.uniform(size=k))
    # orthonormal completion of omega0 in C^2
    perp = np.array([-np.conj(omega0[1]), np.conj(omega0[0])])
    v = np.sqrt(np.maximum(1.0 - np.abs(us) ** 2, 0.0)) * phase
    return us[:, None] * omega0[None, :] + v[:, None] * perp[None, :]


def integrate_ball(domain, ball, integrand, spec: QuadratureSpec) -> IntegralEstimate:
    """Integral of `integrand` over {w in Omega : d(w, center) < radius}."""
    pts = sample_ball_region(domain, ball, spec)
    member = domain.metric(pts.points, ball.center) < ball.radius
    if member.mean() < MIN_HIT_RATE:
        raise QuadratureError(
            f"ball membership hit-rate {member.mean():.2e} below {MIN_HIT_RATE}")
    return _weighted_estimate(integrand, pts, spec, mask=member)


def ball_average(domain, ball, integrand, spec: QuadratureSpec,
                 pts: PointSet | None = None) -> IntegralEstimate:
    """Self-normalized average of `integrand` over a quasi-ball.

    Shares one point set between numerator and denominator, so constants
    average exactly to themselves.
    """
    if pts is None:
        pts = sample_ball_region(domain, ball, spec)
    member = domain.metric(pts.points, ball.center) < ball.radius
    if member.mean() < MIN_HIT_RATE:
        raise QuadratureError(
            f"ball membership hit-rate {member.mean():.2e} below {MIN_HIT_RATE}")
    vals, bad = _eval_clean(integrand, pts.points)
    num = float(np.sum(pts.weights * vals * member))
    den = float(np.sum(pts.weights * member))
    if den <= 0:
        raise QuadratureError("empty quasi-ball in average")
    value = num / den
    # delta-method error from block estimates of the ratio
    se_num = _group_se(vals * member, pts.weights, pts.groups, pts.n_groups)
    se_den = _group_se(member.astype(float), pts.weights, pts.groups, pts.n_groups)
    se = abs(value) * math.hypot(se_num / max(abs(num), 1e-300),
                                 se_den / max(den, 1e-300))
    flagged = bool(bad) or _flag(value, se, spec.rel_tolerance)
    return IntegralEstimate(value, se, int(member.sum()), flagged, bad)
