"""Experiment runner: config parsing, probe dispatch, reports, CLI.

Subcommands map to the verification suites (geometry-check, kernel-check,
bp, operator-norm, good-lambda, lemma-suite, necessity, all); each emits a
report of tables plus per-check verdicts. A verdict is "pass", "fail", or
"flagged" (inconclusive quadrature quality, distinct from a counterexample).
Exit codes: 0 all pass, 1 any fail, 2 config/IO error, 3 flagged only.

Every reported number is a deterministic function of (config, seed); the
JSON report is byte-identical across reruns except for the wall_clock
field, regardless of thread count.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import geometry as geo
from . import kernels as ker
from . import operators as op
from . import quadrature as quad
from . import weights as wt
from .quadrature import QuadratureSpec

__all__ = ["ConfigError", "ExperimentConfig", "ExperimentReport",
           "run", "emit_report", "main", "SUBCOMMANDS"]

SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    domain: geo.Domain
    weight: wt.Weight
    p: float
    kernel_mode: str
    max_degree: int
    quad: QuadratureSpec
    experiment: dict
    seed: int
    threads: int
    out_dir: str
    formats: tuple

    @staticmethod
    def parse(raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        if "seed" not in raw:
            raise ConfigError("config must set a seed")
        seed = int(raw["seed"])
        dom_spec = raw.get("domain", {"kind": "disk"})
        try:
            domain = geo.make_domain(dom_spec.get("kind", "disk"),
                                     **{k: v for k, v in dom_spec.items()
                                        if k != "kind"})
        except (geo.GeometryError, TypeError, ValueError) as e:
            raise ConfigError(f"bad domain spec: {e}") from e
        wspec = raw.get("weight", {"type": "unit"})
        p = float(wspec.get("p", raw.get("p", 2.0)))
        if not p > 1.0:
            raise ConfigError("weight exponent p must exceed 1")
        wtype = wspec.get("type", "unit")
        if wtype == "power":
            weight = wt.power_weight(float(wspec.get("t", 0.0)), p)
        elif wtype == "unit":
            weight = wt.unit_weight(p)
        elif wtype == "table":
            if "file" not in wspec:
                raise ConfigError("table weight requires a file")
            weight = wt.table_weight(wspec["file"], p, domain.dimension)
        else:
            raise ConfigError(f"unknown weight type {wtype!r}")
        kspec = raw.get("kernel", {})
        mode = kspec.get("mode", domain.kernel_mode)
        qraw = dict(raw.get("quadrature", {}))
        qraw.setdefault("strategy", "stratified" if domain.is_radial else "uniform")
        qraw.setdefault("seed", seed)
        try:
            qspec = QuadratureSpec(**qraw)
        except (TypeError, quad.QuadratureError) as e:
            raise ConfigError(f"bad quadrature spec: {e}") from e
        out = raw.get("output", {})
        formats = tuple(out.get("formats", ["csv", "json"]))
        for f in formats:
            if f not in ("csv", "json"):
                raise ConfigError(f"unknown output format {f!r}")
        return ExperimentConfig(
            domain=domain, weight=weight, p=p, kernel_mode=mode,
            max_degree=int(kspec.get("max_degree", 60)), quad=qspec,
            experiment=dict(raw.get("experiment", {})), seed=seed,
            threads=int(raw.get("threads", 1)),
            out_dir=str(out.get("dir", "out")), formats=formats)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}") from e
    return ExperimentConfig.parse(raw if raw is not None else {})


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    subcommand: str
    config_echo: dict
    tables: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    wall_clock: float = 0.0
    version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def table(self, name: str, columns: list) -> Table:
        t = Table(name, columns)
        self.tables.append(t)
        return t

    def check(self, name: str, ok: bool, detail: str, flagged: bool = False):
        verdict = "flagged" if flagged else ("pass" if ok else "fail")
        self.verdicts.append({"check": name, "verdict": verdict, "detail": detail})

    def exit_code(self) -> int:
        states = {v["verdict"] for v in self.verdicts}
        if "fail" in states:
            return 1
        if "flagged" in states:
            return 3
        return 0

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "tool_version": self.version,
            "subcommand": self.subcommand,
            "config": self.config_echo,
            "tables": {t.name: {"columns": t.columns, "rows": t.rows}
                       for t in self.tables},
            "verdicts": self.verdicts,
            "wall_clock": self.wall_clock,
        }


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def emit_report(report: ExperimentReport, out_dir, formats=("csv", "json")) -> list:
    """Write the report; one CSV per table plus a single JSON document."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        if "json" in formats:
            path = out / f"{report.subcommand}.json"
            with open(path, "w") as fh:
                json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True,
                          default=_json_default)
                fh.write("\n")
            written.append(str(path))
        if "csv" in formats:
            for t in report.tables:
                path = out / f"{report.subcommand}__{t.name}.csv"
                with open(path, "w") as fh:
                    fh.write(",".join(t.columns) + "\n")
                    for row in t.rows:
                        fh.write(",".join(_csv_cell(c) for c in row) + "\n")
                written.append(str(path))
        return written
    except OSError as e:
        raise ConfigError(f"cannot write report: {e}") from e


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating, np.integer)):
        return repr(v.item())
    return str(v)


# ---------------------------------------------------------------------------
# check suites
# ---------------------------------------------------------------------------

def _stability(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def check_geometry(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    dom = cfg.domain
    ex = cfg.experiment
    seed = cfg.seed
    n_tri = int(ex.get("n_triples", 200_000))
    c1 = geo.triangle_constant_probe(dom, n_tri, seed)
    c2 = geo.triangle_constant_probe(dom, 2 * n_tri, seed)
    t = rep.table("triangle", ["n_triples", "c"])
    t.rows += [[n_tri, c1], [2 * n_tri, c2]]
    rep.check("triangle_finite", math.isfinite(c1) and c1 >= 1.0, f"c={c1:.4f}")
    rep.check("triangle_stable", _stability(c1, c2) <= 0.10,
              f"doubling change {100 * _stability(c1, c2):.1f}%")

    spec = cfg.quad.with_(n_samples=max(cfg.quad.n_samples // 2, 4000))
    rng = quad.substream(seed, 0x6E0)
    t = rep.table("homogeneity", ["domain", "c0", "m"])
    windows = {"disk": (1.8, 2.2), "ball": (2.6, 3.4)}
    fit_domains = [dom] if dom.kind not in windows else []
    fit_domains += [geo.UnitDisk(), geo.UnitBall(2)]
    c0 = m = None
    for fd in fit_domains:
        fam = []
        for r in ex.get("homogeneity_radii", (0.02, 0.04, 0.08)):
            for _ in range(3):
                c = geo._near_boundary_point(fd, rng, depth=0.1 * r)
                fam.append(geo.QuasiBall.of(fd, c, r))
        fc0, fm = geo.homogeneity_fit(fd, fam, [1.0, 1.5, 2.0], spec)
        t.rows.append([fd.kind, fc0, fm])
        window = windows.get(fd.kind)
        if window:
            rep.check(f"homogeneity_m_{fd.kind}", window[0] <= fm <= window[1],
                      f"m={fm:.3f} target [{window[0]}, {window[1]}]")
        else:
            rep.check(f"homogeneity_m_{fd.kind}",
                      math.isfinite(fm) and fm > 0, f"m={fm:.3f}")
        if fd.kind == dom.kind or c0 is None:
            c0, m = fc0, fm

    # doubling of mu on a held-out family
    held = []
    for _ in range(4):
        c = geo._near_boundary_point(dom, rng, depth=0.005)
        held.append(geo.QuasiBall.of(dom, c, 0.05))
    ok = True
    for b in held:
        mu1 = geo.quasi_ball_measure(dom, b, spec).real
        mu2 = geo.quasi_ball_measure(
            dom, geo.QuasiBall(b.center, 2 * b.radius, b.metric_tag), spec).real
        ok &= mu2 <= c0 * 2.0 ** m * mu1 * 1.10
    rep.check("measure_doubling", ok, f"c0={c0:.3f}, m={m:.3f} on held-out balls")

    # engulfing constants
    q1 = geo._near_boundary_point(dom, rng, depth=0.01)
    q2 = geo._near_boundary_point(dom, rng, depth=0.01)
    eng = geo.engulfing_probe(dom, q1, q2, 1e-2, 3000, seed=seed)
    engd = geo.engulfing_probe(dom, q1, q1, 1e-3, 3000, seed=seed)
    t = rep.table("engulfing", ["delta", "C", "D", "hypothesis_met"])
    t.rows += [[1e-2, eng.C if eng.C is not None else math.nan, eng.D,
                eng.hypothesis_met],
               [1e-3, engd.C if engd.C is not None else math.nan, engd.D,
                engd.hypothesis_met]]
    rep.check("engulfing_D", 1.0 <= engd.D <= 8.0, f"D={engd.D:.3f}")

    # boundary slab (depth-linear law)
    b0 = geo.QuasiBall.of(
        dom, geo._near_boundary_point(dom, rng, depth=0.02), 0.2)
    srows = rep.table("boundary_slab", ["s", "ratio", "ratio_over_s"])
    ratios = {}
    for s in (0.2, 0.1, 0.05):
        r = geo.boundary_slab_measure(dom, b0, s, spec)
        ratios[s] = r
        srows.rows.append([s, r, r / s])
    r_over_s = [ratios[s] / s for s in (0.2, 0.1, 0.05)]
    rep.check("slab_linear", max(r_over_s) <= 2.0 * min(r_over_s),
              f"ratio/s in [{min(r_over_s):.3f}, {max(r_over_s):.3f}]")
    rep.check("slab_small", ratios[0.1] <= 0.5, f"ratio(0.1)={ratios[0.1]:.3f}")

    # comparability of quasi and Euclidean boundary distance
    Z = geo._uniform_interior(dom, rng, 4000)
    dist = dom.euclid_boundary_distance(Z)
    near = (dist > 1e-4) & (dist < 0.2)
    qd = dom.quasi_boundary_distance(Z[near][:1000])
    ed = dist[near][:1000]
    ratio = qd / ed
    t = rep.table("comparability", ["min_ratio", "max_ratio"])
    t.rows.append([float(ratio.min()), float(ratio.max())])
    rep.check("boundary_comparability",
              ratio.max() / ratio.min() <= 25.0 and np.isfinite(ratio).all(),
              f"quasi/euclid in [{ratio.min():.3f}, {ratio.max():.3f}]")

    _check_quadrature(cfg, rep)


def _check_quadrature(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    dom = cfg.domain
    if dom.kind != "disk":
        return
    ones = lambda W: np.ones(W.shape[0])
    pg = cfg.quad.with_(strategy="polar_gauss", radial_nodes=64,
                        angular_nodes=64, rel_tolerance=1e-9)
    est = quad.integrate(dom, ones, pg)
    rep.check("pg_area", abs(est.real - math.pi) <= 1e-10,
              f"|int 1 - pi| = {abs(est.real - math.pi):.2e}")
    mc = cfg.quad.with_(strategy="uniform", n_samples=10 ** 6)
    est2 = quad.integrate(dom, ones, mc)
    rep.check("mc_area", abs(est2.real - math.pi) <= 3 * est2.std_error
              and est2.std_error <= 3e-3,
              f"int 1 = {est2.real:.5f} +- {est2.std_error:.1e}")
    # error slope on log-log
    ig = lambda W: np.abs(W[:, 0]) ** 2
    ns, ses = [10 ** 4, 10 ** 5, 10 ** 6], []
    for n in ns:
        ses.append(quad.integrate(dom, ig, cfg.quad.with_(
            strategy="uniform", n_samples=n)).std_error)
    slope = np.polyfit(np.log(ns), np.log(ses), 1)[0]
    t = rep.table("mc_convergence", ["n", "std_error"])
    t.rows += [[n, s] for n, s in zip(ns, ses)]
    rep.check("mc_slope", -0.65 <= slope <= -0.35, f"slope={slope:.3f}")
    # determinism across thread counts
    fam = wt.ball_family(dom, wt.BallFamilySpec(
        boundary_touching=True, n_centers=3, radius_grid=(0.1, 0.05),
        seed=cfg.seed))
    v1 = wt.bp_characteristic(dom, cfg.weight, fam, cfg.quad, threads=1)
    v4 = wt.bp_characteristic(dom, cfg.weight, fam, cfg.quad, threads=4)
    rep.check("thread_determinism",
              v1.per_ball_values == v4.per_ball_values,
              "bit-identical per-ball values for 1 vs 4 threads")


def check_kernels(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    seed = cfg.seed
    # reproducing and annihilation on disk and ball
    t = rep.table("reproducing", ["domain", "max_poly_err", "max_antiholo"])
    for dom, pg in ((geo.UnitDisk(),
                     cfg.quad.with_(strategy="polar_gauss", radial_nodes=64,
                                    angular_nodes=64)),
                    (geo.UnitBall(2),
                     cfg.quad.with_(strategy="polar_gauss", radial_nodes=20,
                                    angular_nodes=24))):
        ev = ker.KernelEvaluator(dom)
        rng = quad.substream(seed, 0xF00, dom.dimension)
        Z = 0.6 * quad._sphere_dirs(rng, 50, dom.dimension) \
            * rng.uniform(0.1, 1.0, 50)[:, None]
        pts = quad._polar_gauss_points(dom, pg)
        polys = _poly_bundle(dom.dimension, 4)
        err_p = 0.0
        fvals = np.stack([f(pts.points) for f in polys], axis=1)
        pv = op._project_grid(ev, fvals, pts.points, pts.weights, Z)
        for j, f in enumerate(polys):
            ref = f(Z)
            scale = max(float(np.max(np.abs(ref))), 1e-9)
            err_p = max(err_p, float(np.max(np.abs(pv[:, j] - ref))) / scale)
        err_a = 0.0
        av = np.stack([op.anti_holo(k_)(pts.points) for k_ in (1, 2, 3)], axis=1)
        pa = op._project_grid(ev, av, pts.points, pts.weights, Z)
        err_a = float(np.max(np.abs(pa)))
        t.rows.append([dom.kind, err_p, err_a])
        rep.check(f"reproducing_{dom.kind}", err_p <= 1e-3,
                  f"max rel err {err_p:.2e}")
        rep.check(f"annihilation_{dom.kind}", err_a <= 1e-3,
                  f"max |P conj^k| {err_a:.2e}")

    # egg(1) truncated basis vs ball(2) closed form
    egg = geo.EggDomain(1)
    ball = geo.UnitBall(2)
    ev_b = ker.KernelEvaluator(egg, mode="basis", max_degree=cfg.max_degree)
    ev_c = ker.KernelEvaluator(ball, mode="closed")
    rng = quad.substream(seed, 0xF01)
    Z = quad._sphere_dirs(rng, 100, 2) * (0.6 * rng.uniform(0.2, 1.0, 100) ** 0.25)[:, None]
    W = quad._sphere_dirs(rng, 100, 2) * (0.6 * rng.uniform(0.2, 1.0, 100) ** 0.25)[:, None]
    kb, fl = ev_b.eval_batch(Z, W)
    kc, _ = ev_c.eval_batch(Z, W)
    rel = float(np.max(np.abs(kb - kc) / np.abs(kc)))
    rep.table("cross_validation", ["max_rel_err", "flagged"]).rows.append(
        [rel, int(fl.sum())])
    rep.check("kernel_cross_validation", rel <= 1e-6 and not fl.any(),
              f"max rel err {rel:.2e}")

    # size / boundary-size on disk and ball, smoothness / lower bound on disk
    n_pairs = int(cfg.experiment.get("n_pairs", 1000))
    mspec = cfg.quad.with_(n_samples=max(cfg.quad.n_samples // 8, 2000))
    t = rep.table("estimates", ["domain", "probe", "constant", "exponent", "n",
                                "doubling_change"])
    for pdom in (geo.UnitDisk(), geo.UnitBall(2)):
        pev = ker.KernelEvaluator(pdom)
        for name, fn in (("size", ker.size_probe),
                         ("boundary_size", ker.boundary_size_probe)):
            f1 = fn(pev, ker.PairSampler(n_pairs=n_pairs, seed=seed), mspec)
            f2 = fn(pev, ker.PairSampler(n_pairs=2 * n_pairs, seed=seed + 1),
                    mspec)
            ch = _stability(f1.constant, f2.constant)
            t.rows.append([pdom.kind, name, f1.constant, "", f1.n_samples, ch])
            rep.check(f"{name}_finite_{pdom.kind}", math.isfinite(f1.constant),
                      f"C={f1.constant:.4f}")
            rep.check(f"{name}_stable_{pdom.kind}", ch <= 0.20,
                      f"doubling change {100 * ch:.1f}%")
    dom = cfg.domain if cfg.domain.is_radial else geo.UnitDisk()
    ev = ker.KernelEvaluator(geo.UnitDisk())
    s1 = ker.smoothness_probe(ev, ker.PairSampler(n_pairs=n_pairs, seed=seed),
                              4.0, mspec)
    s2 = ker.smoothness_probe(ev, ker.PairSampler(n_pairs=n_pairs, seed=seed),
                              8.0, mspec)
    t.rows.append(["disk", "smoothness_C2=4", s1.constant, s1.exponent,
                   s1.n_samples, ""])
    t.rows.append(["disk", "smoothness_C2=8", s2.constant, s2.exponent,
                   s2.n_samples, ""])
    rep.check("smoothness_nu", s1.exponent >= 0.5, f"nu={s1.exponent:.3f}")
    rep.check("smoothness_nu_stable", abs(s1.exponent - s2.exponent) <= 0.2,
              f"nu(4)={s1.exponent:.3f} nu(8)={s2.exponent:.3f}")
    lb = ker.lower_bound_probe(
        ev, 0.2, ker.PairSampler(n_pairs=n_pairs, seed=seed,
                                 sep_mult_range=(5.0, 40.0)), mspec)
    t.rows.append(["disk", "lower_bound", lb.constant, "", lb.n_samples, ""])
    rep.check("lower_bound_positive", lb.constant > 0.0,
              f"inf={lb.constant:.4f} (excluded {lb.excluded})")


def _poly_bundle(dim: int, max_degree: int) -> list:
    out = []
    if dim == 1:
        for a in range(max_degree + 1):
            out.append(op.holo_poly({(a,): 1.0}))
    else:
        for a in range(max_degree + 1):
            for b in range(max_degree + 1 - a):
                alpha = (a, b) + (0,) * (dim - 2)
                out.append(op.holo_poly({alpha: 1.0}))
    return out


def check_bp(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    dom = cfg.domain
    seed = cfg.seed
    spec = cfg.quad
    grid_full = tuple(2.0 ** -j for j in range(2, 9))
    grid_half = tuple(2.0 ** -j for j in range(2, 8))
    n_centers = int(cfg.experiment.get("n_centers", 6))

    fam = wt.ball_family(dom, wt.BallFamilySpec(True, n_centers, grid_full, seed))
    unit = wt.bp_characteristic(dom, wt.unit_weight(cfg.p), fam, spec,
                                threads=cfg.threads)
    t = rep.table("bp", ["weight", "floor", "value", "divergence_flag"])
    t.rows.append(["unit", unit.min_radius, unit.value, unit.divergence_flag])
    rep.check("bp_unit", unit.value == 1.0, f"[1]_Bp = {unit.value}")

    w05 = wt.power_weight(0.5, cfg.p)
    v_half = wt.bp_characteristic(
        dom, w05, wt.ball_family(dom, wt.BallFamilySpec(True, n_centers,
                                                        grid_half, seed)),
        spec, threads=cfg.threads)
    v_full = wt.bp_characteristic(dom, w05, fam, spec, threads=cfg.threads)
    ch = _stability(v_half.value, v_full.value)
    t.rows.append(["power:0.5", v_half.min_radius, v_half.value,
                   v_half.divergence_flag])
    t.rows.append(["power:0.5", v_full.min_radius, v_full.value,
                   v_full.divergence_flag])
    rep.check("bp_power05_finite", math.isfinite(v_full.value)
              and not v_full.divergence_flag, f"value={v_full.value:.4f}")
    rep.check("bp_power05_stable", ch <= 0.10,
              f"floor halving change {100 * ch:.1f}%")

    w15 = wt.power_weight(1.5, cfg.p)
    vals = {}
    for jmax in (4, 6, 8):
        g = tuple(2.0 ** -j for j in range(2, jmax + 1))
        e = wt.bp_characteristic(
            dom, w15, wt.ball_family(dom, wt.BallFamilySpec(True, n_centers,
                                                            g, seed)),
            spec, threads=cfg.threads)
        vals[jmax] = e.value
        t.rows.append(["power:1.5", e.min_radius, e.value, e.divergence_flag])
    rate = (vals[8] / vals[4]) ** (1.0 / (4 * math.log10(2)))
    rep.check("bp_power15_divergence", rate >= 2.0,
              f"growth per floor decade {rate:.2f}")

    # doubling probe for the chosen weight
    rng = quad.substream(seed, 0x60B)
    ball = geo.QuasiBall.of(dom, geo._near_boundary_point(dom, rng, 0.02), 0.03)
    ratio = wt.weight_doubling_probe(dom, w05, ball, 2.0, 2.0, spec)
    rep.table("doubling", ["lambda2", "ratio"]).rows.append([2.0, ratio])
    rep.check("weight_doubling", math.isfinite(ratio) and ratio > 0,
              f"sigma(2B)/sigma(B) = {ratio:.3f}")

    # duality identity under MC noise
    dev = wt.duality_identity_check(dom, wt.power_weight(0.5, 3.0), fam[:12],
                                    spec, threads=cfg.threads)
    rep.table("duality", ["max_dev_se_units"]).rows.append([dev])
    rep.check("duality_identity", dev <= 3.0, f"max deviation {dev:.2f} SE")


def check_operator_norm(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    dom = cfg.domain if cfg.domain.is_radial else geo.UnitDisk()
    ev = ker.KernelEvaluator(dom, mode="closed")
    sigma = cfg.weight if cfg.weight.tag != "unit" else wt.power_weight(0.5, cfg.p)
    n_bundle = int(cfg.experiment.get("bundle_size", 20))
    bundle = [op.random_bump(dom, cfg.seed + 100 + j) for j in range(n_bundle)]
    spec = cfg.quad.with_(n_samples=int(cfg.experiment.get("grid_samples", 3000)))
    t = rep.table("norm_ratios", ["operator", "sup_ratio", "refined", "change"])
    sups = {}
    for tag in ("P", "P+", "M"):
        r1 = op.weighted_norm_ratio(tag, ev, sigma, cfg.p, bundle, spec)
        r2 = op.weighted_norm_ratio(tag, ev, sigma, cfg.p, bundle,
                                    spec.with_(n_samples=2 * spec.n_samples))
        ch = _stability(r1.sup_ratio, r2.sup_ratio)
        sups[tag] = (r1, r2)
        t.rows.append([tag, r1.sup_ratio, r2.sup_ratio, ch])
        rep.check(f"norm_{tag}_finite", math.isfinite(r1.sup_ratio),
                  f"sup ratio {r1.sup_ratio:.3f}")
        rep.check(f"norm_{tag}_stable", ch <= 0.20,
                  f"refinement change {100 * ch:.1f}%")
    one = op.TestFunction(lambda Z: np.ones(Z.shape[0]), "one")
    m1 = op.weighted_norm_ratio("M", ev, sigma, cfg.p, [one], spec)
    rep.check("norm_M_unit", abs(m1.sup_ratio - 1.0) < 1e-12,
              f"M ratio for f=1 is {m1.sup_ratio}")
    reph = op.weighted_norm_ratio("P", ev, sigma, cfg.p,
                                  [op.holo_poly({(2,) + (0,) * (dom.dimension - 1):
                                                 1.0})], spec)
    rep.check("norm_P_reproducing", abs(reph.sup_ratio - 1.0) <= 1e-3,
              f"P ratio for holo poly {reph.sup_ratio:.6f}")


def check_good_lambda(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    dom = cfg.domain if cfg.domain.kind == "disk" else geo.UnitDisk()
    ev = ker.KernelEvaluator(dom)
    sigma = cfg.weight if cfg.weight.tag != "unit" else wt.power_weight(0.5, cfg.p)
    ex = cfg.experiment
    ball = geo.QuasiBall.of(dom, ex.get("f_center", 0.9), ex.get("f_radius", 0.1))
    f = op.indicator_ball(dom, ball)
    gammas = list(ex.get("gamma_grid", (0.3, 0.1, 0.03, 0.01)))
    lambdas = list(ex.get("lambda_grid", (0.5, 0.75, 0.9)))
    out = op.good_lambda_experiment(
        ev, f, sigma, cfg.p, gammas, lambdas,
        cfg.quad.with_(n_samples=int(ex.get("n_samples", cfg.quad.n_samples))),
        lambda_quantiles=bool(ex.get("lambda_quantiles", True)))
    t = rep.table("good_lambda", ["lambda", "gamma", "ratio", "se"])
    for a, lam in enumerate(out.lambda_grid):
        for b, gam in enumerate(out.gamma_grid):
            t.rows.append([lam, gam, out.ratio_table[a, b], out.se_table[a, b]])
    rep.table("good_lambda_fit", ["fitted_exponent", "fitted_c", "m_used"]) \
        .rows.append([out.fitted_exponent, out.fitted_c, out.m_used])
    finite = out.ratio_table[np.isfinite(out.ratio_table)]
    mono = True
    for a in range(out.ratio_table.shape[0]):
        row = out.ratio_table[a]
        se = out.se_table[a]
        for b in range(1, len(row)):
            if np.isfinite(row[b]) and np.isfinite(row[b - 1]):
                mono &= row[b] <= row[b - 1] + 3 * math.hypot(
                    se[b], se[b - 1]) + 1e-12
    rep.check("good_lambda_monotone", mono, "ratios nonincreasing in gamma")
    final = out.ratio_table[:, -1]
    final_ok = np.all(final[np.isfinite(final)] < 0.3) if np.isfinite(final).any() else True
    rep.check("good_lambda_final", bool(final_ok),
              f"final-gamma ratios {[round(float(x), 4) if np.isfinite(x) else None for x in final]}")
    rep.check("good_lambda_exponent",
              math.isfinite(out.fitted_exponent) and out.fitted_exponent > 0,
              f"fitted exponent {out.fitted_exponent}")


def check_lemma_suite(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    dom = cfg.domain
    n_inst = int(cfg.experiment.get("n_instances", 200))
    spec = cfg.quad.with_(n_samples=max(cfg.quad.n_samples // 4, 3000))
    t = rep.table("lemma_suite", ["k", "k_prime", "lemma4", "lemma5",
                                  "lemma6_abslog", "prop3", "prop4_alpha"])
    reps = {}
    for k in cfg.experiment.get("k_values", (0.05, 0.1)):
        r = op.regularizer_lemma_suite(dom, float(k), n_inst, cfg.seed, spec)
        reps[k] = r
        t.rows.append([r.k, r.k_prime, r.lemma4_max_ratio, r.lemma5_max_ratio,
                       r.lemma6_max_abslog, r.prop3_containment,
                       r.prop4_alpha_max])
        rep.check(f"lemmas_finite_k={k:g}",
                  all(math.isfinite(x) for x in
                      (r.lemma4_max_ratio, r.lemma5_max_ratio,
                       r.lemma6_max_abslog, r.prop4_alpha_max)),
                  f"L4={r.lemma4_max_ratio:.3f} L5={r.lemma5_max_ratio:.3f} "
                  f"L6={r.lemma6_max_abslog:.3f} P4={r.prop4_alpha_max:.3f}")
        rep.check(f"prop3_containment_k={k:g}", r.prop3_containment == 1.0,
                  f"containment fraction {r.prop3_containment:.4f}")
    ks = list(reps)
    if len(ks) == 2:
        a, b = reps[ks[0]], reps[ks[1]]
        fac = max(
            max(a.lemma4_max_ratio, b.lemma4_max_ratio)
            / max(min(a.lemma4_max_ratio, b.lemma4_max_ratio), 1e-9),
            max(a.lemma5_max_ratio, b.lemma5_max_ratio)
            / max(min(a.lemma5_max_ratio, b.lemma5_max_ratio), 1e-9))
        rep.check("lemma_k_independence", fac <= 3.0,
                  f"max k-ratio factor {fac:.2f}")
    # Theorem 5 pipeline: A_p characteristic of the regularized weight
    sig = wt.power_weight(0.5, cfg.p)
    k0 = float(cfg.experiment.get("regularize_k", 0.1))
    rspec = spec.with_(n_samples=1200)
    rsig = wt.regularized_weight(dom, sig, k0, rspec, n_inner=128)
    fam = wt.ball_family(dom, wt.BallFamilySpec(
        False, 4, (0.25, 0.0625, 2 ** -5), cfg.seed))
    fam += wt.ball_family(dom, wt.BallFamilySpec(
        True, 4, (0.25, 0.0625, 2 ** -5), cfg.seed + 1))
    ap1 = wt.ap_characteristic(dom, rsig, fam, rspec, threads=cfg.threads)
    ap2 = wt.ap_characteristic(dom, rsig, fam,
                               rspec.with_(n_samples=2 * rspec.n_samples,
                                           seed=rspec.seed + 5),
                               threads=cfg.threads)
    ch = _stability(ap1.value, ap2.value)
    rep.table("ap_regularized", ["value", "refined", "change"]) \
        .rows.append([ap1.value, ap2.value, ch])
    rep.check("ap_regularized_finite", math.isfinite(ap1.value)
              and not ap1.divergence_flag, f"A_p(R_k sigma) = {ap1.value:.4f}")
    rep.check("ap_regularized_stable", ch <= 0.25,
              f"refinement change {100 * ch:.1f}%")


def check_necessity(cfg: ExperimentConfig, rep: ExperimentReport) -> None:
    dom = cfg.domain if cfg.domain.kind == "disk" else geo.UnitDisk()
    ev = ker.KernelEvaluator(dom)
    radii = [2.0 ** -j for j in cfg.experiment.get("radius_exponents",
                                                   range(3, 8))]
    spec = cfg.quad.with_(n_samples=int(cfg.experiment.get(
        "n_samples", max(cfg.quad.n_samples // 2, 6000))))
    # two-ball lower bound across scales
    t = rep.table("two_ball", ["radius", "inf_constant", "separation", "margin"])
    infs = []
    e1 = np.zeros(dom.dimension, dtype=complex)
    e1[0] = 1.0
    for R in radii:
        res = op.two_ball_lower_bound(ev, R, spec, seed=cfg.seed, direction=e1)
        infs.append(res.inf_constant)
        t.rows.append([R, res.inf_constant, res.separation, res.margin])
    rep.check("two_ball_threshold", min(infs) >= 0.01,
              f"inf constants in [{min(infs):.4f}, {max(infs):.4f}]")
    mid = 0.5 * (max(infs) + min(infs))
    rep.check("two_ball_stable",
              max(infs) <= 1.2 * mid and min(infs) >= 0.8 * mid,
              f"within +-20% of {mid:.4f}")
    # swap roles: support on B2, evaluate on B1
    res = op.two_ball_lower_bound(ev, 2 ** -5, spec, seed=cfg.seed, direction=e1)
    swap = _swapped_inf(dom, ev, res, spec)
    rep.check("two_ball_swap", 0.5 <= swap / res.inf_constant <= 2.0,
              f"swap ratio {swap / res.inf_constant:.2f}")
    # necessity table for in-range and out-of-range weights
    for tval, label in ((0.5, "in_range"), (1.2, "out_of_range")):
        sig = wt.power_weight(tval, cfg.p)
        rows = op.necessity_probe(ev, sig, cfg.p, radii, spec, seed=cfg.seed)
        t = rep.table(f"necessity_{label}", ["radius", "bp_product",
                                             "ratio_chi", "ratio_dual"])
        for r in rows:
            t.rows.append([r.radius, r.bp_product, r.ratio_chi, r.ratio_dual])
        prods = [r.bp_product for r in rows]
        rats = [r.max_ratio for r in rows]
        if label == "in_range":
            rep.check("necessity_bounded_product",
                      max(prods) <= 2.0 * min(prods),
                      f"products in [{min(prods):.3f}, {max(prods):.3f}]")
            rep.check("necessity_bounded_ratio", max(rats) <= 2.0 * min(rats),
                      f"ratios in [{min(rats):.3f}, {max(rats):.3f}]")
        else:
            growth_p = [prods[i + 1] / prods[i] for i in range(len(prods) - 1)]
            growth_r = [rats[i + 1] / rats[i] for i in range(len(rats) - 1)]
            rep.check("necessity_divergent_product",
                      all(g >= 1.5 for g in growth_p),
                      f"per-halving product growth {[round(g, 3) for g in growth_p]}")
            rep.check("necessity_divergent_ratio",
                      all(g >= 1.3 for g in growth_r),
                      f"per-halving ratio growth {[round(g, 3) for g in growth_r]}")


def _swapped_inf(dom, ev, res: op.TwoBallResult, spec: QuadratureSpec) -> float:
    pts = quad.sample_ball_region(dom, res.ball2, spec.with_(strategy="stratified"))
    member = dom.metric(pts.points, res.ball2.center) < res.ball2.radius
    W, ww = pts.points[member], pts.weights[member]
    rng = quad.substream(spec.seed, 0x51AB)
    zg = op._points_in_ball(dom, res.ball1.center, 0.9 * res.ball1.radius, rng, 48)
    pv = op._project_grid(ev, np.ones(len(W), dtype=complex), W, ww, zg)
    return float(np.min(np.abs(pv)))


SUBCOMMANDS = {
    "geometry-check": check_geometry,
    "kernel-check": check_kernels,
    "bp": check_bp,
    "operator-norm": check_operator_norm,
    "good-lambda": check_good_lambda,
    "lemma-suite": check_lemma_suite,
    "necessity": check_necessity,
}


def run(subcommand: str, config_path, out_dir=None, seed=None,
        threads=None) -> int:
    """Execute a subcommand against a config file; returns the exit code."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg.seed = int(seed)
            cfg.quad = cfg.quad.with_(seed=int(seed))
        if threads is not None:
            cfg.threads = int(threads)
        if out_dir is not None:
            cfg.out_dir = str(out_dir)
        if subcommand != "all" and subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    names = list(SUBCOMMANDS) if subcommand == "all" else [subcommand]
    t0 = time.time()
    report = ExperimentReport(subcommand=subcommand,
                              config_echo=_echo_config(cfg))
    try:
        for name in names:
            SUBCOMMANDS[name](cfg, report)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    report.wall_clock = time.time() - t0
    try:
        emit_report(report, cfg.out_dir, cfg.formats)
    except ConfigError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2
    for v in report.verdicts:
        print(f"[{v['verdict']:>7}] {v['check']}: {v['detail']}")
    return report.exit_code()


def _echo_config(cfg: ExperimentConfig) -> dict:
    return {
        "domain": {"kind": cfg.domain.kind, "dimension": cfg.domain.dimension,
                   **({"m": cfg.domain.m} if cfg.domain.kind == "egg" else {})},
        "weight": {"tag": cfg.weight.tag, "p": cfg.p},
        "kernel": {"mode": cfg.kernel_mode, "max_degree": cfg.max_degree},
        "quadrature": {
            "strategy": cfg.quad.strategy, "n_samples": cfg.quad.n_samples,
            "rel_tolerance": cfg.quad.rel_tolerance, "seed": cfg.quad.seed,
            "layer_count": cfg.quad.layer_count,
        },
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "threads": cfg.threads,
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="berglab",
        description="Bergman projection laboratory on model domains")
    parser.add_argument("subcommand",
                        choices=sorted(SUBCOMMANDS) + ["all"])
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)
    return run(args.subcommand, args.config, out_dir=args.out,
               seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
