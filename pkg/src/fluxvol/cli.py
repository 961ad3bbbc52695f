"""Command line front end and scenario runner.

Deterministic outputs (CSV tables, the JSON sidecar) never contain wall
times; those go to a separate ``*_timings.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import __version__
from . import diagnostics as dg
from .config import METHODS, ConfigError, RunConfig, ScenarioConfig, benchmark_config
from .field import field_from_config, cart_to_cyl, cyl_to_cart
from .fluxes import (flux_derivative, grad_psi_homologue, loop_flux, poloidal_circle,
                     toroidal_loop)
from .percival import (FrequencyVector, PercivalConvergenceError, TorusEmbedding,
                       eval_P, solve_stationary)
from .symmetry import ActionFlow, classify_quasisymmetric_form, find_lattice_generators
from .tracer import TurnSeries, trace, trace_turns
from .volume import (SectionDisk, VolumeProfile, circle_boundary, psi_inside,
                     volume_eq1_section, volume_monte_carlo, volume_poincare_boundary,
                     volume_profile_general, volume_profile_lattice, volume_profile_quasisym,
                     volume_stokes_surface)

log = logging.getLogger("fluxvol")

# absolute tolerances of the per-method self-check against the Pappus value
PAPPUS_TOL = {"eq1": 1e-4, "quasisym": 1e-6, "lattice": 1e-6, "general": 1e-4,
              "stokes": 1e-9, "poincare": 1e-4}


@dataclass
class MethodReport:
    method: str
    V: float = math.nan
    error_estimate: float = math.nan
    wall_time: float = math.nan
    n_evals: int = 0
    profile: VolumeProfile | None = None
    extra: dict = dc_field(default_factory=dict)
    status: str = "ok"
    reference: float = math.nan
    check: str = "n/a"

    @property
    def ref_error(self):
        return self.V - self.reference

    def row(self):
        return {"method": self.method, "V": self.V, "err": self.error_estimate,
                "ref_error": self.ref_error, "n_evals": self.n_evals, "check": self.check,
                "status": self.status}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


# -------------------------------------------------------------- plot data

def emit_plot_data(profiles, out):
    """Long-format CSV ``label, V, dV_dlabel, err, method``.

    ``profiles`` is one VolumeProfile or a list of them; rows of different
    methods are told apart by the ``method`` column.
    """
    if isinstance(profiles, VolumeProfile):
        profiles = [profiles]
    profiles = [p for p in profiles if p is not None]
    if not profiles or all(len(p.labels) == 0 for p in profiles):
        raise ValueError("empty profile: nothing to emit")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "V", "dV_dlabel", "err", "method"])
    for p in profiles:
        for i in range(len(p.labels)):
            w.writerow([_fmt(float(p.labels[i])), _fmt(float(p.V[i])),
                        _fmt(float(p.dV_dlabel[i])), _fmt(float(p.error_estimate[i])),
                        p.method])
    with open(out, "w", newline="") as fh:
        fh.write(buf.getvalue())
    return out


def _point_profile(method, label, V, err):
    return VolumeProfile(np.array([label]), np.array([V]), np.array([np.nan]), method,
                         np.array([err]), label_kind="psi")


# -------------------------------------------------------------- methods

def _psi_of(field, r):
    return 0.5 * r * r


def _run_eq1(field, sc, workers):
    R0 = field.params.R0
    res = volume_eq1_section(field, SectionDisk((R0, 0.0), sc.r), tuple(sc.eq1_grid),
                             workers=workers, rtol=sc.rtol, atol=sc.atol)
    return res.V, res.error_estimate, None, {"n_nodes": res.n_nodes, "n_flagged": res.n_flagged}


def _run_quasisym(field, sc, workers):
    psi = _psi_of(field, sc.r)
    prof = volume_profile_quasisym(field, np.linspace(0.0, psi, 2 * sc.n_labels + 1),
                                   workers=workers)
    return prof.V[-1], prof.error_estimate[-1], prof, {}


def _run_lattice(field, sc, workers):
    psi = _psi_of(field, sc.r)
    prof = volume_profile_lattice(field, np.linspace(0.0, psi, sc.n_labels + 1),
                                  workers=workers)
    return prof.V[-1], prof.error_estimate[-1], prof, {"Delta": prof.meta["Delta"]}


def _run_general(field, sc, workers):
    psi = _psi_of(field, sc.r)
    labels = np.linspace(psi / sc.n_labels, psi, sc.n_labels)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        prof = volume_profile_general(field, labels, label_kind="psi", n_turns=sc.n_turns,
                                      max_turns=sc.max_turns, center=(field.params.R0, 0.0),
                                      workers=workers)
    skipped = [s.label for s in prof.meta["surfaces"] if s.status != "ok"]
    for w in caught:
        log.info("general: %s", w.message)
    return prof.V[-1], prof.error_estimate[-1], prof, {"skipped_labels": skipped}


def _surface_omega(field, sc):
    if hasattr(field, "iota"):
        return FrequencyVector(1.0, float(field.iota(sc.r)))
    turns = trace_turns(field, field.params.R0 + sc.r, 0.0, sc.n_turns,
                        center=(field.params.R0, 0.0))
    return FrequencyVector(1.0, dg.diagnose_turns(turns, field).iota.iota)


def solve_surface(field, sc):
    """Percival torus with the rotation number of the target surface."""
    omega = _surface_omega(field, sc)
    init = TorusEmbedding.circular(0.9 * sc.r, K=tuple(sc.percival_K),
                                   center=(field.params.R0, 0.0))
    return solve_stationary(field, omega, init, tol=sc.percival_tol)


def _run_stokes(field, sc, workers):
    emb, res = solve_surface(field, sc)
    N, M = sc.stokes_grid
    V = abs(volume_stokes_surface(emb.to_mesh(N, M)))
    V2 = abs(volume_stokes_surface(emb.to_mesh(max(4, N // 2), max(4, M // 2))))
    return V, abs(V - V2), None, {"percival_residual": res.residual,
                                  "mean_minor_radius": emb.mean_minor_radius()}


def _run_poincare(field, sc, workers):
    kw = dict(n_quad=sc.poincare_quad, quad_tol=sc.quad_tol, center=(field.params.R0, 0.0),
              workers=workers)
    V, signed = volume_poincare_boundary(field, circle_boundary(sc.r), n_s=24, **kw)
    # error: same boundary with half the return-time samples per ray
    V2, _ = volume_poincare_boundary(field, circle_boundary(sc.r), n_s=12, **kw)
    return V, abs(V - V2), None, {"signed": signed}


def _run_mc(field, sc, workers):
    R0, r = field.params.R0, sc.r
    box = ([-(R0 + r), -(R0 + r), -r], [R0 + r, R0 + r, r])
    res = volume_monte_carlo(psi_inside(field, _psi_of(field, r)), box, sc.mc_samples,
                             seed=sc.seed)
    # only the label psi is evaluated, so the B/A counter stays at zero
    return res.V, res.ci_halfwidth, None, {"hits": res.hits, "box_volume": res.box_volume,
                                           "ci95": res.ci_halfwidth, "samples": res.n_samples}


RUNNERS = {"eq1": _run_eq1, "quasisym": _run_quasisym, "lattice": _run_lattice,
           "general": _run_general, "stokes": _run_stokes, "poincare": _run_poincare,
           "mc": _run_mc}


def _self_check(rep: MethodReport, profile_ok: bool):
    if rep.status != "ok":
        return "fail"
    if not profile_ok:
        return "fail"
    if not math.isfinite(rep.reference):
        return "n/a"
    tol = rep.extra.get("ci95") if rep.method == "mc" else PAPPUS_TOL.get(rep.method)
    if tol is None:
        return "n/a"
    return "pass" if abs(rep.ref_error) <= tol else "fail"


def run_method(field, cfg: RunConfig, method) -> MethodReport:
    sc = cfg.scenario
    rep = MethodReport(method)
    # all circular psi-surfaces survive the perturbation of this field
    rep.reference = 2.0 * np.pi ** 2 * field.params.R0 * sc.r ** 2
    before = field.n_evals
    t0 = time.perf_counter()
    try:
        V, err, prof, extra = RUNNERS[method](field, sc, cfg.workers)
        rep.V, rep.error_estimate, rep.profile, rep.extra = float(V), float(err), prof, extra
    except Exception as e:     # surfaced with method tag, other methods continue
        rep.status = f"error: {type(e).__name__}: {e}"
        log.error("%s failed: %s", method, rep.status)
    rep.wall_time = time.perf_counter() - t0
    rep.n_evals = field.n_evals - before
    ok = rep.profile is None or not rep.profile.violations()
    rep.check = _self_check(rep, ok)
    return rep


def comparison_table(reports):
    head = f"{'method':<9} {'V':>18} {'err':>10} {'V-ref':>10} {'evals':>10} {'time/s':>8}  check"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.method:<9} {r.V:>18.12f} {r.error_estimate:>10.2e} "
                     f"{r.ref_error:>10.2e} {r.n_evals:>10d} {r.wall_time:>8.2f}  {r.check}"
                     + ("" if r.status == "ok" else f"  ({r.status})"))
    return "\n".join(lines)


def run_scenario(cfg: RunConfig, write=True):
    """Run every requested method; write the comparison CSV, the profile
    CSV, the provenance sidecar and the timings file.  Returns the reports."""
    cfg.validate()
    field = field_from_config(cfg.field.block())
    methods = cfg.scenario.method_list(field.has_u)
    reports = []
    for m in methods:
        log.info("running %s", m)
        reports.append(run_method(field, cfg, m))
    if write:
        write_artifacts(cfg, reports)
    return reports


def write_artifacts(cfg: RunConfig, reports):
    out = cfg.output.dir
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, cfg.output.prefix)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["method", "V", "err", "ref_error", "n_evals", "check", "status"]
    w.writerow(cols)
    for r in reports:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in cols])
    with open(stem + "_volumes.csv", "w", newline="") as fh:
        fh.write(buf.getvalue())
    psi = 0.5 * cfg.scenario.r ** 2
    profs = [r.profile if r.profile is not None else _point_profile(r.method, psi, r.V,
                                                                    r.error_estimate)
             for r in reports if r.status == "ok"]
    if profs:
        emit_plot_data(profs, stem + "_profile.csv")
    side = {"tool": "fluxvol", "version": __version__, "config": cfg.to_dict(),
            "config_hash": cfg.hash(), "seeds": {"mc": cfg.scenario.seed},
            "results": {r.method: {**r.row(), "extra": r.extra} for r in reports}}
    with open(stem + ".json", "w") as fh:
        fh.write(dumps(side))
    timings = {r.method: {"wall_time": r.wall_time, "n_evals": r.n_evals,
                          "over_budget": r.wall_time > cfg.scenario.time_budget}
               for r in reports}
    with open(stem + "_timings.json", "w") as fh:
        fh.write(dumps(timings))


def scenario_ok(cfg, reports):
    return all(r.status == "ok" and r.check != "fail"
               and r.wall_time <= cfg.scenario.time_budget for r in reports)


# -------------------------------------------------------------- subcommands

def _triple(s, name):
    try:
        v = [float(x) for x in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name} must be comma-separated numbers") from None
    return v


def _cyl_point(s):
    v = _triple(s, "point")
    if len(v) != 3:
        raise argparse.ArgumentTypeError("point must be R,phi,Z")
    return v


def _pair(s):
    v = _triple(s, "pair")
    if len(v) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers")
    return v


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_toml(args.config) if args.config else RunConfig().validate()
    sc = cfg.scenario
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    out = cfg.output if args.out_dir is None else replace(cfg.output, dir=args.out_dir)
    cfg = replace(cfg, scenario=sc, output=out, workers=args.workers or cfg.workers)
    return cfg.validate()


def _write_json(args, cfg, name, payload):
    path = args.out or os.path.join(cfg.output.dir, f"{cfg.output.prefix}_{name}.json")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = dumps(payload)
    with open(path, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_trace(args, cfg):
    field = field_from_config(cfg.field.block())
    R, phi, Z = args.start
    orbit = trace(field, cyl_to_cart(R, phi, Z), args.t_end, rtol=cfg.scenario.rtol,
                  atol=cfg.scenario.atol)
    t_last = orbit.times[-1]
    ts = np.linspace(0.0, t_last, args.n_samples)
    X = np.array([orbit(t) for t in ts])
    Rs, ph, Zs = cart_to_cyl(X)
    ph = np.unwrap(ph) + (phi - np.unwrap(ph)[0])
    psi = field.psi(X, check=False) if field.has_psi else np.full(len(ts), np.nan)
    path = args.out or os.path.join(cfg.output.dir, f"{cfg.output.prefix}_orbit.csv")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "R", "phi", "Z", "psi"])
        for i in range(len(ts)):
            w.writerow([_fmt(v) for v in (ts[i], *X[i], Rs[i], ph[i], Zs[i], psi[i])])
    if orbit.status != "ok":
        log.warning("trace stopped early: %s", orbit.status)
        return 1
    return 0


def turns_from_orbit_csv(path, center, phi0=0.0):
    """Plane returns interpolated from an orbit CSV with monotone ``phi``."""
    from scipy.interpolate import CubicSpline
    data = np.genfromtxt(path, delimiter=",", names=True)
    ph = data["phi"]
    if np.any(np.diff(ph) <= 0):
        raise ValueError("orbit phi is not strictly increasing")
    k0 = math.ceil((ph[0] - phi0) / (2 * np.pi) - 1e-12)
    k1 = math.floor((ph[-1] - phi0) / (2 * np.pi) + 1e-12)
    targets = phi0 + 2 * np.pi * np.arange(k0, k1 + 1)
    if len(targets) < 3:
        raise dg.InsufficientDataError("orbit too short for plane returns")
    # the poloidal angle is unwrapped along the dense samples, not at the
    # returns, where a whole turn per return would alias
    th = np.unwrap(np.arctan2(data["Z"] - center[1], data["R"] - center[0]))
    if np.max(np.abs(np.diff(th))) > 1.0:
        raise ValueError("orbit samples too sparse to follow the poloidal angle")
    sp = {c: CubicSpline(ph, v) for c, v in (("t", data["t"]), ("R", data["R"]),
                                             ("Z", data["Z"]), ("theta", th))}
    R, Z, t = sp["R"](targets), sp["Z"](targets), sp["t"](targets)
    return TurnSeries(R, Z, t, phi0, sp["theta"](targets), tuple(center))


def _diagnostics_payload(args, cfg):
    field = field_from_config(cfg.field.block())
    center = args.center or [field.params.R0, 0.0]
    if args.orbit:
        turns = turns_from_orbit_csv(args.orbit, center)
    elif args.start:
        R, phi, Z = args.start
        turns = trace_turns(field, R, Z, args.turns, phi0=phi, center=tuple(center),
                            rtol=cfg.scenario.rtol, atol=cfg.scenario.atol)
    else:
        raise ConfigError("give --orbit or --start")
    d = dg.diagnose_turns(turns, field)
    return {"iota": d.iota.iota, "cf_digits": d.iota.cf_digits,
            "recurrence_digits": d.iota.recurrence_digits, "T_bar": d.T_bar,
            "T_birkhoff": d.T_birkhoff, "n_returns": len(turns),
            "error_estimates": {"iota": d.iota.error_estimate, "T_bar": d.T_bar_error}}


def cmd_iota(args, cfg):
    return _write_json(args, cfg, "iota", _diagnostics_payload(args, cfg))


def cmd_return_time(args, cfg):
    return _write_json(args, cfg, "return_time", _diagnostics_payload(args, cfg))


def cmd_lattice(args, cfg):
    field = field_from_config(cfg.field.block())
    R, phi, Z = args.seed_point
    basis = find_lattice_generators(ActionFlow(field), cyl_to_cart(R, phi, Z))
    form = classify_quasisymmetric_form(basis)
    return _write_json(args, cfg, "lattice", {
        "T1": basis.T1, "T2": basis.T2, "Delta": basis.Delta,
        "classification": {"kind": form.kind, "tau": form.tau, "T": form.T, "c": form.c,
                           "unimodular": form.unimodular}})


def cmd_flux(args, cfg):
    field = field_from_config(cfg.field.block())
    R0 = field.params.R0
    loop = (poloidal_circle(R0, 0.0, args.r) if args.loop == "poloidal"
            else toroidal_loop(R0 + args.r, 0.0))
    if args.derivative:
        fv = flux_derivative(field, loop, grad_psi_homologue(field))
    else:
        fv = loop_flux(field, loop)
    return _write_json(args, cfg, "flux", {
        "Phi": fv.Phi, "method": fv.method, "n_quad": fv.n_quad, "loop": args.loop,
        "r": args.r, "convergence": {"change": fv.change, "converged": fv.converged}})


def cmd_volume(args, cfg):
    sc = replace(cfg.scenario, methods=[args.method])
    cfg = replace(cfg, scenario=sc).validate()
    reports = run_scenario(cfg)
    print(comparison_table(reports))
    if args.out:
        r = reports[0]
        if r.status == "ok":
            prof = r.profile if r.profile is not None else _point_profile(
                r.method, 0.5 * sc.r ** 2, r.V, r.error_estimate)
            emit_plot_data(prof, args.out)
    return 0 if scenario_ok(cfg, reports) else 1


def _parse_init(spec, K, center):
    kind, _, rest = spec.partition(":")
    if kind != "circular":
        raise ConfigError(f"unknown initial guess {spec!r}")
    opts = dict(kv.split("=") for kv in rest.split(",") if kv)
    return TorusEmbedding.circular(float(opts.get("r", 0.45)), K=K, center=center)


def cmd_percival(args, cfg):
    field = field_from_config(cfg.field.block())
    K = args.K or list(cfg.scenario.percival_K)
    K = (K[0], K[0]) if len(K) == 1 else (K[0], K[1])
    omega = FrequencyVector(*args.omega)
    init = _parse_init(args.init, K, (field.params.R0, 0.0))
    tol = cfg.scenario.percival_tol
    try:
        emb, res = solve_stationary(field, omega, init, tol=tol)
    except PercivalConvergenceError as e:
        log.error("%s", e)
        _write_json(args, cfg, "percival", {"converged": False, "message": str(e),
                                            "history": e.history})
        return 1
    h = args.flux_step
    fluxes = []
    for j in range(2):
        vals = []
        for sgn in (1.0, -1.0):
            w = omega.array.copy()
            w[j] += sgn * h
            wv = FrequencyVector(*w)
            e2, _ = solve_stationary(field, wv, emb, tol=tol)
            vals.append(eval_P(field, e2, wv))
        fluxes.append((vals[0] - vals[1]) / (2 * h))
    return _write_json(args, cfg, "percival", {
        "converged": True, "P": res.P, "residual": res.residual, "c_bar": res.c_bar,
        "P_over_c_bar": res.helicity_ratio, "fluxes": fluxes, "omega": list(args.omega),
        "K": list(K), "mean_minor_radius": emb.mean_minor_radius(),
        "stokes_volume": abs(volume_stokes_surface(emb.to_mesh(64, 64)))})


def cmd_benchmark(args, cfg):
    if not args.config:
        cfg = replace(benchmark_config(seed=cfg.scenario.seed), output=cfg.output,
                      workers=cfg.workers)
    reports = run_scenario(cfg)
    print(comparison_table(reports))
    return 0 if scenario_ok(cfg, reports) else 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out-dir", default=None, help="output directory")
    common.add_argument("--workers", type=int, default=None, help="worker processes")
    common.add_argument("--seed", type=int, default=None, help="random seed (Monte Carlo)")
    common.add_argument("--verbose", "-v", action="count", default=0)

    p = argparse.ArgumentParser(prog="fluxvol", description="Flux-surface volume toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("trace", parents=[common], help="trace a field line to CSV")
    s.add_argument("--start", type=_cyl_point, required=True, help="R,phi,Z")
    s.add_argument("--t-end", type=float, required=True)
    s.add_argument("--n-samples", type=int, default=2001)
    s.add_argument("--out")
    s.set_defaults(func=cmd_trace)

    for name, fn in (("iota", cmd_iota), ("return-time", cmd_return_time)):
        s = sub.add_parser(name, parents=[common], help="single-orbit diagnostics")
        s.add_argument("--orbit", help="orbit CSV from 'fluxvol trace'")
        s.add_argument("--start", type=_cyl_point, help="R,phi,Z to trace on demand")
        s.add_argument("--turns", type=int, default=500)
        s.add_argument("--center", type=_pair, help="Rc,Zc of the axis puncture")
        s.add_argument("--out")
        s.set_defaults(func=fn)

    s = sub.add_parser("lattice", parents=[common], help="period lattice of the u/B action")
    s.add_argument("--seed-point", "--point", dest="seed_point", type=_cyl_point,
                   required=True, help="R,phi,Z on the surface")
    s.add_argument("--out")
    s.set_defaults(func=cmd_lattice)

    s = sub.add_parser("flux", parents=[common], help="loop flux on a circular surface")
    s.add_argument("--loop", choices=["poloidal", "toroidal"], default="poloidal")
    s.add_argument("--r", type=float, default=0.5)
    s.add_argument("--derivative", action="store_true",
                   help="dPhi/dpsi from B only instead of the A loop integral")
    s.add_argument("--out")
    s.set_defaults(func=cmd_flux)

    s = sub.add_parser("volume", parents=[common], help="volume by one method")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--out", help="profile CSV")
    s.set_defaults(func=cmd_volume)

    s = sub.add_parser("percival", parents=[common], help="solve for a stationary torus")
    s.add_argument("--omega", type=_pair, required=True, help="w1,w2")
    s.add_argument("--K", type=lambda v: [int(x) for x in v.split(",")], default=None,
                   help="mode cutoff K or K1,K2")
    s.add_argument("--init", default="circular:r=0.45")
    s.add_argument("--flux-step", type=float, default=1e-4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_percival)

    s = sub.add_parser("benchmark", parents=[common], help="all methods, comparison table")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
