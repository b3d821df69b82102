"""Command-line driver: build an orbit cache, check it, run experiments.

Exit codes: 0 success, 2 verdict CONVERGENT, 3 diagnostics refused the
experiment, 4 a numeric guard tripped, 1 any other failure, 64 usage error.
"""

import argparse
import csv
import glob
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .cache import file_hash, load_cache, read_header, write_cache
from .config import ExperimentConfig
from .diagnostics import anosov_diagnostic, antipodality_check, jordan_span_check, regularity_diagnostic
from .enumeration import ball_size, enumerate_ball
from .errors import (
    BudgetExceeded,
    CacheCorrupted,
    DiagnosticsFailed,
    IllConditioned,
    LabError,
    NonFinite,
    RankDeficient,
)
from .linalg import LinearForm, first_coordinate_form, opposition_involution, sum_of_positive_roots_form
from .series import (
    DichotomyConfig,
    DirectionSpec,
    SubspaceSpec,
    abscissa,
    choose_direction,
    dichotomy_experiment,
    filter_directional,
    filter_subspace,
    growth_indicator,
    is_finite_filter,
    limit_cone,
    partial_sums,
    principal_subspace,
    regime_fit,
    tangent_form,
    transverse_spread,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONVERGENT = 2
EXIT_DIAGNOSTICS = 3
EXIT_NUMERIC = 4
EXIT_USAGE = 64

INVARIANT_SAMPLES = 500


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as CONVERGENT
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# serialization


def jsonable(obj):
    """Plain JSON data; non-finite floats become strings so output stays strict JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


# ---------------------------------------------------------------------------
# shared resolution


def _artifact(cfg, command, cache_path, result):
    return {
        "command": command,
        "version": __version__,
        "config": cfg.echo(),
        "cache_hash": file_hash(cache_path),
        "result": result,
    }


def _open_table(cfg):
    path = cfg.cache_path()
    if not os.path.exists(path):
        raise FileNotFoundError(f"no orbit cache at {path}; run the build command first")
    table, _ = load_cache(path)
    return table, path


def _dichotomy_config(cfg):
    s = cfg.series
    return DichotomyConfig(
        radii=s.radii,
        radius_factors=tuple(s.radius_factors),
        tgrid_points=s.tgrid_points,
        min_window=s.min_window,
        grid_resolution=s.grid_resolution,
        half_angles=tuple(s.half_angles),
        cone_shells=s.cone_shells,
        indicator_rows=s.indicator_rows,
        tail_fraction=s.tail_fraction,
        antipodal_samples=s.antipodal_samples,
        seed=cfg.seed,
        include_guarded=cfg.include_guarded,
        calibrate=s.calibrate,
    )


def _direction(cfg, theta):
    if cfg.direction is None:
        return None
    return DirectionSpec.from_vector(np.asarray(cfg.direction, dtype=float), theta)


def _subspace(cfg, table, theta, u):
    kind = cfg.subspace.kind
    if kind == "full":
        return SubspaceSpec.full(table.d, theta)
    if kind == "basis":
        return SubspaceSpec.span(np.asarray(cfg.subspace.basis, dtype=float), theta)
    if kind == "principal":
        return principal_subspace(table, theta, u, cfg.subspace.dim)
    return SubspaceSpec.line(u)


def _auto_direction(cfg, table, theta):
    """Direction of maximal growth and the indicator pieces that found it."""
    s = cfg.series
    cone = limit_cone(table, theta, s.cone_shells)
    ind = growth_indicator(
        table, theta, cone, s.grid_resolution, tuple(s.half_angles), cfg.include_guarded, s.indicator_rows, cfg.seed
    )
    u, value, _ = choose_direction(ind, cone, SubspaceSpec.full(table.d, theta))
    return u, value, ind


def _psi(cfg, table, theta, u, value, ind):
    kind = cfg.psi.kind
    d = table.d
    if kind == "sum-of-roots":
        return sum_of_positive_roots_form(d, theta)
    if kind == "first-coordinate":
        return first_coordinate_form(d, theta)
    if kind == "dual":
        return LinearForm(theta, np.asarray(cfg.psi.dual, dtype=float))
    psi = tangent_form(ind, u, value).form
    if cfg.series.calibrate:
        psi = psi.scaled(abscissa(table, table.usable(cfg.include_guarded), psi, cfg.include_guarded).s)
    return psi


# ---------------------------------------------------------------------------
# commands


def cmd_build(cfg, args):
    os.makedirs(cfg.out, exist_ok=True)
    gens = cfg.preset.build()
    path = cfg.cache_path()
    if os.path.exists(path):
        try:
            header = read_header(path)
            same = (
                header["generator_hash"] == gens.digest()
                and header["maxlen"] == cfg.maxlen
                and header["policy"] == cfg.policy
                and header["seed"] == cfg.seed
            )
            if same:
                load_cache(path)  # verifies every checksum
                print(f"up-to-date {path}")
                return EXIT_OK
        except CacheCorrupted as exc:
            print(f"rebuilding corrupted cache: {exc}")
    table = enumerate_ball(gens, cfg.maxlen, cfg.policy, workers=cfg.threads, budget=cfg.memory_budget, seed=cfg.seed)
    write_cache(path, table)
    print(f"built {path}: {len(table)} rows, maxlen {cfg.maxlen}")
    return EXIT_OK


def run_invariants(cfg, table, gens):
    """The invariant suite over a built table; one record per invariant."""
    theta = cfg.resolved_theta()
    rng = np.random.default_rng(cfg.seed)
    results = []

    def record(name, ok, checked, detail=""):
        results.append({"invariant": name, "passed": bool(ok), "checked": int(checked), "detail": detail})

    if table.meta["policy"] == "free":
        expected = ball_size(gens.m, table.maxlen)
        record("ball-size", len(table) == expected, 1, f"{len(table)} rows, formula {expected}")
    record("identity-row", table.length[0] == 0 and np.all(table.mu[0] == 0), 1)
    rows = rng.choice(len(table), size=min(INVARIANT_SAMPLES, len(table)), replace=False)
    words = table.words(rows)
    order_ok = bool(np.all(np.diff(table.length) >= 0))
    record("sorted-by-length", order_ok, len(table))
    # inverse words: mu(w^-1) = i(mu(w))
    from .enumeration import _invert_words

    inv = _invert_words(words)
    lookup = _row_lookup(table)
    worst, checked = 0.0, 0
    for w_row, iw in zip(rows, inv):
        key = tuple(int(c) for c in iw if c >= 0)
        j = lookup.get(key)
        if j is None:
            continue
        mu = table.mu[w_row]
        worst = max(worst, float(np.max(np.abs(table.mu[j] - opposition_involution(mu)))) / (1 + np.linalg.norm(mu)))
        checked += 1
    record("inverse-opposition", worst <= 1e-8, checked, f"max relative error {worst:.3g}")
    # prefix consistency
    gen_norm = max(float(np.linalg.norm(table.mu[r])) for r in range(1, 1 + 2 * gens.m) if r < len(table))
    live = rows[table.length[rows] > 0]
    jumps = np.linalg.norm(table.mu[live] - table.mu[table.parent[live]], axis=1)
    record("prefix-lipschitz", bool(np.all(jumps <= gen_norm + 1e-7)), live.size, f"max step {jumps.max():.4g}")
    # series-side invariants
    u = DirectionSpec.from_vector(np.mean(table.mu_theta(theta)[table.shell(table.maxlen)], axis=0), theta)
    r = 0.5
    same = np.array_equal(filter_subspace(table, SubspaceSpec.line(u), r), filter_directional(table, u, r))
    record("line-filter-equivalence", same, len(table))
    psi = sum_of_positive_roots_form(table.d, theta)
    mask = np.ones(len(table), dtype=bool)
    T = np.linspace(1, max(2.0, 0.8 * float(table.psi_values(psi).max())), 8)
    a = partial_sums(table, mask, psi, 1.0, T, cfg.include_guarded).S
    perm = rng.permutation(len(table))
    shuffled = type(table).from_points(table.mu[perm], table.length[perm])
    b = partial_sums(shuffled, mask, psi, 1.0, T, cfg.include_guarded).S
    record("resummation-order", float(np.max(np.abs(a - b))) <= 1e-12, T.size, f"max change {np.max(np.abs(a - b)):.3g}")
    try:
        base = abscissa(table, mask, psi, cfg.include_guarded)
        ok, worst = True, 0.0
        for c in (0.5, 2.0):
            other = abscissa(table, mask, psi.scaled(c), cfg.include_guarded)
            dev = abs(other.s - base.s / c)
            tol = 3 * (other.stderr + base.stderr / c) + 1e-9
            ok &= dev <= tol
            worst = max(worst, dev / tol)
        record("abscissa-homogeneity", ok, 2, f"worst deviation {worst:.3g} of tolerance")
    except LabError as exc:
        record("abscissa-homogeneity", False, 0, str(exc))
    # diagnostics
    for name, fn, good in (
        ("regularity", lambda: regularity_diagnostic(table, theta), "theta-regular-consistent"),
        ("anosov", lambda: anosov_diagnostic(table, theta), "anosov-consistent"),
        ("antipodality", lambda: antipodality_check(gens, table, theta, 200, cfg.seed), "antipodal-consistent"),
    ):
        try:
            rep = fn()
            record(name, rep["verdict"] == good, 1, rep["verdict"])
        except LabError as exc:
            record(name, False, 0, str(exc))
    try:
        span = jordan_span_check(gens, table, theta, seed=cfg.seed)
        record("jordan-span", True, span["rows"], f"rank {span['rank']} of {span['dim']}")
    except LabError as exc:
        record("jordan-span", False, 0, str(exc))
    return results


def _row_lookup(table):
    """Map from word tuples to rows (built on demand for the sampled checks)."""
    words = table.words(np.arange(len(table)))
    out = {}
    for i, w in enumerate(words):
        out[tuple(int(c) for c in w if c >= 0)] = i
    return out


def cmd_check(cfg, args):
    path = cfg.cache_path()
    try:
        table, _ = load_cache(path)
    except CacheCorrupted as exc:
        print(f"FAIL checksum: {exc}")
        return EXIT_FAILURE
    gens = cfg.preset.build()
    results = run_invariants(cfg, table, gens)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['invariant']} ({r['checked']} checked) {r['detail']}")
    write_json(os.path.join(cfg.out, "check.json"), _artifact(cfg, "check", path, {"invariants": results}))
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_FAILURE


def cmd_series(cfg, args):
    table, path = _open_table(cfg)
    theta = cfg.resolved_theta()
    u = _direction(cfg, theta)
    value, ind = None, None
    if u is None or cfg.psi.kind == "tangent":
        auto_u, auto_value, ind = _auto_direction(cfg, table, theta)
        if u is None:
            u, value = auto_u, auto_value
    psi = _psi(cfg, table, theta, u, value, ind)
    W = _subspace(cfg, table, theta, u)
    result = {"u": u.u, "psi_dual": psi.dual, "W_basis": W.basis, "codim": W.codim}
    if is_finite_filter(W, psi):
        result["finite_filter"] = True
        result["note"] = "psi vanishes on W, so every tube around W holds finitely many elements"
        write_json(os.path.join(cfg.out, "series.json"), _artifact(cfg, "series", path, result))
        print("finite filter: psi vanishes on W")
        return EXIT_OK
    delta = float(psi(u.u))
    usable = table.usable(cfg.include_guarded)
    horizon = 0.8 * float(table.psi_values(psi)[table.shell(table.maxlen)][usable[table.shell(table.maxlen)]].min()) / delta
    sigma, _ = transverse_spread(table, W)
    s = cfg.series
    radii = list(s.radii) if s.radii is not None else [f * sigma for f in s.radius_factors]
    runs, rows = [], []
    for R, f in zip(radii, s.radius_factors):
        mask = filter_subspace(table, W, R) if math.isfinite(R) else np.ones(len(table), dtype=bool)
        lo = min(max(f * f, s.min_window), 0.5)
        Tgrid = np.geomspace(lo * horizon, horizon, s.tgrid_points)
        curve = partial_sums(table, mask, psi, delta, Tgrid, cfg.include_guarded)
        try:
            fit = regime_fit(curve, s.tail_fraction)
            fit_d = {"regime": fit.regime, "exponent": fit.exponent, "stderr": fit.stderr, "rss": fit.rss}
        except LabError as exc:
            fit_d = {"error": str(exc)}
        runs.append({"radius": R, "rows": curve.rows, "fit": fit_d})
        rows += [(R, t, v, int(tr)) for t, v, tr in curve.to_rows()]
    result.update({"finite_filter": False, "delta": delta, "horizon": horizon, "runs": runs})
    write_csv(os.path.join(cfg.out, "series_curves.csv"), ["radius", "T", "S", "truncated"], rows)
    write_json(os.path.join(cfg.out, "series.json"), _artifact(cfg, "series", path, result))
    for r in runs:
        print(f"R={r['radius']:.4g} rows={r['rows']} {r['fit']}")
    return EXIT_OK


def cmd_cone(cfg, args):
    table, path = _open_table(cfg)
    theta = cfg.resolved_theta()
    cone = limit_cone(table, theta, cfg.series.cone_shells)
    result = {
        "interior": cone.interior,
        "inradius": cone.inradius,
        "angular_diameter": cone.angular_diameter,
        "rows": cone.rows,
        "vertices_simplex": cone.vertices,
        "vertex_directions": cone.vertex_directions,
    }
    header = [f"s{i}" for i in theta] + [f"x{j}" for j in range(table.d)]
    write_csv(
        os.path.join(cfg.out, "cone_vertices.csv"),
        header,
        [list(s) + list(v) for s, v in zip(cone.vertices, cone.vertex_directions)],
    )
    write_json(os.path.join(cfg.out, "cone.json"), _artifact(cfg, "cone", path, result))
    print(f"cone interior={cone.interior} inradius={cone.inradius:.4g} vertices={cone.vertices.shape[0]}")
    return EXIT_OK


def cmd_indicator(cfg, args):
    table, path = _open_table(cfg)
    theta = cfg.resolved_theta()
    _, _, ind = _auto_direction(cfg, table, theta)
    header = [f"x{j}" for j in range(table.d)] + ["value", "stderr", "half_angle", "count", "inside_cone"]
    rows = [
        list(ind.directions[i]) + [ind.values[i], ind.stderr[i], ind.half_angle[i], int(ind.samples[i]), int(ind.inside[i])]
        for i in range(ind.values.size)
    ]
    write_csv(os.path.join(cfg.out, "indicator.csv"), header, rows)
    positive, counted = ind.positivity()
    result = {
        "cells": int(ind.values.size),
        "finite": int(ind.finite.sum()),
        "reliable": int(ind.reliable.sum()),
        "concavity_violation": ind.concavity_violation,
        "positive_on_interior": positive,
        "positivity_cells": counted,
        "row_fraction": ind.row_fraction,
    }
    write_json(os.path.join(cfg.out, "indicator.json"), _artifact(cfg, "indicator", path, result))
    print(f"indicator: {result['finite']} finite cells, concavity violation {ind.concavity_violation:.3g}")
    return EXIT_OK


def cmd_dichotomy(cfg, args):
    table, path = _open_table(cfg)
    theta = cfg.resolved_theta()
    gens = cfg.preset.build()
    dcfg = _dichotomy_config(cfg)
    direction = _direction(cfg, theta)
    W = None
    if cfg.subspace.kind != "line":
        if direction is None:
            direction, _, _ = _auto_direction(cfg, table, theta)
        W = _subspace(cfg, table, theta, direction)
    out_json = os.path.join(cfg.out, "dichotomy.json")
    try:
        rep = dichotomy_experiment(table, theta, W, dcfg, gens=gens, direction=direction)
    except DiagnosticsFailed as exc:
        write_json(out_json, _artifact(cfg, "dichotomy", path, {"verdict": "REFUSED", "diagnostics": exc.report}))
        print("diagnostics failed; experiment refused")
        return EXIT_DIAGNOSTICS
    data = rep.to_dict()
    rows = []
    for run in data["runs"]:
        rows += [(run["factor"], t, s, int(tr)) for t, s, tr in run.pop("curve")]
    write_csv(os.path.join(cfg.out, "dichotomy_curves.csv"), ["radius_factor", "T", "S", "truncated"], rows)
    write_json(out_json, _artifact(cfg, "dichotomy", path, data))
    con = data["consensus"]
    print(f"verdict {rep.verdict}: {con and con['regime']} exponent {con and con['exponent']:.3f}; "
          f"prediction {rep.prediction['regime']} agreement={rep.agreement}")
    return EXIT_CONVERGENT if rep.verdict == "CONVERGENT" else EXIT_OK


def cmd_report(cfg, args):
    path = cfg.cache_path()
    current = file_hash(path) if os.path.exists(path) else None
    entries = []
    ok = True
    for name in sorted(glob.glob(os.path.join(cfg.out, "*.json"))):
        if os.path.basename(name) == "report.json":
            continue
        with open(name) as fh:
            art = json.load(fh)
        if "cache_hash" not in art:
            continue
        match = art["cache_hash"] == current
        ok &= match
        res = art.get("result", {})
        entries.append(
            {
                "artifact": os.path.basename(name),
                "command": art.get("command"),
                "verdict": res.get("verdict") if isinstance(res, dict) else None,
                "cache_hash_matches": match,
            }
        )
    write_json(os.path.join(cfg.out, "report.json"), {"cache_hash": current, "config": cfg.echo(), "artifacts": entries})
    for e in entries:
        print(f"{e['artifact']}: {e['command']} verdict={e['verdict']} hash {'ok' if e['cache_hash_matches'] else 'MISMATCH'}")
    return EXIT_OK if ok else EXIT_FAILURE


COMMANDS = {
    "build": cmd_build,
    "check": cmd_check,
    "series": cmd_series,
    "cone": cmd_cone,
    "indicator": cmd_indicator,
    "dichotomy": cmd_dichotomy,
    "report": cmd_report,
}


def make_parser():
    parser = _Parser(prog="anosovlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--threads", type=int, help="worker threads for enumeration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--include-guarded-rows", action="store_true", help="keep numerically guarded rows in sums")
    return parser


def resolve_config(args):
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if args.include_guarded_rows:
        changes["include_guarded"] = True
    return replace(cfg, **changes) if changes else cfg


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, OSError) as exc:
        print(f"usage error: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(cfg.out, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, args)
    except (RankDeficient, IllConditioned, NonFinite) as exc:
        print(f"numeric guard: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BudgetExceeded as exc:
        print(f"memory budget exceeded: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (LabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
