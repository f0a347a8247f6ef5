"""Batch driver: inequality sweeps, transport probes, stability studies and body reports.

Every command reads a JSON config, computes all results in memory and then
writes its reports from a single thread, so a run either produces a full
set of files or, on a usage/config error, none at all.

Exit codes: 0 all checks pass, 1 a numerical or assertion failure, 2 a
usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bodies as B
from .errors import AelabError, SizeCapError
from .functionals import (DivergenceSpec, LogConcaveDensity, affine_isoperimetric_sides,
                          divergence_scale, divergence_sides, intvc_sides, monge_ampere_residual,
                          quadratic_fit_distance, reverse_logsobolev_sides)
from .grid import FunctionSpec
from .transport import DEFAULT_SIZE_CAP, linearity_probe

DEFAULT_TOL = 1e-3
INTVC_TOL = 5e-3
MA_THRESHOLD = 1e-2
GAP_TOL = 1e-8
PUSHFORWARD_TOL = 0.02
RESIDUAL_TOL = 0.05
LIMIT_TOL = 1e-3

DEFAULT_DIVERGENCES = ({"f": "log"}, {"f": "power", "lambda": 0.5}, {"f": "linear"},
                       {"f": "neg_reciprocal"}, {"f": "power", "lambda": 2.0})
DEFAULT_CHECKS = ("divergence", "intvc", "logsobolev", "as_lambda")
DEFAULT_LAMBDAS = (-1.0, -0.5, 0.25, 0.5, 0.75, 1.0)


class ConfigError(Exception):
    """Malformed or inconsistent config; maps to exit code 2."""


def default_tolerance() -> float:
    raw = os.environ.get("AELAB_TOL")
    if raw is None:
        return DEFAULT_TOL
    try:
        tol = float(raw)
    except ValueError:
        raise ConfigError(f"AELAB_TOL={raw!r} is not a number") from None
    if not tol > 0:
        raise ConfigError("AELAB_TOL must be positive")
    return tol


def _tolerance(cfg: dict) -> float:
    tol = cfg.get("tolerance", default_tolerance())
    if not isinstance(tol, (int, float)) or not tol > 0:
        raise ConfigError("tolerance must be a positive number")
    return float(tol)


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".15g")
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "" if x is None else str(x)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _write_all(out: Path, files: dict) -> None:
    """Single serialized writer for every report of a command."""
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(files):
        (out / name).write_text(files[name])


def _pmap(fn, items, workers: int):
    """Map on a bounded thread pool, results in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------
# Instances
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Instance:
    id: str
    spec: FunctionSpec

    @property
    def quadratic(self) -> bool:
        return self.spec.variant == "quadratic" or (self.spec.variant == "quartic_perturbed"
                                                    and self.spec.t == 0)


def _random_spd(rng, n: int, lo: float = 0.5, hi: float = 2.0) -> np.ndarray:
    ev = rng.uniform(lo, hi, n)
    if n == 1:
        return np.array([[ev[0]]])
    th = rng.uniform(0, math.pi)
    Q = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    A = (Q * ev) @ Q.T
    return 0.5 * (A + A.T)


def random_instances(rng, quadratic: int, quartic: int, dims=(1, 2), t_range=(0.05, 0.3)) -> list:
    """Random quadratics ``1/2 <Ax, x> + c`` followed by random quartic perturbations."""
    out = []
    for kind, count in (("q", quadratic), ("t", quartic)):
        for i in range(count):
            n = int(rng.choice(dims))
            A = _random_spd(rng, n)
            c = float(rng.uniform(-0.5, 0.5))
            if kind == "q":
                spec = FunctionSpec.quadratic(A, c)
            else:
                spec = FunctionSpec.quartic(A, float(rng.uniform(*t_range)), c)
            out.append(Instance(f"{kind}{i:03d}", spec))
    return out


def _parse_instances(cfg: dict, rng) -> list:
    inst = []
    rnd = cfg.get("random")
    if rnd is not None:
        if not isinstance(rnd, dict):
            raise ConfigError("'random' must be an object")
        dims = tuple(int(d) for d in rnd.get("dims", (1, 2)))
        if not dims or any(d not in (1, 2) for d in dims):
            raise ConfigError("random dims must be a subset of {1, 2}")
        t_range = tuple(float(v) for v in rnd.get("t_range", (0.05, 0.3)))
        if len(t_range) != 2 or not 0 < t_range[0] <= t_range[1]:
            raise ConfigError("t_range must be [lo, hi] with 0 < lo <= hi")
        inst += random_instances(rng, int(rnd.get("quadratic", 0)), int(rnd.get("quartic", 0)),
                                 dims, t_range)
    for k, item in enumerate(cfg.get("instances", [])):
        try:
            spec = FunctionSpec.from_json(item["psi"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"instance {k}: {e}") from None
        inst.append(Instance(str(item.get("id", f"i{k:03d}")), spec))
    ids = [i.id for i in inst]
    if len(set(ids)) != len(ids):
        raise ConfigError("instance ids must be unique")
    return inst


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

VERIFY_COLUMNS = ("functional", "instance_id", "lhs", "rhs", "gap", "relation", "tolerance",
                  "pass", "strict", "error")


def _judge(lhs, rhs, relation, tol, equality, scale=None):
    """Pass flag and strictness of ``lhs relation rhs`` with slack ``tol * scale`` (default |rhs|)."""
    if not (math.isfinite(lhs) and math.isfinite(rhs)):
        if math.isnan(lhs) or math.isnan(rhs) or equality or relation == "eq":
            return False, False
        ok = lhs < rhs if relation == "le" else lhs > rhs
        return ok, ok
    slack = tol * (abs(rhs) if scale is None else scale)
    if equality or relation == "eq":
        return abs(lhs - rhs) <= slack, False
    if relation == "le":
        return lhs <= rhs + slack, lhs < rhs - slack
    return lhs >= rhs - slack, lhs > rhs + slack


def _row(functional, inst, lhs, rhs, relation, tol, equality, scale=None):
    ok, strict = _judge(lhs, rhs, relation, tol, equality, scale)
    gap = rhs - lhs if math.isfinite(lhs) and math.isfinite(rhs) else (
        math.nan if math.isinf(lhs) and math.isinf(rhs) else rhs - lhs)
    return {"functional": functional, "instance_id": inst.id, "lhs": lhs, "rhs": rhs, "gap": gap,
            "relation": "eq" if equality else relation, "tolerance": tol, "pass": ok,
            "strict": strict, "error": ""}


def _error_row(functional, inst, tol, err):
    return {"functional": functional, "instance_id": inst.id, "lhs": math.nan, "rhs": math.nan,
            "gap": math.nan, "relation": "", "tolerance": tol, "pass": False, "strict": False,
            "error": f"{type(err).__name__}: {err}"}


def verify_instance(inst: Instance, divergences, checks, lambdas, tol) -> list:
    """All configured records for one instance; numerical errors become failing rows."""
    rows = []
    eq = inst.quadratic
    try:
        d = LogConcaveDensity.from_spec(inst.spec)
    except (AelabError, ArithmeticError, ValueError) as e:
        return [_error_row("density", inst, tol, e)]

    def run(name, fn):
        try:
            rows.extend(fn())
        except (AelabError, ArithmeticError, ValueError) as e:
            rows.append(_error_row(name, inst, tol, e))

    if "divergence" in checks:
        for f in divergences:
            def div(f=f):
                lhs, rhs = divergence_sides(f, d)
                return [_row(f"divergence:{f.describe()}", inst, lhs, rhs, f.relation, tol, eq,
                             divergence_scale(f, d, rhs))]
            run(f"divergence:{f.describe()}", div)
    if "intvc" in checks:
        def iv():
            a, b = intvc_sides(d)
            return [_row("intvc", inst, b, a, "eq", max(tol, INTVC_TOL), True)]
        run("intvc", iv)
    if "logsobolev" in checks:
        def ls():
            lhs, rhs = reverse_logsobolev_sides(d.normalize())
            return [_row("reverse_logsobolev", inst, lhs, rhs, "le", tol, eq)]
        run("reverse_logsobolev", ls)
    if "as_lambda" in checks:
        for lam in lambdas:
            def al(lam=lam):
                lhs, rhs, rel = affine_isoperimetric_sides(d, lam)
                return [_row(f"as_lambda:{lam:g}", inst, lhs, rhs, rel, tol, eq)]
            run(f"as_lambda:{lam:g}", al)
    if "monge_ampere" in checks:
        def ma():
            sup, _ = monge_ampere_residual(d)
            if eq:
                return [_row("monge_ampere", inst, sup, MA_THRESHOLD, "le", 0.0, False)]
            r = _row("monge_ampere", inst, sup, MA_THRESHOLD, "ge", 0.0, False)
            r["pass"] = True  # informational off the equality case
            r["strict"] = sup >= 10 * MA_THRESHOLD
            return [r]
        run("monge_ampere", ma)
    return rows


def _parse_divergences(cfg):
    try:
        return [DivergenceSpec.from_json(x) for x in cfg.get("divergences", DEFAULT_DIVERGENCES)]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"divergences: {e}") from None


def cmd_verify(cfg: dict, seed: int, workers: int):
    tol = _tolerance(cfg)
    rng = np.random.default_rng(seed)
    instances = _parse_instances(cfg, rng)
    if not instances:
        raise ConfigError("no instances: give 'random' and/or 'instances'")
    divergences = _parse_divergences(cfg)
    checks = tuple(cfg.get("checks", DEFAULT_CHECKS))
    unknown = set(checks) - {"divergence", "intvc", "logsobolev", "as_lambda", "monge_ampere"}
    if unknown:
        raise ConfigError(f"unknown checks {sorted(unknown)}")
    lambdas = tuple(float(v) for v in cfg.get("lambdas", DEFAULT_LAMBDAS))
    if any(lam > 1 for lam in lambdas):
        raise ConfigError("lambdas must be <= 1")

    def job(inst):
        return verify_instance(inst, divergences, checks, lambdas, tol)

    rows = [r for rs in _pmap(job, instances, workers) for r in rs]
    ok = all(r["pass"] for r in rows)
    instances_rows = [{"instance_id": i.id, "spec": json.dumps(i.spec.to_json(), sort_keys=True)}
                      for i in instances]
    summary = {"command": "verify", "seed": seed, "tolerance": tol, "records": len(rows),
               "failed": sum(not r["pass"] for r in rows), "pass": ok}
    files = {"verify.csv": csv_text(VERIFY_COLUMNS, rows),
             "instances.csv": csv_text(("instance_id", "spec"), instances_rows),
             "summary.json": json.dumps(summary, indent=1) + "\n"}
    return (0 if ok else 1), files


# --------------------------------------------------------------------------
# transport
# --------------------------------------------------------------------------

TRANSPORT_COLUMNS = ("instance_id", "n", "count", "residual", "linear", "duality_gap_rel",
                     "pushforward_second_moment", "a11", "a12", "a21", "a22", "pass", "error")


def cmd_transport(cfg: dict, seed: int, workers: int):
    rng = np.random.default_rng(seed)
    instances = _parse_instances(cfg, rng)
    if not instances:
        raise ConfigError("no transport instances")
    count = int(cfg.get("count", 40))
    z = float(cfg.get("z", 3.5))
    cap = int(cfg.get("size_cap", DEFAULT_SIZE_CAP))
    res_tol = float(cfg.get("residual_tol", RESIDUAL_TOL))
    if count < 2 or z <= 0 or cap < 1 or res_tol <= 0:
        raise ConfigError("count, z, size_cap and residual_tol must be positive")

    def job(inst):
        row = {"instance_id": inst.id, "n": inst.spec.dim, "count": count, "error": ""}
        try:
            r = linearity_probe(inst.spec, count=count, z=z, size_cap=cap, seed=seed)
        except SizeCapError as e:
            row.update({"pass": False, "error": f"SizeCapError: {e}"})
            return row
        except (AelabError, ArithmeticError, ValueError) as e:
            row.update({"pass": False, "error": f"{type(e).__name__}: {e}"})
            return row
        n = inst.spec.dim
        for i in range(2):
            for j in range(2):
                row[f"a{i + 1}{j + 1}"] = float(r.A_hat[i, j]) if i < n and j < n else None
        linear = r.residual <= res_tol
        ok = r.duality_gap_rel <= GAP_TOL
        if inst.quadratic:
            # for quadratics the map is A itself and second moments must carry over
            A = inst.spec.lower_hessian()
            ok = ok and linear and r.pushforward_second_moment <= PUSHFORWARD_TOL and \
                bool(np.all(np.abs(r.A_hat - A) <= RESIDUAL_TOL * np.abs(A).max()))
        row.update({"residual": r.residual, "linear": linear, "duality_gap_rel": r.duality_gap_rel,
                    "pushforward_second_moment": r.pushforward_second_moment, "pass": ok})
        return row

    rows = _pmap(job, instances, workers)
    ok = all(r["pass"] for r in rows)
    for r in rows:
        if r["error"].startswith("SizeCapError"):
            print(f"aelab transport: {r['instance_id']}: {r['error']}", file=sys.stderr)
    summary = {"command": "transport", "seed": seed, "residual_tol": res_tol, "pass": ok}
    files = {"transport.csv": csv_text(TRANSPORT_COLUMNS, rows),
             "summary.json": json.dumps(summary, indent=1) + "\n"}
    return (0 if ok else 1), files


# --------------------------------------------------------------------------
# stability
# --------------------------------------------------------------------------

def _t_list(fam: dict, name: str) -> list:
    ts = fam.get("t")
    if not isinstance(ts, list) or not ts:
        raise ConfigError(f"{name}: 't' must be a non-empty list")
    ts = sorted(float(t) for t in ts)
    if ts[0] < 0 or len(set(ts)) != len(ts):
        raise ConfigError(f"{name}: 't' values must be distinct and non-negative")
    if fam.get("include_zero", True) and ts[0] != 0:
        ts = [0.0] + ts
    return ts


def trend_verdict(rows, columns, limit_tol: float = LIMIT_TOL) -> dict:
    """Strict increase of each column in t and smallness at t = 0 (when present)."""
    out = {}
    for c in columns:
        v = [r[c] for r in rows]
        inc = all(math.isfinite(a) and math.isfinite(b) and b > a for a, b in zip(v, v[1:]))
        lim = True
        if rows and rows[0]["t"] == 0:
            lim = abs(v[0]) <= limit_tol
        out[c] = {"increasing": bool(inc), "vanishes_at_zero": bool(lim)}
    return out


def functional_member(A, t, R):
    d = LogConcaveDensity.from_spec(FunctionSpec.quartic(A, t) if t > 0 else FunctionSpec.quadratic(A))
    rep = quadratic_fit_distance(d, R)
    return {"t": t, "epsilon": rep.epsilon_gap, "delta_L1": rep.delta_L1}


def body_member(a, b, t, p, R):
    K = B.ConvexBody.perturbed_ellipse(a, b, t)
    row = B.body_stability_probe([(t, K)], p, R)[0]
    return {"t": t, "epsilon": row.epsilon, "asp_gap": row.asp_gap, "d_bm_minus_1": row.d_bm - 1,
            "d_bm": row.d_bm, "remark_integral": row.remark_integral}


def cmd_stability(cfg: dict, seed: int, workers: int, radius: float | None = None):
    """``radius`` (the --radius flag) overrides the families' ball radius R."""
    if radius is not None and not radius > 0:
        raise ConfigError("--radius must be positive")
    ff = cfg.get("functional_family")
    bf = cfg.get("body_family")
    if ff is None and bf is None:
        raise ConfigError("empty family: give 'functional_family' and/or 'body_family'")
    files, verdict, ok, failures = {}, {}, True, []
    jobs = []
    if ff is not None:
        A = np.atleast_2d(np.asarray(ff.get("A", np.eye(2)), dtype=float))
        R = float(radius or ff.get("R", 2.0))
        fts = _t_list(ff, "functional_family")
        jobs += [("f", t, lambda t=t: functional_member(A, t, R)) for t in fts]
    if bf is not None:
        a, b = float(bf.get("a", 2.0)), float(bf.get("b", 1.0))
        p = float(bf.get("p", 1.0))
        R_b = float(radius or bf.get("R", 2.0))
        bts = _t_list(bf, "body_family")
        if bts[-1] >= 4 / 15:
            raise ConfigError("body_family: t must stay below 4/15 for convexity")
        jobs += [("b", t, lambda t=t: body_member(a, b, t, p, R_b)) for t in bts]

    def run(job):
        kind, t, fn = job
        try:
            return kind, t, fn(), None
        except (AelabError, ArithmeticError, ValueError) as e:
            return kind, t, None, f"{type(e).__name__}: {e}"

    results = _pmap(run, jobs, workers)
    for kind, t, _, err in results:
        if err is not None:
            failures.append({"family": kind, "t": t, "error": err})
            print(f"aelab stability: family {kind} failed at t = {t}: {err}", file=sys.stderr)
    if ff is not None:
        rows = [r for k, _, r, e in results if k == "f" and e is None]
        files["functional_stability.csv"] = csv_text(("t", "epsilon", "delta_L1"), rows)
        verdict["functional"] = trend_verdict(rows, ("epsilon", "delta_L1"))
    if bf is not None:
        rows = [r for k, _, r, e in results if k == "b" and e is None]
        cols = ("t", "epsilon", "asp_gap", "d_bm", "remark_integral")
        files["body_stability.csv"] = csv_text(cols, rows)
        verdict["body"] = trend_verdict(rows, ("epsilon", "asp_gap", "d_bm_minus_1", "remark_integral"))
    ok = not failures and all(v["increasing"] and v["vanishes_at_zero"]
                              for fam in verdict.values() for v in fam.values())
    files["trend.json"] = json.dumps({"pass": ok, "verdict": verdict, "failures": failures},
                                     indent=1, sort_keys=True) + "\n"
    return (0 if ok else 1), files


# --------------------------------------------------------------------------
# body
# --------------------------------------------------------------------------

NAMED_BODIES = {
    "ball": lambda q: B.ConvexBody.ball(q.get("r", 1.0), q.get("n", 2)),
    "ellipse": lambda q: B.ConvexBody.ellipse(q.get("a", 2.0), q.get("b", 1.0),
                                              variant=q.get("variant", "support2d")),
    "square": lambda q: B.ConvexBody.square(q.get("s", 1.0)),
    "smoothed_square": lambda q: B.ConvexBody.smoothed_square(q.get("delta", 0.1), q.get("width", 0.05)),
    "perturbed_ellipse": lambda q: B.ConvexBody.perturbed_ellipse(q.get("a", 2.0), q.get("b", 1.0),
                                                                  q.get("t", 0.1)),
}


def _parse_bodies(cfg) -> list:
    items = cfg.get("bodies")
    if not isinstance(items, list) or not items:
        raise ConfigError("'bodies' must be a non-empty list")
    out = []
    for k, item in enumerate(items):
        bid = str(item.get("id", f"b{k:03d}"))
        try:
            if "body" in item:
                K = B.ConvexBody.from_json(item["body"])
            elif item.get("named") in NAMED_BODIES:
                K = NAMED_BODIES[item["named"]](item.get("params", {}))
            else:
                raise ValueError("give 'body' (body JSON) or 'named'")
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"body {bid}: {e}") from None
        if item.get("normalize_volume", False):
            n = K.dim
            K = K.scaled(B.volume(K) ** (-1 / n))
        out.append((bid, K))
    if len({b for b, _ in out}) != len(out):
        raise ConfigError("body ids must be unique")
    return out


def _safe(fn, *args):
    try:
        return fn(*args), ""
    except (AelabError, ArithmeticError, ValueError) as e:
        return math.nan, f"{type(e).__name__}: {e}"


def body_report(bid, K, ps, omega_ps, tol):
    errors = []
    summary = {"id": bid, "variant": K.variant, "n": K.dim, "volume": B.volume(K),
               "polar_volume": B.polar_volume(K)}
    res, err = _safe(B.santalo_product_body, K)
    prod, ratio = (math.nan, math.nan) if err else res[:2]
    if err:
        errors.append(err)
    summary["santalo_product"], summary["santalo_ratio"] = prod, ratio
    asp_rows = []
    for p in ps:
        r = {"id": bid, "p": p}
        r["as_p"], e1 = _safe(B.affine_surface_area, K, p)
        r["as_p_gauge"], e2 = _safe(B.asp_via_gauge, K, p)
        iso, e3 = _safe(B.isoperimetric_check, K, p, tol)
        lhs, rhs, holds = (math.nan, math.nan, False) if e3 else iso
        r.update({"iso_lhs": lhs, "iso_rhs": rhs, "iso_holds": holds,
                  "error": e1 or e3, "gauge_note": e2})
        if e1 or e3:
            errors.append(e1 or e3)
        asp_rows.append(r)
    omega_rows = []
    table, err = _safe(B.entropy_power, K, omega_ps)
    mono = False
    if err:
        errors.append(err)
    else:
        omega_rows = [{"id": bid, "p": p, "omega": w} for p, w in zip(table.p, table.omega)]
        omega_rows.append({"id": bid, "p": "limit", "omega": table.estimate, "error_bar": table.error_bar})
        om = table.omega
        mono = all(b2 <= a2 * (1 + tol) + 1e-300 for a2, b2 in zip(om, om[1:]))
    summary["omega_non_increasing"] = mono
    summary["pass"] = not errors and mono and all(r["iso_holds"] for r in asp_rows) and \
        (not math.isfinite(ratio) or ratio <= 1 + tol)
    polar = B.polar(K).to_json()
    return summary, asp_rows, omega_rows, polar


def cmd_body(cfg: dict, seed: int, workers: int):
    tol = _tolerance(cfg)
    items = _parse_bodies(cfg)
    ps = [float(p) for p in cfg.get("p", (0.5, 1.0, 2.0, 5.0))]
    if any(p == -2 for p in ps):
        raise ConfigError("p = -n is excluded")
    omega_ps = [float(p) for p in cfg.get("omega_p", (1, 2, 4, 8, 16, 32, 64))]
    if any(p <= 0 for p in omega_ps) or omega_ps != sorted(set(omega_ps)):
        raise ConfigError("omega_p must be strictly ascending and positive")
    results = _pmap(lambda it: body_report(it[0], it[1], ps, omega_ps, tol), items, workers)
    summaries = [r[0] for r in results]
    asp_rows = [x for r in results for x in r[1]]
    omega_rows = [x for r in results for x in r[2]]
    polars = {r[0]["id"]: r[3] for r in results}
    ok = all(s["pass"] for s in summaries)
    files = {
        "bodies.csv": csv_text(("id", "variant", "n", "volume", "polar_volume", "santalo_product",
                                "santalo_ratio", "omega_non_increasing", "pass"), summaries),
        "asp.csv": csv_text(("id", "p", "as_p", "as_p_gauge", "iso_lhs", "iso_rhs", "iso_holds",
                             "error", "gauge_note"), asp_rows),
        "omega.csv": csv_text(("id", "p", "omega", "error_bar"), omega_rows),
        "polars.json": json.dumps(polars, sort_keys=True) + "\n",
    }
    return (0 if ok else 1), files


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

COMMANDS = {"verify": cmd_verify, "transport": cmd_transport, "stability": cmd_stability,
            "body": cmd_body}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aelab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="aelab_out", help="output directory")
        p.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
        if name == "stability":
            p.add_argument("--radius", type=float, default=None,
                           help="radius R of the integration ball (default 2, or the config value)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        extra = {"radius": args.radius} if args.command == "stability" else {}
        code, files = COMMANDS[args.command](cfg, args.seed, max(1, args.workers), **extra)
    except (OSError, json.JSONDecodeError, ConfigError) as e:
        print(f"aelab {args.command}: config error: {e}", file=sys.stderr)
        return 2
    _write_all(Path(args.out), files)
    return code


if __name__ == "__main__":
    sys.exit(main())
