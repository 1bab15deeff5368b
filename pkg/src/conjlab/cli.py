"""Command-line entry point: ``conjlab {check,conjugate,verify,sweep} CONFIG``.

Exit codes: 0 when every requested check passes, 1 when a margin or
residual fails, 2 on invalid input.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import math
import os
import sys
from importlib import resources

import numpy as np

from .conditions import (DivergentTailError, check_theorem1, check_theorem2,
                         condition_report, estimate_perturbation_constants)
from .conjugacy import ConjugacyEngine, ConvergenceError, HypothesisError
from .dichotomy import (ConstantsBundle, DegenerateGridError, InvalidBundleError,
                        NoDichotomyError, fit_dichotomy, fit_growth, pair_norms,
                        default_times, verify_constants)
from .flow import FlowEngine, IntegrationError
from .sysdsl import DomainError, DslError, load_system_file
from .verify import make_samples, run_suite, _jsonable

EXIT_PASS, EXIT_FAIL, EXIT_INVALID = 0, 1, 2
ROUNDTRIP_TOL = 1e-6

_GROUPS = {
    "dichotomy": ("K", "alpha", "mu"),
    "growth": ("K0", "a", "eps"),
    "perturbation": ("L_f", "theta", "M", "delta"),
}


class InvalidInput(Exception):
    pass


# ---------------------------------------------------------------- config

def resolve_config(path):
    """A readable config path; falls back to the bundled configs by file name."""
    if os.path.isfile(path):
        return path
    name = os.path.basename(path)
    if not name.endswith(".json"):
        name += ".json"
    bundled = resources.files("conjlab") / "data" / name
    if bundled.is_file():
        return str(bundled)
    raise InvalidInput(f"config not found: {path}")


def load(args):
    path = args.config_flag or args.config
    if path is None:
        raise InvalidInput("a config path is required (positional or --config)")
    system = load_system_file(resolve_config(path))
    changes = {}
    numerics = dict(system.numerics)
    if args.horizon is not None:
        if not args.horizon > 0:
            raise InvalidInput("--horizon must be positive")
        changes["horizon"] = args.horizon
    if args.step is not None:
        if not args.step > 0:
            raise InvalidInput("--step must be positive")
        numerics["step"] = args.step
    if args.tol is not None:
        if not args.tol > 0:
            raise InvalidInput("--tol must be positive")
        numerics["tol_fixedpoint"] = args.tol
    if changes or numerics != system.numerics:
        system = dataclasses.replace(system, numerics=numerics, **changes)
    return path, system


def resolve_bundle(system, engine, args):
    """Overrides beat config constants beat fitted constants.

    Only groups with a missing member are fitted, and only the missing
    members are taken from the fit.  Returns ``(bundle, provenance)``.
    """
    values = dict(system.constants)
    prov = {k: "config" for k in values}
    for key, val in (("b", args.b), ("c", args.c), ("theta", args.theta)):
        if val is not None:
            values[key] = val
            prov[key] = "override"

    pairs = None

    def grid():
        nonlocal pairs
        if pairs is None:
            pairs = pair_norms(engine, default_times(engine))
        return pairs

    for group, keys in _GROUPS.items():
        missing = [k for k in keys if k not in values]
        if not missing:
            continue
        if group == "dichotomy":
            fit = dataclasses.asdict(fit_dichotomy(engine, pairs=grid()))
        elif group == "growth":
            fit = dataclasses.asdict(fit_growth(engine, pairs=grid()))
        else:
            est = estimate_perturbation_constants(engine)
            fit = {"L_f": est.L_f, "theta": est.theta, "M": est.M, "delta": est.delta}
            if est.zero and "theta" in missing:
                # any theta works when f vanishes; pick one clear of every rate condition
                fit["theta"] = (values.get("mu", 0.0) + values.get("eps", 0.0)
                                + abs(values.get("alpha", 1.0) - values.get("a", 1.0)) + 1.0)
        for k in missing:
            values[k] = fit[k]
            prov[k] = "fitted"
    if "b" not in values:
        values["b"] = default_weight(values)
        prov["b"] = "derived"
    prov.setdefault("c", "unset")
    return ConstantsBundle.from_dict(values), prov


def default_weight(v):
    """``theta - mu`` balances the two contraction denominators and so minimizes q.

    When that leaves no room above ``delta + mu``, the midpoint of the
    admissible interval is used instead.
    """
    lo = v["delta"] + v["mu"]
    hi = v["alpha"] - v["mu"] + v["theta"]
    b = v["theta"] - v["mu"]
    if b > lo and b > 0:
        return b
    return 0.5 * (max(lo, 0.0) + hi) if hi > max(lo, 0.0) else max(lo, 0.0) + 1.0


# ---------------------------------------------------------------- output

def emit(args, payload, rows=None):
    """Write JSON (the payload) or CSV (``rows``: header + data) to --out or stdout."""
    if args.format == "csv" and rows is not None:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        text = buf.getvalue()
    else:
        text = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _floats(text, name):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidInput(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise InvalidInput(f"{name}: empty list")
    return vals


def _num(v):
    return repr(float(v))


def _points(text, dim):
    pts = [_floats(p, "--points") for p in text.split(";") if p.strip()]
    for p in pts:
        if len(p) != dim:
            raise InvalidInput(f"--points: each point needs {dim} components")
    return [np.array(p) for p in pts]


# ---------------------------------------------------------------- commands

def cmd_check(args):
    path, system = load(args)
    engine = FlowEngine(system)
    bundle, prov = resolve_bundle(system, engine, args)
    rep = condition_report(bundle, engine)
    margins = verify_constants(engine, bundle)
    passed = rep.overall["theorem1"] and rep.overall.get("theorem2", True) and margins.ok
    payload = {
        "config": path,
        "bundle": bundle.to_dict(),
        "provenance": prov,
        "conditions": rep.to_dict(),
        "constants_margins": margins.as_dict(),
        "constants_verified": margins.ok,
        "overall_pass": passed,
    }
    rows = [["name", "theorem", "margin", "strict", "pass"]]
    for name, d in rep.to_dict()["margins"].items():
        rows.append([name, d["theorem"], repr(d["margin"]), d["strict"], d["pass"]])
    for name, m in margins.as_dict().items():
        if name != "pairs":
            rows.append([name, "constants", repr(m), False, m >= -1e-9])
    emit(args, payload, rows)
    return EXIT_PASS if passed else EXIT_FAIL


def _engine(system, args, bundle):
    try:
        return ConjugacyEngine(FlowEngine(system), bundle)
    except HypothesisError as exc:
        print(f"conjlab: {exc}", file=sys.stderr)
        return None


def cmd_conjugate(args):
    path, system = load(args)
    bundle, prov = resolve_bundle(system, FlowEngine(system), args)
    times = (_floats(args.times, "--times") if args.times
             else list(np.linspace(0.0, system.horizon, 5)))
    for t in times:
        if not 0 <= t <= system.horizon:
            raise InvalidInput(f"--times: {t} outside [0, {system.horizon}]")
    pts = _points(args.points, system.dim) if args.points else [np.zeros(system.dim), np.ones(system.dim)]
    ce = _engine(system, args, bundle)
    if ce is None:
        return EXIT_FAIL
    n = system.dim
    rows = [["t"] + [f"x{j + 1}" for j in range(n)] + [f"H{j + 1}" for j in range(n)]
            + [f"G{j + 1}" for j in range(n)] + ["roundtrip_GH", "roundtrip_HG"]]
    table = []
    worst = 0.0
    for t in times:
        for p in pts:
            H = ce.map_H(t, p)
            G = ce.map_G(t, p)
            gh = float(np.linalg.norm(ce.map_G(t, H) - p))
            hg = float(np.linalg.norm(ce.map_H(t, G) - p))
            worst = max(worst, gh, hg)
            table.append({"t": t, "point": p.tolist(), "H": H.tolist(), "G": G.tolist(),
                          "roundtrip_GH": gh, "roundtrip_HG": hg})
            rows.append([_num(t)] + [_num(v) for v in p] + [_num(v) for v in H]
                        + [_num(v) for v in G] + [_num(gh), _num(hg)])
    passed = worst <= ROUNDTRIP_TOL
    emit(args, {"config": path, "bundle": bundle.to_dict(), "provenance": prov,
                "values": table, "max_roundtrip": worst, "tolerance": ROUNDTRIP_TOL,
                "overall_pass": passed}, rows)
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_verify(args):
    path, system = load(args)
    if args.samples < 1:
        raise InvalidInput("--samples must be positive")
    bundle, prov = resolve_bundle(system, FlowEngine(system), args)
    ce = _engine(system, args, bundle)
    if ce is None:
        return EXIT_FAIL
    samples = make_samples(system.dim, args.samples, t_max=ce.t_max, seed=args.seed)
    rep = run_suite(ce, samples, seed=args.seed)
    payload = rep.to_dict()
    payload["config"] = path
    payload["provenance"] = prov
    if args.format == "csv":
        text = rep.to_csv()
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    else:
        emit(args, payload)
    return EXIT_PASS if rep.overall else EXIT_FAIL


def cmd_sweep(args):
    """Condition margins over the Cartesian product of the theta, b and c lists.

    The report passes when at least one combination satisfies every
    requested condition group.
    """
    path, system = load(args)
    bundle, prov = resolve_bundle(system, FlowEngine(system), args)
    thetas = _floats(args.sweep_theta, "--theta") if args.sweep_theta else [bundle.theta]
    bs = _floats(args.sweep_b, "--b") if args.sweep_b else [bundle.b]
    cs = _floats(args.sweep_c, "--c") if args.sweep_c else [bundle.c]
    table = []
    names = None
    for theta, b, c in itertools.product(thetas, bs, cs):
        B = bundle.replace(theta=theta, b=b, c=c)
        rep = check_theorem2(B) if c is not None else check_theorem1(B)
        ok = rep.overall["theorem1"] and rep.overall.get("theorem2", True)
        names = names or list(rep.margins)
        table.append({"theta": theta, "b": b, "c": c, "q": rep.q, "t_c": rep.t_c,
                      "margins": dict(rep.margins), "theorem1": rep.overall["theorem1"],
                      "theorem2": rep.overall.get("theorem2"), "pass": ok})
    passed = any(r["pass"] for r in table)
    rows = [["theta", "b", "c", "q", "t_c"] + names + ["theorem1", "theorem2", "pass"]]
    for r in table:
        rows.append([r["theta"], r["b"], r["c"], repr(r["q"]), r["t_c"]]
                    + [repr(r["margins"].get(k, math.nan)) for k in names]
                    + [r["theorem1"], r["theorem2"], r["pass"]])
    emit(args, {"config": path, "bundle": bundle.to_dict(), "provenance": prov,
                "rows": table, "overall_pass": passed}, rows)
    return EXIT_PASS if passed else EXIT_FAIL


# ---------------------------------------------------------------- parser

def _common(p, sweep=False):
    p.add_argument("config", nargs="?", help="system config (JSON); bundled names like s1.json also work")
    p.add_argument("--config", dest="config_flag", metavar="PATH")
    p.add_argument("--horizon", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--tol", type=float, help="fixed-point tolerance")
    if sweep:
        p.add_argument("--theta", dest="sweep_theta", metavar="LIST")
        p.add_argument("--b", dest="sweep_b", metavar="LIST")
        p.add_argument("--c", dest="sweep_c", metavar="LIST")
        p.set_defaults(b=None, c=None, theta=None)
    else:
        p.add_argument("--b", type=float)
        p.add_argument("--c", type=float)
        p.add_argument("--theta", type=float)
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="conjlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("check", help="resolve constants and report every condition margin")
    _common(p)
    p.set_defaults(run=cmd_check)
    p = sub.add_parser("conjugate", help="tabulate H and G on a (time, point) grid")
    _common(p)
    p.add_argument("--times", metavar="LIST", help="comma-separated times")
    p.add_argument("--points", metavar="LIST", help="points separated by ';', components by ','")
    p.set_defaults(run=cmd_conjugate)
    p = sub.add_parser("verify", help="run the sampled property suite")
    _common(p)
    p.add_argument("--samples", type=int, default=20)
    p.set_defaults(run=cmd_verify)
    p = sub.add_parser("sweep", help="condition margins over a grid of theta, b, c")
    _common(p, sweep=True)
    p.set_defaults(run=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_PASS
    try:
        return args.run(args)
    except (NoDichotomyError, DegenerateGridError, DivergentTailError,
            IntegrationError, ConvergenceError, DomainError) as exc:
        print(f"conjlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (InvalidInput, DslError, InvalidBundleError, OSError) as exc:
        print(f"conjlab: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # constant checks raise ValueError for values outside their domain, e.g. c <= 2
        print(f"conjlab: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
