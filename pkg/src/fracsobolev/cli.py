"""Command line interface: domains, meshes, seminorms, K profiles and experiments.

Exit codes: 0 on success, 2 on invalid input, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FracSobolevError, NumericalError, ValidationError
from .experiments import (DEFAULT_SNOWFLAKE, LIPSCHITZ_EXPONENTS, SMOOTH_SQUARE_SUITE, THEOREM_EXPONENTS,
                          SuiteRunner, custom_experiment, lipschitz_equivalence, slit_experiment,
                          snowflake_equivalence)
from .fields import parse_field
from .geometry import Exponents, load_domain, slit_domain, unit_square
from .kfunctional import FE_VERTEX_CAP, ScaleGrid, default_grid, k_profile
from .meshing import (lagrange_partition, mesh_quality, snowflake_partition, triangulate, write_mesh,
                      write_partition)
from .seminorms import domain_spec, gagliardo_full, gagliardo_restricted, lp_norm, mc_oracle, w1p_norm
from .snowflake import SnowflakeDomain, SnowflakePlan, load_plan, snowflake_domain, snowflake_stats

SEMINORM_COLUMNS = ["domain_id", "fn_id", "op", "s", "p", "level", "value", "error_estimate", "diverging",
                    "oracle_estimate", "oracle_power", "oracle_power_std_error", "oracle_unstable",
                    "oracle_samples", "seed"]


# -- serialization ----------------------------------------------------------------


def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def environment_stamp() -> dict:
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def report(payload: dict, seed: int) -> dict:
    return {"version": __version__, "environment": environment_stamp(), "seed": seed, **payload}


class Output:
    """Serialized writes into the output directory, echoing each path."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def text(self, name: str, content: str) -> Path:
        path = self.path(name)
        path.write_text(content)
        print(path)
        return path

    def append_csv(self, name: str, rows: list[dict], columns: list[str]) -> Path:
        path = self.path(name)
        body = rows_to_csv(rows, columns)
        if path.exists() and path.stat().st_size:
            body = body.split("\n", 1)[1]
        with path.open("a") as fh:
            fh.write(body)
        print(path)
        return path

    def figure(self, fn, name: str, *args, **kw) -> Path:
        path = fn(*args, path=self.path(name), **kw)
        print(path)
        return path


# -- argument helpers -------------------------------------------------------------


def resolve_plan(args) -> SnowflakePlan:
    if getattr(args, "plan", None):
        return load_plan(args.plan)
    if getattr(args, "sf_p", None) is not None:
        return SnowflakePlan.uniform(args.sf_p, args.rule, args.N)
    return DEFAULT_SNOWFLAKE


def resolve_domain(name: str, args):
    if name == "square":
        return unit_square()
    if name == "slit":
        return slit_domain()
    if name == "snowflake":
        return snowflake_domain(resolve_plan(args))
    if Path(name).exists():
        return load_domain(name)
    raise ValidationError(f"unknown domain {name!r}: use square, slit, snowflake or a JSON file")


def _slug(text: str) -> str:
    keep = [c if c.isalnum() or c in "-." else "_" for c in text]
    return "".join(keep).strip("_")


def add_snowflake_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", help="snowflake plan JSON file (fields p, rules)")
    p.add_argument("--sf-p", dest="sf_p", type=float, help="uniform plan: contraction p in (1/4, 1/2)")
    p.add_argument("--rule", default="bump", help="uniform plan: bump or straight")
    p.add_argument("--N", type=int, default=4, help="uniform plan: number of generations")


def add_exponents(p: argparse.ArgumentParser) -> None:
    p.add_argument("--s", type=float, required=True)
    p.add_argument("--p", type=float, required=True)


# -- subcommands --------------------------------------------------------------------


def cmd_domain(args, out: Output) -> int:
    dom = resolve_domain(args.name, args)
    spec = domain_spec(dom)
    out.text(f"domain_{_slug(spec.name)}.json", dumps(spec.to_json_dict()))
    if not args.no_plot:
        from .plotting import plot_domain

        out.figure(plot_domain, f"domain_{_slug(spec.name)}.svg", spec)
    return 0


def cmd_snowflake(args, out: Output) -> int:
    plan = resolve_plan(args)
    sd = snowflake_domain(plan)
    count, perimeter, min_len = snowflake_stats(plan)
    tree = sd.tree
    payload = {"plan": plan.to_json_dict(), "segment_count": count, "perimeter": perimeter,
               "min_segment_length": min_len, "area": sd.curve.area(), "diameter": sd.domain.diameter,
               "tents": len(tree)}
    out.text("snowflake.json", dumps(report(payload, args.seed)))
    out.text("snowflake_domain.json", dumps(sd.domain.to_json_dict()))
    rows = [{"tent": i, "generation": int(tree.generation[i]), "parent": int(tree.parent[i]),
             "host": int(tree.host[i]), "p1x": t[0, 0], "p1y": t[0, 1], "ax": t[1, 0], "ay": t[1, 1],
             "p2x": t[2, 0], "p2y": t[2, 1]} for i, t in enumerate(tree.triangles)]
    out.text("snowflake_tree.csv", rows_to_csv(rows, ["tent", "generation", "parent", "host", "p1x", "p1y",
                                                     "ax", "ay", "p2x", "p2y"]))
    if not args.no_plot:
        from .plotting import plot_domain

        out.figure(plot_domain, "snowflake.svg", sd.domain)
    return 0


def cmd_mesh(args, out: Output) -> int:
    dom = resolve_domain(args.domain, args)
    if isinstance(dom, SnowflakeDomain):
        mesh, pu = snowflake_partition(dom, args.ell)
    else:
        mesh = triangulate(dom, args.ell, scheme=args.scheme)
        pu = lagrange_partition(mesh)
    inr, circ, overlap = mesh_quality(mesh, pu, seed=args.seed)
    stem = f"mesh_{_slug(domain_spec(dom).name)}"
    write_mesh(mesh, out.path(stem + ".txt"))
    print(out.path(stem + ".txt"))
    write_partition(pu, out.path(stem + "_partition.json"))
    print(out.path(stem + "_partition.json"))
    payload = {"domain_id": domain_spec(dom).name, "ell": args.ell, "vertices": mesh.n_vertices,
               "triangles": mesh.n_triangles, "functions": pu.n_functions, "min_inradius_over_ell": inr,
               "max_circumradius_over_ell": circ, "max_overlap": overlap,
               "duplicated_pairs": int(len(mesh.dup_pairs))}
    out.text(stem + "_quality.json", dumps(payload))
    if not args.no_plot:
        from .plotting import plot_domain

        out.figure(plot_domain, stem + ".svg", domain_spec(dom), mesh=mesh)
    return 0


def cmd_seminorm(args, out: Output) -> int:
    dom = resolve_domain(args.domain, args)
    f = parse_field(args.fn)
    e = Exponents(args.s, args.p)
    if args.levels < 0:
        raise ValidationError("--levels must be >= 0")
    levels = tuple(range(args.levels + 1))
    spec = domain_spec(dom)
    base = {"domain_id": spec.name, "fn_id": f.name, "s": e.s, "p": e.p}
    rows = []
    results = {}
    ops = {"full": gagliardo_full, "restricted": gagliardo_restricted}
    for op, fn in ops.items():
        res = fn(f, e, dom, levels=levels, gamma=args.gamma, threads=args.threads)
        results[op] = res
        for lev, val in zip(res.levels, res.history):
            rows.append({**base, "op": op, "level": lev, "value": val, "diverging": res.diverging,
                         "error_estimate": res.error_estimate if lev == res.refinement_level else None})
    rows.append({**base, "op": "lp_norm", "value": lp_norm(f, dom, e.p)})
    if f.in_w1p(e.p):
        rows.append({**base, "op": "w1p_norm", "value": w1p_norm(f, dom, e.p)[0]})
    if args.oracle:
        for op, restricted in (("full", False), ("restricted", True)):
            mc = mc_oracle(f, e, dom, restricted, n_samples=args.samples, seed=args.seed)
            last = next(r for r in reversed(rows) if r["op"] == op)
            last.update({"oracle_estimate": mc.estimate ** (1 / e.p), "oracle_power": mc.estimate,
                         "oracle_power_std_error": mc.std_error, "oracle_unstable": mc.unstable,
                         "oracle_samples": mc.n_samples, "seed": args.seed})
    if args.format == "json":
        out.text("seminorm.json", dumps(report({"rows": rows}, args.seed)))
    else:
        out.append_csv("results.csv", rows, SEMINORM_COLUMNS)
    for op, res in results.items():
        print(f"{op}: value={res.value:.6g} level={res.refinement_level} diverging={str(res.diverging).lower()}")
    if not args.no_plot:
        from .plotting import plot_levels

        series = {op: (r.levels, r.history) for op, r in results.items()}
        out.figure(plot_levels, f"seminorm_{_slug(spec.name)}_{_slug(f.name)}.svg", series,
                   title=f"{f.name}, s={e.s:g}, p={e.p:g}")
    return 0


def _grid(args, dom) -> ScaleGrid:
    g0 = default_grid(dom)
    return ScaleGrid(args.tau if args.tau is not None else g0.tau, args.ratio, args.count)


def cmd_kprofile(args, out: Output) -> int:
    dom = resolve_domain(args.domain, args)
    f = parse_field(args.fn)
    e = Exponents(args.s, args.p)
    grid = _grid(args, dom)
    prof = k_profile(f, e.p, grid, dom, ("opt", "constructive"), args.cap).with_exponent(e.s, args.method)
    stem = f"kprofile_{_slug(domain_spec(dom).name)}_{_slug(f.name)}"
    out.text(stem + ".json", dumps(prof.to_json_dict()))
    out.text(stem + ".csv", prof.to_csv())
    print(f"interp_value={prof.interp_value:.6g} tail_bound={prof.tail_bound:.6g}")
    if not args.no_plot:
        from .plotting import plot_kprofile

        out.figure(plot_kprofile, stem + ".svg", prof)
    return 0


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config JSON, line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ValidationError("config JSON must be an object")
    name = cfg.get("experiment", args.name)
    if args.name and cfg.get("experiment") and args.name != cfg["experiment"]:
        raise ValidationError(f"experiment {args.name!r} conflicts with config {cfg['experiment']!r}")
    if name not in ("slit", "lipschitz-equivalence", "snowflake-equivalence", "custom"):
        raise ValidationError(f"unknown experiment {name!r}")
    cfg["experiment"] = name
    if "levels" in cfg:
        lv = cfg["levels"]
        if not isinstance(lv, list) or len(lv) < 3 or any(not isinstance(x, int) or x < 0 for x in lv):
            raise ValidationError("config field 'levels': need a list of at least 3 nonnegative integers")
    if "exponents" in cfg:
        try:
            exps = [Exponents(float(s), float(p)) for s, p in cfg["exponents"]]
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config field 'exponents': {exc}") from exc
        cfg["exponents"] = [(e.s, e.p) for e in exps]
    if "suite" in cfg:
        if not isinstance(cfg["suite"], list):
            raise ValidationError("config field 'suite' must be a list of function strings")
        for fn in cfg["suite"]:
            parse_field(fn)
    return cfg


def _write_experiment(out: Output, rep: dict, fmt: str, seed: int) -> None:
    name = rep["experiment"]
    out.text(f"experiment_{name}.json", dumps(report(rep, seed)))
    if fmt == "csv" and rep.get("rows"):
        out.text(f"experiment_{name}.csv", rows_to_csv(rep["rows"]))


def cmd_experiment(args, out: Output) -> int:
    cfg = _load_config(args)
    name = cfg["experiment"]
    runner = SuiteRunner(cap=cfg.get("fe_vertex_cap", FE_VERTEX_CAP),
                         levels=tuple(cfg["levels"]) if "levels" in cfg and name != "slit" else None)
    errors: list = []
    plots = not args.no_plot
    if name == "slit":
        rep = slit_experiment(levels=tuple(cfg.get("levels", (3, 4, 5, 6))), s=cfg.get("s", 0.8),
                              p=cfg.get("p", 1.5), counts=tuple(cfg.get("counts", (6, 8))), runner=runner,
                              threads=args.threads)
        _write_experiment(out, rep, args.format, args.seed)
        if plots:
            from .kfunctional import KProfile
            from .plotting import plot_kprofile, plot_levels

            series = {"full": (rep["levels"], rep["full"]["values"]),
                      "restricted": (rep["levels"], rep["restricted"]["values"])}
            out.figure(plot_levels, "slit_levels.svg", series, title="slit_angle on the slit domain")
            first = rep["interp"]["profiles"][str(rep["interp"]["counts"][-1])]
            prof = KProfile(first["scales"], first["k_opt"], first["k_constructive"], first["p"], s=first["s"],
                            fn_id=first["fn_id"], domain_id=first["domain_id"])
            out.figure(plot_kprofile, "slit_kprofile.svg", prof)
        print("flags: " + ", ".join(f"{k}={v}" for k, v in sorted(rep["flags"].items())))
        return 0
    if name == "lipschitz-equivalence":
        rep = lipschitz_equivalence(tuple(cfg.get("suite", SMOOTH_SQUARE_SUITE)),
                                    tuple(cfg.get("exponents", LIPSCHITZ_EXPONENTS)),
                                    level=cfg.get("level", 4), threads=args.threads)
        _write_experiment(out, rep, args.format, args.seed)
        print(f"full/restricted ratio in [{rep['ratio_min']:.4g}, {rep['ratio_max']:.4g}]")
        return 0
    exps = tuple(cfg.get("exponents", THEOREM_EXPONENTS))
    if name == "snowflake-equivalence":
        plan = load_plan(cfg["plan"]) if "plan" in cfg else resolve_plan(args)
        rep = snowflake_equivalence(plan, cfg.get("suite"), exps, runner, errors)
    else:
        if "domain" not in cfg:
            raise ValidationError("custom experiment needs a 'domain' field")
        dom_cfg = cfg["domain"]
        dom = load_domain(dom_cfg) if isinstance(dom_cfg, dict) else resolve_domain(dom_cfg, args)
        rep = custom_experiment(dom, cfg.get("suite", []), exps, runner, errors)
    _write_experiment(out, rep, args.format, args.seed)
    if plots:
        from .plotting import plot_kprofile

        for prof in runner.profiles.values():
            out.figure(plot_kprofile, f"kprofile_{_slug(prof.domain_id)}_{_slug(prof.fn_id)}_p{prof.p:g}.svg",
                       prof, s=0.5)
    print(f"C1={rep['C1']} C2={rep['C2']}")
    if errors:
        for err in errors:
            print(f"error in {err['fn_id']} s={err['s']} p={err['p']}: {err['error']}", file=sys.stderr)
        return 3 if any(e["error"].startswith("NumericalError") for e in errors) else 2
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--no-plot", action="store_true", help="skip SVG figures")

    parser = argparse.ArgumentParser(prog="fracsobolev",
                                     description="Fractional Sobolev seminorms and K-functionals.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("domain", parents=[common], help="write a validated domain JSON")
    p.add_argument("name", help="square, slit, snowflake or a domain JSON file")
    add_snowflake_args(p)
    p.set_defaults(func=cmd_domain)

    p = sub.add_parser("snowflake", parents=[common], help="build a snowflake curve and its tent tree")
    add_snowflake_args(p)
    p.set_defaults(func=cmd_snowflake)

    p = sub.add_parser("mesh", parents=[common], help="mesh a domain and build its partition of unity")
    p.add_argument("--domain", default="square")
    p.add_argument("--ell", type=float, required=True)
    p.add_argument("--scheme", choices=("auto", "structured", "delaunay"), default="auto")
    add_snowflake_args(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("seminorm", parents=[common], help="full and restricted seminorms over levels")
    p.add_argument("--domain", default="square")
    p.add_argument("--fn", required=True, help='function, e.g. "linear 1 0 0" or slit_angle')
    add_exponents(p)
    p.add_argument("--levels", type=int, default=3, help="refine through levels 0..N")
    p.add_argument("--gamma", type=float, help="literal growth factor for the divergence flag")
    p.add_argument("--oracle", action="store_true", help="add Monte Carlo oracle columns")
    p.add_argument("--samples", type=int, default=10 ** 6)
    add_snowflake_args(p)
    p.set_defaults(func=cmd_seminorm)

    p = sub.add_parser("kprofile", parents=[common], help="K estimates over a scale grid")
    p.add_argument("--domain", default="square")
    p.add_argument("--fn", required=True)
    add_exponents(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--count", type=int, default=6)
    p.add_argument("--method", choices=("opt", "constructive"), default="opt")
    p.add_argument("--cap", type=int, default=FE_VERTEX_CAP, help="FE vertex cap per scale")
    add_snowflake_args(p)
    p.set_defaults(func=cmd_kprofile)

    p = sub.add_parser("experiment", parents=[common], help="run a canonical experiment")
    p.add_argument("name", nargs="?", help="slit, lipschitz-equivalence, snowflake-equivalence or custom")
    p.add_argument("--config", help="experiment config JSON")
    add_snowflake_args(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = Output(args.out)
        return args.func(args, out)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FracSobolevError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
