"""Experiment runner: ``hsgreen <subcommand> --config run.toml --out DIR``.

Every subcommand reads a TOML config, runs its jobs, writes Field/CSV
artifacts plus ``summary.csv`` into ``--out`` and exits with

* 0 when every job passes,
* 1 when a job fails its verdict or tolerance,
* 2 on configuration errors (unparseable TOML, missing keys or inputs).

Tolerances have no defaults: a job that needs one and does not find it in the
``[tolerance]`` table is a configuration error. ``--tol-scale`` multiplies the
quadrature tolerances. Lengths are in units of the half-space variable x3 and
times in the matching parabolic unit (t ~ x3^2).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python 3.10
    import tomli as tomllib

from .fields import Field, SlabGrid, read_field, write_field
from .kernels import (
    GreenOperator, KernelQuery, QuadratureError, QuadratureSpec, green_full, green_g1, green_g2,
    heat_kernel, kernel_hs, kernel_ws,
)
from .mild import MildProblem, green_operator, mild_residual, picard_solve
from .pressure import pressure_half
from .verify import ESTIMATE_IDS, SampleSpec, check_kernel_estimates, check_siop

log = logging.getLogger("hsgreen")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration

def load_config(path) -> dict:
    """Parse a TOML file; errors carry the line/column diagnostics of the parser."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not cfg:
        raise ConfigError(f"{path}: empty config")
    cfg["_dir"] = path.parent
    return cfg


def default_config() -> dict:
    """The bundled small-grid config."""
    text = resources.files("hsgreen").joinpath("configs/small.toml").read_text()
    cfg = tomllib.loads(text)
    cfg["_dir"] = Path.cwd()
    return cfg


def need(cfg: dict, key: str, kind=float):
    """``cfg["a.b"]`` with a config error naming the dotted key when missing."""
    node = cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing config key '{key}'")
        node = node[part]
    try:
        return kind(node)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}' has the wrong type") from None


def get(cfg: dict, key: str, default, kind=float):
    try:
        return need(cfg, key, kind)
    except ConfigError as e:
        if "missing" in str(e):
            return default
        raise


def grid_from(cfg: dict) -> SlabGrid:
    try:
        return SlabGrid(need(cfg, "grid.L"), need(cfg, "grid.H"), need(cfg, "grid.nx", int),
                        need(cfg, "grid.ny", int), need(cfg, "grid.nz", int))
    except ValueError as e:
        raise ConfigError(f"invalid grid: {e}") from None


def quadrature_from(cfg: dict, scale: float) -> QuadratureSpec:
    return QuadratureSpec(need(cfg, "tolerance.quadrature_rel") * scale,
                          need(cfg, "tolerance.quadrature_abs") * scale)


def input_path(cfg: dict, key: str) -> Path:
    p = Path(need(cfg, key, str))
    p = p if p.is_absolute() else cfg["_dir"] / p
    if not p.is_file():
        raise ConfigError(f"input file for '{key}' not found: {p}")
    return p


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


# --------------------------------------------------------------------------
# subcommands: each returns [(job, passed, detail), ...]

KERNELS = {
    "gamma": lambda q, spec: heat_kernel(q),
    "g1": lambda q, spec: green_g1(q),
    "g2": green_g2,
    "g": green_full,
    "k_ws": lambda q, spec: kernel_ws(q),
    "k_hs": lambda q, spec: kernel_hs(q, spec),
}


def run_kernels(cfg, args, out: Path):
    spec = quadrature_from(cfg, args.tol_scale)
    kind = need(cfg, "kernels.kind", str)
    if kind not in KERNELS:
        raise ConfigError(f"kernels.kind must be one of {sorted(KERNELS)}")
    pts = np.asarray(need(cfg, "kernels.points", list), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 7:
        raise ConfigError("kernels.points must be rows [x1, x2, x3, y1, y2, y3, t]")
    comp = tuple(get(cfg, "kernels.comp", [], list))
    dx, dy = tuple(get(cfg, "kernels.dx", [], list)), tuple(get(cfg, "kernels.dy", [], list))
    rows, ok = [], True
    for k, r in enumerate(pts):
        try:
            v = float(KERNELS[kind](KernelQuery(r[:3], r[3:6], r[6], dx, dy, 0, comp), spec))
        except QuadratureError as e:
            log.error("point %d: %s", k, e)
            v = float("nan")
        ok &= bool(np.isfinite(v))
        rows.append([k] + list(r) + [v])
    write_csv(out / f"kernel_{kind}.csv", ["point", "x1", "x2", "x3", "y1", "y2", "y3", "t", "value"], rows)
    return [(f"kernels:{kind}", ok, f"{len(rows)} points")]


def run_pressure(cfg, args, out: Path):
    H = read_field(input_path(cfg, "pressure.input"))
    if H.rank != 2:
        raise ConfigError("pressure.input must hold a rank-2 field")
    tol_res = need(cfg, "tolerance.residual")
    tol_neu = need(cfg, "tolerance.neumann")
    decay = get(cfg, "tolerance.decay", None)
    cube = get(cfg, "pressure.bmo_cube", None)
    r = pressure_half(H, bmo_cube=cube, decay_tol=decay)
    write_field(out / "p1.hsf", r.p1)
    write_field(out / "grad_p1.hsf", r.grad)
    rows = [("residual", r.residual), ("neumann_defect", r.neumann_defect),
            ("normalization", r.normalization)]
    if r.bmo is not None:
        rows += [("bmo", r.bmo.value), ("bmo_ratio", r.bmo.value / max(H.sup(), 1e-300))]
    write_csv(out / "pressure.csv", ["quantity", "value"], rows)
    return [("pressure:residual", r.residual <= tol_res, f"{r.residual:.3e}"),
            ("pressure:neumann", r.neumann_defect <= tol_neu, f"{r.neumann_defect:.3e}")]


def run_mild(cfg, args, out: Path):
    grid = grid_from(cfg)
    spec = quadrature_from(cfg, args.tol_scale)
    src = need(cfg, "mild.u_A", str)
    if src == "zero":
        u_A = Field(grid, 1, np.zeros((3,) + grid.shape))
    else:
        u_A = read_field(input_path(cfg, "mild.u_A"))
        if u_A.grid.shape != grid.shape:
            raise ConfigError("mild.u_A was sampled on another grid")
        u_A = Field(grid, 1, u_A.values)
    A = need(cfg, "mild.A")
    try:
        problem = MildProblem(grid, A, u_A, need(cfg, "mild.t_samples", list), spec=spec,
                              space=get(cfg, "mild.space", "half", str), nt=need(cfg, "mild.nt", int),
                              tol=need(cfg, "tolerance.picard"), max_iter=need(cfg, "mild.max_iter", int))
    except ValueError as e:
        raise ConfigError(f"invalid mild problem: {e}") from None
    tol_res = need(cfg, "tolerance.mild_residual")
    if "cache" in cfg.get("mild", {}):
        times = green_operator(grid, problem.space).load_cache(input_path(cfg, "mild.cache"))
        log.info("loaded %d cached kernel times", len(times))
    states = picard_solve(problem)
    rows = [(s.k, s.residual, s.trace_defect, s.div_defect, s.sup, s.status) for s in states]
    write_csv(out / "picard.csv", ["k", "residual", "trace_defect", "div_defect", "sup", "status"], rows)
    last = states[-1]
    write_field(out / "u.hsf", last.u)
    res = mild_residual(last.u, problem)["residual"]
    write_csv(out / "mild.csv", ["quantity", "value"],
              [("iterations", len(states)), ("mild_residual", res), ("status", last.status)])
    return [("mild:picard", last.status == "converged", f"{len(states)} iterations, {last.status}"),
            ("mild:residual", res <= tol_res, f"{res:.3e}")]


def run_verify(cfg, args, out: Path):
    ids = list(ESTIMATE_IDS) if args.all else (args.estimate or get(cfg, "verify.estimates", [], list))
    if not ids:
        raise ConfigError("no estimates selected (--estimate ID, --all or verify.estimates)")
    bad = [e for e in ids if e not in ESTIMATE_IDS]
    if bad:
        raise ConfigError(f"unknown estimate ids {bad}; known: {list(ESTIMATE_IDS)}")
    seed = args.seed if args.seed is not None else get(cfg, "verify.seed", 0, int)
    try:
        ss = SampleSpec(n=get(cfg, "verify.samples", 128, int), seed=seed,
                        levels=get(cfg, "verify.levels", 2, int),
                        rel_tol=need(cfg, "tolerance.quadrature_rel") * args.tol_scale)
    except ValueError as e:
        raise ConfigError(f"invalid sample spec: {e}") from None
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(lambda e: check_kernel_estimates([e], ss), ids))
    jobs = []
    for eid, fits in zip(ids, results):
        for k, fit in enumerate(fits):
            (out / f"estimate_{eid}_{k}.csv").write_text(fit.to_csv())
            jobs.append((f"estimate:{eid}:{k}", fit.passed,
                         f"{fit.samples}; constants {[round(c, 6) for c in fit.constants]}"))
    return jobs


def run_siop(cfg, args, out: Path):
    grid = grid_from(cfg)
    reps = check_siop(grid, ps=need(cfg, "siop.p", list), L_slab=need(cfg, "siop.L_slab"),
                      exponent_tol=need(cfg, "tolerance.exponent"),
                      recon_tol=need(cfg, "tolerance.reconstruction"))
    jobs = []
    for r in reps:
        (out / f"siop_p{r.p:g}.csv").write_text(r.to_csv())
        jobs.append((f"siop:p={r.p:g}", r.passed,
                     f"exponent {r.exponent:.3f} vs {r.expected:.3f}, reconstruction {r.reconstruction:.1e}"))
    return jobs


def run_bake(cfg, args, out: Path):
    grid = grid_from(cfg)
    space = get(cfg, "cache.space", "half", str)
    times = need(cfg, "cache.times", list)
    op = GreenOperator(grid, space)
    name = out / get(cfg, "cache.file", "kernels.hsk", str)
    op.save_cache(name, times)
    return [("bake-cache", True, f"{len(times)} times -> {name.name}")]


COMMANDS = {"kernels": run_kernels, "pressure": run_pressure, "mild": run_mild,
            "verify": run_verify, "siop": run_siop, "bake-cache": run_bake}


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (verify falls back to the bundled small config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="job pool size")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--tol-scale", type=float, default=1.0, help="multiplies quadrature tolerances")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="hsgreen", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "verify":
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--estimate", action="append", help="estimate id (repeatable)")
            g.add_argument("--all", action="store_true", help="every estimate")
    return p


def run(args) -> int:
    if args.threads < 1 or not args.tol_scale > 0:
        raise ConfigError("--threads must be >= 1 and --tol-scale > 0")
    if args.config:
        cfg = load_config(args.config)
    elif args.command == "verify":
        cfg = default_config()
    else:
        raise ConfigError(f"'{args.command}' needs --config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = COMMANDS[args.command](cfg, args, out)
    write_csv(out / "summary.csv", ["job", "passed", "detail"], [(j, int(ok), d) for j, ok, d in jobs])
    for j, ok, d in jobs:
        print(f"{'PASS' if ok else 'FAIL'} {j}: {d}")
    return EXIT_OK if all(ok for _, ok, _ in jobs) else EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"hsgreen: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
