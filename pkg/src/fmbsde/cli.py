"""Command line front end: ``fmbsde <command> --config <file> [--out-dir <dir>] [--seed <n>]``.

Exit status is 0 on success, 1 when the configuration or an input is
invalid, and 2 when a numerical method fails.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import FmbsdeError, NumericalError, SingularCovarianceError
from .expr import ExpressionError, parse_expression
from .fbm import sample_paths
from .forward import ForwardSpec, simulate_eta
from .kernel import Coefficient, Hurst, TimeGrid
from .mfbsde import (
    MfBsdeProblem,
    apriori_check,
    compare_solutions,
    contraction_report,
    discrete_residual,
    picard_solve,
)
from .pde import Driver, SpaceGrid
from .verify import run_battery

COMMANDS = ("simulate", "solve", "compare", "verify", "report")
DRIVER_VARS = ("t", "x", "yp", "zp", "y", "z")
OUTPUT_NAMES = ("paths.csv", "eta.csv", "surface.csv", "diagnostics.json", "verify.json", "compare.json")


class ConfigError(FmbsdeError, ValueError):
    """The configuration document is malformed."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    hurst: float = 0.75
    horizon: float = 1.0
    eta0: float = 0.0
    n_time: int = 256
    n_space: int = 400
    n_paths: int = 2000
    n_quad: int = 32
    seed: int = 0
    b: str = "0"
    sigma: str = "1"
    g: str = "x"
    f: str = "0"
    lipschitz: float = 0.0
    tol: float = 1e-8
    max_iter: int = 50
    simulate: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        names = [f.name for f in fields(cls)]
        for key in data:
            if key not in names:
                close = difflib.get_close_matches(key, names, n=1)
                hint = f"; did you mean {close[0]!r}?" if close else ""
                raise ConfigError(f"unknown configuration key {key!r}{hint}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        Hurst(self.hurst)
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be > 0, got {self.horizon!r}")
        for name in ("n_time", "n_space", "n_paths", "n_quad", "max_iter"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_space < 8:
            raise ConfigError("n_space must be >= 8")
        if self.lipschitz < 0:
            raise ConfigError("lipschitz must be >= 0")
        probe_t = np.linspace(0.0, self.horizon, 5)
        probe_x = np.linspace(-3.0, 3.0, 5)
        for name in ("b", "sigma"):
            parse_expression(getattr(self, name), ("t",))(t=probe_t)
        parse_expression(self.g, ("x",))(x=probe_x)
        self.driver_expression(self.f)(t=probe_t, x=probe_x, yp=0.5, zp=0.5, y=0.5, z=0.5)
        for key in ("f2",):
            if key in self.compare:
                self.driver_expression(self.compare[key])(t=probe_t, x=probe_x, yp=0.5, zp=0.5, y=0.5, z=0.5)
        if "g2" in self.compare:
            parse_expression(self.compare["g2"], ("x",))(x=probe_x)

    @staticmethod
    def driver_expression(src):
        return parse_expression(src, DRIVER_VARS)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(data)


def coefficient_from_expression(src: str, domain: str = "time") -> Coefficient:
    var = "t" if domain == "time" else "x"
    e = parse_expression(src, (var,))
    if e.is_constant:
        return Coefficient.constant(e(), domain)
    return Coefficient.from_callable(lambda v: e(**{var: v}), domain, label=e.canonical())


def driver_from_expression(src: str, lipschitz: float) -> Driver:
    e = parse_expression(src, DRIVER_VARS)

    def func(t, x, yp, zp, y, z):
        return e(t=t, x=x, yp=yp, zp=zp, y=y, z=z)

    return Driver(func, lipschitz, e.free_variables, e.canonical())


def build_spec(cfg: RunConfig) -> ForwardSpec:
    grid = TimeGrid.uniform(cfg.horizon, cfg.n_time)
    return ForwardSpec(cfg.eta0, coefficient_from_expression(cfg.b), coefficient_from_expression(cfg.sigma), cfg.hurst, grid)


def build_problem(cfg: RunConfig, spec: ForwardSpec | None = None, f: str | None = None, g: str | None = None,
                  lipschitz: float | None = None, monotone: bool = False) -> MfBsdeProblem:
    spec = spec or build_spec(cfg)
    return MfBsdeProblem(
        spec,
        driver_from_expression(f if f is not None else cfg.f, cfg.lipschitz if lipschitz is None else lipschitz),
        coefficient_from_expression(g if g is not None else cfg.g, "space"),
        monotone_in_yprime=monotone,
        space=SpaceGrid.auto(spec, cfg.n_space),
        n_quad=cfg.n_quad,
    )


# ---------------------------------------------------------------------------
# output


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def emit_csv(header, rows, path) -> Path:
    """RFC 4180 CSV with a header row, LF line ends and 17 significant digits."""
    rows = np.asarray(rows) if not isinstance(rows, list) else rows
    width = len(header)
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                if len(row) != width:
                    raise ConfigError(f"row of length {len(row)} under a header of {width} columns")
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def emit_json(obj, path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------------------
# commands


def _threads() -> int | None:
    raw = os.environ.get("FMBSDE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FMBSDE_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"FMBSDE_THREADS must be a positive integer, got {raw!r}")
    return n


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    spec = build_spec(cfg)
    n_paths = int(cfg.simulate.get("n_paths", cfg.n_paths))
    batch = sample_paths(spec.grid, cfg.hurst, n_paths, cfg.seed, cfg.simulate.get("method", "cholesky"))
    header, table = batch.to_table()
    emit_csv(header, table, out / "paths.csv")
    emit_csv(header, simulate_eta(spec, batch), out / "eta.csv")
    return {"paths": n_paths, "files": ["paths.csv", "eta.csv"]}


def _solution_summary(p, sol, cfg) -> dict:
    spec = p.spec
    rep = contraction_report(sol)
    ap = apriori_check(p, sol)
    batch = sample_paths(spec.grid, cfg.hurst, cfg.n_paths, cfg.seed)
    res = discrete_residual(p, sol, batch)
    d = sol.to_dict()
    d.update({
        "Y0": sol.y0(spec.eta0),
        "Z0": float(sol.surface.w[0][np.argmin(np.abs(sol.surface.space.points - spec.eta0))]),
        "contraction_ratios": rep.ratios,
        "contraction_flagged": rep.flagged,
        "apriori_ratio": ap.ratio,
        "apriori_inconsistent": ap.inconsistent,
        "residual": {"n_paths": cfg.n_paths, "total_rms": res.total_rms, "max_abs_mean": res.max_abs_mean},
        "space": {"x_min": p.space.x_min, "x_max": p.space.x_max, "n_x": p.space.n_x},
        "surface_info": sol.surface.info,
    })
    return d


def cmd_solve(cfg: RunConfig, out: Path) -> dict:
    p = build_problem(cfg)
    sol = picard_solve(p, cfg.tol, cfg.max_iter)
    header, table = sol.surface.to_table()
    emit_csv(header, table, out / "surface.csv")
    diag = _solution_summary(p, sol, cfg)
    emit_json(diag, out / "diagnostics.json")
    return {"Y0": diag["Y0"], "iterations": sol.iterations}


def cmd_compare(cfg: RunConfig, out: Path) -> dict:
    c = cfg.compare
    if "f2" not in c and "g2" not in c:
        raise ConfigError("compare needs a 'compare' section with 'f2' and/or 'g2'")
    spec = build_spec(cfg)
    p1 = build_problem(cfg, spec, monotone=bool(c.get("monotone_in_yprime", True)))
    p2 = build_problem(cfg, spec, c.get("f2", cfg.f), c.get("g2", cfg.g), float(c.get("lipschitz2", cfg.lipschitz)))
    result = compare_solutions(p1, p2, float(c.get("tol", 1e-8)), seed=cfg.seed, picard_tol=cfg.tol,
                               workers=_threads() or 2)
    emit_json(result.to_dict(spec.eta0), out / "compare.json")
    return {"verdict": result.verdict, "Y1_0": result.first.y0(spec.eta0), "Y2_0": result.second.y0(spec.eta0)}


def cmd_verify(cfg: RunConfig, out: Path) -> dict:
    v = cfg.verify
    results = run_battery(
        tuple(v.get("hursts", (0.6, 0.75, 0.9))),
        int(v.get("n_paths", 100_000)),
        cfg.seed,
        int(v.get("n_steps", 16)),
        int(v.get("fine_steps", 1024)),
        cfg.horizon,
    )
    payload = [r.to_dict() for r in results]
    emit_json(payload, out / "verify.json")
    worst = max(r.max_abs_z for r in results)
    return {"checks": len(results), "max_abs_z": worst, "all_within_3": bool(worst <= 3.0)}


def cmd_report(cfg: RunConfig, out: Path) -> dict:
    lines = []
    found = {}
    for name in ("diagnostics.json", "compare.json", "verify.json"):
        path = out / name
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                found[name] = json.load(fh)
    if not found:
        raise ConfigError(f"no result files in {out}; run solve, compare or verify first")
    if "diagnostics.json" in found:
        d = found["diagnostics.json"]
        lines.append("solve")
        lines.append(f"  Y0 = {d['Y0']:.10g} after {d['iterations']} iteration(s)")
        lines.append(f"  beta = {d['beta_used']:.6g}, M = {d['M_used']:.6g}, C = {d['C_used']:.6g}")
        if d.get("contraction_ratios"):
            lines.append(f"  largest contraction ratio = {max(d['contraction_ratios']):.4g}")
        lines.append(f"  a-priori ratio = {d['apriori_ratio']:.4g}")
        lines.append(f"  residual rms = {d['residual']['total_rms']:.4g}")
    if "compare.json" in found:
        c = found["compare.json"]
        lines.append("compare")
        lines.append(f"  verdict = {c['verdict']}, max(u1 - u2) = {c['max_violation']:.4g}")
        lines.append(f"  Y1(0) = {c['Y1_0']:.10g}, Y2(0) = {c['Y2_0']:.10g}")
    if "verify.json" in found:
        v = found["verify.json"]
        lines.append("verify")
        for r in v:
            z = np.max(np.abs(np.atleast_1d(r["z"])))
            hurst = r["params"].get("hurst")
            tag = r["params"].get("F", "")
            lines.append(f"  {r['name']:<13} H={hurst:<5} {tag:<40} max|z| = {z:.3f}")
    print("\n".join(lines))
    return {"sections": sorted(found)}


HANDLERS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "compare": cmd_compare,
    "verify": cmd_verify,
    "report": cmd_report,
}

OPERATIONS = {
    "simulate": "fbm.sample_paths / forward.simulate_eta",
    "solve": "mfbsde.picard_solve",
    "compare": "mfbsde.compare_solutions",
    "verify": "verify.run_battery",
    "report": "cli.report",
}


def run(command: str, cfg: RunConfig, out_dir) -> dict:
    """Execute one command; raises library errors unchanged."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads()
    limiter = nullcontext()
    if threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=threads)
    with limiter:
        return HANDLERS[command](cfg, out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fmbsde", description="Mean-field BSDEs driven by fractional Brownian motion.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--out-dir", default=".", help="directory for output files (default: current directory)")
    ap.add_argument("--seed", type=int, default=None, help="override the seed in the configuration")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    op = OPERATIONS[args.command]
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        summary = run(args.command, cfg, args.out_dir)
    except (NumericalError, SingularCovarianceError) as exc:
        print(f"fmbsde {args.command}: {op} failed: {exc}", file=sys.stderr)
        return 2
    except (FmbsdeError, ValueError, ExpressionError) as exc:
        print(f"fmbsde {args.command}: invalid input for {op}: {exc}", file=sys.stderr)
        return 1
    if args.command != "report":
        print(json.dumps(summary, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
