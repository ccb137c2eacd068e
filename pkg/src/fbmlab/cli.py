"""Command-line front end.

Configuration is a flat INI file with one section per module. Every key and
its default lives in :data:`DEFAULTS`; files, ``--set section.key=value`` and
the shortcut flags only override entries of that table, and unknown keys are
rejected by exact name. Exit codes: 0 success, 1 a verdict failed, 2 a
configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FbmLabError
from .estimators import MonteCarloConfig
from .fbm import SeedSpec, TimeGrid, sample_fbm
from .flow import DriverPath, integrate_flow
from .systems import make_system
from .verify import (DEFAULT_HS, EXPERIMENTS, FAIL, OBSERVED, PASS, UNIDENTIFIABLE, ExperimentConfig, failed,
                     report_row, write_report)

OUTPUT_ENV = "FBMLAB_OUTPUT"
log = logging.getLogger("fbmlab")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(";", ",").split(",") if v.strip())


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(";", ",").split(",") if v.strip())


def _points(s: str) -> tuple:
    """Points separated by ``|``, coordinates by ``,``: ``0,0 | 0.5,0``."""
    return tuple(_floats(p) for p in s.split("|") if p.strip())


def _optional_int(s: str):
    return None if s.strip() in ("", "auto", "none") else int(s)


def _params(s: str) -> dict:
    """``key:value`` pairs separated by ``;``; values are floats when they parse."""
    out = {}
    for item in s.split(";"):
        if not item.strip():
            continue
        if ":" not in item:
            raise ValueError(f"parameter {item!r} is not key:value")
        k, v = item.split(":", 1)
        v = v.strip()
        if "," in v:
            out[k.strip()] = _floats(v)
            continue
        try:
            out[k.strip()] = float(v)
        except ValueError:
            out[k.strip()] = v
    return out


# section -> key -> (default text, parser, help)
DEFAULTS = {
    "run": {
        "seed": ("2024", int, "master seed of the counter-based path streams"),
        "paths": ("4000", int, "Monte Carlo paths per ensemble"),
        "workers": ("1", int, "threads for chunk evaluation (results do not depend on it)"),
        "output": ("", str, f"output directory (default ${OUTPUT_ENV}, else ./reports)"),
    },
    "fbm": {
        "hurst": ("0.75", float, "Hurst parameter for single-H commands"),
        "N": ("128", int, "grid steps (power of two)"),
        "T": ("1.0", float, "horizon for sample-fbm and integrate"),
        "method": ("cholesky", str, "sampler: cholesky or circulant"),
        "antithetic": ("false", _bool, "pair every path with its negation"),
    },
    "system": {
        "name": ("identity", str, "catalog system: identity, constant, rotated, shear, rotation, linear1d, expression"),
        "dimension": ("2", int, "dimension for identity and expression systems"),
        "params": ("", _params, "extra parameters, key:value;key:value (angle, a, matrix, fields)"),
        "analytic": ("true", _bool, "use analytic derivatives (false forces finite differences)"),
    },
    "flow": {
        "scheme": ("heun", str, "euler or heun"),
        "substeps": ("4", int, "ODE steps per driver interval"),
        "level": ("auto", _optional_int, "dyadic interpolation level (auto = log2 N)"),
        "dump": ("false", _bool, "integrate: write per-path trajectory CSVs"),
        "refine": ("false", _bool, "integrate: add the dyadic refinement study"),
    },
    "mc": {
        "chunk": ("64", int, "paths per evaluation chunk"),
        "cell_rule": ("trapezoid", str, "cell values of step functions: trapezoid or left"),
        "fd_step": ("1e-3", float, "relative finite-difference step"),
    },
    "experiment": {
        "xs": ("0 | 0.5 | 1", _points, "start points, | separated, zero padded"),
        "ts": ("0.03125, 0.0625, 0.125, 0.25, 0.5", _floats, "time sweep, increasing"),
        "hursts": (", ".join(map(str, DEFAULT_HS)), _floats, "H sweep for gradient-scan and bounds"),
        "f": ("sign", str, "bounded test function: sign, cos, sin, sin_cos, linear, constant"),
        "f_smooth": ("sin", str, "smooth test function for identities and bounds"),
        "component": ("0", int, "gradient component i"),
        "k": ("1", int, "derivative order for gradient-scan (1 or 2)"),
        "k2_step": ("0.05", float, "spatial step of the second-order difference"),
        "check_rate": ("true", _bool, "compare fitted slopes with -kH and -2kH"),
        "slope_tol": ("0.05", float, "tolerance of the rate slope"),
        "poincare_tol": ("0.1", float, "tolerance of the inverse Poincare slope"),
        "moments": ("1, 2", _ints, "det M moment orders p"),
        "trend_tol": ("0.3", float, "tolerance of the det M trend slope"),
        "levels": ("4, 5, 6, 7, 8", _ints, "dyadic levels of the refinement study"),
        "gamma": ("0.5", float, "Hoelder exponent of the refinement study"),
        "mode": ("synthetic", str, "alpha orthogonality: synthetic or system"),
        "observational": ("false", _bool, "run hypothesis-dependent checks without verdicts"),
        "rep_tol": ("1e-2", float, "pathwise identity tolerance"),
        "orth_N": ("256", int, "grid steps of the alpha orthogonality check"),
        "orth_paths": ("16", int, "paths of the alpha orthogonality check"),
    },
}

SUBCOMMANDS = {
    "sample-fbm": "sample fBm paths and write one CSV per path",
    "integrate": "integrate the flow and report its invariants",
    "verify-ibp": "pathwise identity, Skorokhod duality and Gaussian IBP checks",
    "gradient-scan": "blow-up rate of the gradient as t decreases",
    "bounds": "inverse Poincare, global gradient bound and alpha orthogonality",
    "moments": "det M moments and sup-moment diagnostics",
}


def defaults_table() -> str:
    lines = ["configuration keys (section.key = default):"]
    for sec, keys in DEFAULTS.items():
        for key, (default, _, help_) in keys.items():
            lines.append(f"  {sec + '.' + key:<26} = {default!s:<36} {help_}")
    return "\n".join(lines)


def builtin_configs() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("fbmlab").joinpath("configs").iterdir()
                  if p.name.endswith(".ini"))


class Config:
    """Validated configuration values, ``conf[section][key]``."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, sec):
        return self.values[sec]

    def echo(self) -> dict:
        return {sec: {k: (list(v) if isinstance(v, tuple) else v) for k, v in keys.items()}
                for sec, keys in self.values.items()}


def load_config(path=None, overrides=()) -> Config:
    """Merge defaults, an INI file (path or builtin name) and ``section.key=value`` overrides."""
    raw = {sec: {k: d for k, (d, _, _) in keys.items()} for sec, keys in DEFAULTS.items()}
    problems = []
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        p = Path(path)
        if not p.exists() and path in builtin_configs():
            text = resources.files("fbmlab").joinpath("configs", f"{path}.ini").read_text()
        elif p.exists():
            text = p.read_text()
        else:
            raise ConfigError([f"config {path!r} not found (builtins: {', '.join(builtin_configs())})"])
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError([f"config parse error: {exc}"]) from None
        for sec in cp.sections():
            if sec not in DEFAULTS:
                problems.append(f"unknown section [{sec}]")
                continue
            for key, value in cp.items(sec):
                if key not in DEFAULTS[sec]:
                    problems.append(f"unknown key {sec}.{key}")
                else:
                    raw[sec][key] = value
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not section.key=value")
            continue
        name, value = item.split("=", 1)
        sec, _, key = name.strip().partition(".")
        if sec not in DEFAULTS or key not in DEFAULTS[sec]:
            problems.append(f"unknown key {name.strip()}")
            continue
        raw[sec][key] = value.strip()
    values = {}
    for sec, keys in DEFAULTS.items():
        values[sec] = {}
        for key, (_, parser, _) in keys.items():
            try:
                values[sec][key] = parser(raw[sec][key])
            except (ValueError, TypeError) as exc:
                problems.append(f"{sec}.{key}: {exc}")
    if all(key in values[sec] for sec, keys in DEFAULTS.items() for key in keys):
        problems += _semantic_problems(Config(values))
    conf = Config(values)
    if problems:
        raise ConfigError(problems)
    return conf


def _semantic_problems(conf: Config) -> list[str]:
    out = []
    if conf["run"]["paths"] < 1:
        out.append("run.paths must be positive")
    N = conf["fbm"]["N"]
    if N < 1 or N & (N - 1):
        out.append(f"fbm.N must be a power of two, got {N}")
    if not 0.5 < conf["fbm"]["hurst"] < 1.0:
        out.append(f"fbm.hurst must lie in (1/2, 1), got {conf['fbm']['hurst']}")
    if conf["fbm"]["method"] not in ("cholesky", "circulant"):
        out.append(f"fbm.method must be cholesky or circulant, got {conf['fbm']['method']!r}")
    if conf["flow"]["scheme"] not in ("euler", "heun"):
        out.append(f"flow.scheme must be euler or heun, got {conf['flow']['scheme']!r}")
    if conf["mc"]["cell_rule"] not in ("trapezoid", "left"):
        out.append(f"mc.cell_rule must be trapezoid or left, got {conf['mc']['cell_rule']!r}")
    if not 0.0 < conf["fbm"]["T"] <= 1.0:
        out.append("fbm.T must lie in (0, 1]")
    return out


def _system(conf: Config):
    s = conf["system"]
    params = dict(s["params"])
    if s["name"] in ("identity", "expression"):
        params.setdefault("dimension", s["dimension"])
    params["analytic"] = s["analytic"]
    return make_system(s["name"], **params)


def _mc(conf: Config, paths=None) -> MonteCarloConfig:
    return MonteCarloConfig(paths=max(2, paths or conf["run"]["paths"]), N=conf["fbm"]["N"],
                            scheme=conf["flow"]["scheme"], substeps=conf["flow"]["substeps"],
                            seed=conf["run"]["seed"], level=conf["flow"]["level"],
                            antithetic=conf["fbm"]["antithetic"], method=conf["fbm"]["method"],
                            chunk=conf["mc"]["chunk"], workers=conf["run"]["workers"],
                            cell_rule=conf["mc"]["cell_rule"], fd_step=conf["mc"]["fd_step"])


def experiment(conf: Config, kind: str, **changes) -> ExperimentConfig:
    s, e = conf["system"], conf["experiment"]
    params = dict(s["params"])
    if s["name"] in ("identity", "expression"):
        params.setdefault("dimension", s["dimension"])
    params["analytic"] = s["analytic"]
    kw = dict(kind=kind, system=s["name"], system_params=params, xs=e["xs"], ts=e["ts"], f=e["f"],
              f_params={"component": e["component"]} if e["f"] in ("sign", "cos", "sin") else {},
              Hs=(conf["fbm"]["hurst"],), mc=_mc(conf), component=e["component"], k=e["k"],
              k2_step=e["k2_step"], check_rate=e["check_rate"], slope_tol=e["slope_tol"], moments=e["moments"],
              trend_tol=e["trend_tol"], levels=e["levels"], gamma=e["gamma"], mode=e["mode"],
              observational=e["observational"], rep_tol=e["rep_tol"], orth_N=e["orth_N"],
              orth_paths=e["orth_paths"])
    kw.update(changes)
    return ExperimentConfig(**kw)


def _smooth(conf: Config, dim: int) -> dict:
    name = conf["experiment"]["f_smooth"]
    if name == "sin_cos" and dim < 2:
        name = "sin"
    return {"f": name, "f_params": {"component": 0} if name in ("sin", "cos") else {}}


# ----------------------------------------------------------------------------
# subcommands


def cmd_sample_fbm(conf: Config, out: Path):
    grid = TimeGrid(conf["fbm"]["T"], conf["fbm"]["N"])
    n = _system(conf).dim
    files = []
    for p in range(conf["run"]["paths"]):
        path = sample_fbm(grid, conf["fbm"]["hurst"], n, SeedSpec(conf["run"]["seed"]), p,
                          method=conf["fbm"]["method"])
        files.append(path.to_csv(out / f"fbm_path{p}.csv"))
    log.info("wrote %d path files to %s", len(files), out)
    return []


def cmd_integrate(conf: Config, out: Path):
    from .fbm import sample_fbm_batch

    system = _system(conf)
    H = conf["fbm"]["hurst"]
    grid = TimeGrid(conf["fbm"]["T"], conf["fbm"]["N"])
    x = experiment(conf, "integrate").point(conf["experiment"]["xs"][0], system.dim)
    B = sample_fbm_batch(grid, H, system.dim, SeedSpec(conf["run"]["seed"]), range(conf["run"]["paths"]),
                         method=conf["fbm"]["method"])
    fl = integrate_flow(system, DriverPath.from_samples(grid, B, H, conf["flow"]["level"]), x,
                        scheme=conf["flow"]["scheme"], substeps=conf["flow"]["substeps"])
    rows = []
    P = fl.paths
    for name, res in (("inverse_residual", fl.inverse_residual()), ("duality_residual", fl.duality_residual()),
                      ("frame_residual", fl.frame_residual(system)), ("rel_beta_residual", fl.rel_beta_residual(system))):
        rows.append(report_row("integrate", "flow_invariants", system.name, H, x, grid.T, grid.N, P, name,
                         float(np.nanmax(res)) if np.isfinite(res).any() else float("nan"), float("nan"), OBSERVED))
    aborted = int((~fl.ok).sum())
    rows.append(report_row("integrate", "flow_invariants", system.name, H, x, grid.T, grid.N, P, "aborted_paths",
                     aborted, float("nan"), PASS if aborted == 0 else FAIL))
    for p, why in fl.aborts:
        log.warning("path %d aborted: %s", p, why)
    if conf["flow"]["dump"]:
        for p in range(P):
            fl.dump_csv(out / f"trajectory_path{p}.csv", p)
    if conf["flow"]["refine"]:
        rows += EXPERIMENTS["wong_zakai"](experiment(conf, "integrate", mc=_mc(conf, conf["run"]["paths"])))[1]
    return rows


def cmd_verify_ibp(conf: Config, out: Path):
    system = _system(conf)
    rows = []
    rows += EXPERIMENTS["rep_vf"](experiment(conf, "verify-ibp", ts=(conf["experiment"]["ts"][-1],),
                                             **_smooth(conf, system.dim)))[1]
    rows += EXPERIMENTS["duality"](experiment(conf, "verify-ibp", ts=(conf["experiment"]["ts"][-1],)))[1]
    x0 = conf["experiment"]["xs"][0][:1]
    rows += EXPERIMENTS["gaussian_ibp"](experiment(conf, "verify-ibp", system="identity",
                                                   system_params={"dimension": 1}, xs=(x0,), f="sign",
                                                   f_params={}, ts=(conf["experiment"]["ts"][-1],)))[1]
    return rows


def cmd_gradient_scan(conf: Config, out: Path):
    return EXPERIMENTS["rate"](experiment(conf, "gradient-scan", Hs=conf["experiment"]["hursts"]))[1]


def cmd_bounds(conf: Config, out: Path):
    system = _system(conf)
    e = conf["experiment"]
    rows = EXPERIMENTS["inverse_poincare"](experiment(conf, "bounds", Hs=e["hursts"],
                                                      slope_tol=e["poincare_tol"]))[1]
    smooth = _smooth(conf, system.dim)
    rows += EXPERIMENTS["global_bound"](experiment(conf, "bounds", Hs=e["hursts"], **smooth))[1]
    rows += EXPERIMENTS["alpha_orthogonality"](experiment(conf, "bounds"))[1]
    return rows


def cmd_moments(conf: Config, out: Path):
    rows = EXPERIMENTS["det_m"](experiment(conf, "moments"))[1]
    rows += EXPERIMENTS["moments"](experiment(conf, "moments"))[1]
    return rows


COMMANDS = {"sample-fbm": cmd_sample_fbm, "integrate": cmd_integrate, "verify-ibp": cmd_verify_ibp,
            "gradient-scan": cmd_gradient_scan, "bounds": cmd_bounds, "moments": cmd_moments}


def build_parser() -> argparse.ArgumentParser:
    epilog = defaults_table() + "\n\nbuiltin configs: " + ", ".join(builtin_configs()) + \
        f"\n\nexit codes: 0 success, 1 failed verdict, 2 configuration error" \
        f"\noutput directory: --out, else ${OUTPUT_ENV}, else run.output, else ./reports"
    parser = argparse.ArgumentParser(prog="fbmlab", description="fBm-driven SDE laboratory",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"fbmlab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file or builtin config name")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for run.seed")
    common.add_argument("--paths", type=int, help="shortcut for run.paths")
    common.add_argument("--grid", type=int, help="shortcut for fbm.N")
    common.add_argument("--hurst", type=float, help="shortcut for fbm.hurst")
    common.add_argument("--workers", type=int, help="shortcut for run.workers")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, help_ in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=defaults_table(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def output_dir(args, conf: Config) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or conf["run"]["output"] or "reports")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    for flag, key in (("seed", "run.seed"), ("paths", "run.paths"), ("grid", "fbm.N"), ("hurst", "fbm.hurst"),
                      ("workers", "run.workers")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    try:
        conf = load_config(args.config, overrides)
        out = output_dir(args, conf)
        out.mkdir(parents=True, exist_ok=True)
        rows = COMMANDS[args.command](conf, out)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except FbmLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command != "sample-fbm":
        csv_path, _ = write_report(rows, out / args.command.replace("-", "_"), config=conf.echo(),
                                   seeds={"master": conf["run"]["seed"]})
        n_fail = sum(r["verdict"] in (FAIL, UNIDENTIFIABLE) for r in rows)
        print(f"{args.command}: {len(rows)} rows, {n_fail} failed; report {csv_path}")
    return EXIT_FAILED if failed(rows) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
