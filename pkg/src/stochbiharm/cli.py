"""Batch front-end: ``stochbiharm <subcommand> [--config FILE] [--set section.key=value ...]``.

Every run writes ``results.csv``, ``manifest.txt``, ``plot.gp`` and ``timing.txt`` to the output
directory.  All files except ``timing.txt`` are byte-identical across reruns of one config.

Exit codes: 0 success, 2 invalid input, 3 numerical guard refusal, 64 unknown subcommand.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import error_lab as el
from .fem import DofLimitError, FemSpace, SolverError, fully_discrete_path
from .noise import NoiseGrid, SeedSpec, noise_spectral_coeffs, sample
from .oracle import PathSolution, TimePartition, be_l2t_error, timediscrete_coeffs, uhat_path
from .rates import EXACT_SLACK, MC_SLACK, ConvergenceStudy, fit_rate, nu, nu_tilde
from .spectral import SpectralCutoff, SpectralField, p_poly, series_lemma_A1, series_lemma_A2

log = logging.getLogger(__name__)

SUBCOMMANDS = ("sample-path", "modeling-error", "time-error", "semidiscrete-error", "full-error",
               "compare-time-full", "det-convergence", "series-check")
OUTPUT_ENV = "STOCHBIHARM_OUTPUT_DIR"

EXIT_OK, EXIT_INVALID, EXIT_GUARD, EXIT_USAGE = 0, 2, 3, 64


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


# -- configuration --------------------------------------------------------------------------

def _intlist(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floatlist(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "problem": {"d": (int, 2), "T": (float, 0.1)},
    "noise": {"N_star": (int, 4), "J_star": (int, 4)},
    "fem": {"degree": (int, 3), "K": (int, 4), "dof_limit": (int, 200_000)},
    "time": {"M": (int, 16)},
    "spectral": {"n_max": (int, 64)},
    "mode": {"kind": (str, "exact_covariance"), "replicates": (int, 200), "seed": (int, 2024),
             "bootstrap": (int, 1000), "workers": (int, 1), "batch": (int, 50)},
    "sweep": {"parameter": (str, "none"), "levels": (_intlist, ()), "values": (_floatlist, ())},
    "study": {"quantity": (str, "default"), "scheme": (str, "default"), "norm": (str, "l2t"),
              "alpha": (_intlist, (1, 1)), "lemma": (str, "A2"), "c_star": (float, 1.0),
              "tail": (str, "yes")},
    "output": {"dir": (str, "results")},
}

# per-subcommand defaults layered over SCHEMA
SUBCOMMAND_DEFAULTS: dict[str, dict[str, dict[str, object]]] = {
    "sample-path": {"study": {"scheme": "spectral"}},
    "modeling-error": {"noise": {"J_star": 64}, "spectral": {"n_max": 256},
                       "problem": {"T": 0.01},
                       "sweep": {"parameter": "N_star", "levels": (4, 8, 16, 32, 64)}},
    "time-error": {"noise": {"N_star": 256, "J_star": 16}, "spectral": {"n_max": 256},
                   "study": {"quantity": "max_error"},
                   "sweep": {"parameter": "M", "levels": (4, 8, 16, 32, 64)}},
    "semidiscrete-error": {"noise": {"J_star": 32}, "mode": {"kind": "monte_carlo"},
                           "sweep": {"parameter": "K", "levels": (2, 4, 8)}},
    "full-error": {"noise": {"J_star": 32}, "mode": {"kind": "monte_carlo"}, "time": {"M": 4096},
                   "sweep": {"parameter": "K", "levels": (2, 4, 8, 16)}},
    "compare-time-full": {"noise": {"J_star": 32}, "mode": {"kind": "monte_carlo"},
                          "sweep": {"parameter": "M", "levels": (4, 8, 16, 32, 64)}},
    "det-convergence": {"spectral": {"n_max": 2}, "study": {"scheme": "fully_discrete"},
                        "time": {"M": 64},
                        "sweep": {"parameter": "auto", "levels": (4, 8, 16, 32)}},
    "series-check": {"spectral": {"n_max": 400},
                     "sweep": {"parameter": "delta",
                               "values": tuple(float(v) for v in np.logspace(-6, -1, 11))}},
}


@dataclass
class RunConfig:
    """Typed study configuration; ``to_text`` is the canonical form."""

    subcommand: str
    values: dict[str, dict[str, object]]

    @classmethod
    def defaults(cls, subcommand: str) -> "RunConfig":
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        values = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
        for s, keys in SUBCOMMAND_DEFAULTS.get(subcommand, {}).items():
            values[s].update(keys)
        return cls(subcommand, values)

    @classmethod
    def from_text(cls, text: str, subcommand: str) -> "RunConfig":
        cfg = cls.defaults(subcommand)
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError("expected a [section] header", exc.lineno) from None
        except configparser.ParsingError as exc:
            line = exc.errors[0][0] if exc.errors else None
            raise ConfigError(f"cannot parse {exc.errors[0][1].strip()}" if exc.errors else "parse error", line) from None
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
        lines = _key_lines(text)
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lines.get((section, None)))
            for key, raw in parser.items(section):
                where = lines.get((section, key))
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]", where)
                kind = SCHEMA[section][key][0]
                try:
                    cfg.values[section][key] = kind(raw.strip())
                except ValueError:
                    raise ConfigError(f"invalid value {raw.strip()!r} for {section}.{key}", where) from None
        return cfg

    def set(self, assignment: str) -> None:
        """Apply a ``section.key=value`` override."""
        name, sep, raw = assignment.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"bad override {assignment!r}; expected section.key=value")
        try:
            self.values[section][key] = SCHEMA[section][key][0](raw.strip())
        except ValueError:
            raise ConfigError(f"invalid value {raw.strip()!r} for {section}.{key}") from None

    def to_text(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}".rstrip() + "\n")
            out.write("\n")
        return out.getvalue()

    def __getitem__(self, name: str):
        section, _, key = name.partition(".")
        return self.values[section][key]


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines.setdefault((section, None), no)
        elif "=" in s and section is not None and not s.startswith(("#", ";")):
            lines.setdefault((section, s.split("=", 1)[0].strip()), no)
    return lines


# -- outputs ---------------------------------------------------------------------------------

def _num(x) -> str:
    return f"{float(x):.17g}"


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating, int, np.integer)) else v for v in row])


def write_plot_script(path: Path, csv_name: str, header, title: str, loglog: bool = True) -> None:
    x, y = header[0], header[1]
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        f"set xlabel '{x}'",
        f"set ylabel '{y}'",
    ]
    if loglog:
        lines.append("set logscale xy")
    using = "1:2:3:4 with yerrorlines" if len(header) >= 4 else "1:2 with linespoints"
    lines += [f"set terminal pngcairo size 800,600", f"set output '{Path(csv_name).stem}.png'",
              f"plot '{csv_name}' using {using}", ""]
    path.write_text("\n".join(lines))


@dataclass
class StudyResult:
    header: list
    rows: list
    title: str
    report: dict
    extra_files: dict | None = None
    loglog: bool = True


def _fit_lines(parameter, xs, err2, theory, slack, band=None) -> dict:
    if len(xs) < 3:
        return {"fit": "skipped (fewer than 3 resolutions)"}
    rep = fit_rate(ConvergenceStudy(parameter, xs, np.sqrt(err2)), theory=theory, slack=slack, band=band)
    out = {"fit.slope": repr(rep.slope), "fit.intercept": repr(rep.intercept),
           "fit.residual": repr(rep.residual), "fit.theory": repr(theory) if theory is not None else "none"}
    if band is not None:
        out["fit.band"] = f"{band[0]!r} {band[1]!r}"
    else:
        out["fit.slack"] = repr(slack)
    out.update({"fit.coarsest_excluded": str(rep.excluded_coarsest), "fit.pass": str(rep.passed)})
    return out


# -- subcommands -----------------------------------------------------------------------------

def _grid(cfg: RunConfig, **override) -> NoiseGrid:
    args = {"T": cfg["problem.T"], "N_star": cfg["noise.N_star"], "J_star": cfg["noise.J_star"], "d": cfg["problem.d"]}
    args.update(override)
    return NoiseGrid(args["T"], args["N_star"], args["J_star"], d=args["d"])


def _cutoff(cfg: RunConfig) -> SpectralCutoff:
    return SpectralCutoff(cfg["problem.d"], cfg["spectral.n_max"])


def _space(cfg: RunConfig, K: int | None = None) -> FemSpace:
    return FemSpace(cfg["problem.d"], cfg["fem.degree"], K or cfg["fem.K"], dof_limit=cfg["fem.dof_limit"])


def _levels(cfg: RunConfig, allowed) -> tuple[str, tuple[int, ...]]:
    param = cfg["sweep.parameter"]
    if param == "auto":
        param = allowed[0]
    levels = cfg["sweep.levels"]
    if param not in allowed:
        raise ConfigError(f"sweep.parameter must be one of {', '.join(allowed)}, got {param!r}")
    if not levels:
        raise ConfigError("sweep.levels is empty")
    if any(v < 1 for v in levels):
        raise ConfigError("sweep.levels must be positive integers")
    return param, levels


def _mc(cfg: RunConfig) -> None:
    if cfg["mode.kind"] != "monte_carlo":
        raise ConfigError("this study needs mode.kind = monte_carlo")
    el.ErrorMode("monte_carlo", cfg["mode.replicates"], cfg["mode.bootstrap"])


def run_sample_path(cfg: RunConfig, outdir: Path) -> StudyResult:
    grid = _grid(cfg)
    seed = SeedSpec(cfg["mode.seed"], 0)
    real = sample(grid, seed)
    partition = TimePartition.uniform_steps(grid.T, cfg["time.M"])
    scheme = cfg["study.scheme"]
    if scheme == "spectral":
        cutoff = _cutoff(cfg)
        coeffs = uhat_path(noise_spectral_coeffs(real, cutoff)[None], grid, partition.nodes, cutoff)[0]
        path = PathSolution(partition.nodes, coeffs, cutoff)
        norms = np.sum(coeffs**2, axis=1)
    elif scheme == "backward_euler":
        path = timediscrete_coeffs(real, partition, _cutoff(cfg))
        norms = np.sum(path.coeffs**2, axis=1)
    elif scheme == "fem":
        space = _space(cfg)
        path = fully_discrete_path(real, space, partition)
        norms = np.einsum("mi,mi->m", path.coeffs, (space.mass @ path.coeffs.T).T)
    else:
        raise ConfigError(f"study.scheme must be spectral, backward_euler or fem, got {scheme!r}")
    real.write_binary(outdir / "noise.bin")
    path.to_csv(outdir / "path.csv")
    rows = [(t, n) for t, n in zip(partition.nodes, norms)]
    return StudyResult(["time", "norm2"], rows, f"sample path ({scheme})", {"scheme": scheme},
                       {"noise": "noise.bin", "path": "path.csv"}, loglog=False)


def run_modeling_error(cfg: RunConfig, outdir: Path) -> StudyResult:
    d = cfg["problem.d"]
    param, levels = _levels(cfg, ("N_star", "J_star", "none"))
    cutoff = _cutoff(cfg)
    rows, xs, ys = [], [], []
    for level in (levels if param != "none" else (cfg["noise.N_star"],)):
        grid = _grid(cfg, **({param: level} if param != "none" else {}))
        value = el.modeling_error_exact(grid, grid.T, cutoff)
        x = grid.dt if param in ("N_star", "none") else grid.dx
        rows.append((x, value, value, value))
        xs.append(x)
        ys.append(value)
    theory = (4 - d) / 8 if param == "N_star" else (4 - d) / 2
    return StudyResult(["parameter", "error2", "CI_low", "CI_high"], rows, "modeling error",
                       {"evaluator": "modeling_error_exact", "sweep": param,
                        **_fit_lines(param, xs, ys, theory, EXACT_SLACK)})


def run_time_error(cfg: RunConfig, outdir: Path) -> StudyResult:
    d = cfg["problem.d"]
    _, levels = _levels(cfg, ("M",))
    grid = _grid(cfg)
    cutoff = _cutoff(cfg)
    quantity = cfg["study.quantity"]
    if quantity not in ("max_error", "consistency"):
        raise ConfigError(f"study.quantity must be max_error or consistency, got {quantity!r}")
    rows, xs, ys = [], [], []
    for M in levels:
        partition = TimePartition.uniform_steps(grid.T, M)
        if quantity == "max_error":
            value = float(el.timedisc_error_exact(grid, partition, cutoff).max())
        else:
            value = el.consistency_sigma(grid, partition, M, cutoff)
        rows.append((partition.k_max, value, value, value))
        xs.append(partition.k_max)
        ys.append(value)
    theory = (4 - d) / 8 if quantity == "max_error" else 1 + (4 - d) / 8
    return StudyResult(["parameter", "error2", "CI_low", "CI_high"], rows, f"time discretization ({quantity})",
                       {"quantity": quantity, **_fit_lines("dtau", xs, ys, theory, EXACT_SLACK)})


def run_semidiscrete_error(cfg: RunConfig, outdir: Path) -> StudyResult:
    _mc(cfg)
    _, levels = _levels(cfg, ("K",))
    grid = _grid(cfg)
    cutoff = _cutoff(cfg)
    times = TimePartition.uniform_steps(grid.T, cfg["time.M"]).nodes
    rows, xs, ys = [], [], []
    for K in levels:
        space = _space(cfg, K)
        est = el.semidiscrete_error_mc(grid, space, times, cutoff, cfg["mode.seed"], cfg["mode.replicates"],
                                       cfg["mode.bootstrap"], cfg["mode.batch"])
        agg = el.MCEstimate.from_samples(est.samples, cfg["mode.bootstrap"], reduce=np.max)
        rows.append((space.h, agg.mean, agg.ci_low, agg.ci_high))
        xs.append(space.h)
        ys.append(float(agg.mean))
    return StudyResult(["parameter", "error2", "CI_low", "CI_high"], rows, "semidiscrete error",
                       _fit_lines("h", xs, ys, nu(cfg["fem.degree"], cfg["problem.d"]), MC_SLACK))


def run_full_error(cfg: RunConfig, outdir: Path) -> StudyResult:
    _mc(cfg)
    param, levels = _levels(cfg, ("K", "M"))
    norm = cfg["study.norm"]
    if norm not in ("l2t", "linf"):
        raise ConfigError(f"study.norm must be l2t or linf, got {norm!r}")
    grid = _grid(cfg)
    cutoff = _cutoff(cfg)
    rows, xs, ys = [], [], []
    for level in levels:
        space = _space(cfg, level if param == "K" else None)
        partition = TimePartition.uniform_steps(grid.T, level if param == "M" else cfg["time.M"])
        res = el.fulldisc_error_mc(grid, space, partition, cutoff, cfg["mode.seed"], cfg["mode.replicates"],
                                   cfg["mode.bootstrap"], cfg["mode.batch"], cfg["mode.workers"])
        est = res.l2t if norm == "l2t" else res.linf
        x = space.h if param == "K" else partition.k_max
        rows.append((x, est.mean, est.ci_low, est.ci_high))
        xs.append(x)
        ys.append(float(est.mean))
    theory = nu(cfg["fem.degree"], cfg["problem.d"]) if param == "K" else (4 - cfg["problem.d"]) / 8
    return StudyResult(["parameter", "error2", "CI_low", "CI_high"], rows, f"fully discrete error ({norm})",
                       {"norm": norm, **_fit_lines(param, xs, ys, theory, MC_SLACK)})


def run_compare_time_full(cfg: RunConfig, outdir: Path) -> StudyResult:
    _mc(cfg)
    param, levels = _levels(cfg, ("K", "M"))
    grid = _grid(cfg)
    cutoff = _cutoff(cfg)
    rows, xs, ys, tails = [], [], [], []
    for level in levels:
        space = _space(cfg, level if param == "K" else None)
        partition = TimePartition.uniform_steps(grid.T, level if param == "M" else cfg["time.M"])
        res = el.timedisc_vs_fulldisc_mc(grid, space, partition, cutoff, cfg["mode.seed"], cfg["mode.replicates"],
                                         cfg["mode.bootstrap"], cfg["mode.batch"], cfg["mode.workers"])
        x = space.h if param == "K" else partition.k_max
        rows.append((x, res.linf.mean, res.linf.ci_low, res.linf.ci_high))
        xs.append(x)
        ys.append(float(res.linf.mean))
        tails.append(res.extra["tail_fraction"])
    report = {"spectral_tail_fraction.max": repr(max(tails))}
    if param == "M":
        report["variation"] = repr(max(ys) / min(ys) - 1.0)
    else:
        report.update(_fit_lines("h", xs, ys, nu(cfg["fem.degree"], cfg["problem.d"]), MC_SLACK))
    return StudyResult(["parameter", "error2", "CI_low", "CI_high"], rows, "time-discrete vs fully discrete", report)


def run_det_convergence(cfg: RunConfig, outdir: Path) -> StudyResult:
    scheme = cfg["study.scheme"]
    d = cfg["problem.d"]
    alpha = cfg["study.alpha"]
    if len(alpha) != d:
        raise ConfigError(f"study.alpha needs {d} components")
    cutoff = SpectralCutoff(d, max(cfg["spectral.n_max"], max(alpha)))
    w0 = SpectralField.unit(cutoff, alpha)
    T = cfg["problem.T"]
    rows, xs, ys = [], [], []
    if scheme == "backward_euler":
        _, levels = _levels(cfg, ("M",))
        for M in levels:
            partition = TimePartition.uniform_steps(T, M)
            err = be_l2t_error(w0, partition)
            rows.append((partition.k_max, err**2, err**2, err**2))
            xs.append(partition.k_max)
            ys.append(err**2)
        report = _fit_lines("dtau", xs, ys, 1.0, EXACT_SLACK, band=(0.9, 1.1))
    elif scheme in ("fully_discrete", "semidiscrete"):
        _, levels = _levels(cfg, ("K",))
        partition = TimePartition.uniform_steps(T, cfg["time.M"])
        for K in levels:
            space = _space(cfg, K)
            err = (el.det_fulldisc_error(w0, space, partition) if scheme == "fully_discrete"
                   else el.det_semidiscrete_error(w0, space, T))
            rows.append((space.h, err**2, err**2, err**2))
            xs.append(space.h)
            ys.append(err**2)
        target = nu_tilde(cfg["fem.degree"], 1.0)
        report = _fit_lines("h", xs, ys, target, 0.5, band=(target - 0.5, target + 0.5))
    else:
        raise ConfigError(f"study.scheme must be fully_discrete, semidiscrete or backward_euler, got {scheme!r}")
    return StudyResult(["parameter", "error2", "CI_low", "CI_high"], rows, f"deterministic {scheme}",
                       {"scheme": scheme, **report})


def run_series_check(cfg: RunConfig, outdir: Path) -> StudyResult:
    d = cfg["problem.d"]
    n = cfg["spectral.n_max"]
    values = cfg["sweep.values"]
    if not values or any(v <= 0 for v in values):
        raise ConfigError("sweep.values must be a nonempty list of positive numbers")
    tail = cfg["study.tail"] == "yes"
    lemma = cfg["study.lemma"]
    rows = []
    if lemma == "A2":
        for delta in values:
            s = series_lemma_A2(d, delta, n, tail=tail)
            rows.append((delta, s, s / (p_poly(d, delta**0.25) * delta ** ((4 - d) / 4))))
        header = ["delta", "sum", "bound_ratio"]
    elif lemma == "A1":
        for eps in values:
            s = series_lemma_A1(d, cfg["study.c_star"], eps, n, tail=tail)
            rows.append((eps, s, eps * s))
        header = ["eps", "sum", "bound_ratio"]
    else:
        raise ConfigError(f"study.lemma must be A1 or A2, got {lemma!r}")
    ratios = np.array([r[2] for r in rows])
    return StudyResult(header, rows, f"series check {lemma}",
                       {"lemma": lemma, "ratio.max": repr(float(ratios.max())), "ratio.min": repr(float(ratios.min())),
                        "ratios_finite": str(bool(np.all(np.isfinite(ratios))))})


RUNNERS = {
    "sample-path": run_sample_path,
    "modeling-error": run_modeling_error,
    "time-error": run_time_error,
    "semidiscrete-error": run_semidiscrete_error,
    "full-error": run_full_error,
    "compare-time-full": run_compare_time_full,
    "det-convergence": run_det_convergence,
    "series-check": run_series_check,
}


def write_manifest(path: Path, cfg: RunConfig, result: StudyResult) -> None:
    lines = [f"stochbiharm {__version__}", f"numpy {np.__version__}", f"scipy {scipy.__version__}",
             f"subcommand {cfg.subcommand}", f"seed.master {cfg['mode.seed']}",
             f"seed.replicates 0..{cfg['mode.replicates'] - 1}", f"cutoff.n_max {cfg['spectral.n_max']}",
             f"guard.dof_limit {cfg['fem.dof_limit']}", f"guard.tail_fraction {el.TAIL_FRACTION}",
             f"guard.negative_tolerance {el.NEGATIVE_TOLERANCE}", f"slack.exact {EXACT_SLACK}",
             f"slack.mc {MC_SLACK}"]
    lines += [f"{k} {v}" for k, v in result.report.items()]
    for name, file in (result.extra_files or {}).items():
        lines.append(f"file.{name} {file}")
    lines += ["", "# config", cfg.to_text()]
    path.write_text("\n".join(lines))


def run(cfg: RunConfig, outdir: Path) -> StudyResult:
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = RUNNERS[cfg.subcommand](cfg, outdir)
    write_csv(outdir / "results.csv", result.header, result.rows)
    write_manifest(outdir / "manifest.txt", cfg, result)
    write_plot_script(outdir / "plot.gp", "results.csv", result.header, result.title, result.loglog)
    (outdir / "timing.txt").write_text(f"wall_seconds {time.perf_counter() - start:.3f}\n")
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochbiharm", description="Error studies for the stochastic biharmonic heat equation.")
    p.add_argument("subcommand", help=" | ".join(SUBCOMMANDS))
    p.add_argument("--config", type=Path, help="INI study configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--output-dir", type=Path, help=f"output directory (the {OUTPUT_ENV} variable takes precedence)")
    p.add_argument("--print-config", action="store_true", help="print the canonical config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    if args.subcommand not in SUBCOMMANDS:
        parser.print_usage(sys.stderr)
        print(f"stochbiharm: unknown subcommand {args.subcommand!r}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text = args.config.read_text() if args.config else ""
        cfg = RunConfig.from_text(text, args.subcommand)
        for item in args.set:
            cfg.set(item)
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        outdir = Path(os.environ.get(OUTPUT_ENV) or args.output_dir or cfg["output.dir"])
        result = run(cfg, outdir)
    except (el.CutoffError, DofLimitError, SolverError, ArithmeticError) as exc:
        print(f"stochbiharm: refused: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (ConfigError, ValueError, OSError) as exc:
        print(f"stochbiharm: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for k, v in result.report.items():
        print(f"{k}: {v}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
