"""Command-line interface: ``halmle <command> [options]``.

Commands are fit, cv, estimate, bootstrap, ctmle, simulate and rate. Every
option can come from a key=value config file with sections (``--config``);
command-line flags override file values. Reports are JSON (keys sorted, a
``schema_version`` field, no timestamps or timings) plus CSV tables, so two
runs with the same configuration and seed write byte-identical files.

Exit codes: 0 success, 2 configuration or data error, 3 numerical failure,
4 report written but the undersmoothing criterion was not met.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import BasisSpec
from .bootstrap import BootstrapError, MeanPrediction, TreatmentMean, bootstrap_plugin, plateau_select
from .data import BINARY, CONTINUOUS, DataError, Dataset, load_csv, make_folds
from .estimands import (ATE, CONTROL, TREATED, EstimationError, ctmle_select, fit_outcome, fit_propensity,
                        ipw_tsm, orthogonalized_tmle_update, plugin_tsm, tmle_update_tsm, undersmooth_outcome)
from .scores import score_diagnostics
from .selection import cv_path
from .sim import SCHEMA_VERSION, EstimatorConfig, get_dgp, rate_experiment, run_mc
from .solver import BINOMIAL, GAUSSIAN, ConvergenceError, LossFamily

__all__ = ["ConfigError", "RunConfig", "load_config", "main"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_UNMET = 0, 2, 3, 4
COMMANDS = ("fit", "cv", "estimate", "bootstrap", "ctmle", "simulate", "rate")
METHODS = ("plugin", "ipw", "tmle", "tmle_preserving", "ctmle")
THREADS_ENV = "HALMLE_THREADS"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    """Everything a command needs. Every field has a default.

    Attributes
    ----------
    data : str
        CSV file with a header row.
    roles : str
        ``outcome=Y;treatment=A;covariates=W1,W2``. ``treatment`` is optional.
    outcome_kind : str
        ``auto`` (binary when every outcome is 0 or 1), ``binary`` or ``continuous``.
    loss : str
        ``auto`` (binomial for binary outcomes), ``gaussian`` or ``binomial``.
    max_degree, knots, knot_strategy, spline_order : BasisSpec fields.
    V, seed, grid_size, ratio, patience : cross-validation settings.
    estimand : str
        ``tsm1``, ``tsm0`` or ``ate``.
    method : str
        plugin, ipw, tmle, tmle_preserving or ctmle.
    tol : float or None
        Targeting tolerance; None uses sigma_n / (sqrt(n) log n). ``inf`` skips targeting.
    undersmooth, tol_const : undersmoothing switch and threshold constant.
    B, plateau : bootstrap replicate count and whether to scan for a plateau.
    truncate : str
        Propensity truncation bounds ``lo,hi``.
    dgp, n, replicates, n_grid : simulation settings. ``dgp`` defaults to
        DGP-A for simulate and DGP-C for rate.
    out_dir : str
        Directory for reports.
    threads : int or None
        Cap on numba worker threads; defaults to the HALMLE_THREADS variable
        or the available cores.
    """

    command: str = "fit"
    data: str = ""
    roles: str = ""
    outcome_kind: str = "auto"
    loss: str = "auto"
    max_degree: int | None = None
    knots: int = 10
    knot_strategy: str = "quantiles"
    spline_order: int = 0
    V: int = 5
    seed: int = 0
    grid_size: int = 30
    ratio: float = 1e-2
    patience: int = 5
    estimand: str = "tsm1"
    method: str = "tmle"
    tol: float | None = None
    undersmooth: bool = False
    tol_const: float = 1.0
    B: int = 200
    plateau: bool = False
    truncate: str = "0.01,0.99"
    dgp: str = ""
    n: int = 500
    replicates: int = 100
    n_grid: str = "200,500,1250,3000"
    out_dir: str = "halmle-out"
    threads: int | None = None

    # ------------------------------------------------------------------
    def spec(self) -> BasisSpec:
        return BasisSpec(max_degree=self.max_degree, knot_strategy=self.knot_strategy, n_knots=self.knots,
                         spline_order=self.spline_order)

    @property
    def bounds(self) -> tuple[float, float]:
        try:
            lo, hi = (float(v) for v in self.truncate.split(","))
        except ValueError:
            raise ConfigError("truncate", f"expected 'lo,hi', got {self.truncate!r}") from None
        if not 0 <= lo < hi <= 1:
            raise ConfigError("truncate", "bounds must satisfy 0 <= lo < hi <= 1")
        return lo, hi

    @property
    def contrast(self) -> dict:
        return {"tsm1": TREATED, "tsm0": CONTROL, "ate": ATE}[self.estimand]

    def parsed_roles(self) -> dict:
        out = {}
        for part in filter(None, (p.strip() for p in self.roles.split(";"))):
            if "=" not in part:
                raise ConfigError("roles", f"expected key=value, got {part!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            if k not in ("outcome", "treatment", "covariates"):
                raise ConfigError("roles", f"unknown role {k!r}")
            out[k] = v
        if not out.get("outcome"):
            raise ConfigError("outcome", "no outcome column declared in roles")
        if not out.get("covariates"):
            raise ConfigError("covariates", "no covariate columns declared in roles")
        roles = {"Y": out["outcome"], "W": [c.strip() for c in out["covariates"].split(",") if c.strip()]}
        if out.get("treatment"):
            roles["A"] = out["treatment"]
        return roles

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError("command", f"unknown command {self.command!r}")
        checks = [("V", self.V >= 2, "must be at least 2"), ("knots", self.knots >= 2, "must be at least 2"),
                  ("grid_size", self.grid_size >= 2, "must be at least 2"),
                  ("ratio", 0 < self.ratio < 1, "must lie in (0, 1)"),
                  ("B", self.B >= 2, "must be at least 2"), ("n", self.n >= 10, "must be at least 10"),
                  ("replicates", self.replicates >= 1, "must be at least 1"),
                  ("tol_const", self.tol_const > 0, "must be positive"),
                  ("estimand", self.estimand in ("tsm1", "tsm0", "ate"), "must be tsm1, tsm0 or ate"),
                  ("method", self.method in METHODS, f"must be one of {', '.join(METHODS)}"),
                  ("outcome_kind", self.outcome_kind in ("auto", BINARY, CONTINUOUS),
                   "must be auto, binary or continuous"),
                  ("loss", self.loss in ("auto", GAUSSIAN, BINOMIAL), "must be auto, gaussian or binomial"),
                  ("knot_strategy", self.knot_strategy in ("all", "quantiles"), "must be all or quantiles"),
                  ("threads", self.threads is None or self.threads >= 1, "must be at least 1")]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, msg)
        if self.max_degree is not None and self.max_degree < 1:
            raise ConfigError("max_degree", "must be at least 1")
        self.bounds
        if self.command in ("fit", "cv", "estimate", "bootstrap", "ctmle"):
            if not self.data:
                raise ConfigError("data", "no data file given")
            if not Path(self.data).is_file():
                raise ConfigError("data", f"file not found: {self.data}")
            self.parsed_roles()
        if self.command in ("simulate", "rate"):
            try:
                dgp = get_dgp(self.dgp_id)
            except KeyError:
                raise ConfigError("dgp", f"unknown data-generating process {self.dgp_id!r}") from None
            if self.command == "rate" and dgp.has_treatment:
                raise ConfigError("dgp", f"{dgp.id} has a treatment; the rate experiment needs a regression law")
        if self.command == "rate":
            grid = self.grid()
            if len(grid) < 3 or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError("n_grid", "needs at least 3 increasing sample sizes")

    @property
    def dgp_id(self) -> str:
        if self.dgp:
            return self.dgp
        return "DGP-C" if self.command == "rate" else "DGP-A"

    def grid(self) -> list[int]:
        try:
            return [int(v) for v in self.n_grid.split(",") if v.strip()]
        except ValueError:
            raise ConfigError("n_grid", f"expected comma-separated integers, got {self.n_grid!r}") from None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        # neither changes the results
        out.pop("threads")
        out.pop("out_dir")
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    """Convert a config-file or flag string to the field's type."""
    if not isinstance(value, str):
        return value
    text = value.strip()
    kind = str(_FIELDS[name].type)
    if "None" in kind and text.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(name, f"cannot parse {text!r} as {kind}") from None
    return text


def load_config(path) -> dict:
    """Read a key=value config file with sections; section names are ignored."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read(p)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            name = key.replace("-", "_")
            if name == "max_degree" and value.strip().lower() == "none":
                out[name] = None
                continue
            if name not in _FIELDS or name == "command":
                raise ConfigError(key, f"unknown config key in section [{section}]")
            out[name] = _coerce(name, value)
    return out


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="halmle", description="Highly adaptive lasso estimation and inference.")
    ap.add_argument("command", choices=COMMANDS)
    flags = [("--config", None), ("--data", None), ("--roles", None), ("--seed", "seed"), ("--threads", "threads"),
             ("--out-dir", "out_dir"), ("--method", "method"), ("--B", "B"), ("--V", "V"),
             ("--max-degree", "max_degree"), ("--knots", "knots"), ("--truncate", "truncate"),
             ("--tol-const", "tol_const"), ("--estimand", "estimand"), ("--tol", "tol"), ("--dgp", "dgp"),
             ("--n", "n"), ("--replicates", "replicates"), ("--n-grid", "n_grid"), ("--loss", "loss"),
             ("--outcome-kind", "outcome_kind"), ("--knot-strategy", "knot_strategy")]
    for flag, dest in flags:
        ap.add_argument(flag, dest=dest or flag[2:].replace("-", "_"), default=None)
    ap.add_argument("--undersmooth", dest="undersmooth", action="store_const", const=True, default=None)
    ap.add_argument("--plateau", dest="plateau", action="store_const", const=True, default=None)
    return ap


def build_config(argv) -> RunConfig:
    args = _parser().parse_args(argv)
    values = {}
    if args.config:
        values.update(load_config(args.config))
    for name, value in vars(args).items():
        if name in ("config", "command") or value is None:
            continue
        values[name] = _coerce(name, value)
    if values.get("threads") is None and os.environ.get(THREADS_ENV):
        values["threads"] = _coerce("threads", os.environ[THREADS_ENV])
    cfg = RunConfig(command=args.command, **values)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# helpers


def _load(cfg: RunConfig) -> Dataset:
    roles = cfg.parsed_roles()
    kind = cfg.outcome_kind
    if kind == "auto":
        probe = load_csv(cfg.data, roles, CONTINUOUS)
        kind = BINARY if np.all((probe.Y == 0) | (probe.Y == 1)) else CONTINUOUS
    return load_csv(cfg.data, roles, kind)


def _loss(cfg: RunConfig, ds: Dataset) -> LossFamily:
    if cfg.loss != "auto":
        return LossFamily(cfg.loss)
    return LossFamily(BINOMIAL if ds.outcome_kind == BINARY else GAUSSIAN)


def _need_treatment(ds: Dataset) -> None:
    if not ds.has_treatment:
        raise ConfigError("treatment", "this command needs a treatment column in roles")


def _write(out_dir: Path, name: str, payload) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    if isinstance(payload, str):
        text = payload
    else:
        text = json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n"
    path.write_text(text)
    return path


def _envelope(cfg: RunConfig, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": cfg.command, "config": cfg.to_dict(), **body}


def _table(report) -> str:
    lo, hi = report.ci
    rows = [("estimand", report.estimand), ("estimate", f"{report.psi:.6f}"), ("se", f"{report.se:.6f}"),
            ("95% CI", f"[{lo:.6f}, {hi:.6f}]"), ("|P_n D*|", f"{abs(report.score_mean):.3e}")]
    return "\n".join(f"{k:<10} {v}" for k, v in rows)


# --------------------------------------------------------------------------
# commands


def cmd_fit(cfg: RunConfig) -> int:
    ds = _load(cfg)
    loss = _loss(cfg, ds)
    res = cv_path(ds, cfg.spec(), loss, make_folds(ds, cfg.V, cfg.seed), cfg.grid_size, ratio=cfg.ratio,
                  patience=cfg.patience)
    fit = res.fit
    diag = score_diagnostics(fit, res.catalog, ds.Y, loss, seed=cfg.seed)
    _write(Path(cfg.out_dir), "fit.json", _envelope(cfg, n=ds.n, p=res.catalog.p, fit=fit.to_dict(),
                                                     basis=res.catalog.summary(), cv=res.report.to_dict(),
                                                     score_diagnostics=diag.to_dict()))
    print(f"n={ds.n} p={res.catalog.p} lambda={fit.lam:.6g} l1_norm={fit.l1_norm:.6g} "
          f"cv_risk={res.report.selected_risk:.6g}")
    return EXIT_OK


def cmd_cv(cfg: RunConfig) -> int:
    ds = _load(cfg)
    res = cv_path(ds, cfg.spec(), _loss(cfg, ds), make_folds(ds, cfg.V, cfg.seed), cfg.grid_size,
                  ratio=cfg.ratio, patience=cfg.patience)
    out = Path(cfg.out_dir)
    _write(out, "cv.json", _envelope(cfg, n=ds.n, p=res.catalog.p, cv=res.report.to_dict()))
    _write(out, "cv_risks.csv", res.report.to_csv())
    print(f"n={ds.n} p={res.catalog.p} selected={res.report.selected_id} "
          f"cv_risk={res.report.selected_risk:.6g}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    ds = _load(cfg)
    _need_treatment(ds)
    if cfg.method == "ctmle":
        return cmd_ctmle(cfg)
    folds = make_folds(ds, cfg.V, cfg.seed)
    contrast = cfg.contrast
    Q = fit_outcome(ds, cfg.spec(), folds, cfg.grid_size, cfg.ratio, cfg.patience)
    G = fit_propensity(ds, cfg.spec(), folds, bounds=cfg.bounds, grid_size=cfg.grid_size, ratio=cfg.ratio,
                       patience=cfg.patience)
    unmet = False
    if cfg.undersmooth:
        Q = undersmooth_outcome(Q, G, ds, contrast=contrast, const=cfg.tol_const)
        unmet = "criterion unmet" in Q.fit.flags
    if cfg.method == "plugin":
        rep = plugin_tsm(Q, ds, G, contrast=contrast)
    elif cfg.method == "ipw":
        rep = ipw_tsm(G, ds, contrast=contrast)
    elif cfg.method == "tmle":
        rep = tmle_update_tsm(Q, G, ds, cfg.tol, contrast=contrast)[1]
    else:
        rep = orthogonalized_tmle_update(Q, G, ds, cfg.tol, contrast=contrast)[1]
    body = rep.to_dict()
    body["undersmoothing"] = {"enabled": cfg.undersmooth, "criterion_met": not unmet}
    _write(Path(cfg.out_dir), "estimate.json", _envelope(cfg, report=body))
    print(_table(rep))
    return EXIT_UNMET if unmet else EXIT_OK


def cmd_bootstrap(cfg: RunConfig) -> int:
    ds = _load(cfg)
    folds = make_folds(ds, cfg.V, cfg.seed)
    if ds.has_treatment:
        Q = fit_outcome(ds, cfg.spec(), folds, cfg.grid_size, cfg.ratio, cfg.patience)
        feature = TreatmentMean(contrast=cfg.contrast)
    else:
        Q = cv_path(ds, cfg.spec(), _loss(cfg, ds), folds, cfg.grid_size, ratio=cfg.ratio, patience=cfg.patience)
        feature = MeanPrediction()
    if cfg.plateau:
        rep = plateau_select(Q, ds, feature, cfg.B, cfg.seed)
    else:
        rep = bootstrap_plugin(Q, ds, feature, cfg.B, cfg.seed)
    _write(Path(cfg.out_dir), "bootstrap.json", _envelope(cfg, report=rep.to_dict()))
    lo, hi = rep.ci_percentile
    print(f"estimate={rep.estimate:.6f} se={rep.se:.6f} percentile_ci=[{lo:.6f}, {hi:.6f}] B={rep.B} "
          f"failures={rep.failures}")
    return EXIT_OK


def cmd_ctmle(cfg: RunConfig) -> int:
    ds = _load(cfg)
    _need_treatment(ds)
    folds = make_folds(ds, cfg.V, cfg.seed)
    Q = fit_outcome(ds, cfg.spec(), folds, cfg.grid_size, cfg.ratio, cfg.patience)
    names = ds.covariate_names
    ladder = [fit_propensity(ds, cfg.spec(), folds, columns=(), bounds=cfg.bounds, label="intercept")]
    for k in range(1, ds.d + 1):
        ladder.append(fit_propensity(ds, cfg.spec(), folds, columns=tuple(range(k)), bounds=cfg.bounds,
                                     grid_size=cfg.grid_size, ratio=cfg.ratio, patience=cfg.patience,
                                     label="+".join(names[:k])))
    trace, rep = ctmle_select(Q, ladder, ds, folds, contrast=cfg.contrast, tol=cfg.tol)
    _write(Path(cfg.out_dir), "ctmle.json", _envelope(cfg, report=rep.to_dict(), trace=trace.to_list(),
                                                       candidates=trace.candidates, selected_k=trace.selected_k))
    print(_table(rep))
    return EXIT_OK


def _estimator_config(cfg: RunConfig) -> EstimatorConfig:
    return EstimatorConfig(method=cfg.method, n_knots=cfg.knots, knot_strategy=cfg.knot_strategy,
                           max_degree=cfg.max_degree, V=cfg.V, grid_size=cfg.grid_size, ratio=cfg.ratio,
                           patience=cfg.patience, bounds=cfg.bounds, undersmooth=cfg.undersmooth,
                           tol_const=cfg.tol_const, estimand=cfg.estimand)


def cmd_simulate(cfg: RunConfig) -> int:
    dgp = get_dgp(cfg.dgp_id)
    res = run_mc(dgp, _estimator_config(cfg), cfg.n, cfg.replicates, cfg.seed)
    out = Path(cfg.out_dir)
    _write(out, "simulate.csv", res.to_csv())
    summary = json.loads(res.to_json())
    _write(out, "simulate.json", _envelope(cfg, result=summary))
    agg = res.aggregates()
    print(f"dgp={dgp.id} n={cfg.n} replicates={cfg.replicates} bias={agg['bias']:.5f} "
          f"coverage={agg['coverage']:.3f}")
    return EXIT_OK


def cmd_rate(cfg: RunConfig) -> int:
    dgp = get_dgp(cfg.dgp_id)
    table = rate_experiment(dgp, cfg.grid(), cfg.replicates, cfg.seed)
    out = Path(cfg.out_dir)
    _write(out, "rate.csv", table.to_csv())
    _write(out, "rate.json", _envelope(cfg, result=table.to_dict()))
    print(f"dgp={dgp.id} slope={table.slope:.4f} strictly_decreasing={table.strictly_decreasing}")
    return EXIT_OK


HANDLERS = {"fit": cmd_fit, "cv": cmd_cv, "estimate": cmd_estimate, "bootstrap": cmd_bootstrap,
            "ctmle": cmd_ctmle, "simulate": cmd_simulate, "rate": cmd_rate}


def _set_threads(threads: int | None) -> None:
    import numba
    cap = numba.config.NUMBA_NUM_THREADS
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(max(1, min(cap, threads or cap)))


def main(argv=None) -> int:
    try:
        cfg = build_config(sys.argv[1:] if argv is None else argv)
        _set_threads(cfg.threads)
        return HANDLERS[cfg.command](cfg)
    except (ConfigError, DataError) as exc:
        print(f"halmle: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, EstimationError, BootstrapError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"halmle: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
