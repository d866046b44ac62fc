"""Command-line interface.

Subcommands: ``assign``, ``analyze``, ``dist``, ``simulate`` and
``enumerate``.  Settings come from an optional JSON ``--config`` file and
are overridden by flags; unknown config keys are rejected.  Machine output
is JSON or CSV at full float precision.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .asymptotics import AsymptoticModel, build_distribution, density_L, mc_quantile
from .criteria import ReM, criterion_from_config, thresholds_from_probability
from .errors import BudgetExhaustedError, ConfigError, RerandomizationError
from .inference import _jsonable, confidence_interval
from .population import design_from_table, read_table
from .sampler import default_max_draws, enumerate_exact, rerandomize
from .simulate import StudyConfig, run_r2_sweep, run_study
from .specialfn import SeededGenerator, gaussian_pdf, gaussian_quantile

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_BUDGET = 3

_CRITERION_KEYS = {"criterion", "p_a", "thresholds", "tiers", "columns", "split"}
ALLOWED_KEYS = {
    "assign": _CRITERION_KEYS | {"covariates", "n1", "seed", "max_draws", "out"},
    "analyze": _CRITERION_KEYS | {"data", "outcome", "treatment", "alpha", "mc_samples", "seed", "out"},
    "dist": {"r2", "K", "p_a", "a", "rho2", "tier_sizes", "thresholds", "xi", "grid", "vtt", "alpha",
             "mc_samples", "seed", "out"},
    "simulate": {"study", "targets", "out", "seed", "alpha", "mc_samples"},
    "enumerate": _CRITERION_KEYS | {"covariates", "n1", "keep", "out"},
}
_RESERVED_COLUMNS = {"id", "z"}


# ---------------------------------------------------------------------------
# config


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge the config file with flag overrides (flags win)."""
    cfg = _load_config(args.config)
    unknown = set(cfg) - ALLOWED_KEYS[command]
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    for key in ALLOWED_KEYS[command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _parse_tiers(text: str) -> list[list[str]]:
    """'a,b;c,d,e' -> [['a','b'], ['c','d','e']]"""
    return [[c.strip() for c in tier.split(",") if c.strip()] for tier in text.split(";")]


def _dumps(obj: Any) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _write(out: str | None, name: str, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(text)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _design(cfg: dict, table: dict, extra_excluded: Sequence[str] = ()):
    tiers = cfg.get("tiers")
    if isinstance(tiers, str):
        tiers = _parse_tiers(tiers)
    columns = cfg.get("columns")
    if isinstance(columns, str):
        columns = [c.strip() for c in columns.split(",")]
    exclude = set(_RESERVED_COLUMNS) | set(extra_excluded)
    return design_from_table(table, columns=columns, tiers=tiers, exclude=tuple(exclude))


def _criterion_cfg(cfg: dict) -> dict:
    out = {"criterion": cfg.get("criterion", "remt" if cfg.get("tiers") else "rem")}
    if cfg.get("p_a") is not None:
        out["p_a"] = float(cfg["p_a"])
    th = cfg.get("thresholds")
    if th is not None:
        out["thresholds"] = _parse_floats(th) if isinstance(th, str) else th
    return out


def _criterion(cfg: dict, design):
    ccfg = _criterion_cfg(cfg)
    split = cfg.get("split")
    if split is not None:
        ccfg["split"] = _parse_floats(split) if isinstance(split, str) else split
    if "p_a" not in ccfg and "thresholds" not in ccfg:
        ccfg["p_a"] = 1.0
    return criterion_from_config(ccfg, design)


def _ids(table: dict, n: int) -> list:
    if "id" in table:
        return [int(v) if float(v).is_integer() else v for v in table["id"]]
    return list(range(n))


# ---------------------------------------------------------------------------
# subcommands


def cmd_assign(cfg: dict) -> int:
    _require(cfg, "covariates", "n1")
    table = read_table(cfg["covariates"])
    design = _design(cfg, table)
    n1 = int(cfg["n1"])
    crit = _criterion(cfg, design)
    seed = int(cfg.get("seed", 0))
    max_draws = cfg.get("max_draws")
    max_draws = int(max_draws) if max_draws is not None else default_max_draws(crit, design)
    try:
        p_a = crit.acceptance_probability(design)
    except RerandomizationError:
        p_a = None
    diag: dict[str, Any] = {
        "criterion": crit.label,
        "n": design.n,
        "n1": n1,
        "seed": seed,
        "p_a": p_a,
        "thresholds": list(getattr(crit, "thresholds", (getattr(crit, "a", None),))),
        "max_draws": max_draws,
    }
    try:
        out = rerandomize(crit, design, n1, SeededGenerator(seed), max_draws)
    except BudgetExhaustedError as exc:
        diag.update(status="budget_exhausted", draws_used=exc.draws, acceptance_rate=exc.acceptance_rate)
        _write(cfg.get("out"), "diagnostics.json", _dumps(diag))
        sys.stderr.write(f"error: {exc} (observed acceptance rate {exc.acceptance_rate})\n")
        return EXIT_BUDGET
    ids = _ids(table, design.n)
    diag.update(
        status="accepted",
        draws_used=out.draws_used,
        empirical_acceptance=out.empirical_acceptance,
        M=out.diagnostics.M,
        M_t=list(out.diagnostics.M_t),
    )
    csv_text = _csv_text(["id", "z"], zip(ids, out.assignment.z.tolist()))
    if cfg.get("out") is None:
        sys.stdout.write(csv_text)
        sys.stderr.write(_dumps(diag))
    else:
        _write(cfg["out"], "assignment.csv", csv_text)
        _write(cfg["out"], "diagnostics.json", _dumps(diag))
    return EXIT_OK


def _table_text(report) -> str:
    rows = [
        ("estimate", report.tau_hat),
        ("variance", report.variance),
        ("lower", report.lower),
        ("upper", report.upper),
        ("V_tautau_hat", report.vtt_hat),
        ("R2_hat", report.r2_hat),
        ("neyman_lower", report.neyman.lower),
        ("neyman_upper", report.neyman.upper),
    ]
    if report.rho2_hat is not None:
        *tiers, rest = report.rho2_hat
        rows += [(f"rho2_hat[{t + 1}]", r) for t, r in enumerate(tiers)]
        rows.append(("rho2_hat[rest]", rest))
    width = max(len(k) for k, _ in rows)
    lines = [f"method: {report.method}  (alpha = {report.alpha})"]
    lines += [f"{k.ljust(width)}  {v:>10.4f}" for k, v in rows]
    return "\n".join(lines) + "\n"


def cmd_analyze(cfg: dict) -> int:
    _require(cfg, "data", "outcome")
    table = read_table(cfg["data"])
    treat = cfg.get("treatment", "z")
    outcome = cfg["outcome"]
    for col in (treat, outcome):
        if col not in table:
            raise ConfigError(f"column {col!r} not found in {cfg['data']}")
    design = _design(cfg, table, extra_excluded=(treat, outcome))
    crit_cfg = _criterion_cfg(cfg)
    crit = None if crit_cfg["criterion"] == "cre" else _criterion(cfg, design)
    report = confidence_interval(
        crit,
        table[outcome],
        table[treat].astype(np.int8),
        design,
        alpha=float(cfg.get("alpha", 0.05)),
        n_mc=int(cfg.get("mc_samples", 1_000_000)),
        seed=int(cfg.get("seed", 0)),
    )
    d = report.to_dict()
    if report.r2_hat == 0.0:
        d["note"] = "R2_hat is zero; the interval is the Gaussian interval built from V_tautau_hat"
    if cfg.get("out") is None:
        sys.stdout.write(_dumps(d))
        sys.stderr.write(_table_text(report))
    else:
        _write(cfg["out"], "report.json", _dumps(d))
        _write(cfg["out"], "report.txt", _table_text(report))
    return EXIT_OK


def _dist_model(cfg: dict) -> AsymptoticModel:
    vtt = float(cfg.get("vtt", 1.0))
    if cfg.get("tier_sizes") is not None:
        sizes = cfg["tier_sizes"]
        sizes = _parse_ints(sizes) if isinstance(sizes, str) else [int(s) for s in sizes]
        rho2 = cfg.get("rho2")
        _require(cfg, "rho2")
        rho2 = _parse_floats(rho2) if isinstance(rho2, str) else [float(r) for r in rho2]
        th = cfg.get("thresholds")
        if th is None:
            th = thresholds_from_probability(float(cfg.get("p_a", 0.001)), sizes)
        else:
            th = _parse_floats(th) if isinstance(th, str) else [float(a) for a in th]
        return AsymptoticModel.remt(vtt, rho2, sizes, th)
    K = int(cfg.get("K", 1))
    r2 = float(cfg.get("r2", 0.0))
    if cfg.get("a") is not None:
        a = float(cfg["a"])
    else:
        a = ReM.from_probability(float(cfg.get("p_a", 0.001)), K).a
    return AsymptoticModel.rem(vtt, r2, K, a)


def _rem_density(x: np.ndarray, model: AsymptoticModel) -> np.ndarray:
    """Density of sqrt(vtt) * Q for a single-tier model by quadrature over L."""
    k, a = model.dims[0], model.thresholds[0]
    r2 = model.rho2[0]
    s = math.sqrt(model.vtt)
    if r2 == 0 or math.isinf(a):
        return gaussian_pdf(x / s) / s
    half = math.sqrt(a)
    l = np.linspace(-half, half, 4001)
    pl = density_L(l, k, a)
    wl = np.full(l.size, l[1] - l[0])
    wl[[0, -1]] *= 0.5
    if r2 >= 1:
        # bounded support: the law is a rescaled L
        return density_L(x / s, k, a) / s
    sd = math.sqrt(1 - r2)
    u = (x[:, None] / s - math.sqrt(r2) * l[None, :]) / sd
    return (gaussian_pdf(u) * (pl * wl)[None, :]).sum(axis=1) / (sd * s)


def cmd_dist(cfg: dict) -> int:
    model = _dist_model(cfg)
    n_mc = int(cfg.get("mc_samples", 1_000_000))
    seed = int(cfg.get("seed", 0))
    gaussian = model.r2 == 0.0 or all(math.isinf(a) for a in model.thresholds)
    d = build_distribution(model, n_mc, seed=seed)
    xis = cfg.get("xi", [0.9, 0.95, 0.975, 0.99, 0.995])
    xis = _parse_floats(xis) if isinstance(xis, str) else [float(x) for x in xis]
    params = {
        "vtt": model.vtt,
        "rho2": ";".join(repr(r) for r in model.rho2),
        "dims": ";".join(str(k) for k in model.dims),
        "thresholds": ";".join(repr(a) for a in model.thresholds),
    }
    qrows = []
    for xi in xis:
        if gaussian:
            q, se = gaussian_quantile(xi) * math.sqrt(model.vtt), 0.0
        else:
            q, se = mc_quantile(d, xi, with_se=True)
        qrows.append([xi, float(q), float(se), *params.values()])
    quant = _csv_text(["xi", "nu", "se", *params], qrows)

    grid_n = int(cfg.get("grid", 201))
    span = 4.5 * math.sqrt(model.vtt)
    x = np.linspace(-span, span, grid_n)
    if len(model.dims) == 1:
        dens = _rem_density(x, model)
    else:
        # multi-tier: histogram estimate on the same grid
        step = x[1] - x[0]
        edges = np.append(x - step / 2, x[-1] + step / 2)
        dens, _ = np.histogram(d.samples * d.scale, bins=edges, density=True)
    drows = [[float(xi), float(di), *params.values()] for xi, di in zip(x, dens)]
    dens_text = _csv_text(["x", "density", *params], drows)
    if cfg.get("out") is None:
        sys.stdout.write(quant)
    else:
        _write(cfg["out"], "quantiles.csv", quant)
        _write(cfg["out"], "density.csv", dens_text)
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    study = dict(cfg.get("study", {}))
    for key, field_name in (("seed", "seed"), ("alpha", "alpha"), ("mc_samples", "n_mc")):
        if cfg.get(key) is not None:
            study[field_name] = cfg[key]
    scfg = StudyConfig.from_dict(study)
    targets = cfg.get("targets")
    try:
        if targets:
            targets = _parse_floats(targets) if isinstance(targets, str) else targets
            reports = run_r2_sweep(scfg, targets)
        else:
            reports = [run_study(scfg)]
    except BudgetExhaustedError as exc:
        partial = getattr(exc, "partial_report", None)
        body = {"status": "budget_exhausted", "replication": getattr(exc, "replication", None),
                "acceptance_rate": exc.acceptance_rate,
                "partial": partial.to_dict() if partial is not None else None}
        _write(cfg.get("out"), "study.json", _dumps(body))
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_BUDGET
    summary = [r.to_dict() for r in reports]
    rows = []
    header = None
    for i, r in enumerate(reports):
        for row in r.rows:
            row = {"study": i, **row}
            header = header or list(row)
            rows.append([row[h] for h in header])
    csv_text = _csv_text(header or ["study"], rows)
    body = _dumps(summary if targets else summary[0])
    if cfg.get("out") is None:
        sys.stdout.write(body)
    else:
        _write(cfg["out"], "study.json", body)
        _write(cfg["out"], "replications.csv", csv_text)
    return EXIT_OK


def cmd_enumerate(cfg: dict) -> int:
    _require(cfg, "covariates", "n1")
    table = read_table(cfg["covariates"])
    design = _design(cfg, table)
    crit = _criterion(cfg, design)
    keep = int(cfg.get("keep", 0))
    rep = enumerate_exact(crit, design, int(cfg["n1"]), keep=keep)
    d = {
        "criterion": crit.label,
        "total": rep.total,
        "accepted_count": rep.accepted_count,
        "exact_acceptance_prob": rep.exact_acceptance_prob,
        "mean_tau_x": rep.mean_tau_x,
        "cov_tau_x": rep.cov_tau_x,
    }
    if keep:
        d["accepted"] = rep.accepted.tolist()
    _write(cfg.get("out"), "enumeration.json", _dumps(d))
    return EXIT_OK


COMMANDS = {
    "assign": cmd_assign,
    "analyze": cmd_analyze,
    "dist": cmd_dist,
    "simulate": cmd_simulate,
    "enumerate": cmd_enumerate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rerandomize", description="Rerandomized experiment design and analysis")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file; flags override its values")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--alpha", type=float)
    shared.add_argument("--mc-samples", dest="mc_samples", type=int)
    shared.add_argument("--out", help="output directory (default: stdout)")

    crit = argparse.ArgumentParser(add_help=False)
    crit.add_argument("--criterion", choices=["rem", "remt", "cre"])
    crit.add_argument("--p-a", dest="p_a", type=float)
    crit.add_argument("--thresholds", help="comma-separated thresholds")
    crit.add_argument("--tiers", help="tiers as 'a,b;c,d'")
    crit.add_argument("--columns", help="comma-separated covariate columns")
    crit.add_argument("--split", help="per-tier acceptance probabilities")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("assign", parents=[shared, crit], help="draw an acceptable assignment")
    p.add_argument("--covariates")
    p.add_argument("--n1", type=int)
    p.add_argument("--max-draws", dest="max_draws", type=int)

    p = sub.add_parser("analyze", parents=[shared, crit], help="estimate and build intervals")
    p.add_argument("--data")
    p.add_argument("--outcome")
    p.add_argument("--treatment")

    p = sub.add_parser("dist", parents=[shared], help="quantiles and density of the limit law")
    p.add_argument("--r2", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--p-a", dest="p_a", type=float)
    p.add_argument("--a", type=float)
    p.add_argument("--rho2")
    p.add_argument("--tier-sizes", dest="tier_sizes")
    p.add_argument("--thresholds")
    p.add_argument("--xi")
    p.add_argument("--grid", type=int)
    p.add_argument("--vtt", type=float)

    p = sub.add_parser("simulate", parents=[shared], help="run a replication study")
    p.add_argument("--targets", help="comma-separated R^2 targets for a sweep")

    p = sub.add_parser("enumerate", parents=[shared, crit], help="exact enumeration for small designs")
    p.add_argument("--covariates")
    p.add_argument("--n1", type=int)
    p.add_argument("--keep", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_USAGE
    except (RerandomizationError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
