"""Command-line surface: analyze, simulate, calibrate.

Configuration precedence is flags over config file over defaults, and
every run writes a self-contained JSON report whose echoed config can be
fed back through ``--config`` to reproduce the result payload.  Errors
exit nonzero with a single machine-parsable line on stderr:
``RELAXMT_ERROR <CODE>: detail``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DELTA_INFINITE,
    DELTA_VALUE,
    calibrate_relaxation,
    mc_expected_fp,
)
from .errors import GridFileError, InputError, RelaxError
from .grouping import SCREEN_BONFERRONI, SCREEN_NMCP, load_decomposition_file
from .pipeline import (
    AnalysisResult,
    MethodSpec,
    align_decomposition,
    load_data_matrix,
    run_method,
    two_sample_scores,
)
from .simulation import (
    load_grid_file,
    run_experiment_grid,
    write_metrics_csv,
)
from .stats import one_sided_pvalue

_BASE_TOKENS = {"bonf": "bonferroni", "bonferroni": "bonferroni",
                "lsu": "lsu", "ssu": "scaled", "scaled": "scaled"}
_RULE_TOKENS = {"nmcp": SCREEN_NMCP, "bonf": SCREEN_BONFERRONI,
                "bonferroni": SCREEN_BONFERRONI}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _effective_workers(value) -> int:
    env = os.environ.get("RELAXMT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"RELAXMT_THREADS must be an integer, got {env!r}")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    raise TypeError(f"not serializable: {type(obj)!r}")


def _write_report(out_dir: Path, command: str, config: dict, digests: dict,
                  results: dict, started: float) -> Path:
    report = {
        "tool": "relaxmt",
        "version": __version__,
        "command": command,
        "config": config,
        "input_digests": digests,
        "results": results,
        "wall_clock_s": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True,
                               default=_json_default) + "\n", encoding="utf-8")
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config file {p}: {exc}")
    if isinstance(payload, dict) and isinstance(payload.get("config"), dict):
        payload = payload["config"]     # accept a previous run's report
    if not isinstance(payload, dict):
        raise InputError(f"config file {p} must hold a JSON object")
    return payload


def _merge_config(args: argparse.Namespace, file_config: dict,
                  defaults: dict) -> dict:
    """Flags beat config file beats defaults; unknown file keys rejected."""
    unknown = set(file_config) - set(defaults)
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(file_config)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


# ---------------------------------------------------------------- analyze

_ANALYZE_DEFAULTS = {
    "data": None, "decomposition": None, "method": "awa", "base": "bonf",
    "gamma": 0.5, "rbar": None, "alpha": 0.05, "out": "relaxmt-out",
    "seed": 0, "transform": "normal", "delta_mode": "inf",
    "delta_value": None, "m1_guess": None, "subsample": None,
    "iterations": 500,
}


def _parse_methods(token: str) -> list[str]:
    methods = [t.strip().lower() for t in str(token).split(",") if t.strip()]
    if not methods:
        raise InputError("no methods given")
    for m in methods:
        if m not in ("awa", "rmnc", "rmwc", "rmio"):
            raise InputError(f"unknown method {m!r}")
    return methods


def _method_spec(family: str, config: dict) -> MethodSpec:
    base = _BASE_TOKENS.get(str(config["base"]).lower())
    if base is None:
        raise InputError(f"unknown base procedure {config['base']!r}")
    delta_mode = {"inf": DELTA_INFINITE, "est": DELTA_VALUE}.get(
        str(config["delta_mode"]).lower())
    if delta_mode is None:
        raise InputError(f"delta mode must be 'inf' or 'est', got {config['delta_mode']!r}")
    return MethodSpec(
        family=family, base=base, alpha=float(config["alpha"]),
        rbar=None if config["rbar"] is None else float(config["rbar"]),
        gamma=float(config["gamma"]), delta_mode=delta_mode,
        delta_value=(None if config["delta_value"] is None
                     else float(config["delta_value"])),
        m1_guess=(None if config["m1_guess"] is None else int(config["m1_guess"])))


def _decisions_csv(path: Path, data_atoms, mapping, result: AnalysisResult,
                   scores) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("atom_id,subset_id,score,p_value,modified_p,in_positive_subset,rejected\n")
        for j, atom in enumerate(data_atoms):
            mod = "" if result.modified_p is None else repr(float(result.modified_p[j]))
            pos = ("" if result.screening is None
                   else str(bool(result.screening.atom_in_positive[j])).lower())
            fh.write(f"{atom},{mapping[atom]},{float(scores[j])!r},"
                     f"{float(result.pvalues[j])!r},"
                     f"{mod},{pos},{str(bool(result.decisions[j])).lower()}\n")


def _analysis_payload(result: AnalysisResult) -> dict:
    payload = {
        "family": result.spec.family,
        "base": result.spec.base,
        "alpha": result.spec.alpha,
        "n_rejected": result.n_rejected,
        "rejected_atoms": result.rejected_indices().tolist(),
        "warnings": list(result.warnings),
    }
    if result.coefficients is not None:
        payload.update({
            "r": result.coefficients.r,
            "rbar": result.coefficients.rbar,
            "c": result.coefficients.c,
            "cbar": (None if math.isinf(result.coefficients.cbar)
                     else result.coefficients.cbar),
            "r_calibrated": result.r_calibrated,
            "threshold_used": result.screening.threshold_used,
            "n_positive_subsets": result.screening.n_positive,
            "m_plus_atoms": result.screening.m_plus_atoms,
            "m_minus_atoms": result.screening.m_minus_atoms,
            "weight_sum": result.weight_sum,
            "weight_limit": result.weight_limit,
        })
    return payload


def _cmd_analyze(args: argparse.Namespace) -> int:
    started = time.time()
    config = _merge_config(args, _load_config_file(args.config), _ANALYZE_DEFAULTS)
    if args.print_config:
        print(json.dumps(config, indent=2, sort_keys=True, default=_json_default))
        return 0
    if not config["data"] or not config["decomposition"]:
        raise InputError("analyze needs --data and --decomposition")
    data_path = Path(config["data"])
    dec_path = Path(config["decomposition"])
    data = load_data_matrix(data_path)
    mapping = load_decomposition_file(dec_path)
    decomposition = align_decomposition(data, mapping)

    score_result = two_sample_scores(data, transform=config["transform"])
    if score_result.flagged_atoms.size:
        flagged = [data.atom_ids[j] for j in score_result.flagged_atoms]
        print(f"warning: zero-variance columns scored 0: {flagged}", file=sys.stderr)
    pvalues = np.asarray(one_sided_pvalue(score_result.scores), dtype=float)

    methods = _parse_methods(config["method"])
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, AnalysisResult] = {}
    for family in methods:
        spec = _method_spec(family, config)
        res = run_method(score_result.scores, pvalues, decomposition, spec)
        results[family] = res
        _decisions_csv(out_dir / f"decisions_{family}.csv", data.atom_ids,
                       mapping, res, score_result.scores)

    payload = {family: _analysis_payload(res) for family, res in results.items()}
    if len(methods) > 1:
        inter = {}
        for i, a in enumerate(methods):
            for b in methods[i + 1:]:
                common = int((results[a].decisions & results[b].decisions).sum())
                inter[f"{a}&{b}"] = common
        payload["common_rejections"] = inter
    if config["subsample"]:
        payload["subsample_study"] = _subsample_study(
            data, mapping, methods, config)

    report_path = _write_report(
        out_dir, "analyze", config,
        {str(data_path): _sha256(data_path), str(dec_path): _sha256(dec_path)},
        payload, started)
    print(f"report: {report_path}")
    for family in methods:
        print(f"{family}: {results[family].n_rejected} rejections")
    return 0


def _subsample_study(data, mapping, methods: list[str], config: dict) -> dict:
    """Repeatedly subsample rows per group, rerun, and average rejections."""
    k = int(config["subsample"])
    iters = int(config["iterations"])
    if k < 2:
        raise InputError("subsample size must be >= 2 rows per group")
    if k > min(data.group_x.shape[0], data.group_y.shape[0]):
        raise InputError("subsample size exceeds a group's row count")
    from .pipeline import DataMatrix
    rng = np.random.default_rng(np.random.SeedSequence(int(config["seed"])))
    full_awa = None
    counts = {m: [] for m in methods}
    common_with_full = {m: [] for m in methods}
    spec_by_m = {m: _method_spec(m, config) for m in methods}
    full_scores = two_sample_scores(data, transform=config["transform"])
    full_p = np.asarray(one_sided_pvalue(full_scores.scores), dtype=float)
    decomposition = align_decomposition(data, mapping)
    full_awa = run_method(full_scores.scores, full_p, decomposition,
                          _method_spec("awa", config)).decisions
    for _ in range(iters):
        ix = rng.choice(data.group_x.shape[0], size=k, replace=False)
        iy = rng.choice(data.group_y.shape[0], size=k, replace=False)
        sub = DataMatrix(group_x=data.group_x[ix], group_y=data.group_y[iy],
                         atom_ids=data.atom_ids)
        sr = two_sample_scores(sub, transform=config["transform"])
        pv = np.asarray(one_sided_pvalue(sr.scores), dtype=float)
        for m in methods:
            res = run_method(sr.scores, pv, decomposition, spec_by_m[m])
            counts[m].append(res.n_rejected)
            common_with_full[m].append(int((res.decisions & full_awa).sum()))
    return {
        "rows_per_group": k,
        "iterations": iters,
        "mean_rejections": {m: float(np.mean(v)) for m, v in counts.items()},
        "mean_common_with_full_awa": {m: float(np.mean(v))
                                      for m, v in common_with_full.items()},
    }


# ---------------------------------------------------------------- simulate

_SIMULATE_DEFAULTS = {
    "grid": None, "replicates": 100, "seed": 0, "out": "relaxmt-out",
    "plots": False, "workers": None,
}


def _resolve_grid_path(token: str) -> Path:
    if str(token).startswith("builtin:"):
        name = str(token).split(":", 1)[1]
        path = Path(__file__).parent / "grids" / f"{name}.json"
        if not path.exists():
            builtins = sorted(p.stem for p in (Path(__file__).parent / "grids").glob("*.json"))
            raise GridFileError(f"unknown builtin grid {name!r}; available: {builtins}")
        return path
    return Path(token)


def _cmd_simulate(args: argparse.Namespace) -> int:
    started = time.time()
    config = _merge_config(args, _load_config_file(args.config), _SIMULATE_DEFAULTS)
    if args.print_config:
        print(json.dumps(config, indent=2, sort_keys=True, default=_json_default))
        return 0
    if not config["grid"]:
        raise InputError("simulate needs --grid")
    grid_path = _resolve_grid_path(config["grid"])
    cells = load_grid_file(grid_path)
    workers = _effective_workers(config["workers"])
    rows = run_experiment_grid(cells, int(config["replicates"]),
                               int(config["seed"]), workers=workers)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(rows, csv_path)
    results = {"metrics_csv": str(csv_path), "cells": len(rows)}
    if config["plots"]:
        results["plots"] = _power_ratio_plots(rows, out_dir / "plots")
    report_path = _write_report(out_dir, "simulate", config,
                                {str(grid_path): _sha256(grid_path)},
                                results, started)
    print(f"report: {report_path}")
    print(f"metrics: {csv_path} ({len(rows)} rows)")
    return 0


def _power_ratio_plots(rows: list[dict], plot_dir: Path) -> list[str]:
    """One SVG per scenario group: power ratio vs effect size per method."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def group_key(row):
        keys = ("kind", "M", "m", "m1", "pi", "size_mode", "side", "theta",
                "effect_fraction", "block", "base")
        return tuple(str(row[k]) for k in keys)

    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(group_key(row), []).append(row)
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for gi, (key, grows) in enumerate(sorted(groups.items())):
        methods = sorted({r["method"] for r in grows} - {"awa"})
        if not methods:
            continue
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        for method in methods:
            pts = sorted(((float(r["delta"]), r["power_ratio_vs_awa"])
                          for r in grows if r["method"] == method
                          and r["power_ratio_vs_awa"] != ""
                          and not (isinstance(r["power_ratio_vs_awa"], float)
                                   and math.isnan(r["power_ratio_vs_awa"]))),
                         key=lambda t: t[0])
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=method)
        ax.axhline(1.0, color="gray", lw=0.8, ls=":")
        ax.set_xlabel("effect size")
        ax.set_ylabel("power ratio vs atom-wise")
        ax.set_title(" ".join(f"{k}" for k in key if k not in ("", "subsets")),
                     fontsize=7)
        ax.legend(fontsize=7)
        fig.tight_layout()
        out = plot_dir / f"power_ratio_{gi:02d}.svg"
        fig.savefig(out)
        plt.close(fig)
        written.append(str(out))
    return written


# ---------------------------------------------------------------- calibrate

_CALIBRATE_DEFAULTS = {
    "m": None, "s": None, "alpha": 0.05, "rule": "bonf", "rbar": 0.0,
    "delta": "inf", "delta_value": None, "validate": False,
    "validate_replicates": 100000, "seed": 0, "out": None,
}


def _cmd_calibrate(args: argparse.Namespace) -> int:
    started = time.time()
    config = _merge_config(args, _load_config_file(args.config), _CALIBRATE_DEFAULTS)
    if args.print_config:
        print(json.dumps(config, indent=2, sort_keys=True, default=_json_default))
        return 0
    if config["m"] is None or config["s"] is None:
        raise InputError("calibrate needs --m and --s")
    rule = _RULE_TOKENS.get(str(config["rule"]).lower())
    if rule is None:
        raise InputError(f"rule must be nmcp or bonf, got {config['rule']!r}")
    delta_token = str(config["delta"]).lower()
    if delta_token == "inf":
        mode, value = DELTA_INFINITE, None
    elif delta_token == "est":
        if config["delta_value"] is None:
            raise InputError(
                "--delta est needs --delta-value (use 'analyze' to estimate "
                "the shift from scores, or pass the value directly)")
        mode, value = DELTA_VALUE, float(config["delta_value"])
    else:
        raise InputError(f"delta must be 'inf' or 'est', got {config['delta']!r}")

    result = calibrate_relaxation(
        m=int(config["m"]), s=int(config["s"]), alpha=float(config["alpha"]),
        rule=rule, rbar=float(config["rbar"]), delta_mode=mode, delta_value=value)

    payload = {
        "r": result.r,
        "rbar": result.coefficients.rbar,
        "c": result.coefficients.c,
        "cbar": (None if math.isinf(result.coefficients.cbar)
                 else result.coefficients.cbar),
        "u": result.u,
        "m": result.m, "s": result.s, "alpha": result.alpha,
        "delta_mode": result.delta_mode, "delta_value": result.delta_value,
        "worst_m0": result.worst_m0, "worst_pi": result.worst_pi,
        "worst_expected_fp": result.worst_value,
        "bracket_high": result.bracket_high,
        "note": result.note,
    }
    if config["validate"]:
        rng = np.random.default_rng(np.random.SeedSequence(int(config["seed"])))
        mean, se = mc_expected_fp(
            m=result.m, m0=result.worst_m0, s=result.s, pi=result.worst_pi,
            delta=math.inf, u=result.u, c=result.coefficients.c,
            cbar=result.coefficients.cbar,
            replicates=int(config["validate_replicates"]), rng=rng)
        payload["validation"] = {
            "mc_expected_fp": mean, "mc_se": se,
            "replicates": int(config["validate_replicates"]),
            "within_3se_of_alpha": bool(abs(mean - result.alpha) <= 3 * se),
        }
    print(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    if config["out"]:
        _write_report(Path(config["out"]), "calibrate", config, {}, payload, started)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relaxmt",
        description="Two-step screening-and-relaxation multiple testing")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="two-group analysis of a data matrix")
    pa.add_argument("--data")
    pa.add_argument("--decomposition")
    pa.add_argument("--method", help="comma list of awa,rmnc,rmwc,rmio")
    pa.add_argument("--base", choices=sorted(_BASE_TOKENS))
    pa.add_argument("--gamma", type=float)
    pa.add_argument("--rbar", type=float)
    pa.add_argument("--alpha", type=float)
    pa.add_argument("--out")
    pa.add_argument("--seed", type=int)
    pa.add_argument("--transform", choices=("normal", "student"))
    pa.add_argument("--delta-mode", dest="delta_mode", choices=("inf", "est"))
    pa.add_argument("--delta-value", dest="delta_value", type=float)
    pa.add_argument("--m1-guess", dest="m1_guess", type=int)
    pa.add_argument("--subsample", type=int,
                    help="rows per group for the resampling study")
    pa.add_argument("--iterations", type=int)
    pa.add_argument("--config")
    pa.add_argument("--print-config", action="store_true")
    pa.set_defaults(func=_cmd_analyze)

    ps = sub.add_parser("simulate", help="run an experiment grid")
    ps.add_argument("--grid", help="grid JSON path or builtin:<name>")
    ps.add_argument("--replicates", type=int)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--out")
    ps.add_argument("--plots", action="store_true", default=None)
    ps.add_argument("--workers", type=int)
    ps.add_argument("--config")
    ps.add_argument("--print-config", action="store_true")
    ps.set_defaults(func=_cmd_simulate)

    pc = sub.add_parser("calibrate", help="compute the relaxation coefficient")
    pc.add_argument("--m", type=int)
    pc.add_argument("--s", type=int)
    pc.add_argument("--alpha", type=float)
    pc.add_argument("--rule", choices=sorted(_RULE_TOKENS))
    pc.add_argument("--rbar", type=float)
    pc.add_argument("--delta", choices=("inf", "est"))
    pc.add_argument("--delta-value", dest="delta_value", type=float)
    pc.add_argument("--validate", action="store_true", default=None)
    pc.add_argument("--validate-replicates", dest="validate_replicates", type=int)
    pc.add_argument("--seed", type=int)
    pc.add_argument("--out")
    pc.add_argument("--config")
    pc.add_argument("--print-config", action="store_true")
    pc.set_defaults(func=_cmd_calibrate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RelaxError as exc:
        print(f"RELAXMT_ERROR {exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
