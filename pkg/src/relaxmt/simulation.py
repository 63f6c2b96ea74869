"""Scenario generators and Monte Carlo estimators.

Two families of experiments:

* partially affected subsets: M scores split into m subsets (random or
  equal sizes), m1 of which carry shifted atoms with average affected
  fraction pi;
* correlated 2-D fields: a stationary Gaussian field with covariance
  ``exp(-D / theta)`` on an N x N grid, whose largest values receive the
  effect before white noise is added, analyzed under a square-block
  decomposition.

Every replicate owns an independent generator spawned from the cell's
seed sequence, so results are identical regardless of execution order or
worker count, and each cell pairs the method under study with the
atom-wise baseline on the same data, which is what makes the power-ratio
estimates well conditioned.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridFileError, InputError
from .grouping import Decomposition, square_decomposition
from .pipeline import FAMILY_AWA, AnalysisResult, MethodSpec, run_awa, run_two_step
from .stats import one_sided_pvalue

SIZE_RANDOM = "random"
SIZE_EQUAL = "equal"


@dataclass(frozen=True)
class SubsetScenario:
    """Partially-affected-subsets experiment configuration."""

    n_atoms: int
    n_subsets: int
    n_affected_subsets: int
    pi: float
    delta: float
    size_mode: str = SIZE_RANDOM

    def __post_init__(self):
        if self.n_subsets < 1 or self.n_atoms < self.n_subsets:
            raise InputError("need 1 <= m <= M")
        if not 0 <= self.n_affected_subsets <= self.n_subsets:
            raise InputError("need 0 <= m1 <= m")
        if not 0.0 < self.pi <= 1.0 and self.n_affected_subsets > 0:
            raise InputError("pi must lie in (0, 1] when m1 > 0")
        if self.delta < 0:
            raise InputError("delta must be nonnegative")
        if self.size_mode not in (SIZE_RANDOM, SIZE_EQUAL):
            raise InputError(f"unknown size mode {self.size_mode!r}")
        if self.size_mode == SIZE_EQUAL and self.n_atoms % self.n_subsets:
            raise InputError("equal sizes need m to divide M")

    def describe(self) -> dict:
        return {"kind": "subsets", "M": self.n_atoms, "m": self.n_subsets,
                "m1": self.n_affected_subsets, "pi": self.pi,
                "delta": self.delta, "size_mode": self.size_mode}


@dataclass(frozen=True)
class FieldScenario:
    """Correlated 2-D field experiment configuration."""

    side: int
    theta: float
    effect_fraction: float
    delta: float
    block: int

    def __post_init__(self):
        if self.side < 2:
            raise InputError("grid side must be >= 2")
        if self.theta <= 0:
            raise InputError("theta must be positive")
        if not 0.0 <= self.effect_fraction < 1.0:
            raise InputError("effect fraction must lie in [0, 1)")
        if self.delta < 0:
            raise InputError("delta must be nonnegative")
        if self.side % self.block:
            raise InputError("block must divide the grid side")

    def describe(self) -> dict:
        return {"kind": "field", "M": self.side * self.side, "side": self.side,
                "theta": self.theta, "effect_fraction": self.effect_fraction,
                "delta": self.delta, "block": self.block}


Scenario = SubsetScenario | FieldScenario


def random_composition(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random composition of ``total`` into ``parts`` sizes >= 1."""
    if parts < 1 or total < parts:
        raise InputError("need 1 <= parts <= total")
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(total - 1, size=parts - 1, replace=False)) + 1
    return np.diff(np.concatenate(([0], cuts, [total])))


def gen_subset_scenario(sc: SubsetScenario, rng: np.random.Generator
                        ) -> tuple[np.ndarray, Decomposition, np.ndarray]:
    """Draw scores, a decomposition, and the planted-truth vector.

    Each affected subset receives ``floor(pi * s + 0.5)`` shifted atoms so
    the average affected fraction is pi.  With delta = 0 the planted atoms
    are still marked but are exchangeable with the nulls.
    """
    if sc.size_mode == SIZE_EQUAL:
        sizes = np.full(sc.n_subsets, sc.n_atoms // sc.n_subsets)
    else:
        sizes = random_composition(sc.n_atoms, sc.n_subsets, rng)
    assign = np.repeat(np.arange(sc.n_subsets), sizes)
    decomposition = Decomposition(subset_of_atom=assign, sizes=np.empty(0, dtype=int))

    truth = np.zeros(sc.n_atoms, dtype=bool)
    if sc.n_affected_subsets:
        affected = rng.choice(sc.n_subsets, size=sc.n_affected_subsets, replace=False)
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        for i in affected:
            count = min(int(math.floor(sc.pi * sizes[i] + 0.5)), int(sizes[i]))
            if count:
                chosen = rng.choice(sizes[i], size=count, replace=False)
                truth[offsets[i] + chosen] = True

    scores = rng.standard_normal(sc.n_atoms)
    scores[truth] += sc.delta
    return scores, decomposition, truth


# cached circulant-embedding spectra keyed by (embedding size, side, theta)
_EMBED_CACHE: dict[tuple[int, float], tuple[int, np.ndarray]] = {}
_DENSE_CACHE: dict[tuple[int, float], np.ndarray] = {}

#: eigenvalues of the torus covariance may dip this far (relative) below
#: zero before the embedding is declared non positive definite.
_EMBED_EIG_TOL = 1e-8

DENSE_SIDE_LIMIT = 48


def _torus_spectrum(side: int, theta: float) -> tuple[int, np.ndarray]:
    """Eigenvalues (2-D FFT) of exp(-D/theta) embedded on a torus.

    Starts from a 2N x 2N embedding and doubles once if the spectrum goes
    materially negative; tiny negative values are clipped.
    """
    key = (side, float(theta))
    cached = _EMBED_CACHE.get(key)
    if cached is not None:
        return cached
    n_embed = 2 * side
    for _ in range(3):
        idx = np.arange(n_embed)
        wrapped = np.minimum(idx, n_embed - idx)
        dist = np.hypot(wrapped[:, None], wrapped[None, :])
        lam = np.fft.fft2(np.exp(-dist / theta)).real
        if lam.min() >= -_EMBED_EIG_TOL * lam.max():
            lam = np.clip(lam, 0.0, None)
            _EMBED_CACHE[key] = (n_embed, lam)
            return n_embed, lam
        n_embed *= 2
    raise InputError(
        f"circulant embedding not positive definite for side={side}, "
        f"theta={theta}; use the dense generator (side <= {DENSE_SIDE_LIMIT})")


def gen_correlated_field(side: int, theta: float, rng: np.random.Generator,
                         method: str = "fft") -> np.ndarray:
    """Zero-mean stationary Gaussian field with covariance exp(-D/theta).

    ``method='fft'`` synthesizes through circulant embedding on a torus;
    ``method='dense'`` factorizes the full covariance matrix (exact, kept
    as the validation oracle, limited to small grids).
    """
    if side < 2:
        raise InputError("grid side must be >= 2")
    if theta <= 0:
        raise InputError("theta must be positive")
    if method == "dense":
        return _gen_field_dense(side, theta, rng)
    if method != "fft":
        raise InputError(f"unknown field method {method!r}")
    try:
        n_embed, lam = _torus_spectrum(side, theta)
    except InputError:
        if side <= DENSE_SIDE_LIMIT:
            return _gen_field_dense(side, theta, rng)
        raise
    noise = rng.standard_normal((n_embed, n_embed)) + 1j * rng.standard_normal((n_embed, n_embed))
    spectrum = np.sqrt(lam) * noise
    field = np.fft.fft2(spectrum) / math.sqrt(n_embed * n_embed)
    return field.real[:side, :side].copy()


def _gen_field_dense(side: int, theta: float, rng: np.random.Generator) -> np.ndarray:
    if side > DENSE_SIDE_LIMIT:
        raise InputError(
            f"dense field generation is limited to side <= {DENSE_SIDE_LIMIT}")
    key = (side, float(theta))
    root = _DENSE_CACHE.get(key)
    if root is None:
        rows, cols = np.divmod(np.arange(side * side), side)
        dist = np.hypot(rows[:, None] - rows[None, :], cols[:, None] - cols[None, :])
        cov = np.exp(-dist / theta)
        vals, vecs = np.linalg.eigh(cov)
        vals = np.clip(vals, 0.0, None)
        root = vecs * np.sqrt(vals)
        _DENSE_CACHE[key] = root
    draw = root @ rng.standard_normal(side * side)
    return draw.reshape(side, side)


def plant_effect(field: np.ndarray, effect_fraction: float, delta: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Turn a field into scores: the top fraction of pixels gets the effect.

    The ``round(fraction * M)`` largest field values become delta, the rest
    zero, and unit white noise is added.  The returned truth vector marks
    the top set.
    """
    if not 0.0 <= effect_fraction < 1.0:
        raise InputError("effect fraction must lie in [0, 1)")
    flat = np.asarray(field, dtype=float).ravel()
    m_total = flat.size
    m1 = int(math.floor(effect_fraction * m_total + 0.5))
    truth = np.zeros(m_total, dtype=bool)
    if m1:
        truth[np.argsort(flat, kind="stable")[m_total - m1:]] = True
    scores = np.where(truth, delta, 0.0) + rng.standard_normal(m_total)
    return scores, truth


@dataclass(frozen=True)
class MetricsRecord:
    """Replicate-averaged metrics with Monte Carlo standard errors."""

    avg_power: float
    avg_power_se: float
    e_v: float
    e_v_se: float
    fdr: float
    fdr_se: float
    fwer: float
    fwer_se: float
    power_ratio_vs_awa: float
    power_ratio_se: float
    replicates: int
    vacuous_replicates: int = 0
    weight_violations: int = 0


def _decision_metrics(decisions: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """(power, false positives, false discovery proportion) of one run."""
    n_true = int(truth.sum())
    hits = int((decisions & truth).sum())
    v = int((decisions & ~truth).sum())
    n_rej = int(decisions.sum())
    power = hits / n_true if n_true else 0.0
    fdp = v / n_rej if n_rej else 0.0
    return power, float(v), fdp


def _generate(scenario: Scenario, rng: np.random.Generator
              ) -> tuple[np.ndarray, Decomposition, np.ndarray]:
    if isinstance(scenario, SubsetScenario):
        return gen_subset_scenario(scenario, rng)
    decomposition = square_decomposition(scenario.side, scenario.block)
    fld = gen_correlated_field(scenario.side, scenario.theta, rng)
    scores, truth = plant_effect(fld, scenario.effect_fraction, scenario.delta, rng)
    return scores, decomposition, truth


def _run_replicate(spec: MethodSpec, scenario: Scenario,
                   rng: np.random.Generator) -> dict:
    scores, decomposition, truth = _generate(scenario, rng)
    pvals = np.asarray(one_sided_pvalue(scores), dtype=float)
    awa_spec = MethodSpec(family=FAMILY_AWA, base=spec.base, alpha=spec.alpha,
                          gamma=spec.gamma)
    awa = run_awa(pvals, awa_spec)
    if spec.family == FAMILY_AWA:
        result: AnalysisResult = awa
    else:
        result = run_two_step(scores, decomposition, spec)
    power, v, fdp = _decision_metrics(result.decisions, truth)
    awa_power, _, _ = _decision_metrics(awa.decisions, truth)
    return {
        "power": power, "v": v, "fdp": fdp,
        "any_fp": bool((result.decisions & ~truth).any()),
        "awa_power": awa_power,
        "vacuous": not truth.any(),
        "weight_ok": (result.weight_sum is None
                      or result.weight_sum <= result.weight_limit + 1e-9),
    }


def _aggregate(rows: list[dict], replicates: int) -> MetricsRecord:
    def mean_se(values: np.ndarray) -> tuple[float, float]:
        mean = float(values.mean())
        if values.size < 2:
            return mean, 0.0
        return mean, float(values.std(ddof=1) / math.sqrt(values.size))

    vacuous = np.array([r["vacuous"] for r in rows])
    power = np.array([r["power"] for r in rows])
    awa_power = np.array([r["awa_power"] for r in rows])
    informative = ~vacuous
    if informative.any():
        avg_power, power_se = mean_se(power[informative])
        awa_mean = float(awa_power[informative].mean())
    else:
        avg_power, power_se, awa_mean = 0.0, 0.0, 0.0

    v_arr = np.array([r["v"] for r in rows])
    fdp_arr = np.array([r["fdp"] for r in rows])
    fp_arr = np.array([float(r["any_fp"]) for r in rows])
    e_v, e_v_se = mean_se(v_arr)
    fdr, fdr_se = mean_se(fdp_arr)
    fwer, fwer_se = mean_se(fp_arr)

    if awa_mean > 0 and informative.any():
        ratio = avg_power / awa_mean
        a = power[informative]
        b = awa_power[informative]
        n = a.size
        if n > 1 and avg_power > 0:
            var_a = a.var(ddof=1)
            var_b = b.var(ddof=1)
            cov = float(np.cov(a, b, ddof=1)[0, 1])
            rel_var = (var_a / avg_power ** 2 + var_b / awa_mean ** 2
                       - 2.0 * cov / (avg_power * awa_mean)) / n
            ratio_se = abs(ratio) * math.sqrt(max(rel_var, 0.0))
        else:
            ratio_se = 0.0
    else:
        ratio, ratio_se = math.nan, math.nan

    return MetricsRecord(
        avg_power=avg_power, avg_power_se=power_se,
        e_v=e_v, e_v_se=e_v_se, fdr=fdr, fdr_se=fdr_se,
        fwer=fwer, fwer_se=fwer_se,
        power_ratio_vs_awa=ratio, power_ratio_se=ratio_se,
        replicates=replicates,
        vacuous_replicates=int(vacuous.sum()),
        weight_violations=int(sum(not r["weight_ok"] for r in rows)),
    )


def estimate_metrics(spec: MethodSpec, scenario: Scenario, replicates: int,
                     rng: np.random.Generator) -> MetricsRecord:
    """Replicated power / error-rate estimates, paired with the baseline.

    Every replicate generates fresh data, runs both the atom-wise baseline
    and the requested method on it, and records power, the false-positive
    count and the false discovery proportion.  Replicates without planted
    effects are excluded from the power averages (flagged in the record).
    """
    if replicates < 1:
        raise InputError("need at least one replicate")
    streams = rng.spawn(replicates)
    rows = [_run_replicate(spec, scenario, stream) for stream in streams]
    return _aggregate(rows, replicates)


@dataclass(frozen=True)
class GridCell:
    spec: MethodSpec
    scenario: Scenario
    label: str = ""


def _cell_record(args: tuple[int, GridCell, int, int]) -> tuple[int, MetricsRecord]:
    index, cell, replicates, seed = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    return index, estimate_metrics(cell.spec, cell.scenario, replicates, rng)


def run_experiment_grid(cells: list[GridCell], replicates: int, seed: int,
                        workers: int = 1) -> list[dict]:
    """One metrics row per cell, deterministic for a given seed.

    Cell i always sees the generator spawned from ``(seed, i)``, so the
    output is identical for any worker count or execution order.
    """
    if not cells:
        raise InputError("experiment grid is empty")
    tasks = [(i, cell, replicates, seed) for i, cell in enumerate(cells)]
    if workers > 1 and len(cells) > 1:
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = dict(pool.map(_cell_record, tasks))
        except (OSError, PermissionError):   # restricted environments
            results = dict(map(_cell_record, tasks))
    else:
        results = dict(map(_cell_record, tasks))
    rows = []
    for i, cell in enumerate(cells):
        record = results[i]
        row = {
            "method": cell.spec.family,
            "base": cell.spec.base,
            "alpha": cell.spec.alpha,
            "rbar": cell.spec.rbar,
            "gamma": cell.spec.gamma if cell.spec.base == "scaled" else "",
            "label": cell.label,
        }
        row.update(_scenario_columns(cell.scenario))
        row.update({
            "avg_power": record.avg_power, "power_se": record.avg_power_se,
            "e_v": record.e_v, "e_v_se": record.e_v_se,
            "fdr": record.fdr, "fdr_se": record.fdr_se,
            "fwer": record.fwer, "fwer_se": record.fwer_se,
            "power_ratio_vs_awa": record.power_ratio_vs_awa,
            "power_ratio_se": record.power_ratio_se,
            "replicates": record.replicates,
            "vacuous_replicates": record.vacuous_replicates,
            "weight_violations": record.weight_violations,
            "seed": seed,
        })
        rows.append(row)
    return rows


_SCENARIO_COLUMNS = ("kind", "M", "m", "m1", "pi", "delta", "size_mode",
                     "side", "theta", "effect_fraction", "block")

CSV_COLUMNS = (("method", "base", "alpha", "rbar", "gamma", "label")
               + _SCENARIO_COLUMNS
               + ("avg_power", "power_se", "e_v", "e_v_se", "fdr", "fdr_se",
                  "fwer", "fwer_se", "power_ratio_vs_awa", "power_ratio_se",
                  "replicates", "vacuous_replicates", "weight_violations",
                  "seed"))


def _scenario_columns(scenario: Scenario) -> dict:
    desc = scenario.describe()
    return {col: desc.get(col, "") for col in _SCENARIO_COLUMNS}


def write_metrics_csv(rows: list[dict], path) -> None:
    """Fixed-column CSV (comma separated, LF endings, '.' decimals)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row.get(col, "")) for col in CSV_COLUMNS) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def _scenario_from_dict(obj: dict, where: str) -> Scenario:
    kind = obj.get("kind")
    try:
        if kind == "subsets":
            return SubsetScenario(
                n_atoms=int(obj["M"]), n_subsets=int(obj["m"]),
                n_affected_subsets=int(obj["m1"]), pi=float(obj["pi"]),
                delta=float(obj["delta"]),
                size_mode=str(obj.get("size_mode", SIZE_RANDOM)))
        if kind == "field":
            return FieldScenario(
                side=int(obj["side"]), theta=float(obj["theta"]),
                effect_fraction=float(obj["effect_fraction"]),
                delta=float(obj["delta"]), block=int(obj["block"]))
    except KeyError as exc:
        raise GridFileError(f"{where}: missing scenario field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise GridFileError(f"{where}: bad scenario value ({exc})") from None
    raise GridFileError(f"{where}: scenario kind must be 'subsets' or 'field', "
                        f"got {kind!r}")


def load_grid_file(path) -> list[GridCell]:
    """Parse an experiment grid JSON file into cells.

    Format: ``{"cells": [{"method": ..., "base": ..., "alpha": ...,
    "scenario": {...}}, ...]}`` with optional ``rbar``, ``gamma``,
    ``label`` per cell.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GridFileError(f"{path}: invalid JSON at line {exc.lineno}, "
                            f"column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise GridFileError(f"{path}: {exc}") from None
    if not isinstance(payload, dict) or not isinstance(payload.get("cells"), list):
        raise GridFileError(f"{path}: top level must be an object with a 'cells' list")
    cells = []
    for i, obj in enumerate(payload["cells"]):
        where = f"{path}: cell {i}"
        if not isinstance(obj, dict):
            raise GridFileError(f"{where}: must be an object")
        if "scenario" not in obj:
            raise GridFileError(f"{where}: missing 'scenario'")
        scenario = _scenario_from_dict(obj["scenario"], where)
        try:
            spec = MethodSpec(
                family=str(obj.get("method", "awa")),
                base=str(obj.get("base", "bonferroni")),
                alpha=float(obj.get("alpha", 0.05)),
                rbar=(None if obj.get("rbar") is None else float(obj["rbar"])),
                gamma=float(obj.get("gamma", 0.5)))
        except (InputError, TypeError, ValueError) as exc:
            raise GridFileError(f"{where}: {exc}") from None
        cells.append(GridCell(spec=spec, scenario=scenario,
                              label=str(obj.get("label", ""))))
    if not cells:
        raise GridFileError(f"{path}: grid has no cells")
    return cells
