"""Count tables, run configuration files and the per-series ANOVA pre-filter."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .model import PanelData

COLUMNS = ("series", "condition", "replicate", "count")


class CountTableError(ValueError):
    pass


@dataclass
class CountTable:
    """Dense panel plus the labels needed to write it back out.

    ``replicates[i]`` lists the replicate ids of condition ``i`` in the order
    their rows appear in ``data``.
    """

    data: PanelData
    series: list
    conditions: list
    replicates: list
    metadata: dict = field(default_factory=dict)

    def records(self):
        """Yield ``(series, condition, replicate, count)`` in canonical order."""
        counts = self.data.counts
        row = 0
        for cond, reps in zip(self.conditions, self.replicates):
            for rep in reps:
                for t, name in enumerate(self.series):
                    yield name, cond, rep, int(counts[row, t])
                row += 1

    def subset(self, keep) -> "CountTable":
        keep = np.asarray(keep, dtype=np.int64)
        data = PanelData(self.data.counts[:, keep], self.data.condition)
        return CountTable(data, [self.series[k] for k in keep], list(self.conditions),
                          [list(r) for r in self.replicates], dict(self.metadata))


def _read_order(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def load_counts(path, condition_order: Optional[Sequence[str]] = None,
                series_order: Optional[Sequence[str]] = None) -> CountTable:
    """Read a long-format count CSV into a dense panel.

    The header must name ``series,condition,replicate,count`` (any column
    order, extra columns ignored). Lines starting with ``#`` are skipped.
    Conditions and series are ordered by first appearance unless an explicit
    order (a sequence, or a file with one label per line) is given.

    Raises
    ------
    CountTableError
        On a malformed header, bad or negative counts, duplicate
        ``(condition, replicate, series)`` triples, or missing cells. Messages
        carry the 1-based line number of the offending row.
    """
    path = Path(path)
    cells = {}
    first_line = {}
    seen_series, seen_cond = {}, {}
    reps_of = {}
    with path.open(newline="", encoding="utf-8") as fh:
        lines = ((n, ln) for n, ln in enumerate(fh, start=1)
                 if ln.strip() and not ln.lstrip().startswith("#"))
        numbered = list(lines)
    if not numbered:
        raise CountTableError(f"{path}: empty file")
    reader = csv.reader([ln for _, ln in numbered])
    header = [h.strip() for h in next(reader)]
    missing_cols = [c for c in COLUMNS if c not in header]
    if missing_cols:
        raise CountTableError(f"{path}: line {numbered[0][0]}: header lacks {missing_cols}; "
                              f"expected columns {list(COLUMNS)}")
    pos = {c: header.index(c) for c in COLUMNS}
    for (lineno, _), rec in zip(numbered[1:], reader):
        if len(rec) < len(header):
            raise CountTableError(f"{path}: line {lineno}: expected {len(header)} fields, "
                                  f"got {len(rec)}")
        name, cond = rec[pos["series"]].strip(), rec[pos["condition"]].strip()
        try:
            rep = int(rec[pos["replicate"]])
        except ValueError:
            raise CountTableError(f"{path}: line {lineno}: replicate "
                                  f"{rec[pos['replicate']]!r} is not an integer") from None
        raw = rec[pos["count"]].strip()
        try:
            value = int(raw)
        except ValueError:
            raise CountTableError(f"{path}: line {lineno}: count {raw!r} is not an integer") from None
        if value < 0:
            raise CountTableError(f"{path}: line {lineno}: negative count {value}")
        key = (cond, rep, name)
        if key in cells:
            raise CountTableError(f"{path}: line {lineno}: duplicate entry for series {name!r}, "
                                  f"condition {cond!r}, replicate {rep} "
                                  f"(first seen on line {first_line[key]})")
        cells[key] = value
        first_line[key] = lineno
        seen_series.setdefault(name, len(seen_series))
        seen_cond.setdefault(cond, len(seen_cond))
        reps_of.setdefault(cond, {}).setdefault(rep, None)
    if not cells:
        raise CountTableError(f"{path}: no data rows")

    conditions = _resolve_order(condition_order, seen_cond, "condition")
    series = _resolve_order(series_order, seen_series, "series")
    replicates = [sorted(reps_of[c]) for c in conditions]
    blocks = []
    for cond, reps in zip(conditions, replicates):
        block = np.zeros((len(reps), len(series)))
        for r, rep in enumerate(reps):
            for t, name in enumerate(series):
                value = cells.get((cond, rep, name))
                if value is None:
                    raise CountTableError(f"{path}: missing count for series {name!r}, "
                                          f"condition {cond!r}, replicate {rep}")
                block[r, t] = value
        blocks.append(block)
    return CountTable(PanelData.from_blocks(blocks), series, conditions, replicates,
                      {"source": str(path)})


def _resolve_order(order, seen: dict, what: str) -> list:
    if order is None:
        return list(seen)
    if isinstance(order, (str, Path)):
        order = _read_order(order)
    order = list(order)
    if sorted(order) != sorted(seen) or len(set(order)) != len(order):
        extra = sorted(set(order) - set(seen))
        absent = sorted(set(seen) - set(order))
        raise CountTableError(f"{what} ordering does not match the data "
                              f"(unknown: {extra}, not listed: {absent})")
    return order


def export_counts(table: CountTable, path, header: Optional[dict] = None) -> None:
    """Write ``table`` in the format read by :func:`load_counts`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        write_header_block(fh, header)
        fh.write(",".join(COLUMNS) + "\n")
        for name, cond, rep, value in table.records():
            fh.write(f"{name},{cond},{rep},{value}\n")


def panel_table(data: PanelData, series=None, conditions=None) -> CountTable:
    """Label a bare panel with default names ``s0001`` and ``c1``."""
    series = series or [f"s{t + 1:04d}" for t in range(data.T)]
    conditions = conditions or [f"c{i + 1}" for i in range(data.I)]
    reps = [list(range(1, n + 1)) for n in data.rep_counts]
    return CountTable(data, list(series), list(conditions), reps)


def fmt(x) -> str:
    """Numbers with nine significant digits; integers and strings as is."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def write_header_block(fh, header: Optional[dict]) -> None:
    for key, value in (header or {}).items():
        if isinstance(value, (list, tuple)):
            value = ",".join(fmt(v) for v in value)
        fh.write(f"# {key} = {fmt(value)}\n")


# Configuration documents

def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(":", ",").split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _strs(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_floats(text: str):
    return None if text.strip().lower() in ("", "none") else _floats(text)


CONFIG_KEYS = {
    "fit.q": int,
    "fit.thresholds": _floats,
    "fit.primary_threshold": float,
    "fit.max_outer_iter": int,
    "fit.gamma_stab_tol": float,
    "fit.oracle_gamma": _opt_floats,
    "fit.n_subsamples": int,
    "fit.n_lambda": int,
    "fit.lambda_ratio": float,
    "fit.workers": int,
    "newton.tol": float,
    "newton.max_iter": int,
    "newton.step_halving_max": int,
    "scenario.name": str,
    "scenario.T": int,
    "scenario.J": int,
    "scenario.I": int,
    "scenario.q_star": int,
    "scenario.gamma_star": _floats,
    "scenario.n_nonnull": int,
    "scenario.magnitude_range": _floats,
    "scenario.sign_policy": str,
    "scenario.n_reps": int,
    "run.seed": int,
    "run.out": str,
    "run.methods": _strs,
    "run.record_timings": _bool,
    "filter.rule": str,
    "filter.method": str,
}


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse flat ``section.key = value`` lines into a typed dict.

    Blank lines and ``#`` comments are ignored. Unknown keys are errors that
    list every valid key.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}: line {lineno}: expected 'section.key = value'")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}; valid keys: "
                              f"{', '.join(sorted(CONFIG_KEYS))}")
        try:
            out[key] = CONFIG_KEYS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}: line {lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def section(config: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}


def apply_section(obj, values: dict):
    """``dataclasses.replace`` restricted to the fields present in ``values``."""
    names = {f.name for f in dataclasses.fields(obj)}
    return dataclasses.replace(obj, **{k: v for k, v in values.items() if k in names})


# ANOVA pre-filter

@dataclass
class FilterResult:
    kept: np.ndarray
    pvalues: np.ndarray
    statistics: np.ndarray
    cutoff: float
    method: str
    df: int


def _group_sums(data: PanelData):
    sums = np.stack([data.counts[data.rows(i)].sum(axis=0) for i in range(data.I)])
    return sums, data.rep_counts.astype(np.float64)


def poisson_lrt(data: PanelData):
    """Likelihood-ratio statistics for equal Poisson means across conditions.

    With condition totals ``S_i`` over ``n_i`` replicates and grand total
    ``S`` over ``N``, the statistic is ``2 sum_i S_i log(S_i N / (n_i S))``,
    which equals the deviance drop from the intercept-only to the
    condition-factor Poisson GLM. Returns ``(statistic, pvalue)`` per series.
    """
    sums, n = _group_sums(data)
    total = sums.sum(axis=0)
    N = n.sum()
    ratio = np.divide(sums * N, n[:, None] * total, out=np.ones_like(sums),
                      where=(sums > 0) & (total > 0))
    lr = 2.0 * np.sum(sums * np.log(ratio), axis=0)
    lr = np.maximum(lr, 0.0)
    p = stats.chi2.sf(lr, data.I - 1)
    p = np.where(total > 0, p, 1.0)
    return lr, p


def poisson_wald(data: PanelData):
    """Smallest two-sided Wald p-value over the contrasts against condition 0.

    Each contrast is ``log(mean_i / mean_0)`` with standard error
    ``sqrt(1/S_i + 1/S_0)``. A contrast involving an all-zero condition has an
    infinite estimate and an undefined standard error; it is given p = 1.
    """
    sums, n = _group_sums(data)
    T = data.T
    best_z = np.zeros(T)
    best_p = np.ones(T)
    for i in range(1, data.I):
        ok = (sums[i] > 0) & (sums[0] > 0)
        safe_i = np.where(ok, sums[i], 1.0)
        safe_0 = np.where(ok, sums[0], 1.0)
        est = np.log(safe_i / n[i]) - np.log(safe_0 / n[0])
        z = np.where(ok, est / np.sqrt(1.0 / safe_i + 1.0 / safe_0), 0.0)
        p = np.where(ok, 2.0 * stats.norm.sf(np.abs(z)), 1.0)
        better = p < best_p
        best_p = np.where(better, p, best_p)
        best_z = np.where(better, z, best_z)
    return best_z, best_p


def anova_filter(data: PanelData, rule="one-over-T", method: str = "lrt") -> FilterResult:
    """Keep the series whose condition effect is significant.

    ``rule`` is ``"one-over-T"`` (keep ``p < 1/T``) or a fixed level
    ``alpha`` (keep ``p < alpha``). ``method`` is ``"lrt"`` or ``"wald"``.
    All-zero series get p = 1.
    """
    if data.I < 2:
        raise ValueError("the condition filter needs at least two conditions")
    if method == "lrt":
        stat, p = poisson_lrt(data)
    elif method == "wald":
        stat, p = poisson_wald(data)
    else:
        raise ValueError(f"unknown filter method {method!r}; expected 'lrt' or 'wald'")
    if isinstance(rule, str):
        if rule != "one-over-T":
            try:
                rule = float(rule)
            except ValueError:
                raise ValueError(f"unknown filter rule {rule!r}") from None
    cutoff = 1.0 / data.T if rule == "one-over-T" else float(rule)
    if not 0 < cutoff <= 1:
        raise ValueError("the significance level must lie in (0, 1]")
    return FilterResult(np.flatnonzero(p < cutoff), p, stat, cutoff, method, data.I - 1)
