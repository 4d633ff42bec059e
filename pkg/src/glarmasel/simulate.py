"""Synthetic GLARMA panels, support-recovery metrics and the benchmark harness."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._kernels import poisson_lasso_irls
from .model import W_CLAMP, PanelData
from .pipeline import FitConfig, fit, init_eta
from .selection import DEFAULT_THRESHOLDS, child_seeds, subsample_streams

logger = logging.getLogger(__name__)

METHODS = ("q0", "q1", "q2", "oracle", "classical")


@dataclass(frozen=True)
class SimScenario:
    T: int
    J: int
    I: int
    q_star: int
    gamma_star: tuple
    n_nonnull: int = 10
    magnitude_range: tuple = (0.41, 2.62)
    sign_policy: str = "all-positive"
    n_reps: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gamma_star", tuple(float(g) for g in self.gamma_star))
        object.__setattr__(self, "magnitude_range", tuple(float(m) for m in self.magnitude_range))
        if min(self.T, self.J, self.I) < 1:
            raise ValueError("dimensions must be positive")
        if len(self.gamma_star) != self.q_star:
            raise ValueError("gamma_star must have length q_star")
        lo, hi = self.magnitude_range
        if not 0 < lo <= hi:
            raise ValueError("magnitudes must be positive")
        if self.sign_policy not in ("random-sign", "all-positive"):
            raise ValueError(f"unknown sign policy {self.sign_policy!r}")
        if not 0 <= self.n_nonnull <= self.I * self.T:
            raise ValueError("n_nonnull must lie in [0, I*T]")


PRESET_SCENARIOS = {
    f"table1-row{k + 1}": SimScenario(T=T, J=J, I=3, q_star=len(g), gamma_star=g)
    for k, (T, J, g) in enumerate([
        (50, 10, (0.5,)), (50, 100, (0.5,)), (200, 10, (0.5,)), (200, 100, (0.5,)),
        (50, 10, (0.2, 0.5)), (50, 100, (0.2, 0.5)),
        (200, 10, (0.2, 0.5)), (200, 100, (0.2, 0.5)),
    ])
}

_KEYS = {"t": "T", "j": "J", "i": "I", "qstar": "q_star", "q_star": "q_star",
         "gamma": "gamma_star", "gamma_star": "gamma_star", "nonnull": "n_nonnull",
         "n_nonnull": "n_nonnull", "reps": "n_reps", "n_reps": "n_reps",
         "seed": "seed", "signs": "sign_policy", "sign_policy": "sign_policy"}


def parse_scenario(text: str) -> SimScenario:
    """``table1-rowK`` or ``"T=50,J=100,I=3,qstar=1,gamma=0.5"``.

    Several gamma values are separated by ``:``, e.g. ``gamma=0.2:0.5``.
    """
    text = text.strip()
    if text in PRESET_SCENARIOS:
        return PRESET_SCENARIOS[text]
    fields = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        name = _KEYS.get(key.strip().lower())
        if not sep or name is None:
            raise ValueError(f"bad scenario field {part!r}; valid keys: {sorted(set(_KEYS))}")
        value = value.strip()
        if name == "gamma_star":
            fields[name] = tuple(float(v) for v in value.split(":") if v)
        elif name == "sign_policy":
            fields[name] = value
        else:
            fields[name] = int(value)
    if "gamma_star" in fields and "q_star" not in fields:
        fields["q_star"] = len(fields["gamma_star"])
    missing = {"T", "J", "I", "q_star"} - set(fields)
    if missing:
        raise ValueError(f"scenario is missing {sorted(missing)}")
    fields.setdefault("gamma_star", ())
    return SimScenario(**fields)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_eta_star(scenario: SimScenario, rep_seed) -> np.ndarray:
    """Sparse truth: ``n_nonnull`` uniformly placed cells, uniform magnitudes."""
    rng = _rng(rep_seed)
    I, T = scenario.I, scenario.T
    eta = np.zeros(I * T)
    pos = rng.choice(I * T, size=scenario.n_nonnull, replace=False)
    lo, hi = scenario.magnitude_range
    mags = rng.uniform(lo, hi, size=scenario.n_nonnull)
    if scenario.sign_policy == "random-sign":
        mags *= rng.choice([-1.0, 1.0], size=scenario.n_nonnull)
    eta[pos] = mags
    return eta.reshape(I, T)


def simulate_panel(scenario: SimScenario, eta_star, rep_seed,
                   gamma=None) -> PanelData:
    """Draw counts from the GLARMA model, one position at a time."""
    rng = _rng(rep_seed)
    gamma = np.asarray(scenario.gamma_star if gamma is None else gamma, dtype=np.float64)
    eta_star = np.asarray(eta_star, dtype=np.float64)
    I, T, J = scenario.I, scenario.T, scenario.J
    q = gamma.size
    S = I * J
    eta_rows = np.repeat(eta_star, J, axis=0)
    Y = np.zeros((S, T))
    E = np.zeros((S, T))
    clamped = 0
    for t in range(T):
        w = eta_rows[:, t].copy()
        for k in range(1, min(q, t) + 1):
            w += gamma[k - 1] * E[:, t - k]
        wc = np.clip(w, -W_CLAMP, W_CLAMP)
        clamped += int(np.count_nonzero(wc != w))
        Y[:, t] = rng.poisson(np.exp(wc))
        E[:, t] = Y[:, t] * np.exp(-wc) - 1.0
    if clamped:
        logger.warning("simulate_panel clamped %d linear predictor values", clamped)
    return PanelData(Y, np.repeat(np.arange(I), J))


@dataclass
class MetricsRow:
    method: str
    threshold: float
    tpr: float
    fpr: float
    max_diff: float
    sign_tpr: float
    gamma_hat: tuple = ()
    wall_time: float = float("nan")


def support_metrics(eta_hat, eta_star, thresholds, frequencies,
                    primary_threshold: float = 0.6, method: str = "",
                    gamma_hat=(), wall_time: float = float("nan")) -> list:
    """Per-threshold TPR/FPR plus the best TPR-FPR gap and sign recovery.

    Sign recovery is the share of all coefficients whose sign class in
    {-, 0, +} matches the truth, read from ``eta_hat`` (the fit at the
    primary threshold).
    """
    truth = np.asarray(eta_star).ravel() != 0
    freq = np.asarray(frequencies).ravel()
    n_true, n_null = int(truth.sum()), int((~truth).sum())
    tprs, fprs = [], []
    for thr in thresholds:
        est = freq > thr
        tprs.append(np.count_nonzero(est & truth) / n_true if n_true else np.nan)
        fprs.append(np.count_nonzero(est & ~truth) / n_null if n_null else np.nan)
    diffs = np.array(tprs) - np.array(fprs)
    max_diff = float(np.max(diffs)) if np.all(np.isfinite(diffs)) else float("nan")
    sign_tpr = float(np.mean(np.sign(np.asarray(eta_hat).ravel()) ==
                             np.sign(np.asarray(eta_star).ravel())))
    gamma_hat = tuple(float(g) for g in np.atleast_1d(gamma_hat))
    return [MetricsRow(method, float(thr), float(tp), float(fp), max_diff, sign_tpr,
                       gamma_hat, wall_time)
            for thr, tp, fp in zip(thresholds, tprs, fprs)]


@dataclass
class BaselineResult:
    frequencies: np.ndarray
    eta_hat: np.ndarray
    lambdas: np.ndarray
    unconverged: np.ndarray
    primary_threshold: float = 0.6

    def support(self, threshold: Optional[float] = None) -> np.ndarray:
        thr = self.primary_threshold if threshold is None else threshold
        return self.frequencies > thr


def poisson_lambda_max(X, y) -> float:
    """Smallest penalty giving the all-zero no-intercept Poisson fit."""
    return float(np.max(np.abs(X.T @ (y - 1.0)))) / X.shape[0]


def poisson_lasso(X, y, lam, start=None, tol=1e-8, max_irls=100, max_sweeps=10000):
    beta = np.zeros(X.shape[1]) if start is None else np.array(start, dtype=np.float64)
    its, ok = poisson_lasso_irls(np.ascontiguousarray(X, dtype=np.float64),
                                 np.asarray(y, dtype=np.float64), float(lam), beta,
                                 tol, max_irls, max_sweeps)
    return beta, bool(ok)


def poisson_lasso_baseline(data: PanelData, rep_seed, n_subsamples: int = 1000,
                           thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                           primary_threshold: float = 0.6, n_lambda: int = 100,
                           ratio: float = 1e-4) -> BaselineResult:
    """Per-position l1 Poisson regression on condition indicators.

    For each ``t`` the counts of all replicates are regressed on the ``I``
    indicator columns (no intercept) at the smallest grid penalty, and the
    same half-subsample frequency protocol as the main method is applied.
    Selected cells are refitted by the unpenalized Poisson MLE.
    """
    I, T = data.I, data.T
    X = np.zeros((data.n_series, I))
    X[np.arange(data.n_series), data.condition] = 1.0
    n = data.n_series
    half = n // 2
    seeds = child_seeds(rep_seed, T)
    freq = np.zeros((I, T))
    lams = np.zeros(T)
    unconverged = np.zeros(T, dtype=np.int64)
    for t in range(T):
        y = data.counts[:, t]
        lam_max = poisson_lambda_max(X, y)
        lam = lam_max * (ratio if n_lambda > 1 else 1.0)
        lams[t] = lam
        full, ok = poisson_lasso(X, y, lam)
        unconverged[t] += not ok
        counts = np.zeros(I)
        for g in subsample_streams(seeds[t], n_subsamples):
            rows = np.sort(g.choice(n, size=half, replace=False))
            beta, ok = poisson_lasso(X[rows], y[rows], lam, start=full)
            unconverged[t] += not ok
            counts += beta != 0.0
        freq[:, t] = counts / n_subsamples
    eta_hat = np.where(freq > primary_threshold, init_eta(data), 0.0)
    return BaselineResult(freq, eta_hat, lams, unconverged, primary_threshold)


def method_config(method: str, scenario: SimScenario, base: FitConfig) -> FitConfig:
    if method == "oracle":
        return replace(base, q=scenario.q_star, oracle_gamma=scenario.gamma_star)
    if method in ("q0", "q1", "q2", "q3"):
        return replace(base, q=int(method[1:]), oracle_gamma=None)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def replicate_seeds(scenario: SimScenario, rep: int):
    """Independent streams for one replicate: truth, panel, fits, baseline."""
    eta_ss, panel_ss, fit_ss, base_ss = child_seeds(
        np.random.SeedSequence(scenario.seed, spawn_key=(rep,)), 4)
    return eta_ss, panel_ss, int(fit_ss.generate_state(1)[0]), base_ss


@dataclass
class ExperimentResult:
    scenario: SimScenario
    rows: list = field(default_factory=list)
    gamma_samples: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def table(self):
        import pandas as pd
        return pd.DataFrame(self.rows)

    def aggregate(self):
        return aggregate_rows(self.rows)


def aggregate_rows(rows):
    """Mean and standard error per (method, threshold)."""
    import pandas as pd
    df = pd.DataFrame(rows)
    if df.empty:
        return df
    cols = ["tpr", "fpr", "max_diff", "sign_tpr"]
    g = df.groupby(["method", "threshold"], sort=True)[cols]
    mean = g.mean()
    se = g.std(ddof=1) / np.sqrt(g.count())
    out = mean.join(se, lsuffix="_mean", rsuffix="_se").reset_index()
    out["n_reps"] = g.count()["tpr"].to_numpy()
    return out


def run_experiment(scenario: SimScenario, methods: Sequence[str] = ("q0", "q1", "classical"),
                   fit_config: FitConfig | None = None, reps: Optional[Sequence[int]] = None,
                   record_time: bool = True) -> ExperimentResult:
    """Run every method on the same simulated panel for each replicate.

    ``gamma_samples[method]`` holds, per replicate, the gamma estimate of each
    outer iteration (rows) for methods that estimate gamma.
    """
    base = fit_config or FitConfig()
    reps = range(scenario.n_reps) if reps is None else reps
    out = ExperimentResult(scenario)
    for rep in reps:
        eta_ss, panel_ss, fit_seed, base_ss = replicate_seeds(scenario, rep)
        eta_star = gen_eta_star(scenario, eta_ss)
        data = simulate_panel(scenario, eta_star, panel_ss)
        for method in methods:
            start = time.perf_counter()
            try:
                if method == "classical":
                    res = poisson_lasso_baseline(data, base_ss, base.n_subsamples,
                                                 base.thresholds, base.primary_threshold,
                                                 base.n_lambda, base.lambda_ratio)
                    gamma_hat = ()
                else:
                    cfg = replace(method_config(method, scenario, base), seed=fit_seed)
                    res = fit(data, cfg)
                    gamma_hat = res.gamma_hat
                    if cfg.q and cfg.oracle_gamma is None:
                        out.gamma_samples.setdefault(method, []).append(res.gamma_path)
            except Exception as exc:  # a failed replicate must not end the run
                logger.warning("rep %d method %s failed: %s", rep, method, exc)
                out.failures.append({"rep": rep, "method": method, "error": repr(exc)})
                continue
            elapsed = time.perf_counter() - start if record_time else float("nan")
            for row in support_metrics(res.eta_hat, eta_star, base.thresholds,
                                       res.frequencies, base.primary_threshold,
                                       method, gamma_hat, elapsed):
                out.rows.append({"rep": rep, **asdict(row)})
        logger.info("replicate %d done", rep)
    return out
