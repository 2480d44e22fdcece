"""Monte Carlo harness: generate, mask, estimate, aggregate.

Each replicate ``r`` of a scenario draws everything from
``SeedSpec(root_seed, r)``, so a report depends only on its config and not
on how replicates are spread over workers.  Aggregation walks replicates in
index order.
"""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .estimators import EstimationError, Method, corrected_ls, estimate, naive_ls
from .model import MaskedDataset, MixtureSpec, RawDataset, implied_logistic_coefficients
from .sampling import SeedSpec, apply_tm2_noise, sample_dataset

__all__ = [
    "Model",
    "ScenarioConfig",
    "MetricRow",
    "SimulationReport",
    "run_scenario",
    "run_scenarios",
    "table_presets",
    "PRESETS",
    "table1_spec",
    "table2_spec",
    "significance_study",
    "synthetic_health_dataset",
    "report_csv",
    "report_json",
]

SIGMAS = (0.0, 0.3, 1.0, 3.0)
SAMPLE_SIZES = (1_000, 10_000, 200_000)
PRESET_SEED = 20250117
ALL_METHODS = (Method.NAIVE_MLE, Method.NAIVE_LS, Method.CORRECTED_LS)


class Model(str, Enum):
    UNCONDITIONAL = "Unconditional"
    CONDITIONAL = "Conditional"


@dataclass(frozen=True)
class ScenarioConfig:
    model: Model
    spec: MixtureSpec
    n: int
    sigma: float
    reps: int
    alpha: float = 0.05
    methods: Tuple[Method, ...] = ALL_METHODS
    root_seed: int = 0
    name: str = ""
    mask: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.n <= self.spec.p + self.spec.q + 1:
            raise ValueError("n must exceed p + q + 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if (self.model is Model.CONDITIONAL) != self.spec.conditional:
            raise ValueError("model kind does not match the spec")
        if Method.MIXTURE_MLE in self.methods:
            raise ValueError("MixtureMLE needs raw data and is not a masked-data method")


@dataclass
class MetricRow:
    scenario: str
    method: Method
    coef: int
    truth: float
    bias: Optional[float]
    mse: Optional[float]
    coverage: Optional[float]
    signif_prop: Optional[float]
    emp_sd: Optional[float]
    n_ok: int
    n_failed: int


@dataclass
class SimulationReport:
    config: ScenarioConfig
    rows: List[MetricRow]
    n_failed: Dict[Method, int]
    failure_reasons: Dict[Method, Dict[str, int]] = field(default_factory=dict)
    wall_time: float = 0.0

    def row(self, method, coef: int) -> MetricRow:
        method = Method(method)
        for r in self.rows:
            if r.method is method and r.coef == coef:
                return r
        raise KeyError((method, coef))


def _replicate(config: ScenarioConfig, r: int):
    seed = SeedSpec(config.root_seed, r)
    raw = sample_dataset(config.spec, config.n, seed)
    masked = apply_tm2_noise(raw, config.sigma, seed, mask=config.mask)
    out = {}
    for m in config.methods:
        try:
            est = estimate(masked, m, config.alpha)
            lo, hi = np.array(est.ci).T
            out[m] = (est.beta1_hat.copy(), lo, hi)
        except EstimationError as exc:
            out[m] = str(exc).split(":")[0]
        except (ValueError, linalg.LinAlgError) as exc:
            out[m] = f"numerical error: {type(exc).__name__}"
    return out


def run_scenario(config: ScenarioConfig, threads: int = 1, progress=None) -> SimulationReport:
    """Run ``config.reps`` replicates and aggregate per method and coefficient."""
    t0 = time.perf_counter()
    truth = implied_logistic_coefficients(config.spec).beta1
    reps = range(config.reps)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: _replicate(config, r), reps))
    else:
        results = [_replicate(config, r) for r in reps]
    if progress is not None:
        progress(config)

    rows, n_failed, reasons = [], {}, {}
    for m in config.methods:
        ok = [res[m] for res in results if not isinstance(res[m], str)]
        fails = [res[m] for res in results if isinstance(res[m], str)]
        n_failed[m] = len(fails)
        reasons[m] = {k: fails.count(k) for k in sorted(set(fails))}
        for j, b in enumerate(truth):
            if ok:
                est = np.array([o[0][j] for o in ok])
                lo = np.array([o[1][j] for o in ok])
                hi = np.array([o[2][j] for o in ok])
                err = est - b
                row = MetricRow(config.name, m, j + 1, float(b),
                                bias=float(err.mean()), mse=float((err**2).mean()),
                                coverage=float(((lo <= b) & (b <= hi)).mean()),
                                signif_prop=float(((lo > 0) | (hi < 0)).mean()),
                                emp_sd=float(est.std(ddof=1)) if est.size > 1 else 0.0,
                                n_ok=len(ok), n_failed=len(fails))
            else:
                row = MetricRow(config.name, m, j + 1, float(b), None, None, None, None, None,
                                0, len(fails))
            rows.append(row)
    return SimulationReport(config, rows, n_failed, reasons, time.perf_counter() - t0)


def run_scenarios(configs: Sequence[ScenarioConfig], threads: int = 1,
                  progress=None) -> List[SimulationReport]:
    return [run_scenario(c, threads=threads, progress=progress) for c in configs]


def _ar1(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


TRUE_BETA1 = np.array([1.0, -1.0, 0.0])
MU1 = np.array([1.0, 1.0, 1.0])


def table1_spec(p1: float = 0.5) -> MixtureSpec:
    """Unconditional mixture with slope (1, -1, 0) and AR(1) covariance, rho = 0.5."""
    Sigma = _ar1(3, 0.5)
    return MixtureSpec(mu0=MU1 - Sigma @ TRUE_BETA1, mu1=MU1, Sigma=Sigma, p1=p1)


def table2_spec(seed: int = PRESET_SEED) -> MixtureSpec:
    """Conditional mixture with q = 2 and ``C`` drawn once from Uniform(1, 2)."""
    Sigma = _ar1(3, 0.5)
    C = np.random.default_rng(seed).uniform(1.0, 2.0, size=(2, 3))
    return MixtureSpec(mu0=MU1 - Sigma @ TRUE_BETA1, mu1=MU1, Sigma=Sigma,
                       gamma0=0.0, gamma1=np.array([1.5, 1.0]), C=C)


def _grid(name, model, spec, sigmas=SIGMAS, ns=SAMPLE_SIZES, reps=1000):
    out = []
    for i, (s, n) in enumerate((s, n) for s in sigmas for n in ns):
        out.append(ScenarioConfig(model, spec, n, s, reps, root_seed=PRESET_SEED + 1009 * i,
                                  name=f"{name}/sigma={s:g}/n={n}"))
    return out


PRESETS = {
    "table1": lambda: _grid("table1", Model.UNCONDITIONAL, table1_spec(0.5)),
    "table2": lambda: _grid("table2", Model.CONDITIONAL, table2_spec()),
    "s2_p01": lambda: _grid("s2_p01", Model.UNCONDITIONAL, table1_spec(0.1)),
    "s2_p09": lambda: _grid("s2_p09", Model.UNCONDITIONAL, table1_spec(0.9)),
    "table1-small": lambda: _grid("table1-small", Model.UNCONDITIONAL, table1_spec(0.5),
                                  ns=(1_000,), reps=100),
}
def _canonical(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    for k in PRESETS:
        if k.replace("-", "_") == key:
            return k
    raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


def table_presets(name: str) -> List[ScenarioConfig]:
    """Scenario grid for a named table (``Table1``, ``Table2``, ``S2_p01``, ``S2_p09``)."""
    return PRESETS[_canonical(name)]()


def synthetic_health_dataset(n: int = 169_772, seed: int = PRESET_SEED) -> RawDataset:
    """Stand-in for a registry extract: binary gender and race, age scaled to [0, 1].

    The outcome follows a logistic model with slopes (-0.18, 0.77, 4.1) and
    prevalence near 43%.
    """
    rng = np.random.default_rng(seed)
    gender = (rng.random(n) < 0.63).astype(float)
    race = (rng.random(n) < 0.194).astype(float)
    age = np.clip(rng.normal(51.9, 16.6, n), 18, 88)
    x_age = (age - 18.0) / 70.0
    X = np.column_stack([gender, race, x_age])
    lin = -2.35 + X @ np.array([-0.18, 0.77, 4.1])
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-lin))).astype(float)
    return RawDataset(y, X)


def significance_study(raw: RawDataset, sigmas: Sequence[float], reps: int = 100,
                       alpha: float = 0.05, root_seed: int = PRESET_SEED,
                       mask: str = "auto") -> List[dict]:
    """Re-mask one raw dataset ``reps`` times per noise level and summarise cLS.

    Bias and interval coverage are measured against the raw-data LS
    estimate.  One row per (sigma, coefficient).
    """
    ref = naive_ls(MaskedDataset.from_raw(raw), alpha)
    ref_beta = ref.beta1_hat
    rows = []
    for si, s in enumerate(sigmas):
        ests, covers, sig, failed = [], [], [], 0
        for r in range(reps):
            masked = apply_tm2_noise(raw, s, SeedSpec(root_seed + si, r), mask=mask)
            try:
                est = corrected_ls(masked, alpha)
            except EstimationError:
                failed += 1
                continue
            lo, hi = np.array(est.ci).T
            ests.append(est.beta1_hat)
            covers.append((lo <= ref_beta) & (ref_beta <= hi))
            sig.append((lo > 0) | (hi < 0))
        ests, covers, sig = np.array(ests), np.array(covers), np.array(sig)
        for j in range(raw.p):
            ok = len(ests) > 0
            rows.append({
                "sigma": float(s),
                "coef": j + 1,
                "raw_estimate": float(ref_beta[j]),
                "bias": float(ests[:, j].mean() - ref_beta[j]) if ok else None,
                "se": float(ests[:, j].std(ddof=1)) if len(ests) > 1 else (0.0 if ok else None),
                "prop_ci_contains_raw": float(covers[:, j].mean()) if ok else None,
                "signif_prop": float(sig[:, j].mean()) if ok else None,
                "n_failed": failed,
            })
    return rows


CSV_FIELDS = ["scenario", "model", "n", "sigma", "reps", "method", "coef", "truth", "bias",
              "mse", "coverage", "signif_prop", "emp_sd", "n_ok", "n_failed"]


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def report_csv(reports: Sequence[SimulationReport]) -> str:
    """One CSV row per scenario x method x coefficient (no timing columns)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for rep in reports:
        c = rep.config
        for r in rep.rows:
            w.writerow([_fmt(x) for x in (r.scenario, c.model.value, c.n, float(c.sigma), c.reps,
                                          r.method.value, r.coef, r.truth, r.bias, r.mse,
                                          r.coverage, r.signif_prop, r.emp_sd, r.n_ok,
                                          r.n_failed)])
    return buf.getvalue()


def report_json(reports: Sequence[SimulationReport]) -> dict:
    out = []
    for rep in reports:
        c = rep.config
        out.append({
            "scenario": c.name,
            "model": c.model.value,
            "spec": c.spec.to_dict(),
            "n": c.n,
            "sigma": c.sigma,
            "reps": c.reps,
            "alpha": c.alpha,
            "root_seed": c.root_seed,
            "methods": [m.value for m in c.methods],
            "n_failed": {m.value: k for m, k in rep.n_failed.items()},
            "failure_reasons": {m.value: v for m, v in rep.failure_reasons.items()},
            "wall_time": rep.wall_time,
            "metrics": [{
                "method": r.method.value, "coef": r.coef, "truth": r.truth, "bias": r.bias,
                "mse": r.mse, "coverage": r.coverage, "signif_prop": r.signif_prop,
                "emp_sd": r.emp_sd, "n_ok": r.n_ok, "n_failed": r.n_failed,
            } for r in rep.rows],
        })
    return {"reports": out}
