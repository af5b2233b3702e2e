"""Synthetic EHR-like cohorts with planted concepts and known Cox outcomes.

Each concept has a latent 0/1 label.  Its anchor column is observed only
for latent positives, each independently with probability ``delta``, so the
anchors are selected completely at random among positives and never fire
for negatives.  Proxy columns depend on the latent label alone, which makes
the anchor conditionally independent of every other column given the
concept.  Survival and censoring times are exponential, so the
proportional-hazards model holds exactly.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data_model import Cohort, ColumnMeta, write_cohort

PROXY_KINDS = ("medication", "lab", "symptom")
NOISE_KINDS = ("medication", "vaccine", "diagnosis", "symptom")
LOCATIONS = (("inpatient", 0.42), ("outpatient", 0.51), ("unknown", 0.07))


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    prevalence: float
    delta: float
    beta: float
    n_proxies: int = 6
    proxy_strength: float = 6.0
    proxy_base_rate: float = 0.1

    def __post_init__(self):
        if not 0 < self.prevalence < 1:
            raise ValueError(f"{self.name}: prevalence must lie in (0, 1)")
        if not 0 < self.delta <= 1:
            raise ValueError(f"{self.name}: delta must lie in (0, 1]")


DEFAULT_CONCEPTS = (
    ConceptSpec("inpatient", 0.40, 0.80, 1.2),
    ConceptSpec("old_age", 0.30, 0.70, 0.9),
    ConceptSpec("shortness_of_breath", 0.25, 0.50, 0.7),
    ConceptSpec("diabetes", 0.15, 0.55, 0.4),
    ConceptSpec("obesity", 0.25, 0.30, 0.3),
    ConceptSpec("flu_vaccine", 0.45, 0.80, -0.4),
)

# Tuned with tune_baseline_rate so the default cohort has ~16.8% events.
DEFAULT_BASELINE_RATE = 0.0022509184
DEFAULT_CENSOR_RATE = 1.0 / 30.0


@dataclass(frozen=True)
class GenConfig:
    n_patients: int = 10_000
    concepts: tuple[ConceptSpec, ...] = DEFAULT_CONCEPTS
    n_noise_features: int = 20
    n_numeric: int = 4
    numeric_shift: float = 0.5
    numeric_missing_rate: float = 0.1
    numeric_beta: tuple[float, ...] = ()
    baseline_rate: float = DEFAULT_BASELINE_RATE
    censor_rate: float = DEFAULT_CENSOR_RATE
    start_date: str = "2020-01-01"
    end_date: str = "2022-01-12"
    seed: int = 0

    def __post_init__(self):
        if self.baseline_rate <= 0 or self.censor_rate <= 0:
            raise ValueError("rates must be positive")
        object.__setattr__(self, "concepts", tuple(self.concepts))
        object.__setattr__(self, "numeric_beta", tuple(float(b) for b in self.numeric_beta))
        if len(self.numeric_beta) > self.n_numeric:
            raise ValueError("more numeric_beta entries than numeric columns")

    @property
    def true_beta(self) -> dict[str, float]:
        return {c.name: c.beta for c in self.concepts}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["concepts"] = [asdict(c) for c in self.concepts]
        d["numeric_beta"] = list(self.numeric_beta)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "GenConfig":
        d = dict(d or {})
        if "concepts" in d:
            d["concepts"] = tuple(ConceptSpec(**c) for c in d["concepts"])
        if "numeric_beta" in d:
            d["numeric_beta"] = tuple(d["numeric_beta"])
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    latent: dict[str, np.ndarray]
    delta: dict[str, float]
    beta: dict[str, float]
    hazard_multiplier: np.ndarray
    anchor_columns: dict[str, str]
    proxy_columns: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "latent": {k: v.astype(int).tolist() for k, v in self.latent.items()},
            "delta": self.delta,
            "beta": self.beta,
            "hazard_multiplier": self.hazard_multiplier.tolist(),
            "anchor_columns": self.anchor_columns,
            "proxy_columns": {k: list(v) for k, v in self.proxy_columns.items()},
        }


def anchor_column(concept: str) -> str:
    return f"{concept}_code"


def generate_cohort(config: GenConfig) -> tuple[Cohort, GroundTruth]:
    """Draw a cohort and the ground truth that produced it."""
    rng = np.random.default_rng(config.seed)
    n = config.n_patients
    metas: list[ColumnMeta] = []
    cols: list[np.ndarray] = []
    latent, anchors, proxies = {}, {}, {}
    log_hazard = np.zeros(n)

    for c in config.concepts:
        y = rng.random(n) < c.prevalence
        latent[c.name] = y.astype(int)
        observed = y & (rng.random(n) < c.delta)
        anchors[c.name] = anchor_column(c.name)
        metas.append(ColumnMeta(anchor_column(c.name), "diagnosis", "binary"))
        cols.append(observed.astype(float))
        base = math.log(c.proxy_base_rate / (1 - c.proxy_base_rate))
        p_proxy = 1.0 / (1.0 + np.exp(-(base + c.proxy_strength * y)))
        names = []
        for k in range(c.n_proxies):
            name = f"{c.name}_proxy{k}"
            names.append(name)
            metas.append(ColumnMeta(name, PROXY_KINDS[k % len(PROXY_KINDS)], "binary"))
            cols.append((rng.random(n) < p_proxy).astype(float))
        proxies[c.name] = tuple(names)
        log_hazard += c.beta * y

    for k in range(config.n_noise_features):
        metas.append(ColumnMeta(f"noise{k}", NOISE_KINDS[k % len(NOISE_KINDS)], "binary"))
        cols.append((rng.random(n) < 0.1).astype(float))

    concept_names = [c.name for c in config.concepts]
    for k in range(config.n_numeric):
        shift = 0.0
        if concept_names:
            shift = config.numeric_shift * latent[concept_names[k % len(concept_names)]]
        z = rng.normal(size=n) + shift
        if k < len(config.numeric_beta):
            # direct effect of the (fully observed) standardized value
            log_hazard += config.numeric_beta[k] * z
        value = 50.0 + 10.0 * z
        value[rng.random(n) < config.numeric_missing_rate] = np.nan
        metas.append(ColumnMeta(f"lab{k}", "lab", "continuous"))
        cols.append(value)

    labels = np.array([lv for lv, _ in LOCATIONS], dtype=object)
    probs = np.array([p for _, p in LOCATIONS])
    location = labels[rng.choice(len(labels), size=n, p=probs / probs.sum())]

    multiplier = np.exp(log_hazard)
    surv = rng.exponential(1.0 / (config.baseline_rate * multiplier))
    cens = rng.exponential(1.0 / config.censor_rate, size=n)
    time = np.minimum(surv, cens)
    event = (surv <= cens).astype(int)

    start = np.datetime64(config.start_date, "D")
    span = int((np.datetime64(config.end_date, "D") - start).astype(int))
    t0 = start + rng.integers(0, span, size=n).astype("timedelta64[D]")

    width = len(str(max(n - 1, 0)))
    cohort = Cohort(
        patient_ids=tuple(f"P{i:0{width}d}" for i in range(n)),
        t0=t0,
        time=time,
        event=event,
        features=np.column_stack(cols) if cols else np.zeros((n, 0)),
        columns=tuple(metas),
        categoricals=((ColumnMeta("test_location", "location", "categorical"), location),),
    )
    truth = GroundTruth(
        latent=latent,
        delta={c.name: c.delta for c in config.concepts},
        beta=config.true_beta,
        hazard_multiplier=multiplier,
        anchor_columns=anchors,
        proxy_columns=proxies,
    )
    return cohort, truth


def default_anchor_config(config: GenConfig) -> list[dict]:
    """Anchor configuration entries matching the generator's anchor columns."""
    return [{"concept": c.name, "anchors": [anchor_column(c.name)], "exclude": []} for c in config.concepts]


def event_fraction(cohort: Cohort) -> float:
    return float(np.mean(cohort.event)) if cohort.n else 0.0


def expected_event_fraction(config: GenConfig) -> float:
    """E[event] under the generator: E[h / (h + c)] over latent patterns.

    Exact enumeration over concept patterns; the Gaussian part of any direct
    numeric effects collapses to one normal with sd ``||numeric_beta||``,
    integrated by Gauss-Hermite quadrature.
    """
    gamma = np.asarray(config.numeric_beta, dtype=float)
    sd = float(np.linalg.norm(gamma))
    nodes, weights = np.polynomial.hermite_e.hermegauss(60 if sd > 0 else 1)
    weights = weights / weights.sum()
    names = [c.name for c in config.concepts]
    total = 0.0
    for pattern in itertools.product((0, 1), repeat=len(config.concepts)):
        prob = 1.0
        log_h = 0.0
        for on, c in zip(pattern, config.concepts):
            prob *= c.prevalence if on else 1 - c.prevalence
            log_h += c.beta * on
        for k, g in enumerate(gamma):
            if names:
                log_h += g * config.numeric_shift * pattern[k % len(names)]
        h = config.baseline_rate * np.exp(log_h + sd * nodes)
        total += prob * float(np.sum(weights * h / (h + config.censor_rate)))
    return total


def _bisect(f, lo: float, hi: float, iters: int = 200) -> float:
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def tune_baseline_rate(config: GenConfig, target: float = 0.168) -> float:
    """Baseline hazard giving an expected event fraction of ``target``."""
    if not 0 < target < 1:
        raise ValueError("target must lie in (0, 1)")
    f = lambda log_b: expected_event_fraction(replace(config, baseline_rate=math.exp(log_b))) - target
    return math.exp(_bisect(f, -30.0, 30.0))


def write_synthetic(cohort: Cohort, truth: GroundTruth, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_cohort(cohort, out_dir / "cohort.csv")
    truth_path = out_dir / "truth.json"
    truth_path.write_text(json.dumps(truth.to_dict(), sort_keys=True) + "\n")
    return csv_path, truth_path


# --------------------------------------------------------------------------
# plain Cox data for survival-model checks
# --------------------------------------------------------------------------


def _censor_fraction(rate: float, scale: float) -> float:
    # P(C < T) with T ~ Exp(exp(z)), z ~ N(0, scale^2), C ~ Exp(rate)
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    h = np.exp(scale * nodes)
    return float(np.sum(weights * rate / (rate + h)) / np.sqrt(2 * np.pi))


def censor_rate_for(beta, censor_fraction: float) -> float:
    """Exponential censoring rate giving the requested censored share for N(0, I) covariates."""
    scale = float(np.linalg.norm(beta))
    f = lambda log_c: _censor_fraction(math.exp(log_c), scale) - censor_fraction
    return math.exp(_bisect(f, -30.0, 30.0))


def generate_cox_data(n: int, beta, censor_fraction: float = 0.3, seed: int = 0):
    """Standard-normal covariates with exponential times from a known Cox model.

    Returns ``(X, time, event)``.
    """
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, beta.size))
    surv = rng.exponential(1.0 / np.exp(X @ beta))
    if censor_fraction <= 0:
        return X, surv, np.ones(n, dtype=int)
    cens = rng.exponential(1.0 / censor_rate_for(beta, censor_fraction), size=n)
    return X, np.minimum(surv, cens), (surv <= cens).astype(int)
