"""Anchor-and-learn concept extraction from positive and unlabeled data.

For a concept with positive anchor ``x_c`` and remaining covariates
``x_rest``, a logistic model ``g(x_rest) ~ p(x_c = 1 | x_rest)`` is fit on
anchor-present vs anchor-absent rows.  When the anchor is a uniformly
random subset of true positives, ``g / delta`` recovers
``p(concept | x_rest)``, where ``delta = p(x_c = 1 | concept)`` is estimated
as the mean of ``g`` over anchor-present rows of a held-out split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import Cohort

DELTA_FLOOR = 1e-3


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        self.grad_norm = grad_norm
        super().__init__(f"{message} (last gradient norm {grad_norm:.3g})")


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logistic_objective(Xa, y, theta, l2):
    z = Xa @ theta
    # sum of log(1 + e^z) - y z, computed stably
    loss = np.sum(np.logaddexp(0.0, z) - y * z)
    return loss + 0.5 * l2 * np.dot(theta[1:], theta[1:])


def fit_logistic(
    X,
    y,
    l2_strength: float = 1.0,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> tuple[np.ndarray, float]:
    """L2-penalized logistic regression by damped Newton (IRLS).

    Minimizes ``sum(logloss) + 0.5 * l2_strength * ||w||^2`` with an
    unpenalized intercept; ``l2_strength = 1`` corresponds to an inverse
    regularization strength of 1.

    Returns
    -------
    weights, intercept
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if np.isnan(X).any():
        raise ValueError("X contains missing values")
    if y.size == 0 or np.all(y == y[0]):
        raise ValueError("y is constant; nothing to discriminate")
    if l2_strength < 0:
        raise ValueError("l2_strength must be nonnegative")
    n, p = X.shape
    Xa = np.hstack([np.ones((n, 1)), X])
    ridge = np.full(p + 1, l2_strength)
    ridge[0] = 0.0
    theta = np.zeros(p + 1)
    theta[0] = np.log(y.mean() / (1 - y.mean()))
    obj = _logistic_objective(Xa, y, theta, l2_strength)
    grad_norm = np.inf
    for _ in range(max_iter):
        mu = _sigmoid(Xa @ theta)
        grad = Xa.T @ (mu - y) + ridge * theta
        grad_norm = float(np.linalg.norm(grad))
        w = mu * (1 - mu)
        H = (Xa * w[:, None]).T @ Xa + np.diag(ridge)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            cand_obj = _logistic_objective(Xa, y, cand, l2_strength)
            if cand_obj <= obj or t < 1e-10:
                break
            t *= 0.5
        change = float(np.max(np.abs(cand - theta)))
        theta, obj = cand, cand_obj
        if change < tol:
            return theta[1:].copy(), float(theta[0])
    raise ConvergenceError(f"logistic regression did not converge in {max_iter} iterations", grad_norm)


def estimate_delta(g_on_positives, floor: float = DELTA_FLOOR) -> float:
    """Label frequency estimate: mean classifier output on anchor-present rows."""
    g = np.asarray(g_on_positives, dtype=float)
    if g.size == 0:
        raise ValueError("no anchor-positive rows to estimate the label frequency from")
    if np.any((g < 0) | (g > 1)):
        raise ValueError("classifier outputs must lie in [0, 1]")
    return max(float(np.mean(g)), floor)


@dataclass(frozen=True)
class AnchorSpec:
    concept_name: str
    anchor_columns: tuple[str, ...]
    excluded_columns: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "anchor_columns", tuple(self.anchor_columns))
        object.__setattr__(self, "excluded_columns", tuple(self.excluded_columns))
        if not self.anchor_columns:
            raise ValueError(f"concept {self.concept_name!r} has no anchor columns")
        overlap = set(self.anchor_columns) & set(self.excluded_columns)
        if overlap:
            raise ValueError(f"columns both anchor and excluded: {sorted(overlap)}")

    def to_dict(self) -> dict:
        return {
            "concept": self.concept_name,
            "anchors": list(self.anchor_columns),
            "exclude": list(self.excluded_columns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSpec":
        return cls(d["concept"], tuple(d["anchors"]), tuple(d.get("exclude", ())))


def load_anchor_specs(path_or_entries) -> list[AnchorSpec]:
    """Anchor configuration: a JSON file path or an already-parsed list."""
    if isinstance(path_or_entries, (str, Path)):
        entries = json.loads(Path(path_or_entries).read_text())
    else:
        entries = path_or_entries
    specs = [AnchorSpec.from_dict(e) for e in entries]
    names = [s.concept_name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate concept names in anchor configuration")
    return specs


@dataclass(frozen=True)
class ConceptModel:
    spec: AnchorSpec
    weights: np.ndarray
    intercept: float
    delta_hat: float
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if not 0 < self.delta_hat <= 1:
            raise ValueError("delta_hat must lie in (0, 1]")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.feature_names),):
            raise ValueError("weights and feature_names differ in length")
        banned = set(self.spec.anchor_columns) | set(self.spec.excluded_columns)
        if banned & set(self.feature_names):
            raise ValueError("anchor or excluded columns among classifier features")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def name(self) -> str:
        return self.spec.concept_name

    def score(self, X) -> np.ndarray:
        """g(x): probability that the anchor is present given the other covariates."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.weights.size:
            raise ValueError(f"expected {self.weights.size} features, got {X.shape[-1]}")
        return _sigmoid(np.atleast_1d(X @ self.weights + self.intercept))

    def posterior(self, X, anchor_present) -> np.ndarray:
        g = self.score(X)
        p = np.minimum(1.0, g / self.delta_hat)
        return np.where(np.asarray(anchor_present, dtype=bool), 1.0, p)

    def design(self, cohort: Cohort) -> np.ndarray:
        missing = [f for f in self.feature_names if f not in cohort.column_names]
        if missing:
            raise KeyError(f"cohort lacks classifier features: {missing[:5]}")
        return cohort.features[:, [cohort.index(f) for f in self.feature_names]]

    def anchor_present(self, cohort: Cohort) -> np.ndarray:
        return anchor_indicator(cohort, self.spec)

    def posteriors(self, cohort: Cohort) -> np.ndarray:
        return self.posterior(self.design(cohort), self.anchor_present(cohort))

    def to_dict(self) -> dict:
        return {
            **self.spec.to_dict(),
            "feature_names": list(self.feature_names),
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "delta_hat": float(self.delta_hat),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptModel":
        return cls(
            spec=AnchorSpec.from_dict(d),
            weights=np.asarray(d["weights"], dtype=float),
            intercept=float(d["intercept"]),
            delta_hat=float(d["delta_hat"]),
            feature_names=tuple(d["feature_names"]),
        )


def concept_posterior(model: ConceptModel, row, anchor_present: bool) -> float:
    """Probability the concept is present for one patient.

    1.0 when the anchor is present, otherwise ``min(1, g(row) / delta_hat)``.
    """
    row = np.asarray(row, dtype=float)
    if row.shape != (model.weights.size,):
        raise ValueError(f"row has shape {row.shape}, model expects ({model.weights.size},)")
    if anchor_present:
        return 1.0
    return float(model.posterior(row[None, :], [False])[0])


def anchor_indicator(cohort: Cohort, spec: AnchorSpec) -> np.ndarray:
    """OR of the AnchorSpec's anchor columns (missing counts as absent)."""
    cols = []
    for name in spec.anchor_columns:
        if name not in cohort.column_names:
            raise KeyError(f"anchor column {name!r} not in cohort")
        if cohort.meta(name).dtype != "binary":
            raise ValueError(f"anchor column {name!r} is not binary")
        cols.append(np.nan_to_num(cohort.column(name)) > 0)
    return np.logical_or.reduce(cols)


def classifier_columns(cohort: Cohort, spec: AnchorSpec) -> list[str]:
    for name in spec.excluded_columns:
        if name not in cohort.column_names:
            raise KeyError(f"excluded column {name!r} not in cohort")
    banned = set(spec.anchor_columns) | set(spec.excluded_columns)
    return [c.name for c in cohort.columns if c.name not in banned and c.kind != "derived-concept"]


def calibration_split(anchor: np.ndarray, calib_fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of the calibration rows, stratified by anchor presence."""
    rng = np.random.default_rng(seed)
    mask = np.zeros(anchor.size, dtype=bool)
    for label in (True, False):
        idx = np.flatnonzero(anchor == label)
        take = int(round(calib_fraction * idx.size))
        mask[idx[rng.permutation(idx.size)[:take]]] = True
    return mask


def fit_concept(
    train: Cohort,
    spec: AnchorSpec,
    calib_fraction: float = 0.2,
    l2_strength: float = 1.0,
    seed: int = 0,
) -> ConceptModel:
    """Fit the anchor classifier on one split and estimate delta on the other."""
    if not 0 < calib_fraction < 1:
        raise ValueError("calib_fraction must lie in (0, 1)")
    anchor = anchor_indicator(train, spec)
    prev = anchor.mean() if anchor.size else 0.0
    if prev <= 0 or prev >= 1:
        raise ValueError(f"anchor prevalence for {spec.concept_name!r} is {prev:g}; need 0 < p < 1")
    names = classifier_columns(train, spec)
    X = train.features[:, [train.index(c) for c in names]]
    if np.isnan(X).any():
        raise ValueError("classifier features contain missing values; impute first")
    calib = calibration_split(anchor, calib_fraction, seed)
    if not anchor[calib].any():
        raise ValueError(f"calibration split for {spec.concept_name!r} has no anchor positives")
    if anchor[~calib].all() or not anchor[~calib].any():
        raise ValueError(f"fitting split for {spec.concept_name!r} has a constant anchor")
    w, b = fit_logistic(X[~calib], anchor[~calib].astype(float), l2_strength=l2_strength)
    g_pos = _sigmoid(X[calib & anchor] @ w + b)
    return ConceptModel(spec, w, b, estimate_delta(g_pos), tuple(names))


@dataclass(frozen=True)
class ConceptReport:
    concept_name: str
    n_test: int
    new_positives: int
    new_positive_fraction: float
    original_positives: int
    original_positive_fraction: float
    recall: float
    recall_count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def concept_report(model: ConceptModel, test: Cohort, threshold: float = 0.5) -> ConceptReport:
    """Recall among anchor-positive rows (scored with the anchor masked) and new positives."""
    anchor = model.anchor_present(test)
    masked = model.posterior(model.design(test), np.zeros(test.n, dtype=bool))
    hit = masked > threshold
    n_orig = int(anchor.sum())
    recall_count = int(np.sum(hit & anchor))
    new = int(np.sum(hit & ~anchor))
    n = test.n
    return ConceptReport(
        concept_name=model.name,
        n_test=n,
        new_positives=new,
        new_positive_fraction=new / n if n else 0.0,
        original_positives=n_orig,
        original_positive_fraction=n_orig / n if n else 0.0,
        recall=recall_count / n_orig if n_orig else float("nan"),
        recall_count=recall_count,
    )


def fit_concepts(
    train: Cohort,
    specs: Sequence[AnchorSpec],
    calib_fraction: float = 0.2,
    l2_strength: float = 1.0,
    seed: int = 0,
) -> tuple[list[ConceptModel], list[str]]:
    """Fit every concept whose anchors survived preprocessing.

    Anchor columns missing from ``train`` (e.g. removed by the variance
    filter) are ignored; a concept with none left is skipped and reported in
    the second return value.
    """
    models, skipped = [], []
    present = set(train.column_names)
    for k, spec in enumerate(specs):
        anchors = tuple(a for a in spec.anchor_columns if a in present)
        excluded = tuple(e for e in spec.excluded_columns if e in present)
        if not anchors:
            skipped.append(spec.concept_name)
            continue
        spec_here = AnchorSpec(spec.concept_name, anchors, excluded)
        try:
            models.append(fit_concept(train, spec_here, calib_fraction, l2_strength, seed + 7919 * k))
        except ValueError:
            skipped.append(spec.concept_name)
    return models, skipped
