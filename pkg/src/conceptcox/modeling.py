"""Feature-set assembly and the train/predict core shared by the pipeline and back-testing."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .data_model import Cohort, PrepConfig, PrepState, apply_preprocessing, fit_preprocessing
from .pu_concepts import AnchorSpec, ConceptModel, fit_concepts
from .survival import (
    BaselineHazard,
    CoxFit,
    SurvivalData,
    breslow_baseline,
    default_lambda_grid,
    lambda_path,
    select_lambda_cv,
    select_lambda_sparsity,
)

CONCEPT_PREFIX = "lc:"


class FeatureSetVariant(str, Enum):
    RAW_ANCHORS = "raw_anchors"
    LC_ONLY = "lc_only"
    LC_PLUS_NUMERIC = "lc_plus_numeric"
    LC_PLUS_ALL = "lc_plus_all"
    ALL_FEATURES = "all_features"

    @property
    def needs_concepts(self) -> bool:
        return self in (FeatureSetVariant.LC_ONLY, FeatureSetVariant.LC_PLUS_NUMERIC, FeatureSetVariant.LC_PLUS_ALL)


def concept_column(name: str) -> str:
    return CONCEPT_PREFIX + name


def design_matrix(
    cohort: Cohort,
    concept_models: Sequence[ConceptModel],
    variant: FeatureSetVariant | str,
    anchor_specs: Sequence[AnchorSpec] | None = None,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Covariate matrix and column names for one feature-set variant."""
    variant = FeatureSetVariant(variant)
    blocks: list[np.ndarray] = []
    names: list[str] = []

    if variant is FeatureSetVariant.RAW_ANCHORS:
        specs = list(anchor_specs) if anchor_specs is not None else [m.spec for m in concept_models]
        if not specs:
            raise ValueError("raw_anchors needs anchor specifications")
        present = set(cohort.column_names)
        cols = []
        for spec in specs:
            cols.extend(a for a in spec.anchor_columns if a in present and a not in cols)
        if not cols:
            raise ValueError("none of the anchor columns survive in this cohort")
        return cohort.features[:, [cohort.index(c) for c in cols]], tuple(cols)

    if variant.needs_concepts:
        if not concept_models:
            raise ValueError(f"variant {variant.value} requires fitted concept models")
        for m in concept_models:
            blocks.append(m.posteriors(cohort)[:, None])
            names.append(concept_column(m.name))

    if variant is FeatureSetVariant.LC_PLUS_NUMERIC:
        cols = [c.name for c in cohort.columns if c.dtype == "continuous"]
        blocks.append(cohort.features[:, [cohort.index(c) for c in cols]])
        names.extend(cols)
    elif variant in (FeatureSetVariant.LC_PLUS_ALL, FeatureSetVariant.ALL_FEATURES):
        blocks.append(cohort.features)
        names.extend(cohort.column_names)

    if len(set(names)) != len(names):
        raise ValueError("concept column names collide with cohort columns")
    X = np.hstack(blocks) if blocks else np.zeros((cohort.n, 0))
    return X, tuple(names)


def assemble_feature_set(
    cohort: Cohort,
    concept_models: Sequence[ConceptModel],
    variant: FeatureSetVariant | str,
    anchor_specs: Sequence[AnchorSpec] | None = None,
) -> SurvivalData:
    """Survival design for a variant.

    ``raw_anchors`` takes anchor columns from ``anchor_specs`` (or from the
    concept models' specs); ``lc_*`` variants use one posterior column per
    concept, named ``lc:<concept>``.
    """
    X, names = design_matrix(cohort, concept_models, variant, anchor_specs)
    return SurvivalData(X, cohort.time, cohort.event, names)


@dataclass(frozen=True)
class ModelConfig:
    prep: PrepConfig = field(default_factory=PrepConfig)
    calib_fraction: float = 0.2
    l2_strength: float = 1.0
    lambda_selection: str = "cv"
    target_nnz: int = 10
    cv_folds: int = 5
    lambda_grid: tuple[float, float, float] = (0.0, 0.2, 0.001)
    tol: float = 1e-7

    def __post_init__(self):
        if self.lambda_selection not in ("cv", "sparsity"):
            raise ValueError("lambda_selection must be 'cv' or 'sparsity'")

    def grid(self) -> np.ndarray:
        return default_lambda_grid(*self.lambda_grid)

    def to_dict(self) -> dict:
        return {
            "prep": {
                "k_default": self.prep.k_default,
                "k_overrides": dict(sorted(self.prep.k_overrides.items())),
                "variance_threshold": self.prep.variance_threshold,
                "max_levels": self.prep.max_levels,
            },
            "calib_fraction": self.calib_fraction,
            "l2_strength": self.l2_strength,
            "lambda_selection": self.lambda_selection,
            "target_nnz": self.target_nnz,
            "cv_folds": self.cv_folds,
            "lambda_grid": list(self.lambda_grid),
            "tol": self.tol,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        d = dict(d or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model settings: {sorted(unknown)}")
        if "prep" in d:
            d["prep"] = PrepConfig.from_dict(d["prep"])
        if "lambda_grid" in d:
            d["lambda_grid"] = tuple(float(x) for x in d["lambda_grid"])
        return cls(**d)


@dataclass(frozen=True)
class TrainedModel:
    variant: FeatureSetVariant
    prep_state: PrepState
    concept_models: tuple[ConceptModel, ...]
    skipped_concepts: tuple[str, ...]
    anchor_specs: tuple[AnchorSpec, ...]
    fit: CoxFit
    baseline: BaselineHazard
    train_data: SurvivalData = field(repr=False, compare=False)

    def design(self, cohort: Cohort) -> np.ndarray:
        """Transform a raw cohort into this model's covariate matrix."""
        prepped = apply_preprocessing(cohort, self.prep_state)
        X, names = design_matrix(prepped, self.concept_models, self.variant, self.anchor_specs)
        if names != self.fit.feature_names:
            raise ValueError("design columns differ from the fitted model's")
        return X

    def risk(self, cohort: Cohort) -> np.ndarray:
        return self.design(cohort) @ self.fit.beta

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "preprocessing": self.prep_state.to_dict(),
            "concepts": [m.to_dict() for m in self.concept_models],
            "skipped_concepts": list(self.skipped_concepts),
            "cox": self.fit.to_dict(),
            "baseline": self.baseline.to_dict(),
        }


def select_and_fit(data: SurvivalData, config: ModelConfig, seed: int = 0) -> CoxFit:
    """Choose the penalty per ``config`` and return the fit at that penalty."""
    grid = config.grid()
    if config.lambda_selection == "sparsity":
        path = lambda_path(data, grid, tol=config.tol)
        return path.fit_for(select_lambda_sparsity(path, config.target_nnz))
    lam = select_lambda_cv(data, grid, k=config.cv_folds, seed=seed, tol=config.tol)
    # warm start from the fit just above on the grid keeps this cheap
    return lambda_path(data, grid[grid >= lam], tol=config.tol).fits[0]


def train_model(
    train: Cohort,
    variant: FeatureSetVariant | str,
    anchor_specs: Sequence[AnchorSpec],
    config: ModelConfig | None = None,
    seed: int = 0,
) -> TrainedModel:
    """Preprocess, fit concepts when the variant needs them, then fit Lasso-Cox."""
    config = config or ModelConfig()
    variant = FeatureSetVariant(variant)
    if train.event.sum() == 0:
        raise ValueError("training cohort has no events")
    prepped, state = fit_preprocessing(train, config.prep)
    models: list[ConceptModel] = []
    skipped: list[str] = []
    if variant.needs_concepts:
        models, skipped = fit_concepts(prepped, anchor_specs, config.calib_fraction, config.l2_strength, seed)
    data = assemble_feature_set(prepped, models, variant, anchor_specs)
    fit = select_and_fit(data, config, seed)
    return TrainedModel(
        variant=variant,
        prep_state=state,
        concept_models=tuple(models),
        skipped_concepts=tuple(skipped),
        anchor_specs=tuple(anchor_specs),
        fit=fit,
        baseline=breslow_baseline(fit, data),
        train_data=data,
    )
