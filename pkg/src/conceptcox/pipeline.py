"""End-to-end orchestration: configuration, staged execution and artifact export.

A run writes into a temporary sibling directory and is renamed into place
only when every stage succeeds, so a failed run leaves no partial output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import matplotlib
import numpy as np

from . import __version__
from .backtest import STUDY_END, STUDY_START, BacktestMatrix, run_backtest, season_windows, split_assignment
from .data_model import Cohort, apply_preprocessing, fit_preprocessing, load_cohort, write_cohort
from .evaluation import EvalReport, evaluate_predictions
from .modeling import (
    FeatureSetVariant,
    ModelConfig,
    TrainedModel,
    assemble_feature_set,
    train_model,
)
from .plots import plot_d_calibration, plot_km, plot_one_calibration
from .pu_concepts import AnchorSpec, concept_report, load_anchor_specs
from .sankey import export_sankey, write_sankey
from .survival import hazard_ratio_table, predict_survival
from .synthcohort import GenConfig, GroundTruth, default_anchor_config, generate_cohort, write_synthetic

__all__ = [
    "FeatureSetVariant",
    "PipelineConfig",
    "PipelineError",
    "assemble_feature_set",
    "export_sankey",
    "run_pipeline",
]

ALL_VARIANTS = tuple(FeatureSetVariant)
PRODUCTS = ("synth", "prep", "concepts", "fit", "eval", "sankey", "backtest")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass(frozen=True)
class BacktestSettings:
    enabled: bool = False
    variants: tuple[FeatureSetVariant, ...] = (FeatureSetVariant.LC_ONLY,)
    n_boot: int = 200
    model: ModelConfig = field(default_factory=lambda: ModelConfig(lambda_selection="sparsity"))

    @classmethod
    def from_dict(cls, d: dict | None) -> "BacktestSettings":
        d = dict(d or {})
        _check_keys(d, {"enabled", "variants", "n_boot", "model"}, "backtest")
        return cls(
            enabled=bool(d.get("enabled", False)),
            variants=tuple(FeatureSetVariant(v) for v in d.get("variants", ["lc_only"])),
            n_boot=int(d.get("n_boot", 200)),
            model=ModelConfig.from_dict({"lambda_selection": "sparsity", **d.get("model", {})}),
        )

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "variants": [v.value for v in self.variants],
            "n_boot": self.n_boot,
            "model": self.model.to_dict(),
        }


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run depends on.  Relative paths resolve against ``base_dir``."""

    cohort_path: str | None = None
    synth: GenConfig = field(default_factory=GenConfig)
    anchors: tuple[AnchorSpec, ...] | None = None
    variants: tuple[FeatureSetVariant, ...] = ALL_VARIANTS
    model: ModelConfig = field(default_factory=ModelConfig)
    horizon: float = 14.0
    n_bins: int = 10
    n_boot: int = 1000
    hr_boot: int = 100
    sankey_top_k: int = 10
    study_start: str = STUDY_START.isoformat()
    study_end: str = STUDY_END.isoformat()
    backtest: BacktestSettings = field(default_factory=BacktestSettings)
    seed: int = 0
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not self.variants:
            raise ValueError("at least one feature-set variant is required")
        if self.cohort_path is not None and self.anchors is None:
            raise ValueError("an input cohort needs an anchor configuration")

    @property
    def anchor_specs(self) -> tuple[AnchorSpec, ...]:
        if self.anchors is not None:
            return self.anchors
        return tuple(load_anchor_specs(default_anchor_config(self.synth)))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @classmethod
    def from_dict(cls, d: dict | None, base_dir: str | Path = ".") -> "PipelineConfig":
        d = dict(d or {})
        _check_keys(
            d,
            {
                "cohort", "synth", "anchors", "variants", "model", "evaluation",
                "hazard_ratios", "sankey", "study", "backtest", "seed",
            },
            "config",
        )
        ev = dict(d.get("evaluation", {}))
        _check_keys(ev, {"horizon", "n_bins", "n_boot"}, "evaluation")
        study = dict(d.get("study", {}))
        _check_keys(study, {"start", "end"}, "study")
        anchors = d.get("anchors")
        if isinstance(anchors, str):
            p = Path(anchors)
            anchors = load_anchor_specs(p if p.is_absolute() else Path(base_dir) / p)
        elif anchors is not None:
            anchors = load_anchor_specs(anchors)
        return cls(
            cohort_path=d.get("cohort"),
            synth=GenConfig.from_dict(d.get("synth")),
            anchors=tuple(anchors) if anchors is not None else None,
            variants=tuple(FeatureSetVariant(v) for v in d.get("variants", [v.value for v in ALL_VARIANTS])),
            model=ModelConfig.from_dict(d.get("model")),
            horizon=float(ev.get("horizon", 14.0)),
            n_bins=int(ev.get("n_bins", 10)),
            n_boot=int(ev.get("n_boot", 1000)),
            hr_boot=int(dict(d.get("hazard_ratios", {})).get("n_boot", 100)),
            sankey_top_k=int(dict(d.get("sankey", {})).get("top_k", 10)),
            study_start=str(study.get("start", STUDY_START.isoformat())),
            study_end=str(study.get("end", STUDY_END.isoformat())),
            backtest=BacktestSettings.from_dict(d.get("backtest")),
            seed=int(d.get("seed", 0)),
            base_dir=str(base_dir),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        """Canonical form; its hash identifies the run."""
        synth = None
        if self.cohort_path is None:
            # the run seed drives generation, so the generator's own seed is not part of the config
            synth = {k: v for k, v in self.synth.to_dict().items() if k != "seed"}
        return {
            "cohort": self.cohort_path,
            "synth": synth,
            "anchors": [a.to_dict() for a in self.anchor_specs],
            "variants": [v.value for v in self.variants],
            "model": self.model.to_dict(),
            "evaluation": {"horizon": self.horizon, "n_bins": self.n_bins, "n_boot": self.n_boot},
            "hazard_ratios": {"n_boot": self.hr_boot},
            "sankey": {"top_k": self.sankey_top_k},
            "study": {"start": self.study_start, "end": self.study_end},
            "backtest": self.backtest.to_dict(),
            "seed": self.seed,
        }

    def sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")


def _clean(obj: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(rows: list[dict], header: Iterable[str] | None = None) -> str:
    buf = io.StringIO()
    header = list(header) if header is not None else (list(rows[0]) if rows else [])
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else v) for k, v in _clean(row).items()})
    return buf.getvalue()


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Run:
    """Mutable state threaded through the stages of one invocation."""

    def __init__(self, config: PipelineConfig, seed: int, out: Path):
        self.config = config
        self.seed = seed
        self.out = out
        self.cohort: Cohort | None = None
        self.truth: GroundTruth | None = None
        self.train_mask: np.ndarray | None = None
        self.models: dict[FeatureSetVariant, TrainedModel] = {}
        self.evals: dict[FeatureSetVariant, EvalReport] = {}
        self.report: dict[str, Any] = {}

    def write(self, rel: str, text: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path

    # -- stages ---------------------------------------------------------

    def load(self) -> None:
        cfg = self.config
        if cfg.cohort_path is not None:
            self.cohort = load_cohort(cfg.resolve(cfg.cohort_path))
        else:
            synth = GenConfig.from_dict({**cfg.synth.to_dict(), "seed": self.seed})
            self.cohort, self.truth = generate_cohort(synth)
        self.report["cohort"] = {
            "n": self.cohort.n,
            "n_columns": len(self.cohort.column_names) + len(self.cohort.categoricals),
            "event_fraction": float(np.mean(self.cohort.event)),
            "source": "file" if cfg.cohort_path else "synthetic",
        }

    def write_synth(self) -> None:
        if self.truth is None:
            raise ValueError("synth needs a synthetic configuration, not an input cohort")
        write_synthetic(self.cohort, self.truth, self.out)

    def split(self) -> None:
        windows = season_windows(self.config.study_start, self.config.study_end)
        self.train_mask = split_assignment(self.cohort, self.seed, windows)
        self.report["cohort"].update(n_train=int(self.train_mask.sum()), n_test=int((~self.train_mask).sum()))

    @property
    def train(self) -> Cohort:
        return self.cohort.select_rows(np.flatnonzero(self.train_mask))

    @property
    def test(self) -> Cohort:
        return self.cohort.select_rows(np.flatnonzero(~self.train_mask))

    def prep(self) -> None:
        prepped, state = fit_preprocessing(self.train, self.config.model.prep)
        self.write("preprocessing.json", canonical_json(state.to_dict()))
        write_cohort(prepped, self.out / "prepped_train.csv")
        write_cohort(apply_preprocessing(self.test, state), self.out / "prepped_test.csv")

    def fit(self, variants: Iterable[FeatureSetVariant]) -> None:
        train = self.train
        for v in variants:
            if v not in self.models:
                self.models[v] = train_model(train, v, self.config.anchor_specs, self.config.model, self.seed)

    def concepts(self) -> None:
        lc = [v for v in self.config.variants if v.needs_concepts] or [FeatureSetVariant.LC_ONLY]
        self.fit(lc[:1])
        model = self.models[lc[0]]
        test_prepped = apply_preprocessing(self.test, model.prep_state)
        test_rows = np.flatnonzero(~self.train_mask)
        rows = []
        for cm in model.concept_models:
            row = {**concept_report(cm, test_prepped).to_dict(), "delta_hat": cm.delta_hat}
            if self.truth is not None and cm.name in self.truth.latent:
                latent = self.truth.latent[cm.name][test_rows] == 1
                row["true_delta"] = self.truth.delta[cm.name]
                row["hidden_positives"] = int(np.sum(latent & ~cm.anchor_present(test_prepped)))
            rows.append(row)
        header = [
            "concept_name", "delta_hat", "true_delta", "recall", "recall_count", "new_positives",
            "new_positive_fraction", "hidden_positives", "original_positives",
            "original_positive_fraction", "n_test",
        ]
        header = [h for h in header if any(h in r for r in rows)]
        self.write("tables/concepts.csv", _csv_text(rows, header))
        self.write("models/concepts.json", canonical_json([cm.to_dict() for cm in model.concept_models]))
        self.report["concepts"] = rows
        self.report["skipped_concepts"] = list(model.skipped_concepts)

    def hazard_ratios(self) -> None:
        for v in self.config.variants:
            m = self.models[v]
            rows = hazard_ratio_table(m.train_data, m.fit, n_boot=self.config.hr_boot, seed=self.seed)
            self.write(f"tables/hazard_ratios_{v.value}.csv", _csv_text(rows, ["feature", "coef", "hr", "hr_lo", "hr_hi"]))
            self.write(f"models/model_{v.value}.json", canonical_json(m.to_dict()))

    def evaluate(self) -> None:
        cfg = self.config
        test = self.test
        subgroups = {}
        for meta, values in test.categoricals:
            for level in sorted(set(values.tolist())):
                subgroups[f"{meta.name}={level}"] = values == level
        variants = {}
        for v in cfg.variants:
            m = self.models[v]
            X = m.design(test)
            risk = X @ m.fit.beta
            s_h = predict_survival(m.fit, m.baseline, X, cfg.horizon)
            s_t = predict_survival(m.fit, m.baseline, X, test.time)
            ev = evaluate_predictions(
                test.time, test.event, risk, 1.0 - s_h, s_t,
                subgroups=subgroups, horizon=cfg.horizon, n_bins=cfg.n_bins,
                n_boot=cfg.n_boot, seed=self.seed,
            )
            self.evals[v] = ev
            variants[v.value] = {
                **ev.to_dict(),
                "lambda": m.fit.lam,
                "nnz": m.fit.nnz,
                "n_features": len(m.fit.feature_names),
                "coefficients": {n: b for n, b in zip(m.fit.feature_names, m.fit.beta) if b != 0},
            }
            km_rows = [{"stratum": g, **r} for g, km in ev.km_curves.items() for r in km.to_rows()]
            self.write(f"tables/km_{v.value}.csv", _csv_text(km_rows, ["stratum", "time", "survival", "at_risk", "events", "censored"]))
            self.write(f"tables/one_calibration_{v.value}.csv", _csv_text(ev.one_calibration.to_rows()))
            self.write(f"tables/d_calibration_{v.value}.csv", _csv_text(ev.d_calibration.to_rows()))
            (self.out / "figures").mkdir(exist_ok=True)
            plot_km(ev.km_curves, self.out / f"figures/km_{v.value}.svg", title=f"Kaplan-Meier, {v.value}")
            plot_one_calibration(ev.one_calibration, self.out / f"figures/one_calibration_{v.value}.svg", title=f"One-calibration at day {cfg.horizon:g}, {v.value}")
            plot_d_calibration(ev.d_calibration, self.out / f"figures/d_calibration_{v.value}.svg", title=f"D-calibration, {v.value}")
        self.report["variants"] = variants
        primary = cfg.variants[0]
        self.report["primary_variant"] = primary.value
        self.report["c_index"] = self.evals[primary].c_index_point

    def sankey(self) -> None:
        for v in self.config.variants:
            m = self.models[v]
            graph = export_sankey(m.concept_models, m.fit, top_k=self.config.sankey_top_k, model_label=v.value)
            write_sankey(graph, self.out / "figures", stem=f"sankey_{v.value}")

    def backtest(self) -> None:
        cfg = self.config
        results: dict[str, BacktestMatrix] = {}
        for v in cfg.backtest.variants:
            results[v.value] = run_backtest(
                self.cohort, v, cfg.anchor_specs, cfg.backtest.model, self.seed,
                start=cfg.study_start, end=cfg.study_end, n_boot=cfg.backtest.n_boot,
            )
            results[v.value].write(self.out / "tables", stem=f"backtest_{v.value}")
        self.report["backtest"] = {k: m.to_dict() for k, m in results.items()}

    def finish(self) -> None:
        self.report["seed"] = self.seed
        self.report["config_sha256"] = self.config.sha256()
        self.write("report.json", canonical_json(self.report))
        self.write("config.json", canonical_json(self.config.to_dict()))
        files = sorted(p for p in self.out.rglob("*") if p.is_file())
        manifest = {
            "config_sha256": self.config.sha256(),
            "seed": self.seed,
            "versions": {
                "conceptcox": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "matplotlib": matplotlib.__version__,
            },
            "files": {p.relative_to(self.out).as_posix(): _sha256_file(p) for p in files},
        }
        self.write("manifest.json", canonical_json(manifest))


def _plan(products: set[str], config: PipelineConfig) -> list[tuple[str, Any]]:
    unknown = products - set(PRODUCTS)
    if unknown:
        raise ValueError(f"unknown products: {sorted(unknown)}")
    steps: list[tuple[str, Any]] = [("load", lambda r: r.load())]
    if "synth" in products:
        steps.append(("synth", lambda r: r.write_synth()))
    needs_split = products & {"prep", "concepts", "fit", "eval", "sankey"}
    if needs_split:
        steps.append(("split", lambda r: r.split()))
    if "prep" in products:
        steps.append(("prep", lambda r: r.prep()))
    if "concepts" in products:
        steps.append(("concepts", lambda r: r.concepts()))
    if products & {"fit", "eval", "sankey"}:
        steps.append(("fit", lambda r: r.fit(config.variants)))
    if "fit" in products:
        steps.append(("hazard_ratios", lambda r: r.hazard_ratios()))
    if "eval" in products:
        steps.append(("evaluate", lambda r: r.evaluate()))
    if "sankey" in products:
        steps.append(("sankey", lambda r: r.sankey()))
    if "backtest" in products:
        steps.append(("backtest", lambda r: r.backtest()))
    steps.append(("finish", lambda r: r.finish()))
    return steps


def _is_replaceable(out: Path) -> bool:
    return out.is_dir() and (not any(out.iterdir()) or (out / "manifest.json").is_file())


def run_pipeline(
    config: PipelineConfig | dict | str | Path,
    out: str | Path,
    seed: int | None = None,
    products: Iterable[str] | None = None,
) -> Path:
    """Execute the configured stages and write artifacts to ``out``.

    ``products`` selects outputs (see ``PRODUCTS``); the default is the full
    run: concepts, fitted models with hazard ratios, evaluation, Sankey, and
    the back-test when the config enables it.  An existing ``out`` is
    replaced only if it is empty or holds a previous run.
    """
    if isinstance(config, (str, Path)):
        config = PipelineConfig.load(config)
    elif isinstance(config, dict):
        config = PipelineConfig.from_dict(config)
    seed = config.seed if seed is None else int(seed)
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    if products is None:
        products = {"concepts", "fit", "eval", "sankey"} | ({"backtest"} if config.backtest.enabled else set())
    products = set(products)

    out = Path(out)
    if out.exists() and not _is_replaceable(out):
        raise PipelineError("output", f"{out} exists and is not an earlier run's output directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.partial-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    run = _Run(config, seed, tmp)
    try:
        for name, step in _plan(products, config):
            try:
                step(run)
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise PipelineError(name, exc) from exc
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)
    return out
