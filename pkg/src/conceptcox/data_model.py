"""Cohort container, CSV ingestion and the preprocessing steps.

Every transformation returns a new :class:`Cohort`.  Steps that learn
statistics (medians, z-score moments, category levels, kept columns) do so
from the cohort they are given and accept previously learned statistics so
that test data is transformed with training values only.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

KINDS = (
    "medication",
    "lab",
    "diagnosis",
    "vaccine",
    "symptom",
    "demographic",
    "location",
    "derived-concept",
)
DTYPES = ("binary", "continuous", "categorical")
REQUIRED = ("patient_id", "t0", "time", "event")
MISSING_SUFFIX = "__missing"


class CohortParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: str
    dtype: str = "binary"
    missing_indicator_for: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown column kind {self.kind!r} for {self.name!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r} for {self.name!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "dtype": self.dtype}
        if self.missing_indicator_for:
            d["missing_indicator_for"] = self.missing_indicator_for
        return d


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Cohort:
    """Patients x features with survival outcome.

    ``features`` holds numeric columns (NaN marks a missing cell).
    String-valued columns that have not yet been expanded to indicators
    live in ``categoricals`` as ``(meta, values)`` pairs, with ``None`` for
    missing entries.
    """

    patient_ids: tuple[str, ...]
    t0: np.ndarray
    time: np.ndarray
    event: np.ndarray
    features: np.ndarray
    columns: tuple[ColumnMeta, ...]
    categoricals: tuple[tuple[ColumnMeta, np.ndarray], ...] = ()

    def __post_init__(self):
        n = len(self.patient_ids)
        t0 = np.asarray(self.t0, dtype="datetime64[D]")
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2:
            feats = feats.reshape(n, -1)
        if not (t0.size == time.size == event.size == feats.shape[0] == n):
            raise ValueError("per-patient arrays have inconsistent lengths")
        if feats.shape[1] != len(self.columns):
            raise ValueError(f"{feats.shape[1]} feature columns but {len(self.columns)} column metas")
        if np.any(np.isnan(time)) or np.any(time < 0):
            raise ValueError("time must be nonnegative")
        if not np.isin(event, (0, 1)).all():
            raise ValueError("event must be 0/1")
        names = [c.name for c in self.columns] + [m.name for m, _ in self.categoricals]
        if len(set(names)) != len(names):
            dup = sorted({x for x in names if names.count(x) > 1})
            raise ValueError(f"duplicate column names: {dup}")
        if len(set(self.patient_ids)) != n:
            raise ValueError("duplicate patient ids")
        for j, c in enumerate(self.columns):
            col = feats[:, j]
            ok = col[~np.isnan(col)]
            if c.dtype == "binary" and not np.isin(ok, (0.0, 1.0)).all():
                raise ValueError(f"binary column {c.name!r} has values outside {{0, 1}}")
            if c.kind == "derived-concept" and np.any((ok < 0) | (ok > 1)):
                raise ValueError(f"concept column {c.name!r} leaves [0, 1]")
        cats = tuple((m, _frozen(np.asarray(v, dtype=object))) for m, v in self.categoricals)
        for m, v in cats:
            if v.shape != (n,):
                raise ValueError(f"categorical column {m.name!r} has wrong length")
        object.__setattr__(self, "patient_ids", tuple(str(p) for p in self.patient_ids))
        object.__setattr__(self, "t0", _frozen(t0))
        object.__setattr__(self, "time", _frozen(time))
        object.__setattr__(self, "event", _frozen(event.astype(int)))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "categoricals", cats)

    @property
    def n(self) -> int:
        return len(self.patient_ids)

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index(self, name: str) -> int:
        for j, c in enumerate(self.columns):
            if c.name == name:
                return j
        raise KeyError(name)

    def meta(self, name: str) -> ColumnMeta:
        return self.columns[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.index(name)]

    def select_rows(self, rows) -> "Cohort":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Cohort(
            patient_ids=tuple(self.patient_ids[i] for i in rows),
            t0=self.t0[rows],
            time=self.time[rows],
            event=self.event[rows],
            features=self.features[rows],
            columns=self.columns,
            categoricals=tuple((m, v[rows]) for m, v in self.categoricals),
        )

    def select_columns(self, names: Sequence[str]) -> "Cohort":
        idx = [self.index(nm) for nm in names]
        return replace(self, features=self.features[:, idx], columns=tuple(self.columns[i] for i in idx))

    def drop_columns(self, names: Iterable[str]) -> "Cohort":
        drop = set(names)
        return self.select_columns([c for c in self.column_names if c not in drop])

    def with_columns(self, metas: Sequence[ColumnMeta], values: np.ndarray) -> "Cohort":
        values = np.asarray(values, dtype=float).reshape(self.n, len(metas))
        return replace(
            self,
            features=np.hstack([self.features, values]),
            columns=self.columns + tuple(metas),
        )


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.stem + ".columns.json")


def _fmt(x: float, dtype: str) -> str:
    if np.isnan(x):
        return ""
    if dtype == "binary":
        return str(int(x))
    return repr(float(x))


def write_cohort(cohort: Cohort, path: str | Path, sidecar: bool = True) -> Path:
    """Write the cohort CSV (and a column-metadata sidecar next to it)."""
    path = Path(path)
    header = list(REQUIRED)
    header += [f"f:{c.kind}:{c.name}" for c in cohort.columns]
    header += [f"f:{m.kind}:{m.name}" for m, _ in cohort.categoricals]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(cohort.n):
            row = [
                cohort.patient_ids[i],
                str(cohort.t0[i]),
                repr(float(cohort.time[i])),
                str(int(cohort.event[i])),
            ]
            row += [_fmt(cohort.features[i, j], c.dtype) for j, c in enumerate(cohort.columns)]
            row += ["" if v[i] is None else str(v[i]) for _, v in cohort.categoricals]
            w.writerow(row)
    if sidecar:
        meta = {c.name: c.to_dict() for c in cohort.columns}
        meta.update({m.name: m.to_dict() for m, _ in cohort.categoricals})
        _sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _parse_float(s: str) -> float | None:
    try:
        return float(s)
    except ValueError:
        return None


def load_cohort(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    sidecar: str | Path | None = None,
) -> Cohort:
    """Read a cohort CSV.

    Parameters
    ----------
    path : path
        CSV with ``patient_id, t0, time, event`` followed by feature columns
        named ``f:<kind>:<name>``.  Empty cells are missing.
    schema : mapping, optional
        Expected ``name -> kind`` for feature columns; any disagreement or
        absent column is an error.
    sidecar : path, optional
        JSON of per-column overrides (``kind``, ``dtype``,
        ``missing_indicator_for``).  Defaults to ``<stem>.columns.json``
        beside the CSV when that file exists.

    Raises
    ------
    CohortParseError
        With the offending 1-based line number where one applies.
    """
    path = Path(path)
    sidecar = Path(sidecar) if sidecar is not None else _sidecar_path(path)
    overrides = json.loads(sidecar.read_text()) if sidecar.exists() else {}

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError("empty file", 1) from None
        for req in REQUIRED:
            if req not in header:
                raise CohortParseError(f"missing required column {req!r}", 1)
        feat_cols = []
        for pos, h in enumerate(header):
            if h in REQUIRED:
                continue
            parts = h.split(":", 2)
            if len(parts) != 3 or parts[0] != "f" or not parts[2]:
                raise CohortParseError(f"feature column {h!r} is not of the form f:<kind>:<name>", 1)
            kind = overrides.get(parts[2], {}).get("kind", parts[1])
            if kind not in KINDS:
                raise CohortParseError(f"unknown kind tag {parts[1]!r} in column {h!r}", 1)
            feat_cols.append((pos, parts[2], kind))

        ids, t0s, times, events, raw = [], [], [], [], []
        seen: dict[str, int] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortParseError(f"expected {len(header)} fields, found {len(row)}", line_no)
            rec = dict(zip(header, row))
            pid = rec["patient_id"].strip()
            if not pid:
                raise CohortParseError("empty patient_id", line_no)
            if pid in seen:
                raise CohortParseError(f"duplicate patient_id {pid!r} (first on line {seen[pid]})", line_no)
            seen[pid] = line_no
            try:
                t0 = dt.date.fromisoformat(rec["t0"].strip())
            except ValueError:
                raise CohortParseError(f"bad t0 date {rec['t0']!r}", line_no) from None
            t = _parse_float(rec["time"])
            if t is None or np.isnan(t):
                raise CohortParseError(f"bad time {rec['time']!r}", line_no)
            if t < 0:
                raise CohortParseError(f"negative time {t}", line_no)
            e = rec["event"].strip()
            if e not in ("0", "1"):
                raise CohortParseError(f"event must be 0 or 1, got {e!r}", line_no)
            ids.append(pid)
            t0s.append(t0)
            times.append(t)
            events.append(int(e))
            raw.append([row[pos].strip() for pos, _, _ in feat_cols])

    n = len(ids)
    columns, values, cats = [], [], []
    for j, (_, name, kind) in enumerate(feat_cols):
        cells = [r[j] for r in raw]
        ov = overrides.get(name, {})
        dtype = ov.get("dtype")
        parsed = [None if c == "" else _parse_float(c) for c in cells]
        numeric = all(p is not None for p, c in zip(parsed, cells) if c != "")
        if dtype is None:
            if not numeric:
                dtype = "categorical"
            else:
                present = {p for p in parsed if p is not None}
                dtype = "binary" if present <= {0.0, 1.0} else "continuous"
        if dtype == "categorical":
            meta = ColumnMeta(name, kind, "categorical", ov.get("missing_indicator_for"))
            cats.append((meta, np.array([c if c != "" else None for c in cells], dtype=object)))
            continue
        for i, (p, c) in enumerate(zip(parsed, cells)):
            if c != "" and p is None:
                raise CohortParseError(f"non-numeric value {c!r} in numeric column {name!r}", i + 2)
            if dtype == "binary" and p is not None and p not in (0.0, 1.0):
                raise CohortParseError(f"value {c!r} in binary column {name!r}", i + 2)
        columns.append(ColumnMeta(name, kind, dtype, ov.get("missing_indicator_for")))
        values.append([np.nan if p is None else p for p in parsed])

    if schema is not None:
        got = {c.name: c.kind for c in columns} | {m.name: m.kind for m, _ in cats}
        for name, kind in schema.items():
            if name not in got:
                raise CohortParseError(f"schema column {name!r} absent from file", 1)
            if got[name] != kind:
                raise CohortParseError(f"column {name!r} has kind {got[name]!r}, schema expects {kind!r}", 1)

    feats = np.array(values, dtype=float).T if values else np.zeros((n, 0))
    return Cohort(
        patient_ids=tuple(ids),
        t0=np.array(t0s, dtype="datetime64[D]"),
        time=np.array(times, dtype=float),
        event=np.array(events, dtype=int),
        features=feats.reshape(n, len(columns)),
        columns=tuple(columns),
        categoricals=tuple(cats),
    )


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def prevalence(cohort: Cohort, name: str) -> float:
    col = cohort.column(name)
    return float(np.mean(np.nan_to_num(col) != 0)) if cohort.n else 0.0


def cap_features_by_frequency(
    cohort: Cohort,
    k_default: int = 20,
    k_overrides: Mapping[str, int] | None = None,
) -> Cohort:
    """Keep the ``k`` most prevalent binary columns of each kind.

    Prevalence is the fraction of nonzero cells.  Equal prevalence is broken
    by ascending column name.  Continuous columns are never dropped.
    """
    k_overrides = dict(k_overrides or {})
    if k_default < 1 or any(k < 1 for k in k_overrides.values()):
        raise ValueError("caps must be >= 1")
    by_kind: dict[str, list[tuple[float, str]]] = {}
    for c in cohort.columns:
        if c.dtype == "binary" and c.missing_indicator_for is None:
            by_kind.setdefault(c.kind, []).append((-prevalence(cohort, c.name), c.name))
    drop = set()
    for kind, entries in by_kind.items():
        k = k_overrides.get(kind, k_default)
        entries.sort()
        drop.update(name for _, name in entries[k:])
    return cohort.drop_columns(drop)


def categorical_levels(cohort: Cohort) -> dict[str, list[str]]:
    return {
        m.name: sorted({str(x) for x in v if x is not None}) for m, v in cohort.categoricals
    }


def expand_categoricals(
    cohort: Cohort,
    levels: Mapping[str, Sequence[str]] | None = None,
    max_levels: int = 64,
) -> Cohort:
    """Replace each string column by 0/1 indicators named ``<col>=<level>``.

    ``levels`` defaults to the levels observed in this cohort; pass the
    training levels when transforming test data (unseen levels map to all
    zeros).
    """
    if levels is None:
        levels = categorical_levels(cohort)
    metas, blocks = [], []
    for m, v in cohort.categoricals:
        lv = list(levels.get(m.name, []))
        if len(lv) > max_levels:
            raise ValueError(
                f"categorical column {m.name!r} has {len(lv)} levels (limit {max_levels})"
            )
        vals = np.array(["" if x is None else str(x) for x in v], dtype=object)
        for level in lv:
            metas.append(ColumnMeta(f"{m.name}={level}", m.kind, "binary"))
            blocks.append((vals == level).astype(float))
    base = replace(cohort, categoricals=())
    if not metas:
        return base
    return base.with_columns(metas, np.column_stack(blocks))


@dataclass(frozen=True)
class ImputeStats:
    medians: dict[str, float]
    indicators: tuple[str, ...]
    dropped: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"medians": self.medians, "indicators": list(self.indicators), "dropped": list(self.dropped)}

    @classmethod
    def from_dict(cls, d: dict) -> "ImputeStats":
        return cls(dict(d["medians"]), tuple(d["indicators"]), tuple(d.get("dropped", ())))


def impute_missing(cohort: Cohort, stats: ImputeStats | None = None) -> tuple[Cohort, ImputeStats]:
    """Median imputation with a ``<col>__missing`` indicator for continuous columns.

    Binary columns read missing as 0.  Without ``stats`` the medians and the
    set of indicator columns come from this cohort; a continuous column that
    is entirely missing is dropped with a warning.
    """
    feats = cohort.features.copy()
    if stats is None:
        medians, indicators, dropped = {}, [], []
        for j, c in enumerate(cohort.columns):
            if c.dtype != "continuous":
                continue
            col = feats[:, j]
            miss = np.isnan(col)
            if miss.all():
                dropped.append(c.name)
                warnings.warn(f"column {c.name!r} is entirely missing; dropped", UserWarning, stacklevel=2)
                continue
            medians[c.name] = float(np.median(col[~miss]))
            if miss.any():
                indicators.append(c.name)
        stats = ImputeStats(medians, tuple(indicators), tuple(dropped))

    new_metas, new_vals = [], []
    for j, c in enumerate(cohort.columns):
        if c.name in stats.dropped:
            continue
        col = feats[:, j]
        miss = np.isnan(col)
        if c.dtype == "continuous":
            if c.name not in stats.medians:
                raise KeyError(f"no imputation median for column {c.name!r}")
            col[miss] = stats.medians[c.name]
            if c.name in stats.indicators:
                new_metas.append(ColumnMeta(c.name + MISSING_SUFFIX, c.kind, "binary", c.name))
                new_vals.append(miss.astype(float))
        else:
            col[miss] = 0.0
    out = replace(cohort, features=feats).drop_columns(stats.dropped)
    if new_metas:
        out = out.with_columns(new_metas, np.column_stack(new_vals))
    return out, stats


@dataclass(frozen=True)
class NormStats:
    mean: dict[str, float]
    std: dict[str, float]
    flagged: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(dict(d["mean"]), dict(d["std"]), tuple(d.get("flagged", ())))


def normalize_continuous(cohort: Cohort, stats: NormStats | None = None) -> tuple[Cohort, NormStats]:
    """Z-score continuous columns with population moments.

    Without ``stats`` the moments are computed here and returned for reuse
    on test data.  Zero-variance columns are left as they are and listed in
    ``stats.flagged``.
    """
    cont = [(j, c.name) for j, c in enumerate(cohort.columns) if c.dtype == "continuous"]
    feats = cohort.features.copy()
    if stats is None:
        mean, std, flagged = {}, {}, []
        for j, name in cont:
            col = feats[:, j]
            m = float(np.nanmean(col)) if col.size else 0.0
            s = float(np.nanstd(col)) if col.size else 0.0
            # rounding can leave a constant column with a tiny nonzero std
            if s > 1e-12 * max(1.0, abs(m)):
                mean[name], std[name] = m, s
            else:
                flagged.append(name)
        stats = NormStats(mean, std, tuple(flagged))
    for j, name in cont:
        if name in stats.flagged:
            continue
        if name not in stats.mean:
            raise KeyError(f"normalization stats do not cover column {name!r}")
        feats[:, j] = (feats[:, j] - stats.mean[name]) / stats.std[name]
    return replace(cohort, features=feats), stats


def filter_low_variance(cohort: Cohort, threshold: float = 0.01) -> Cohort:
    """Drop columns whose population variance is below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    var = np.nanvar(cohort.features, axis=0) if cohort.n else np.zeros(len(cohort.columns))
    keep = [c.name for c, v in zip(cohort.columns, var) if not v < threshold]
    if not keep:
        raise ValueError(f"every column has variance below {threshold}; nothing left to fit")
    return cohort.select_columns(keep)


@dataclass(frozen=True)
class PrepConfig:
    k_default: int = 20
    k_overrides: dict[str, int] = field(default_factory=lambda: {"lab": 50})
    variance_threshold: float = 0.01
    max_levels: int = 64

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "PrepConfig":
        d = dict(d or {})
        return cls(
            k_default=int(d.get("k_default", 20)),
            k_overrides={k: int(v) for k, v in d.get("k_overrides", {"lab": 50}).items()},
            variance_threshold=float(d.get("variance_threshold", 0.01)),
            max_levels=int(d.get("max_levels", 64)),
        )


@dataclass(frozen=True)
class PrepState:
    """Everything the preprocessing learned from the training rows."""

    capped_columns: tuple[str, ...]
    levels: dict[str, list[str]]
    impute: ImputeStats
    norm: NormStats
    kept_columns: tuple[str, ...]
    metas: tuple[ColumnMeta, ...]

    def to_dict(self) -> dict:
        return {
            "capped_columns": list(self.capped_columns),
            "levels": self.levels,
            "impute": self.impute.to_dict(),
            "norm": self.norm.to_dict(),
            "kept_columns": list(self.kept_columns),
            "metas": {m.name: m.to_dict() for m in self.metas},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrepState":
        metas = tuple(ColumnMeta(name, **m) for name, m in d["metas"].items())
        return cls(
            capped_columns=tuple(d["capped_columns"]),
            levels={k: list(v) for k, v in d["levels"].items()},
            impute=ImputeStats.from_dict(d["impute"]),
            norm=NormStats.from_dict(d["norm"]),
            kept_columns=tuple(d["kept_columns"]),
            metas=metas,
        )


def fit_preprocessing(train: Cohort, config: PrepConfig | None = None) -> tuple[Cohort, PrepState]:
    """Cap -> expand categoricals -> impute -> normalize -> variance filter, fit on ``train``."""
    config = config or PrepConfig()
    capped = cap_features_by_frequency(train, config.k_default, config.k_overrides)
    levels = categorical_levels(capped)
    expanded = expand_categoricals(capped, levels, config.max_levels)
    imputed, istats = impute_missing(expanded)
    normed, nstats = normalize_continuous(imputed)
    final = filter_low_variance(normed, config.variance_threshold)
    state = PrepState(
        capped_columns=tuple(capped.column_names),
        levels=levels,
        impute=istats,
        norm=nstats,
        kept_columns=tuple(final.column_names),
        metas=final.columns,
    )
    return final, state


def apply_preprocessing(cohort: Cohort, state: PrepState) -> Cohort:
    """Transform any cohort with statistics learned by :func:`fit_preprocessing`."""
    missing = [c for c in state.capped_columns if c not in cohort.column_names]
    if missing:
        raise KeyError(f"cohort lacks training columns: {missing[:5]}")
    capped = cohort.select_columns(list(state.capped_columns))
    capped = replace(capped, categoricals=tuple((m, v) for m, v in cohort.categoricals if m.name in state.levels))
    limit = max([64] + [len(v) for v in state.levels.values()])
    expanded = expand_categoricals(capped, state.levels, max_levels=limit)
    imputed, _ = impute_missing(expanded, state.impute)
    normed, _ = normalize_continuous(imputed, state.norm)
    return normed.select_columns(list(state.kept_columns))
