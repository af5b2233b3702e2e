"""Seasonal back-testing: retrain per horizon, score every later season's test split."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import Cohort
from .evaluation import BootstrapCI, bootstrap_c_index, c_index
from .modeling import FeatureSetVariant, ModelConfig, train_model
from .pu_concepts import AnchorSpec

STUDY_START = dt.date(2020, 1, 1)
STUDY_END = dt.date(2022, 1, 12)

# (month, day, code) of each season's first day, in calendar order
SEASON_STARTS = ((3, 20, "SP"), (6, 21, "SU"), (9, 22, "F"), (12, 21, "W"))
SEASON_NAMES = {"SP": "spring", "SU": "summer", "F": "fall", "W": "winter"}


def _as_date(d) -> dt.date:
    if isinstance(d, dt.datetime):
        return d.date()
    if isinstance(d, dt.date):
        return d
    if isinstance(d, np.datetime64):
        return dt.date.fromisoformat(str(d.astype("datetime64[D]")))
    return dt.date.fromisoformat(str(d))


@dataclass(frozen=True)
class SeasonWindow:
    """Half-open date interval ``[start, end)`` with a label like ``"SP 2020"``."""

    label: str
    start: dt.date
    end: dt.date

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"{self.label}: start must precede end")

    def contains(self, date) -> bool:
        return self.start <= _as_date(date) < self.end

    def to_dict(self) -> dict:
        return {"label": self.label, "start": self.start.isoformat(), "end": self.end.isoformat()}


def _season_containing(date: dt.date) -> tuple[str, int, dt.date, dt.date]:
    """Unclipped season around ``date``: (code, label year, start, end)."""
    starts = []
    for year in (date.year - 1, date.year, date.year + 1):
        for month, day, code in SEASON_STARTS:
            starts.append((dt.date(year, month, day), code))
    for (s, code), (e, _) in zip(starts, starts[1:]):
        if s <= date < e:
            return code, s.year, s, e
    raise AssertionError("unreachable")


def season_windows(start=STUDY_START, end=STUDY_END) -> list[SeasonWindow]:
    """Seasons tiling ``[start, end)``; the first and last are clipped to the range."""
    start, end = _as_date(start), _as_date(end)
    if not start < end:
        raise ValueError("study start must precede study end")
    windows = []
    cursor = start
    while cursor < end:
        code, year, _, s_end = _season_containing(cursor)
        stop = min(s_end, end)
        windows.append(SeasonWindow(f"{code} {year}", cursor, stop))
        cursor = stop
    return windows


def season_of(date, start=STUDY_START, end=STUDY_END) -> SeasonWindow:
    """Window containing ``date``; winter keeps the label of the year it starts in."""
    date = _as_date(date)
    start, end = _as_date(start), _as_date(end)
    if not start <= date < end:
        raise ValueError(f"{date} is outside the study range [{start}, {end})")
    for w in season_windows(start, end):
        if w.contains(date):
            return w
    raise AssertionError("windows do not tile the range")


def season_index(t0: np.ndarray, windows: Sequence[SeasonWindow]) -> np.ndarray:
    """Window position of each index date; raises if any date is outside all windows."""
    t0 = np.asarray(t0).astype("datetime64[D]")
    bounds = np.array([np.datetime64(w.start.isoformat()) for w in windows] + [np.datetime64(windows[-1].end.isoformat())])
    idx = np.searchsorted(bounds, t0, side="right") - 1
    bad = (idx < 0) | (idx >= len(windows))
    if bad.any():
        raise ValueError(f"{int(bad.sum())} index dates fall outside the study range, e.g. {t0[bad][0]}")
    return idx


def _hash_key(seed: int, season: str, pid: str) -> bytes:
    return hashlib.blake2b(f"{seed}:{season}:{pid}".encode(), digest_size=16).digest()


def split_assignment(cohort: Cohort, seed: int = 0, windows: Sequence[SeasonWindow] | None = None) -> np.ndarray:
    """Boolean train mask: within each season the round(0.7 n) patients with
    the smallest keyed hash of (seed, season, patient id) go to train."""
    windows = list(windows) if windows is not None else season_windows()
    seasons = season_index(cohort.t0, windows)
    train = np.zeros(cohort.n, dtype=bool)
    for s in np.unique(seasons):
        rows = np.flatnonzero(seasons == s)
        keys = [_hash_key(seed, windows[s].label, cohort.patient_ids[i]) for i in rows]
        order = sorted(range(rows.size), key=keys.__getitem__)
        n_train = int(math.floor(0.7 * rows.size + 0.5))
        train[rows[order[:n_train]]] = True
    return train


def split_70_30(cohort: Cohort, seed: int = 0, windows: Sequence[SeasonWindow] | None = None) -> tuple[Cohort, Cohort]:
    """Per-season 70/30 train/test partition, fixed by (patient id, season, seed)."""
    if cohort.n == 0:
        raise ValueError("cannot split an empty cohort")
    mask = split_assignment(cohort, seed, windows)
    return cohort.select_rows(np.flatnonzero(mask)), cohort.select_rows(np.flatnonzero(~mask))


@dataclass(frozen=True)
class BacktestCell:
    c_index: float | None
    ci: BootstrapCI | None = None
    n_test: int = 0
    reason: str | None = None

    @property
    def present(self) -> bool:
        return self.c_index is not None

    def to_dict(self) -> dict:
        d = {"c_index": self.c_index, "n_test": self.n_test}
        if self.ci is not None:
            d["ci"] = self.ci.to_dict()
        if self.reason is not None:
            d["reason"] = self.reason
        return d


ABSENT = BacktestCell(None, reason="evaluation season precedes the training horizon")


@dataclass(frozen=True)
class BacktestMatrix:
    """Rows are training horizons, columns evaluation seasons.

    ``aggregate`` is the model trained on every season's train split, scored
    per season and on the pooled test set (key ``"all"``).
    """

    variant: str
    seasons: tuple[SeasonWindow, ...]
    row_labels: tuple[str, ...]
    cells: tuple[tuple[BacktestCell, ...], ...]
    row_notes: tuple[str | None, ...]
    aggregate: dict[str, BacktestCell]
    train_sizes: tuple[int, ...]
    leakage: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(w.label for w in self.seasons)

    def values(self) -> np.ndarray:
        """Matrix of C-indices with NaN for absent cells (aggregate row last)."""
        rows = [[c.c_index if c.present else np.nan for c in row] for row in self.cells]
        rows.append([self.aggregate[s].c_index if self.aggregate[s].present else np.nan for s in self.columns])
        return np.array(rows, dtype=float)

    def presence(self) -> np.ndarray:
        return np.array([[c.present for c in row] for row in self.cells], dtype=bool)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trained_up_to", *self.columns, "all"])
        for label, row in zip(self.row_labels, self.cells):
            w.writerow([label, *(_fmt(c) for c in row), ""])
        w.writerow(["aggregate", *(_fmt(self.aggregate[s]) for s in self.columns), _fmt(self.aggregate["all"])])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seasons": [w.to_dict() for w in self.seasons],
            "rows": [
                {
                    "trained_up_to": label,
                    "train_size": size,
                    "note": note,
                    "cells": {s: c.to_dict() for s, c in zip(self.columns, row)},
                }
                for label, size, note, row in zip(self.row_labels, self.train_sizes, self.row_notes, self.cells)
            ],
            "aggregate": {k: v.to_dict() for k, v in self.aggregate.items()},
            "leakage": self.leakage,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"backtest_{self.variant}"
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


def _fmt(cell: BacktestCell) -> str:
    return "-" if not cell.present else f"{cell.c_index:.4f}"


def _score(model, test: Cohort, n_boot: int, seed: int) -> BacktestCell:
    if test.n == 0:
        return BacktestCell(None, n_test=0, reason="empty test split")
    risk = model.risk(test)
    try:
        c = c_index(test.time, test.event, risk)
    except ValueError as exc:
        return BacktestCell(None, n_test=test.n, reason=str(exc))
    ci = bootstrap_c_index(test.time, test.event, risk, B=n_boot, seed=seed) if n_boot > 0 else None
    return BacktestCell(c, ci, test.n)


def run_backtest(
    cohort: Cohort,
    variant: FeatureSetVariant | str,
    anchors: Sequence[AnchorSpec],
    config: ModelConfig | None = None,
    seed: int = 0,
    start=STUDY_START,
    end=STUDY_END,
    n_boot: int = 200,
) -> BacktestMatrix:
    """Train on all train splits up to each season's end; test on that and later seasons.

    Penalties default to the target-sparsity rule (about ten features).
    """
    variant = FeatureSetVariant(variant)
    config = config or ModelConfig(lambda_selection="sparsity")
    windows = season_windows(start, end)
    seasons = season_index(cohort.t0, windows)
    used = sorted(set(seasons.tolist()))
    if len(used) < 2:
        raise ValueError("back-testing needs a cohort spanning at least two seasons")
    windows = [windows[i] for i in range(used[0], used[-1] + 1)]
    seasons = seasons - used[0]
    is_train = split_assignment(cohort, seed, windows)
    pid = np.asarray(cohort.patient_ids, dtype=object)
    test_ids = set(pid[~is_train])
    tests = [cohort.select_rows(np.flatnonzero(~is_train & (seasons == s))) for s in range(len(windows))]

    leakage = 0
    cells, notes, sizes, labels = [], [], [], []
    for h, window in enumerate(windows):
        labels.append(f"end of {SEASON_NAMES[window.label.split()[0]]} {window.label.split()[1]}")
        rows = np.flatnonzero(is_train & (seasons <= h))
        sizes.append(int(rows.size))
        leakage += len(test_ids.intersection(pid[rows]))
        train = cohort.select_rows(rows)
        row = [ABSENT] * h
        try:
            model = train_model(train, variant, anchors, config, seed)
        except ValueError as exc:
            reason = f"training failed: {exc}"
            notes.append(reason)
            cells.append(tuple(row + [BacktestCell(None, reason=reason)] * (len(windows) - h)))
            continue
        notes.append(None)
        for s in range(h, len(windows)):
            row.append(_score(model, tests[s], n_boot, seed + 1000 * h + s))
        cells.append(tuple(row))

    rows = np.flatnonzero(is_train)
    leakage += len(test_ids.intersection(pid[rows]))
    aggregate: dict[str, BacktestCell] = {}
    try:
        model = train_model(cohort.select_rows(rows), variant, anchors, config, seed)
        for s, window in enumerate(windows):
            aggregate[window.label] = _score(model, tests[s], n_boot, seed + 999_000 + s)
        aggregate["all"] = _score(model, cohort.select_rows(np.flatnonzero(~is_train)), n_boot, seed + 999_999)
    except ValueError as exc:
        reason = f"training failed: {exc}"
        aggregate = {w.label: BacktestCell(None, reason=reason) for w in windows}
        aggregate["all"] = BacktestCell(None, reason=reason)
    if leakage:
        raise AssertionError(f"{leakage} test rows leaked into training sets")

    return BacktestMatrix(
        variant=variant.value,
        seasons=tuple(windows),
        row_labels=tuple(labels),
        cells=tuple(cells),
        row_notes=tuple(notes),
        aggregate=aggregate,
        train_sizes=tuple(sizes),
        leakage=leakage,
    )
