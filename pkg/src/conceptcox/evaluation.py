"""Discrimination and calibration metrics for survival predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

EXACT_C_INDEX_MAX_N = 2000


# --------------------------------------------------------------------------
# concordance
# --------------------------------------------------------------------------


def _c_counts_exact(time, event, risk):
    comparable = (time[:, None] < time[None, :]) & (event[:, None] == 1)
    higher = risk[:, None] > risk[None, :]
    same = risk[:, None] == risk[None, :]
    return int(np.sum(comparable & higher)), int(np.sum(comparable & same)), int(comparable.sum())


def _dense_rank(risk: np.ndarray) -> tuple[np.ndarray, int]:
    uniq, rank = np.unique(risk, return_inverse=True)
    return rank + 1, uniq.size


def _prefix(tree, k, acc=0):
    while k > 0:
        acc = acc + tree[k]
        k -= k & -k
    return acc


def _c_counts_fenwick(time, event, risk):
    rank, m = _dense_rank(risk)
    tree = [0] * (m + 1)
    order = np.argsort(-time, kind="stable")
    t_sorted = time[order]
    conc = ties = pairs = inserted = 0
    i = 0
    n = time.size
    while i < n:
        j = i
        while j < n and t_sorted[j] == t_sorted[i]:
            j += 1
        group = order[i:j]
        for s in group:
            if event[s] != 1:
                continue
            r = int(rank[s])
            below = _prefix(tree, r - 1)
            upto = _prefix(tree, r)
            conc += below
            ties += upto - below
            pairs += inserted
        for s in group:
            k = int(rank[s])
            while k <= m:
                tree[k] += 1
                k += k & -k
            inserted += 1
        i = j
    return conc, ties, pairs


def c_index(time, event, risk) -> float:
    """Harrell's concordance index.

    A pair (i, j) is comparable when ``time[i] < time[j]`` and subject i had
    the event; it is concordant when ``risk[i] > risk[j]``.  Tied risks earn
    half credit.  Exact pair enumeration is used up to
    ``EXACT_C_INDEX_MAX_N`` rows and an O(n log n) Fenwick-tree count above,
    both returning identical integer counts.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(int)
    risk = np.asarray(risk, dtype=float)
    if not (time.size == event.size == risk.size):
        raise ValueError("time, event and risk must have equal length")
    if time.size <= EXACT_C_INDEX_MAX_N:
        conc, ties, pairs = _c_counts_exact(time, event, risk)
    else:
        conc, ties, pairs = _c_counts_fenwick(time, event, risk)
    if pairs == 0:
        raise ValueError("no comparable pairs")
    return (conc + 0.5 * ties) / pairs


def _weighted_c_counts(time, event, risk, weights):
    """Concordance counts for many row-weightings at once (weights: n x B)."""
    rank, m = _dense_rank(risk)
    B = weights.shape[1]
    tree = np.zeros((m + 1, B))
    conc = np.zeros(B)
    ties = np.zeros(B)
    pairs = np.zeros(B)
    inserted = np.zeros(B)
    order = np.argsort(-time, kind="stable")
    t_sorted = time[order]
    n = time.size
    i = 0
    while i < n:
        j = i
        while j < n and t_sorted[j] == t_sorted[i]:
            j += 1
        group = order[i:j]
        for s in group:
            if event[s] != 1:
                continue
            w = weights[s]
            if not w.any():
                continue
            r = int(rank[s])
            below = _prefix(tree, r - 1, np.zeros(B))
            upto = _prefix(tree, r, np.zeros(B))
            conc += w * below
            ties += w * (upto - below)
            pairs += w * inserted
        for s in group:
            w = weights[s]
            if not w.any():
                continue
            k = int(rank[s])
            while k <= m:
                tree[k] += w
                k += k & -k
            inserted += w
        i = j
    return conc, ties, pairs


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapCI:
    median: float
    lo: float
    hi: float
    n_dropped: int = 0
    level: float = 0.95

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "lo": self.lo,
            "hi": self.hi,
            "n_dropped": self.n_dropped,
            "level": self.level,
        }


def _replicate_indices(n: int, seed: int, r: int) -> np.ndarray:
    return np.random.default_rng([seed, r]).integers(0, n, n)


def _summarize(values: np.ndarray, n_dropped: int, level: float) -> BootstrapCI:
    if values.size == 0:
        raise ValueError("metric undefined on every bootstrap replicate")
    alpha = 100 * (1 - level) / 2
    med, lo, hi = np.percentile(values, [50.0, alpha, 100.0 - alpha])
    return BootstrapCI(float(med), float(lo), float(hi), n_dropped, level)


def bootstrap_ci(
    metric: Callable[..., float],
    data: Sequence[np.ndarray],
    B: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> BootstrapCI:
    """Percentile bootstrap interval for ``metric(*data)``.

    Rows of every array in ``data`` are resampled together.  Replicate ``r``
    draws from its own stream seeded by ``(seed, r)``, so results do not
    depend on evaluation order.  Replicates on which the metric raises
    ``ValueError`` are dropped and counted.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    arrays = [np.asarray(a) for a in data]
    n = arrays[0].shape[0]
    values = []
    dropped = 0
    for r in range(B):
        idx = _replicate_indices(n, seed, r)
        try:
            values.append(float(metric(*(a[idx] for a in arrays))))
        except ValueError:
            dropped += 1
    return _summarize(np.asarray(values), dropped, level)


def bootstrap_c_index(time, event, risk, B: int = 1000, seed: int = 0, level: float = 0.95) -> BootstrapCI:
    """Same replicates as ``bootstrap_ci(c_index, ...)``, computed in one weighted pass."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(int)
    risk = np.asarray(risk, dtype=float)
    n = time.size
    weights = np.empty((n, B))
    for r in range(B):
        weights[:, r] = np.bincount(_replicate_indices(n, seed, r), minlength=n)
    conc, ties, pairs = _weighted_c_counts(time, event, risk, weights)
    ok = pairs > 0
    values = (conc[ok] + 0.5 * ties[ok]) / pairs[ok]
    return _summarize(values, int((~ok).sum()), level)


# --------------------------------------------------------------------------
# Kaplan-Meier and risk strata
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous survival step function starting at (0, 1)."""

    times: np.ndarray
    values: np.ndarray
    at_risk: np.ndarray = field(default=None, compare=False, repr=False)
    events: np.ndarray = field(default=None, compare=False, repr=False)
    censored: np.ndarray = field(default=None, compare=False, repr=False)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 1.0)
        return float(out) if out.ndim == 0 else out

    def to_rows(self) -> list[dict]:
        rows = []
        for k, (t, v) in enumerate(zip(self.times, self.values)):
            row = {"time": float(t), "survival": float(v)}
            if self.at_risk is not None:
                row.update(
                    at_risk=int(self.at_risk[k]),
                    events=int(self.events[k]),
                    censored=int(self.censored[k]),
                )
            rows.append(row)
        return rows


def kaplan_meier(time, event) -> StepFunction:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(int)
    if time.size == 0:
        raise ValueError("Kaplan-Meier needs at least one subject")
    uniq = np.unique(time)
    idx = np.searchsorted(uniq, time)
    deaths = np.bincount(idx, weights=event, minlength=uniq.size)
    total = np.bincount(idx, minlength=uniq.size)
    at_risk = time.size - np.concatenate([[0], np.cumsum(total)[:-1]])
    factor = 1.0 - deaths / at_risk
    surv = np.cumprod(factor)
    keep = deaths > 0
    censored_between = total - deaths
    times = np.concatenate([[0.0], uniq[keep]])
    values = np.concatenate([[1.0], surv[keep]])
    # at-risk/event/censored counts reported at each step time
    cens_cum = np.cumsum(censored_between)
    return StepFunction(
        times=times,
        values=values,
        at_risk=np.concatenate([[time.size], at_risk[keep]]),
        events=np.concatenate([[0], deaths[keep]]).astype(int),
        censored=np.concatenate([[0], cens_cum[keep]]).astype(int),
    )


def _ceil_fraction(frac: float, n: int) -> int:
    return int(math.ceil(round(frac * n, 9)))


def risk_strata(risk, cuts: tuple[float, float] = (0.10, 0.25)) -> np.ndarray:
    """Label rows 'high' (top cuts[0]), 'medium' (up to cuts[1]) or 'low'.

    Group sizes are ceil(cuts[0]*n) and ceil(cuts[1]*n) - ceil(cuts[0]*n);
    equal risks are ordered by ascending row index.
    """
    risk = np.asarray(risk, dtype=float)
    n = risk.size
    if n == 0:
        raise ValueError("empty risk vector")
    order = np.lexsort((np.arange(n), -risk))
    n_high = _ceil_fraction(cuts[0], n)
    n_top = _ceil_fraction(cuts[1], n)
    labels = np.full(n, "low", dtype=object)
    labels[order[:n_high]] = "high"
    labels[order[n_high:n_top]] = "medium"
    return labels


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationBins:
    kind: str  # "one" or "d"
    edges: np.ndarray
    observed: np.ndarray
    predicted: np.ndarray | None = None
    count: np.ndarray | None = None

    def to_rows(self) -> list[dict]:
        rows = []
        for b in range(self.observed.size):
            row = {"bin": b, "lower": float(self.edges[b]), "upper": float(self.edges[b + 1])}
            if self.kind == "one":
                row["predicted"] = float(self.predicted[b])
                row["observed"] = None if np.isnan(self.observed[b]) else float(self.observed[b])
                row["count"] = int(self.count[b])
            else:
                row["mass"] = float(self.observed[b])
            rows.append(row)
        return rows

    def max_gap(self) -> float:
        gap = np.abs(self.predicted - self.observed)
        return float(np.nanmax(gap))


def one_calibration(pred_event_prob, time, event, t: float = 14.0, n_bins: int = 10) -> CalibrationBins:
    """Predicted vs. Kaplan-Meier observed event probability at horizon ``t``.

    Rows are sorted by predicted probability and split into ``n_bins``
    equal-count groups.  A bin whose KM curve is undefined at ``t`` (nobody
    left at risk and the last exit was a censoring) reports NaN.
    """
    p = np.asarray(pred_event_prob, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(int)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    groups = np.array_split(order, n_bins)
    edges = [p[order[0]]] if p.size else [0.0]
    predicted, observed, count = [], [], []
    for g in groups:
        edges.append(p[g[-1]] if g.size else edges[-1])
        count.append(g.size)
        if g.size == 0:
            predicted.append(np.nan)
            observed.append(np.nan)
            continue
        predicted.append(p[g].mean())
        km = kaplan_meier(time[g], event[g])
        surv = km(t)
        reached = np.any(time[g] >= t)
        if not reached and surv > 0:
            observed.append(np.nan)
        else:
            observed.append(1.0 - surv)
    return CalibrationBins(
        kind="one",
        edges=np.asarray(edges),
        observed=np.asarray(observed),
        predicted=np.asarray(predicted),
        count=np.asarray(count),
    )


def calibration_slope(bins: CalibrationBins) -> float:
    """Least-squares slope of observed on predicted across defined bins."""
    ok = ~np.isnan(bins.observed) & ~np.isnan(bins.predicted)
    if ok.sum() < 2:
        raise ValueError("need two defined bins for a slope")
    return float(np.polyfit(bins.predicted[ok], bins.observed[ok], 1)[0])


def d_calibration(surv_at_time, event, n_bins: int = 10) -> CalibrationBins:
    """Distribution of predicted survival at each subject's observed time.

    ``surv_at_time[i]`` is S_i(T_i) for an event or S_i(C_i) for a censored
    row.  Events put unit mass in the bin holding S_i(T_i).  A censored row
    with s = S_i(C_i) spreads its unit mass uniformly over [0, s].  Bars are
    normalized by n so they sum to one.
    """
    s = np.clip(np.asarray(surv_at_time, dtype=float), 0.0, 1.0)
    event = np.asarray(event).astype(int)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    width = 1.0 / n_bins
    mass = np.zeros(n_bins)
    which = np.minimum((s * n_bins).astype(int), n_bins - 1)

    ev = event == 1
    mass += np.bincount(which[ev], minlength=n_bins)

    cens = ~ev
    zero = cens & (s <= 0.0)
    mass[0] += zero.sum()
    pos = cens & (s > 0.0)
    sc = s[pos]
    kc = which[pos]
    lower = edges[kc]
    # bin holding s gets (s - lower)/s; each bin wholly below s gets width/s
    np.add.at(mass, kc, (sc - lower) / sc)
    # rows in bin 0 have nothing below; skipping them also avoids adding and
    # removing a huge width/s at the same index when s is tiny
    up = kc > 0
    below = np.zeros(n_bins + 1)
    np.add.at(below, np.zeros(up.sum(), dtype=int), width / sc[up])
    np.add.at(below, kc[up], -width / sc[up])
    mass += np.cumsum(below)[:n_bins]
    return CalibrationBins(kind="d", edges=edges, observed=mass / s.size)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    c_index: BootstrapCI
    subgroup_c_index: dict[str, BootstrapCI | None]
    one_calibration: CalibrationBins
    d_calibration: CalibrationBins
    km_curves: dict[str, StepFunction]
    strata_sizes: dict[str, int]
    c_index_point: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "c_index": self.c_index_point,
            "c_index_median": self.c_index.median,
            "c_index_lo": self.c_index.lo,
            "c_index_hi": self.c_index.hi,
            "c_index_dropped_replicates": self.c_index.n_dropped,
            "subgroup_c_index": {
                k: (None if v is None else v.to_dict()) for k, v in self.subgroup_c_index.items()
            },
            "one_calibration": self.one_calibration.to_rows(),
            "d_calibration": self.d_calibration.to_rows(),
            "strata_sizes": dict(self.strata_sizes),
        }


def evaluate_predictions(
    time,
    event,
    risk,
    event_prob_at_horizon,
    surv_at_time,
    subgroups: Mapping[str, np.ndarray] | None = None,
    horizon: float = 14.0,
    n_bins: int = 10,
    n_boot: int = 1000,
    seed: int = 0,
) -> EvalReport:
    """Bundle every metric for one model on one test set.

    Subgroup C-indices only compare pairs inside the subgroup; a subgroup
    without comparable pairs reports None.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(int)
    risk = np.asarray(risk, dtype=float)
    overall = bootstrap_c_index(time, event, risk, B=n_boot, seed=seed)
    sub = {}
    for name, mask in (subgroups or {}).items():
        mask = np.asarray(mask, dtype=bool)
        try:
            sub[name] = bootstrap_c_index(time[mask], event[mask], risk[mask], B=n_boot, seed=seed)
        except ValueError:
            sub[name] = None
    strata = risk_strata(risk)
    km = {g: kaplan_meier(time[strata == g], event[strata == g]) for g in ("high", "medium", "low") if np.any(strata == g)}
    return EvalReport(
        c_index=overall,
        subgroup_c_index=sub,
        one_calibration=one_calibration(event_prob_at_horizon, time, event, t=horizon, n_bins=n_bins),
        d_calibration=d_calibration(surv_at_time, event, n_bins=n_bins),
        km_curves=km,
        strata_sizes={g: int(np.sum(strata == g)) for g in ("high", "medium", "low")},
        c_index_point=c_index(time, event, risk),
    )
