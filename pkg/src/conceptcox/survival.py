"""L1-penalized Cox proportional hazards.

The smooth part of the objective is the negative Efron partial
log-likelihood divided by the number of rows, so penalty values are
comparable across cohort sizes.  Fitting uses proximal Newton steps: the
exact Hessian over a working set of coordinates defines a local quadratic,
which is minimized by cyclic coordinate descent with soft-thresholding,
followed by a backtracking line search on the penalized objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10_000


class CoxNumericalError(FloatingPointError):
    """Non-finite value while evaluating the partial likelihood."""


@dataclass(frozen=True)
class SurvivalData:
    X: np.ndarray
    time: np.ndarray
    event: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        time = np.asarray(self.time, dtype=float).ravel()
        event = np.asarray(self.event).astype(int).ravel()
        names = tuple(self.feature_names)
        if X.shape[0] != time.size or time.size != event.size:
            raise ValueError(
                f"row counts disagree: X has {X.shape[0]}, time {time.size}, event {event.size}"
            )
        if X.shape[1] != len(names):
            raise ValueError(f"X has {X.shape[1]} columns but {len(names)} feature names")
        if not np.isin(event, (0, 1)).all():
            raise ValueError("event must be 0/1")
        if event.sum() == 0:
            raise ValueError("survival data needs at least one event")
        if np.isnan(X).any():
            raise ValueError("X contains missing values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, rows) -> "SurvivalData":
        return SurvivalData(self.X[rows], self.time[rows], self.event[rows], self.feature_names)


@dataclass(frozen=True)
class CoxFit:
    beta: np.ndarray
    lam: float
    feature_names: tuple[str, ...]
    converged: bool
    n_iter: int
    objective_history: tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.beta))

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "beta": [float(b) for b in self.beta],
            "lambda": float(self.lam),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoxFit":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            lam=float(d["lambda"]),
            feature_names=tuple(d["feature_names"]),
            converged=bool(d["converged"]),
            n_iter=int(d["n_iter"]),
        )


@dataclass(frozen=True)
class BaselineHazard:
    event_times: np.ndarray
    cumulative_hazard: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Cumulative baseline hazard H0(t) as a right-continuous step."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.event_times, t, side="right") - 1
        padded = np.concatenate([[0.0], self.cumulative_hazard])
        return padded[idx + 1]

    def to_dict(self) -> dict:
        return {
            "event_times": [float(x) for x in self.event_times],
            "cumulative_hazard": [float(x) for x in self.cumulative_hazard],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineHazard":
        return cls(np.asarray(d["event_times"], float), np.asarray(d["cumulative_hazard"], float))


@dataclass(frozen=True)
class LambdaPath:
    grid: np.ndarray
    fits: tuple[CoxFit, ...]

    @property
    def nnz(self) -> np.ndarray:
        return np.array([f.nnz for f in self.fits])

    def fit_for(self, lam: float) -> CoxFit:
        i = int(np.argmin(np.abs(self.grid - lam)))
        return self.fits[i]


class _EfronRiskSets:
    """Sorted risk-set bookkeeping shared by every evaluation on one dataset."""

    def __init__(self, X: np.ndarray, time: np.ndarray, event: np.ndarray):
        order = np.argsort(time, kind="stable")
        self.order = order
        self.X = np.ascontiguousarray(X[order])
        t = time[order]
        e = event[order].astype(bool)
        self.n = t.size
        self.event = e.astype(float)
        self.ev_rows = np.flatnonzero(e)
        ev_times = t[self.ev_rows]
        self.tau, self.ev_gid = np.unique(ev_times, return_inverse=True)
        self.K = self.tau.size
        self.d = np.bincount(self.ev_gid, minlength=self.K).astype(float)
        # risk set of group k is rows start[k]..n-1 (censored at tau_k included)
        self.start = np.searchsorted(t, self.tau, side="left")
        self.ev_first = np.searchsorted(ev_times, self.tau, side="left")
        ev_l = np.arange(self.ev_rows.size) - self.ev_first[self.ev_gid]
        self.ev_frac = ev_l / self.d[self.ev_gid]
        self.row_last = np.searchsorted(self.tau, t, side="right") - 1
        self.row_gid = np.full(self.n, -1)
        self.row_gid[self.ev_rows] = self.ev_gid

    def _core(self, beta: np.ndarray):
        eta = self.X @ beta
        shift = float(eta.max())
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.exp(eta - shift)
            S0 = np.cumsum(r[::-1])[::-1][self.start]
            T0 = np.bincount(self.ev_gid, weights=r[self.ev_rows], minlength=self.K)
            den = S0[self.ev_gid] - self.ev_frac * T0[self.ev_gid]
            inv = 1.0 / den
        if not (np.isfinite(eta).all() and np.isfinite(inv).all() and (den > 0).all()):
            raise CoxNumericalError(
                "non-finite partial likelihood; standardize features or shrink coefficients"
            )
        return eta, shift, r, den, inv

    def value_grad(self, beta: np.ndarray) -> tuple[float, np.ndarray]:
        eta, shift, r, den, inv = self._core(beta)
        value = -(eta[self.ev_rows].sum() - (np.log(den) + shift).sum())
        grad = self.X.T @ (r * self._row_weights(inv) - self.event)
        return float(value), grad

    def value(self, beta: np.ndarray) -> float:
        eta, shift, r, den, inv = self._core(beta)
        return float(-(eta[self.ev_rows].sum() - (np.log(den) + shift).sum()))

    def _row_weights(self, inv: np.ndarray) -> np.ndarray:
        A = np.cumsum(np.bincount(self.ev_gid, weights=inv, minlength=self.K))
        B = np.bincount(self.ev_gid, weights=self.ev_frac * inv, minlength=self.K)
        c = np.where(self.row_last >= 0, A[np.maximum(self.row_last, 0)], 0.0)
        tied = self.row_gid >= 0
        c[tied] -= B[self.row_gid[tied]]
        return c

    def value_grad_hess(self, beta: np.ndarray, cols: np.ndarray):
        """Value, full gradient, and the Hessian block over ``cols``."""
        eta, shift, r, den, inv = self._core(beta)
        value = -(eta[self.ev_rows].sum() - (np.log(den) + shift).sum())
        w = r * self._row_weights(inv)
        grad = self.X.T @ (w - self.event)
        XJ = self.X[:, cols]
        rXJ = r[:, None] * XJ
        S1 = np.cumsum(rXJ[::-1], axis=0)[::-1][self.start]
        T1 = np.add.reduceat(rXJ[self.ev_rows], self.ev_first, axis=0)
        M = (S1[self.ev_gid] - self.ev_frac[:, None] * T1[self.ev_gid]) * inv[:, None]
        H = (XJ * w[:, None]).T @ XJ - M.T @ M
        return float(value), grad, H


def cox_neg_partial_loglik(beta, data: SurvivalData) -> tuple[float, np.ndarray]:
    """Negative Efron partial log-likelihood and its gradient (unscaled)."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (data.X.shape[1],):
        raise ValueError(f"beta has shape {beta.shape}, expected ({data.X.shape[1]},)")
    return _EfronRiskSets(data.X, data.time, data.event).value_grad(beta)


def lambda_max(data: SurvivalData) -> float:
    """Smallest penalty at which the all-zero coefficient vector is optimal."""
    _, g = cox_neg_partial_loglik(np.zeros(data.X.shape[1]), data)
    return float(np.max(np.abs(g)) / data.n)


def _soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def _cd_quadratic(g, H, b, lam, tol, max_sweeps):
    """Minimize g.(z-b) + 0.5 (z-b)'H(z-b) + lam*|z|_1 by cyclic coordinate descent."""
    z = b.copy()
    v = np.zeros_like(b)  # H @ (z - b)
    diag = np.diag(H).copy()
    m = b.size
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(m):
            hjj = diag[j]
            if hjj <= 0.0:
                continue
            zj = z[j]
            u = hjj * zj - (g[j] + v[j])
            new = _soft_threshold(u, lam) / hjj
            delta = new - zj
            if delta != 0.0:
                z[j] = new
                v += delta * H[:, j]
                if abs(delta) > biggest:
                    biggest = abs(delta)
        if biggest < tol:
            break
    return z


def fit_lasso_cox(
    data: SurvivalData,
    lam: float,
    warm_start: np.ndarray | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    _risk: _EfronRiskSets | None = None,
) -> CoxFit:
    """Minimize ``negloglik/n + lam * ||beta||_1``.

    Parameters
    ----------
    data : SurvivalData
    lam : float
        Nonnegative L1 penalty on the per-row scale.
    warm_start : array, optional
        Initial coefficients, e.g. the solution at a neighbouring penalty.
    max_iter : int
        Maximum number of outer (Newton) iterations.
    tol : float
        Convergence threshold on the max absolute coefficient change.

    Returns
    -------
    CoxFit
        ``converged`` is False when ``max_iter`` is exhausted; the last
        iterate is returned either way.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    risk = _risk if _risk is not None else _EfronRiskSets(data.X, data.time, data.event)
    n, p = data.X.shape
    beta = np.zeros(p) if warm_start is None else np.asarray(warm_start, dtype=float).copy()

    value, grad = risk.value_grad(beta)
    obj = value / n + lam * np.abs(beta).sum()
    history = [obj]
    last_change = np.inf
    converged = False
    it = 0
    while it < max_iter:
        g = grad / n
        violators = (beta == 0) & (np.abs(g) > lam)
        if last_change < tol and not violators.any():
            converged = True
            break
        work = np.flatnonzero((beta != 0) | violators)
        if work.size == 0:
            converged = True
            break
        it += 1
        value, grad, H = risk.value_grad_hess(beta, work)
        g = grad / n
        H /= n
        b = beta[work]
        z = _cd_quadratic(g[work], H, b, lam, tol * 0.1, 1000)
        step = z - b
        decrease = float(g[work] @ step) + lam * (np.abs(z).sum() - np.abs(b).sum())

        t = 1.0
        accepted = False
        for _ in range(40):
            cand = beta.copy()
            cand[work] = b + t * step
            try:
                cand_value, cand_grad = risk.value_grad(cand)
            except CoxNumericalError:
                t *= 0.5
                continue
            cand_obj = cand_value / n + lam * np.abs(cand).sum()
            if cand_obj <= obj + 1e-4 * t * min(decrease, 0.0):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no descent left at working precision
            converged = bool(np.max(np.abs(step)) < tol)
            break
        beta, value, grad, obj = cand, cand_value, cand_grad, cand_obj
        history.append(obj)
        last_change = float(np.max(np.abs(t * step)))

    return CoxFit(
        beta=beta,
        lam=float(lam),
        feature_names=data.feature_names,
        converged=converged,
        n_iter=it,
        objective_history=tuple(history),
    )


def default_lambda_grid(start: float = 0.0, stop: float = 0.2, step: float = 0.001) -> np.ndarray:
    n_steps = int(round((stop - start) / step))
    return np.round(start + step * np.arange(n_steps + 1), 12)


def lambda_path(
    data: SurvivalData,
    grid: Sequence[float],
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> LambdaPath:
    """Fit every penalty in ``grid`` from largest to smallest with warm starts."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("lambda grid must be strictly ascending")
    risk = _EfronRiskSets(data.X, data.time, data.event)
    fits: list[CoxFit] = [None] * grid.size  # type: ignore[list-item]
    beta = None
    for i in range(grid.size - 1, -1, -1):
        try:
            fit = fit_lasso_cox(data, grid[i], beta, max_iter=max_iter, tol=tol, _risk=risk)
        except CoxNumericalError as exc:
            raise CoxNumericalError(f"at lambda={grid[i]:g}: {exc}") from exc
        fits[i] = fit
        beta = fit.beta
    return LambdaPath(grid=grid, fits=tuple(fits))


def _pick_largest_best(grid: np.ndarray, score: np.ndarray) -> float:
    best = np.max(score)
    close = score >= best - 1e-10 * max(1.0, abs(best))
    return float(grid[np.flatnonzero(close)[-1]])


def _stratified_folds(event: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    folds = np.empty(event.size, dtype=int)
    for label in (1, 0):
        idx = np.flatnonzero(event == label)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % k
    return folds


def select_lambda_cv(
    data: SurvivalData,
    grid: Sequence[float],
    k: int = 5,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
) -> float:
    """Grid penalty maximizing the mean held-out partial log-likelihood.

    Ties go to the larger (sparser) penalty.
    """
    grid = np.asarray(grid, dtype=float)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if grid.size == 1:
        return float(grid[0])
    rng = np.random.default_rng(seed)
    for attempt in range(2):
        folds = _stratified_folds(data.event, k, rng)
        if all(data.event[folds == f].sum() > 0 and data.event[folds != f].sum() > 0 for f in range(k)):
            break
    else:
        raise ValueError(f"cannot draw {k} folds that each contain an event")

    scores = np.zeros((k, grid.size))
    for f in range(k):
        train = data.subset(folds != f)
        held = data.subset(folds == f)
        path = lambda_path(train, grid, tol=tol)
        risk = _EfronRiskSets(held.X, held.time, held.event)
        scores[f] = [-risk.value(fit.beta) for fit in path.fits]
    return _pick_largest_best(grid, scores.mean(axis=0))


def select_lambda_sparsity(path: LambdaPath, target_nnz: int = 10) -> float:
    """Penalty whose support size is closest to ``target_nnz``; ties go to the larger penalty."""
    if len(path.fits) == 0:
        raise ValueError("empty path")
    gap = np.abs(path.nnz - target_nnz)
    best = np.flatnonzero(gap == gap.min())
    return float(path.grid[best[-1]])


def breslow_baseline(fit: CoxFit, data: SurvivalData) -> BaselineHazard:
    """Breslow cumulative baseline hazard at the distinct event times."""
    if tuple(fit.feature_names) != tuple(data.feature_names):
        raise ValueError("fit and data feature spaces differ")
    risk_score = np.exp(data.X @ fit.beta)
    order = np.argsort(data.time, kind="stable")
    t = data.time[order]
    r = risk_score[order]
    e = data.event[order]
    tau = np.unique(t[e == 1])
    start = np.searchsorted(t, tau, side="left")
    at_risk = np.cumsum(r[::-1])[::-1][start]
    d = np.bincount(np.searchsorted(tau, t[e == 1]), minlength=tau.size)
    return BaselineHazard(event_times=tau, cumulative_hazard=np.cumsum(d / at_risk))


def predict_risk(fit: CoxFit, rows) -> np.ndarray | float:
    """Linear predictor x.beta (monotone in the hazard)."""
    rows = np.asarray(rows, dtype=float)
    if rows.shape[-1] != fit.beta.size:
        raise ValueError(f"rows have {rows.shape[-1]} features, fit has {fit.beta.size}")
    out = rows @ fit.beta
    return float(out) if np.ndim(out) == 0 else out


def predict_survival(fit: CoxFit, baseline: BaselineHazard, rows, t) -> np.ndarray | float:
    """S(t | x) = exp(-H0(t) exp(x.beta)); broadcasts over rows and times."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("survival requested at negative time")
    risk = np.asarray(predict_risk(fit, rows))
    out = np.exp(-baseline(t_arr) * np.exp(risk))
    return float(out) if np.ndim(out) == 0 else out


def hazard_ratio_table(
    data: SurvivalData,
    fit: CoxFit,
    n_boot: int = 100,
    seed: int = 0,
    level: float = 0.95,
) -> list[dict]:
    """exp(beta) per nonzero coefficient with percentile bootstrap intervals.

    Each replicate refits at the same penalty on rows resampled with
    replacement; replicate ``r`` draws from a stream seeded by ``(seed, r)``.
    """
    support = np.flatnonzero(fit.beta)
    draws = np.full((n_boot, fit.beta.size), np.nan)
    for r in range(n_boot):
        rng = np.random.default_rng([seed, r])
        rows = rng.integers(0, data.n, data.n)
        sub = data.subset(rows)
        if sub.event.sum() == 0:
            continue
        try:
            draws[r] = fit_lasso_cox(sub, fit.lam, warm_start=fit.beta, max_iter=200, tol=1e-6).beta
        except CoxNumericalError:
            continue
    alpha = (1.0 - level) / 2.0
    table = []
    for j in sorted(support, key=lambda j: -fit.beta[j]):
        col = draws[:, j][~np.isnan(draws[:, j])]
        lo, hi = (np.quantile(col, [alpha, 1 - alpha]) if col.size else (np.nan, np.nan))
        table.append(
            {
                "feature": fit.feature_names[j],
                "coef": float(fit.beta[j]),
                "hr": float(np.exp(fit.beta[j])),
                "hr_lo": float(np.exp(lo)),
                "hr_hi": float(np.exp(hi)),
            }
        )
    return table
