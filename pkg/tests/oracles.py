"""Slow, independent reference computations used only by the tests."""

import numpy as np


def efron_brute(beta, X, time, event):
    """Negative Efron log partial likelihood, gradient and Hessian by explicit risk-set loops."""
    beta = np.asarray(beta, float)
    n, p = X.shape
    ll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    r = np.exp(X @ beta)
    for tau in sorted(set(time[event == 1])):
        risk = [i for i in range(n) if time[i] >= tau]
        dead = [i for i in range(n) if time[i] == tau and event[i] == 1]
        d = len(dead)
        s0 = sum(r[i] for i in risk)
        s1 = sum(r[i] * X[i] for i in risk)
        s2 = sum(r[i] * np.outer(X[i], X[i]) for i in risk)
        t0 = sum(r[i] for i in dead)
        t1 = sum(r[i] * X[i] for i in dead)
        t2 = sum(r[i] * np.outer(X[i], X[i]) for i in dead)
        for i in dead:
            ll += X[i] @ beta
            grad += X[i]
        for l in range(d):
            f = l / d
            den = s0 - f * t0
            m = (s1 - f * t1) / den
            ll -= np.log(den)
            grad -= m
            hess += (s2 - f * t2) / den - np.outer(m, m)
    return -ll, -grad, hess


def newton_cox(X, time, event, tol=1e-12, max_iter=100):
    """Unpenalized Cox MLE by damped Newton on the brute-force likelihood."""
    beta = np.zeros(X.shape[1])
    val, g, H = efron_brute(beta, X, time, event)
    for _ in range(max_iter):
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            cand = beta - t * step
            cval, cg, cH = efron_brute(cand, X, time, event)
            if cval <= val or t < 1e-8:
                break
            t /= 2
        beta, val, g, H = cand, cval, cg, cH
        if np.max(np.abs(t * step)) < tol:
            break
    return beta


def c_index_pairs(time, event, risk):
    """Harrell's C by enumerating every ordered pair."""
    conc = 0.0
    total = 0
    n = len(time)
    for i in range(n):
        if not event[i]:
            continue
        for j in range(n):
            if time[i] < time[j]:
                total += 1
                if risk[i] > risk[j]:
                    conc += 1.0
                elif risk[i] == risk[j]:
                    conc += 0.5
    return conc / total


def km_brute(time, event, t):
    """Product-limit estimate at ``t`` written directly from its definition."""
    s = 1.0
    for u in sorted(set(time[event == 1])):
        if u > t:
            break
        at_risk = np.sum(time >= u)
        deaths = np.sum((time == u) & (event == 1))
        s *= 1.0 - deaths / at_risk
    return s
