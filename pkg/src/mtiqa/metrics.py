"""Rank and linear correlation metrics plus the five-parameter logistic
remapping used to align predicted scores with subjective scales.

The logistic is q(x) = b1 * (1/2 - 1/(1 + exp(b2 * (x - b3)))) + b4 * x + b5.
Because of the linear tail, an ordinary linear fit is a special case
(b1 = 0), so the fitted SSE can never exceed the linear least-squares SSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class MetricError(ValueError):
    pass


def _check_pair(x, y, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise MetricError("inputs must be 1-D vectors")
    if x.shape[0] != y.shape[0]:
        raise MetricError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < min_len:
        raise MetricError(f"need at least {min_len} points, got {x.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise MetricError("inputs contain non-finite values")
    return x, y


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pcc(x, y) -> float:
    """Pearson product-moment correlation."""
    x, y = _check_pair(x, y, 3)
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise MetricError("correlation undefined for a constant vector")
    return float(np.dot(dx, dy) / np.sqrt(vx * vy))


def srocc(x, y) -> float:
    """Spearman rank-order correlation: Pearson over average-tie ranks."""
    x, y = _check_pair(x, y, 3)
    return pcc(average_ranks(x), average_ranks(y))


# -- logistic remap --------------------------------------------------------------


@dataclass
class LogisticParams:
    b1: float
    b2: float
    b3: float
    b4: float
    b5: float

    def as_array(self) -> np.ndarray:
        return np.array([self.b1, self.b2, self.b3, self.b4, self.b5], dtype=np.float64)


def logistic_fn(params, x) -> np.ndarray:
    """Evaluate the remapping curve at x."""
    b = params.as_array() if isinstance(params, LogisticParams) else np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    # 1/(1 + exp(z)) computed as expit(-z) for overflow safety
    term = expit(-b[1] * (x - b[2]))
    return b[0] * (0.5 - term) + b[3] * x + b[4]


def _logistic_jacobian(b: np.ndarray, x: np.ndarray) -> np.ndarray:
    z = b[1] * (x - b[2])
    term = expit(-z)
    dterm_dz = -term * (1.0 - term)
    jac = np.empty((x.shape[0], 5), dtype=np.float64)
    jac[:, 0] = 0.5 - term
    jac[:, 1] = -b[0] * dterm_dz * (x - b[2])
    jac[:, 2] = b[0] * dterm_dz * b[1]
    jac[:, 3] = x
    jac[:, 4] = 1.0
    return jac


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def fit_logistic(pred, mos, max_iter: int = 500, rel_tol: float = 1e-10) -> LogisticParams:
    """Least-squares fit of the 5-parameter logistic by damped (Levenberg-
    Marquardt) iteration from a deterministic start.

    Start: b4/b5 from the ordinary linear fit, b1 = range(mos),
    b3 = median(pred), b2 = 1/std(pred).  Iterates until the relative SSE
    change drops below `rel_tol` or `max_iter` iterations.  The pure-linear
    parameterization is kept as a fallback candidate, so the result is never
    worse than the ordinary linear fit.
    """
    x, y = _check_pair(pred, mos, 6)

    slope, intercept = _linear_fit(x, y)
    std = float(np.std(x))
    b = np.array(
        [float(np.ptp(y)), 1.0 / std if std > 0 else 1.0, float(np.median(x)), slope, intercept],
        dtype=np.float64,
    )
    linear_b = np.array([0.0, b[1], b[2], slope, intercept], dtype=np.float64)

    def sse(params: np.ndarray) -> float:
        r = logistic_fn(params, x) - y
        return float(np.dot(r, r))

    best_b, best_sse = b.copy(), sse(b)
    damping = 1e-3
    current_sse = best_sse
    for _ in range(max_iter):
        residual = logistic_fn(b, x) - y
        jac = _logistic_jacobian(b, x)
        jtj = jac.T @ jac
        jtr = jac.T @ residual
        accepted = False
        for _ in range(50):
            lhs = jtj + damping * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = np.linalg.solve(lhs, -jtr)
            except np.linalg.LinAlgError:
                step, *_ = np.linalg.lstsq(lhs, -jtr, rcond=None)
            candidate = b + step
            cand_sse = sse(candidate)
            if np.isfinite(cand_sse) and cand_sse <= current_sse:
                accepted = True
                break
            damping *= 10.0
            if damping > 1e12:
                break
        if not accepted:
            break
        improvement = current_sse - cand_sse
        b = candidate
        current_sse = cand_sse
        damping = max(damping / 3.0, 1e-12)
        if current_sse < best_sse:
            best_b, best_sse = b.copy(), current_sse
        if improvement <= rel_tol * max(current_sse, 1e-300):
            break

    if sse(linear_b) < best_sse:
        best_b = linear_b
    return LogisticParams(*best_b)
