"""Optimizers: nonlinear conjugate gradient with line search, Adam, step schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import NumericalError


@dataclass
class OptimizerConfig:
    max_line_searches: int = 100
    c1: float = 1e-4
    c2: float = 0.9
    adam_step: float = 0.01
    gamma_initial: float = 1e-4
    gamma_final: float = 0.1
    ramp_iterations: float = 5

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search constants must satisfy 0 < c1 < c2 < 1")
        if self.adam_step <= 0 or self.gamma_initial <= 0 or self.gamma_final <= 0:
            raise ValueError("steps must be positive")
        if self.max_line_searches < 0:
            raise ValueError("line search budget must be non-negative")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    trace: list = field(default_factory=list)
    line_searches: int = 0
    evaluations: int = 0
    message: str = ""


_RECOVERABLE = (NumericalError, np.linalg.LinAlgError, FloatingPointError)


def cgd_maximize(fun, x0, budget=100, c1=1e-4, c2=0.9, callback=None):
    """Maximize ``fun`` (returning value and gradient) by Polak-Ribiere CG.

    Each iteration performs one line search that brackets with cubic
    extrapolation and refines with cubic/quadratic interpolation until the
    strong Wolfe conditions hold. ``budget`` counts line searches. A failed
    search restarts once along the gradient; a second consecutive failure
    stops. ``trace`` holds the objective at x0 and after every accepted step.
    """
    INT, EXT, MAX_EVALS, RATIO = 0.1, 3.0, 20, 10.0
    rho, sig = c1, c2

    def neg(x):
        f, g = fun(x)
        g = np.asarray(g, dtype=float)
        return -float(f), -g

    x = np.array(x0, dtype=float, copy=True)
    f0, df0 = neg(x)
    evals = 1
    if not np.isfinite(f0) or not np.all(np.isfinite(df0)):
        raise NumericalError("objective or gradient not finite at the starting point")
    trace = [-f0]
    if budget <= 0:
        return OptimResult(x, -f0, trace, 0, evals, "zero budget")

    s = -df0
    d0 = -s @ s
    if d0 == 0:
        return OptimResult(x, -f0, trace, 0, evals, "zero gradient")
    x3 = 1.0 / (1.0 - d0)
    ls_failed = False
    searches = 0
    message = "budget exhausted"
    while searches < budget:
        searches += 1
        X0, F0, dF0 = x.copy(), f0, df0.copy()
        M = MAX_EVALS

        # extrapolation
        while True:
            x2, f2, d2 = 0.0, f0, d0
            f3, df3 = f0, df0
            success = False
            while not success and M > 0:
                M -= 1
                try:
                    f3, df3 = neg(x + x3 * s)
                    evals += 1
                    if not np.isfinite(f3) or not np.all(np.isfinite(df3)):
                        raise FloatingPointError
                    success = True
                except _RECOVERABLE:
                    x3 = 0.5 * (x2 + x3)
            if not success:
                f3, df3 = f0, df0
            if f3 < F0:
                X0, F0, dF0 = x + x3 * s, f3, df3
            d3 = df3 @ s
            if d3 > sig * d0 or f3 > f0 + x3 * rho * d0 or M == 0:
                break
            x1, f1, d1 = x2, f2, d2
            x2, f2, d2 = x3, f3, d3
            A = 6.0 * (f1 - f2) + 3.0 * (d2 + d1) * (x2 - x1)
            B = 3.0 * (f2 - f1) - (2.0 * d1 + d2) * (x2 - x1)
            disc = B * B - A * d1 * (x2 - x1)
            denom = B + np.sqrt(disc) if disc >= 0 else np.nan
            x3 = x1 - d1 * (x2 - x1) ** 2 / denom if denom and np.isfinite(denom) else np.nan
            if not np.isfinite(x3) or x3 < 0:
                x3 = x2 * EXT
            elif x3 > x2 * EXT:
                x3 = x2 * EXT
            elif x3 < x2 + INT * (x2 - x1):
                x3 = x2 + INT * (x2 - x1)

        # interpolation
        x4 = f4 = d4 = None
        while (abs(d3) > -sig * d0 or f3 > f0 + x3 * rho * d0) and M > 0:
            if d3 > 0 or f3 > f0 + x3 * rho * d0:
                x4, f4, d4 = x3, f3, d3
            else:
                x2, f2, d2 = x3, f3, d3
            if x4 is None:
                break
            if f4 > f0:
                x3 = x2 - (0.5 * d2 * (x4 - x2) ** 2) / (f4 - f2 - d2 * (x4 - x2))
            else:
                A = 6.0 * (f2 - f4) / (x4 - x2) + 3.0 * (d4 + d2)
                B = 3.0 * (f4 - f2) - (2.0 * d2 + d4) * (x4 - x2)
                disc = B * B - A * d2 * (x4 - x2) ** 2
                x3 = x2 + (np.sqrt(disc) - B) / A if disc >= 0 and A != 0 else np.nan
            if not np.isfinite(x3):
                x3 = 0.5 * (x2 + x4)
            x3 = max(min(x3, x4 - INT * (x4 - x2)), x2 + INT * (x4 - x2))
            try:
                f3, df3 = neg(x + x3 * s)
                evals += 1
                if not np.isfinite(f3) or not np.all(np.isfinite(df3)):
                    raise FloatingPointError
            except _RECOVERABLE:
                f3, df3 = np.inf, df0
            if f3 < F0:
                X0, F0, dF0 = x + x3 * s, f3, df3
            M -= 1
            d3 = df3 @ s

        if abs(d3) < -sig * d0 and f3 < f0 + x3 * rho * d0 and M > 0 and x3 != x2:
            # one cubic refinement between the last two trial steps; kept only if
            # it also satisfies both conditions and lowers the objective
            xc = _cubic_min(x2, f2, d2, x3, f3, d3)
            if xc is not None and xc > 0 and abs(xc - x3) > 1e-12 * x3:
                try:
                    fc, dfc = neg(x + xc * s)
                    evals += 1
                    dc = dfc @ s
                    if (np.isfinite(fc) and np.all(np.isfinite(dfc)) and fc < f3
                            and abs(dc) < -sig * d0 and fc < f0 + xc * rho * d0):
                        x3, f3, df3, d3 = xc, fc, dfc, dc
                except _RECOVERABLE:
                    pass

        if abs(d3) < -sig * d0 and f3 < f0 + x3 * rho * d0:
            x = x + x3 * s
            f0 = f3
            trace.append(-f0)
            if callback is not None:
                callback(x, -f0)
            s = (df3 @ df3 - df0 @ df3) / (df0 @ df0) * s - df3
            df0 = df3
            d3 = d0
            d0 = df0 @ s
            if d0 > 0:
                s = -df0
                d0 = -s @ s
            if d0 == 0:
                message = "zero gradient"
                break
            x3 = x3 * min(RATIO, d3 / (d0 - np.finfo(float).tiny))
            ls_failed = False
        else:
            if F0 < f0:
                # best point seen during the failed search still improves
                x, f0, df0 = X0, F0, dF0
                trace.append(-f0)
                if callback is not None:
                    callback(x, -f0)
            if ls_failed:
                message = "line search failed twice"
                break
            s = -df0
            d0 = -s @ s
            if d0 == 0:
                message = "zero gradient"
                break
            x3 = 1.0 / (1.0 - d0)
            ls_failed = True
    return OptimResult(x, -f0, trace, searches, evals, message)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic through two points with slopes, or None."""
    if a == b:
        return None
    t1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = t1 * t1 - da * db
    if disc < 0:
        return None
    t2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2.0 * t2
    if denom == 0:
        return None
    xc = b - (b - a) * (db + t2 - t1) / denom
    return xc if np.isfinite(xc) else None


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params, grad, step, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update moving ``params`` along ``grad`` (ascent).

    Returns ``(new_params, new_state)``; the input state is not modified.
    """
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient passed to Adam")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = np.asarray(params, dtype=float) + step * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


def gamma_schedule(t, gamma_initial=1e-4, gamma_final=0.1, ramp_iterations=5):
    """Natural-gradient step: log-linear ramp from gamma_initial to gamma_final."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    if t >= ramp_iterations:
        return gamma_final
    frac = t / ramp_iterations
    return float(np.exp((1.0 - frac) * np.log(gamma_initial) + frac * np.log(gamma_final)))
