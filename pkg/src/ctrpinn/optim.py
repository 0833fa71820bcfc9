"""L-BFGS with a strong-Wolfe line search, and Xavier initialisation.

The optimiser works on flat float64 vectors; the objective returns
``(loss, gradient)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


def xavier_init(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights for a ``(fan_out, fan_in)`` matrix."""
    fan_out, fan_in = shape
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fan-in and fan-out must be positive, got {shape}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class LbfgsConfig:
    history_size: int = 20
    initial_step: float = 2.0
    tolerance: float = 1e-10
    c1: float = 1e-4
    c2: float = 0.9
    max_ls: int = 25
    max_iter: int = 1000
    curvature_eps: float = 1e-10

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")


@dataclass
class LineSearchResult:
    step: float
    f: float
    g: np.ndarray
    evals: int
    ok: bool


def _cubic_min(t1, f1, d1, t2, f2, d2, lo, hi):
    """Minimiser of the cubic through two points with slopes, clipped to [lo, hi]."""
    if t1 == t2:
        return 0.5 * (lo + hi)
    a = d1 + d2 - 3.0 * (f1 - f2) / (t1 - t2)
    disc = a * a - d1 * d2
    if disc < 0 or not np.isfinite(disc):
        return 0.5 * (lo + hi)
    b = math.sqrt(disc)
    denom = (d2 - d1 + 2.0 * b) if t1 <= t2 else (d1 - d2 + 2.0 * b)
    if denom == 0.0:
        return 0.5 * (lo + hi)
    if t1 <= t2:
        t = t2 - (t2 - t1) * ((d2 + b - a) / denom)
    else:
        t = t1 - (t1 - t2) * ((d1 + b - a) / denom)
    if not np.isfinite(t):
        return 0.5 * (lo + hi)
    return min(max(t, lo), hi)


def strong_wolfe(fun: Objective, x, d, t, f0, g0, cfg: LbfgsConfig) -> LineSearchResult:
    """Bracketing/zoom search for a step satisfying the strong Wolfe conditions."""
    gtd0 = float(g0 @ d)
    dmax = float(np.max(np.abs(d)))

    def armijo(t_, f_):
        return f_ <= f0 + cfg.c1 * t_ * gtd0

    def curvature(gtd_):
        return abs(gtd_) <= -cfg.c2 * gtd0

    prev = (0.0, f0, g0, gtd0)
    evals = 0
    bracket = None
    while evals < cfg.max_ls:
        f, g = fun(x + t * d)
        evals += 1
        gtd = float(g @ d)
        cur = (t, f, g, gtd)
        if not np.isfinite(f) or not armijo(t, f) or (evals > 1 and f >= prev[1]):
            bracket = [prev, cur]
            break
        if curvature(gtd):
            return LineSearchResult(t, f, g, evals, True)
        if gtd >= 0:
            bracket = [cur, prev]
            break
        t_next = _cubic_min(prev[0], prev[1], prev[3], t, f, gtd, t + 0.01 * (t - prev[0]), 10.0 * t)
        prev = cur
        t = t_next
    if bracket is None:
        return LineSearchResult(prev[0], prev[1], prev[2], evals, False)

    lo, hi = bracket
    while evals < cfg.max_ls:
        if abs(hi[0] - lo[0]) * dmax < cfg.tolerance:
            break
        a, b = min(lo[0], hi[0]), max(lo[0], hi[0])
        if np.isfinite(hi[1]):
            t = _cubic_min(lo[0], lo[1], lo[3], hi[0], hi[1], hi[3], a, b)
        else:
            t = 0.5 * (a + b)
        # keep trial points away from the bracket ends
        width = b - a
        if min(t - a, b - t) < 0.1 * width:
            t = 0.5 * (a + b)
        f, g = fun(x + t * d)
        evals += 1
        gtd = float(g @ d)
        cur = (t, f, g, gtd)
        if not np.isfinite(f) or not armijo(t, f) or f >= lo[1]:
            hi = cur
        else:
            if curvature(gtd):
                return LineSearchResult(t, f, g, evals, True)
            if gtd * (hi[0] - lo[0]) >= 0:
                hi = lo
            lo = cur
    return LineSearchResult(lo[0], lo[1], lo[2], evals, False)


@dataclass
class LbfgsState:
    x: np.ndarray
    f: float
    g: np.ndarray
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)
    iteration: int = 0
    evaluations: int = 0

    def save(self, path: str | Path) -> None:
        np.savez(path, x=self.x, f=self.f, g=self.g,
                 s_hist=np.array(self.s_hist).reshape(len(self.s_hist), -1),
                 y_hist=np.array(self.y_hist).reshape(len(self.y_hist), -1),
                 iteration=self.iteration, evaluations=self.evaluations)

    @classmethod
    def load(cls, path: str | Path) -> LbfgsState:
        z = np.load(path)
        return cls(z["x"], float(z["f"]), z["g"], list(z["s_hist"]), list(z["y_hist"]),
                   int(z["iteration"]), int(z["evaluations"]))


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    grad_norm: float
    step: float
    evaluations: int
    kind: str  # "wolfe" or "descent"


def two_loop(g, s_hist, y_hist):
    """Apply the inverse-Hessian approximation to ``-g``."""
    q = -g.copy()
    alphas = []
    rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


class Lbfgs:
    """Stateful L-BFGS driver; :meth:`step` performs one iteration."""

    def __init__(self, fun: Objective, x0=None, cfg: LbfgsConfig | None = None,
                 state: LbfgsState | None = None):
        self.fun = fun
        self.cfg = cfg or LbfgsConfig()
        if state is None:
            x0 = np.array(x0, dtype=float)
            f, g = fun(x0)
            state = LbfgsState(x0, float(f), np.asarray(g, dtype=float), evaluations=1)
        self.state = state
        self.reason: str | None = None

    def _descent_fallback(self, st: LbfgsState):
        """Steepest descent with step halving; Armijo decrease only."""
        g = st.g
        d = -g
        gtd = float(g @ d)
        t = min(1.0, 1.0 / max(float(np.abs(g).sum()), 1e-300)) * self.cfg.initial_step
        evals = 0
        for _ in range(60):
            f, gn = self.fun(st.x + t * d)
            evals += 1
            if np.isfinite(f) and f <= st.f + self.cfg.c1 * t * gtd and f < st.f:
                return LineSearchResult(t, f, gn, evals, True), d
            t *= 0.5
        return LineSearchResult(0.0, st.f, g, evals, False), d

    def step(self) -> IterationRecord | None:
        cfg, st = self.cfg, self.state
        if float(np.max(np.abs(st.g))) <= cfg.tolerance:
            self.reason = "gradient below tolerance"
            return None
        d = two_loop(st.g, st.s_hist, st.y_hist)
        gtd = float(st.g @ d)
        if not gtd < -cfg.tolerance * 1e-3:
            st.s_hist.clear()
            st.y_hist.clear()
            d = -st.g
        if not st.s_hist:
            t0 = min(1.0, 1.0 / float(np.abs(st.g).sum())) * cfg.initial_step
        else:
            t0 = cfg.initial_step
        res = strong_wolfe(self.fun, st.x, d, t0, st.f, st.g, cfg)
        kind = "wolfe"
        if not res.ok or not res.f < st.f:
            if res.ok is False:
                log.debug("strong-Wolfe search failed at iteration %d", st.iteration)
            st.evaluations += res.evals
            res, d = self._descent_fallback(st)
            kind = "descent"
            if not res.ok:
                st.evaluations += res.evals
                self.reason = "line search failed (no decrease along steepest descent)"
                return None
        x_new = st.x + res.step * d
        s_vec = x_new - st.x
        y_vec = res.g - st.g
        if float(s_vec @ y_vec) > cfg.curvature_eps:
            st.s_hist.append(s_vec)
            st.y_hist.append(y_vec)
            if len(st.s_hist) > cfg.history_size:
                st.s_hist.pop(0)
                st.y_hist.pop(0)
        f_old = st.f
        st.x, st.f, st.g = x_new, float(res.f), np.asarray(res.g, dtype=float)
        st.iteration += 1
        st.evaluations += res.evals
        rec = IterationRecord(st.iteration, st.f, float(np.linalg.norm(st.g)), res.step,
                              st.evaluations, kind)
        if float(np.max(np.abs(st.g))) <= cfg.tolerance:
            self.reason = "gradient below tolerance"
        elif abs(f_old - st.f) < cfg.tolerance:
            self.reason = "loss decrease below tolerance"
        elif float(np.max(np.abs(s_vec))) < cfg.tolerance:
            self.reason = "step below tolerance"
        return rec


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    history: list[IterationRecord]
    reason: str
    state: LbfgsState


def minimize(fun: Objective, x0, cfg: LbfgsConfig | None = None,
             callback: Callable[[IterationRecord, LbfgsState], None] | None = None,
             state: LbfgsState | None = None) -> MinimizeResult:
    """Run L-BFGS until a tolerance is met or ``cfg.max_iter`` iterations."""
    opt = Lbfgs(fun, x0, cfg, state)
    history = []
    while opt.state.iteration < opt.cfg.max_iter:
        rec = opt.step()
        if rec is not None:
            history.append(rec)
            if callback is not None:
                callback(rec, opt.state)
        if opt.reason is not None:
            break
    reason = opt.reason or "maximum iterations"
    st = opt.state
    return MinimizeResult(st.x, st.f, st.g, history, reason, st)
