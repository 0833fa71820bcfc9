"""Shooting solver for the segmented rod boundary value problem.

Unknown proximal values ``[m_x(0), m_y(0), u_1z(0), u_2z(0), u_3z(0)]`` are
updated by damped Newton-Raphson until the free-end conditions hold:
zero bending moment at the tip of tube 1 and zero torsion at each tube end.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .robot import SNAP_FREE, Actuation, ActuationDomain, RobotSpec
from .rod import STATE_DIM, THETA, UZ, H, P, SegmentLayout, quat_z, rhs_from_properties, segment_layout

log = logging.getLogger(__name__)

DEFAULT_STEPS = 400
FD_STEP = 1e-6
MAX_HALVINGS = 20


class IntegrationDiverged(FloatingPointError):
    """Non-finite state produced while integrating the rod equations."""


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 100
    step: float | None = None  # default: l1 / 400
    initial_guess: np.ndarray | None = None


@dataclass
class BackboneSolution:
    act: Actuation
    layout: SegmentLayout
    s: np.ndarray  # (n,) includes every segment boundary
    states: np.ndarray  # (n, 15)
    guess: np.ndarray  # (5,)
    step: float
    residual: np.ndarray = field(default_factory=lambda: np.full(5, np.nan))
    iterations: int = 0
    converged: bool = False
    evaluations: int = 0

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, P]

    @property
    def tip(self) -> np.ndarray:
        return self.states[-1, P]

    def boundary_index(self, s_value: float) -> int:
        """Grid index of an exact segment boundary."""
        k = int(np.argmin(np.abs(self.s - s_value)))
        if abs(self.s[k] - s_value) > 1e-12:
            raise ValueError(f"{s_value!r} is not a grid point")
        return k

    def tube_tips(self) -> np.ndarray:
        """Positions at the distal ends of tubes 1..3, shape (3, 3)."""
        return np.array([self.states[self.boundary_index(e), P] for e in self.layout.tube_ends])

    def interpolant(self) -> BackboneInterpolant:
        return BackboneInterpolant(self)


def proximal_state(act: Actuation, guess, domain: ActuationDomain = SNAP_FREE) -> np.ndarray:
    """Base state: twist and orientation from the actuation and the guessed torsion."""
    domain.check(act.vector)
    guess = np.asarray(guess, dtype=float)
    beta, alpha = np.asarray(act.beta), np.asarray(act.alpha)
    uz0 = guess[2:5]
    phase = alpha - beta * uz0
    y = np.zeros(STATE_DIM)
    y[0:2] = guess[0:2]
    y[UZ] = uz0
    y[THETA] = phase - phase[0]
    y[THETA.start] = 0.0
    y[H] = quat_z(phase[0])
    return y


# ------------------------------------------------------------------ kernels

@numba.njit(cache=True, nogil=True)
def _rhs(y, ei, gj, kap, pres, out):
    ksum = ei[0] + ei[1] + ei[2]
    cx = 0.0
    cy = 0.0
    mz = 0.0
    for i in range(3):
        cx += ei[i] * kap[i] * math.cos(y[5 + i])
        cy += ei[i] * kap[i] * math.sin(y[5 + i])
        mz += gj[i] * y[2 + i]
    ux = (y[0] + cx) / ksum
    uy = (y[1] + cy) / ksum
    u1z = y[2]
    out[0] = -(uy * mz - u1z * y[1])
    out[1] = -(u1z * y[0] - ux * mz)
    for i in range(3):
        if pres[i]:
            uiy = -math.sin(y[5 + i]) * ux + math.cos(y[5 + i]) * uy
            out[2 + i] = -(ei[i] / gj[i]) * kap[i] * uiy
            out[5 + i] = y[2 + i] - u1z
        else:
            out[2 + i] = 0.0
            out[5 + i] = 0.0
    hw, hx, hy, hz = y[11], y[12], y[13], y[14]
    out[8] = 2.0 * (hx * hz + hw * hy)
    out[9] = 2.0 * (hy * hz - hw * hx)
    out[10] = 1.0 - 2.0 * (hx * hx + hy * hy)
    out[11] = 0.5 * (-hx * ux - hy * uy - hz * u1z)
    out[12] = 0.5 * (hw * ux + hy * u1z - hz * uy)
    out[13] = 0.5 * (hw * uy + hz * ux - hx * u1z)
    out[14] = 0.5 * (hw * u1z + hx * uy - hy * ux)


@numba.njit(cache=True, nogil=True)
def _integrate(y0, bounds, ei, gj, kap, pres, nsub, out_s, out_y):
    """Classical RK4, fixed sub-steps inside each segment.

    Writes the grid into ``out_s``/``out_y`` when they are non-empty; returns
    the final state. Raises via NaN check in the caller.
    """
    n = y0.shape[0]
    y = y0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    store = out_s.shape[0] > 0
    idx = 0
    if store:
        out_s[0] = bounds[0]
        out_y[0, :] = y
    for k in range(bounds.shape[0] - 1):
        a = bounds[k]
        hstep = (bounds[k + 1] - a) / nsub[k]
        for j in range(nsub[k]):
            _rhs(y, ei[k], gj[k], kap[k], pres[k], k1)
            for q in range(n):
                tmp[q] = y[q] + 0.5 * hstep * k1[q]
            _rhs(tmp, ei[k], gj[k], kap[k], pres[k], k2)
            for q in range(n):
                tmp[q] = y[q] + 0.5 * hstep * k2[q]
            _rhs(tmp, ei[k], gj[k], kap[k], pres[k], k3)
            for q in range(n):
                tmp[q] = y[q] + hstep * k3[q]
            _rhs(tmp, ei[k], gj[k], kap[k], pres[k], k4)
            for q in range(n):
                y[q] += hstep / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
            norm = math.sqrt(y[11] ** 2 + y[12] ** 2 + y[13] ** 2 + y[14] ** 2)
            if not (norm > 0.0 and math.isfinite(norm)):
                for q in range(n):
                    y[q] = math.nan
                return y
            for q in range(11, 15):
                y[q] /= norm
            if store:
                idx += 1
                out_s[idx] = _grid_point(a, bounds[k + 1], j + 1, nsub[k])
                out_y[idx, :] = y
    return y


@numba.njit(cache=True, nogil=True)
def _grid_point(a, b, j, n):
    if j == n:
        return b
    return a + (b - a) * j / n


class _Problem:
    """Per-actuation integration setup shared by residual and grid solves."""

    def __init__(self, robot: RobotSpec, act: Actuation, step: float | None,
                 domain: ActuationDomain = SNAP_FREE):
        self.robot = robot
        self.act = act
        self.domain = domain
        self.layout = segment_layout(robot, act, domain)
        lay = self.layout
        if step is None:
            step = lay.length / DEFAULT_STEPS
        if not step > 0:
            raise ValueError(f"step must be positive, got {step!r}")
        self.step = float(step)
        widths = np.diff(lay.boundaries)
        self.nsub = np.maximum(1, np.ceil(widths / self.step - 1e-9)).astype(np.int64)
        self.ei = np.ascontiguousarray(lay.bending_stiffness)
        self.gj = np.ascontiguousarray(lay.torsional_stiffness)
        self.kap = np.ascontiguousarray(lay.precurvature)
        self.pres = np.ascontiguousarray(lay.present)
        self._empty_s = np.empty(0)
        self._empty_y = np.empty((0, STATE_DIM))
        self.evaluations = 0

    def final_state(self, guess) -> np.ndarray:
        y0 = proximal_state(self.act, guess, self.domain)
        self.evaluations += 1
        y = _integrate(y0, self.layout.boundaries, self.ei, self.gj, self.kap, self.pres,
                       self.nsub, self._empty_s, self._empty_y)
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(f"non-finite state for actuation {self.act.vector.tolist()}")
        return y

    def residual(self, guess) -> np.ndarray:
        # torsion of a terminated tube is frozen, so its value at l1 equals u_iz(l_i)
        y = self.final_state(guess)
        return np.array([y[0], y[1], y[2], y[3], y[4]])

    def grid(self, guess) -> tuple[np.ndarray, np.ndarray]:
        n = int(self.nsub.sum()) + 1
        out_s = np.empty(n)
        out_y = np.empty((n, STATE_DIM))
        y0 = proximal_state(self.act, guess, self.domain)
        y = _integrate(y0, self.layout.boundaries, self.ei, self.gj, self.kap, self.pres,
                       self.nsub, out_s, out_y)
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(f"non-finite state for actuation {self.act.vector.tolist()}")
        return out_s, out_y


def integrate(robot: RobotSpec, act: Actuation, guess, step: float | None = None,
              domain: ActuationDomain = SNAP_FREE) -> BackboneSolution:
    """Integrate from the base with a given guess; residual left unevaluated."""
    prob = _Problem(robot, act, step, domain)
    s, states = prob.grid(guess)
    return BackboneSolution(act, prob.layout, s, states, np.asarray(guess, float).copy(), prob.step)


def distal_residual(sol: BackboneSolution) -> np.ndarray:
    """``[m_x(l1), m_y(l1), u_1z(l1), u_2z(l2), u_3z(l3)]`` read at grid points."""
    ends = sol.layout.tube_ends
    last = sol.states[-1]
    out = [last[0], last[1]]
    for i in range(3):
        out.append(sol.states[sol.boundary_index(ends[i]), UZ.start + i])
    return np.array(out)


def solve(robot: RobotSpec, act: Actuation, opts: SolveOptions | None = None,
          domain: ActuationDomain = SNAP_FREE, with_grid: bool = True) -> BackboneSolution:
    """Damped Newton shooting with a forward-difference Jacobian.

    Non-convergence is reported through ``converged=False`` with the best
    residual found; integration divergence propagates.
    """
    opts = opts or SolveOptions()
    prob = _Problem(robot, act, opts.step, domain)
    g = np.zeros(5) if opts.initial_guess is None else np.array(opts.initial_guess, dtype=float)
    r = prob.residual(g)
    rnorm = np.linalg.norm(r)
    iterations = 0
    converged = bool(np.max(np.abs(r)) < opts.tol)
    while not converged and iterations < opts.max_iter:
        jac = np.empty((5, 5))
        for k in range(5):
            gk = g.copy()
            gk[k] += FD_STEP
            jac[:, k] = (prob.residual(gk) - r) / FD_STEP
        try:
            delta = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jac, -r, rcond=None)[0]
        lam = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            g_try = g + lam * delta
            try:
                r_try = prob.residual(g_try)
            except IntegrationDiverged:
                r_try = None
            if r_try is not None and np.linalg.norm(r_try) < rnorm:
                accepted = True
                break
            lam *= 0.5
        iterations += 1
        if not accepted:
            log.warning("shooting stalled at iteration %d for %s", iterations, act.vector.tolist())
            break
        g, r, rnorm = g_try, r_try, np.linalg.norm(r_try)
        converged = bool(np.max(np.abs(r)) < opts.tol)

    if with_grid:
        s, states = prob.grid(g)
    else:
        s, states = np.empty(0), np.empty((0, STATE_DIM))
    return BackboneSolution(act, prob.layout, s, states, g, prob.step, residual=r,
                            iterations=iterations, converged=converged,
                            evaluations=prob.evaluations)


class BackboneInterpolant:
    """Piecewise cubic Hermite interpolation of a solved backbone.

    Each segment gets its own spline with derivatives from the rod equations,
    so slopes that jump at transitions are represented exactly.
    """

    def __init__(self, sol: BackboneSolution):
        self.sol = sol
        lay = sol.layout
        self.boundaries = lay.boundaries
        self._splines = []
        for k in range(lay.n_segments):
            a, b = lay.boundaries[k], lay.boundaries[k + 1]
            idx = np.nonzero((sol.s >= a - 1e-13) & (sol.s <= b + 1e-13))[0]
            ys = sol.states[idx]
            dy = rhs_from_properties(ys, lay.bending_stiffness[k], lay.torsional_stiffness[k],
                                     lay.precurvature[k], lay.present[k])
            self._splines.append(CubicHermiteSpline(sol.s[idx], ys, dy, axis=0))

    def __call__(self, s, nu: int = 0) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = self.sol.layout.segment_index(s)
        out = np.empty((s.size, STATE_DIM))
        for seg in np.unique(k):
            mask = k == seg
            out[mask] = self._splines[seg](s[mask], nu)
        return out


# ------------------------------------------------------------------ export

EXPORT_COLUMNS = ("s", "p_x", "p_y", "p_z", "h_w", "h_x", "h_y", "h_z",
                  "theta_1", "theta_2", "theta_3", "u_z1", "u_z2", "u_z3", "m_x", "m_y")


def export_backbone(sol: BackboneSolution, path: str | Path, opts: SolveOptions | None = None,
                    extra: dict | None = None) -> None:
    """Tab-separated table, one row per grid point, with a JSON metadata header."""
    opts = opts or SolveOptions()
    meta = {
        "format": "ctrpinn-backbone", "version": 1,
        "units": {"s": "m", "p": "m", "h": "1", "theta": "rad", "u_z": "1/m", "m": "N m"},
        "actuation": {"beta": list(sol.act.beta), "alpha": list(sol.act.alpha)},
        "tolerance": opts.tol, "iterations": sol.iterations, "converged": sol.converged,
        "residual": sol.residual.tolist(), "step": sol.step,
        "boundaries": sol.layout.boundaries.tolist(),
    }
    if extra:
        meta.update(extra)
    st = sol.states
    table = np.column_stack([sol.s, st[:, P], st[:, H], st[:, THETA], st[:, UZ], st[:, 0:2]])
    header = "meta " + json.dumps(meta) + "\n" + "\t".join(EXPORT_COLUMNS)
    np.savetxt(path, table, delimiter="\t", header=header, fmt="%.17g")


def read_backbone(path: str | Path) -> tuple[dict, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_backbone`: ``(meta, s, states)``."""
    with open(path) as fh:
        first = fh.readline()
    meta = json.loads(first[len("# meta "):])
    table = np.loadtxt(path, delimiter="\t", ndmin=2)
    states = np.zeros((table.shape[0], STATE_DIM))
    states[:, P] = table[:, 1:4]
    states[:, H] = table[:, 4:8]
    states[:, THETA] = table[:, 8:11]
    states[:, UZ] = table[:, 11:14]
    states[:, 0:2] = table[:, 14:16]
    return meta, table[:, 0], states
