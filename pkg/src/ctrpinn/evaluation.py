"""Accuracy metrics and the runtime benchmark.

Every comparison treats "the model" as anything with a ``predict(s, tau)``
method returning ``(N, 15)`` states, so the trained :class:`~ctrpinn.pinn.Network`
and the solver-backed :class:`OracleModel` are interchangeable.

Reports are written as a tab-separated table plus a JSON summary sharing a
file stem (``<stem>.tsv`` / ``<stem>.json``).
"""
from __future__ import annotations

import gc
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import bvp
from .data import solve_many
from .pinn import ObservationSet
from .robot import SNAP_FREE, Actuation, ActuationDomain, RobotSpec
from .rod import GROUPS, STATE_DIM, UZ, H, P, quat_distance

log = logging.getLogger(__name__)

REPORT_VERSION = 1
GRID_START = 0.02  # first station as a fraction of l1; s = 0 is excluded
DEFAULT_DISCRETIZATIONS = (50, 100, 200, 400)
STATE_NAMES = ("m_x", "m_y", "u_z1", "u_z2", "u_z3", "theta_1", "theta_2", "theta_3",
               "p_x", "p_y", "p_z", "h_w", "h_x", "h_y", "h_z")


def normalized_grid(n: int) -> np.ndarray:
    """``n`` stations of s/l1 spread evenly over [0.02, 1]."""
    if n < 2:
        raise ValueError("need at least two grid stations")
    return np.linspace(GRID_START, 1.0, n)


class OracleModel:
    """Solver-backed model with the same ``predict`` signature as the network.

    Solutions are cached per actuation; states between grid points come from
    the piecewise Hermite interpolant.
    """

    def __init__(self, robot: RobotSpec, opts: bvp.SolveOptions | None = None,
                 domain: ActuationDomain = SNAP_FREE):
        self.robot = robot
        self.opts = opts or bvp.SolveOptions()
        self.domain = domain
        self._cache: dict[tuple, bvp.BackboneInterpolant] = {}

    def add(self, sol: bvp.BackboneSolution) -> None:
        self._cache[tuple(sol.act.vector.tolist())] = sol.interpolant()

    def _interp(self, tau) -> bvp.BackboneInterpolant:
        key = tuple(np.asarray(tau, dtype=float).tolist())
        if key not in self._cache:
            sol = bvp.solve(self.robot, Actuation.from_vector(key), self.opts, self.domain)
            if not sol.converged:
                raise bvp.IntegrationDiverged(f"solver did not converge for {list(key)}")
            self._cache[key] = sol.interpolant()
        return self._cache[key]

    def predict(self, s, tau) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        tau = np.asarray(tau, dtype=float).reshape(-1, 6)
        if len(tau) == 1:
            return self._interp(tau[0])(s)
        out = np.empty((len(s), STATE_DIM))
        keys, inv = np.unique(tau, axis=0, return_inverse=True)
        for j, key in enumerate(keys):
            mask = inv.reshape(-1) == j
            out[mask] = self._interp(key)(s[mask])
        return out


def renormalize_quaternions(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def align_sign(q, ref) -> np.ndarray:
    """Flip ``q`` row-wise into the hemisphere of ``ref`` (q and -q are one rotation)."""
    q = np.asarray(q, dtype=float)
    flip = np.sum(q * ref, axis=-1) < 0
    return np.where(flip[..., None], -q, q)


def _summary(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return {"n": 0}
    q25, q50, q75, q95 = np.percentile(x, [25, 50, 75, 95])
    return {"n": int(x.size), "mean": float(x.mean()), "std": float(x.std()), "min": float(x.min()),
            "p25": float(q25), "median": float(q50), "p75": float(q75), "p95": float(q95),
            "max": float(x.max())}


def _write(stem: str | Path, header: list[str], rows, summary: dict) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tsv, js = stem.with_suffix(".tsv"), stem.with_suffix(".json")
    with open(tsv, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(v if isinstance(v, str) else repr(float(v)) if isinstance(v, float)
                               else str(v) for v in row) + "\n")
    js.write_text(json.dumps({"version": REPORT_VERSION, **summary}, indent=2))
    return tsv, js


# ------------------------------------------------------------- backbone error

@dataclass
class ShapeErrorReport:
    fractions: np.ndarray  # (G,) s / l1
    s: np.ndarray  # (A, G) arc length [m], one row per actuation
    taus: np.ndarray  # (A, 6) evaluated actuations
    errors: np.ndarray  # (A, G) ||p_hat - p|| / s
    excluded: list = field(default_factory=list)  # (tau, reason)

    @property
    def station_mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def station_std(self) -> np.ndarray:
        return self.errors.std(axis=0)

    @property
    def station_min(self) -> np.ndarray:
        return self.errors.min(axis=0)

    @property
    def station_max(self) -> np.ndarray:
        return self.errors.max(axis=0)

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def max(self) -> float:
        return float(self.errors.max())

    def summary(self) -> dict:
        return {
            "kind": "backbone-error", "n_actuations": int(len(self.taus)),
            "n_stations": int(len(self.fractions)), "grid_start": float(self.fractions[0]),
            "overall": _summary(self.errors), "tip": _summary(self.errors[:, -1]),
            "excluded": [{"tau": list(map(float, t)), "reason": r} for t, r in self.excluded],
        }

    def write(self, stem: str | Path, metadata: dict | None = None):
        rows = zip(self.fractions, self.station_mean, self.station_std,
                   self.station_min, self.station_max)
        return _write(stem, ["s_over_l1", "mean", "std", "min", "max"],
                      rows, {**self.summary(), "metadata": metadata or {}})


def backbone_error(net, robot: RobotSpec, acts, grid_n: int = 50,
                   opts: bvp.SolveOptions | None = None, domain: ActuationDomain = SNAP_FREE,
                   threads: int | None = None) -> ShapeErrorReport:
    """Normalized position error of ``net`` against the solver over a common grid.

    Actuations on which the solver fails are excluded and listed in the report.
    """
    taus = np.asarray(acts, dtype=float).reshape(-1, 6)
    for tau in taus:
        domain.check(tau)
    frac = normalized_grid(grid_n)
    sols = solve_many(robot, taus, opts, domain, threads=threads, return_exceptions=True)
    kept, grids, errors, excluded = [], [], [], []
    for tau, sol in zip(taus, sols):
        if isinstance(sol, Exception) or not sol.converged:
            reason = str(sol) if isinstance(sol, Exception) else "shooting did not converge"
            excluded.append((tau, reason))
            continue
        s = frac * robot.tube_ends(tau)[0]
        p_ref = sol.interpolant()(s)[:, P]
        p_hat = np.asarray(net.predict(s, tau))[:, P]
        errors.append(np.linalg.norm(p_hat - p_ref, axis=1) / s)
        kept.append(tau)
        grids.append(s)
    if excluded:
        log.warning("%d actuation(s) excluded from the backbone error", len(excluded))
    return ShapeErrorReport(frac, np.array(grids).reshape(-1, len(frac)), np.array(kept).reshape(-1, 6),
                            np.array(errors).reshape(-1, len(s)), excluded)


# ------------------------------------------------------------------ tip error

@dataclass
class TipErrorReport:
    tube: np.ndarray
    s: np.ndarray
    absolute: np.ndarray  # [m]
    normalized: np.ndarray  # absolute / s

    def summary(self) -> dict:
        out = {"kind": "tip-error", "n_records": int(len(self.s)),
               "absolute": _summary(self.absolute), "normalized": _summary(self.normalized),
               "per_tube": {}}
        for t in np.unique(self.tube):
            m = self.tube == t
            out["per_tube"][str(int(t))] = {"absolute": _summary(self.absolute[m]),
                                           "normalized": _summary(self.normalized[m])}
        return out

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Shared bin edges of the normalized error and counts per tube."""
        hi = float(self.normalized.max()) if len(self.normalized) else 1.0
        edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
        return edges, {int(t): np.histogram(self.normalized[self.tube == t], edges)[0]
                       for t in np.unique(self.tube)}

    def write(self, stem: str | Path, metadata: dict | None = None, bins: int = 20):
        edges, counts = self.histogram(bins)
        summary = {**self.summary(), "histogram": {
            "edges": edges.tolist(), "counts": {str(k): v.tolist() for k, v in counts.items()}},
            "metadata": metadata or {}}
        rows = zip(self.tube.astype(int), self.s, self.absolute, self.normalized)
        return _write(stem, ["tube", "s", "abs_error", "normalized_error"], rows, summary)


def tip_error(net, obs: ObservationSet) -> TipErrorReport:
    """Per-record distance between the model and the observed point."""
    p_hat = np.asarray(net.predict(obs.s, obs.tau))[:, P]
    d = np.linalg.norm(p_hat - obs.p, axis=1)
    return TipErrorReport(np.asarray(obs.tube).copy(), np.asarray(obs.s, dtype=float).copy(),
                          d, d / obs.s)


# ------------------------------------------------------------- state recovery

@dataclass
class StateRecovery:
    tau: np.ndarray
    s: np.ndarray  # (n,)
    oracle: np.ndarray  # (n, 15)
    estimate: np.ndarray  # (n, 15), quaternion renormalized and sign-aligned
    orientation_error: np.ndarray  # (n,) geodesic angle [rad]
    rms: np.ndarray  # (15,)
    dynamic_range: np.ndarray  # (15,)
    distal_m: np.ndarray  # (2,) estimated m_xy at l1
    distal_uz: np.ndarray  # (3,) estimated u_iz at l_i
    scales: dict  # characteristic magnitudes used for relative checks

    def relative_rms(self, floor: float = 0.2) -> np.ndarray:
        """RMS over ``max(range, floor * characteristic scale)`` per state.

        States that are identically zero on the oracle have no range; the
        floor keeps the ratio finite for them.
        """
        char = np.empty(STATE_DIM)
        char[GROUPS["m"]] = self.scales["m"]
        char[GROUPS["u"]] = self.scales["u"]
        char[GROUPS["theta"]] = self.scales["theta"]
        char[GROUPS["p"]] = self.scales["p"]
        char[GROUPS["h"]] = self.scales["h"]
        return self.rms / np.maximum(self.dynamic_range, floor * char)

    def summary(self) -> dict:
        return {
            "kind": "state-recovery", "tau": self.tau.tolist(),
            "rms": dict(zip(STATE_NAMES, self.rms.tolist())),
            "dynamic_range": dict(zip(STATE_NAMES, self.dynamic_range.tolist())),
            "relative_rms": dict(zip(STATE_NAMES, self.relative_rms().tolist())),
            "orientation_error": _summary(self.orientation_error),
            "distal_m": self.distal_m.tolist(), "distal_uz": self.distal_uz.tolist(),
            "scales": self.scales,
        }

    def write(self, stem: str | Path, metadata: dict | None = None):
        header = (["s"] + [f"oracle_{n}" for n in STATE_NAMES] + [f"net_{n}" for n in STATE_NAMES]
                  + ["orientation_error"])
        rows = np.column_stack([self.s, self.oracle, self.estimate, self.orientation_error])
        return _write(stem, header, rows.tolist(), {**self.summary(), "metadata": metadata or {}})


def state_recovery(net, robot: RobotSpec, act, n: int = 200, opts: bvp.SolveOptions | None = None,
                   domain: ActuationDomain = SNAP_FREE,
                   sol: bvp.BackboneSolution | None = None) -> StateRecovery:
    """Aligned state curves of model and solver over [0, l1] with RMS deviations."""
    act = act if isinstance(act, Actuation) else Actuation.from_vector(act)
    if sol is None:
        sol = bvp.solve(robot, act, opts, domain)
    if not sol.converged:
        raise bvp.IntegrationDiverged(f"solver did not converge for {act.vector.tolist()}")
    tau = act.vector
    s = np.linspace(0.0, sol.layout.length, n)
    ref = sol.interpolant()(s)
    ref[:, H] = renormalize_quaternions(ref[:, H])
    est = np.array(net.predict(s, tau), dtype=float)
    est[:, H] = align_sign(renormalize_quaternions(est[:, H]), ref[:, H])
    rms = np.sqrt(np.mean((est - ref) ** 2, axis=0))
    rng_ = ref.max(axis=0) - ref.min(axis=0)
    ends = sol.layout.tube_ends
    est_tip = np.asarray(net.predict(np.array([ends[0]]), tau))[0]
    uz = np.array([np.asarray(net.predict(np.array([ends[i]]), tau))[0, UZ.start + i] for i in range(3)])
    scales = {"m": robot.moment_scale, "u": float(np.max(robot.curvatures)), "theta": 1.0,
              "p": float(robot.lengths[0]), "h": 1.0}
    return StateRecovery(tau, s, ref, est, quat_distance(est[:, H], ref[:, H]), rms, rng_,
                         est_tip[0:2], uz, scales)


# ------------------------------------------------------------ runtime bench

@dataclass
class RuntimeReport:
    method: str  # "pinn" or "solver"
    discretization: int
    samples: np.ndarray  # seconds per evaluation

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("a runtime report needs at least one sample")

    @property
    def median(self) -> float:
        return float(np.median(self.samples))

    @property
    def iqr(self) -> float:
        q25, q75 = np.percentile(self.samples, [25, 75])
        return float(q75 - q25)

    @property
    def relative_spread(self) -> float:
        return self.iqr / self.median

    def summary(self) -> dict:
        return {"method": self.method, "discretization": self.discretization,
                **_summary(self.samples), "iqr": self.iqr, "relative_spread": self.relative_spread,
                "max_over_min": float(self.samples.max() / self.samples.min())}


@dataclass
class RuntimeBench:
    reports: list[RuntimeReport]
    metadata: dict

    def get(self, method: str, discretization: int) -> RuntimeReport:
        for r in self.reports:
            if r.method == method and r.discretization == discretization:
                return r
        raise KeyError((method, discretization))

    def summary(self) -> dict:
        return {"kind": "runtime", "reports": [r.summary() for r in self.reports],
                "metadata": self.metadata}

    def write(self, stem: str | Path, metadata: dict | None = None):
        rows = ((r.method, r.discretization, float(x)) for r in self.reports for x in r.samples)
        summary = self.summary()
        summary["metadata"] = {**self.metadata, **(metadata or {})}
        return _write(stem, ["method", "discretization", "seconds"], rows, summary)


def runtime_bench(net, robot: RobotSpec, n_acts: int = 5000,
                  discretizations=DEFAULT_DISCRETIZATIONS, rng: np.random.Generator | None = None,
                  warmup: int = 100, domain: ActuationDomain | None = None,
                  opts: bvp.SolveOptions | None = None) -> RuntimeBench:
    """Wall-clock per evaluation of network inference and full solves.

    The network is evaluated on ``n`` evenly spaced stations; the solver runs
    with step ``l1 / n``.  Everything runs serially on one thread with the
    garbage collector paused, and ``warmup`` untimed evaluations of each method
    precede the timed ones.
    """
    if warmup < 0 or n_acts < 1:
        raise ValueError("need n_acts >= 1 and warmup >= 0")
    rng = rng or np.random.default_rng(0)
    domain = domain or getattr(net, "domain", SNAP_FREE)
    opts = opts or bvp.SolveOptions()
    taus = domain.sample(n_acts, rng)
    warm = domain.sample(warmup, rng) if warmup else np.empty((0, 6))
    threads_before = torch.get_num_threads()
    torch.set_num_threads(1)
    gc_was_enabled = gc.isenabled()
    gc.disable()
    reports = []
    failures = 0
    try:
        for n in discretizations:
            unit = torch.linspace(0.0, 1.0, int(n), dtype=getattr(net, "dtype", torch.float64))

            def run_net(tau, n=n):
                net.predict(unit * float(robot.tube_ends(tau)[0]), tau)

            def run_solver(tau, n=n):
                o = bvp.SolveOptions(tol=opts.tol, max_iter=opts.max_iter,
                                     step=float(robot.tube_ends(tau)[0]) / int(n))
                sol = bvp.solve(robot, Actuation.from_vector(tau), o, domain)
                return sol.converged

            for method, fn in (("pinn", run_net), ("solver", run_solver)):
                for tau in warm:
                    fn(tau)
                samples = np.empty(len(taus))
                for k, tau in enumerate(taus):
                    t0 = time.perf_counter()
                    ok = fn(tau)
                    samples[k] = time.perf_counter() - t0
                    if ok is False:
                        failures += 1
                reports.append(RuntimeReport(method, int(n), samples))
                gc.collect()
    finally:
        torch.set_num_threads(threads_before)
        if gc_was_enabled:
            gc.enable()
    meta = {"n_acts": int(n_acts), "warmup": int(warmup), "threads": 1,
            "discretizations": [int(n) for n in discretizations],
            "solver_tolerance": opts.tol, "solver_failures": failures,
            "torch": torch.__version__, "clock": "time.perf_counter", "gc": "disabled while timing"}
    return RuntimeBench(reports, meta)
