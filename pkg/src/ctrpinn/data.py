"""Observation datasets: synthetic tips from the shooting solver, experimental
tip measurements through a column map, persistence and outlier screening."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import bvp
from .pinn import ObservationSet
from .robot import RESTRICTED, SNAP_FREE, Actuation, ActuationDomain, RobotSpec

log = logging.getLogger(__name__)

DATASET_FORMAT = "ctrpinn-observations"
DATASET_VERSION = 1
COLUMNS = ("tube", "s", "beta1", "beta2", "beta3", "alpha1", "alpha2", "alpha3", "p_x", "p_y", "p_z")
UNITS = {"s": "m", "beta": "m", "alpha": "rad", "p": "m"}
MAX_FAILURE_RATE = 0.01
MAX_MALFORMED_RATE = 0.10


class GenerationError(RuntimeError):
    pass


class IngestError(ValueError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or []


def default_threads() -> int:
    return max(1, int(os.environ.get("CTRPINN_THREADS", "1")))


@dataclass(frozen=True)
class ObservationRecord:
    act: Actuation
    tube: int
    s: float
    p: tuple[float, float, float]
    source: str = "synthetic"


def records(oset: ObservationSet) -> list[ObservationRecord]:
    return [ObservationRecord(Actuation.from_vector(t), int(k), float(s), tuple(p), oset.source)
            for t, k, s, p in zip(oset.tau, oset.tube, oset.s, oset.p)]


def from_records(recs: list[ObservationRecord]) -> ObservationSet:
    if not recs:
        return ObservationSet(np.empty(0), np.empty((0, 6)), np.empty((0, 3)))
    src = {r.source for r in recs}
    return ObservationSet(
        np.array([r.s for r in recs]), np.array([r.act.vector for r in recs]),
        np.array([r.p for r in recs]), np.array([r.tube for r in recs]),
        src.pop() if len(src) == 1 else "mixed")


def solve_many(robot: RobotSpec, taus, opts: bvp.SolveOptions | None = None,
               domain: ActuationDomain = SNAP_FREE, threads: int | None = None,
               with_grid: bool = True, return_exceptions: bool = False) -> list:
    """Independent solves, optionally across threads (the kernels release the GIL).

    With ``return_exceptions`` a diverged integration is returned in place of
    its solution instead of propagating.
    """
    threads = threads or default_threads()

    def one(tau):
        try:
            return bvp.solve(robot, Actuation.from_vector(tau), opts, domain, with_grid=with_grid)
        except bvp.IntegrationDiverged as exc:
            if return_exceptions:
                return exc
            raise

    if threads == 1:
        return [one(t) for t in taus]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(one, taus))


def generate_synthetic(n: int, rng: np.random.Generator, robot: RobotSpec,
                       domain: ActuationDomain = SNAP_FREE, opts: bvp.SolveOptions | None = None,
                       threads: int | None = None) -> ObservationSet:
    """Tip positions of the three tubes for ``n`` random actuations."""
    if n <= 0:
        raise ValueError("n must be positive")
    taus = domain.sample(n, rng)
    sols = solve_many(robot, taus, opts, domain, threads)
    s, tau, p, tube = [], [], [], []
    failed = 0
    for t, sol in zip(taus, sols):
        if not sol.converged:
            failed += 1
            log.warning("skipping unconverged actuation %s (residual %.3g)",
                        t.tolist(), float(np.max(np.abs(sol.residual))))
            continue
        tips = sol.tube_tips()
        for i in range(3):
            s.append(sol.layout.tube_ends[i])
            tau.append(t)
            p.append(tips[i])
            tube.append(i + 1)
    if failed > MAX_FAILURE_RATE * n:
        raise GenerationError(
            f"{failed} of {n} solves did not converge; check solver tolerance and step")
    return ObservationSet(np.array(s), np.array(tau), np.array(p), np.array(tube), "synthetic")


# ---------------------------------------------------------------- file I/O

def save_observations(oset: ObservationSet, path: str | Path, robot: RobotSpec | None = None,
                      **meta) -> None:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "units": UNITS,
              "source": oset.source, "count": len(oset)}
    if robot is not None:
        header["robot_hash"] = robot.digest()
    header.update(meta)
    with open(path, "w", newline="") as fh:
        fh.write("# meta " + json.dumps(header) + "\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(COLUMNS)
        for k, s, t, p in zip(oset.tube, oset.s, oset.tau, oset.p):
            writer.writerow([int(k)] + [repr(float(v)) for v in (s, *t, *p)])


def load_observations(path: str | Path) -> tuple[ObservationSet, dict]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# meta "):
            raise ValueError(f"{path}: missing dataset header")
        meta = json.loads(first[len("# meta "):])
        if meta.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not an observation dataset")
        reader = csv.reader(fh, delimiter="\t")
        cols = next(reader)
        if tuple(cols) != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {cols}")
        rows = [r for r in reader if r]
    if not rows:
        return ObservationSet(np.empty(0), np.empty((0, 6)), np.empty((0, 3)),
                              source=meta.get("source", "synthetic")), meta
    arr = np.array([[float(v) for v in r] for r in rows])
    oset = ObservationSet(arr[:, 1], arr[:, 2:8], arr[:, 8:11], arr[:, 0].astype(int),
                          meta.get("source", "synthetic"))
    return oset, meta


# --------------------------------------------------------------- ingestion

_UNIT_FACTORS = {"m": 1.0, "mm": 1e-3, "cm": 1e-2, "um": 1e-6, "rad": 1.0, "deg": np.pi / 180.0}
ACTUATION_FIELDS = ("beta1", "beta2", "beta3", "alpha1", "alpha2", "alpha3")


@dataclass
class ColumnMap:
    """Column-to-field assignment for an external dataset.

    ``columns`` maps fields (``beta1..3``, ``alpha1..3``, ``tip{k}_{x,y,z}``)
    to ``{"column": name, "unit": unit}``. Tubes without all three tip
    columns are ignored. ``rotation_vector`` [rad] and ``translation`` [m]
    describe a fixed rigid transform from the measurement frame to the robot
    base frame (identity by default).
    """

    columns: dict
    delimiter: str = ","
    comment: str = "#"
    rotation_vector: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.rotation_vector = tuple(float(v) for v in self.rotation_vector)
        self.translation = tuple(float(v) for v in self.translation)

    @classmethod
    def load(cls, path: str | Path) -> ColumnMap:
        with open(path) as fh:
            d = json.load(fh)
        return cls(**d)

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({"columns": self.columns, "delimiter": self.delimiter, "comment": self.comment,
                       "rotation_vector": list(self.rotation_vector),
                       "translation": list(self.translation)}, fh, indent=2)

    def tubes(self) -> list[int]:
        return [k for k in (1, 2, 3) if all(f"tip{k}_{a}" in self.columns for a in "xyz")]

    def validate(self) -> None:
        for f in ACTUATION_FIELDS:
            if f not in self.columns:
                raise IngestError(f"column map lacks field {f!r}")
        if not self.tubes():
            raise IngestError("column map declares no complete tip position (tip{k}_x/y/z)")
        for f, spec in self.columns.items():
            if spec.get("unit") not in _UNIT_FACTORS:
                raise IngestError(f"field {f!r}: unknown unit {spec.get('unit')!r}")


@dataclass
class IngestResult:
    observations: ObservationSet
    kept_rows: int
    rejected: list = field(default_factory=list)  # (line, reason)
    malformed: list = field(default_factory=list)  # (line, reason)

    def report_lines(self) -> list[str]:
        out = [f"kept\t{self.kept_rows}", f"rejected\t{len(self.rejected)}",
               f"malformed\t{len(self.malformed)}"]
        out += [f"{line}\trejected\t{why}" for line, why in self.rejected]
        out += [f"{line}\tmalformed\t{why}" for line, why in self.malformed]
        return out

    def write_report(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.report_lines()) + "\n")


def ingest_experimental(path: str | Path, mapping: ColumnMap, robot: RobotSpec,
                        domain: ActuationDomain = RESTRICTED, sample_size: int | None = None,
                        rng: np.random.Generator | None = None) -> IngestResult:
    """Parse a measured tip dataset into SI observations in the base frame.

    Rows outside ``domain`` are rejected with the violated inequality; rows
    that do not parse are collected with their line numbers. More than 10 %
    malformed rows aborts. ``sample_size`` draws a seeded subset of rows.
    """
    mapping.validate()
    tubes = mapping.tubes()
    rot = Rotation.from_rotvec(np.asarray(mapping.rotation_vector, dtype=float))
    shift = np.asarray(mapping.translation, dtype=float)
    rows, rejected, malformed = [], [], []
    total = 0
    with open(path, newline="") as fh:
        lines = ((i, ln) for i, ln in enumerate(fh, start=1)
                 if ln.strip() and not ln.lstrip().startswith(mapping.comment))
        try:
            hline, header = next(lines)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        names = next(csv.reader([header], delimiter=mapping.delimiter))
        names = [n.strip() for n in names]
        index = {}
        for f, spec in mapping.columns.items():
            if spec["column"] not in names:
                raise IngestError(f"{path}: column {spec['column']!r} for field {f!r} not found")
            index[f] = (names.index(spec["column"]), _UNIT_FACTORS[spec["unit"]])
        for lineno, text in lines:
            total += 1
            cells = next(csv.reader([text], delimiter=mapping.delimiter))
            try:
                vals = {f: float(cells[i]) * fac for f, (i, fac) in index.items()}
            except (ValueError, IndexError) as exc:
                malformed.append((lineno, f"unparseable row: {exc}"))
                continue
            if not all(np.isfinite(v) for v in vals.values()):
                malformed.append((lineno, "non-finite value"))
                continue
            tau = np.array([vals[f] for f in ACTUATION_FIELDS])
            bad = domain.violations(tau)
            if bad:
                rejected.append((lineno, "; ".join(bad)))
                continue
            tips = {k: np.array([vals[f"tip{k}_{a}"] for a in "xyz"]) for k in tubes}
            rows.append((lineno, tau, tips))
    if total and len(malformed) > MAX_MALFORMED_RATE * total:
        raise IngestError(f"{path}: {len(malformed)} of {total} rows malformed", malformed)
    if sample_size is not None and sample_size < len(rows):
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(rows), size=sample_size, replace=False))
        rows = [rows[i] for i in pick]
    s, taus, ps, tube = [], [], [], []
    for _, tau, tips in rows:
        ends = robot.lengths + tau[:3]
        for k, p in tips.items():
            s.append(ends[k - 1])
            taus.append(tau)
            ps.append(rot.apply(p) + shift)
            tube.append(k)
    if s:
        oset = ObservationSet(np.array(s), np.array(taus), np.array(ps), np.array(tube), "experimental")
    else:
        oset = ObservationSet(np.empty(0), np.empty((0, 6)), np.empty((0, 3)), source="experimental")
    return IngestResult(oset, len(rows), rejected, malformed)


def split_rows(oset: ObservationSet, n_first: int, rng: np.random.Generator):
    """Split by actuation (all tubes of a measurement stay together)."""
    keys, inverse = np.unique(oset.tau, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    order = rng.permutation(len(keys))
    first = np.isin(inverse, order[:n_first])
    return oset.subset(np.nonzero(first)[0]), oset.subset(np.nonzero(~first)[0])


# ---------------------------------------------------------------- screening

@dataclass
class ScreenResult:
    clean: ObservationSet
    flagged: ObservationSet
    deviation: np.ndarray  # per input record [m]
    threshold: float


def oracle_positions(oset: ObservationSet, robot: RobotSpec, opts: bvp.SolveOptions | None = None,
                     domain: ActuationDomain = SNAP_FREE, threads: int | None = None) -> np.ndarray:
    """Solver positions at each record's ``(s, tau)``."""
    keys, inverse = np.unique(oset.tau, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    sols = solve_many(robot, keys, opts, domain, threads)
    out = np.empty((len(oset), 3))
    for j, sol in enumerate(sols):
        if not sol.converged:
            raise GenerationError(f"oracle did not converge for {keys[j].tolist()}")
        idx = np.nonzero(inverse == j)[0]
        interp = sol.interpolant()
        out[idx] = interp(oset.s[idx])[:, 8:11]
    return out


def outlier_screen(oset: ObservationSet, robot: RobotSpec, k: float = 10.0,
                   opts: bvp.SolveOptions | None = None, domain: ActuationDomain = SNAP_FREE,
                   threads: int | None = None, min_threshold: float = 1e-6) -> ScreenResult:
    """Flag records whose oracle deviation exceeds ``k`` times the median deviation.

    ``min_threshold`` [m] keeps solver round-off from being flagged when the
    median deviation is essentially zero (oracle-generated data).
    """
    if len(oset) == 0:
        return ScreenResult(oset, oset, np.empty(0), 0.0)
    dev = np.linalg.norm(oset.p - oracle_positions(oset, robot, opts, domain, threads), axis=1)
    thr = max(k * float(np.median(dev)), min_threshold)
    bad = dev > thr
    if bad.any():
        log.info("flagged %d of %d records (threshold %.3g m)", int(bad.sum()), len(oset), thr)
    return ScreenResult(oset.subset(np.nonzero(~bad)[0]), oset.subset(np.nonzero(bad)[0]), dev, thr)
