"""Full-batch L-BFGS training of the network on the composite loss.

A run directory holds::

    config.json       the resolved training configuration
    samples.npz       fixed collocation / boundary / observation sets
    train_log.tsv     append-only per-iteration log
    checkpoint.npz    optimiser state for resuming
    weights.npz       latest network weights
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as datamod
from .optim import IterationRecord, Lbfgs, LbfgsConfig, LbfgsState
from .pinn import (
    BoundarySet,
    CollocationSet,
    LossWeights,
    Network,
    ObservationSet,
    TrainingSets,
    make_objective,
    sample_boundary,
    sample_collocation,
)
from .robot import ActuationDomain, RobotSpec

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss", "ode", "bc", "obs", "grad_norm", "step", "evaluations",
               "wall_time", "kind")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage: str = "synthetic"  # or "experimental"
    n_colloc: int = 20000
    n_boundary: int = 1000
    n_obs: int = 1000
    seed: int = 0
    alpha_max: float = math.pi
    hidden: tuple = (100,) * 6
    dtype: str = "float64"
    max_iter: int = 20000
    checkpoint_every: int = 50
    obs_mode: str = "augment"  # stage 2: keep ("augment") or drop ("replace") synthetic obs
    anchor_base: bool = False  # build the network with p(0) = 0 exactly
    anchor_distal: bool = False  # ... and with m_xy(l1) = 0, u_iz(l_i) = 0 exactly
    lbfgs: dict = field(default_factory=lambda: asdict(LbfgsConfig()))
    weights: dict = field(default_factory=lambda: LossWeights().to_dict())

    def __post_init__(self):
        if self.stage not in ("synthetic", "experimental"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.obs_mode not in ("augment", "replace"):
            raise ValueError(f"unknown obs_mode {self.obs_mode!r}")
        self.hidden = tuple(self.hidden)

    @property
    def domain(self) -> ActuationDomain:
        return ActuationDomain(alpha_max=self.alpha_max)

    def lbfgs_config(self) -> LbfgsConfig:
        return LbfgsConfig(**{**self.lbfgs, "max_iter": self.max_iter})

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def build_sets(robot: RobotSpec, cfg: TrainConfig, obs: ObservationSet | None) -> TrainingSets:
    rng = np.random.default_rng(cfg.seed)
    colloc = sample_collocation(cfg.n_colloc, rng, robot, cfg.domain)
    boundary = sample_boundary(cfg.n_boundary, rng, cfg.domain)
    return TrainingSets(colloc, boundary, obs)


def save_sets(sets: TrainingSets, path: Path) -> None:
    obs = sets.obs or ObservationSet(np.empty(0), np.empty((0, 6)), np.empty((0, 3)))
    np.savez(path, colloc_s=sets.colloc.s, colloc_tau=sets.colloc.tau, boundary_tau=sets.boundary.tau,
             obs_s=obs.s, obs_tau=obs.tau, obs_p=obs.p, obs_tube=obs.tube, obs_source=np.array(obs.source))


def load_sets(path: Path) -> TrainingSets:
    z = np.load(path)
    obs = ObservationSet(z["obs_s"], z["obs_tau"], z["obs_p"], z["obs_tube"], str(z["obs_source"]))
    return TrainingSets(CollocationSet(z["colloc_s"], z["colloc_tau"]), BoundarySet(z["boundary_tau"]),
                        obs if len(obs) else None)


class TrainingLog:
    """Append-only TSV log."""

    def __init__(self, path: Path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w") as fh:
                fh.write("\t".join(LOG_COLUMNS) + "\n")

    def append(self, row: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write("\t".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")

    @staticmethod
    def read(path: Path) -> dict[str, np.ndarray]:
        with open(path) as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        out = {}
        for c in LOG_COLUMNS:
            vals = [r[c] for r in rows]
            out[c] = np.array(vals) if c == "kind" else np.array([float(v) for v in vals])
        return out


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Trainer:
    """Owns the network, the fixed sample sets and the optimiser state."""

    def __init__(self, robot: RobotSpec, cfg: TrainConfig, run_dir: str | Path,
                 obs: ObservationSet | None = None, init: Network | None = None,
                 resume: bool = False):
        self.robot = robot
        self.cfg = cfg
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        dtype = getattr(torch, cfg.dtype)
        ckpt = self.dir / "checkpoint.npz"
        if resume and ckpt.exists():
            saved = TrainConfig.from_dict(json.loads((self.dir / "config.json").read_text()))
            self.cfg = cfg = saved
            self.sets = load_sets(self.dir / "samples.npz")
            self.net = Network.load(self.dir / "weights.npz", dtype=dtype)
            state = LbfgsState.load(ckpt)
        else:
            if cfg.stage == "experimental" and init is None:
                raise ValueError("the experimental stage starts from pretrained weights")
            self.sets = build_sets(robot, cfg, obs)
            if init is not None:
                self.net = init
                if init.dtype != dtype:
                    vec = init.get_vector()
                    init.dtype = dtype
                    init.set_vector(vec)
                    init._refresh_maps()
            else:
                self.net = Network(robot, cfg.domain, cfg.hidden, dtype=dtype, seed=cfg.seed,
                                   anchor_base=cfg.anchor_base, anchor_distal=cfg.anchor_distal)
            (self.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
            save_sets(self.sets, self.dir / "samples.npz")
            state = None
        self.objective = make_objective(self.net, robot, self.sets, cfg.loss_weights())
        x0 = None if state is not None else self.net.get_vector()
        self.opt = Lbfgs(self.objective, x0, cfg.lbfgs_config(), state)
        if not math.isfinite(self.opt.state.f):
            raise TrainingDiverged("initial loss is not finite")
        self.log = TrainingLog(self.dir / "train_log.tsv")
        self._t0 = time.perf_counter()
        self._wall_offset = self._last_wall()

    def _last_wall(self) -> float:
        try:
            logged = TrainingLog.read(self.dir / "train_log.tsv")
            return float(logged["wall_time"][-1]) if len(logged["wall_time"]) else 0.0
        except (FileNotFoundError, KeyError, IndexError):
            return 0.0

    def _record(self, rec: IterationRecord) -> None:
        terms = self.objective.terms.get(rec.loss, {"ode": math.nan, "bc": math.nan, "obs": math.nan})
        self.log.append({
            "iteration": rec.iteration, "loss": rec.loss, "ode": terms["ode"], "bc": terms["bc"],
            "obs": terms["obs"], "grad_norm": rec.grad_norm, "step": rec.step,
            "evaluations": rec.evaluations, "kind": rec.kind,
            "wall_time": self._wall_offset + time.perf_counter() - self._t0,
        })

    def checkpoint(self) -> None:
        st = self.opt.state
        self.net.set_vector(st.x)
        self.net.save(self.dir / "weights.npz", stage=self.cfg.stage, iteration=st.iteration,
                      loss=st.f, train_config=self.cfg.to_dict())
        tmp = self.dir / "checkpoint.tmp.npz"
        st.save(tmp)
        tmp.replace(self.dir / "checkpoint.npz")

    def run(self, max_iter: int | None = None, progress_every: int = 100) -> str:
        """Iterate until a stopping rule fires or the iteration budget is used."""
        limit = self.cfg.max_iter if max_iter is None else min(max_iter, self.cfg.max_iter)
        reason = "maximum iterations"
        while self.opt.state.iteration < limit:
            rec = self.opt.step()
            if rec is not None:
                if not math.isfinite(rec.loss):
                    raise TrainingDiverged(f"non-finite loss at iteration {rec.iteration}")
                self._record(rec)
                if rec.iteration % self.cfg.checkpoint_every == 0:
                    self.checkpoint()
                if progress_every and rec.iteration % progress_every == 0:
                    log.info("iter %d loss %.4e |g| %.3e", rec.iteration, rec.loss, rec.grad_norm)
            if self.opt.reason is not None:
                reason = self.opt.reason
                break
        self.checkpoint()
        return reason


def synthetic_observations(robot: RobotSpec, n_records: int, rng: np.random.Generator,
                           domain: ActuationDomain, threads: int | None = None) -> ObservationSet:
    """``n_records`` tip observations (three per actuation)."""
    n_act = -(-n_records // 3)
    oset = datamod.generate_synthetic(n_act, rng, robot, domain, threads=threads)
    return oset.subset(np.arange(min(n_records, len(oset))))
