"""Physics-informed network for the rod state as a function of (s, actuation).

The network maps ``[s, beta_1..3, alpha_1..3]`` to the 15-entry rod state.
Its arc-length derivative is propagated forward alongside the activations
(tangent propagation), so the ODE residual needs no nested autograd; weight
gradients of the losses come from torch reverse mode.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .optim import xavier_init
from .robot import SNAP_FREE, ActuationDomain, RobotSpec
from .rod import GROUPS, STATE_DIM, THETA, UZ, H, P, point_properties, rhs_from_properties

WEIGHTS_FORMAT = "ctrpinn-weights"
WEIGHTS_VERSION = 1
GROUP_NAMES = ("m", "u", "theta", "p", "h")


def output_scales(robot: RobotSpec) -> np.ndarray:
    """Per-component de-scaling of the raw network output (see module docs)."""
    scale = np.ones(STATE_DIM)
    l1 = float(robot.lengths[0])
    # a robot without pre-curvature falls back to one radian of bending over l1
    kappa = float(np.max(robot.curvatures)) or 1.0 / l1
    scale[0:2] = robot.moment_scale or float(np.sum(robot.bending_stiffness)) / l1
    scale[UZ] = kappa
    scale[P] = l1
    return scale


class Network:
    """Tanh MLP with stored input normalisation and output scaling.

    Parameters live as torch tensors ``weights[k]`` of shape (out, in) and
    ``biases[k]`` of shape (out,).
    """

    def __init__(self, robot: RobotSpec, domain: ActuationDomain = SNAP_FREE,
                 hidden: tuple[int, ...] = (100,) * 6, dtype=torch.float64,
                 seed: int | None = 0, zero: bool = False, anchor_base: bool = False,
                 anchor_distal: bool = False):
        self.robot = robot
        # Optional hard boundary conditions, each a multiplier on the scaled output:
        #   anchor_base    p   times s / l1,max              -> p(0) = 0
        #   anchor_distal  m   times (l1 - s) / l1,max       -> m_xy(l1) = 0
        #                  u_i times max(l_i - s, 0) / l1,max -> u_iz = 0 from l_i on
        self.anchor_base = bool(anchor_base)
        self.anchor_distal = bool(anchor_distal)
        self.domain = domain
        self.hidden = tuple(int(h) for h in hidden)
        self.dtype = dtype
        self.seed = seed
        self.metadata: dict = {}
        sizes = (7, *self.hidden, STATE_DIM)
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = np.zeros((n_out, n_in)) if zero else xavier_init((n_out, n_in), rng)
            self.weights.append(torch.tensor(w, dtype=dtype))
            self.biases.append(torch.zeros(n_out, dtype=dtype))

        beta = domain.beta_bounds
        lo = np.array([0.0, *beta[:, 0], -domain.alpha_max, -domain.alpha_max, -domain.alpha_max])
        hi = np.array([robot.lengths[0], *beta[:, 1], domain.alpha_max, domain.alpha_max, domain.alpha_max])
        self.input_lo = lo
        self.input_hi = hi
        self.output_scale = output_scales(robot)
        self.output_shift = np.zeros(STATE_DIM)
        self._refresh_maps()

    def _refresh_maps(self):
        span = self.input_hi - self.input_lo
        self._in_slope = torch.tensor(2.0 / span, dtype=self.dtype)
        self._in_offset = torch.tensor(-1.0 - 2.0 * self.input_lo / span, dtype=self.dtype)
        self._out_scale = torch.tensor(self.output_scale, dtype=self.dtype)
        self._out_shift = torch.tensor(self.output_shift, dtype=self.dtype)
        self._s_max = float(self.input_hi[0])
        self._lengths = torch.tensor(self.robot.lengths, dtype=self.dtype)

    # ------------------------------------------------------------ parameters
    @property
    def parameters(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters)

    def get_vector(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters]).to(torch.float64).numpy().copy()

    def set_vector(self, vec, requires_grad: bool = False) -> None:
        vec = torch.as_tensor(np.asarray(vec, dtype=np.float64)).to(self.dtype)
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            nw, nb = w.numel(), b.numel()
            self.weights[i] = vec[k:k + nw].reshape(w.shape).clone().requires_grad_(requires_grad)
            k += nw
            self.biases[i] = vec[k:k + nb].clone().requires_grad_(requires_grad)
            k += nb
        if k != vec.numel():
            raise ValueError(f"parameter vector has {vec.numel()} entries, expected {k}")

    def _as_inputs(self, s, tau):
        s = torch.as_tensor(s, dtype=self.dtype).reshape(-1)
        tau = torch.as_tensor(tau, dtype=self.dtype).reshape(-1, 6)
        if tau.shape[0] == 1 and s.shape[0] > 1:
            tau = tau.expand(s.shape[0], 6)
        return s, tau

    # ---------------------------------------------------------------- passes
    def forward(self, s, tau) -> torch.Tensor:
        """State estimate in physical units, shape (N, 15)."""
        s, tau = self._as_inputs(s, tau)
        a = torch.cat([s[:, None], tau], dim=1) * self._in_slope + self._in_offset
        n = len(self.weights)
        for k in range(n):
            z = torch.addmm(self.biases[k], a, self.weights[k].T)
            a = torch.tanh(z) if k < n - 1 else z
        out = a * self._out_scale + self._out_shift
        if self.anchor_base or self.anchor_distal:
            out = out * self._anchor(s, tau)[0]
        return out

    def _anchor(self, s, tau):
        """Output multiplier for the hard boundary conditions and its s-derivative."""
        mult = torch.ones(s.shape[0], STATE_DIM, dtype=self.dtype)
        dmult = torch.zeros_like(mult)
        if self.anchor_base:
            mult[:, P] = (s / self._s_max)[:, None]
            dmult[:, P] = 1.0 / self._s_max
        if self.anchor_distal:
            gap = self._lengths + tau[:, :3] - s[:, None]  # l_i - s
            mult[:, 0:2] = (gap[:, :1] / self._s_max)
            dmult[:, 0:2] = -1.0 / self._s_max
            mult[:, UZ] = torch.clamp(gap, min=0.0) / self._s_max
            dmult[:, UZ] = -(gap > 0).to(self.dtype) / self._s_max
        return mult, dmult

    def forward_with_s_derivative(self, s, tau) -> tuple[torch.Tensor, torch.Tensor]:
        """State and its exact arc-length derivative by tangent propagation."""
        s, tau = self._as_inputs(s, tau)
        a = torch.cat([s[:, None], tau], dim=1) * self._in_slope + self._in_offset
        n = len(self.weights)
        # only the s input carries a tangent
        da = None
        for k in range(n):
            w = self.weights[k]
            z = torch.addmm(self.biases[k], a, w.T)
            dz = (w[:, 0] * self._in_slope[0]).expand_as(z) if da is None else da @ w.T
            if k < n - 1:
                a = torch.tanh(z)
                da = (1.0 - a * a) * dz
            else:
                a, da = z, dz
        out, dout = a * self._out_scale + self._out_shift, da * self._out_scale
        if self.anchor_base or self.anchor_distal:
            mult, dmult = self._anchor(s, tau)
            out, dout = out * mult, dout * mult + out * dmult
        return out, dout

    def __call__(self, s, tau) -> torch.Tensor:
        return self.forward(s, tau)

    def predict(self, s, tau) -> np.ndarray:
        with torch.no_grad():
            return self.forward(s, tau).to(torch.float64).numpy()

    # ------------------------------------------------------------------- I/O
    def save(self, path: str | Path, **metadata) -> None:
        meta = {
            "format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION,
            "hidden": list(self.hidden), "activation": "tanh",
            "inputs": ["s", "beta1", "beta2", "beta3", "alpha1", "alpha2", "alpha3"],
            "robot": self.robot.to_dict(), "robot_hash": self.robot.digest(),
            "domain": self.domain.to_dict(), "seed": self.seed,
            "dtype": str(self.dtype).replace("torch.", ""), "anchor_base": self.anchor_base,
            "anchor_distal": self.anchor_distal,
        }
        meta.update(self.metadata)
        meta.update(metadata)
        arrays = {f"W{k}": w.detach().to(torch.float64).numpy() for k, w in enumerate(self.weights)}
        arrays.update({f"b{k}": b.detach().to(torch.float64).numpy() for k, b in enumerate(self.biases)})
        np.savez(path, meta=np.array(json.dumps(meta)), input_lo=self.input_lo,
                 input_hi=self.input_hi, output_scale=self.output_scale,
                 output_shift=self.output_shift, **arrays)

    @classmethod
    def load(cls, path: str | Path, dtype=None) -> Network:
        z = np.load(path, allow_pickle=False)
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != WEIGHTS_FORMAT:
            raise ValueError(f"{path}: not a weight file")
        if meta.get("version", 0) > WEIGHTS_VERSION:
            raise ValueError(f"{path}: weight file version {meta['version']} is newer than supported")
        dtype = dtype or getattr(torch, meta.get("dtype", "float64"))
        robot = RobotSpec.from_dict(meta["robot"])
        net = cls(robot, ActuationDomain.from_dict(meta["domain"]), tuple(meta["hidden"]),
                  dtype=dtype, seed=meta.get("seed"), zero=True,
                  anchor_base=meta.get("anchor_base", False),
                  anchor_distal=meta.get("anchor_distal", False))
        for k in range(len(net.weights)):
            net.weights[k] = torch.tensor(z[f"W{k}"], dtype=dtype)
            net.biases[k] = torch.tensor(z[f"b{k}"], dtype=dtype)
        net.input_lo, net.input_hi = z["input_lo"], z["input_hi"]
        net.output_scale, net.output_shift = z["output_scale"], z["output_shift"]
        net._refresh_maps()
        known = {"format", "version", "hidden", "activation", "inputs", "robot", "robot_hash",
                 "domain", "seed", "dtype", "anchor_base", "anchor_distal"}
        net.metadata = {k: v for k, v in meta.items() if k not in known}
        net.metadata["robot_hash"] = meta["robot_hash"]
        return net


# ------------------------------------------------------------------ samples

@dataclass
class CollocationSet:
    s: np.ndarray  # (N,)
    tau: np.ndarray  # (N, 6)

    def __len__(self):
        return len(self.s)


@dataclass
class BoundarySet:
    tau: np.ndarray  # (N, 6); each expands to s in {0, l3, l2, l1}

    def __len__(self):
        return len(self.tau)


@dataclass
class ObservationSet:
    s: np.ndarray  # (N,)
    tau: np.ndarray  # (N, 6)
    p: np.ndarray  # (N, 3) observed positions [m]
    tube: np.ndarray = field(default=None)  # (N,) 1..3
    source: str = "synthetic"

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float).reshape(-1)
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1, 6)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if self.tube is None:
            self.tube = np.ones(len(self.s), dtype=int)
        self.tube = np.asarray(self.tube, dtype=int).reshape(-1)

    def __len__(self):
        return len(self.s)

    def subset(self, idx) -> ObservationSet:
        return ObservationSet(self.s[idx], self.tau[idx], self.p[idx], self.tube[idx], self.source)

    @staticmethod
    def concat(*sets: ObservationSet) -> ObservationSet:
        sets = [s for s in sets if s is not None and len(s)]
        if not sets:
            return ObservationSet(np.empty(0), np.empty((0, 6)), np.empty((0, 3)))
        src = sets[0].source if len({s.source for s in sets}) == 1 else "mixed"
        return ObservationSet(np.concatenate([s.s for s in sets]), np.concatenate([s.tau for s in sets]),
                              np.concatenate([s.p for s in sets]), np.concatenate([s.tube for s in sets]), src)


def sample_actuations(n: int, rng: np.random.Generator, domain: ActuationDomain = SNAP_FREE) -> np.ndarray:
    return domain.sample(n, rng)


def sample_collocation(n: int, rng: np.random.Generator, robot: RobotSpec,
                       domain: ActuationDomain = SNAP_FREE) -> CollocationSet:
    """Uniform over ``[0, l1(tau)] x domain``."""
    if n <= 0:
        raise ValueError("n must be positive")
    tau = domain.sample(n, rng)
    l1 = robot.lengths[0] + tau[:, 0]
    s = rng.random(n) * l1
    return CollocationSet(s, tau)


def sample_boundary(n: int, rng: np.random.Generator, domain: ActuationDomain = SNAP_FREE) -> BoundarySet:
    if n <= 0:
        raise ValueError("n must be positive")
    return BoundarySet(domain.sample(n, rng))


def bundled_weights() -> Path:
    """Path of the weight file shipped with the package (restricted domain)."""
    return Path(str(resources.files("ctrpinn.resources").joinpath("weights.npz")))


# ------------------------------------------------------------------- losses

NORMS = ("squared", "l2")


@dataclass
class LossWeights:
    ode: dict = field(default_factory=lambda: {"m": 0.1, "u": 0.1, "theta": 1.0, "p": 1.0, "h": 1.0})
    bc: dict = field(default_factory=lambda: {"m": 0.1, "u": 0.1, "theta": 1.0, "p": 1.0, "h": 1.0})
    obs: float = 10.0
    norm: str = "squared"  # per-group penalty: "squared" ||e||^2 or "l2" ||e||

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        vals = list(self.ode.values()) + list(self.bc.values()) + [self.obs]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _tensor(x, like: Network):
    return torch.as_tensor(np.asarray(x), dtype=like.dtype)


def _penalty(sq: torch.Tensor, norm: str) -> torch.Tensor:
    # sq holds squared norms; the tiny offset keeps the l2 gradient finite at e = 0
    return sq if norm == "squared" else torch.sqrt(sq + 1e-300)


def _group_norms(res: torch.Tensor, weights: dict, norm: str = "squared") -> torch.Tensor:
    """Per-point ``sum_g lambda_g ||e_g||^2`` (or ``||e_g||`` for the l2 norm)."""
    total = res.new_zeros(res.shape[0])
    for g in GROUP_NAMES:
        lam = weights.get(g, 0.0)
        if lam:
            total = total + lam * _penalty((res[:, GROUPS[g]] ** 2).sum(1), norm)
    return total


def ode_residual(model, robot: RobotSpec, s, tau) -> torch.Tensor:
    """``d x/ds - N(x, s, tau)`` in physical units, (N, 15)."""
    x, dx = model.forward_with_s_derivative(s, tau)
    s_t = torch.as_tensor(np.asarray(s), dtype=x.dtype).reshape(-1)
    tau_t = torch.as_tensor(np.asarray(tau), dtype=x.dtype).reshape(-1, 6)
    ei, gj, kap, pres = point_properties(robot, s_t, tau_t, xp=torch)
    return dx - rhs_from_properties(x, ei, gj, kap, pres, xp=torch)


def _ode_scale(model, robot: RobotSpec, dtype) -> torch.Tensor:
    # residuals expressed in the network's normalised output and arc-length units
    return torch.as_tensor(robot.lengths[0] / output_scales(robot), dtype=dtype)


def loss_ode(model, robot: RobotSpec, colloc: CollocationSet, w: LossWeights) -> torch.Tensor:
    if len(colloc) == 0:
        raise ValueError("collocation set is empty")
    res = ode_residual(model, robot, colloc.s, colloc.tau)
    res = res * _ode_scale(model, robot, res.dtype)
    return _group_norms(res, w.ode, w.norm).mean()


def boundary_targets(tau: torch.Tensor, uz0: torch.Tensor):
    """Base twist and orientation from the actuation and predicted base torsion."""
    beta, alpha = tau[:, :3], tau[:, 3:]
    phase = alpha - beta * uz0
    theta0 = phase - phase[:, :1]
    half = 0.5 * phase[:, 0]
    zero = torch.zeros_like(half)
    h0 = torch.stack([torch.cos(half), zero, zero, torch.sin(half)], dim=1)
    return theta0, h0


def boundary_residual(model, robot: RobotSpec, tau) -> torch.Tensor:
    """Boundary errors per actuation, (N, 15) ordered like the state groups.

    Four network evaluations per actuation at ``s = 0, l3, l2, l1``.
    """
    tau_np = np.asarray(tau, dtype=float).reshape(-1, 6)
    n = tau_np.shape[0]
    ends = robot.lengths[None, :] + tau_np[:, :3]
    s_all = np.concatenate([np.zeros(n), ends[:, 2], ends[:, 1], ends[:, 0]])
    tau_all = np.concatenate([tau_np] * 4)
    x = model.forward(s_all, tau_all)
    x0, x3, x2, x1 = x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:]
    tau_t = torch.as_tensor(tau_np, dtype=x.dtype)
    theta0, h0 = boundary_targets(tau_t, x0[:, UZ])
    e_m = x1[:, 0:2]
    e_u = torch.stack([x1[:, UZ.start], x2[:, UZ.start + 1], x3[:, UZ.start + 2]], dim=1)
    e_th = x0[:, THETA] - theta0
    e_p = x0[:, P]
    e_h = x0[:, H] - h0
    return torch.cat([e_m, e_u, e_th, e_p, e_h], dim=1)


def loss_bc(model, robot: RobotSpec, bset: BoundarySet, w: LossWeights) -> torch.Tensor:
    if len(bset) == 0:
        raise ValueError("boundary set is empty")
    res = boundary_residual(model, robot, bset.tau)
    res = res / torch.as_tensor(output_scales(robot), dtype=res.dtype)
    return _group_norms(res, w.bc, w.norm).mean()


def loss_obs(model, robot: RobotSpec, oset: ObservationSet | None, w: LossWeights) -> torch.Tensor:
    if oset is None or len(oset) == 0 or w.obs == 0:
        return torch.zeros((), dtype=getattr(model, "dtype", torch.float64))
    x = model.forward(oset.s, oset.tau)
    diff = (x[:, P] - torch.as_tensor(oset.p, dtype=x.dtype)) / float(robot.lengths[0])
    return w.obs * _penalty((diff ** 2).sum(1), w.norm).mean()


@dataclass
class TrainingSets:
    colloc: CollocationSet
    boundary: BoundarySet
    obs: ObservationSet | None = None


def total_loss(net: Network, robot: RobotSpec, sets: TrainingSets, w: LossWeights):
    """``(total, {"ode", "bc", "obs"})`` as torch scalars."""
    terms = {
        "ode": loss_ode(net, robot, sets.colloc, w),
        "bc": loss_bc(net, robot, sets.boundary, w),
        "obs": loss_obs(net, robot, sets.obs, w),
    }
    return terms["ode"] + terms["bc"] + terms["obs"], terms


def value_and_grad(net: Network, vec, loss_fn) -> tuple[float, np.ndarray, dict]:
    """Evaluate ``loss_fn(net)`` at parameter vector ``vec`` with its gradient."""
    net.set_vector(vec, requires_grad=True)
    loss, terms = loss_fn(net)
    grads = torch.autograd.grad(loss, net.parameters, allow_unused=True)
    flat = torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for g, p in zip(grads, net.parameters)
    ]).to(torch.float64).numpy()
    net.set_vector(vec)
    return float(loss.detach()), flat, {k: float(v.detach()) for k, v in terms.items()}


def make_objective(net: Network, robot: RobotSpec, sets: TrainingSets, w: LossWeights):
    """Objective for the optimiser; remembers per-term values by loss value."""
    cache: dict[float, dict] = {}

    def fun(vec):
        f, g, terms = value_and_grad(net, vec, lambda n: total_loss(n, robot, sets, w))
        if not math.isfinite(f):
            f = math.inf
        cache[f] = terms
        if len(cache) > 64:
            cache.pop(next(iter(cache)))
        return f, g

    fun.terms = cache
    return fun
