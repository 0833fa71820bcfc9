"""Tube, robot and actuation types for a three-tube concentric tube robot.

All quantities are SI (m, rad, Pa). The configuration loader reads the
millimetre/GPa units used in tube data sheets and converts them.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid robot configuration; the message names the offending field."""


class DomainError(ValueError):
    """Actuation outside the admissible (snap-free) domain."""


@dataclass(frozen=True)
class TubeSpec:
    inner_diameter: float
    outer_diameter: float
    straight_length: float
    curved_length: float
    precurvature: float
    youngs_modulus: float
    shear_modulus: float

    def __post_init__(self):
        if not 0 < self.inner_diameter < self.outer_diameter:
            raise ConfigError(
                f"inner_diameter must satisfy 0 < inner_diameter < outer_diameter "
                f"(got {self.inner_diameter!r}, {self.outer_diameter!r})")
        if self.straight_length < 0:
            raise ConfigError(f"straight_length must be >= 0 (got {self.straight_length!r})")
        if self.curved_length <= 0:
            raise ConfigError(f"curved_length must be > 0 (got {self.curved_length!r})")
        if self.precurvature < 0:
            raise ConfigError(f"precurvature must be >= 0 (got {self.precurvature!r})")
        if self.youngs_modulus <= 0:
            raise ConfigError(f"youngs_modulus must be > 0 (got {self.youngs_modulus!r})")
        if self.shear_modulus <= 0:
            raise ConfigError(f"shear_modulus must be > 0 (got {self.shear_modulus!r})")

    @property
    def length(self) -> float:
        return self.straight_length + self.curved_length


def section_properties(tube: TubeSpec) -> tuple[float, float, float, float]:
    """Annular cross-section: ``(I, J, EI, GJ)`` with ``J = 2 I``."""
    i = math.pi / 64.0 * (tube.outer_diameter ** 4 - tube.inner_diameter ** 4)
    j = 2.0 * i
    return i, j, tube.youngs_modulus * i, tube.shear_modulus * j


@dataclass(frozen=True)
class RobotSpec:
    """Three nested tubes; tube 1 is the innermost and longest."""

    tubes: tuple[TubeSpec, TubeSpec, TubeSpec]
    name: str = "ctr"

    def __post_init__(self):
        if len(self.tubes) != 3:
            raise ConfigError(f"tubes: expected 3 tubes, got {len(self.tubes)}")
        object.__setattr__(self, "tubes", tuple(self.tubes))
        for k in range(2):
            inner, outer = self.tubes[k], self.tubes[k + 1]
            if not inner.length > outer.length:
                raise ConfigError(
                    f"tube{k + 1}.length must exceed tube{k + 2}.length "
                    f"({inner.length!r} <= {outer.length!r})")
            if not inner.outer_diameter < outer.inner_diameter:
                raise ConfigError(
                    f"tube{k + 1}.outer_diameter must be smaller than "
                    f"tube{k + 2}.inner_diameter")

    # per-tube arrays, shape (3,)
    @property
    def lengths(self) -> np.ndarray:
        return np.array([t.length for t in self.tubes])

    def tube_ends(self, tau) -> np.ndarray:
        """Distal arc lengths L_i + beta_i for one actuation (first entry is the backbone length)."""
        return self.lengths + np.asarray(tau, dtype=float)[:3]

    @property
    def straight_lengths(self) -> np.ndarray:
        return np.array([t.straight_length for t in self.tubes])

    @property
    def curvatures(self) -> np.ndarray:
        return np.array([t.precurvature for t in self.tubes])

    @property
    def bending_stiffness(self) -> np.ndarray:
        return np.array([section_properties(t)[2] for t in self.tubes])

    @property
    def torsional_stiffness(self) -> np.ndarray:
        return np.array([section_properties(t)[3] for t in self.tubes])

    @property
    def moment_scale(self) -> float:
        """Characteristic bending moment, sum of ``EI_i * kappa_i`` [N m]."""
        return float(np.sum(self.bending_stiffness * self.curvatures))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tubes": [
                {
                    "inner_diameter": t.inner_diameter,
                    "outer_diameter": t.outer_diameter,
                    "straight_length": t.straight_length,
                    "curved_length": t.curved_length,
                    "precurvature": t.precurvature,
                    "youngs_modulus": t.youngs_modulus,
                    "shear_modulus": t.shear_modulus,
                }
                for t in self.tubes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> RobotSpec:
        return cls(tuple(TubeSpec(**t) for t in d["tubes"]), name=d.get("name", "ctr"))

    def digest(self) -> str:
        """Hash of the canonical (SI, sorted-key) robot description."""
        payload = json.dumps(self.to_dict()["tubes"], sort_keys=True,
                             separators=(",", ":"), default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# (key in file, TubeSpec field, factor to SI)
_TUBE_KEYS = (
    ("inner_diameter_mm", "inner_diameter", 1e-3),
    ("outer_diameter_mm", "outer_diameter", 1e-3),
    ("straight_length_mm", "straight_length", 1e-3),
    ("curved_length_mm", "curved_length", 1e-3),
    ("curvature_per_m", "precurvature", 1.0),
    ("youngs_modulus_gpa", "youngs_modulus", 1e9),
    ("shear_modulus_gpa", "shear_modulus", 1e9),
)


def load_robot(path: str | Path | None = None) -> RobotSpec:
    """Read an INI robot file (sections ``[tube1]``..``[tube3]``).

    ``None`` loads the bundled three-tube robot.
    """
    parser = configparser.ConfigParser()
    if path is None:
        text = resources.files("ctrpinn.resources").joinpath("robot_table1.ini").read_text()
        parser.read_string(text)
        source = "robot_table1.ini"
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"robot file not found: {path}")
        parser.read(path)
        source = str(path)
    name = parser.get("robot", "name", fallback=Path(source).stem)
    tubes = []
    for k in (1, 2, 3):
        sec = f"tube{k}"
        if not parser.has_section(sec):
            raise ConfigError(f"{source}: missing section [{sec}]")
        values = {}
        for key, attr, factor in _TUBE_KEYS:
            if not parser.has_option(sec, key):
                raise ConfigError(f"{source}: missing field {sec}.{key}")
            raw = parser.get(sec, key)
            try:
                values[attr] = float(raw) * factor
            except ValueError:
                raise ConfigError(f"{source}: field {sec}.{key} is not a number: {raw!r}") from None
        try:
            tubes.append(TubeSpec(**values))
        except ConfigError as exc:
            raise ConfigError(f"{source}: {sec}.{exc}") from None
    try:
        return RobotSpec(tuple(tubes), name=name)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def write_robot(robot: RobotSpec, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    parser["robot"] = {"name": robot.name}
    for k, tube in enumerate(robot.tubes, start=1):
        parser[f"tube{k}"] = {
            key: repr(getattr(tube, attr) / factor) for key, attr, factor in _TUBE_KEYS
        }
    with open(path, "w") as fh:
        parser.write(fh)


@dataclass(frozen=True)
class Actuation:
    """Tube translations ``beta`` (m, each <= 0) and rotations ``alpha`` (rad)."""

    beta: tuple[float, float, float]
    alpha: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(self.beta) != 3 or len(self.alpha) != 3:
            raise DomainError("actuation needs three translations and three rotations")

    @classmethod
    def from_vector(cls, tau) -> Actuation:
        tau = np.asarray(tau, dtype=float).ravel()
        if tau.shape != (6,):
            raise DomainError(f"actuation vector must have 6 entries, got {tau.size}")
        return cls(tuple(tau[:3]), tuple(tau[3:]))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.beta + self.alpha)


@dataclass(frozen=True)
class ActuationDomain:
    """Snap-free actuation box.

    ``-beta3_span <= beta3 <= 0``, ``beta3 - beta2_span <= beta2 <= beta3``,
    ``beta2 - beta1_span <= beta1 <= beta2`` and ``|alpha_i| <= alpha_max``.
    """

    beta3_span: float = 0.010
    beta2_span: float = 0.055
    beta1_span: float = 0.015
    alpha_max: float = math.pi
    slack: float = field(default=1e-12, repr=False)

    def violations(self, tau) -> list[str]:
        b1, b2, b3, *alpha = np.asarray(tau, dtype=float).ravel()
        eps = self.slack
        out = []
        if b3 > eps:
            out.append(f"beta3 <= 0 violated (beta3 = {b3:.6g} m)")
        if b3 < -self.beta3_span - eps:
            out.append(f"beta3 >= -{self.beta3_span:g} m violated (beta3 = {b3:.6g} m)")
        if b2 > b3 + eps:
            out.append(f"beta2 <= beta3 violated (beta2 = {b2:.6g}, beta3 = {b3:.6g} m)")
        if b2 < b3 - self.beta2_span - eps:
            out.append(f"beta2 >= beta3 - {self.beta2_span:g} m violated (beta2 = {b2:.6g} m)")
        if b1 > b2 + eps:
            out.append(f"beta1 <= beta2 violated (beta1 = {b1:.6g}, beta2 = {b2:.6g} m)")
        if b1 < b2 - self.beta1_span - eps:
            out.append(f"beta1 >= beta2 - {self.beta1_span:g} m violated (beta1 = {b1:.6g} m)")
        for i, a in enumerate(alpha, start=1):
            if abs(a) > self.alpha_max + eps:
                out.append(f"|alpha{i}| <= {self.alpha_max:.6g} rad violated (alpha{i} = {a:.6g})")
        return out

    def contains(self, tau) -> bool:
        return not self.violations(tau)

    def check(self, tau) -> None:
        bad = self.violations(tau)
        if bad:
            raise DomainError("; ".join(bad))

    def contains_batch(self, taus) -> np.ndarray:
        taus = np.atleast_2d(taus)
        b1, b2, b3 = taus[:, 0], taus[:, 1], taus[:, 2]
        eps = self.slack
        ok = (b3 <= eps) & (b3 >= -self.beta3_span - eps)
        ok &= (b2 <= b3 + eps) & (b2 >= b3 - self.beta2_span - eps)
        ok &= (b1 <= b2 + eps) & (b1 >= b2 - self.beta1_span - eps)
        ok &= np.all(np.abs(taus[:, 3:]) <= self.alpha_max + eps, axis=1)
        return ok

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draws, shape ``(n, 6)``.

        The chained translation limits are a unit-determinant shear of a box,
        so sampling the successive differences uniformly is exactly uniform.
        """
        u = rng.random((n, 6))
        b3 = -self.beta3_span * u[:, 0]
        b2 = b3 - self.beta2_span * u[:, 1]
        b1 = b2 - self.beta1_span * u[:, 2]
        alpha = self.alpha_max * (2.0 * u[:, 3:] - 1.0)
        return np.column_stack([b1, b2, b3, alpha])

    @property
    def beta_bounds(self) -> np.ndarray:
        """Per-coordinate ``[lo, hi]`` hull of the translations, shape ``(3, 2)``."""
        b3 = self.beta3_span
        b2 = b3 + self.beta2_span
        b1 = b2 + self.beta1_span
        return np.array([[-b1, 0.0], [-b2, 0.0], [-b3, 0.0]])

    def to_dict(self) -> dict:
        return {"beta3_span": self.beta3_span, "beta2_span": self.beta2_span,
                "beta1_span": self.beta1_span, "alpha_max": self.alpha_max}

    @classmethod
    def from_dict(cls, d: dict) -> ActuationDomain:
        return cls(**{k: float(d[k]) for k in ("beta3_span", "beta2_span", "beta1_span", "alpha_max")})


SNAP_FREE = ActuationDomain()
RESTRICTED = ActuationDomain(alpha_max=math.pi / 3)
