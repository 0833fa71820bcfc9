"""Composite-tube Cosserat rod equations in free space.

State layout (15 entries)::

    0:2    m_xy   body-frame bending moment of tube 1 [N m]
    2:5    u_z    torsional curvature of each tube [1/m]
    5:8    theta  twist of tube i relative to tube 1 [rad]
    8:11   p      backbone position [m]
    11:15  h      orientation quaternion (w, x, y, z)

The right-hand side is written against a tiny array namespace so the same code
runs on numpy arrays and on torch tensors (the latter for the network losses).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .robot import SNAP_FREE, Actuation, ActuationDomain, DomainError, RobotSpec

STATE_DIM = 15
M = slice(0, 2)
UZ = slice(2, 5)
THETA = slice(5, 8)
P = slice(8, 11)
H = slice(11, 15)
GROUPS = {"m": M, "u": UZ, "theta": THETA, "p": P, "h": H}

MERGE_TOL = 1e-12


@dataclass(frozen=True)
class SegmentLayout:
    """Piecewise-constant tube properties along the backbone.

    Arrays indexed ``[segment, tube]``. Absent tubes have zero stiffness and
    zero pre-curvature; ``precurvature`` is zero on straight portions.
    """

    boundaries: np.ndarray  # (K + 1,)
    present: np.ndarray  # (K, 3) bool
    precurvature: np.ndarray  # (K, 3)
    bending_stiffness: np.ndarray  # (K, 3)
    torsional_stiffness: np.ndarray  # (K, 3)
    tube_ends: np.ndarray  # (3,) distal arc-length of each tube

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def length(self) -> float:
        return float(self.boundaries[-1])

    def segment_index(self, s) -> np.ndarray:
        """Segment containing ``s``; segments are half-open ``[b_k, b_k+1)``
        except the last, which includes the tip."""
        k = np.searchsorted(self.boundaries, s, side="right") - 1
        return np.clip(k, 0, self.n_segments - 1)


def tube_ends(robot: RobotSpec, beta) -> np.ndarray:
    """Distal arc-lengths ``l_i = L_i + beta_i``."""
    return robot.lengths + np.asarray(beta, dtype=float)


def segment_layout(robot: RobotSpec, act: Actuation,
                   domain: ActuationDomain = SNAP_FREE) -> SegmentLayout:
    domain.check(act.vector)
    beta = np.asarray(act.beta)
    ends = tube_ends(robot, beta)
    curve_start = beta + robot.straight_lengths
    total = ends[0]
    cuts = np.concatenate([[0.0], curve_start, ends])
    cuts = np.clip(cuts, 0.0, total)
    cuts = np.unique(cuts)
    # merge coincident transitions
    keep = np.concatenate([[True], np.diff(cuts) > MERGE_TOL])
    cuts = cuts[keep]
    cuts[-1] = total

    mids = 0.5 * (cuts[:-1] + cuts[1:])
    present = mids[:, None] < ends[None, :]
    present[:, 0] = True
    curved = mids[:, None] >= curve_start[None, :]
    kappa = np.where(present & curved, robot.curvatures[None, :], 0.0)
    ei = np.where(present, robot.bending_stiffness[None, :], 0.0)
    gj = np.where(present, robot.torsional_stiffness[None, :], 0.0)
    return SegmentLayout(cuts, present, kappa, ei, gj, ends)


def point_properties(robot: RobotSpec, s, tau, xp=np):
    """Per-point tube properties for arrays of ``s`` (N,) and ``tau`` (N, 6).

    Returns ``(EI, GJ, kappa, present)``, each (N, 3), following the same
    half-open segment convention as :func:`segment_layout`.
    """
    lengths = _const(xp, robot.lengths, tau)
    straight = _const(xp, robot.straight_lengths, tau)
    kappa0 = _const(xp, robot.curvatures, tau)
    ei0 = _const(xp, robot.bending_stiffness, tau)
    gj0 = _const(xp, robot.torsional_stiffness, tau)
    beta = tau[:, :3]
    s = s[:, None]
    ends = lengths + beta
    present = s < ends
    present = _stack(xp, [xp.ones_like(present[:, 0]), present[:, 1], present[:, 2]])
    curved = s >= beta + straight
    zero = 0.0 * s
    kappa = xp.where(present & curved, kappa0 + zero, zero)
    ei = xp.where(present, ei0 + zero, zero)
    gj = xp.where(present, gj0 + zero, zero)
    return ei, gj, kappa, present


def composite_curvature_xy(state, ei, gj, kappa, xp=np):
    """x/y curvature of tube 1 from the moment balance over present tubes.

    ``u1_xy = K^-1 (m_b + sum_i Rz(theta_i) K_i u*_i)|_xy``; since the bending
    stiffness is isotropic, ``K_xy`` is the scalar ``sum_i EI_i``.
    """
    th = state[..., THETA]
    k_sum = ei[..., 0] + ei[..., 1] + ei[..., 2]
    w = ei * kappa
    cx = (w * xp.cos(th)).sum(-1)
    cy = (w * xp.sin(th)).sum(-1)
    ux = (state[..., 0] + cx) / k_sum
    uy = (state[..., 1] + cy) / k_sum
    return ux, uy


def rhs_from_properties(state, ei, gj, kappa, present, xp=np):
    """d(state)/ds for arrays of states (..., 15) with matching properties."""
    mx, my = state[..., 0], state[..., 1]
    uz = state[..., UZ]
    th = state[..., THETA]
    hw, hx, hy, hz = state[..., 11], state[..., 12], state[..., 13], state[..., 14]
    pres = present * 1.0

    ux, uy = composite_curvature_xy(state, ei, gj, kappa, xp)
    u1z = uz[..., 0]
    mz = (gj * uz).sum(-1)

    # free space: the world-frame moment is constant, so dm_b/ds = -u x m_b
    dmx = -(uy * mz - u1z * my)
    dmy = -(u1z * mx - ux * mz)

    # tube-frame curvature: u_i = Rz(theta_i)^T u_1
    c, s_ = xp.cos(th), xp.sin(th)
    uiy = -s_ * ux[..., None] + c * uy[..., None]
    ratio = xp.where(present, ei / xp.where(present, gj, 1.0 + 0.0 * gj), 0.0 * gj)
    duz = -ratio * kappa * uiy
    dth = pres * (uz - u1z[..., None])

    dpx = 2.0 * (hx * hz + hw * hy)
    dpy = 2.0 * (hy * hz - hw * hx)
    dpz = 1.0 - 2.0 * (hx * hx + hy * hy)

    # dh/ds = 1/2 h (x) (0, u)
    dhw = 0.5 * (-hx * ux - hy * uy - hz * u1z)
    dhx = 0.5 * (hw * ux + hy * u1z - hz * uy)
    dhy = 0.5 * (hw * uy + hz * ux - hx * u1z)
    dhz = 0.5 * (hw * u1z + hx * uy - hy * ux)

    parts = [dmx, dmy, duz[..., 0], duz[..., 1], duz[..., 2],
             dth[..., 0], dth[..., 1], dth[..., 2], dpx, dpy, dpz, dhw, dhx, dhy, dhz]
    return _stack(xp, parts)


def ode_rhs(s: float, state, layout: SegmentLayout) -> np.ndarray:
    """Right-hand side at arc-length ``s`` using the layout's segment tables."""
    if not 0.0 <= s <= layout.length + MERGE_TOL:
        raise DomainError(f"arc-length {s!r} outside [0, {layout.length!r}]")
    k = int(layout.segment_index(s))
    return rhs_from_properties(
        np.asarray(state, dtype=float), layout.bending_stiffness[k],
        layout.torsional_stiffness[k], layout.precurvature[k], layout.present[k])


def moment_z(state, layout: SegmentLayout, s: float) -> float:
    """Derived torsional moment ``sum_i GJ_i u_iz`` over tubes present at ``s``."""
    k = int(layout.segment_index(s))
    return float(np.dot(layout.torsional_stiffness[k], np.asarray(state)[UZ]))


# ---------------------------------------------------------------- quaternions

def quat_z(angle):
    """Quaternion of a rotation about z, (w, x, y, z)."""
    angle = np.asarray(angle, dtype=float)
    z = np.zeros_like(angle)
    return np.stack([np.cos(angle / 2), z, z, np.sin(angle / 2)], axis=-1)


def quat_to_matrix(h) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z); batched on leading axes."""
    h = np.asarray(h, dtype=float)
    w, x, y, z = h[..., 0], h[..., 1], h[..., 2], h[..., 3]
    r = np.empty(h.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_distance(a, b) -> np.ndarray:
    """Geodesic angle [rad] between orientations, after renormalisation and
    sign alignment (``q`` and ``-q`` are the same rotation)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    dot = np.abs(np.sum(a * b, axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


def _stack(xp, parts):
    if xp is np:
        return np.stack(parts, axis=-1)
    return xp.stack(parts, dim=-1)


def _const(xp, values, like):
    if xp is np:
        return np.asarray(values, dtype=float)
    return xp.as_tensor(values, dtype=like.dtype, device=like.device)
