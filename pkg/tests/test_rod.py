import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrpinn import SNAP_FREE, Actuation, DomainError, RobotSpec, TubeSpec, ode_rhs, segment_layout
from ctrpinn.bvp import _rhs
from ctrpinn.rod import (
    THETA,
    UZ,
    H,
    composite_curvature_xy,
    moment_z,
    point_properties,
    quat_distance,
    quat_to_matrix,
    quat_z,
    rhs_from_properties,
)

from oracles import brute_force_rhs

MM = 1e-3


def test_layout_example_shifted(robot):
    lay = segment_layout(robot, Actuation.from_vector([-5 * MM, -3 * MM, -1 * MM, 0, 0, 0]))
    np.testing.assert_allclose(lay.tube_ends, [0.205, 0.162, 0.109], atol=1e-15)
    np.testing.assert_allclose(lay.boundaries / MM, [0, 9, 62, 109, 162, 164, 205], atol=1e-9)
    assert lay.n_segments == 6


def test_layout_example_zero(robot):
    lay = segment_layout(robot, Actuation.from_vector([0, 0, 0, 0, 0, 0]))
    np.testing.assert_allclose(lay.boundaries / MM, [0, 10, 65, 110, 165, 169, 210], atol=1e-9)


def test_layout_without_straight_portions(robot):
    tubes = tuple(TubeSpec(t.inner_diameter, t.outer_diameter, 0.0, t.length, t.precurvature,
                           t.youngs_modulus, t.shear_modulus) for t in robot.tubes)
    lay = segment_layout(RobotSpec(tubes), Actuation.from_vector([0] * 6))
    np.testing.assert_allclose(lay.boundaries, [0, 0.110, 0.165, 0.210])


def test_layout_tables(robot):
    lay = segment_layout(robot, Actuation.from_vector([-5 * MM, -3 * MM, -1 * MM, 0, 0, 0]))
    # segment [109, 162) mm: tubes 1 and 2 present, tube 2 curved, tube 1 straight
    k = int(lay.segment_index(0.12))
    assert lay.present[k].tolist() == [True, True, False]
    np.testing.assert_allclose(lay.precurvature[k], [0.0, 12.4, 0.0])
    assert lay.bending_stiffness[k, 2] == 0.0
    # the tip segment has only the curved innermost tube
    assert lay.present[-1].tolist() == [True, False, False]
    assert lay.precurvature[-1, 0] == pytest.approx(28.0)


def test_layout_rejects_outside_domain(robot):
    with pytest.raises(DomainError, match="beta3"):
        segment_layout(robot, Actuation.from_vector([0, 0, 0.01, 0, 0, 0]))


def test_layout_merges_coincident_cuts(robot):
    # tube 2's curve starts exactly where tube 3 ends when beta2 + 65 mm = 110 mm + beta3
    lay = segment_layout(robot, Actuation.from_vector([-0.046, -0.045, 0.0, 0, 0, 0]))
    assert np.all(np.diff(lay.boundaries) > 1e-12)
    assert lay.boundaries[0] == 0.0 and lay.boundaries[-1] == lay.tube_ends[0]


def test_point_properties_match_layout(robot, rng):
    taus = SNAP_FREE.sample(200, rng)
    for tau in taus:
        lay = segment_layout(robot, Actuation.from_vector(tau))
        s = rng.uniform(0, lay.length, 20)
        ei, gj, kap, pres = point_properties(robot, s, np.repeat(tau[None], 20, 0))
        k = lay.segment_index(s)
        np.testing.assert_array_equal(ei, lay.bending_stiffness[k])
        np.testing.assert_array_equal(kap, lay.precurvature[k])
        np.testing.assert_array_equal(pres, lay.present[k])


def _group_rel_error(got, ref):
    """Worst error relative to the magnitude of each state group.

    Each group has a floor well below its typical size (torsion rates are
    O(kappa^2) ~ 10^2 1/m^2) so round-off at exact zeros is not counted as a
    relative error.
    """
    worst = 0.0
    floors = [(slice(0, 2), 1e-6), (UZ, 1.0), (THETA, 1e-3), (slice(8, 11), 1e-3), (H, 1e-3)]
    for sl, floor in floors:
        scale = max(np.abs(ref[sl]).max(), floor)
        worst = max(worst, float(np.abs(got[sl] - ref[sl]).max() / scale))
    return worst


def _random_state(rng, moment_scale=2e-3):
    y = np.zeros(15)
    y[0:2] = rng.normal(scale=moment_scale, size=2)
    y[UZ] = rng.normal(scale=10.0, size=3)
    y[THETA] = rng.uniform(-np.pi, np.pi, 3)
    y[THETA.start] = 0.0
    y[8:11] = rng.normal(scale=0.05, size=3)
    h = rng.normal(size=4)
    y[H] = h / np.linalg.norm(h)
    return y


def test_rhs_matches_brute_force_on_1000_states(robot, rng):
    ei0, gj0, k0 = robot.bending_stiffness, robot.torsional_stiffness, robot.curvatures
    worst = 0.0
    for _ in range(1000):
        y = _random_state(rng)
        present = np.array([True, rng.random() < 0.7, rng.random() < 0.5])
        present[1] |= present[2]
        curved = rng.random(3) < 0.6
        ei = np.where(present, ei0, 0.0)
        gj = np.where(present, gj0, 0.0)
        kap = np.where(present & curved, k0, 0.0)
        # bending moments of the size the present tubes can carry (curvature ~ 20 1/m)
        y[0:2] = rng.normal(scale=20.0 * ei.sum(), size=2)
        ref = brute_force_rhs(y, ei, gj, kap, present)
        got = rhs_from_properties(y, ei, gj, kap, present)
        kern = np.empty(15)
        _rhs(y, ei, gj, kap, present, kern)
        worst = max(worst, _group_rel_error(got, ref))
        assert _group_rel_error(kern, got) < 1e-13
    assert worst < 1e-10, worst


def test_rhs_fully_overlapped_matches_oracle(robot, rng):
    lay = segment_layout(robot, Actuation.from_vector([0, 0, 0, 0, 0, 0]))
    k = int(lay.segment_index(0.03))  # all three tubes present, tubes 2 and 3 curved
    for _ in range(50):
        y = _random_state(rng)
        ref = brute_force_rhs(y, lay.bending_stiffness[k], lay.torsional_stiffness[k],
                              lay.precurvature[k], lay.present[k])
        assert _group_rel_error(ode_rhs(0.03, y, lay), ref) < 1e-12


def test_straight_unloaded_rod(robot):
    lay = segment_layout(robot, Actuation.from_vector([0] * 6))
    y = np.zeros(15)
    y[H] = [1, 0, 0, 0]
    d = ode_rhs(0.005, y, lay)  # first 10 mm: everything straight
    expected = np.zeros(15)
    expected[10] = 1.0
    np.testing.assert_array_equal(d, expected)


def test_planar_state_has_no_torsion_growth(robot):
    lay = segment_layout(robot, Actuation.from_vector([0] * 6))
    y = np.zeros(15)
    y[H] = quat_z(0.3)
    for s in (0.03, 0.09, 0.15, 0.2):
        d = ode_rhs(s, y, lay)
        np.testing.assert_array_equal(d[UZ], 0.0)


def test_composite_curvature_examples(robot):
    ei, gj, kap = robot.bending_stiffness, robot.torsional_stiffness, robot.curvatures
    y = np.zeros(15)
    ux, uy = composite_curvature_xy(y, ei, gj, np.zeros(3))
    assert (ux, uy) == (0.0, 0.0)
    ux, uy = composite_curvature_xy(y, ei, gj, kap)
    assert ux == pytest.approx(np.dot(ei, kap) / ei.sum(), rel=1e-14)
    assert uy == pytest.approx(0.0, abs=1e-15)
    y[THETA] = [0.0, np.pi, 0.0]
    ux2, _ = composite_curvature_xy(y, ei, gj, kap)
    expected = (ei[0] * kap[0] - ei[1] * kap[1] + ei[2] * kap[2]) / ei.sum()
    assert ux2 == pytest.approx(expected, rel=1e-12)


def test_frozen_tubes_past_their_ends(robot, rng):
    lay = segment_layout(robot, Actuation.from_vector([-0.02, -0.01, -0.005, 0.4, -1.0, 2.0]))
    for s in np.linspace(lay.tube_ends[1] + 1e-4, lay.tube_ends[0], 7):
        d = ode_rhs(s, _random_state(rng), lay)
        assert d[UZ.start + 1] == 0.0 and d[UZ.start + 2] == 0.0
        assert d[THETA.start + 1] == 0.0 and d[THETA.start + 2] == 0.0


def test_rhs_rejects_arc_length_outside(robot):
    lay = segment_layout(robot, Actuation.from_vector([0] * 6))
    with pytest.raises(DomainError):
        ode_rhs(-1e-3, np.zeros(15), lay)
    with pytest.raises(DomainError):
        ode_rhs(0.2101, np.zeros(15), lay)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1),
       st.lists(st.floats(-30, 30), min_size=3, max_size=3))
def test_quaternion_rate_preserves_norm(h, u):
    h = np.array(h) / np.linalg.norm(h)
    y = np.zeros(15)
    y[H] = h
    y[UZ.start] = u[2]
    ei = np.array([1.0, 0.0, 0.0])
    kap = np.array([u[0], 0.0, 0.0])  # u1x = kappa when m = 0 and theta = 0
    d = rhs_from_properties(y, ei, ei, kap, np.array([True, False, False]))
    assert abs(np.dot(h, d[H])) < 1e-12


def test_moment_z(robot):
    lay = segment_layout(robot, Actuation.from_vector([0] * 6))
    y = np.zeros(15)
    y[UZ] = [1.0, 2.0, 3.0]
    assert moment_z(y, lay, 0.05) == pytest.approx(np.dot(robot.torsional_stiffness, [1, 2, 3]))
    assert moment_z(y, lay, 0.2) == pytest.approx(robot.torsional_stiffness[0])


def test_quaternion_helpers(rng):
    from scipy.spatial.transform import Rotation
    q = rng.normal(size=(20, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ref = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
    np.testing.assert_allclose(quat_to_matrix(q), ref, atol=1e-14)
    np.testing.assert_allclose(quat_distance(q, -q), 0.0, atol=1e-7)
    np.testing.assert_allclose(quat_distance(quat_z(0.0), quat_z(0.4)), 0.4, rtol=1e-12)
    np.testing.assert_allclose(quat_distance(q, 3.0 * q), 0.0, atol=1e-7)
