
import numpy as np
import pytest

from ctrpinn import RESTRICTED, SNAP_FREE
from ctrpinn.bvp import solve
from ctrpinn.data import (
    ColumnMap,
    IngestError,
    default_threads,
    from_records,
    generate_synthetic,
    ingest_experimental,
    load_observations,
    outlier_screen,
    records,
    save_observations,
    solve_many,
    split_rows,
)
from ctrpinn.pinn import ObservationSet


@pytest.fixture(scope="module")
def synthetic(robot):
    return generate_synthetic(12, np.random.default_rng(5), robot, RESTRICTED)


def test_three_records_per_actuation(synthetic, robot):
    assert len(synthetic) == 36
    assert synthetic.source == "synthetic"
    for k in (1, 2, 3):
        m = synthetic.tube == k
        np.testing.assert_allclose(synthetic.s[m], robot.lengths[k - 1] + synthetic.tau[m, k - 1])
    assert RESTRICTED.contains_batch(synthetic.tau).all()
    assert np.all(np.linalg.norm(synthetic.p, axis=1) <= robot.lengths[0])


def test_records_reproduce_under_independent_solve(synthetic, robot):
    for r in records(synthetic):
        sol = solve(robot, r.act)
        p = sol.states[sol.boundary_index(r.s), 8:11]
        assert np.linalg.norm(p - r.p) < 1e-8


def test_generation_is_deterministic(robot, tmp_path):
    a = generate_synthetic(4, np.random.default_rng(1), robot)
    b = generate_synthetic(4, np.random.default_rng(1), robot, threads=2)
    save_observations(a, tmp_path / "a.tsv", robot, seed=1)
    save_observations(b, tmp_path / "b.tsv", robot, seed=1)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_dataset_roundtrip_and_header(synthetic, robot, tmp_path):
    path = tmp_path / "obs.tsv"
    save_observations(synthetic, path, robot, seed=5)
    back, meta = load_observations(path)
    assert meta["robot_hash"] == robot.digest() and meta["seed"] == 5
    assert meta["units"]["p"] == "m"
    for f in ("s", "tau", "p", "tube"):
        np.testing.assert_array_equal(getattr(back, f), getattr(synthetic, f))
    assert from_records(records(back)).tau.tolist() == back.tau.tolist()


def test_load_rejects_foreign_files(tmp_path):
    (tmp_path / "x.tsv").write_text("a\tb\n1\t2\n")
    with pytest.raises(ValueError, match="header"):
        load_observations(tmp_path / "x.tsv")


def test_generation_aborts_when_solver_fails(robot):
    from ctrpinn.bvp import SolveOptions
    from ctrpinn.data import GenerationError
    with pytest.raises(GenerationError):
        generate_synthetic(5, np.random.default_rng(0), robot, opts=SolveOptions(max_iter=1))


def test_solve_many_threads_match_serial(robot, rng):
    taus = SNAP_FREE.sample(6, rng)
    a = solve_many(robot, taus, threads=1)
    b = solve_many(robot, taus, threads=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.states, y.states)


def test_default_threads(monkeypatch):
    monkeypatch.setenv("CTRPINN_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.delenv("CTRPINN_THREADS")
    assert default_threads() == 1


# ---------------------------------------------------------------- ingestion

def _mapping(**kw):
    cols = {f"beta{i}": {"column": f"b{i}_mm", "unit": "mm"} for i in (1, 2, 3)}
    cols.update({f"alpha{i}": {"column": f"a{i}_deg", "unit": "deg"} for i in (1, 2, 3)})
    for k in (1, 2, 3):
        cols.update({f"tip{k}_{a}": {"column": f"t{k}{a}", "unit": "mm"} for a in "xyz"})
    return ColumnMap(cols, **kw)


def _write_csv(path, oset_by_act, extra_rows=()):
    head = ["b1_mm", "b2_mm", "b3_mm", "a1_deg", "a2_deg", "a3_deg"]
    head += [f"t{k}{a}" for k in (1, 2, 3) for a in "xyz"]
    lines = ["# measured tips", ",".join(head)]
    for tau, tips in oset_by_act:
        vals = list(np.asarray(tau[:3]) * 1e3) + list(np.degrees(tau[3:]))
        vals += list((np.asarray(tips) * 1e3).ravel())
        lines.append(",".join(repr(float(v)) for v in vals))
    lines += list(extra_rows)
    path.write_text("\n".join(lines) + "\n")


def _by_actuation(oset):
    keys = np.unique(oset.tau, axis=0)
    out = []
    for key in keys:
        m = np.all(oset.tau == key, axis=1)
        tips = [oset.p[m & (oset.tube == k)][0] for k in (1, 2, 3)]
        out.append((key, tips))
    return out


def test_ingest_units_and_roundtrip(synthetic, robot, tmp_path):
    src = tmp_path / "exp.csv"
    _write_csv(src, _by_actuation(synthetic))
    res = ingest_experimental(src, _mapping(), robot, RESTRICTED)
    assert res.kept_rows == 12 and not res.rejected and not res.malformed
    got = res.observations
    order_a = np.lexsort(np.column_stack([got.tube, got.tau]).T)
    order_b = np.lexsort(np.column_stack([synthetic.tube, synthetic.tau]).T)
    np.testing.assert_allclose(got.p[order_a], synthetic.p[order_b], atol=1e-15)
    np.testing.assert_allclose(got.tau[order_a], synthetic.tau[order_b], atol=1e-15)
    assert got.source == "experimental"
    # serialize and read back: identical records
    save_observations(got, tmp_path / "e.tsv", robot)
    back, _ = load_observations(tmp_path / "e.tsv")
    assert records(back) == records(got)


def test_ingest_rejects_and_collects(synthetic, robot, tmp_path):
    src = tmp_path / "exp.csv"
    rows = _by_actuation(synthetic)
    bad = rows[0][0].copy()
    bad[1] = bad[2] + 0.001  # beta2 > beta3
    wide = rows[1][0].copy()
    wide[3] = 1.5  # outside the restricted rotation range
    _write_csv(src, rows + [(bad, rows[0][1]), (wide, rows[1][1])], extra_rows=["1,2,oops"])
    res = ingest_experimental(src, _mapping(), robot, RESTRICTED)
    assert res.kept_rows == 12
    reasons = [why for _, why in res.rejected]
    assert any("beta2 <= beta3" in r for r in reasons)
    assert any("|alpha1|" in r for r in reasons)
    assert len(res.malformed) == 1 and res.malformed[0][0] == 17
    report = tmp_path / "rep.tsv"
    res.write_report(report)
    assert "malformed" in report.read_text()


def test_ingest_aborts_on_many_malformed(synthetic, robot, tmp_path):
    src = tmp_path / "exp.csv"
    _write_csv(src, _by_actuation(synthetic)[:5], extra_rows=["x"] * 2)
    with pytest.raises(IngestError) as exc:
        ingest_experimental(src, _mapping(), robot)
    assert len(exc.value.report) == 2


def test_ingest_subsample_and_transform(synthetic, robot, tmp_path):
    src = tmp_path / "exp.csv"
    _write_csv(src, _by_actuation(synthetic))
    a = ingest_experimental(src, _mapping(), robot, sample_size=5, rng=np.random.default_rng(2))
    b = ingest_experimental(src, _mapping(), robot, sample_size=5, rng=np.random.default_rng(2))
    assert len(a.observations) == 15
    assert records(a.observations) == records(b.observations)
    shifted = ingest_experimental(src, _mapping(translation=(0.0, 0.0, 0.01),
                                                rotation_vector=(0.0, 0.0, np.pi / 2)), robot)
    base = ingest_experimental(src, _mapping(), robot)
    p, q = base.observations.p, shifted.observations.p
    np.testing.assert_allclose(q, np.column_stack([-p[:, 1], p[:, 0], p[:, 2] + 0.01]), atol=1e-15)


def test_column_map_validation_and_io(tmp_path):
    m = _mapping()
    m.dump(tmp_path / "map.json")
    assert ColumnMap.load(tmp_path / "map.json") == m
    cols = dict(m.columns)
    del cols["alpha2"]
    with pytest.raises(IngestError, match="alpha2"):
        ColumnMap(cols).validate()
    cols = dict(m.columns)
    cols["beta1"] = {"column": "b1_mm", "unit": "furlong"}
    with pytest.raises(IngestError, match="unit"):
        ColumnMap(cols).validate()


def test_split_keeps_actuations_together(synthetic):
    a, b = split_rows(synthetic, 5, np.random.default_rng(0))
    assert len(a) == 15 and len(b) == 21
    ka = {tuple(t) for t in a.tau}
    assert not ka & {tuple(t) for t in b.tau}


# ---------------------------------------------------------------- screening

def test_screen_synthetic_flags_nothing(synthetic, robot):
    res = outlier_screen(synthetic, robot, k=10)
    assert len(res.flagged) == 0 and len(res.clean) == len(synthetic)


def test_screen_flags_constructed_outlier(synthetic, robot):
    noisy = ObservationSet(synthetic.s, synthetic.tau,
                           synthetic.p + np.random.default_rng(0).normal(scale=2e-4, size=synthetic.p.shape),
                           synthetic.tube)
    p = noisy.p.copy()
    p[7, 0] += 0.050
    res = outlier_screen(ObservationSet(noisy.s, noisy.tau, p, noisy.tube), robot, k=10)
    assert len(res.flagged) == 1 and res.flagged.p[0, 0] == p[7, 0]
    counts = [len(outlier_screen(ObservationSet(noisy.s, noisy.tau, p, noisy.tube), robot, k=k).flagged)
              for k in (1, 2, 5, 10, 100)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
