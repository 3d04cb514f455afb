import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrope import data as D
from diffrope import losses as L
from diffrope import rope as rp
from diffrope import solvers as S
from conftest import hanging_template

vec3 = st.lists(st.floats(-2, 2), min_size=3, max_size=3).map(np.array)


def test_plane_for_x_axis_endpoints():
    pl = D.fit_projection_plane([[0, 0, 0], [1, 0, 0]], [0, 0, -1])
    assert np.allclose(np.abs(pl.normal), [0, 1, 0])
    assert np.allclose(pl.u, [1, 0, 0]) and np.allclose(pl.v, [0, 0, 1])


def test_plane_degenerate_chord():
    with pytest.raises(D.DataError):
        D.fit_projection_plane([[0, 0, 0], [0, 0, 1]], [0, 0, -9.81])


@settings(max_examples=100, deadline=None)
@given(vec3, vec3, vec3)
def test_plane_contains_endpoints_and_gravity(a, b, g):
    chord = b - a
    if np.linalg.norm(np.cross(chord, g)) < 1e-3 or np.linalg.norm(chord) < 1e-3:
        return
    pl = D.fit_projection_plane([a, b], g)
    assert abs((b - pl.origin) @ pl.normal) <= 1e-12
    assert abs((a - pl.origin) @ pl.normal) <= 1e-12
    assert abs(pl.normal @ g) <= 1e-12 * max(1.0, np.linalg.norm(g))
    basis = np.stack([pl.u, pl.v, pl.normal])
    assert np.allclose(basis @ basis.T, np.eye(3), atol=1e-12)


def test_projection_examples():
    pl = D.fit_projection_plane([[0, 0, 0], [1, 0, 0]], [0, 0, -1])
    on = np.array([[0.3, 0.0, -0.2]])
    assert np.array_equal(D.project_points(on, pl), on)
    off = on + 0.03 * pl.normal
    assert np.allclose(D.project_points(off, pl), on, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_projection_idempotent(seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(2, 3))
    pl = D.fit_projection_plane(e, [0, 0, -1])
    p = rng.normal(size=(20, 3))
    once = D.project_points(p, pl)
    assert np.allclose(D.project_points(once, pl), once, atol=1e-12)
    assert np.abs((once - pl.origin) @ pl.normal).max() <= 1e-12
    assert np.all(np.abs((once - pl.origin) @ pl.normal) <= np.abs((p - pl.origin) @ pl.normal) + 1e-15)


def test_uniform_points_one_per_group():
    K = 6
    pts = np.linspace([0, 0, 0], [1, 0, 0], K)[::-1]
    ordered, labels, bnd, order = D.order_and_segment(pts, [[0, 0, 0], [1, 0, 0]], K - 1)
    assert np.array_equal(ordered, pts[::-1])
    assert np.array_equal(bnd, ordered)
    # the end point closes the last group
    assert labels.tolist() == [0, 1, 2, 3, 4, 4]
    assert np.array_equal(order, np.arange(K)[::-1])


def test_segment_extents_equal_within_spacing(rng):
    n, groups = 100, 19
    s = np.sort(rng.uniform(0, 1, n))
    s[0], s[-1] = 0, 1
    pts = np.column_stack([s, 0.01 * rng.normal(size=n), np.zeros(n)])
    ordered, labels, bnd, _ = D.order_and_segment(pts, [[0, 0, 0], [1, 0, 0]], groups)
    # partition, contiguous, every group within its cut
    assert len(labels) == n and np.all(np.diff(labels) >= 0)
    edges = np.arange(groups + 1) / groups
    for i in range(groups):
        si = ordered[labels == i, 0]
        assert np.all(si >= edges[i] - 1e-12) and np.all(si <= edges[i + 1] + 1e-12)
    spacing = np.diff(ordered[:, 0]).max()
    assert np.all(np.abs(bnd[:, 0] - edges) <= spacing)
    assert np.array_equal(bnd[0], ordered[0]) and np.array_equal(bnd[-1], ordered[-1])


def test_duplicate_projections_keep_index_order():
    pts = np.array([[0.5, 0.1, 0], [0.5, -0.1, 0], [0.0, 0, 0], [1.0, 0, 0]])
    _, _, _, order = D.order_and_segment(pts, [[0, 0, 0], [1, 0, 0]], 2)
    assert order.tolist() == [2, 0, 1, 3]


def test_too_few_points():
    with pytest.raises(D.DataError):
        D.order_and_segment(np.zeros((3, 3)), [[0, 0, 0], [1, 0, 0]], 3)


def test_lowest_point(rng):
    p = np.array([[0.2, 0.0, 0.3]])
    assert np.array_equal(D.extract_lowest(p, [0, 0, -1]), p[0])
    stack = np.array([[0, 0, 0.0], [0, 0, -0.1]])
    assert np.array_equal(D.extract_lowest(stack, [0, 0, -9.81]), stack[1])
    cloud = rng.normal(size=(200, 3))
    g = np.array([0.1, -0.2, -1.0])
    best = max(range(200), key=lambda i: (cloud[i] @ g, -i))
    assert np.array_equal(D.extract_lowest(cloud, g), cloud[best])
    with pytest.raises(D.DataError):
        D.extract_lowest(np.zeros((0, 3)), g)


def test_outlier_removal(rng):
    line = np.column_stack([np.linspace(0, 1, 100), np.zeros(100), np.zeros(100)])
    line += rng.normal(scale=1e-3, size=line.shape)
    cloud = np.vstack([line, [[0.5, 0.5, 0.5]]])
    keep = D.remove_outliers(cloud)
    assert not keep[-1] and keep[:100].mean() > 0.9


def test_exclusion_mask_and_preprocess():
    x = hanging_template().positions
    pts = D.sample_polyline(np.column_stack([np.linspace(0, 0.7, 20), np.zeros(20), -0.1 * np.sin(np.linspace(0, np.pi, 20))]), 60)
    raw = D.RawFrame(points3d=np.vstack([pts, [[5, 5, 5]]]), endpoints=[x[0], x[-1]], exclude=[60])
    obs = D.preprocess_frame(raw, K=20)
    assert obs.n_points == 60
    assert len(obs.boundaries3d) == 20 and obs.labels3d.max() == 18
    assert np.allclose(obs.lowest3d[2], pts[:, 2].min())
    assert obs.points2d.shape == (60, 2)
    with pytest.raises(D.DataError):
        D.preprocess_frame(D.RawFrame(points3d=pts, endpoints=[x[0], x[-1]], exclude=[99]), K=20)


def test_json_and_csv_round_trip(tmp_path, rng):
    pts = rng.normal(size=(5, 3))
    raw = D.RawFrame(points3d=pts, endpoints=[[0, 0, 0], [1, 0, 0]], frame_id="f1", camera=np.arange(12.0), centerline2d=rng.normal(size=(4, 2)))
    raw.save(tmp_path / "f.json")
    back = D.RawFrame.load(tmp_path / "f.json")
    assert back.frame_id == "f1" and np.array_equal(back.points3d, pts)
    assert np.array_equal(back.camera, np.arange(12.0).reshape(3, 4))

    (tmp_path / "p.csv").write_text("x,y,z\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in pts) + "\n")
    rec = {"frame_id": 2, "points3d": "p.csv", "endpoints": [[0, 0, 0], [1, 0, 0]], "gravity": [0, 0, -1]}
    (tmp_path / "g.json").write_text(json.dumps(rec))
    assert np.array_equal(D.RawFrame.load(tmp_path / "g.json").points3d, pts)


def test_bad_frames():
    with pytest.raises(D.DataError):
        D.RawFrame(points3d=[[0, 0, 0]], endpoints=[[0, 0, 0], [1, 0, 0]])
    with pytest.raises(D.DataError):
        D.RawFrame(points3d=np.zeros((3, 3)), endpoints=[[0, 0, 0], [0, 0, 0]])
    with pytest.raises(D.DataError):
        D.RawFrame.from_dict({"points3d": np.zeros((3, 3)).tolist()})


def test_synthetic_noise_free_points_on_polyline():
    tmpl = hanging_template(K=10)
    p = S.SolverParams(eta_x_G=0.024, iterations=30)
    frames = D.generate_synthetic_frames(p, tmpl, [[0.0, 0.0, 0.0], [0.05, 0.05, 0.0]], noise=0.0, samples=40)
    for f in frames:
        d = L.point_segment_distances(f.points3d, f.truth[:-1], f.truth[1:]).min(axis=1)
        assert d.max() <= 1e-12
        assert np.array_equal(f.endpoints, f.truth[[0, -1]])
    assert np.allclose(frames[1].control, [0.05, 0.05, 0.0])


def test_synthetic_noise_is_seeded():
    tmpl = hanging_template(K=6)
    p = S.SolverParams(iterations=10)
    a = D.generate_synthetic_frames(p, tmpl, [[0, 0, 0]], noise=0.002, seed=3)
    b = D.generate_synthetic_frames(p, tmpl, [[0, 0, 0]], noise=0.002, seed=3)
    assert np.array_equal(a[0].points3d, b[0].points3d)
    resid = a[0].points3d - D.sample_polyline(a[0].truth, 100)
    assert 0.001 < resid.std() < 0.003
