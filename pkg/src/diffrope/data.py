"""Observation ingestion, preprocessing and synthetic frame generation.

Preprocessing of a frame: drop excluded points, optionally remove outliers,
project the cloud onto the vertical plane through both rope endpoints, order
the points along the endpoint chord and split them into one group per model
segment, and pick the lowest point along gravity.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import rope as rp
from .losses import CameraProjection, ObservationFrame, PlaneProjection
from .solvers import SolverParams, simulate_quasi_static


class DataError(ValueError):
    pass


@dataclass
class RawFrame:
    points3d: np.ndarray
    endpoints: np.ndarray  # (2, 3)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    frame_id: str | int = 0
    timestamp: float | None = None
    centerline2d: np.ndarray | None = None
    camera: np.ndarray | None = None  # (3, 4)
    control: np.ndarray | None = None
    regime: str | None = None
    exclude: Sequence[int] = ()
    # ground-truth particle positions, only set for synthetic frames
    truth: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points3d = np.asarray(self.points3d, dtype=float).reshape(-1, 3)
        self.endpoints = np.asarray(self.endpoints, dtype=float).reshape(2, 3)
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        for name in ("centerline2d", "camera", "control", "truth"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float))
        if self.centerline2d is not None:
            self.centerline2d = self.centerline2d.reshape(-1, 2)
        if self.camera is not None:
            self.camera = self.camera.reshape(3, 4)
        if len(self.points3d) < 2:
            raise DataError("a frame needs at least two raw points")
        if np.allclose(self.endpoints[0], self.endpoints[1]):
            raise DataError("frame endpoints coincide")
        if not np.any(self.gravity):
            raise DataError("gravity vector is zero")

    def to_dict(self) -> dict:
        d = {
            "frame_id": self.frame_id,
            "points3d": self.points3d.tolist(),
            "endpoints": self.endpoints.tolist(),
            "gravity": self.gravity.tolist(),
        }
        optional = {
            "timestamp": self.timestamp,
            "centerline2d": self.centerline2d,
            "camera": None if self.camera is None else self.camera.ravel(),
            "control": self.control,
            "regime": self.regime,
            "exclude": list(self.exclude) or None,
            "truth": self.truth,
        }
        for k, v in optional.items():
            if v is not None:
                d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_dict(cls, d: Mapping, base: Path | None = None) -> "RawFrame":
        d = dict(d)
        try:
            pts = d.pop("points3d")
            if isinstance(pts, str):
                path = Path(pts)
                pts = read_points_csv(path if path.is_absolute() or base is None else base / path)
            return cls(points3d=pts, endpoints=d.pop("endpoints"), **d)
        except KeyError as e:
            raise DataError(f"frame is missing field {e.args[0]!r}") from None
        except TypeError as e:
            raise DataError(f"bad frame record: {e}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "RawFrame":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base=path.parent)


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"x", "y", "z"}:
        raise DataError(f"{path}: expected a CSV with header x,y,z")
    return np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])


# plane ------------------------------------------------------------------------------


@dataclass(frozen=True)
class PlaneSpec:
    origin: np.ndarray
    normal: np.ndarray
    u: np.ndarray  # horizontal chord direction
    v: np.ndarray  # up, against gravity

    def projection(self) -> PlaneProjection:
        return PlaneProjection(self.origin, self.u, self.v)


def fit_projection_plane(endpoints, gravity) -> PlaneSpec:
    """Vertical plane through both endpoints, containing the gravity direction."""
    e = np.asarray(endpoints, dtype=float).reshape(2, 3)
    g = np.asarray(gravity, dtype=float)
    gn = np.linalg.norm(g)
    chord = e[1] - e[0]
    cn = np.linalg.norm(chord)
    if gn == 0 or cn == 0:
        raise DataError("gravity and endpoint chord must be non-zero")
    n = np.cross(chord, g)
    if np.linalg.norm(n) <= 1e-9 * cn * gn:
        raise DataError("endpoint chord is parallel to gravity; projection plane is degenerate")
    n = n / np.linalg.norm(n)
    v = -g / gn
    u = np.cross(v, n)  # lies in the plane, perpendicular to gravity
    if u @ chord < 0:
        u = -u
    return PlaneSpec(e[0].copy(), n, u, v)


def project_points(points, plane: PlaneSpec) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return p - np.outer((p - plane.origin) @ plane.normal, plane.normal)


def plane_coordinates(points, plane: PlaneSpec) -> np.ndarray:
    rel = np.asarray(points, dtype=float) - plane.origin
    return np.stack([rel @ plane.u, rel @ plane.v], axis=-1)


# ordering and segmentation ------------------------------------------------------------


def order_and_segment(points, endpoints, n_groups: int):
    """Sort points along the endpoint chord and cut them into ``n_groups`` groups.

    Groups cover equal extents of the chord between the two endpoint
    projections; points beyond either endpoint join the first/last group.
    Boundary ``i`` (``n_groups + 1`` of them) is the data point whose chord
    parameter is nearest to the i-th cut, so the first and last boundaries are
    the extreme points.  Returns ``(ordered, labels, boundaries, order)``.
    """
    p = np.asarray(points, dtype=float)
    e = np.asarray(endpoints, dtype=float)
    if n_groups < 1:
        raise DataError("need at least one segment group")
    if len(p) < n_groups + 1:
        raise DataError(f"{len(p)} points cannot fill {n_groups} segments")
    chord = e[1] - e[0]
    length = float(np.linalg.norm(chord))
    if length == 0:
        raise DataError("endpoints coincide")
    s = (p - e[0]) @ (chord / length)
    order = np.argsort(s, kind="stable")
    s = s[order]
    ordered = p[order]
    width = length / n_groups
    # points sitting on a cut belong to the group that starts there
    labels = np.clip(np.floor(s * n_groups / length + 1e-9).astype(int), 0, n_groups - 1)
    cuts = np.arange(n_groups + 1) * width
    cuts[0], cuts[-1] = min(cuts[0], s[0]), max(cuts[-1], s[-1])
    nearest = np.argmin(np.abs(s[None, :] - cuts[:, None]), axis=1)
    return ordered, labels, ordered[nearest], order


def extract_lowest(points, gravity) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if len(p) == 0:
        raise DataError("no points to search for the lowest one")
    g = np.asarray(gravity, dtype=float)
    return p[int(np.argmax(p @ g))].copy()


def remove_outliers(points, k: int = 8, n_std: float = 2.0) -> np.ndarray:
    """Boolean keep-mask: drop points whose mean k-NN distance exceeds mean + n_std * std."""
    p = np.asarray(points, dtype=float)
    if len(p) <= k:
        return np.ones(len(p), dtype=bool)
    d, _ = cKDTree(p).query(p, k=k + 1)
    m = d[:, 1:].mean(axis=1)
    return m <= m.mean() + n_std * m.std()


# preprocessing --------------------------------------------------------------------------


def preprocess_frame(raw: RawFrame, K: int, outlier_filter: bool = False) -> ObservationFrame:
    """Turn a raw frame into an observation for a K-particle model (K-1 segments)."""
    keep = np.ones(len(raw.points3d), dtype=bool)
    if len(raw.exclude):
        idx = np.asarray(raw.exclude, dtype=int)
        if idx.min() < 0 or idx.max() >= len(keep):
            raise DataError("exclusion mask index out of range")
        keep[idx] = False
    pts = raw.points3d[keep]
    if outlier_filter:
        pts = pts[remove_outliers(pts)]
    plane = fit_projection_plane(raw.endpoints, raw.gravity)
    p3 = project_points(pts, plane)
    ends3 = project_points(raw.endpoints, plane)
    pts3, lab3, bnd3, _ = order_and_segment(p3, ends3, K - 1)

    if raw.centerline2d is not None:
        projection = CameraProjection(raw.camera) if raw.camera is not None else plane.projection()
        ends2 = np.asarray(projection.project(raw.endpoints))
        c2 = raw.centerline2d
    else:
        projection = plane.projection()
        ends2 = plane_coordinates(ends3, plane)
        c2 = plane_coordinates(pts3, plane)
    ends2_3 = np.column_stack([ends2, np.zeros(2)])
    c2_3 = np.column_stack([c2, np.zeros(len(c2))])
    pts2, lab2, bnd2, _ = order_and_segment(c2_3, ends2_3, K - 1)

    return ObservationFrame(
        points3d=pts3,
        labels3d=lab3,
        boundaries3d=bnd3,
        points2d=pts2[:, :2],
        labels2d=lab2,
        boundaries2d=bnd2[:, :2],
        lowest3d=extract_lowest(pts3, raw.gravity),
        projection=projection,
        gravity=raw.gravity.copy(),
        endpoints=raw.endpoints.copy(),
        control=None if raw.control is None else raw.control.copy(),
        regime=raw.regime,
        frame_id=raw.frame_id,
    )


# synthetic data -------------------------------------------------------------------------


def sample_polyline(x: np.ndarray, n: int) -> np.ndarray:
    """``n`` points spaced uniformly in arc length, both ends included."""
    seg = np.linalg.norm(np.diff(x, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, x[:, k]) for k in range(3)], axis=-1)


def generate_synthetic_frames(
    true_params: SolverParams,
    rope: rp.RopeState,
    trajectory: Sequence,
    noise: float = 0.0,
    samples: int = 100,
    seed: int = 0,
    control_index: int = 0,
    regime: str | None = None,
) -> list[RawFrame]:
    """Equilibrium shapes for each control position, sampled and perturbed.

    The control particle is moved to each trajectory point; every other
    zero-inverse-mass particle stays where ``rope`` has it.
    """
    rng = np.random.default_rng(seed)
    anchors = {int(i): rope.positions[i] for i in np.flatnonzero(rope.inv_mass == 0)}
    g = np.asarray(true_params.gravity, dtype=float)
    frames = []
    for fid, c in enumerate(trajectory):
        anchors[control_index] = np.asarray(c, dtype=float)
        state, _ = simulate_quasi_static(rp.anchored(rope, anchors), true_params, regime, report=False)
        x = np.asarray(state.positions)
        pts = sample_polyline(x, samples)
        if noise > 0:
            pts = pts + rng.normal(scale=noise, size=pts.shape)
        frames.append(
            RawFrame(
                points3d=pts,
                endpoints=x[[0, -1]],
                gravity=g if np.any(g) else np.array([0.0, 0.0, -1.0]),
                frame_id=fid,
                control=x[control_index],
                regime=regime,
                truth=x,
            )
        )
    return frames
