"""Shape-matching losses between observed rope points and a simulated polyline.

Four primary terms are available, and OBJ1..OBJ9 combine them with unit weights:

========  =====================  ========  =====================
OBJ1      point-to-line (3D)     OBJ6      segment-to-particle (2D) + lowest
OBJ2      point-to-line (2D)     OBJ7      segment-to-line (3D)
OBJ3      OBJ2 + lowest point    OBJ8      segment-to-line (2D)
OBJ4      segment-to-particle    OBJ9      OBJ8 + lowest point
OBJ5      segment-to-particle
          (2D)
========  =====================  ========  =====================

Distances are to closed line segments (projection parameter clamped to
``[0, 1]``) and are summed, not averaged.  Nearest-segment and lowest-vertex
choices are made on values and frozen, so gradients flow through the
selected branch only; ties go to the lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

SPACE_3D = "3D"
SPACE_2D = "2D"

# gradient of a point distance is clipped below this radius (m or plane units)
DISTANCE_GRAD_FLOOR = 1e-7


class ObjectiveError(ValueError):
    pass


# sim-to-observation mappings -------------------------------------------------------


@dataclass(frozen=True)
class PlaneProjection:
    """Orthographic map onto plane coordinates ``((x - o).u, (x - o).v)``."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def project(self, x):
        rel = x - self.origin
        return ad.stack([ad.dot(rel, self.u), ad.dot(rel, self.v)], axis=-1)

    def to_dict(self) -> dict:
        return {"kind": "plane", "origin": list(map(float, self.origin)), "u": list(map(float, self.u)), "v": list(map(float, self.v))}


@dataclass(frozen=True)
class CameraProjection:
    """Pinhole map with a 3x4 matrix ``P``: ``(u, v) = (P x~)[:2] / (P x~)[2]``."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float).reshape(3, 4)
        object.__setattr__(self, "matrix", m)

    def project(self, x):
        h = ad.matmul(x, self.matrix[:, :3].T) + self.matrix[:, 3]
        return h[..., :2] / h[..., 2:3]

    def to_dict(self) -> dict:
        return {"kind": "camera", "matrix": self.matrix.ravel().tolist()}


def projection_from_dict(d: Mapping):
    if d["kind"] == "plane":
        return PlaneProjection(np.asarray(d["origin"], float), np.asarray(d["u"], float), np.asarray(d["v"], float))
    if d["kind"] == "camera":
        return CameraProjection(np.asarray(d["matrix"], float))
    raise ValueError(f"unknown projection kind {d['kind']!r}")


# observations -----------------------------------------------------------------------


@dataclass
class ObservationFrame:
    """One preprocessed frame.

    ``labels3d[j]`` is the segment group of ``points3d[j]``: group ``i``
    corresponds to the simulated segment between particles ``i`` and ``i+1``.
    ``boundaries3d[i]`` pairs with particle ``i``.  The 2D fields mirror the
    3D ones in the observation plane/image given by ``projection``.
    """

    points3d: np.ndarray
    labels3d: np.ndarray | None = None
    boundaries3d: np.ndarray | None = None
    points2d: np.ndarray | None = None
    labels2d: np.ndarray | None = None
    boundaries2d: np.ndarray | None = None
    lowest3d: np.ndarray | None = None
    projection: PlaneProjection | CameraProjection | None = None
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    endpoints: np.ndarray | None = None
    control: np.ndarray | None = None
    regime: str | None = None
    frame_id: str | int | None = None

    @property
    def n_points(self) -> int:
        return len(self.points3d)


def _space(frame: ObservationFrame, x, space: str):
    """Observed points, labels, boundaries and the model polyline in ``space``."""
    if space == SPACE_3D:
        return frame.points3d, frame.labels3d, frame.boundaries3d, x
    if space == SPACE_2D:
        if frame.points2d is None or frame.projection is None:
            raise ObjectiveError("frame carries no 2D observation or projection")
        return frame.points2d, frame.labels2d, frame.boundaries2d, frame.projection.project(x)
    raise ValueError(f"space must be '3D' or '2D', got {space!r}")


def _segment_param(p, a, b):
    ab = b - a
    den = np.sum(ab * ab, axis=-1)
    t = np.sum((p - a) * ab, axis=-1) / np.where(den > 0, den, 1.0)
    return np.clip(np.where(den > 0, t, 0.0), 0.0, 1.0)


def point_segment_distances(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from points ``p`` (N, d) to every segment ``a[k]b[k]``; shape (N, M)."""
    p = p[:, None, :]
    t = _segment_param(p, a[None], b[None])
    c = a[None] + t[..., None] * (b - a)[None]
    return np.linalg.norm(p - c, axis=-1)


def _dist_to_segments(p: np.ndarray, a, b):
    """Differentiable distances of ``p[j]`` to its own segment ``a[j]b[j]``."""
    ab = b - a
    den = ad.dot(ab, ab)
    denv = np.asarray(ad.value(den))
    ok = denv > 0
    t = ad.dot(p - a, ab) / ad.where(ok, den, 1.0)
    t = ad.clip(ad.where(ok, t, 0.0), 0.0, 1.0)
    c = a + t[:, None] * ab
    return ad.norm(p - c, grad_floor=DISTANCE_GRAD_FLOOR)


def nearest_segments(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Index of the closest polyline segment for each point (ties -> lowest index)."""
    d = point_segment_distances(points, x[:-1], x[1:])
    return np.argmin(d, axis=1)


def _check_model(x) -> None:
    if np.shape(x)[0] < 2:
        raise ObjectiveError("model polyline needs at least two particles")


def point_to_line_loss(frame: ObservationFrame, x, space: str = SPACE_3D):
    _check_model(x)
    pts, _, _, X = _space(frame, x, space)
    if pts is None or len(pts) == 0:
        raise ObjectiveError("frame has no points")
    k = nearest_segments(pts, np.asarray(ad.value(X)))
    return ad.sum(_dist_to_segments(pts, X[k], X[k + 1]))


def segment_to_particle_loss(frame: ObservationFrame, x, space: str = SPACE_3D):
    _check_model(x)
    _, _, bnd, X = _space(frame, x, space)
    if bnd is None:
        raise ObjectiveError("frame carries no segment boundaries")
    if len(bnd) != np.shape(X)[0]:
        raise ObjectiveError(f"{len(bnd)} segment boundaries for {np.shape(X)[0]} particles")
    return ad.sum(ad.norm(bnd - X, grad_floor=DISTANCE_GRAD_FLOOR))


def segment_to_line_loss(frame: ObservationFrame, x, space: str = SPACE_3D):
    _check_model(x)
    pts, labels, _, X = _space(frame, x, space)
    if labels is None:
        raise ObjectiveError("frame carries no segment groups")
    n_seg = np.shape(X)[0] - 1
    labels = np.asarray(labels, dtype=int)
    if len(labels) and (labels.max() >= n_seg or labels.min() < 0) or len(np.unique(labels)) > n_seg:
        raise ObjectiveError(f"segment groups do not match the {n_seg} model segments")
    if len(pts) == 0:
        raise ObjectiveError("frame has no points")
    return ad.sum(_dist_to_segments(pts, X[labels], X[labels + 1]))


def lowest_vertex(x: np.ndarray, gravity) -> int:
    g = np.asarray(gravity, dtype=float)
    return int(np.argmax(np.asarray(x) @ (g / np.linalg.norm(g))))


def lowest_point_loss(frame: ObservationFrame, x):
    """Distance between the observed lowest point and the lowest model point along gravity.

    A polyline attains its extreme along any direction at a vertex, so the
    lowest model point is the lowest particle.
    """
    _check_model(x)
    if frame.lowest3d is None:
        raise ObjectiveError("frame carries no lowest point")
    k = lowest_vertex(ad.value(x), frame.gravity)
    return ad.norm(frame.lowest3d - x[k], grad_floor=DISTANCE_GRAD_FLOOR)


# objectives -------------------------------------------------------------------------

TERMS = {
    "PL": point_to_line_loss,
    "SP": segment_to_particle_loss,
    "SL": segment_to_line_loss,
}

OBJECTIVES: dict[str, tuple[tuple[str, str | None], ...]] = {
    "OBJ1": (("PL", SPACE_3D),),
    "OBJ2": (("PL", SPACE_2D),),
    "OBJ3": (("PL", SPACE_2D), ("LO", None)),
    "OBJ4": (("SP", SPACE_3D),),
    "OBJ5": (("SP", SPACE_2D),),
    "OBJ6": (("SP", SPACE_2D), ("LO", None)),
    "OBJ7": (("SL", SPACE_3D),),
    "OBJ8": (("SL", SPACE_2D),),
    "OBJ9": (("SL", SPACE_2D), ("LO", None)),
}


@dataclass(frozen=True)
class Objective:
    """Weighted sum of loss terms, keyed ``"PL3D"``, ``"SP2D"``, ``"LO"`` ..."""

    weights: Mapping[str, float]
    name: str = "custom"

    @classmethod
    def of(cls, kind: "str | Objective") -> "Objective":
        if isinstance(kind, Objective):
            return kind
        key = str(kind).upper()
        if key not in OBJECTIVES:
            raise ObjectiveError(f"unknown objective {kind!r}; expected OBJ1..OBJ9")
        return cls({t + (s or ""): 1.0 for t, s in OBJECTIVES[key]}, key)

    def __call__(self, frame: ObservationFrame, x):
        total = 0.0
        for key, w in self.weights.items():
            if key == "LO":
                term = lowest_point_loss(frame, x)
            else:
                fn = TERMS.get(key[:2])
                if fn is None or key[2:] not in (SPACE_2D, SPACE_3D):
                    raise ObjectiveError(f"unknown loss term {key!r}")
                term = fn(frame, x, key[2:])
            total = total + w * term if w != 1.0 else total + term
        return total


def evaluate_objective(kind, frame: ObservationFrame, x):
    return Objective.of(kind)(frame, x)


def objective_names() -> Sequence[str]:
    return tuple(OBJECTIVES)
