"""Triangle-facet scene geometry: loading, ray queries, visibility, mirroring.

Scenes are immutable after load; every query here is read-only and pure.
Intersection uses a brute-force Moller-Trumbore scan over all facets, which
is adequate at desk scale (tens to a few thousand facets).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

# Self-intersection guard for meter-scale scenes in double precision.
EPS_HIT = 1e-6
# Barycentric slack so edge/vertex grazing rays still report a hit.
_EPS_BARY = 1e-9
_MIN_AREA = 1e-9


class SceneFormatError(ValueError):
    """Raised when a scene file violates the scene JSON schema."""


def vec3(x, y, z) -> np.ndarray:
    return np.array([float(x), float(y), float(z)], dtype=np.float64)


def normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


@dataclass(frozen=True)
class Facet:
    """One counter-clockwise triangle with a unit normal and category label."""

    id: int
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    normal: np.ndarray
    category: int = -1
    patch_area: float = 0.0

    @property
    def centroid(self) -> np.ndarray:
        return (self.v0 + self.v1 + self.v2) / 3.0

    def plane_offset(self) -> float:
        return float(np.dot(self.normal, self.v0))


def make_facet(fid: int, v0, v1, v2, category: int = -1) -> Facet:
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    cross = np.cross(v1 - v0, v2 - v0)
    area = 0.5 * float(np.linalg.norm(cross))
    if area < _MIN_AREA:
        raise SceneFormatError(f"facet {fid} is degenerate (area={area:g} m^2)")
    return Facet(fid, v0, v1, v2, cross / (2.0 * area), category, area)


@dataclass(frozen=True)
class Hit:
    facet_id: int
    point: np.ndarray
    distance: float


@dataclass
class SceneGeometry:
    """Immutable facet soup with cached arrays for vectorized ray queries."""

    facets: list[Facet]
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    category_names: dict[int, str] = field(default_factory=dict)
    truth_materials: dict | None = None

    # Vectorized per-facet arrays, filled in __post_init__.
    _v0: np.ndarray = field(init=False, repr=False)
    _e1: np.ndarray = field(init=False, repr=False)
    _e2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v0 = np.stack([f.v0 for f in self.facets])
        v1 = np.stack([f.v1 for f in self.facets])
        v2 = np.stack([f.v2 for f in self.facets])
        object.__setattr__(self, "_v0", v0)
        object.__setattr__(self, "_e1", v1 - v0)
        object.__setattr__(self, "_e2", v2 - v0)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for f in self.facets:
            h.update(f.v0.tobytes())
            h.update(f.v1.tobytes())
            h.update(f.v2.tobytes())
            h.update(str(f.category).encode())
        return h.hexdigest()


def scene_from_dict(data: dict) -> SceneGeometry:
    try:
        raw_vertices = data["vertices"]
        raw_facets = data["facets"]
    except (KeyError, TypeError) as exc:
        raise SceneFormatError(f"missing scene key: {exc}") from exc
    vertices = [vec3(*v) for v in raw_vertices]
    if not np.isfinite(np.asarray(vertices)).all():
        raise SceneFormatError("non-finite vertex coordinate")
    facets = []
    for i, spec in enumerate(raw_facets):
        idx = spec["v"]
        if len(idx) != 3:
            raise SceneFormatError(f"facet {i} needs exactly 3 vertex indices")
        for j in idx:
            if not 0 <= int(j) < len(vertices):
                raise SceneFormatError(
                    f"facet {i} references vertex {j} of {len(vertices)}"
                )
        facets.append(
            make_facet(
                i,
                vertices[idx[0]],
                vertices[idx[1]],
                vertices[idx[2]],
                int(spec.get("category", -1)),
            )
        )
    if not facets:
        raise SceneFormatError("scene has no facets")
    pts = np.asarray(vertices)
    names = {int(k): str(v) for k, v in data.get("category_names", {}).items()}
    return SceneGeometry(
        facets=facets,
        bounds_min=pts.min(axis=0),
        bounds_max=pts.max(axis=0),
        category_names=names,
        truth_materials=data.get("truth_materials"),
    )


def load_scene(text: str) -> SceneGeometry:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"scene is not valid JSON: {exc}") from exc
    return scene_from_dict(data)


def load_scene_file(path) -> SceneGeometry:
    with open(path, "r", encoding="utf-8") as fh:
        return load_scene(fh.read())


def scene_to_dict(scene: SceneGeometry) -> dict:
    """Serialize back to the scene JSON schema (vertices deduplicated per facet)."""
    vertices: list[list[float]] = []
    index: dict[tuple, int] = {}
    facets = []
    for f in scene.facets:
        tri = []
        for v in (f.v0, f.v1, f.v2):
            key = (float(v[0]), float(v[1]), float(v[2]))
            if key not in index:
                index[key] = len(vertices)
                vertices.append([*key])
            tri.append(index[key])
        facets.append({"v": tri, "category": f.category})
    out = {
        "vertices": vertices,
        "facets": facets,
        "category_names": {str(k): v for k, v in scene.category_names.items()},
    }
    if scene.truth_materials is not None:
        out["truth_materials"] = scene.truth_materials
    return out


def intersect_ray(
    scene: SceneGeometry,
    origin: np.ndarray,
    direction: np.ndarray,
    t_min: float = EPS_HIT,
    t_max: float = math.inf,
) -> Hit | None:
    """Nearest facet hit with distance in (t_min, t_max), or None.

    Facets are intersectable from both sides. Edge/vertex grazing ties are
    broken by lowest facet id so results are reproducible across platforms.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    pvec = np.cross(direction, scene._e2)
    det = np.einsum("ij,ij->i", scene._e1, pvec)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - scene._v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, scene._e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", qvec, scene._e2) * inv
    valid = (
        ok
        & (u >= -_EPS_BARY)
        & (v >= -_EPS_BARY)
        & (u + v <= 1.0 + _EPS_BARY)
        & (t > t_min)
        & (t < t_max)
    )
    if not valid.any():
        return None
    ts = np.where(valid, t, np.inf)
    best = float(ts.min())
    # Lowest facet id among hits that are tied for nearest.
    tied = np.flatnonzero(valid & (ts <= best + 1e-9))
    fid = int(tied[0])
    return Hit(fid, origin + direction * ts[fid], float(ts[fid]))


def is_visible(scene: SceneGeometry, p: np.ndarray, q: np.ndarray) -> bool:
    """True when the open segment p->q is unobstructed (endpoints excluded)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = q - p
    dist = float(np.linalg.norm(d))
    if dist <= 2 * EPS_HIT:
        return True
    return intersect_ray(scene, p, d / dist, EPS_HIT, dist - EPS_HIT) is None


def mirror_point(p: np.ndarray, facet: Facet) -> np.ndarray:
    """Reflection of p across the facet's supporting plane."""
    p = np.asarray(p, dtype=np.float64)
    h = float(np.dot(p - facet.v0, facet.normal))
    return p - 2.0 * h * facet.normal


def point_on_facet(point: np.ndarray, facet: Facet, tol: float = 1e-7) -> bool:
    """Planar containment test for a point already known to be near the plane."""
    if abs(float(np.dot(point - facet.v0, facet.normal))) > 1e-6:
        return False
    e1 = facet.v1 - facet.v0
    e2 = facet.v2 - facet.v0
    w = point - facet.v0
    d11 = float(e1 @ e1)
    d12 = float(e1 @ e2)
    d22 = float(e2 @ e2)
    w1 = float(w @ e1)
    w2 = float(w @ e2)
    den = d11 * d22 - d12 * d12
    u = (d22 * w1 - d12 * w2) / den
    v = (d11 * w2 - d12 * w1) / den
    return u >= -tol and v >= -tol and u + v <= 1.0 + tol


def point_facet_distance(point: np.ndarray, facet: Facet) -> float:
    """Euclidean distance from a point to a triangle (projection + edge clamp)."""
    point = np.asarray(point, dtype=np.float64)
    h = float(np.dot(point - facet.v0, facet.normal))
    proj = point - h * facet.normal
    if point_on_facet(proj, facet, tol=0.0):
        return abs(h)
    best = math.inf
    for a, b in ((facet.v0, facet.v1), (facet.v1, facet.v2), (facet.v2, facet.v0)):
        ab = b - a
        t = float(np.dot(point - a, ab) / (ab @ ab))
        t = min(1.0, max(0.0, t))
        best = min(best, float(np.linalg.norm(point - (a + t * ab))))
    return best


def point_scene_distance(scene: SceneGeometry, point: np.ndarray) -> float:
    return min(point_facet_distance(point, f) for f in scene.facets)
