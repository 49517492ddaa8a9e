"""Propagation path enumeration: LOS, image-method speculars, diffuse bounces.

Paths are purely geometric: interaction points, local polarization bases,
angles, and delays. Material-dependent quantities enter later in the channel
computation, so a traced PathSet can be cached and reused for any EM field.

Conventions: theta is the polar angle from +z in [0, pi], phi the azimuth
from +x in (-pi, pi]. Departure angles follow the first segment direction;
arrival angles point from the receiver back toward the last interaction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Facet, SceneGeometry, is_visible, mirror_point, normalize

C_LIGHT = 299_792_458.0


class InteractionKind(str, Enum):
    REFLECTION = "reflection"
    SCATTER = "scatter"


@dataclass(frozen=True)
class Interaction:
    """One surface interaction with its local in/out polarization frames.

    basis_in/basis_out rows are (perpendicular, parallel) unit vectors, both
    orthogonal to the respective segment direction.
    """

    point: np.ndarray
    facet_id: int
    kind: InteractionKind
    incident_dir: np.ndarray
    outgoing_dir: np.ndarray
    cos_theta_i: float
    cos_theta_o: float
    category: int
    patch_area: float
    basis_in: np.ndarray
    basis_out: np.ndarray


@dataclass(frozen=True)
class PropagationPath:
    tx: np.ndarray
    rx: np.ndarray
    interactions: tuple[Interaction, ...]
    segment_lengths: tuple[float, ...]
    d_total: float
    tau: float
    phi_tx: float
    theta_tx: float
    phi_rx: float
    theta_rx: float

    @property
    def order(self) -> int:
        return len(self.interactions)

    @property
    def has_scatter(self) -> bool:
        return any(i.kind is InteractionKind.SCATTER for i in self.interactions)

    def signature(self) -> tuple:
        return tuple((i.kind.value, i.facet_id) for i in self.interactions)

    def points(self) -> list[np.ndarray]:
        return [self.tx, *[i.point for i in self.interactions], self.rx]


@dataclass(frozen=True)
class PathSet:
    tx: np.ndarray
    rx: np.ndarray
    paths: tuple[PropagationPath, ...]

    def __len__(self) -> int:
        return len(self.paths)


@dataclass(frozen=True)
class TraceConfig:
    max_order: int = 2
    enable_scatter: bool = True


def angles_of(direction: np.ndarray) -> tuple[float, float]:
    """(phi, theta) spherical angles of a unit direction."""
    theta = math.acos(min(1.0, max(-1.0, float(direction[2]))))
    phi = math.atan2(float(direction[1]), float(direction[0]))
    return phi, theta


def _oriented_normal(facet: Facet, incident_dir: np.ndarray) -> np.ndarray:
    """Facet normal flipped toward the incoming side (facets reflect both ways)."""
    return facet.normal if float(incident_dir @ facet.normal) < 0 else -facet.normal


def _perp_basis(direction: np.ndarray, facet: Facet, n_eff: np.ndarray) -> np.ndarray:
    """(perpendicular, parallel) frame for a segment meeting a facet."""
    te = np.cross(direction, n_eff)
    norm = float(np.linalg.norm(te))
    if norm < 1e-9:
        # Normal incidence: any perpendicular works; use the facet's first
        # edge so the choice is deterministic.
        edge = facet.v1 - facet.v0
        te = edge - float(edge @ direction) * direction
        te = normalize(te)
    else:
        te = te / norm
    return np.stack([te, np.cross(te, direction)])


def _make_interaction(
    facet: Facet, point, d_in, d_out, kind: InteractionKind
) -> Interaction:
    n_eff = _oriented_normal(facet, d_in)
    cos_i = -float(d_in @ n_eff)
    cos_o = float(d_out @ n_eff)
    return Interaction(
        point=np.asarray(point, dtype=np.float64),
        facet_id=facet.id,
        kind=kind,
        incident_dir=d_in,
        outgoing_dir=d_out,
        cos_theta_i=cos_i,
        cos_theta_o=cos_o,
        category=facet.category,
        patch_area=facet.patch_area,
        basis_in=_perp_basis(d_in, facet, n_eff),
        basis_out=_perp_basis(d_out, facet, n_eff),
    )


def _build_path(tx, rx, interactions: list[Interaction]) -> PropagationPath:
    pts = [tx, *[i.point for i in interactions], rx]
    seg = tuple(
        float(np.linalg.norm(pts[i + 1] - pts[i])) for i in range(len(pts) - 1)
    )
    d_total = float(sum(seg))
    dep = normalize(pts[1] - pts[0])
    arr = normalize(pts[-2] - pts[-1])
    phi_tx, theta_tx = angles_of(dep)
    phi_rx, theta_rx = angles_of(arr)
    return PropagationPath(
        tx=np.asarray(tx, dtype=np.float64),
        rx=np.asarray(rx, dtype=np.float64),
        interactions=tuple(interactions),
        segment_lengths=seg,
        d_total=d_total,
        tau=d_total / C_LIGHT,
        phi_tx=phi_tx,
        theta_tx=theta_tx,
        phi_rx=phi_rx,
        theta_rx=theta_rx,
    )


def trace_los(scene: SceneGeometry, tx, rx) -> PropagationPath | None:
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if not is_visible(scene, tx, rx):
        return None
    return _build_path(tx, rx, [])


def _coplanar(a: Facet, b: Facet) -> bool:
    if abs(abs(float(a.normal @ b.normal)) - 1.0) > 1e-9:
        return False
    return abs(float((b.v0 - a.v0) @ a.normal)) < 1e-9


def _plane_segment_point(facet: Facet, a: np.ndarray, b: np.ndarray):
    """Intersection of segment a->b with the facet's supporting plane."""
    ab = b - a
    denom = float(ab @ facet.normal)
    if abs(denom) < 1e-12:
        return None
    t = float((facet.v0 - a) @ facet.normal) / denom
    if not 0.0 < t < 1.0:
        return None
    return a + t * ab


def _specular_from_sequence(scene, tx, rx, facets: list[Facet]):
    from .geometry import point_on_facet

    images = [tx]
    for f in facets:
        images.append(mirror_point(images[-1], f))
    points: list[np.ndarray] = [None] * len(facets)
    target = rx
    for j in reversed(range(len(facets))):
        # The reflection point on facet j lies on the line from the j-th
        # cumulative image of the transmitter to the next path point.
        p = _plane_segment_point(facets[j], images[j + 1], target)
        if p is None or not point_on_facet(p, facets[j]):
            return None
        points[j] = p
        target = p
    pts = [tx, *points, rx]
    for i in range(len(pts) - 1):
        if float(np.linalg.norm(pts[i + 1] - pts[i])) < 1e-9:
            return None
        if not is_visible(scene, pts[i], pts[i + 1]):
            return None
    interactions = []
    for j, f in enumerate(facets):
        d_in = normalize(pts[j + 1] - pts[j])
        d_out = normalize(pts[j + 2] - pts[j + 1])
        interactions.append(_make_interaction(f, pts[j + 1], d_in, d_out, InteractionKind.REFLECTION))
    return _build_path(tx, rx, interactions)


def trace_specular(scene: SceneGeometry, tx, rx, max_order: int) -> list[PropagationPath]:
    """Image-method enumeration over ordered facet sequences up to max_order.

    Candidate sequences are walked in ascending facet-id order; geometrically
    identical paths through coplanar facet pairs (reflection point on a shared
    edge) deduplicate to the lowest-id sequence.
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    found: dict[tuple, PropagationPath] = {}

    def geo_key(path: PropagationPath) -> tuple:
        return tuple(
            (i.kind.value, *(int(round(c / 1e-6)) for c in i.point))
            for i in path.interactions
        )

    def extend(seq: list[Facet], depth: int):
        for f in scene.facets:
            if seq and _coplanar(seq[-1], f):
                continue
            cand = seq + [f]
            path = _specular_from_sequence(scene, tx, rx, cand)
            if path is not None:
                key = geo_key(path)
                if key not in found:
                    found[key] = path
            if depth + 1 < max_order:
                extend(cand, depth + 1)

    extend([], 0)
    return sorted(found.values(), key=lambda p: (p.tau, p.signature()))


def trace_diffuse(scene: SceneGeometry, tx, rx) -> list[PropagationPath]:
    """Single-bounce scatter candidates at facet centroids, front side only."""
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    out = []
    for f in scene.facets:
        c = f.centroid
        v_in = c - tx
        v_out = rx - c
        din = float(np.linalg.norm(v_in))
        dout = float(np.linalg.norm(v_out))
        if din < 1e-9 or dout < 1e-9:
            continue
        d_in = v_in / din
        d_out = v_out / dout
        # Front side of the authored normal on both legs.
        if float(-d_in @ f.normal) <= 0.0 or float(d_out @ f.normal) <= 0.0:
            continue
        if not (is_visible(scene, tx, c) and is_visible(scene, c, rx)):
            continue
        inter = _make_interaction(f, c, d_in, d_out, InteractionKind.SCATTER)
        out.append(_build_path(tx, rx, [inter]))
    return out


def trace_paths(scene: SceneGeometry, tx, rx, config: TraceConfig = TraceConfig()) -> PathSet:
    """Union of LOS + specular + diffuse paths, deduplicated and delay-sorted."""
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    paths: list[PropagationPath] = []
    los = trace_los(scene, tx, rx)
    if los is not None:
        paths.append(los)
    if config.max_order >= 1:
        paths.extend(trace_specular(scene, tx, rx, config.max_order))
    if config.enable_scatter:
        paths.extend(trace_diffuse(scene, tx, rx))
    unique: dict[tuple, PropagationPath] = {}
    for p in paths:
        unique.setdefault(p.signature(), p)
    ordered = sorted(unique.values(), key=lambda p: (p.tau, p.signature()))
    return PathSet(tx=tx, rx=rx, paths=tuple(ordered))


# ---------------------------------------------------------------------------
# Path cache serialization (JSON keyed by (tx, rx), guarded by a scene hash).

def _interaction_to_dict(i: Interaction) -> dict:
    return {
        "point": [float(x) for x in i.point],
        "facet_id": i.facet_id,
        "kind": i.kind.value,
        "incident_dir": [float(x) for x in i.incident_dir],
        "outgoing_dir": [float(x) for x in i.outgoing_dir],
        "cos_theta_i": i.cos_theta_i,
        "cos_theta_o": i.cos_theta_o,
        "category": i.category,
        "patch_area": i.patch_area,
        "basis_in": [[float(x) for x in row] for row in i.basis_in],
        "basis_out": [[float(x) for x in row] for row in i.basis_out],
    }


def _interaction_from_dict(d: dict) -> Interaction:
    return Interaction(
        point=np.asarray(d["point"], dtype=np.float64),
        facet_id=int(d["facet_id"]),
        kind=InteractionKind(d["kind"]),
        incident_dir=np.asarray(d["incident_dir"], dtype=np.float64),
        outgoing_dir=np.asarray(d["outgoing_dir"], dtype=np.float64),
        cos_theta_i=float(d["cos_theta_i"]),
        cos_theta_o=float(d["cos_theta_o"]),
        category=int(d["category"]),
        patch_area=float(d["patch_area"]),
        basis_in=np.asarray(d["basis_in"], dtype=np.float64),
        basis_out=np.asarray(d["basis_out"], dtype=np.float64),
    )


def pathset_to_dict(ps: PathSet) -> dict:
    return {
        "tx": [float(x) for x in ps.tx],
        "rx": [float(x) for x in ps.rx],
        "paths": [
            {
                "interactions": [_interaction_to_dict(i) for i in p.interactions],
            }
            for p in ps.paths
        ],
    }


def pathset_from_dict(d: dict) -> PathSet:
    tx = np.asarray(d["tx"], dtype=np.float64)
    rx = np.asarray(d["rx"], dtype=np.float64)
    paths = tuple(
        _build_path(tx, rx, [_interaction_from_dict(i) for i in spec["interactions"]])
        for spec in d["paths"]
    )
    return PathSet(tx=tx, rx=rx, paths=paths)


def save_path_cache(path, scene: SceneGeometry, pathsets: list[PathSet]) -> None:
    payload = {
        "format": "radiotwin-paths-1",
        "scene_hash": scene.content_hash(),
        "entries": [pathset_to_dict(ps) for ps in pathsets],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


class PathCacheMismatch(RuntimeError):
    """Cache file does not match the current scene content."""


def load_path_cache(path, scene: SceneGeometry) -> list[PathSet]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "radiotwin-paths-1":
        raise PathCacheMismatch(f"not a path cache: {path}")
    if payload.get("scene_hash") != scene.content_hash():
        raise PathCacheMismatch("scene content hash changed; cache is stale")
    return [pathset_from_dict(d) for d in payload["entries"]]
