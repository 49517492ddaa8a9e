"""Synthetic scene builders for demos, tests, and sim-to-sim studies.

All builders return plain scene dicts conforming to the scene JSON schema.
Room interiors use inward-facing normals so interior transceivers see the
front side of every surface. Truth material tables are authored constants
with deliberate contrast against the neutral field start (2, 1, 0.5, 0.5).
"""

from __future__ import annotations

import json

SHOEBOX_TRUTH = {
    "0": {"eps_r": 5.24, "sigma": 0.46, "s": 0.35, "k_chi": 0.10},  # floor
    "1": {"eps_r": 2.73, "sigma": 0.05, "s": 0.20, "k_chi": 0.10},  # ceiling
    "2": {"eps_r": 3.91, "sigma": 0.05, "s": 0.45, "k_chi": 0.15},  # walls
}

TWO_WALL_TRUTH = {
    "0": {"eps_r": 5.24, "sigma": 0.46, "s": 0.30, "k_chi": 0.10},  # floor
    "1": {"eps_r": 6.31, "sigma": 0.80, "s": 0.10, "k_chi": 0.05},  # left half
    "2": {"eps_r": 1.99, "sigma": 0.01, "s": 0.30, "k_chi": 0.10},  # right half
}

GROUND_TRUTH = {
    "0": {"eps_r": 5.24, "sigma": 0.46, "s": 0.0, "k_chi": 0.0},
}


def _quad(vertices, facets, corners, category):
    """Append two triangles for a quad given in winding order."""
    base = len(vertices)
    vertices.extend(corners)
    facets.append({"v": [base, base + 1, base + 2], "category": category})
    facets.append({"v": [base, base + 2, base + 3], "category": category})


def shoebox_scene(length=10.0, width=6.0, height=3.0, truth=None) -> dict:
    """Closed box with floor/ceiling/walls categories and inward normals."""
    lx, wy, hz = float(length), float(width), float(height)
    vertices: list[list[float]] = []
    facets: list[dict] = []
    # floor z=0, normal +z
    _quad(vertices, facets, [[0, 0, 0], [lx, 0, 0], [lx, wy, 0], [0, wy, 0]], 0)
    # ceiling z=h, normal -z
    _quad(vertices, facets, [[0, 0, hz], [0, wy, hz], [lx, wy, hz], [lx, 0, hz]], 1)
    # wall y=0, normal +y
    _quad(vertices, facets, [[0, 0, 0], [0, 0, hz], [lx, 0, hz], [lx, 0, 0]], 2)
    # wall y=w, normal -y
    _quad(vertices, facets, [[0, wy, 0], [lx, wy, 0], [lx, wy, hz], [0, wy, hz]], 2)
    # wall x=0, normal +x
    _quad(vertices, facets, [[0, 0, 0], [0, wy, 0], [0, wy, hz], [0, 0, hz]], 2)
    # wall x=l, normal -x
    _quad(vertices, facets, [[lx, 0, 0], [lx, 0, hz], [lx, wy, hz], [lx, wy, 0]], 2)
    return {
        "vertices": vertices,
        "facets": facets,
        "category_names": {"0": "floor", "1": "ceiling", "2": "wall"},
        "truth_materials": dict(truth if truth is not None else SHOEBOX_TRUTH),
    }


def two_material_wall_scene(
    length=8.0, depth=6.0, height=3.0, panels_x=4, panels_z=2, truth=None
) -> dict:
    """Open stage: a floor plus one wall whose halves differ in material.

    The wall (plane y=0, room side y>0) is tiled into panels so diffuse
    scattering samples several points across each half; the material split
    sits at x = length/2.
    """
    lx, dy, hz = float(length), float(depth), float(height)
    vertices: list[list[float]] = []
    facets: list[dict] = []
    _quad(vertices, facets, [[0, 0, 0], [lx, 0, 0], [lx, dy, 0], [0, dy, 0]], 0)
    px = lx / panels_x
    pz = hz / panels_z
    for ix in range(panels_x):
        for iz in range(panels_z):
            x0, x1 = ix * px, (ix + 1) * px
            z0, z1 = iz * pz, (iz + 1) * pz
            category = 1 if (x0 + x1) / 2 < lx / 2 else 2
            _quad(
                vertices,
                facets,
                [[x0, 0, z0], [x0, 0, z1], [x1, 0, z1], [x1, 0, z0]],
                category,
            )
    return {
        "vertices": vertices,
        "facets": facets,
        "category_names": {"0": "floor", "1": "wall_left", "2": "wall_right"},
        "truth_materials": dict(truth if truth is not None else TWO_WALL_TRUTH),
    }


def ground_plane_scene(size=200.0, truth=None) -> dict:
    """Large square ground at z=0 (two-ray reference geometry)."""
    s = float(size)
    vertices: list[list[float]] = []
    facets: list[dict] = []
    _quad(vertices, facets, [[-s, -s, 0], [s, -s, 0], [s, s, 0], [-s, s, 0]], 0)
    return {
        "vertices": vertices,
        "facets": facets,
        "category_names": {"0": "ground"},
        "truth_materials": dict(truth if truth is not None else GROUND_TRUTH),
    }


BUILDERS = {
    "shoebox": shoebox_scene,
    "two-wall": two_material_wall_scene,
    "ground": ground_plane_scene,
}


def write_scene(path, scene_dict: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_dict, fh, indent=1, sort_keys=True)
        fh.write("\n")
