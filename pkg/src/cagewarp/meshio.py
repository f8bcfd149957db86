"""ASCII OBJ and CSV readers/writers.

Only `v` and `f` records are interpreted; normals, texture coordinates and
vertex colors in the input are ignored.  Faces must be triangles unless quad
fan-triangulation is requested.  Floats are written with 17 significant
digits so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .geometry import DEGENERATE_FACE_AREA, MeshError, PointSet, TriMesh


class ParseError(Exception):
    """Malformed input file."""


def _parse_face_token(token: str, n_vertices: int, lineno: int) -> int:
    idx_str = token.split("/")[0]
    try:
        idx = int(idx_str)
    except ValueError as exc:
        raise ParseError(f"line {lineno}: bad face index {token!r}") from exc
    if idx < 1 or idx > n_vertices:
        raise ParseError(
            f"line {lineno}: face index {idx} out of range 1..{n_vertices}"
        )
    return idx - 1


def load_mesh(path, triangulate_quads: bool = False) -> TriMesh:
    """Load a triangulated OBJ file.

    Quads are fan-triangulated when ``triangulate_quads`` is set, otherwise
    any non-triangle face is rejected.  Faces with area below
    ``DEGENERATE_FACE_AREA`` are rejected.
    """
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad vertex coordinate") from exc
            elif parts[0] == "f":
                idx = [
                    _parse_face_token(t, len(verts), lineno) for t in parts[1:]
                ]
                if len(idx) == 3:
                    faces.append(tuple(idx))
                elif len(idx) > 3 and triangulate_quads:
                    for k in range(1, len(idx) - 1):
                        faces.append((idx[0], idx[k], idx[k + 1]))
                else:
                    raise ParseError(
                        f"line {lineno}: face has {len(idx)} vertices; "
                        "only triangles are accepted (enable quad triangulation)"
                    )
            # all other records (vn, vt, usemtl, o, g, s, ...) are ignored
    mesh = TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))
    if mesh.n_faces:
        areas = mesh.face_areas()
        bad = np.nonzero(areas < DEGENERATE_FACE_AREA)[0]
        if len(bad):
            raise MeshError(
                f"degenerate faces (area < {DEGENERATE_FACE_AREA}): "
                f"{bad[:5].tolist()}"
            )
    return mesh


def save_mesh(mesh: TriMesh, path) -> None:
    """Write an OBJ file that round-trips bit-exactly through load_mesh."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_points(path) -> PointSet:
    """Load a point set from OBJ `v` records or a CSV of x,y,z rows."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        pts = []
        with open(p, "r") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != 3:
                    raise ParseError(f"line {lineno}: expected x,y,z")
                try:
                    pts.append([float(x) for x in row])
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad coordinate") from exc
        return PointSet(points=np.array(pts, dtype=np.float64).reshape(-1, 3))
    mesh = load_mesh(p)
    return PointSet(points=mesh.vertices)


def save_points(points: PointSet, path) -> None:
    p = Path(path)
    if p.suffix.lower() == ".csv":
        with open(p, "w") as fh:
            for q in points.points:
                fh.write(f"{q[0]:.17g},{q[1]:.17g},{q[2]:.17g}\n")
    else:
        with open(p, "w") as fh:
            for q in points.points:
                fh.write(f"v {q[0]:.17g} {q[1]:.17g} {q[2]:.17g}\n")


def load_landmarks(path) -> np.ndarray:
    """CSV of `src_index,dst_index` integer pairs -> (L, 2) array."""
    pairs = []
    with open(path, "r") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(f"line {lineno}: expected src_index,dst_index")
            try:
                pairs.append((int(row[0]), int(row[1])))
            except ValueError as exc:
                raise ParseError(f"line {lineno}: bad landmark index") from exc
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def save_landmarks(pairs: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for a, b in np.asarray(pairs, dtype=np.int64):
            fh.write(f"{a},{b}\n")


def load_offsets(path) -> np.ndarray:
    """CSV of `dx,dy,dz` rows -> (C, 3) array."""
    rows = []
    with open(path, "r") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(f"line {lineno}: expected dx,dy,dz")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: bad offset value") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def save_offsets(offsets: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for d in np.asarray(offsets, dtype=np.float64):
            fh.write(f"{d[0]:.17g},{d[1]:.17g},{d[2]:.17g}\n")
