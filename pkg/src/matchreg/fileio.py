"""ASCII PLY point-cloud I/O and ASCII OBJ mesh reading.

Only the subset needed here is supported: PLY ``vertex`` elements with
``x y z`` properties (float or double), and OBJ ``v``/``f`` records with
polygonal faces triangulated by fan. Writers emit full-precision float64
so a write/read round trip is lossless.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ObjParseError, PlyParseError
from .geometry import Points, TriangleMesh, as_points


def write_ply(path, pc: Points) -> None:
    pts = as_points(pc)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    for p in pts:
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> Points:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError(path, 1, "missing 'ply' magic")

    n_vertices = None
    props: list[str] = []
    in_vertex_element = False
    body_start = None
    for ln, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise PlyParseError(path, ln, f"unsupported format {raw.strip()!r}")
        elif tok[0] == "element":
            in_vertex_element = tok[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertices = int(tok[2])
                except (IndexError, ValueError):
                    raise PlyParseError(path, ln, "bad vertex count") from None
        elif tok[0] == "property" and in_vertex_element:
            if len(tok) != 3 or tok[1] not in ("float", "float32", "double", "float64"):
                raise PlyParseError(path, ln, f"unsupported property {raw.strip()!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = ln
            break
    if body_start is None:
        raise PlyParseError(path, len(lines), "missing end_header")
    if n_vertices is None:
        raise PlyParseError(path, body_start, "no vertex element declared")
    if props[:3] != ["x", "y", "z"]:
        raise PlyParseError(path, body_start, f"vertex properties must start with x y z, got {props}")

    pts = np.zeros((n_vertices, 3))
    row = 0
    for ln, raw in enumerate(lines[body_start:], start=body_start + 1):
        if not raw.strip():
            continue
        if row >= n_vertices:
            raise PlyParseError(path, ln, "more data rows than declared vertices")
        tok = raw.split()
        if len(tok) < len(props):
            raise PlyParseError(path, ln, f"expected {len(props)} values, got {len(tok)}")
        try:
            pts[row] = [float(tok[0]), float(tok[1]), float(tok[2])]
        except ValueError:
            raise PlyParseError(path, ln, f"non-numeric coordinate in {raw.strip()!r}") from None
        row += 1
    if row != n_vertices:
        raise PlyParseError(path, len(lines), f"declared {n_vertices} vertices, found {row}")
    if not np.all(np.isfinite(pts)):
        raise PlyParseError(path, body_start, "non-finite coordinate")
    return pts


def _parse_face_index(tok: str, n_vertices: int, path, ln: int) -> int:
    head = tok.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(path, ln, f"bad face index {tok!r}") from None
    if idx < 0:
        idx = n_vertices + idx + 1  # OBJ negative indices count from the end
    if not 1 <= idx <= n_vertices:
        raise ObjParseError(path, ln, f"face index {idx} out of range 1..{n_vertices}")
    return idx - 1


def read_obj(path) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise ObjParseError(path, ln, "vertex needs 3 coordinates")
            try:
                vertices.append([float(tok[1]), float(tok[2]), float(tok[3])])
            except ValueError:
                raise ObjParseError(path, ln, f"non-numeric vertex in {raw.strip()!r}") from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise ObjParseError(path, ln, "face needs at least 3 indices")
            idx = [_parse_face_index(t, len(vertices), path, ln) for t in tok[1:]]
            for i in range(1, len(idx) - 1):  # fan triangulation
                faces.append([idx[0], idx[i], idx[i + 1]])
        # all other record types (vn, vt, usemtl, ...) are ignored
    if not vertices:
        raise ObjParseError(path, 1, "no vertices found")
    if not faces:
        raise ObjParseError(path, 1, "no faces found")
    return TriangleMesh(np.array(vertices), np.array(faces, dtype=np.int64))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for v in mesh.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
