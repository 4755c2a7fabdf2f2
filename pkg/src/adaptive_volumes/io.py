"""Readers and writers for point clouds, meshes, dumps and the binary query stream."""

from __future__ import annotations

import os

import numpy as np

from .isosurface import TriangleMesh
from .octree import Octree, PointSet

_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4",
              "uint": "u4", "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1",
              "int16": "i2", "uint16": "u2", "int32": "i4", "uint32": "u4",
              "float32": "f4", "float64": "f8"}


class DataError(ValueError):
    pass


def _open_check(path):
    if not os.path.exists(path):
        raise DataError(f"{path}: no such file")


def read_xyz(path) -> PointSet:
    """``x y z [nx ny nz]`` per line; blank lines and ``#`` comments are skipped."""
    _open_check(path)
    rows, width = [], None
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) not in (3, 6):
                raise DataError(f"{path}:{lineno}: expected 3 or 6 numbers, got {len(parts)}")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns like the first line")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed number in {s!r}") from None
            if not np.all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no points")
    a = np.array(rows)
    return PointSet(a[:, :3], a[:, 3:] if width == 6 else None)


def write_xyz(path, points: PointSet):
    a = points.positions if points.normals is None else np.hstack([points.positions,
                                                                   points.normals])
    np.savetxt(path, a, fmt="%.9g")


def _parse_ply_header(f, path):
    if f.readline().strip() != b"ply":
        raise DataError(f"{path}:1: not a PLY file")
    fmt, elements, lineno = None, [], 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise DataError(f"{path}:{lineno}: unexpected end of header")
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise DataError(f"{path}:{lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise DataError(f"{path}:{lineno}: unknown PLY type {parts[1]}")
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            return fmt, elements, lineno
        else:
            raise DataError(f"{path}:{lineno}: unexpected header line {raw.strip()!r}")


def _ascii_row(tokens, props):
    """Values of one ASCII PLY row; list properties drop their length prefix."""
    row, pos = [], 0
    for p in props:
        if p[1] == "list":
            k = int(tokens[pos])
            row.extend(float(v) for v in tokens[pos + 1:pos + 1 + k])
            if len(tokens) < pos + 1 + k:
                raise IndexError
            pos += 1 + k
        else:
            row.append(float(tokens[pos]))
            pos += 1
    return row


def read_ply(path):
    """Vertices, optional normals and optional faces from ASCII or binary little-endian PLY."""
    _open_check(path)
    with open(path, "rb") as f:
        fmt, elements, lineno = _parse_ply_header(f, path)
        data = {}
        if fmt == "ascii":
            lines = f.read().decode("ascii").splitlines()
            pos = 0
            for name, count, props in elements:
                out = []
                for _ in range(count):
                    if pos >= len(lines):
                        raise DataError(f"{path}:{lineno + pos + 1}: truncated {name} data")
                    try:
                        out.append(_ascii_row(lines[pos].split(), props))
                    except (ValueError, IndexError):
                        raise DataError(f"{path}:{lineno + pos + 1}: malformed {name} row") \
                            from None
                    pos += 1
                data[name] = (props, out)
        elif fmt == "binary_little_endian":
            for name, count, props in elements:
                if any(p[1] == "list" for p in props):
                    rows = []
                    for _ in range(count):
                        row = []
                        for p in props:
                            if p[1] == "list":
                                ct = np.dtype("<" + _PLY_TYPES[p[2]])
                                it = np.dtype("<" + _PLY_TYPES[p[3]])
                                k = int(np.frombuffer(f.read(ct.itemsize), ct)[0])
                                row.extend(np.frombuffer(f.read(k * it.itemsize), it).tolist())
                            else:
                                t = np.dtype("<" + _PLY_TYPES[p[1]])
                                row.append(float(np.frombuffer(f.read(t.itemsize), t)[0]))
                        rows.append(row)
                    data[name] = (props, rows)
                else:
                    dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
                    buf = f.read(dt.itemsize * count)
                    if len(buf) != dt.itemsize * count:
                        raise DataError(f"{path}: truncated binary {name} data")
                    arr = np.frombuffer(buf, dt)
                    data[name] = (props, [list(r) for r in arr.tolist()])
        else:
            raise DataError(f"{path}: unsupported PLY format {fmt}")
    if "vertex" not in data:
        raise DataError(f"{path}: no vertex element")
    props, rows = data["vertex"]
    names = [p[0] for p in props]
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    try:
        verts = arr[:, [names.index(c) for c in "xyz"]]
    except ValueError:
        raise DataError(f"{path}: vertex element lacks x, y or z") from None
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = arr[:, [names.index(c) for c in ("nx", "ny", "nz")]]
    faces = None
    if "face" in data and data["face"][1]:
        faces = _triangulate([[int(v) for v in r] for r in data["face"][1]])
    return verts, normals, faces


def _triangulate(polys):
    tris = []
    for p in polys:
        for k in range(1, len(p) - 1):
            tris.append((p[0], p[k], p[k + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def read_obj(path):
    """Vertices and triangulated faces; texture/normal indices are ignored."""
    _open_check(path)
    verts, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(v) for v in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    if len(idx) < 3:
                        raise ValueError
                    faces.append(idx)
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed {parts[0]} line") from None
    if not verts:
        raise DataError(f"{path}: no vertices")
    return np.array(verts), _triangulate(faces)


def read_points(path) -> PointSet:
    path = str(path)
    if path.endswith(".ply"):
        v, n, _ = read_ply(path)
        return PointSet(v, n)
    if path.endswith(".obj"):
        return PointSet(read_obj(path)[0], None)
    return read_xyz(path)


def read_mesh(path) -> TriangleMesh:
    path = str(path)
    if path.endswith(".ply"):
        v, _, faces = read_ply(path)
    elif path.endswith(".obj"):
        v, faces = read_obj(path)
    else:
        _open_check(path)
        raise DataError(f"{path}: unsupported mesh format")
    if faces is None or len(faces) == 0:
        raise DataError(f"{path}: mesh has no faces")
    try:
        return TriangleMesh(v, faces)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


def octree_dump_lines(octree: Octree):
    """``x y z d leaf non_empty`` per node, by depth then Morton order."""
    for d in range(octree.max_depth + 1):
        keys = octree.node_keys(d)
        split = octree.split[d] if d < len(octree.split) else np.zeros(len(keys), bool)
        ne = octree.non_empty[d]
        for k, s, e in zip(keys, split, ne):
            yield f"{k[0]} {k[1]} {k[2]} {d} {int(not s)} {int(e)}"


def write_octree_dump(path, octree: Octree):
    with open(path, "w") as f:
        for line in octree_dump_lines(octree):
            f.write(line + "\n")


def graph_dump_lines(graphs):
    """Sorted ``level; i_key; j_key; dir`` lines with keys written ``x,y,z,d``."""
    lines = []
    for g in graphs:
        ki = g.keys[g.src]
        kj = g.keys[g.dst]
        for a, b, c in zip(ki, kj, g.dir):
            lines.append(f"{g.level}; {a[0]},{a[1]},{a[2]},{a[3]}; "
                         f"{b[0]},{b[1]},{b[2]},{b[3]}; {c}")
    return sorted(lines)


def write_graph_dump(path, graphs):
    with open(path, "w") as f:
        for line in graph_dump_lines(graphs):
            f.write(line + "\n")


def read_query_stream(stream) -> np.ndarray:
    """Little-endian float64 triples until EOF."""
    buf = stream.read()
    if len(buf) % 24:
        raise DataError(f"query stream length {len(buf)} is not a multiple of 24 bytes")
    return np.frombuffer(buf, dtype="<f8").reshape(-1, 3).copy()


def write_value_stream(stream, values):
    stream.write(np.asarray(values, dtype="<f8").tobytes())
