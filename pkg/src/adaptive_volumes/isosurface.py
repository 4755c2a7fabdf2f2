"""Grid sampling and table-driven marching cubes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRIANGLES

DEGENERATE_AREA = 1e-12

_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGES = np.array(EDGES, dtype=np.int64)
_TRI_TABLE = np.full((256, 15), -1, dtype=np.int64)
for _case, _tri in enumerate(TRIANGLES):
    _TRI_TABLE[_case, :len(_tri)] = _tri
_TRI_COUNT = np.array([len(t) // 3 for t in TRIANGLES])
# each cube edge as (start corner offset, axis)
_EDGE_START = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray    # (V, 3)
    triangles: np.ndarray   # (T, 3) int
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_cross(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        e = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edges()) + len(self.triangles))

    def vertex_normals(self) -> np.ndarray:
        acc = np.zeros_like(self.vertices)
        c = self.face_cross()
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], c)
        n = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(n > 0, n, 1.0)


def grid_coords(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("grid resolution must be at least 2")
    return np.linspace(-0.5, 0.5, n)


def sample_grid(fn, n: int, batch: int = 65536) -> np.ndarray:
    """Evaluate ``fn`` on the n^3 lattice covering [-0.5, 0.5]^3, indexed [ix, iy, iz]."""
    t = grid_coords(n)
    X, Y, Z = np.meshgrid(t, t, t, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    out = np.empty(len(pts))
    for lo in range(0, len(pts), batch):
        out[lo:lo + batch] = np.asarray(fn(pts[lo:lo + batch]), dtype=np.float64).ravel()
    return out.reshape(n, n, n)


def marching_cubes(values: np.ndarray, iso: float = 0.0, bounds=(-0.5, 0.5)) -> TriangleMesh:
    """Indexed triangle mesh of the ``iso`` level set of a sampled grid.

    Vertices are interpolated linearly along grid edges and shared between
    neighbouring cells. Triangles face towards increasing field values.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("marching cubes needs a 3-d grid with at least 2 samples per axis")
    shape = np.array(values.shape)
    below = values < iso
    nx, ny, nz = shape - 1
    case = np.zeros((nx, ny, nz), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:dx + nx, dy:dy + ny, dz:dz + nz].astype(np.int64) << k
    cells = np.flatnonzero(_TRI_COUNT[case.ravel()] > 0)
    if len(cells) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cell_xyz = np.stack(np.unravel_index(cells, (nx, ny, nz)), axis=1)
    cases = case.ravel()[cells]
    table = _TRI_TABLE[cases]                                   # (m, 15)
    ci, slot = np.nonzero(table >= 0)
    edge = table[ci, slot]
    start = cell_xyz[ci] + _EDGE_START[edge]
    axis = _EDGE_AXIS[edge]
    key = np.ravel_multi_index(start.T, tuple(shape)) * 3 + axis
    uniq, inverse = np.unique(key, return_inverse=True)

    p0 = np.stack(np.unravel_index(uniq // 3, tuple(shape)), axis=1)
    ax = uniq % 3
    p1 = p0.copy()
    p1[np.arange(len(ax)), ax] += 1
    v0 = values[tuple(p0.T)]
    v1 = values[tuple(p1.T)]
    denom = v1 - v0
    t = np.where(denom != 0, (iso - v0) / np.where(denom != 0, denom, 1.0), 0.5)
    lo, hi = bounds
    spacing = (hi - lo) / (shape - 1)
    verts = lo + (p0 + t[:, None] * (p1 - p0)) * spacing

    tris = inverse.reshape(-1, 3)[:, ::-1]     # table winding faces the low side
    mesh = TriangleMesh(verts, tris)
    keep = (mesh.face_areas() > DEGENERATE_AREA) & (tris[:, 0] != tris[:, 1]) \
        & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    return compact(TriangleMesh(verts, tris[keep]))


def compact(mesh: TriangleMesh) -> TriangleMesh:
    """Drop unreferenced vertices."""
    used, inv = np.unique(mesh.triangles, return_inverse=True)
    return TriangleMesh(mesh.vertices[used], inv.reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles + 1:
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")


def write_ply(path, mesh: TriangleMesh):
    """Binary little-endian PLY with float64 vertices and int32 faces."""
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(mesh.vertices)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              f"element face {len(mesh.triangles)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f8").tobytes())
        faces = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        faces["n"] = 3
        faces["i"] = mesh.triangles
        f.write(faces.tobytes())


def write_mesh(path, mesh: TriangleMesh):
    path = str(path)
    if path.endswith(".obj"):
        write_obj(path, mesh)
    elif path.endswith(".ply"):
        write_ply(path, mesh)
    else:
        raise ValueError(f"unsupported mesh format: {path}")
