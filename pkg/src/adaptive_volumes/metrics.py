"""Surface and volume metrics between a predicted and a reference shape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .isosurface import TriangleMesh

DEFAULT_TAU = 0.01
N_SURFACE = 10000
N_VOLUME = 100000


class MetricError(ValueError):
    pass


@dataclass
class SampledSurface:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


def sample_mesh(mesh: TriangleMesh, n: int = N_SURFACE, seed: int = 0) -> SampledSurface:
    """Area-uniform samples with face normals."""
    areas = mesh.face_areas() if not mesh.is_empty else np.zeros(0)
    total = areas.sum()
    if total <= 0:
        raise MetricError("degenerate mesh: zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    v = mesh.vertices[mesh.triangles[face]]
    pts = v[:, 0] + u[:, :1] * (v[:, 1] - v[:, 0]) + u[:, 1:] * (v[:, 2] - v[:, 0])
    return SampledSurface(pts, mesh.face_normals()[face])


def nearest(query, ref):
    """Distance to and index of the nearest reference point (kd-tree)."""
    d, i = cKDTree(ref).query(query, k=1)
    return d, i


def nearest_exhaustive(query, ref, chunk=512):
    """O(N M) reference search; ties resolve to the lowest index."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    dist = np.empty(len(query))
    idx = np.empty(len(query), dtype=np.int64)
    for lo in range(0, len(query), chunk):
        q = query[lo:lo + chunk]
        d2 = ((q[:, None, :] - ref[None]) ** 2).sum(-1)
        idx[lo:lo + chunk] = np.argmin(d2, axis=1)
        dist[lo:lo + chunk] = np.sqrt(d2[np.arange(len(q)), idx[lo:lo + chunk]])
    return dist, idx


def _check(P, G):
    if len(P) == 0 or len(G) == 0:
        raise MetricError("empty sample set")


def chamfer_l1(P: SampledSurface, G: SampledSurface, nn=nearest):
    """(cd, pred->gt, gt->pred) with mean Euclidean nearest distances."""
    _check(P, G)
    p2g = float(nn(P.points, G.points)[0].mean())
    g2p = float(nn(G.points, P.points)[0].mean())
    return p2g + g2p, p2g, g2p


def normal_consistency(P: SampledSurface, G: SampledSurface, nn=nearest) -> float:
    """Mean over both directions of |n . n_nearest|, in [0, 1]."""
    _check(P, G)
    if P.normals is None or G.normals is None:
        raise MetricError("normal consistency needs normals on both sample sets")
    _, i = nn(P.points, G.points)
    a = np.abs(np.sum(P.normals * G.normals[i], axis=1)).mean()
    _, j = nn(G.points, P.points)
    b = np.abs(np.sum(G.normals * P.normals[j], axis=1)).mean()
    return float(0.5 * (a + b))


def f_score(P: SampledSurface, G: SampledSurface, tau: float = DEFAULT_TAU, nn=nearest) -> float:
    if tau <= 0:
        raise MetricError("tau must be positive")
    _check(P, G)
    precision = float(np.mean(nn(P.points, G.points)[0] < tau))
    recall = float(np.mean(nn(G.points, P.points)[0] < tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def volumetric_iou(pred_inside, gt_inside, n_samples: int = N_VOLUME, seed: int = 0,
                   return_sigma=False):
    """Monte-Carlo IoU of two inside/outside closures over [-0.5, 0.5]^3."""
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, (n_samples, 3))
    a = np.asarray(pred_inside(x), dtype=bool)
    b = np.asarray(gt_inside(x), dtype=bool)
    union = np.count_nonzero(a | b)
    inter = np.count_nonzero(a & b)
    iou = 1.0 if union == 0 else inter / union
    if return_sigma:
        # binomial error of the intersection fraction within the union
        sigma = np.sqrt(iou * (1 - iou) / max(union, 1))
        return iou, float(sigma)
    return iou


def mesh_inside(mesh: TriangleMesh, points, bins: int = 64) -> np.ndarray:
    """Ray-parity inside test along +z, with triangles binned on an xy grid."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(points), dtype=bool)
    if mesh.is_empty or len(points) == 0:
        return inside
    v = mesh.vertices[mesh.triangles]
    lo = np.minimum(v[..., :2].min(axis=(0, 1)), points[:, :2].min(axis=0)) - 1e-9
    hi = np.maximum(v[..., :2].max(axis=(0, 1)), points[:, :2].max(axis=0)) + 1e-9
    scale = bins / (hi - lo)
    tmin = np.clip(((v[..., :2].min(axis=1) - lo) * scale).astype(np.int64), 0, bins - 1)
    tmax = np.clip(((v[..., :2].max(axis=1) - lo) * scale).astype(np.int64), 0, bins - 1)
    cell = np.clip(((points[:, :2] - lo) * scale).astype(np.int64), 0, bins - 1)
    cell_id = cell[:, 0] * bins + cell[:, 1]

    # triangle -> covered bins
    tri_list, bin_list = [], []
    for t in range(len(v)):
        xs = np.arange(tmin[t, 0], tmax[t, 0] + 1)
        ys = np.arange(tmin[t, 1], tmax[t, 1] + 1)
        b = (xs[:, None] * bins + ys[None]).ravel()
        bin_list.append(b)
        tri_list.append(np.full(len(b), t))
    tri_of = np.concatenate(tri_list)
    bin_of = np.concatenate(bin_list)
    order = np.argsort(bin_of, kind="stable")
    tri_of, bin_of = tri_of[order], bin_of[order]
    starts = np.searchsorted(bin_of, np.arange(bins * bins + 1))

    a, b_, c = v[:, 0], v[:, 1], v[:, 2]
    for cid in np.unique(cell_id):
        tris = tri_of[starts[cid]:starts[cid + 1]]
        if len(tris) == 0:
            continue
        pi = np.flatnonzero(cell_id == cid)
        p = points[pi]
        A, B, C = a[tris], b_[tris], c[tris]
        e1 = B[:, :2] - A[:, :2]
        e2 = C[:, :2] - A[:, :2]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        ok = np.abs(det) > 1e-300
        det = np.where(ok, det, 1.0)
        r = p[:, None, :2] - A[None, :, :2]
        u = (r[..., 0] * e2[:, 1] - r[..., 1] * e2[:, 0]) / det
        w = (e1[:, 0] * r[..., 1] - e1[:, 1] * r[..., 0]) / det
        hit = ok & (u >= 0) & (w >= 0) & (u + w <= 1)
        z = A[:, 2] + u * (B[:, 2] - A[:, 2]) + w * (C[:, 2] - A[:, 2])
        crossings = np.count_nonzero(hit & (z > p[:, None, 2]), axis=1)
        inside[pi] = crossings % 2 == 1
    return inside


def evaluate(pred: TriangleMesh, gt=None, gt_samples: SampledSurface | None = None,
             gt_inside=None, n_samples: int = N_SURFACE, tau: float = DEFAULT_TAU,
             seed: int = 0, iou_samples: int = N_VOLUME) -> dict:
    """All four metrics; the reference may be a mesh or analytic samples + inside test."""
    P = sample_mesh(pred, n_samples, seed)
    if gt_samples is None:
        gt_samples = sample_mesh(gt, n_samples, seed)
    if gt_inside is None:
        gt_inside = lambda x: mesh_inside(gt, x)  # noqa: E731
    cd, p2g, g2p = chamfer_l1(P, gt_samples)
    return {"cd": cd, "cd_p2g": p2g, "cd_g2p": g2p,
            "nc": normal_consistency(P, gt_samples),
            "iou": volumetric_iou(lambda x: mesh_inside(pred, x), gt_inside, iou_samples, seed),
            "fscore": f_score(P, gt_samples, tau),
            "n_samples": n_samples, "tau": tau, "seed": seed}
