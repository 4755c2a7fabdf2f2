"""Analytic signed distance primitives used as ground truth.

Sign convention: negative inside, positive outside.
"""

from __future__ import annotations

import numpy as np


class Shape:
    """Base class for analytic shapes. Subclasses implement ``sdf``."""

    def sdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.sdf(np.asarray(x, dtype=np.float64))

    def inside(self, x) -> np.ndarray:
        return self(x) < 0

    def sample_surface(self, n: int, rng: np.random.Generator):
        """Return ``n`` surface points and outward unit normals."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class Sphere(Shape):
    def __init__(self, radius=0.25, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def sdf(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def sample_surface(self, n, rng):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d, d

    def to_dict(self):
        return {"type": "sphere", "radius": self.radius,
                "center": self.center.tolist()}


class Box(Shape):
    def __init__(self, half_size=(0.2, 0.2, 0.2), center=(0.0, 0.0, 0.0)):
        self.half_size = np.broadcast_to(
            np.asarray(half_size, dtype=np.float64), (3,)).copy()
        self.center = np.asarray(center, dtype=np.float64)

    def sdf(self, x):
        q = np.abs(x - self.center) - self.half_size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def sample_surface(self, n, rng):
        h = self.half_size
        # face areas, ordered as axis 0,1,2 (each appears twice)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        probs = np.repeat(areas, 2) / (2 * areas.sum())
        face = rng.choice(6, size=n, p=probs)
        axis, side = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        p = rng.uniform(-1.0, 1.0, (n, 3)) * h
        rows = np.arange(n)
        p[rows, axis] = side * h[axis]
        nrm = np.zeros((n, 3))
        nrm[rows, axis] = side
        return self.center + p, nrm

    def to_dict(self):
        return {"type": "box", "half_size": self.half_size.tolist(),
                "center": self.center.tolist()}


class Torus(Shape):
    """Torus around the z axis."""

    def __init__(self, major=0.25, minor=0.1, center=(0.0, 0.0, 0.0)):
        self.major = float(major)
        self.minor = float(minor)
        self.center = np.asarray(center, dtype=np.float64)

    def sdf(self, x):
        p = x - self.center
        q = np.hypot(p[..., 0], p[..., 1]) - self.major
        return np.hypot(q, p[..., 2]) - self.minor

    def sample_surface(self, n, rng):
        R, r = self.major, self.minor
        u = np.empty(0)
        v = np.empty(0)
        # area element is proportional to R + r cos(v); rejection sample v
        while u.size < n:
            m = 2 * (n - u.size) + 16
            vv = rng.uniform(0, 2 * np.pi, m)
            keep = rng.uniform(0, R + r, m) < R + r * np.cos(vv)
            v = np.concatenate([v, vv[keep]])
            u = np.concatenate([u, rng.uniform(0, 2 * np.pi, keep.sum())])
        u, v = u[:n], v[:n]
        nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        ring = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], axis=1)
        return self.center + ring + r * nrm, nrm

    def to_dict(self):
        return {"type": "torus", "major": self.major, "minor": self.minor,
                "center": self.center.tolist()}


class Union(Shape):
    def __init__(self, children):
        if not children:
            raise ValueError("union needs at least one child")
        self.children = list(children)

    def sdf(self, x):
        return np.min([c.sdf(x) for c in self.children], axis=0)

    def sample_surface(self, n, rng):
        pts, nrms = [], []
        count = 0
        while count < n:
            for c in self.children:
                p, q = c.sample_surface(n, rng)
                keep = self.sdf(p) > -1e-9
                pts.append(p[keep])
                nrms.append(q[keep])
                count += keep.sum()
        pts, nrms = np.concatenate(pts), np.concatenate(nrms)
        pick = rng.permutation(len(pts))[:n]
        return pts[pick], nrms[pick]

    def to_dict(self):
        return {"type": "union", "children": [c.to_dict() for c in self.children]}


def shape_from_dict(spec: dict) -> Shape:
    kind = spec.get("type")
    args = {k: v for k, v in spec.items() if k != "type"}
    if kind == "sphere":
        return Sphere(**args)
    if kind == "box":
        return Box(**args)
    if kind == "torus":
        return Torus(**args)
    if kind == "union":
        return Union([shape_from_dict(c) for c in spec["children"]])
    raise ValueError(f"unknown shape type {kind!r}")


def sdf_gradient_fd(shape: Shape, x: np.ndarray, h) -> np.ndarray:
    """Central finite-difference gradient; ``h`` is a scalar or per-point array."""
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape[:1])[:, None]
    grad = np.empty_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        grad[:, k] = (shape(x + h * e) - shape(x - h * e)) / (2 * h[:, 0])
    return grad
