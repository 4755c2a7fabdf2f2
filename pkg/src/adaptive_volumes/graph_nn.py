"""Dual octree graph convolution and the resampling operators around it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .dual_graph import DualGraph, GraphError
from .octree import lookup_keys

N_SLOTS = 7


@dataclass
class ConvWeights:
    W: T.Tensor      # (7 * C_aug, C_out), direction blocks in code order
    bias: T.Tensor   # (C_out,)


@dataclass
class LevelFeatures:
    graph: DualGraph
    F: T.Tensor


def onehot_depth(depths, min_depth: int, max_depth: int) -> np.ndarray:
    depths = np.asarray(depths, dtype=np.int64)
    if np.any((depths < min_depth) | (depths > max_depth)):
        raise GraphError(f"depth outside the configured range [{min_depth}, {max_depth}]")
    out = np.zeros((len(depths), max_depth - min_depth + 1))
    out[np.arange(len(depths)), depths - min_depth] = 1.0
    return out


def augment(F_j, d_j: int, dp_ij, min_depth: int, max_depth: int) -> np.ndarray:
    """One augmented row ``F_j || onehot(d_j) || dp_ij``."""
    return np.concatenate([np.asarray(F_j, dtype=np.float64).ravel(),
                           onehot_depth([d_j], min_depth, max_depth)[0],
                           np.asarray(dp_ij, dtype=np.float64).ravel()])


def relative_offsets(graph: DualGraph, recv, send) -> np.ndarray:
    """``(o_send - o_recv) / r_recv`` for arrays of vertex indices."""
    centers, r = graph.geometry()
    return (centers[send] - centers[recv]) / r[recv][:, None]


class ConvPlan:
    """Per-graph index and constant data for the bucketed convolution."""

    def __init__(self, graph: DualGraph, min_depth: int, max_depth: int):
        n, e = graph.num_vertices, graph.num_edges
        self.num_vertices = n
        self.extra = max_depth - min_depth + 1 + 3
        depth_1h = onehot_depth(graph.depths, min_depth, max_depth)
        self.self_extra = np.concatenate([depth_1h, np.zeros((n, 3))], axis=1)
        self.edge_extra = np.concatenate(
            [depth_1h[graph.dst], relative_offsets(graph, graph.src, graph.dst)], axis=1)
        self.neighbors = T.Index(graph.dst, n)
        slots = np.concatenate([np.arange(n) * N_SLOTS, graph.src * N_SLOTS + graph.dir])
        self.slots = T.Index(slots, n * N_SLOTS)


def conv_plan(graph: DualGraph, min_depth: int, max_depth: int) -> ConvPlan:
    key = ("conv", min_depth, max_depth)
    plan = graph._cache.get(key)
    if plan is None:
        plan = graph._cache[key] = ConvPlan(graph, min_depth, max_depth)
    return plan


def dual_conv(F: T.Tensor, plan: ConvPlan, w: ConvWeights) -> T.Tensor:
    """Semi-regular graph convolution as one scatter and one GEMM.

    Augmented neighbor rows are summed per (vertex, direction) slot into
    ``M`` of shape (N, 7 * C_aug); empty slots stay zero. Then ``M @ W + b``.
    """
    n = plan.num_vertices
    if F.shape[0] != n:
        raise T.ShapeError(f"dual_conv: {F.shape[0]} rows for {n} vertices")
    c_aug = F.shape[1] + plan.extra
    if w.W.shape[0] != N_SLOTS * c_aug:
        raise T.ShapeError(f"dual_conv: weight rows {w.W.shape[0]} != 7 * {c_aug}")
    self_rows = T.concat([F, T.const(plan.self_extra)], axis=1)
    nbr_rows = T.concat([T.gather_rows(F, plan.neighbors), T.const(plan.edge_extra)], axis=1)
    M = T.scatter_sum(T.concat([self_rows, nbr_rows], axis=0), plan.slots)
    M = T.reshape(M, (n, N_SLOTS * c_aug))
    return T.add_bias(T.matmul(M, w.W), w.bias)


def dual_conv_naive(F: np.ndarray, graph: DualGraph, W: np.ndarray, bias: np.ndarray,
                    min_depth: int, max_depth: int) -> np.ndarray:
    """Per-edge reference loop over the same formula (no bucketing, no GEMM)."""
    F = np.asarray(F, dtype=np.float64)
    c_aug = F.shape[1] + max_depth - min_depth + 1 + 3
    blocks = W.reshape(N_SLOTS, c_aug, -1)
    out = np.tile(np.asarray(bias, dtype=np.float64).reshape(1, -1), (len(F), 1))
    depths = graph.depths
    centers, r = graph.geometry()
    for i in range(len(F)):
        out[i] += augment(F[i], depths[i], np.zeros(3), min_depth, max_depth) @ blocks[0]
    for i, j, c in zip(graph.src, graph.dst, graph.dir):
        dp = (centers[j] - centers[i]) / r[i]
        out[i] += augment(F[j], depths[j], dp, min_depth, max_depth) @ blocks[c]
    return out


# ---------------------------------------------------------------- resampling

def _cached(graph: DualGraph, tag: str, other: DualGraph, build):
    # keyed on the partner graph's identity; the stored reference pins its id
    entry = graph._cache.get((tag, id(other)))
    if entry is None or entry[0] is not other:
        entry = graph._cache[(tag, id(other))] = (other, build())
    return entry[1]


class DownsamplePlan:
    def __init__(self, fine: DualGraph, coarse: DualGraph):
        if coarse.level != fine.level - 1:
            raise GraphError("downsample needs consecutive levels")
        finest = np.flatnonzero(fine.depths == fine.level)
        if len(finest) == 0:
            raise GraphError("nothing to merge: no vertex at the finest depth")
        if len(finest) % 8:
            raise GraphError("sibling group incomplete")
        groups = fine.keys[finest].reshape(-1, 8, 4)
        parents = groups[:, 0, :3] >> 1
        if np.any((groups[:, :, :3] >> 1) != parents[:, None, :]):
            raise GraphError("sibling group incomplete")
        self.finest = T.Index(finest, fine.num_vertices)
        carried = np.flatnonzero(fine.depths < fine.level)
        self.carried = T.Index(carried, fine.num_vertices)
        parent_keys = np.concatenate([parents, np.full((len(parents), 1), coarse.level)], 1)
        combined = np.concatenate([fine.keys[carried], parent_keys], axis=0)
        perm = lookup_keys(coarse.keys, combined)
        if np.any(perm < 0) or len(combined) != coarse.num_vertices:
            raise GraphError("downsampled vertices do not match the coarse graph")
        self.perm = T.Index(perm, len(combined))
        self.n_groups = len(parents)


def downsample(level: LevelFeatures, coarse: DualGraph, merge: ConvWeights,
               proj: T.Tensor | None = None) -> LevelFeatures:
    """Merge each group of 8 finest siblings into its parent with a shared FC map.

    Coarser vertices carry over, through ``proj`` when the width changes.
    """
    plan = _cached(level.graph, "down", coarse, lambda: DownsamplePlan(level.graph, coarse))
    c = level.F.shape[1]
    groups = T.reshape(T.gather_rows(level.F, plan.finest), (plan.n_groups, 8 * c))
    merged = T.add_bias(T.matmul(groups, merge.W), merge.bias)
    carried = T.gather_rows(level.F, plan.carried)
    if proj is not None:
        carried = T.matmul(carried, proj)
    out = T.gather_rows(T.concat([carried, merged], axis=0), plan.perm)
    return LevelFeatures(coarse, out)


class UpsamplePlan:
    def __init__(self, coarse: DualGraph, split: np.ndarray, fine: DualGraph):
        split = np.asarray(split, dtype=bool)
        self.split = T.Index(np.flatnonzero(split), coarse.num_vertices)
        self.kept = T.Index(np.flatnonzero(~split), coarse.num_vertices)
        self.n_split = int(split.sum())
        n_out = coarse.num_vertices + 7 * self.n_split
        if fine.num_vertices != n_out:
            raise GraphError("upsampled vertex count does not match the fine graph")
        kept_keys = fine.keys[:coarse.num_vertices - self.n_split]
        if not np.array_equal(kept_keys, coarse.keys[~split]):
            raise GraphError("fine graph vertex order does not extend the coarse graph")


def upsample(level: LevelFeatures, split, fine: DualGraph, expand: ConvWeights,
             proj: T.Tensor | None = None) -> LevelFeatures:
    """Inverse of ``downsample``: split vertices expand into 8 child rows."""
    split = np.asarray(split, dtype=bool)
    plan = _cached(level.graph, "up", fine, lambda: UpsamplePlan(level.graph, split, fine))
    kept = T.gather_rows(level.F, plan.kept)
    if proj is not None:
        kept = T.matmul(kept, proj)
    c_out = expand.W.shape[1] // 8
    rows = T.add_bias(T.matmul(T.gather_rows(level.F, plan.split), expand.W), expand.bias)
    children = T.reshape(rows, (8 * plan.n_split, c_out))
    return LevelFeatures(fine, T.concat([kept, children], axis=0))


def skip_connect(decoder: LevelFeatures, encoder: LevelFeatures | None) -> LevelFeatures:
    """Add encoder features to decoder vertices with the identical (x, y, z, d) key."""
    if encoder is None:
        return decoder
    if decoder.F.shape[1] != encoder.F.shape[1]:
        raise T.ShapeError("skip_connect: channel widths differ")
    idx = _cached(decoder.graph, "skip", encoder.graph, lambda: T.Index(
        lookup_keys(decoder.graph.keys, encoder.graph.keys), encoder.graph.num_vertices))
    return LevelFeatures(decoder.graph, T.add(decoder.F, T.gather_rows(encoder.F, idx)))


def predict_split(F: T.Tensor, fc0: ConvWeights, fc1: ConvWeights) -> T.Tensor:
    """Two-layer shared MLP giving (empty, non-empty) logits per vertex."""
    h = T.relu(T.add_bias(T.matmul(F, fc0.W), fc0.bias))
    return T.add_bias(T.matmul(h, fc1.W), fc1.bias)


def split_decision(logits: np.ndarray) -> np.ndarray:
    """Subdivide where the non-empty logit strictly wins; ties stay empty."""
    logits = np.asarray(logits)
    return logits[:, 1] > logits[:, 0]


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)
