"""Encoder-decoder network over dual octree graphs, plus training and inference."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import losses as L
from . import tape as T
from .dual_graph import (EDGE_MODES, DualGraph, build_hierarchy, level_split_labels,
                         refine_graph, restrict_edges)
from .graph_nn import (ConvWeights, LevelFeatures, conv_plan, downsample, dual_conv,
                       kaiming_uniform, predict_split, skip_connect, split_decision, upsample)
from .mpu import MpuHead, covering_pairs, eval_field_numpy, field_at_level, subset_pairs
from .octree import (FULL_DEPTH, Octree, PointSet, build_octree, build_octree_from_shape,
                     input_features, keys_geometry, lookup_keys, points_to_lattice,
                     sample_sdf_targets)

MODES = ("unet", "autoencoder")
LOSSES = ("supervised", "unsupervised")


class ConfigError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


def default_widths(depth: int, scale: float = 1.0) -> dict:
    """196 at depth 3, 128 at depth 4, halving per level below, floored at 8."""
    widths = {}
    for d in range(FULL_DEPTH, depth + 1):
        full = 196 if d == 3 else 128 / 2 ** (d - 4)
        widths[d] = max(8, int(round(full * scale)))
    return widths


@dataclass
class NetConfig:
    depth: int = 5
    widths: dict | None = None
    width_scale: float = 0.25
    n_blocks: int = 1
    mode: str = "unet"
    edge_mode: str = "full"
    loss: str = "supervised"
    lr: float = 1e-3
    lr_end: float = 1e-5
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    lambda_v: float = L.LAMBDA_V
    lambda_g: float = L.LAMBDA_G
    n_surface: int = 2048
    n_volume: int = 2048
    mpu_hidden: int = 32
    split_hidden: int = 64
    in_channels: int = 4

    def __post_init__(self):
        if self.widths is None:
            self.widths = default_widths(self.depth, self.width_scale)
        self.widths = {int(k): int(v) for k, v in self.widths.items()}
        self.validate()

    def validate(self):
        if self.depth < FULL_DEPTH + 1:
            raise ConfigError(f"depth must be at least {FULL_DEPTH + 1}")
        missing = [d for d in range(FULL_DEPTH, self.depth + 1) if d not in self.widths]
        if missing or any(self.widths[d] < 1 for d in self.widths):
            raise ConfigError(f"invalid width table {self.widths} (missing depths {missing})")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.edge_mode not in EDGE_MODES:
            raise ConfigError(f"edge_mode must be one of {EDGE_MODES}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.n_blocks < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("n_blocks, batch_size and epochs must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = {str(k): v for k, v in self.widths.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelState:
    cfg: NetConfig
    params: dict
    adam: T.AdamState = field(default_factory=T.AdamState)
    step: int = 0
    epoch: int = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict:
        out = {f"param/{k}": v.value for k, v in self.params.items()}
        for k in self.adam.m:
            out[f"adam_m/{k}"] = self.adam.m[k]
            out[f"adam_v/{k}"] = self.adam.v[k]
        return out

    def save(self, path):
        meta = {"config": self.cfg.to_dict(), "step": self.step, "epoch": self.epoch,
                "adam_t": self.adam.t}
        T.save_checkpoint(path, self.snapshot(), meta)

    @classmethod
    def load(cls, path) -> "ModelState":
        tensors, meta = T.load_checkpoint(path)
        cfg = NetConfig.from_dict(meta["config"])
        state = build_model(cfg)
        for name, p in state.params.items():
            value = tensors.get(f"param/{name}")
            if value is None or value.shape != p.value.shape:
                raise ValueError(f"checkpoint does not match the network at {name}")
            p.value = value.copy()
        for key, value in tensors.items():
            kind, _, name = key.partition("/")
            if kind == "adam_m":
                state.adam.m[name] = value.copy()
            elif kind == "adam_v":
                state.adam.v[name] = value.copy()
        state.adam.t = meta.get("adam_t", 0)
        state.step = meta.get("step", 0)
        state.epoch = meta.get("epoch", 0)
        return state


# ---------------------------------------------------------------- parameters

def _c_aug(c, cfg):
    return c + (cfg.depth - FULL_DEPTH + 1) + 3


def parameter_shapes(cfg: NetConfig) -> dict:
    """Name -> (shape, fan_in) for every trainable tensor, in a stable order."""
    shapes = {}
    W = cfg.widths
    D = cfg.depth

    def conv(name, c_in, c_out):
        fan = 7 * _c_aug(c_in, cfg)
        shapes[f"{name}.W"] = ((fan, c_out), fan)
        shapes[f"{name}.b"] = ((c_out,), 0)

    def fc(name, c_in, c_out, bias=True):
        shapes[f"{name}.W"] = ((c_in, c_out), c_in)
        if bias:
            shapes[f"{name}.b"] = ((c_out,), 0)

    def blocks(prefix, c):
        for b in range(cfg.n_blocks):
            conv(f"{prefix}.block{b}.conv0", c, c)
            conv(f"{prefix}.block{b}.conv1", c, c)

    conv(f"enc.d{D}.conv_in", cfg.in_channels, W[D])
    for d in range(D, FULL_DEPTH - 1, -1):
        blocks(f"enc.d{d}", W[d])
        if d > FULL_DEPTH:
            fc(f"enc.d{d}.down.merge", 8 * W[d], W[d - 1])
            if W[d] != W[d - 1]:
                fc(f"enc.d{d}.down.proj", W[d], W[d - 1], bias=False)
    for d in range(FULL_DEPTH, D + 1):
        if d > FULL_DEPTH:
            fc(f"dec.d{d}.up.expand", W[d - 1], 8 * W[d])
            if W[d] != W[d - 1]:
                fc(f"dec.d{d}.up.proj", W[d - 1], W[d], bias=False)
        blocks(f"dec.d{d}", W[d])
        if d < D:
            fc(f"dec.d{d}.split.fc0", W[d], cfg.split_hidden)
            fc(f"dec.d{d}.split.fc1", cfg.split_hidden, 2)
        fc(f"dec.d{d}.mpu.fc0", 3 + W[d], cfg.mpu_hidden)
        fc(f"dec.d{d}.mpu.fc1", cfg.mpu_hidden, 1)
    return shapes


def build_model(cfg: NetConfig) -> ModelState:
    """Randomly initialized network (Kaiming-uniform weights, zero biases)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, (shape, fan_in) in parameter_shapes(cfg).items():
        # the field head's output layer starts at zero so the initial field is F = 0
        if fan_in and not name.endswith(".mpu.fc1.W"):
            value = kaiming_uniform(rng, fan_in, shape)
        else:
            value = np.zeros(shape)
        params[name] = T.Tensor(value, requires_grad=True, name=name)
    return ModelState(cfg, params)


def parameter_count(state_or_cfg) -> int:
    if isinstance(state_or_cfg, ModelState):
        return sum(p.value.size for p in state_or_cfg.params.values())
    return sum(int(np.prod(s)) for s, _ in parameter_shapes(state_or_cfg).values())


def _w(params, name) -> ConvWeights:
    return ConvWeights(params[f"{name}.W"], params[f"{name}.b"])


def _head(params, d) -> MpuHead:
    return MpuHead(params[f"dec.d{d}.mpu.fc0.W"], params[f"dec.d{d}.mpu.fc0.b"],
                   params[f"dec.d{d}.mpu.fc1.W"], params[f"dec.d{d}.mpu.fc1.b"])


def mpu_heads(state: ModelState) -> dict:
    return {d: _head(state.params, d) for d in range(FULL_DEPTH, state.cfg.depth + 1)}


# ---------------------------------------------------------------- forward

@dataclass
class ShapeData:
    """One prepared training or inference shape."""
    points: PointSet
    octree: Octree
    hierarchy: list
    features: np.ndarray
    shape: object = None
    target_octree: Octree | None = None
    target_hierarchy: list | None = None
    sdf_samples: tuple | None = None       # (x, G, grad G)
    surface_samples: tuple | None = None   # (x, normal)
    pair_cache: dict = field(default_factory=dict, repr=False)

    def pool_pairs(self, graph: DualGraph):
        """Cover pairs of the whole supervised sample pool (surface then volume)."""
        hit = self.pair_cache.get(graph.level)
        if hit is None or hit[0] is not graph:
            pool = np.concatenate([self.surface_samples[0], self.sdf_samples[0]])
            hit = self.pair_cache[graph.level] = (graph, covering_pairs(graph, pool))
        return hit[1]


def point_features(octree: Octree, points: PointSet) -> np.ndarray:
    if points.normals is not None:
        return input_features(octree, points)
    # no normals: occupancy plus scaled centroid offset (supervised inputs only)
    leaves = octree.leaf_keys()
    D = octree.max_depth
    lat = points_to_lattice(np.clip(points.positions, -0.5, 0.5), D)
    row = lookup_keys(np.concatenate([lat, np.full((len(lat), 1), D)], 1), leaves)
    n = len(leaves)
    count = np.bincount(row, minlength=n).astype(np.float64)
    centers, r = keys_geometry(leaves)
    feats = np.zeros((n, 4))
    has = count > 0
    for k in range(3):
        s = np.bincount(row, points.positions[:, k], minlength=n)
        feats[has, k] = (s[has] / count[has] - centers[has, k]) / r[has]
    feats[has, 3] = 1.0
    return feats


def prepare_shape(points: PointSet, depth: int, shape=None, samples_per_leaf=4,
                  n_surface_pool=20000, rng=None, supervised=True) -> ShapeData:
    """Octree, dual graphs, input features and (optionally) supervision for a shape."""
    rng = np.random.default_rng(0) if rng is None else rng
    octree = build_octree(points, depth)
    data = ShapeData(points, octree, build_hierarchy(octree), point_features(octree, points),
                     shape=shape)
    if shape is not None and supervised:
        target = build_octree_from_shape(shape, depth)
        data.target_octree = target
        data.target_hierarchy = build_hierarchy(target)
        data.sdf_samples = sample_sdf_targets(target, shape, samples_per_leaf, rng)
        data.surface_samples = shape.sample_surface(n_surface_pool, rng)
    return data


@dataclass
class ForwardResult:
    levels: dict            # depth -> LevelFeatures (decoder)
    logits: dict            # depth -> Tensor (N_d, 2), for depths < D
    splits: dict            # depth -> bool array over the level's vertices
    encoder: dict           # depth -> LevelFeatures
    octree: Octree | None = None

    @property
    def depth(self) -> int:
        return max(self.levels)


def _restricted(g: DualGraph, mode: str) -> DualGraph:
    key = ("restricted", mode)
    r = g._cache.get(key)
    if r is None:
        r = g._cache[key] = restrict_edges(g, mode)
    return r


def _conv(state, x, g, name):
    cfg = state.cfg
    plan = conv_plan(_restricted(g, cfg.edge_mode), FULL_DEPTH, cfg.depth)
    return dual_conv(x, plan, _w(state.params, name))


def _res_blocks(state, x, g, prefix):
    for b in range(state.cfg.n_blocks):
        h = T.relu(_conv(state, x, g, f"{prefix}.block{b}.conv0"))
        h = _conv(state, h, g, f"{prefix}.block{b}.conv1")
        x = T.relu(T.add(x, h))
    return x


def encode(state: ModelState, hierarchy, features) -> dict:
    cfg = state.cfg
    D = cfg.depth
    graphs = {g.level: g for g in hierarchy}
    if max(graphs) != D:
        raise ConfigError(f"input octree depth {max(graphs)} != network depth {D}")
    x = T.relu(_conv(state, T.const(features), graphs[D], f"enc.d{D}.conv_in"))
    bank = {}
    for d in range(D, FULL_DEPTH - 1, -1):
        x = _res_blocks(state, x, graphs[d], f"enc.d{d}")
        bank[d] = LevelFeatures(graphs[d], x)
        if d > FULL_DEPTH:
            proj = state.params.get(f"enc.d{d}.down.proj.W")
            x = downsample(bank[d], graphs[d - 1], _w(state.params, f"enc.d{d}.down.merge"),
                           proj).F
    return bank


def forward(state: ModelState, data: ShapeData, decoder="same", forced_splits=None,
            zero_bank=False) -> ForwardResult:
    """Run encoder and decoder.

    decoder: ``"same"`` reuses the input octree, ``"teacher"`` follows the
    ground-truth octree, ``"grow"`` subdivides where the predicted logits say so.
    ``forced_splits`` maps depth -> split labels and overrides any of these.
    """
    cfg = state.cfg
    D = cfg.depth
    forced_splits = forced_splits or {}
    bank = encode(state, data.hierarchy, data.features)
    if zero_bank:
        bank = {d: LevelFeatures(lf.graph, T.mul_scalar(lf.F, 0.0)) for d, lf in bank.items()}
    if decoder == "same":
        ref_octree, ref_graphs = data.octree, data.hierarchy
    elif decoder == "teacher":
        if data.target_octree is None:
            raise ConfigError("teacher forcing needs a ground-truth octree")
        ref_octree, ref_graphs = data.target_octree, data.target_hierarchy
    elif decoder == "grow":
        ref_octree, ref_graphs = None, None
    else:
        raise ConfigError(f"unknown decoder mode {decoder!r}")
    ref = {g.level: g for g in ref_graphs} if ref_graphs else {}

    levels, logits, splits = {}, {}, {}
    g = ref.get(FULL_DEPTH, data.hierarchy[0])
    x = _res_blocks(state, bank[FULL_DEPTH].F, g, f"dec.d{FULL_DEPTH}")
    d = FULL_DEPTH
    while True:
        levels[d] = LevelFeatures(g, x)
        if d >= D:
            break
        logits[d] = predict_split(x, _w(state.params, f"dec.d{d}.split.fc0"),
                                  _w(state.params, f"dec.d{d}.split.fc1"))
        if d in forced_splits:
            split = np.asarray(forced_splits[d], dtype=bool)
        elif decoder == "grow":
            split = split_decision(logits[d].value) & (g.depths == d)
        else:
            split = level_split_labels(ref_octree, g) if d < ref_octree.max_depth \
                else np.zeros(g.num_vertices, dtype=bool)
        splits[d] = split
        if not split.any():
            break
        fine = ref.get(d + 1) if (decoder != "grow" and d not in forced_splits) else None
        if fine is None:
            fine = refine_graph(g, split)
        proj = state.params.get(f"dec.d{d + 1}.up.proj.W")
        up = upsample(LevelFeatures(g, x), split, fine,
                      _w(state.params, f"dec.d{d + 1}.up.expand"), proj)
        if cfg.mode == "unet":
            up = skip_connect(up, bank.get(d + 1))
        d += 1
        g = fine
        x = _res_blocks(state, up.F, g, f"dec.d{d}")

    return ForwardResult(levels, logits, splits, bank, _decoder_octree(levels, splits))


def _decoder_octree(levels, splits) -> Octree:
    node_splits = [np.ones(8 ** d, dtype=bool) for d in range(FULL_DEPTH)]
    for d in sorted(levels):
        g = levels[d].graph
        s = splits.get(d, np.zeros(g.num_vertices, dtype=bool))
        node_splits.append(s[g.depths == d])
    return Octree.from_splits(node_splits)


# ---------------------------------------------------------------- losses

def _level_labels(result: ForwardResult, target: Octree):
    lg, lb = [], []
    for d, logits in sorted(result.logits.items()):
        g = result.levels[d].graph
        rows = np.flatnonzero(g.depths == d)
        labels = level_split_labels(target, g)[rows] if d < target.max_depth \
            else np.zeros(len(rows), dtype=bool)
        lg.append(T.gather_rows(logits, T.Index(rows, logits.shape[0])))
        lb.append(labels.astype(np.int64))
    return lg, lb


def shape_loss(state: ModelState, data: ShapeData, rng: np.random.Generator):
    """Loss of one shape and a dict of its scalar terms."""
    cfg = state.cfg
    heads = mpu_heads(state)
    if cfg.loss == "supervised":
        if data.sdf_samples is None:
            raise ConfigError("supervised training needs SDF samples")
        result = forward(state, data, decoder="teacher")
        xs, ns = data.surface_samples
        xv, gv, dgv = data.sdf_samples
        si = rng.choice(len(xs), size=min(cfg.n_surface, len(xs)), replace=False)
        vi = rng.choice(len(xv), size=min(cfg.n_volume, len(xv)), replace=False)
        x = np.concatenate([xs[si], xv[vi]])
        ids = np.concatenate([si, len(xs) + vi])
        target = np.concatenate([np.zeros(len(si)), gv[vi]])
        target_grad = np.concatenate([ns[si], dgv[vi]])
        vals, grads = [], []
        for d, level in sorted(result.levels.items()):
            pairs = subset_pairs(data.pool_pairs(level.graph), ids)
            v, dv = field_at_level(level, heads[d], x, grad=True, pairs=pairs)
            vals.append(v)
            grads.append(dv)
        reg, vt, gt = L.regression_loss(vals, grads, target, target_grad, cfg.lambda_v,
                                        return_terms=True)
        lg, lb = _level_labels(result, data.target_octree)
        oct_loss = L.octree_loss(lg, lb)
        total = T.add(reg, oct_loss)
        terms = {"octree": float(oct_loss.value), "value": float(vt.value),
                 "gradient": float(gt.value)}
    else:
        if data.points.normals is None:
            raise ConfigError("unsupervised training needs point normals")
        result = forward(state, data, decoder="same")
        pts, nrm = data.points.positions, data.points.normals
        si = rng.choice(len(pts), size=min(cfg.n_surface, len(pts)), replace=False)
        xq = rng.uniform(-0.5, 0.5, (cfg.n_volume, 3))
        sv, sg, qg = [], [], []
        for d, level in sorted(result.levels.items()):
            v, dv = field_at_level(level, heads[d], pts[si], grad=True)
            _, dq = field_at_level(level, heads[d], xq, grad=True)
            sv.append(v)
            sg.append(dv)
            qg.append(dq)
        total, vt, nt, ft = L.gradient_loss(sv, sg, nrm[si], qg, cfg.lambda_v, cfg.lambda_g,
                                            return_terms=True)
        terms = {"value": float(vt.value), "normal": float(nt.value), "flat": float(ft.value)}
    return total, terms


# ---------------------------------------------------------------- training

def linear_lr(step: int, total: int, lr0: float, lr1: float) -> float:
    if total <= 1:
        return lr0
    return lr0 + (lr1 - lr0) * min(step, total - 1) / (total - 1)


class RunLog:
    """In-memory loss history, optionally mirrored to a CSV file."""

    def __init__(self, path=None):
        self.rows = []
        self.path = path
        self._fields = None

    def append(self, row: dict):
        self.rows.append(row)
        if self.path is None:
            return
        new = self._fields is None
        if new:
            self._fields = list(row)
        with open(self.path, "w" if new else "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self._fields)
            if new:
                w.writeheader()
            w.writerow(row)


def _optimize(state: ModelState, dataset, n_steps: int, lr_fn, log: RunLog | None,
              dump_path=None, order_fn=None):
    cfg = state.cfg
    t0 = time.perf_counter()
    for _ in range(n_steps):
        batch = order_fn(state.step) if order_fn else [0]
        state.zero_grad()
        total_loss = 0.0
        terms_acc = {}
        for idx in batch:
            rng = np.random.default_rng([cfg.seed, state.step, idx])
            with T.Tape() as tape:
                loss, terms = shape_loss(state, dataset[idx], rng)
                scaled = T.mul_scalar(loss, 1.0 / len(batch))
                if not np.isfinite(loss.value):
                    if dump_path is not None:
                        state.save(dump_path)
                    raise NumericalError(
                        f"non-finite loss at step {state.step}: {terms}"
                        + (f" (state dumped to {dump_path})" if dump_path else ""))
                tape.backward(scaled)
            total_loss += float(loss.value) / len(batch)
            for k, v in terms.items():
                terms_acc[k] = terms_acc.get(k, 0.0) + v / len(batch)
        lr = lr_fn(state.step)
        grads = {k: p.grad for k, p in state.params.items()}
        T.adam_step(state.params, grads, state.adam, lr)
        if log is not None:
            log.append({"iter": state.step, "loss": total_loss, **terms_acc, "lr": lr,
                        "wall_time": time.perf_counter() - t0})
        state.step += 1
    return state


def total_steps(cfg: NetConfig, n_shapes: int) -> int:
    return cfg.epochs * math.ceil(n_shapes / cfg.batch_size)


def train(state: ModelState, dataset, cfg: NetConfig | None = None, log: RunLog | None = None,
          dump_path=None) -> ModelState:
    """Adam with a linear learning-rate decay from ``lr`` to ``lr_end``.

    Shapes are shuffled every epoch; ``batch_size`` shapes are accumulated per
    step. Resuming a partially trained state continues the schedule.
    """
    cfg = cfg or state.cfg
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * per_epoch

    def order_fn(step):
        epoch, k = divmod(step, per_epoch)
        perm = np.random.default_rng([cfg.seed, 7919, epoch]).permutation(len(dataset))
        return perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]

    remaining = max(total - state.step, 0)
    _optimize(state, dataset, remaining, lambda s: linear_lr(s, total, cfg.lr, cfg.lr_end),
              log, dump_path, order_fn)
    state.epoch = state.step // per_epoch
    return state


def finetune(state: ModelState, data: ShapeData, iters=2000, lr=1e-4,
             log: RunLog | None = None, dump_path=None) -> ModelState:
    """Continue optimizing on a single shape at a constant learning rate."""
    return _optimize(state, [data], iters, lambda s: lr, log, dump_path)


def split_accuracy(result: ForwardResult, target: Octree) -> float:
    """Fraction of decoder nodes whose predicted split matches the target octree."""
    correct = total = 0
    for d, logits in result.logits.items():
        g = result.levels[d].graph
        rows = np.flatnonzero(g.depths == d)
        pred = split_decision(logits.value)[rows]
        if d < target.max_depth:
            idx = lookup_keys(g.keys[rows], target.node_keys(d))
            truth = np.where(idx >= 0, target.split[d][np.maximum(idx, 0)], False)
        else:
            truth = np.zeros(len(rows), dtype=bool)
        correct += int(np.sum(pred == truth))
        total += len(rows)
    return correct / max(total, 1)


def field_function(state: ModelState, result: ForwardResult, level=None):
    """Numpy closure evaluating the decoder field at the chosen (default deepest) level."""
    d = result.depth if level is None else level
    head = _head(state.params, d)
    lf = result.levels[d]
    return lambda x: eval_field_numpy(lf, head, x)
