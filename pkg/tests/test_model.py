import numpy as np
import pytest

from adaptive_volumes import tape as T
from adaptive_volumes.model import (ConfigError, ModelState, NetConfig, NumericalError, RunLog,
                                    _optimize, build_model, default_widths, field_function,
                                    finetune, forward, linear_lr, parameter_count,
                                    point_features, prepare_shape, shape_loss, split_accuracy,
                                    train)
from adaptive_volumes.octree import PointSet
from adaptive_volumes.shapes import Sphere


def small_cfg(**kw):
    base = dict(depth=4, widths={3: 6, 4: 4}, mpu_hidden=8, split_hidden=8, n_surface=64,
                n_volume=64, epochs=3)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture(scope="module")
def sphere_data():
    rng = np.random.default_rng(0)
    shape = Sphere()
    p, n = shape.sample_surface(400, rng)
    return prepare_shape(PointSet(p, n), 4, shape, samples_per_leaf=1, n_surface_pool=500,
                         rng=rng)


def values(state):
    return {k: p.value.copy() for k, p in state.params.items()}


def same_params(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def hand_count(a, b, n=1, cin=4, H=8, S=8):
    """Parameter count of a depth-4 network with widths a at depth 3, b at depth 4."""
    def conv(i, o):
        return 7 * (i + 2 + 3) * o + o
    proj = a * b if a != b else 0
    enc = conv(cin, b) + 2 * n * conv(b, b) + (8 * b * a + a) + proj + 2 * n * conv(a, a)
    dec = 2 * n * conv(a, a) + (a * S + S + 2 * S + 2) + (3 + a) * H + H + H + 1
    dec += a * 8 * b + 8 * b + proj + 2 * n * conv(b, b) + (3 + b) * H + H + H + 1
    return enc + dec


@pytest.mark.parametrize("a,b", [(6, 4), (5, 5)])
def test_parameter_count_matches_hand_formula(a, b):
    cfg = small_cfg(widths={3: a, 4: b})
    assert parameter_count(cfg) == hand_count(a, b)
    assert parameter_count(build_model(cfg)) == hand_count(a, b)


def test_default_widths():
    assert default_widths(6) == {3: 196, 4: 128, 5: 64, 6: 32}
    assert default_widths(5, 0.25) == {3: 49, 4: 32, 5: 16}
    assert default_widths(9, 0.25)[9] == 8


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown"):
        NetConfig.from_dict({"depth": 5, "colour": 1})
    with pytest.raises(ConfigError):
        NetConfig(mode="transformer")
    with pytest.raises(ConfigError):
        NetConfig(depth=3)
    with pytest.raises(ConfigError):
        NetConfig(depth=5, widths={3: 4, 4: 4})
    cfg = small_cfg()
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_initial_field_is_zero(sphere_data):
    state = build_model(small_cfg())
    r = forward(state, sphere_data)
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (50, 3))
    assert np.all(field_function(state, r)(x) == 0.0)


def test_decoder_modes_follow_their_octrees(sphere_data):
    state = build_model(small_cfg())
    same = forward(state, sphere_data, decoder="same")
    teacher = forward(state, sphere_data, decoder="teacher")
    for r, graphs in [(same, sphere_data.hierarchy), (teacher, sphere_data.target_hierarchy)]:
        assert sorted(r.levels) == [3, 4]
        for g in graphs:
            assert r.levels[g.level].graph.vertex_set() == g.vertex_set()
    grown = forward(state, sphere_data, decoder="grow")
    assert np.array_equal(grown.splits[3], np.argmax(grown.logits[3].value, 1) == 1)
    with pytest.raises(ConfigError):
        forward(state, sphere_data, decoder="oracle")


def test_forced_no_split_stops_at_coarsest_level(sphere_data):
    state = build_model(small_cfg())
    r = forward(state, sphere_data, decoder="grow", forced_splits={3: np.zeros(512, bool)})
    assert r.depth == 3 and sorted(r.levels) == [3]
    assert r.octree.leaf_keys().shape[0] == 512


def test_skip_connections(sphere_data):
    unet = build_model(small_cfg(mode="unet"))
    auto = build_model(small_cfg(mode="autoencoder"))
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (40, 3))
    for s in (unet, auto):
        s.params["dec.d4.mpu.fc1.W"].value[:] = 1.0
    u = forward(unet, sphere_data)
    a = forward(auto, sphere_data)
    assert not np.allclose(u.levels[4].F.value, a.levels[4].F.value)
    # with a zeroed encoder bank the skip adds nothing and both modes coincide
    uz = forward(unet, sphere_data, zero_bank=True)
    az = forward(auto, sphere_data, zero_bank=True)
    assert np.array_equal(uz.levels[4].F.value, az.levels[4].F.value)
    assert np.array_equal(field_function(unet, uz)(x), field_function(auto, az)(x))


def test_split_accuracy_of_teacher_labels(sphere_data):
    state = build_model(small_cfg())
    r = forward(state, sphere_data, decoder="teacher")
    for d, lg in r.logits.items():
        lg.value[:] = np.where(r.splits[d][:, None], [-9.0, 9.0], [9.0, -9.0])
    assert split_accuracy(r, sphere_data.target_octree) == 1.0


def test_linear_lr_endpoints():
    assert linear_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert np.isclose(linear_lr(99, 100, 1e-3, 1e-5), 1e-5, rtol=1e-12)
    assert linear_lr(5, 1, 2.0, 1.0) == 2.0


def test_training_is_deterministic_and_reduces_loss(sphere_data):
    cfg = small_cfg(epochs=25, lr=3e-3, lr_end=1e-3)
    a, b = build_model(cfg), build_model(cfg)
    assert same_params(values(a), values(b))
    la, lb = RunLog(), RunLog()
    train(a, [sphere_data], log=la)
    train(b, [sphere_data], log=lb)
    assert same_params(values(a), values(b))
    assert [r["loss"] for r in la.rows] == [r["loss"] for r in lb.rows]
    assert a.step == 25 and a.epoch == 25
    first = np.mean([r["loss"] for r in la.rows[:3]])
    last = np.mean([r["loss"] for r in la.rows[-3:]])
    assert last < first


def test_zero_epochs_and_finished_runs_do_nothing(sphere_data):
    state = build_model(small_cfg(epochs=0))
    before = values(state)
    train(state, [sphere_data])
    assert same_params(before, values(state)) and state.step == 0
    state = build_model(small_cfg(epochs=2))
    train(state, [sphere_data])
    done = values(state)
    train(state, [sphere_data])
    assert same_params(done, values(state)) and state.step == 2


def test_finetune_zero_iterations_is_identity(sphere_data):
    state = build_model(small_cfg())
    before = values(state)
    finetune(state, sphere_data, iters=0)
    assert same_params(before, values(state))


def test_finetune_equals_train_with_constant_schedule(sphere_data):
    a = build_model(small_cfg(epochs=4, lr=2e-4, lr_end=2e-4))
    b = build_model(small_cfg(epochs=4, lr=2e-4, lr_end=2e-4))
    train(a, [sphere_data])
    finetune(b, sphere_data, iters=4, lr=2e-4)
    assert same_params(values(a), values(b))


def test_checkpoint_roundtrip_reproduces_forward(sphere_data, tmp_path):
    state = build_model(small_cfg(epochs=2))
    train(state, [sphere_data])
    state.save(tmp_path / "m.avck")
    back = ModelState.load(tmp_path / "m.avck")
    assert back.cfg == state.cfg and back.step == 2 and back.adam.t == state.adam.t
    assert same_params(values(state), values(back))
    x = np.random.default_rng(2).uniform(-0.5, 0.5, (30, 3))
    f1 = field_function(state, forward(state, sphere_data))(x)
    f2 = field_function(back, forward(back, sphere_data))(x)
    assert f1.tobytes() == f2.tobytes()


def test_resume_matches_uninterrupted_run(sphere_data, tmp_path):
    cfg = small_cfg(epochs=4)
    full = build_model(cfg)
    train(full, [sphere_data])
    part = build_model(cfg)
    # interrupt after two of the four scheduled steps
    _optimize(part, [sphere_data], 2, lambda s: linear_lr(s, 4, cfg.lr, cfg.lr_end), None,
              order_fn=lambda s: [0])
    part.save(tmp_path / "p.avck")
    resumed = ModelState.load(tmp_path / "p.avck")
    train(resumed, [sphere_data])
    assert same_params(values(full), values(resumed))


def test_non_finite_loss_aborts_with_dump(sphere_data, tmp_path):
    state = build_model(small_cfg())
    state.params["dec.d3.mpu.fc1.b"].value[:] = np.nan
    with pytest.raises(NumericalError, match="non-finite"):
        train(state, [sphere_data], dump_path=tmp_path / "dump.avck")
    assert (tmp_path / "dump.avck").exists()


def test_unsupervised_loss_uses_input_octree(sphere_data):
    state = build_model(small_cfg(loss="unsupervised"))
    with T.Tape():
        loss, terms = shape_loss(state, sphere_data, np.random.default_rng(0))
    # zero initial field: only the normal term contributes, one per level
    assert set(terms) == {"value", "normal", "flat"}
    assert terms["value"] == 0.0 and np.isclose(terms["normal"], 2.0)
    bare = prepare_shape(PointSet(sphere_data.points.positions), 4)
    with pytest.raises(ConfigError, match="normals"):
        shape_loss(state, bare, np.random.default_rng(0))


def test_point_features_without_normals():
    p = np.array([[0.01, 0.02, 0.03], [0.3, 0.3, 0.3]])
    data = prepare_shape(PointSet(p), 4)
    f = point_features(data.octree, data.points)
    assert f.shape == (len(data.octree.leaf_keys()), 4)
    assert f[:, 3].sum() == 2
    assert np.all(np.abs(f[:, :3]) <= 0.5)
