import numpy as np
import pytest

from localbehavior.core_data import ExperimentConfig
from localbehavior.model import prepare_graphs
from localbehavior.model.raster_nets import prepare_raster_samples
from localbehavior.model.train import (DivergenceDetected, lr_at, predict, train, train_baseline, train_student,
                                       train_teacher)
from localbehavior.synth import WorldSpec, make_benchmark

CFG = ExperimentConfig(feature_dim=16, n_heads=2, n_modes=3, epochs=2, batch_size=8, map_radius=15.0,
                       lr_decay_epoch=1)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(WorldSpec(n_scenes=(10, 2, 6), seed=2))


@pytest.fixture(scope="module")
def data(bench):
    tr = prepare_graphs(bench.splits["train"], bench.world.lane_map, bench.dbs["train"], CFG)
    te = prepare_graphs(bench.splits["test"], bench.world.lane_map, bench.dbs["test"], CFG)
    return tr, te


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(data[0], CFG).params


def _same_params(a, b):
    return a.names() == b.names() and all(a[n].tobytes() == b[n].tobytes() for n in a.names())


def test_lr_schedule():
    c = ExperimentConfig(lr=1e-3, lr_decay_epoch=3, lr_decay_to=1e-4)
    assert [lr_at(c, e) for e in range(5)] == [1e-3, 1e-3, 1e-3, 1e-4, 1e-4]


def test_one_epoch_smoke(data):
    r = train_baseline(data[0], CFG, epochs=1)
    assert len(r.history) == 1 and np.isfinite(r.history[0].loss)
    assert r.params.meta["mode"] == "baseline" and r.params.meta["epochs"] == 1


def test_same_seed_same_parameters(data):
    a = train_teacher(data[0], CFG).params
    b = train_teacher(data[0], CFG).params
    assert _same_params(a, b)
    c = train_teacher(data[0], CFG, seed=1).params
    assert not _same_params(a, c)


def test_student_zero_lambda_reduces_to_prediction_loss(data, teacher):
    r = train_student(data[0], teacher, CFG.with_(lambda_kd=0.0))
    for h in r.history:
        assert h.loss == h.pred and h.kd == 0.0 and h.kd_raw > 0


def test_student_keeps_teacher_frozen(data, teacher):
    before = teacher.copy()
    r = train_student(data[0], teacher, CFG)
    assert _same_params(before, teacher)
    assert all(h.kd > 0 for h in r.history)
    assert r.params.meta["mode"] == "lbf"


def test_student_needs_teacher(data):
    with pytest.raises(ValueError):
        train(data[0], CFG, "lbf")
    with pytest.raises(ValueError):
        train([], CFG, "baseline")


def test_self_distillation_from_baseline_teacher(data):
    t = train_baseline(data[0], CFG, epochs=1).params
    r = train(data[0], CFG.with_(use_estimator=False), "lbf", teacher=t, teacher_mode="baseline", epochs=1)
    assert np.isfinite(r.history[0].kd)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(data):
    bad = [g for g in data[0][:4]]
    g0 = bad[0]
    bad[0] = type(g0)(**{**g0.__dict__, "gt_future": np.full_like(g0.gt_future, 1e308)})
    with pytest.raises(DivergenceDetected):
        train_baseline(bad, CFG, epochs=1)


def test_predict_shapes_and_scores(data, teacher):
    modes, scores = predict(teacher, CFG, data[1], "lba", batch_size=5)
    assert modes.shape == (len(data[1]), 3, 12, 2)
    assert np.abs(scores.sum(axis=1) - 1).max() <= 1e-9
    # batching does not change results
    m2, s2 = predict(teacher, CFG, data[1], "lba", batch_size=64)
    np.testing.assert_allclose(modes, m2, atol=1e-9)


def test_raster_pathway_trains(bench):
    cfg = CFG.with_(pathway="raster", raster_size=32, raster_patch=8, raster_resolution=1.0, epochs=1)
    tr = prepare_raster_samples(bench.splits["train"], bench.world.lane_map, bench.dbs["train"], cfg)
    t = train_teacher(tr, cfg).params
    s = train_student(tr, t, cfg)
    assert np.isfinite(s.history[0].loss) and s.history[0].kd > 0
    modes, scores = predict(s.params, cfg, tr[:5], "lbf")
    assert modes.shape == (5, 3, 12, 2)
