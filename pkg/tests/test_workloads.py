"""Training drivers checked against plain-float references.

The gradient oracle is finite differences on the float cross-entropy; the
trajectory oracle is the integer PlainMatrix backend, which shares no slicing
code with the hardware path.
"""

import math

import numpy as np
import pytest

from xbarsim.errors import ValidationError
from xbarsim.fixedpoint import Q8_8
from xbarsim.model import LayerSpec, ModelSpec
from xbarsim.slicing import SliceConfig
from xbarsim.workloads import (Dataset, TrainRun, dataset_for, evaluate,
                               gaussian_clusters, init_weights, loss_and_grad,
                               make_model, paired_clusters, train)


def tiny_model():
    return ModelSpec([LayerSpec("dense", in_dim=12, out_dim=10,
                                activation="relu"),
                      LayerSpec("dense", in_dim=10, out_dim=6)], name="tiny")


def tiny_run(**kw):
    model = tiny_model()
    ds = gaussian_clusters(6, 12, n_train=96, n_test=48, seed=5)
    base = dict(algo="sgd", steps=24, lr_shift=6, seed=5, dataset=ds,
                crs_period=64)
    base.update(kw)
    return TrainRun(model, **base)


# ------------------------------------------------------------ loss gradient

def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(20):
        z = Q8_8.quantize(rng.normal(0.0, 1.5, size=8))
        onehot = np.zeros(8, dtype=np.int64)
        onehot[rng.integers(0, 8)] = Q8_8.one
        loss, grad = loss_and_grad(z, onehot)

        def f(zq):
            p = np.exp(zq / 256.0 - np.max(zq / 256.0))
            p /= p.sum()
            return -math.log(p[int(np.argmax(onehot))])

        assert math.isclose(loss, f(z), rel_tol=1e-9)
        eps = 1.0
        for j in range(8):
            zp, zm = z.copy(), z.copy()
            zp[j] += eps
            zm[j] -= eps
            fd = (f(zp) - f(zm)) / (2 * eps / 256.0)
            # grad is the Q8.8 update direction: minus the loss slope,
            # with half a count of quantization slack
            assert abs(grad[j] / 256.0 + fd) < 3e-3 + 2e-3 * abs(fd)


def test_loss_grad_sums_to_zero():
    # softmax minus onehot: counts must cancel up to rounding
    rng = np.random.default_rng(13)
    z = Q8_8.quantize(rng.normal(0.0, 2.0, size=16))
    onehot = np.zeros(16, dtype=np.int64)
    onehot[3] = Q8_8.one
    _, grad = loss_and_grad(z, onehot)
    assert abs(int(grad.sum())) <= 16


# ----------------------------------------------------------------- datasets

def test_gaussian_clusters_shapes_and_format():
    ds = gaussian_clusters(6, 12, n_train=64, n_test=32, seed=2)
    assert ds.x_train.shape == (64, 12) and ds.x_test.shape == (32, 12)
    assert ds.x_train.dtype == np.int64
    assert ds.n_classes == 6 and ds.dim == 12
    assert set(np.unique(ds.y_train)) <= set(range(6))
    oh = ds.onehot(3)
    assert oh[3] == Q8_8.one and oh.sum() == Q8_8.one


def test_paired_clusters_twin_structure():
    ds = paired_clusters(n_pairs=4, dim=32, n_train=64, n_test=32, seed=7,
                         support=5)
    assert ds.n_classes == 8 and ds.dim == 32
    # twins share the sparse support: average inputs per class, compare masks
    means = np.stack([ds.x_train[ds.y_train == c].mean(axis=0)
                      for c in range(8)])
    for p in range(4):
        a, b = np.abs(means[2 * p]), np.abs(means[2 * p + 1])
        on_a = set(np.argsort(a)[-5:])
        on_b = set(np.argsort(b)[-5:])
        assert len(on_a & on_b) >= 3


def test_paired_clusters_validation():
    with pytest.raises(ValidationError):
        paired_clusters(n_pairs=0)
    with pytest.raises(ValidationError):
        paired_clusters(dim=8, support=9)


def test_dataset_roundtrip(tmp_path):
    ds = gaussian_clusters(4, 10, n_train=32, n_test=16, seed=9)
    path = tmp_path / "ds.npz"
    ds.save(path)
    back = Dataset.load(path)
    assert np.array_equal(back.x_train, ds.x_train)
    assert np.array_equal(back.y_test, ds.y_test)
    assert back.n_classes == 4


def test_dataset_for_matches_model_shape():
    for name in ("mlp2", "mlp128"):
        model = make_model(name)
        ds = dataset_for(model, seed=1, n_train=64, n_test=16)
        assert ds.dim == model.input_len
        assert ds.n_classes == model.output_len


# ------------------------------------------------------------------- models

def test_model_registry_shapes():
    assert make_model("mlp2").input_len == 64
    assert make_model("mlp2").output_len == 32
    assert make_model("mlp4").input_len == 1024
    assert make_model("mlp4").output_len == 10
    assert make_model("cnn4").output_len == 10
    with pytest.raises(ValidationError):
        make_model("mlp3")


def test_make_model_passes_spec_through():
    spec = tiny_model()
    assert make_model(spec) is spec


def test_init_weights_deterministic_and_scaled():
    model = tiny_model()
    a = init_weights(model, seed=4, scale=4.0)
    b = init_weights(model, seed=4, scale=4.0)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    small = init_weights(model, seed=4, scale=0.5)
    assert np.std(small[0]) < np.std(a[0])


# ----------------------------------------------------------- run validation

def test_trainrun_validation():
    with pytest.raises(ValidationError):
        tiny_run(steps=0)
    with pytest.raises(ValidationError):
        tiny_run(lr_shift=32)
    with pytest.raises(ValidationError):
        tiny_run(variant=4)
    with pytest.raises(ValidationError):
        tiny_run(algo="adam")
    with pytest.raises(ValidationError):
        tiny_run(algo="minibatch:x")
    with pytest.raises(ValidationError):
        tiny_run(algo=0)


def test_algo_parsing():
    assert tiny_run(algo="sgd").batch == 1
    assert tiny_run(algo="minibatch:8").batch == 8
    assert tiny_run(algo=4).batch == 4


def test_dataset_shape_mismatch_raises():
    run = tiny_run(dataset=gaussian_clusters(6, 13, n_train=32, n_test=16))
    with pytest.raises(ValidationError):
        train(run, "full_precision_oracle")


# -------------------------------------------------------------- train loop

def test_oracle_training_learns_separable_data():
    run = tiny_run(steps=400, dataset=gaussian_clusters(
        6, 12, n_train=256, n_test=128, seed=5, center_scale=3.0, noise=0.3))
    r = train(run, "full_precision_oracle")
    assert r.final_accuracy > 0.8
    assert r.loss[-20:].mean() < r.loss[:20].mean()


def test_frozen_lr_keeps_weights_fixed():
    run = tiny_run(lr_shift=None, steps=10)
    r = train(run, "full_precision_oracle")
    w0 = init_weights(run.model, seed=run.seed, scale=run.init_scale)
    assert all(np.array_equal(a, b) for a, b in zip(r.weights, w0))


def test_sliced_with_wide_carry_matches_oracle_exactly():
    # generous carry never clamps, so the sliced path must reproduce the
    # integer trajectory bit for bit
    cfg = SliceConfig([(2, 12)] + [(3, 12)] * 10)
    run = tiny_run(steps=60, slices=cfg, crs_period=16)
    ro = train(tiny_run(steps=60, crs_period=16), "full_precision_oracle")
    rs = train(run, "functional_sliced")
    assert np.array_equal(ro.loss, rs.loss)
    assert all(np.array_equal(a, b) for a, b in zip(ro.weights, rs.weights))
    eng = rs.engine
    assert sum(m.stats.total_saturation_events
               for m in eng.store.mats.values()) == 0


def test_functional_and_compiled_agree_bit_exact():
    kw = dict(steps=16, crs_period=8, lr_shift=5)
    rf = train(tiny_run(**kw), "functional_sliced")
    rc = train(tiny_run(**kw), "compiled_simulator")
    assert np.array_equal(rf.loss, rc.loss)
    assert all(np.array_equal(a, b) for a, b in zip(rf.weights, rc.weights))


def test_crs_steps_follow_period():
    run = tiny_run(steps=25, crs_period=8)
    r = train(run, "full_precision_oracle")
    assert r.crs_steps == [8, 16, 24]


def test_eval_every_and_curves():
    run = tiny_run(steps=20, eval_every=10)
    r = train(run, "full_precision_oracle")
    assert [s for s, _ in r.accuracy] == [10, 20]
    assert len(r.loss) == 20 and len(r.saturation) == 20
    doc = r.to_dict()
    assert doc["run"]["model"] == "tiny"
    assert len(doc["loss"]) == 20


def test_track_updates_bounds_step_size():
    run = tiny_run(steps=12, track_updates=True)
    r = train(run, "functional_sliced")
    assert r.update_ratio.shape == (12,)
    assert np.all(r.update_ratio >= 0.0) and np.all(r.update_ratio < 1.0)


def test_minibatch_consumes_samples_faster():
    r = train(tiny_run(steps=12, algo="minibatch:4", crs_period=16),
              "full_precision_oracle")
    assert r.crs_steps == [4, 8]


def test_evaluate_chunking_invariant():
    run = tiny_run()
    ds = run.dataset
    r = train(run, "full_precision_oracle")
    eng = r.engine
    assert evaluate(eng, ds, chunk=7) == evaluate(eng, ds, chunk=48)


def test_compiled_backend_reports_energy():
    r = train(tiny_run(steps=6), "compiled_simulator")
    doc = r.to_dict()
    assert doc["total_energy_pj"] > 0
    assert doc["cycles"] > 0
    assert "opa" in doc["energy_pj"] and "mvm" in doc["energy_pj"]
