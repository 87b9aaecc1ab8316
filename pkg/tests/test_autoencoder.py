import math

import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from fd import central_diff, rel_error
from trafficdiff.autoencoder import (LatentGrid, SceneAutoencoder, cosine_lr, kl_grad, kl_loss,
                                     pool_map, reparameterize, vae_loss)
from trafficdiff.detection import BoxGrid, detection_loss
from trafficdiff.geometry import OrientedBox, RasterSpec
from trafficdiff.raster import Scene, synth_scene, template_map


def tiny_scenes():
    road = template_map("straight-road")
    return [
        Scene(road, (OrientedBox((0, 0), 0.02, 4.2, 1.9), OrientedBox((5.5, 4.1), 3.1, 4.6, 2.0))),
        Scene(road, (OrientedBox((0, 0), -0.05, 5.0, 2.1),)),
        Scene(road, (OrientedBox((0, 0), 0.0, 4.5, 2.0), OrientedBox((-5.0, 0.2), 0.04, 4.1, 1.8))),
    ]


def tiny_ae(**kw):
    params = dict(raster_size=16, extent_m=16.0, downsample=2, grid_size=4, encoder_hidden=(8,),
                  decoder_hidden=(16,), n_steps=0, random_state=1)
    params.update(kw)
    return SceneAutoencoder(**params)


def test_reparameterize_examples():
    eps = np.full((2, 2), -0.25)
    assert not reparameterize(np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2))).any()
    np.testing.assert_array_equal(reparameterize(np.zeros(3), np.ones(3), np.arange(3.0)),
                                  np.arange(3.0))
    np.testing.assert_array_equal(reparameterize(np.full((2, 2), 0.5), np.full((2, 2), 2.0), eps), 0)
    with pytest.raises(ValueError):
        reparameterize(np.zeros(2), np.ones(3), np.zeros(2))


def test_kl_examples():
    assert kl_loss(np.zeros((4, 2, 2)), np.ones((4, 2, 2))) == 0.0
    assert kl_loss([1.0], [1.0]) == pytest.approx(0.5)
    assert kl_loss([0.0], [2.0]) == pytest.approx(0.5 * (4 - 1 - math.log(4)))
    with pytest.raises(ValueError):
        kl_loss([0.0], [0.0])


def test_kl_nonnegative(rng):
    for _ in range(100):
        m, s = rng.normal(size=5), np.exp(rng.normal(size=5))
        assert kl_loss(m, s) >= 0


def test_kl_gradient(rng):
    m, s = rng.normal(size=60), np.exp(rng.normal(size=60))
    dm, ds = kl_grad(m, s)
    num_m = [central_diff(lambda: kl_loss(m, s), m, i) for i in range(60)]
    num_s = [central_diff(lambda: kl_loss(m, s), s, i) for i in range(60)]
    assert rel_error(dm, num_m).max() < 1e-5
    assert rel_error(ds, num_s).max() < 1e-5


def test_vae_loss_beta_zero_is_detection(rng):
    grid = BoxGrid(rng.normal(size=(7, 4, 4)), RasterSpec(4, 4, 16.0))
    gts = [OrientedBox((1, 1), 0.3, 4, 2)]
    m, s = rng.normal(size=8), np.exp(rng.normal(size=8))
    loss, _, parts = vae_loss(grid, gts, m, s, 0.0)
    assert loss == detection_loss(grid, gts)[0]
    loss_b, _, parts_b = vae_loss(grid, gts, m, s, 0.1)
    assert loss_b == pytest.approx(loss + 0.1 * kl_loss(m, s))


def test_latent_grid_invariants():
    LatentGrid(np.zeros((4, 8, 8)), std=np.ones((4, 8, 8)), input_size=64, downsample=3)
    with pytest.raises(ValueError):
        LatentGrid(np.zeros((4, 8, 8)), input_size=64, downsample=2)
    with pytest.raises(ValueError):
        LatentGrid(np.zeros((4, 2, 2)), std=np.zeros((4, 2, 2)))


def test_pool_map():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_allclose(pool_map(x, 2), [2.5, 4.5, 10.5, 12.5])
    with pytest.raises(ValueError):
        pool_map(x, 3)


def test_cosine_lr():
    assert cosine_lr(1.0, 5, None) == 1.0
    assert cosine_lr(1.0, 0, 10) == pytest.approx(1.0)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.01)
    assert cosine_lr(1.0, 50, 10) == pytest.approx(0.01)


def test_shapes_and_defaults():
    ae = SceneAutoencoder()
    assert ae.latent_shape == (4, 8, 8)
    assert ae.map_feature_dim == 192
    assert ae.get_params()["beta_kl"] == 1e-4
    with pytest.raises(NotFittedError):
        ae.encode(np.zeros((1, 3, 64, 64)))


def test_zero_network_encode_decode():
    ae = tiny_ae().fit(tiny_scenes())
    for p in ae.params_:
        p[...] = 0.0
    mean, std = ae.encode(np.zeros((2, 3, 16, 16)))
    assert not mean.any() and (std == 1.0).all()
    out = ae.decode(np.zeros((2, 64)), tiny_scenes()[:2])
    assert np.ptp(out[:, 0]) == 0.0


def test_encode_shape_errors():
    ae = tiny_ae().fit(tiny_scenes())
    from trafficdiff.nn import ShapeError
    with pytest.raises(ShapeError):
        ae.encode(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError):
        ae.decode(np.zeros((1, 5)), tiny_scenes()[:1])
    with pytest.raises(ShapeError):
        ae.decode(np.zeros((2, 64)), tiny_scenes()[:1])


def test_std_positive_and_deterministic(rng):
    ae = tiny_ae().fit(tiny_scenes())
    x = rng.normal(size=(3, 3, 16, 16)) * 50
    mean, std = ae.encode(x)
    assert (std > 0).all()
    m2, s2 = tiny_ae().fit(tiny_scenes()).encode(x)
    assert mean.tobytes() == m2.tobytes() and std.tobytes() == s2.tobytes()


def test_decode_depends_on_map():
    ae = tiny_ae(n_steps=30, learning_rate=3e-3).fit(tiny_scenes())
    z = np.zeros((1, 64))
    a = ae.decode(z, [Scene(template_map("straight-road"))])
    b = ae.decode(z, [Scene(template_map("parking-row"))])
    assert np.abs(a - b).max() > 1e-6


def test_vae_gradient_finite_difference(rng):
    ae = tiny_ae().fit(tiny_scenes())
    scenes = tiny_scenes()
    rasters = ae.agent_rasters(scenes)
    feats = ae.map_features(scenes)
    gts = [list(s.agents) for s in scenes]
    eps = rng.normal(size=(3, ae.latent_dim))
    _, grads, parts = ae.batch_loss(rasters, feats, gts, eps)
    asg = parts["assignments"]

    def f():
        return ae.batch_loss(rasters, feats, gts, eps, asg)[0]

    params = ae.params_
    errs = []
    checked = 0
    while checked < 60:
        k = rng.integers(len(params))
        i = rng.integers(params[k].size)
        if grads[k].reshape(-1)[i] == 0.0 and k == 0:
            continue  # encoder weights on empty pixels are structurally zero
        errs.append(rel_error(grads[k].reshape(-1)[i], central_diff(f, params[k], i)))
        checked += 1
    assert max(errs) < 1e-5


def test_training_reduces_loss():
    scenes = [synth_scene(s, "straight-road", 0.3) for s in range(4)]
    ae = SceneAutoencoder(n_steps=60, learning_rate=2e-3, random_state=0).fit(scenes)
    first, last = ae.loss_log_[0][3], ae.loss_log_[-1][3]
    assert last < 0.5 * first
    assert len(ae.transform(scenes)) == 4
    assert all(isinstance(b, OrientedBox) for boxes in ae.predict(scenes) for b in boxes)


def test_warm_start_continues():
    scenes = tiny_scenes()
    a = tiny_ae(n_steps=10).fit(scenes)
    b = tiny_ae(n_steps=5, warm_start=True).fit(scenes).fit(scenes)
    assert a.n_steps_done_ == b.n_steps_done_ == 10
    for p, q in zip(a.params_, b.params_):
        assert p.tobytes() == q.tobytes()
