import hashlib

import numpy as np
import pytest

from edgestorm import edgenet
from edgestorm import tensor as T
from edgestorm.errors import RejectedInput

LN2 = np.log(2.0)


def _image(rng, h=32, w=32):
    return rng.integers(0, 256, (h, w, 3)).astype(np.uint8)


@pytest.mark.parametrize("extents", [(32, 32), (48, 48), (64, 64), (32, 64)])
def test_forward_contract(extents, rng):
    out = edgenet.EdgeModel.init(0).forward(_image(rng, *extents))
    assert len(out.side) == 5
    for m in out.side + [out.fuse, out.final]:
        assert m.shape == extents
        assert np.all((m > 0) & (m < 1))


def test_forward_batched_matches_single(rng):
    model = edgenet.EdgeModel.init(2)
    imgs = np.stack([_image(rng), _image(rng)])
    batch = model.forward(imgs)
    for i in range(2):
        one = model.forward(imgs[i])
        assert np.allclose(batch.final[i], one.final, rtol=0, atol=1e-12)


@pytest.mark.parametrize("extents", [(40, 32), (32, 20)])
def test_indivisible_extents(extents, rng):
    with pytest.raises(RejectedInput):
        edgenet.EdgeModel.init(0).forward(_image(rng, *extents))


def test_zero_model(rng):
    model = edgenet.EdgeModel.zeros()
    out = model.forward(_image(rng))
    h = model.params["fuse.weight"]
    for s in out.side:
        assert np.allclose(s, 0.5)
    fuse = 1 / (1 + np.exp(-0.5 * h.sum()))
    assert np.allclose(out.fuse, fuse)
    assert np.allclose(out.final, (5 * 0.5 + fuse) / 6)


def test_forward_deterministic(rng):
    img = _image(rng)
    digests = {
        hashlib.sha256(edgenet.EdgeModel.init(7).forward(img).final.tobytes()).hexdigest() for _ in range(2)
    }
    assert len(digests) == 1


def test_fuse_is_literal_sigmoid_of_weighted_probabilities(rng):
    model = edgenet.EdgeModel.init(3)
    model.params["fuse.weight"] = np.array([0.5, -1.0, 2.0, 0.1, 0.3])
    out = model.forward(_image(rng))
    z = sum(hm * s for hm, s in zip(model.params["fuse.weight"], out.side))
    assert np.allclose(out.fuse, 1 / (1 + np.exp(-z)), atol=1e-12)
    assert np.allclose(out.final, (sum(out.side) + out.fuse) / 6, atol=1e-12)


# -- losses -------------------------------------------------------------------


def test_side_loss_half(rng):
    y = rng.integers(0, 2, (2, 2))
    assert float(edgenet.side_loss(np.full((2, 2), 0.5), y).data) == pytest.approx(2 * LN2, abs=1e-12)


def test_side_loss_perfect_fit():
    y = np.array([[0, 1], [1, 0]])
    loss = float(edgenet.side_loss(y.astype(float), y).data)
    assert 0 <= loss <= 4 * 0.5 * np.log(1 / (1 - 1e-7)) + 1e-15


def test_side_loss_loop_oracle(rng):
    p = rng.uniform(0.01, 0.99, (4, 4))
    y = rng.integers(0, 2, (4, 4))
    ref = 0.0
    for i in range(4):
        for j in range(4):
            ref += -0.5 * (np.log(p[i, j]) if y[i, j] else np.log(1 - p[i, j]))
    assert float(edgenet.side_loss(p, y).data) == pytest.approx(ref, rel=1e-12)


def test_side_loss_unweighted_classes():
    # one edge pixel in a map of 16: no class balancing, so each pixel counts the same
    y = np.zeros((4, 4))
    y[0, 0] = 1
    p = np.full((4, 4), 0.3)
    expected = -0.5 * (np.log(0.3) + 15 * np.log(0.7))
    assert float(edgenet.side_loss(p, y).data) == pytest.approx(expected)


def _half_outputs():
    half = np.full((2, 2), 0.5)
    return edgenet.ModelOutputs([half] * 5, half, half)


def test_total_loss_all_half():
    assert float(edgenet.total_loss(_half_outputs(), np.eye(2)).data) == pytest.approx(8.317766, abs=1e-6)


def test_total_loss_zero_weights_is_fuse_only(rng):
    side = [rng.uniform(0.05, 0.95, (3, 3)) for _ in range(5)]
    fuse = rng.uniform(0.05, 0.95, (3, 3))
    y = rng.integers(0, 2, (3, 3))
    out = edgenet.ModelOutputs(side, fuse, fuse)
    got = float(edgenet.total_loss(out, y, side_weights=(0,) * 5).data)
    assert got == pytest.approx(float(edgenet.side_loss(fuse, y).data))
    composed = sum(float(edgenet.side_loss(s, y).data) for s in side) + float(edgenet.side_loss(fuse, y).data)
    assert float(edgenet.total_loss(out, y).data) == pytest.approx(composed, rel=1e-12)


def test_selectors(rng):
    out = _half_outputs()
    y = rng.integers(0, 2, (2, 2))
    assert float(edgenet.loss_for_selector(out, y, "all").data) == float(edgenet.total_loss(out, y).data)
    assert float(edgenet.loss_for_selector(out, y, "side-3").data) == pytest.approx(2 * LN2)
    assert edgenet.parse_selector(4) == 4
    for bad in ("side-0", "side-6", 7, "fuse"):
        with pytest.raises(RejectedInput):
            edgenet.parse_selector(bad)


def test_loss_nonnegative(rng):
    model = edgenet.EdgeModel.init(0)
    img = _image(rng)
    y = rng.integers(0, 2, (32, 32))
    for sel in ("all", 1, 5):
        assert edgenet.loss_value(model, img, y, sel) >= 0


def test_side_gradient_reachability(rng):
    model = edgenet.EdgeModel.init(4)
    p = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    x, _ = edgenet.to_nchw(_image(rng)[None])
    side, fuse, _ = model.build(T.Tensor(x), p)
    loss = edgenet.loss_for_selector((side, fuse), rng.integers(0, 2, (32, 32)), "side-1")
    grads = T.backward(loss)
    for name, t in p.items():
        g = grads.get(t)
        upstream = name.startswith("stage1.") or name.startswith("side1.")
        if upstream:
            assert g is not None and np.any(g != 0), name
        else:
            assert g is None or not np.any(g), name


# -- input gradients ----------------------------------------------------------


def test_input_gradient_shape(rng):
    img = _image(rng)
    g = edgenet.input_gradient(edgenet.EdgeModel.init(0), img, rng.integers(0, 2, (32, 32)))
    assert g.shape == img.shape


def test_input_gradient_batch_independence(rng):
    model = edgenet.EdgeModel.init(0)
    img = _image(rng)
    y = rng.integers(0, 2, (32, 32))
    losses, g = edgenet.loss_and_input_gradient(model, np.stack([img, img]), np.stack([y, y]), "all")
    assert losses[0] == losses[1]
    assert np.array_equal(g[0], g[1])
    single = edgenet.input_gradient(model, img, y)
    assert np.allclose(single, g[0], rtol=1e-12, atol=1e-15)


# -- training -------------------------------------------------------------------


def test_zero_epochs_unchanged(rng):
    model = edgenet.EdgeModel.init(0)
    imgs = np.stack([_image(rng) for _ in range(2)])
    res = edgenet.train(model, imgs, rng.integers(0, 2, (2, 32, 32)), epochs=0)
    assert res.loss_trace == []
    for k in model.params:
        assert np.array_equal(res.model.params[k], model.params[k])


def test_training_deterministic(rng):
    imgs = np.stack([_image(rng) for _ in range(4)])
    edges = rng.integers(0, 2, (4, 32, 32))
    a = edgenet.train(edgenet.EdgeModel.init(0), imgs, edges, epochs=2, seed=3, batch_size=2)
    b = edgenet.train(edgenet.EdgeModel.init(0), imgs, edges, epochs=2, seed=3, batch_size=2)
    assert a.loss_trace == b.loss_trace
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()


def test_training_rejects_mismatch(rng):
    with pytest.raises(RejectedInput):
        edgenet.train(edgenet.EdgeModel.init(0), np.zeros((2, 32, 32, 3)), np.zeros((2, 16, 16)), epochs=1)
    with pytest.raises(RejectedInput):
        edgenet.train(edgenet.EdgeModel.init(0), np.zeros((0, 32, 32, 3)), np.zeros((0, 32, 32)), epochs=1)


def test_training_divergence_names_epoch(rng):
    from edgestorm.errors import TrainingFailure

    imgs = np.stack([_image(rng) for _ in range(2)])
    with pytest.raises(TrainingFailure) as err:
        with np.errstate(all="ignore"):
            edgenet.train(edgenet.EdgeModel.init(0), imgs, rng.integers(0, 2, (2, 32, 32)), epochs=3, lr=1e200, batch_size=1)
    assert err.value.epoch == 1


def test_default_recipe_halves_loss(edge_training):
    _, trace = edge_training
    assert trace[-1] < 0.5 * trace[0]
    # smoothed (5-epoch mean) loss decreases throughout
    smooth = np.convolve(trace, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) < 0)


def test_pseudo_ground_truth(rng):
    model = edgenet.EdgeModel.zeros()
    # final map = (5 * 0.5 + sigmoid(0.5 * 1.0)) / 6 ~ 0.52, just above the 0.5 cut
    assert edgenet.pseudo_ground_truth(model, _image(rng)).all()
    model.params["fuse.weight"] = np.full(5, -1.0)
    assert not edgenet.pseudo_ground_truth(model, _image(rng)).any()
