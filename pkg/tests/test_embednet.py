import numpy as np
import pytest

from conftest import SMALL_SHAPE, random_image
from decoylab.embednet import (
    EmbedNet,
    ModelEnsemble,
    ensemble_loss_and_gradient,
    load_model,
    loss_and_input_gradient,
    save_model,
)
from decoylab.numerics import DegenerateVectorError, ShapeError, distance, make_rng, normalize


def central_difference(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_forward_matches_straight_line_formula():
    m = EmbedNet.from_seed(42)
    x = np.full(m.input_shape, 0.5)
    flat = x.reshape(-1)
    hidden = [np.tanh(sum(m.w1[i, j] * flat[j] for j in range(flat.size)) + m.b1[i]) for i in range(m.hidden)]
    expected = [sum(m.w2[o, i] * hidden[i] for i in range(m.hidden)) + m.b2[o] for o in range(m.dim)]
    np.testing.assert_allclose(m.forward(x), expected, rtol=1e-12, atol=1e-12)


def test_zero_weights_give_zero_embedding_and_degenerate_loss():
    shape = (4, 4, 1)
    m = EmbedNet(np.zeros((3, 16)), np.zeros(3), np.zeros((5, 3)), np.zeros(5), shape)
    x = np.full(shape, 0.3)
    np.testing.assert_array_equal(m.forward(x), 0.0)
    with pytest.raises(DegenerateVectorError):
        loss_and_input_gradient(m, x, np.ones(5))


def test_forward_deterministic_and_shape_checked(small_model):
    x = random_image(make_rng(0, 0))
    assert small_model.forward(x).tobytes() == small_model.forward(x).tobytes()
    with pytest.raises(ShapeError):
        small_model.forward(np.zeros((3, 3, 1)))


def test_defaults():
    m = EmbedNet.from_seed(0)
    assert m.input_shape == (32, 32, 1) and m.hidden == 64 and m.dim == 128


@pytest.mark.parametrize("smoothing", [0.0, 1.5])
def test_seed_determinism_and_scale(smoothing):
    a = EmbedNet.from_seed(7, smoothing=smoothing)
    b = EmbedNet.from_seed(7, smoothing=smoothing)
    assert a.w1.tobytes() == b.w1.tobytes() and a.w2.tobytes() == b.w2.tobytes()
    # rows keep the 1/sqrt(fan_in) scale: expected squared row norm is 1
    assert np.mean(np.sum(a.w1 ** 2, axis=1)) == pytest.approx(1.0, rel=0.1)


@pytest.mark.parametrize("trial", range(10))
def test_gradient_matches_finite_differences(trial):
    rng = make_rng(100 + trial, 0)
    m = EmbedNet.from_seed(trial, SMALL_SHAPE, hidden=10, dim=5)
    x = random_image(rng)
    t = rng.standard_normal(5)
    loss, grad = loss_and_input_gradient(m, x, t)
    fd = central_difference(lambda z: loss_and_input_gradient(m, z, t)[0], x)
    rel = np.abs(grad - fd) / (np.abs(fd) + 1e-8)
    assert loss == pytest.approx(distance(m.forward(x), t), abs=1e-14)
    assert rel.max() <= 1e-4


def test_self_target_zero_loss_and_gradient_checked(small_model):
    x = random_image(make_rng(3, 3))
    t = normalize(small_model.forward(x))
    loss, grad = loss_and_input_gradient(small_model, x, t)
    assert loss == pytest.approx(0.0, abs=1e-15)
    fd = central_difference(lambda z: loss_and_input_gradient(small_model, z, t)[0], x)
    np.testing.assert_allclose(grad, fd, atol=1e-7)


def test_ensemble_reductions(small_model):
    rng = make_rng(5, 5)
    x = random_image(rng)
    t = rng.standard_normal(small_model.dim)
    single = loss_and_input_gradient(small_model, x, t)
    one = ensemble_loss_and_gradient(ModelEnsemble((small_model,)), x, t)
    assert one[0] == single[0]
    np.testing.assert_array_equal(one[1], single[1])
    two = ensemble_loss_and_gradient(ModelEnsemble((small_model, small_model)), x, t)
    assert two[0] == 2 * single[0]
    other = EmbedNet.from_seed(99, SMALL_SHAPE, hidden=12, dim=6)
    mixed = ensemble_loss_and_gradient(ModelEnsemble((small_model, other)), x, t)
    assert abs(mixed[0] - (single[0] + loss_and_input_gradient(other, x, t)[0])) <= 1e-12


def test_ensemble_invariants(small_model):
    with pytest.raises(ValueError):
        ModelEnsemble(())
    with pytest.raises(ShapeError):
        ModelEnsemble((small_model, EmbedNet.from_seed(1, (4, 4, 1), hidden=3, dim=6)))


def test_per_member_targets(small_model):
    other = EmbedNet.from_seed(98, SMALL_SHAPE, hidden=12, dim=6)
    ens = ModelEnsemble((small_model, other))
    rng = make_rng(8, 8)
    xs = rng.uniform(0, 1, (3,) + SMALL_SHAPE)
    t = rng.standard_normal((3, 2, 6))
    loss, grad = ens.loss_and_grad_batch(xs, t)
    l0, g0 = small_model.loss_and_grad_batch(xs, t[:, 0])
    l1, g1 = other.loss_and_grad_batch(xs, t[:, 1])
    np.testing.assert_array_equal(loss, l0 + l1)
    np.testing.assert_array_equal(grad, g0 + g1)


def test_bounded_under_small_perturbations(small_model):
    rng = make_rng(6, 6)
    t = rng.standard_normal(small_model.dim)
    for _ in range(100):
        x = random_image(rng)
        d = rng.uniform(-0.01, 0.01, x.shape)
        a = loss_and_input_gradient(small_model, x, t)[0]
        b = loss_and_input_gradient(small_model, x + d, t)[0]
        assert np.isfinite(a) and np.isfinite(b) and abs(a - b) < 4.0


def test_model_file_roundtrip(tmp_path, small_model):
    save_model(tmp_path / "m.fgm", small_model)
    again = load_model(tmp_path / "m.fgm", SMALL_SHAPE)
    for name in ("w1", "b1", "w2", "b2"):
        np.testing.assert_array_equal(getattr(again, name), getattr(small_model, name))
    assert again.seed == small_model.seed
    save_model(tmp_path / "n.fgm", again)
    assert (tmp_path / "m.fgm").read_bytes() == (tmp_path / "n.fgm").read_bytes()
    assert load_model(tmp_path / "m.fgm").input_shape == SMALL_SHAPE
