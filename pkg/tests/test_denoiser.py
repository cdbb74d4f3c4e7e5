"""Unit tests for the TinyUNet denoiser, its embedding and the analytic oracle."""

import numpy as np
import pytest
from recatvton.denoiser import (
    analytic_eps,
    AnalyticGaussianModel,
    count_params_flops,
    DenoiserInputSpec,
    NetworkDenoiser,
    parameter_shapes,
    timestep_embedding,
    TinyUNet,
    TinyUNetConfig
)
from recatvton.errors import InvalidConfig, ShapeMismatch, StaleTape
from recatvton.gridcore import LatentGrid
from recatvton.schedule import NoiseSchedule


@pytest.fixture
def tiny_net():
    spec = DenoiserInputSpec(latent_channels=1, region_height=4, width=4)
    return TinyUNet(TinyUNetConfig(spec, features=4, groups=2, T=10))


def single_step_schedule(alpha_bar):
    a = np.array([alpha_bar])
    return NoiseSchedule(kind="linear", beta=1.0 - a, alpha=a, alpha_bar=a)


def test_timestep_embedding():
    emb = timestep_embedding(0, 8, 100)
    assert np.array_equal(emb, [0, 1, 0, 1, 0, 1, 0, 1])
    for t in (1, 17, 99):
        e = timestep_embedding(t, 2, 100)
        assert np.allclose(e, [np.sin(t), np.cos(t)])
        assert np.linalg.norm(e) == pytest.approx(1.0)
    assert timestep_embedding(np.array([0, 3, 5]), 6, 10).shape == (3, 6)


def test_timestep_embedding_rejects():
    with pytest.raises(InvalidConfig):
        timestep_embedding(0, 3, 10)
    with pytest.raises(InvalidConfig):
        timestep_embedding(10, 4, 10)


def test_default_network_size():
    spec = DenoiserInputSpec(latent_channels=4, region_height=32, width=24)
    net = TinyUNet(TinyUNetConfig(spec))
    params = net.init_params(0)
    assert list(params) == list(parameter_shapes(net.config))
    count, flops = count_params_flops(params, spec)
    assert count == 61_700
    assert flops == 160_450_560


def test_zero_params_give_zero_output(tiny_net):
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 4))
    out, _ = tiny_net.forward(tiny_net.zero_params(), x, np.array([0, 9]))
    assert out.shape == (2, 1, 8, 4)
    assert np.all(out == 0.0)


def test_forward_is_deterministic(tiny_net):
    params = tiny_net.init_params(3)
    x = np.random.default_rng(1).normal(size=(1, 3, 8, 4))
    a, _ = tiny_net.forward(params, x, 5)
    b, _ = tiny_net.forward(params, x, 5)
    assert np.array_equal(a, b)


def test_forward_rejects_wrong_shape(tiny_net):
    with pytest.raises(ShapeMismatch):
        tiny_net.forward(tiny_net.init_params(0), np.zeros((1, 3, 6, 4)), 0)


def test_backward_matches_finite_differences(tiny_net):
    rng = np.random.default_rng(2)
    params = tiny_net.init_params(7)
    for name in params:
        params[name][...] += 0.1 * rng.normal(size=params[name].shape)
    x = rng.normal(size=(2, 3, 8, 4))
    t = np.array([2, 8])
    r = rng.normal(size=(2, 1, 8, 4))

    def loss():
        return (tiny_net.forward(params, x, t)[0] * r).sum()

    _, tape = tiny_net.forward(params, x, t)
    grads = tiny_net.backward(params, tape, r)
    h = 1e-6
    for name in params:
        flat = params[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            plus = loss()
            flat[i] = old - h
            minus = loss()
            flat[i] = old
            numeric = (plus - minus) / (2 * h)
            assert grads[name].reshape(-1)[i] == pytest.approx(numeric, rel=1e-4, abs=1e-6), name


def test_zero_out_grad_gives_zero_gradients(tiny_net):
    params = tiny_net.init_params(0)
    _, tape = tiny_net.forward(params, np.ones((1, 3, 8, 4)), 1)
    grads = tiny_net.backward(params, tape, np.zeros((1, 1, 8, 4)))
    assert all(np.all(g == 0.0) for g in grads.tensors.values())


def test_tape_serves_one_backward(tiny_net):
    params = tiny_net.init_params(0)
    _, tape = tiny_net.forward(params, np.ones((1, 3, 8, 4)), 1)
    tiny_net.backward(params, tape, np.ones((1, 1, 8, 4)))
    with pytest.raises(StaleTape):
        tiny_net.backward(params, tape, np.ones((1, 1, 8, 4)))
    _, tape = tiny_net.forward(params, np.ones((1, 3, 8, 4)), 1)
    with pytest.raises(StaleTape):
        tiny_net.backward(params.copy(), tape, np.ones((1, 1, 8, 4)))


def test_garment_timestep_gate():
    spec = DenoiserInputSpec(latent_channels=1, region_height=4, width=4)
    gated = TinyUNet(TinyUNetConfig(spec, features=4, groups=2, T=10, garment_timestep=False))
    gate = gated._row_gate(8)[0, 0, :, 0]
    assert np.array_equal(gate, [1, 1, 1, 1, 0, 0, 0, 0])
    open_gate = TinyUNet(TinyUNetConfig(spec, features=4, groups=2, T=10))._row_gate(8)
    assert np.all(open_gate == 1.0)


def test_network_denoiser_predict(tiny_net):
    params = tiny_net.init_params(0)
    x = np.ones((2, 3, 8, 4))
    out = NetworkDenoiser(tiny_net, params).predict(x, np.array([1, 2]))
    assert out.shape == (2, 1, 8, 4)


def test_analytic_eps_example():
    model = AnalyticGaussianModel(LatentGrid(np.full((1, 1, 1), 2.0)), 0.5,
                                  single_step_schedule(0.81))
    eps = analytic_eps(model, LatentGrid(np.ones((1, 1, 1))), 0, model.schedule)
    assert eps.data[0, 0, 0] == pytest.approx(-0.88837, abs=1e-5)


def test_analytic_eps_unit_std():
    s = single_step_schedule(0.64)
    mu = LatentGrid(np.full((1, 2, 2), 0.5))
    model = AnalyticGaussianModel(mu, 1.0, s)
    zt = np.random.default_rng(0).normal(size=(1, 2, 2))
    expected = np.sqrt(0.36) * (zt - 0.8 * 0.5)
    assert np.allclose(analytic_eps(model, zt, 0, s), expected)
    zero_model = AnalyticGaussianModel(LatentGrid(np.zeros((1, 2, 2))), 1.0, s)
    assert np.all(analytic_eps(zero_model, np.zeros((1, 2, 2)), 0, s) == 0.0)


def test_analytic_model_tiles_region_mean():
    s = single_step_schedule(0.5)
    model = AnalyticGaussianModel(LatentGrid(np.ones((1, 2, 2))), 1.0, s)
    x = np.zeros((1, 3, 4, 2))
    out = model.predict(x, np.array([0]))
    assert out.shape == (1, 1, 4, 2)
    assert np.allclose(out, np.sqrt(0.5) * (0 - np.sqrt(0.5)))


def test_analytic_model_rejects_non_positive_std():
    with pytest.raises(InvalidConfig):
        AnalyticGaussianModel(LatentGrid(np.zeros((1, 1, 1))), 0.0, single_step_schedule(0.5))
