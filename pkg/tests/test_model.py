import numpy as np
import pytest
import torch

from pydime.diffusion import (Architecture, build_model, diffusion_loss, diffusion_loss_grad,
                              flip_images, from_theta, per_example_loss, timestep_embedding)
from pydime.errors import ArgumentError, ConfigurationError

def test_initialization_is_deterministic(schedule, small_arch):
    m1 = build_model(small_arch, (4, 4, 1), schedule, seed=3)
    m2 = build_model(small_arch, (4, 4, 1), schedule, seed=3)
    m3 = build_model(small_arch, (4, 4, 1), schedule, seed=4)

    np.testing.assert_array_equal(m1.theta, m2.theta)
    assert not np.array_equal(m1.theta, m3.theta)

def test_initialization_keeps_global_rng(schedule, small_arch):
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model(small_arch, (4, 4, 1), schedule, seed=3)

    assert torch.equal(torch.rand(3), expected)

def test_prediction_shape(small_model):
    z = torch.zeros(5, 4, 4, 1)
    t = torch.arange(1, 6)

    assert small_model.predict(z, t, None).shape==(5, 4, 4, 1)

def test_theta_round_trip(small_model, schedule, small_arch):
    clone = from_theta(small_arch, (4, 4, 1), schedule, small_model.theta)
    z = torch.randn(3, 4, 4, 1)
    t = torch.tensor([1, 5, 20])

    assert torch.equal(clone.predict(z, t, None), small_model.predict(z, t, None))
    assert clone.num_params==small_model.num_params

def test_load_theta_checks_size(small_model):
    with pytest.raises(ArgumentError):
        small_model.load_theta(np.zeros(small_model.num_params+1))

def test_copy_is_independent(small_model):
    clone = small_model.copy()
    clone.load_theta(np.zeros(clone.num_params))

    assert np.any(small_model.theta!=0)

def test_timestep_embedding():
    emb = timestep_embedding(torch.tensor([0, 7]), 8)

    assert emb.shape==(2, 8)
    np.testing.assert_allclose(emb[0, :4].numpy(), 0.)
    np.testing.assert_allclose(emb[0, 4:].numpy(), 1.)

def test_flip_images():
    x = torch.arange(6.).reshape(1, 1, 3, 2)
    flipped = flip_images(x)

    assert torch.equal(flipped[0, 0, 0], x[0, 0, 2])
    assert torch.equal(flip_images(flipped), x)

@pytest.mark.parametrize('kwargs', [{'time_dim': 7}, {'hidden': ()}, {'conditioning': 'text'},
                                    {'conditioning': 'class', 'num_classes': 0}])
def test_invalid_architecture(kwargs):
    with pytest.raises(ConfigurationError):
        Architecture(**kwargs)

def test_architecture_dict_round_trip():
    arch = Architecture(hidden=(16, 8), time_dim=4, conditioning='class', num_classes=3)

    assert Architecture.from_dict(arch.to_dict())==arch
    with pytest.raises(ConfigurationError):
        Architecture.from_dict({**arch.to_dict(), 'depth': 3})

def test_conditional_model_needs_label(schedule, rng):
    arch = Architecture(hidden=(16,), time_dim=4, conditioning='class', num_classes=3)
    model = build_model(arch, (4, 4, 1), schedule)
    x = rng.random((4, 4, 1))
    eps = rng.standard_normal((4, 4, 1))

    with pytest.raises(ArgumentError):
        diffusion_loss(model, x, 3, eps)
    with pytest.raises(ArgumentError):
        diffusion_loss(model, x, 3, eps, label=3)
    assert diffusion_loss(model, x, 3, eps, label=2)>=0

def test_loss_rejects_invalid_input(small_model, rng):
    eps = rng.standard_normal((4, 4, 1))

    with pytest.raises(ArgumentError):
        diffusion_loss(small_model, np.full((4, 4, 1), 1.5), 3, eps)
    with pytest.raises(ArgumentError):
        diffusion_loss(small_model, np.zeros((4, 4, 1)), 21, eps)
    with pytest.raises(ArgumentError):
        diffusion_loss(small_model, np.zeros((4, 4, 3)), 3, np.zeros((4, 4, 3)))

def test_loss_matches_definition(small_model, schedule, rng):
    x = rng.random((4, 4, 1))
    eps = rng.standard_normal((4, 4, 1))
    t = 7
    z = np.sqrt(schedule.a[t])*(2*x - 1) + np.sqrt(1 - schedule.a[t])*eps
    pred = small_model.predict(torch.as_tensor(z[None], dtype=torch.float32),
                               torch.tensor([t]), None)[0].numpy()

    assert diffusion_loss(small_model, x, t, eps)==pytest.approx(np.mean((pred - eps)**2),
                                                                 rel=1e-4)

def test_gradient_matches_finite_differences(schedule):
    arch = Architecture(hidden=(8, 8), time_dim=4, conditioning='class', num_classes=2)
    rng = np.random.default_rng(0)
    h = 1e-6
    for instance in range(100):
        model = build_model(arch, (2, 2, 1), schedule, seed=instance, dtype=torch.float64)
        x = rng.random((2, 2, 1))
        eps = rng.standard_normal((2, 2, 1))
        t = int(rng.integers(1, schedule.T+1))
        label = int(rng.integers(0, 2))

        _, grad = diffusion_loss_grad(model, x, t, eps, label)
        theta = model.theta
        coords = rng.choice(len(theta), 5, replace=False)
        numeric = np.empty(len(coords))
        for idx, coord in enumerate(coords):
            shifted = theta.copy()
            shifted[coord] += h
            model.load_theta(shifted)
            plus = diffusion_loss(model, x, t, eps, label)
            shifted[coord] -= 2*h
            model.load_theta(shifted)
            minus = diffusion_loss(model, x, t, eps, label)
            numeric[idx] = (plus - minus)/(2*h)
        model.load_theta(theta)

        error = np.linalg.norm(numeric - grad[coords])
        scale = np.linalg.norm(numeric) + np.linalg.norm(grad[coords])
        assert error<=1e-4*scale + 1e-9

def test_loss_of_zero_model(small_model):
    small_model.load_theta(np.zeros(small_model.num_params))
    x = np.full((4, 4, 1), 0.3)

    assert diffusion_loss(small_model, x, 7, np.ones((4, 4, 1)))==pytest.approx(1.)

    x_batch = torch.zeros(3, 4, 4, 1)
    losses = per_example_loss(small_model, x_batch, torch.tensor([1, 5, 20]), torch.ones(3, 4, 4, 1),
                              torch.zeros(3, dtype=torch.long))
    assert losses.tolist()==[1., 1., 1.]
