import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pydime.dataset import Dataset, make_toy_dataset
from pydime.diffusion import (Architecture, TrainingConfig, augment_batch, build_model,
                              clip_per_example, flip_images, noised_input, per_example_loss, train)
from pydime.diffusion.training import _per_example_grads
from pydime.errors import ArgumentError, ConfigurationError
from pydime.util import derive_seed

@pytest.fixture
def toy_data():
    return make_toy_dataset(32, (4, 4, 1), num_classes=2, base_grid=2, seed=0)

def test_training_is_deterministic(toy_data, schedule, small_arch):
    cfg = TrainingConfig(steps=20, batch_size=8, seed=5)
    m1 = train(toy_data, cfg, schedule, small_arch)
    m2 = train(toy_data, cfg, schedule, small_arch)

    np.testing.assert_array_equal(m1.theta, m2.theta)

def test_training_bookkeeping(toy_data, schedule, small_arch):
    cfg = TrainingConfig(steps=15, batch_size=4, seed=1)
    model = train(toy_data, cfg, schedule, small_arch)

    assert model.step==15
    assert model.examples_seen==60
    assert len(model.history)==15
    assert model.train_config['seed']==1

def test_training_decreases_loss(toy_data, schedule):
    arch = Architecture(hidden=(64, 64), time_dim=8)
    cfg = TrainingConfig(steps=300, batch_size=32, learning_rate=1e-3, seed=2)
    model = train(toy_data, cfg, schedule, arch)

    assert np.mean(model.history[-30:])<np.mean(model.history[:30])

def test_checkpoint_callback(toy_data, schedule, small_arch):
    steps = []
    cfg = TrainingConfig(steps=10, batch_size=4, checkpoint_every=4)
    train(toy_data, cfg, schedule, small_arch, on_checkpoint=lambda step, m: steps.append(step))

    assert steps==[0, 4, 8]

def test_conditional_training_needs_labels(schedule):
    data = Dataset(np.zeros((4, 4, 4, 1)))
    arch = Architecture(hidden=(8,), time_dim=4, conditioning='class', num_classes=2)

    with pytest.raises(ConfigurationError):
        train(data, TrainingConfig(steps=1, batch_size=2), schedule, arch)

def test_empty_dataset(schedule, small_arch):
    with pytest.raises(ArgumentError):
        train(Dataset(np.zeros((0, 4, 4, 1))), TrainingConfig(steps=1), schedule, small_arch)

@pytest.mark.parametrize('kwargs', [{'steps': -1}, {'batch_size': 0}, {'learning_rate': 0.},
                                    {'clip_norm': 0.}, {'noise_multiplier': 1.},
                                    {'clip_norm': 1., 'noise_multiplier': -1.}])
def test_invalid_training_config(kwargs):
    with pytest.raises(ConfigurationError):
        TrainingConfig(**kwargs)

def test_per_example_gradients_average_to_batch_gradient(schedule, small_arch):
    model = build_model(small_arch, (4, 4, 1), schedule, seed=0, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    x = 2*torch.rand(6, 4, 4, 1, generator=gen, dtype=torch.float64) - 1
    eps = torch.randn(6, 4, 4, 1, generator=gen, dtype=torch.float64)
    t = torch.randint(1, schedule.T+1, (6,), generator=gen)
    y = torch.zeros(6, dtype=torch.long)

    z = noised_input(schedule, x, t, eps)
    flat, losses = _per_example_grads(model, z, t, eps, y)
    model.net.zero_grad()
    per_example_loss(model, x, t, eps, y).mean().backward()
    expected = torch.cat([p.grad.reshape(-1) for p in model.net.parameters()])

    assert flat.shape==(6, model.num_params)
    np.testing.assert_allclose(flat.mean(dim=0).numpy(), expected.numpy(), rtol=1e-7, atol=1e-10)
    np.testing.assert_allclose(losses.numpy(), per_example_loss(model, x, t, eps, y).detach().numpy())

def test_private_training_runs(toy_data, schedule, small_arch):
    cfg = TrainingConfig(steps=5, batch_size=8, seed=3, clip_norm=0.1, noise_multiplier=1.)
    model = train(toy_data, cfg, schedule, small_arch)

    assert np.all(np.isfinite(model.theta))
    assert len(model.history)==5

@given(arrays(np.float64, (6, 5), elements=st.floats(-100, 100)),
       st.floats(min_value=0.01, max_value=50.))
@settings(max_examples=50, deadline=None)
def test_clip_per_example_bounds_norms(grads, clip_norm):
    clipped = clip_per_example(torch.as_tensor(grads), clip_norm).numpy()
    norms = np.linalg.norm(grads, axis=1)
    clipped_norms = np.linalg.norm(clipped, axis=1)

    assert clipped.dtype==np.float64
    assert np.all(clipped_norms<=clip_norm*(1 + 1e-9))
    small = norms<clip_norm*(1 - 1e-9)
    np.testing.assert_array_equal(clipped[small], grads[small])

def test_clip_per_example_needs_positive_bound():
    with pytest.raises(ArgumentError):
        clip_per_example(torch.ones(2, 2), 0.)

def test_augment_batch_flips_rows():
    x = torch.rand(64, 2, 3, 1)
    out = augment_batch(x, torch.Generator().manual_seed(0))
    flipped = flip_images(x)

    same = [torch.equal(out[i], x[i]) for i in range(64)]
    flipped_rows = [torch.equal(out[i], flipped[i]) for i in range(64)]
    assert all(a or b for a, b in zip(same, flipped_rows))
    assert 0<sum(flipped_rows)<64

def test_zero_steps_returns_initial_model(toy_data, schedule, small_arch):
    cfg = TrainingConfig(steps=0, batch_size=4, seed=3)
    model = train(toy_data, cfg, schedule, small_arch)
    initial = build_model(small_arch, toy_data.shape, schedule, seed=derive_seed(3, 'init'))

    np.testing.assert_array_equal(model.theta, initial.theta)
    assert model.step==0
    assert model.history==[]
