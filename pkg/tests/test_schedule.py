import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pydime.diffusion import add_noise, make_schedule, schedule_from_params, schedule_params
from pydime.diffusion.schedule import NoiseSchedule
from pydime.errors import ArgumentError, ConfigurationError

@given(st.integers(min_value=1, max_value=200),
       st.floats(min_value=1e-5, max_value=0.1),
       st.floats(min_value=0., max_value=0.4))
@settings(max_examples=50, deadline=None)
def test_schedule_is_valid(T, beta_min, extra):
    s = make_schedule(T, beta_min, beta_min+extra)

    assert s.a[0]==1.
    assert np.all(np.diff(s.a)<0)
    assert s.a[-1]>0
    assert s.sigma[1]==0
    assert np.all(s.sigma>=0)
    assert len(s.a)==T+1

def test_default_schedule_reaches_floor():
    s = make_schedule(1000)

    assert s.a[-1]<=1e-4

def test_sigma_is_posterior_deviation():
    s = make_schedule(10, 0.01, 0.2)
    beta = s.beta
    t = 5
    expected = np.sqrt((1 - s.a[t-1])/(1 - s.a[t])*beta[t])

    assert s.sigma[t]==pytest.approx(expected)

@pytest.mark.parametrize('args', [(0,), (10, 0.2, 0.1), (10, 0., 0.1), (10, 0.1, 1.)])
def test_invalid_schedule(args):
    with pytest.raises(ConfigurationError):
        make_schedule(*args)

def test_schedule_arrays_are_checked():
    with pytest.raises(ConfigurationError):
        NoiseSchedule(2, np.array([1., 0.5, 0.6]), np.zeros(3))
    with pytest.raises(ConfigurationError):
        NoiseSchedule(2, np.array([0.9, 0.5, 0.1]), np.zeros(3))

def test_schedule_params_round_trip():
    s = make_schedule(50, 1e-3, 0.1)
    rebuilt = schedule_from_params(schedule_params(s))

    np.testing.assert_array_equal(rebuilt.a, s.a)
    np.testing.assert_array_equal(rebuilt.sigma, s.sigma)

def test_custom_schedule_params_round_trip():
    s = NoiseSchedule(2, np.array([1., 0.5, 0.1]), np.array([0., 0., 0.3]))
    rebuilt = schedule_from_params(schedule_params(s))

    np.testing.assert_array_equal(rebuilt.a, s.a)

def test_add_noise_at_zero_is_identity(rng):
    s = make_schedule(10, 0.01, 0.2)
    x = rng.uniform(-1, 1, (4, 4, 3))
    eps = rng.standard_normal((4, 4, 3))

    np.testing.assert_array_equal(add_noise(x, 0, eps, s), x)

def test_add_noise_rejects_bad_input(rng):
    s = make_schedule(10, 0.01, 0.2)
    x = np.zeros((4, 4, 3))

    with pytest.raises(ArgumentError):
        add_noise(x, 11, x, s)
    with pytest.raises(ArgumentError):
        add_noise(x, 1, np.zeros((4, 4, 1)), s)

@pytest.mark.parametrize('t', [1, 100, 300, 700, 1000])
def test_add_noise_variance_decomposition(t):
    s = make_schedule(1000)
    rng = np.random.default_rng(t)
    x = rng.uniform(-1, 1, 100000)
    eps = rng.standard_normal(100000)
    z = add_noise(x, t, eps, s)
    expected = s.a[t]*np.var(x) + 1 - s.a[t]

    assert np.var(z)==pytest.approx(expected, rel=0.05)

def test_single_step_schedule():
    s = make_schedule(1, 1e-4, 0.02)

    np.testing.assert_allclose(s.a, [1., 0.98])
    np.testing.assert_array_equal(s.sigma, [0., 0.])

def test_add_noise_value():
    s = NoiseSchedule(1, np.array([1., 0.25]), np.zeros(2))
    z = add_noise(np.full((2, 2, 1), 0.5), 1, np.ones((2, 2, 1)), s)

    np.testing.assert_allclose(z, 0.25 + np.sqrt(0.75))
    assert z[0, 0, 0]==pytest.approx(1.1160, abs=1e-4)
