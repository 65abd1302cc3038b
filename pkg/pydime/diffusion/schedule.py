"""Forward noising process of a denoising diffusion model."""

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError, ConfigurationError
from ..image import check_same_shape

logger = logging.getLogger(__name__)

SIGNAL_FLOOR = 1e-4

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep signal coefficients and sampler noise scales, for t in [0, T].

    Attributes
    ----------
    T : int
        Number of diffusion steps.
    a : ndarray
        Cumulative signal coefficients a_t, with a_0 = 1 and strictly decreasing.
    sigma : ndarray
        Sampler noise scales, sigma_1 = 0.
    params : dict
        Parameters used for creating the schedule, stored in checkpoints.
    """

    T: int
    a: np.ndarray
    sigma: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):

        a = np.asarray(self.a, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.T<1 or a.shape!=(self.T+1,) or sigma.shape!=(self.T+1,):
            raise ConfigurationError('Schedule arrays must have T+1 entries')
        if a[0]!=1.:
            raise ConfigurationError('a_0 must be exactly 1')
        if np.any(np.diff(a)>=0) or a[-1]<=0:
            raise ConfigurationError('a_t must be positive and strictly decreasing')
        if sigma[1]!=0 or np.any(sigma<0):
            raise ConfigurationError('sigma must be non-negative with sigma_1 = 0')

        object.__setattr__(self, 'a', a)
        object.__setattr__(self, 'sigma', sigma)

    @property
    def beta(self):
        """Per-step variances beta_t = 1 - a_t/a_{t-1}, with beta_0 = 0."""

        return np.concatenate(([0.], 1 - self.a[1:]/self.a[:-1]))

    def check_timestep(self, t):
        """Raise ArgumentError if t is not an integer in [0, T]."""

        if int(t)!=t or not 0<=t<=self.T:
            raise ArgumentError(f'Timestep {t} outside [0, {self.T}]')

        return int(t)

def make_schedule(T, beta_min=1e-4, beta_max=0.02):
    """Create a schedule with variances beta_t increasing linearly from `beta_min` to `beta_max`.
    The signal coefficients are a_t = prod_{s<=t}(1 - beta_s) and the sampler noise is the
    posterior deviation sqrt((1 - a_{t-1})/(1 - a_t) * beta_t), which is 0 at t = 1.

    For short schedules the betas should be scaled accordingly, e.g. T=100 with
    (1e-3, 0.2) has the same endpoints behaviour as T=1000 with (1e-4, 0.02). A warning is issued
    if a_T does not reach 1e-4.

    Parameters
    ----------
    T : int
        Number of steps.
    beta_min : float
        Variance of the first step.
    beta_max : float
        Variance of the last step.

    Returns
    -------
    NoiseSchedule
        The schedule.
    """

    if int(T)!=T or T<1:
        raise ConfigurationError(f'T must be a positive integer, got {T}')
    if not 0<beta_min<=beta_max<1:
        raise ConfigurationError(f'Need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})')

    T = int(T)
    if T==1:
        betas = np.array([beta_max])
    else:
        betas = np.linspace(beta_min, beta_max, T)
    a = np.concatenate(([1.], np.cumprod(1 - betas)))

    sigma = np.zeros(T+1)
    sigma[2:] = np.sqrt((1 - a[1:-1])/(1 - a[2:])*betas[1:])

    if a[-1]>SIGNAL_FLOOR:
        logger.warning('Schedule with T=%d reaches a_T=%.3g, above %.0e', T, a[-1], SIGNAL_FLOOR)

    params = {'T': T, 'beta_min': float(beta_min), 'beta_max': float(beta_max)}

    return NoiseSchedule(T, a, sigma, params)

def schedule_from_params(params):
    """Rebuild a schedule from the `params` attribute of another schedule (or the explicit arrays
    stored for custom schedules)."""

    if 'beta_min' in params:
        return make_schedule(params['T'], params['beta_min'], params['beta_max'])

    return NoiseSchedule(params['T'], np.array(params['a']), np.array(params['sigma']))

def schedule_params(s):
    """Parameters needed to rebuild schedule `s`."""

    if s.params:
        return dict(s.params)

    return {'T': s.T, 'a': s.a.tolist(), 'sigma': s.sigma.tolist()}

def add_noise(x, t, eps, s):
    """Noise an image to timestep t: sqrt(a_t)*x + sqrt(1 - a_t)*eps. Inputs are in the model range
    [-1, 1].

    Parameters
    ----------
    x : ndarray
        Clean image or batch.
    t : int
        Timestep in [0, T].
    eps : ndarray
        Gaussian noise with the same shape as `x`.
    s : NoiseSchedule
        The schedule.

    Returns
    -------
    ndarray
        The noised image.
    """

    check_same_shape(x, eps)
    t = s.check_timestep(t)
    a_t = s.a[t]

    return np.sqrt(a_t)*np.asarray(x) + np.sqrt(1 - a_t)*np.asarray(eps)
