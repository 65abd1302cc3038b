"""Iterative denoising sampler and masked-region inpainting."""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from tqdm import tqdm

from ..errors import ArgumentError
from ..image import check_image, to_model_range, to_pixel_range
from ..util import derive_seed, get_batches

logger = logging.getLogger(__name__)

@dataclass
class GenerationRequest:
    """Randomness `seed` and optional class `label` of a generation call producing `count`
    images. Image `i` starts from noise seeded by (seed, i)."""

    seed: int
    label: Optional[int] = None
    count: int = 1

    def __post_init__(self):

        if self.count<1:
            raise ArgumentError(f'`count` must be at least 1, got {self.count}')

def _row_generators(seed, role, indices):

    return [torch.Generator().manual_seed(derive_seed(seed, role, idx)) for idx in indices]

def _randn(generators, shape, dtype):
    """One standard normal draw of `shape` from each generator, stacked."""

    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])

def _row_labels(m, label, generators):
    """Labels of a batch. Conditional models without an explicit label draw one per row."""

    if not m.arch.is_conditional:
        return torch.zeros(len(generators), dtype=torch.long)
    if label is not None:
        return m.label_tensor(label, len(generators))

    return torch.cat([torch.randint(0, m.arch.num_classes, (1,), generator=g)
                      for g in generators])

def _reverse_step(m, s, z, t, t_prev, y, noise):
    """Move a batch from timestep t to t_prev < t. For t_prev = t-1 this is the ancestral update
    with sigma_t; larger gaps use the variance of the skipped interval."""

    a_t = float(s.a[t])
    a_prev = float(s.a[t_prev])
    beta = 1 - a_t/a_prev
    t_vec = torch.full((z.shape[0],), t, dtype=torch.long)
    eps_hat = m.predict(z, t_vec, y)

    mean = (z - beta/math.sqrt(1 - a_t)*eps_hat)/math.sqrt(1 - beta)
    if t_prev==t-1:
        sigma = float(s.sigma[t])
    else:
        sigma = math.sqrt((1 - a_prev)/(1 - a_t)*beta)
    if sigma>0 and t_prev>0:
        mean = mean + sigma*noise

    return mean

def timestep_sequence(T, stride):
    """Timesteps visited by the sampler: T, T-stride, ... down to the last value >= 1. The final
    update always goes to timestep 0, so the last gap may be shorter than `stride`."""

    if stride<1:
        raise ArgumentError(f'`stride` must be at least 1, got {stride}')

    return list(range(T, 0, -stride))

def sample(m, s, req, stride=1, batch_size=512, verbose=False):
    """Generate images by iterating the reverse update from pure noise.

    Parameters
    ----------
    m : DenoiserModel
        The model.
    s : NoiseSchedule
        The schedule.
    req : GenerationRequest
        Seed, label and number of images.
    stride : int
        Number of timesteps removed at each update. Values larger than 1 give faster, coarser
        generation.
    batch_size : int
        Number of images denoised together.
    verbose : bool
        Show a progress bar over batches.

    Returns
    -------
    ndarray
        float32 array (count, H, W, C) with values in [0, 1].
    """

    timesteps = timestep_sequence(s.T, stride)
    shape = m.input_shape
    output = np.empty((req.count, *shape), dtype=np.float32)

    for batch in tqdm(get_batches(req.count, batch_size), disable=not verbose, desc='sample'):
        generators = _row_generators(req.seed, 'sample', range(batch.start, batch.stop))
        z = _randn(generators, shape, m.dtype)
        y = _row_labels(m, req.label, generators)
        for t in timesteps:
            t_prev = max(t-stride, 0)
            noise = _randn(generators, shape, m.dtype) if t_prev>0 else None
            z = _reverse_step(m, s, z, t, t_prev, y, noise)
        output[batch] = to_pixel_range(z.cpu().numpy())

    return output

def inpaint_schedule(T, jump_length=10, resamplings=2):
    """Sequence of timesteps visited by the inpainting sampler. The walk goes down one step at a
    time from T to 0. Each time it reaches an anchor in range(0, T-jump_length, jump_length) it
    goes back up `jump_length` steps, `resamplings` times per anchor.

    Returns
    -------
    list of int
        Timesteps, starting at T and ending at 0. Consecutive entries differ by exactly 1.
    """

    if jump_length<1 or resamplings<0:
        raise ArgumentError('Need `jump_length` >= 1 and `resamplings` >= 0')

    jumps = {anchor: resamplings for anchor in range(0, T-jump_length, jump_length)}
    t = T
    walk = [t]
    while t>0:
        t -= 1
        walk.append(t)
        if jumps.get(t, 0)>0:
            jumps[t] -= 1
            for _ in range(jump_length):
                t += 1
                walk.append(t)

    return walk

def _check_mask(x_masked, mask):

    mask = np.asarray(mask, dtype=bool)
    if mask.ndim==2:
        mask = np.repeat(mask[..., None], x_masked.shape[-1], axis=-1)
    if mask.shape!=x_masked.shape:
        raise ArgumentError(f'Mask shape {mask.shape} incompatible with image shape {x_masked.shape}')

    return mask

def inpaint_batch(m, s, x_masked, mask, seeds, label=None, jump_length=10, resamplings=2,
                  batch_size=256, verbose=False):
    """Complete the unknown region of an image once per seed. At every reverse step the known
    pixels are replaced by the forward-noised original and the unknown pixels by the model's
    update. Resampling jumps renoise the whole image with the forward process.

    Parameters
    ----------
    m : DenoiserModel
        The model.
    s : NoiseSchedule
        The schedule.
    x_masked : ndarray
        Image (H, W, C) in [0, 1]. Only pixels where `mask` is True are used.
    mask : ndarray
        Boolean array (H, W) or (H, W, C), True for known pixels.
    seeds : list of int
        One seed per reconstruction.
    label : int, optional
        Class label for class-conditional models.
    jump_length : int
        Length of the resampling jumps.
    resamplings : int
        Number of jumps at each anchor timestep.
    batch_size : int
        Number of reconstructions computed together.
    verbose : bool
        Show a progress bar over batches.

    Returns
    -------
    ndarray
        Array (len(seeds), H, W, C) in [0, 1] whose known pixels equal `x_masked`.
    """

    x_masked = np.asarray(x_masked, dtype=np.float32)
    mask = _check_mask(x_masked, mask)
    x_masked = np.where(mask, x_masked, 0.).astype(np.float32)
    check_image(x_masked, 'x_masked')
    if x_masked.shape!=m.input_shape:
        raise ArgumentError(f'Image shape {x_masked.shape} differs from model input {m.input_shape}')

    walk = inpaint_schedule(s.T, jump_length, resamplings)
    beta = s.beta
    x0 = torch.as_tensor(to_model_range(x_masked), dtype=m.dtype)
    known = torch.as_tensor(mask)
    shape = m.input_shape
    output = np.empty((len(seeds), *shape), dtype=np.float32)

    for batch in tqdm(get_batches(len(seeds), batch_size), disable=not verbose, desc='inpaint'):
        generators = [torch.Generator().manual_seed(derive_seed(seed, 'inpaint'))
                      for seed in seeds[batch]]
        z = _randn(generators, shape, m.dtype)
        y = _row_labels(m, label, generators)
        for t, t_next in zip(walk[:-1], walk[1:]):
            if t_next<t:
                noise = _randn(generators, shape, m.dtype)
                unknown = _reverse_step(m, s, z, t, t_next, y, noise)
                if t_next==0:
                    known_part = x0.expand_as(z)
                else:
                    a_next = float(s.a[t_next])
                    known_part = (math.sqrt(a_next)*x0
                                  + math.sqrt(1 - a_next)*_randn(generators, shape, m.dtype))
                z = torch.where(known, known_part, unknown)
            else:
                noise = _randn(generators, shape, m.dtype)
                b = float(beta[t_next])
                z = math.sqrt(1 - b)*z + math.sqrt(b)*noise
        output[batch] = to_pixel_range(z.cpu().numpy())

    return np.where(mask, x_masked, output).astype(np.float32)

def inpaint(m, s, x_masked, mask, seed, label=None, jump_length=10, resamplings=2):
    """Single inpainting of `x_masked`. See `inpaint_batch`."""

    return inpaint_batch(m, s, x_masked, mask, [seed], label, jump_length, resamplings)[0]
