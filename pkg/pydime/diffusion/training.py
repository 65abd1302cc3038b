"""Stochastic minimization of the diffusion loss, with optional augmentation and per-example
gradient clipping and noising."""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch.func import functional_call, grad, vmap
from tqdm import tqdm

from ..errors import ArgumentError, ConfigurationError, TrainingError
from ..image import to_model_range
from ..util import derive_seed
from .model import build_model, flip_images, noised_input, per_example_loss

logger = logging.getLogger(__name__)

OPTIMIZER_HPARAMS = {'name': 'RMSprop', 'alpha': 0.99, 'eps': 1e-8, 'momentum': 0.,
                     'weight_decay': 0.}

@dataclass
class TrainingConfig:
    """Hyperparameters of `train`.

    Attributes
    ----------
    steps : int
        Number of gradient updates.
    batch_size : int
        Number of examples per update. Examples are drawn with replacement.
    learning_rate : float
        Step size of the optimizer.
    seed : int
        Master seed of the run. Initialization, batches, timesteps and noise derive from it.
    flip_augment : bool
        If True, each batch element is horizontally flipped with probability 1/2.
    clip_norm : float, optional
        Bound on the 2-norm of each per-example gradient.
    noise_multiplier : float, optional
        Deviation of the Gaussian noise added to the sum of clipped gradients, relative to
        `clip_norm`.
    checkpoint_every : int
        Interval, in steps, of the checkpoint callback. 0 disables checkpoints.
    deterministic : bool
        Request deterministic torch kernels during training.
    """

    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    flip_augment: bool = False
    clip_norm: Optional[float] = None
    noise_multiplier: Optional[float] = None
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):

        if self.steps<0:
            raise ConfigurationError('`steps` must be non-negative')
        if self.batch_size<1:
            raise ConfigurationError('`batch_size` must be positive')
        if not self.learning_rate>0:
            raise ConfigurationError('`learning_rate` must be positive')
        if self.clip_norm is not None and not self.clip_norm>0:
            raise ConfigurationError('`clip_norm` must be positive when set')
        if self.noise_multiplier is not None:
            if self.clip_norm is None:
                raise ConfigurationError('`noise_multiplier` requires `clip_norm`')
            if self.noise_multiplier<0:
                raise ConfigurationError('`noise_multiplier` must be non-negative')
        if self.checkpoint_every<0:
            raise ConfigurationError('`checkpoint_every` must be non-negative')

    def to_dict(self):

        return asdict(self)

def augment_batch(x, generator):
    """Replace each row of a (B, H, W, C) batch of clean images by its horizontal flip with
    probability 1/2."""

    flip = torch.rand(x.shape[0], generator=generator) < 0.5

    return torch.where(flip.view(-1, 1, 1, 1), flip_images(x), x)

def clip_per_example(grads, clip_norm):
    """Rescale each row of a per-example gradient matrix to have 2-norm at most `clip_norm`.
    Rows with smaller norm are unchanged.

    Parameters
    ----------
    grads : torch.Tensor
        Matrix of shape (B, P).
    clip_norm : float
        The bound C.

    Returns
    -------
    torch.Tensor
        float64 matrix with rows scaled by min(1, C/||g||).
    """

    if clip_norm<=0:
        raise ArgumentError('`clip_norm` must be positive')

    grads = grads.to(torch.float64)
    norms = torch.linalg.vector_norm(grads, dim=1, keepdim=True)
    factors = torch.clamp(clip_norm/torch.clamp(norms, min=1e-300), max=1.)

    return grads*factors

def _per_example_grads(model, z, t, eps, y):
    """Gradient of the loss of each example, flattened in the order of `net.parameters()`."""

    net = model.net
    params = {name: p.detach() for name, p in net.named_parameters()}
    conditional = model.arch.is_conditional

    def example_loss(params, z_i, t_i, eps_i, y_i):
        y_in = y_i[None] if conditional else None
        pred = functional_call(net, params, (z_i[None], t_i[None], y_in))
        loss = ((pred[0] - eps_i)**2).mean()
        return loss, loss

    grads, losses = vmap(grad(example_loss, has_aux=True), in_dims=(None, 0, 0, 0, 0))(
        params, z, t, eps, y)
    batch_size = z.shape[0]
    flat = torch.cat([grads[name].reshape(batch_size, -1) for name in params], dim=1)

    return flat, losses

def _private_step(model, optimizer, x, t, eps, y, cfg, generator):
    """One update with clipped and optionally noised per-example gradients."""

    z = noised_input(model.schedule, x, t, eps)
    flat, losses = _per_example_grads(model, z, t, eps, y)
    total = clip_per_example(flat, cfg.clip_norm).sum(dim=0)
    if cfg.noise_multiplier:
        std = cfg.noise_multiplier*cfg.clip_norm
        total = total + std*torch.randn(total.shape, generator=generator, dtype=torch.float64)
    total = total/x.shape[0]

    optimizer.zero_grad()
    offset = 0
    for p in model.net.parameters():
        num = p.numel()
        p.grad = total[offset:offset+num].view_as(p).to(p.dtype)
        offset += num
    optimizer.step()

    return losses.mean()

def _plain_step(model, optimizer, x, t, eps, y):
    """One update on the batch mean of the loss."""

    optimizer.zero_grad()
    loss = per_example_loss(model, x, t, eps, y).mean()
    loss.backward()
    optimizer.step()

    return loss

def train(data, cfg, s, arch, on_checkpoint=None, verbose=False):
    """Train a denoiser on a dataset by minimizing the diffusion loss with timesteps drawn
    uniformly from [1, T] and fresh Gaussian noise for every example.

    Parameters
    ----------
    data : Dataset
        Training images.
    cfg : TrainingConfig
        Training hyperparameters.
    s : NoiseSchedule
        Noise schedule.
    arch : Architecture
        Network description.
    on_checkpoint : callable, optional
        Called as on_checkpoint(step, model) for step 0 and every `cfg.checkpoint_every` steps.
    verbose : bool
        Show a progress bar.

    Returns
    -------
    DenoiserModel
        The trained model. Its attribute `history` contains the mean loss of each step.
    """

    if len(data)==0:
        raise ArgumentError('Cannot train on an empty dataset')
    if arch.is_conditional and data.labels is None:
        raise ConfigurationError('A class-conditional model needs a labeled dataset')

    model = build_model(arch, data.shape, s, seed=derive_seed(cfg.seed, 'init'))
    model.train_config = cfg.to_dict()
    generator = torch.Generator().manual_seed(derive_seed(cfg.seed, 'train'))
    optimizer = torch.optim.RMSprop(model.net.parameters(), lr=cfg.learning_rate,
                                    alpha=OPTIMIZER_HPARAMS['alpha'], eps=OPTIMIZER_HPARAMS['eps'],
                                    momentum=OPTIMIZER_HPARAMS['momentum'],
                                    weight_decay=OPTIMIZER_HPARAMS['weight_decay'])

    images = torch.as_tensor(to_model_range(data.images), dtype=model.dtype)
    if arch.is_conditional:
        labels = torch.from_numpy(data.labels.copy())
    else:
        labels = torch.zeros(len(data), dtype=torch.long)

    checkpointing = on_checkpoint is not None and cfg.checkpoint_every>0
    if checkpointing:
        on_checkpoint(0, model)

    logger.info('Training for %d steps on %d images (clip_norm=%s, noise_multiplier=%s)',
                cfg.steps, len(data), cfg.clip_norm, cfg.noise_multiplier)

    previous_mode = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(cfg.deterministic)
    model.net.train()
    try:
        for step in tqdm(range(1, cfg.steps+1), disable=not verbose, desc='train'):
            idx = torch.randint(0, len(data), (cfg.batch_size,), generator=generator)
            x = images[idx]
            if cfg.flip_augment:
                x = augment_batch(x, generator)
            t = torch.randint(1, s.T+1, (cfg.batch_size,), generator=generator)
            eps = torch.randn(x.shape, generator=generator, dtype=model.dtype)
            y = labels[idx]

            if cfg.clip_norm is None:
                loss = _plain_step(model, optimizer, x, t, eps, y)
            else:
                loss = _private_step(model, optimizer, x, t, eps, y, cfg, generator)

            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise TrainingError(f'Non-finite training loss at step {step}')

            model.step = step
            model.examples_seen = step*cfg.batch_size
            model.history.append(loss_value)
            if checkpointing and step%cfg.checkpoint_every==0:
                on_checkpoint(step, model)
    finally:
        torch.use_deterministic_algorithms(previous_mode)
        model.net.eval()

    if model.history:
        logger.info('Finished training, loss %.4g -> %.4g', model.history[0], model.history[-1])

    return model
