"""Trainable noise predictor and the diffusion loss."""

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from ..errors import ArgumentError, ConfigurationError
from ..image import check_image, check_same_shape, to_model_range

CONDITIONING_MODES = ('unconditional', 'class')

@dataclass
class Architecture:
    """Description of the denoiser network.

    Attributes
    ----------
    hidden : tuple of int
        Width of the hidden layers.
    time_dim : int
        Dimension of the sinusoidal time embedding. Must be even.
    conditioning : {'unconditional', 'class'}
        Whether the model receives a class label.
    num_classes : int
        Number of classes of a class-conditional model.
    """

    hidden: tuple = (512, 512)
    time_dim: int = 64
    conditioning: str = 'unconditional'
    num_classes: int = 0

    def __post_init__(self):

        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden)==0 or min(self.hidden)<1:
            raise ConfigurationError('`hidden` must contain at least one positive width')
        if self.time_dim<2 or self.time_dim%2!=0:
            raise ConfigurationError('`time_dim` must be a positive even number')
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigurationError(f'`conditioning` must be one of {CONDITIONING_MODES}')
        if self.conditioning=='class' and self.num_classes<1:
            raise ConfigurationError('A class-conditional model needs `num_classes` >= 1')

    @property
    def is_conditional(self):

        return self.conditioning=='class'

    def to_dict(self):

        arch = asdict(self)
        arch['hidden'] = list(self.hidden)
        return arch

    @classmethod
    def from_dict(cls, arch):

        try:
            return cls(**arch)
        except TypeError as exc:
            raise ConfigurationError(f"Invalid architecture description: {exc}") from exc

def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps.

    Parameters
    ----------
    t : torch.Tensor
        Tensor of shape (B,) with timesteps.
    dim : int
        Embedding dimension.

    Returns
    -------
    torch.Tensor
        Tensor of shape (B, dim).
    """

    half = dim//2
    freqs = torch.exp(-math.log(10000.)*torch.arange(half, dtype=torch.float64)/half)
    args = t.to(torch.float64)[:, None]*freqs[None]
    emb = torch.cat((torch.sin(args), torch.cos(args)), dim=-1)

    return emb

class MLPDenoiser(nn.Module):
    """Fully connected noise predictor. The flattened input goes through a linear layer to which
    a time embedding and, for class-conditional models, a class embedding are added. The result
    goes through `len(hidden)-1` hidden layers and a linear output layer having the size of the
    input.
    """

    def __init__(self, input_shape, arch):
        super().__init__()

        dim = int(np.prod(input_shape))
        width = arch.hidden[0]

        self.input_shape = tuple(input_shape)
        self.time_dim = arch.time_dim
        self.inp = nn.Linear(dim, width)
        self.time_mlp = nn.Sequential(nn.Linear(arch.time_dim, width), nn.SiLU(),
                                      nn.Linear(width, width))
        if arch.is_conditional:
            self.label_emb = nn.Embedding(arch.num_classes, width)
        else:
            self.label_emb = None
        self.layers = nn.ModuleList(nn.Linear(h_in, h_out)
                                    for h_in, h_out in zip(arch.hidden[:-1], arch.hidden[1:]))
        self.out = nn.Linear(arch.hidden[-1], dim)
        self.act = nn.SiLU()

    def forward(self, z, t, y=None):

        dtype = self.inp.weight.dtype
        h = self.inp(z.flatten(1))
        h = h + self.time_mlp(timestep_embedding(t, self.time_dim).to(dtype))
        if self.label_emb is not None and y is not None:
            h = h + self.label_emb(y)
        h = self.act(h)
        for layer in self.layers:
            h = self.act(layer(h))

        return self.out(h).reshape(z.shape)

class DenoiserModel:
    """Noise predictor f_theta together with its architecture and noise schedule.

    Parameters
    ----------
    net : torch.nn.Module
        Module with signature net(z, t, y) -> eps prediction, operating on (B, H, W, C) tensors
        in the model range.
    arch : Architecture
        Description of the network.
    input_shape : tuple of int
        Image shape (H, W, C).
    schedule : NoiseSchedule
        Schedule used in training and for computing losses.

    Attributes
    ----------
    step : int
        Number of training updates applied.
    examples_seen : int
        Number of training examples processed, step*batch_size.
    history : list of float
        Mean training loss of each update.
    """

    def __init__(self, net, arch, input_shape, schedule):

        self.net = net
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.schedule = schedule
        self.step = 0
        self.examples_seen = 0
        self.history = []
        self.train_config = None

    @property
    def dtype(self):

        return next(self.net.parameters()).dtype

    @property
    def num_params(self):

        return sum(p.numel() for p in self.net.parameters())

    @property
    def theta(self):
        """Flat parameter vector, as a numpy array."""

        return parameters_to_vector(self.net.parameters()).detach().cpu().numpy().copy()

    def load_theta(self, theta):
        """Set the parameters from a flat vector."""

        theta = torch.as_tensor(np.array(theta), dtype=self.dtype)
        if theta.numel()!=self.num_params:
            raise ArgumentError(f'Expected {self.num_params} parameters, got {theta.numel()}')
        vector_to_parameters(theta, self.net.parameters())

    def copy(self):
        """Independent copy of the model, including step and history."""

        return copy.deepcopy(self)

    def label_tensor(self, labels, batch_size):
        """Convert labels to a tensor accepted by the network. Unconditional models ignore labels."""

        if not self.arch.is_conditional:
            return torch.zeros(batch_size, dtype=torch.long)
        if labels is None:
            raise ArgumentError('A class-conditional model requires labels')

        labels = torch.as_tensor(np.broadcast_to(np.asarray(labels), (batch_size,)).copy(),
                                 dtype=torch.long)
        if labels.min()<0 or labels.max()>=self.arch.num_classes:
            raise ArgumentError(f'Labels must be in [0, {self.arch.num_classes})')

        return labels

    def predict(self, z, t, y):
        """Noise prediction for a batch of noised inputs, without gradient tracking.

        Parameters
        ----------
        z : torch.Tensor
            Noised inputs (B, H, W, C) in the model range.
        t : torch.Tensor
            Timesteps (B,).
        y : torch.Tensor
            Labels (B,).

        Returns
        -------
        torch.Tensor
            The predicted noise.
        """

        with torch.no_grad():
            return self.net(z.to(self.dtype), t, y if self.arch.is_conditional else None)

    def __repr__(self):

        return (f'DenoiserModel(input_shape={self.input_shape}, arch={self.arch}, '
                f'T={self.schedule.T}, step={self.step})')

def build_model(arch, input_shape, schedule, seed=0, dtype=torch.float32):
    """Create a denoiser with deterministic initialization.

    Parameters
    ----------
    arch : Architecture
        Description of the network.
    input_shape : tuple of int
        Image shape (H, W, C).
    schedule : NoiseSchedule
        The noise schedule.
    seed : int
        Seed of the parameter initialization.
    dtype : torch.dtype
        Parameter type. float64 is used for gradient checks.

    Returns
    -------
    DenoiserModel
        The model.
    """

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed)%(2**63))
        net = MLPDenoiser(input_shape, arch).to(dtype)

    return DenoiserModel(net, arch, input_shape, schedule)

def from_theta(arch, input_shape, schedule, theta, dtype=torch.float32):
    """Create a model whose parameters are given by the flat vector `theta`."""

    model = build_model(arch, input_shape, schedule, dtype=dtype)
    model.load_theta(theta)

    return model

def flip_images(x):
    """Horizontal flip of a (B, H, W, C) tensor along the width axis."""

    return torch.flip(x, dims=(2,))

def noised_input(schedule, x, t, eps):
    """Torch version of `add_noise` for batches with one timestep per row."""

    a_t = torch.as_tensor(schedule.a, dtype=x.dtype)[t].view(-1, 1, 1, 1)

    return torch.sqrt(a_t)*x + torch.sqrt(1 - a_t)*eps

def per_example_loss(model, x, t, eps, y):
    """Diffusion loss of each row of a batch, with gradient tracking. Inputs are tensors in the
    model range. The loss is the mean squared error over pixel dimensions.

    Returns
    -------
    torch.Tensor
        Tensor of shape (B,).
    """

    z = noised_input(model.schedule, x, t, eps)
    pred = model.net(z, t, y if model.arch.is_conditional else None)

    return ((pred - eps)**2).flatten(1).mean(dim=1)

def _loss_inputs(m, x, t, eps, label):
    """Validate and convert the arguments of `diffusion_loss` to batched tensors."""

    x = check_image(x, 'x')
    check_same_shape(x, eps)
    if x.shape!=m.input_shape:
        raise ArgumentError(f'Image shape {x.shape} differs from model input {m.input_shape}')
    t = m.schedule.check_timestep(t)

    x_t = torch.as_tensor(to_model_range(x)[None], dtype=m.dtype)
    eps_t = torch.as_tensor(np.asarray(eps)[None], dtype=m.dtype)
    t_t = torch.tensor([t])
    y_t = m.label_tensor(label, 1)

    return x_t, t_t, eps_t, y_t

def diffusion_loss(m, x, t, eps, label=None):
    """Loss || eps - f_theta(sqrt(a_t) x + sqrt(1 - a_t) eps, t) ||^2, averaged over pixel
    dimensions.

    Parameters
    ----------
    m : DenoiserModel
        The model.
    x : ndarray
        Image (H, W, C) in [0, 1]. It is mapped to the model range before noising.
    t : int
        Timestep in [0, T].
    eps : ndarray
        Noise with the same shape as `x`.
    label : int, optional
        Class label for class-conditional models.

    Returns
    -------
    float
        The loss.
    """

    x_t, t_t, eps_t, y_t = _loss_inputs(m, x, t, eps, label)
    with torch.no_grad():
        loss = per_example_loss(m, x_t, t_t, eps_t, y_t)

    return float(loss[0])

def diffusion_loss_grad(m, x, t, eps, label=None):
    """Gradient of `diffusion_loss` with respect to the flat parameter vector.

    Returns
    -------
    loss : float
        The loss value.
    grad : ndarray
        The gradient, with the same layout as `m.theta`.
    """

    x_t, t_t, eps_t, y_t = _loss_inputs(m, x, t, eps, label)
    m.net.zero_grad()
    loss = per_example_loss(m, x_t, t_t, eps_t, y_t)[0]
    loss.backward()
    grad = torch.cat([p.grad.reshape(-1) for p in m.net.parameters()])
    m.net.zero_grad()

    return float(loss.detach()), grad.detach().cpu().numpy()
