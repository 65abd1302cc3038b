"""Functions for handling image tensors. An image is a float array of shape (H, W, C) with values
in [0, 1]; a batch of images has shape (N, H, W, C). Models operate on the range [-1, 1]."""

import numpy as np
from skimage.measure import block_reduce
from skimage.transform import resize

from .errors import ArgumentError

LUMINANCE_WEIGHTS = np.array([0.299, 0.587, 0.114])

def check_image(x, name='image'):
    """Verify that `x` is an (H, W, C) array with values in [0, 1].

    Parameters
    ----------
    x : array_like
        The image.
    name : str
        Name used in error messages.

    Returns
    -------
    ndarray
        The image as a float array.
    """

    x = np.asarray(x)
    if x.ndim!=3 or x.size==0:
        raise ArgumentError(f'`{name}` must be a non-empty (H, W, C) array, got shape {x.shape}')
    if not np.all(np.isfinite(x)) or x.min()<0 or x.max()>1:
        raise ArgumentError(f'`{name}` must have values in [0, 1]')

    return x

def check_same_shape(a, b):
    """Raise ArgumentError if the two arrays have different shapes."""

    if np.shape(a)!=np.shape(b):
        raise ArgumentError(f'Shape mismatch: {np.shape(a)} vs {np.shape(b)}')

def to_model_range(x):
    """Pointwise affine map [0, 1] -> [-1, 1]."""

    return 2*np.asarray(x) - 1

def to_pixel_range(z):
    """Clamp to [-1, 1] and map back to [0, 1]."""

    z = np.clip(np.asarray(z), -1, 1)

    return (z + 1)/2

def hflip(x):
    """Horizontal flip of an image (H, W, C) or batch (N, H, W, C)."""

    x = np.asarray(x)

    return x[..., ::-1, :]

def is_hsymmetric(x):
    """Returns True if the image is equal to its horizontal flip."""

    return np.array_equal(x, hflip(x))

def luminance(x):
    """Gray-level version of an image. For three channels the ITU-R 601 weights are used, otherwise
    the channels are averaged.

    Parameters
    ----------
    x : ndarray
        Image of shape (H, W, C).

    Returns
    -------
    ndarray
        Array of shape (H, W).
    """

    x = np.asarray(x, dtype=float)
    if x.shape[-1]==3:
        return x @ LUMINANCE_WEIGHTS

    return x.mean(axis=-1)

def area_downsample(img_gray, grid=(8, 8)):
    """Downsample a 2D image to `grid` by averaging pixel blocks. If the image size is not a multiple
    of the grid, an anti-aliased resize is used instead.

    Parameters
    ----------
    img_gray : ndarray
        2D image.
    grid : tuple of int
        Output size.

    Returns
    -------
    ndarray
        The downsampled image.
    """

    height, width = img_gray.shape
    rows, cols = grid
    if height%rows==0 and width%cols==0:
        return block_reduce(img_gray, (height//rows, width//cols), np.mean)

    return resize(img_gray, grid, order=1, anti_aliasing=True, mode='reflect')

def tiles(x, grid):
    """Split an image into non-overlapping tiles.

    Parameters
    ----------
    x : ndarray
        Image (H, W, C) or batch (N, H, W, C).
    grid : tuple of int
        Number of tiles along the rows and columns. Must divide the image size.

    Returns
    -------
    ndarray
        Array of shape (..., rows*cols, tile_size), each tile flattened.
    """

    x = np.asarray(x)
    rows, cols = grid
    height, width, channels = x.shape[-3:]
    if rows<1 or cols<1 or height%rows!=0 or width%cols!=0:
        raise ArgumentError(f'Grid {grid} does not divide image size {(height, width)}')

    th, tw = height//rows, width//cols
    lead = x.shape[:-3]
    x = x.reshape(*lead, rows, th, cols, tw, channels)
    x = np.moveaxis(x, -3, -4)            # (..., rows, cols, th, tw, C)

    return x.reshape(*lead, rows*cols, th*tw*channels)
