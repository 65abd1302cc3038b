"""Distances between images, stand-in embeddings, neighbor search and outlier scores. All
distances are computed on images in [0, 1]."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .errors import ArgumentError, DegenerateInputError
from .image import area_downsample, check_same_shape, luminance, tiles
from .util import get_batches, write_table

logger = logging.getLogger(__name__)

EMBEDDING_GRID = (8, 8)
METRICS = ('l2', 'cosine')

def l2_normalized(a, b):
    """Euclidean distance divided by the square root of the number of values,
    sqrt(sum((a-b)**2)/d).

    Parameters
    ----------
    a : ndarray
        First image.
    b : ndarray
        Second image, with the same shape as `a`.

    Returns
    -------
    float
        The distance. For images in [0, 1] it is also in [0, 1].
    """

    check_same_shape(a, b)
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.size==0:
        raise ArgumentError('Cannot compute the distance between empty images')

    return float(np.sqrt(np.mean(diff**2)))

def tiled_l2(a, b, grid):
    """Maximum of `l2_normalized` over corresponding non-overlapping tiles of two images.

    Parameters
    ----------
    a : ndarray
        Image (H, W, C).
    b : ndarray
        Image (H, W, C).
    grid : tuple of int
        Number of tiles along rows and columns. Must divide the image size.

    Returns
    -------
    float
        The largest tile distance.
    """

    check_same_shape(a, b)
    ta = tiles(np.asarray(a, dtype=np.float64), grid)
    tb = tiles(np.asarray(b, dtype=np.float64), grid)
    tile_dist = np.sqrt(np.mean((ta - tb)**2, axis=-1))

    return float(tile_dist.max())

def _flatten(batch):

    batch = np.asarray(batch, dtype=np.float64)

    return batch.reshape(len(batch), -1)

def pairwise_l2(batch_a, batch_b=None):
    """Matrix of `l2_normalized` distances between two batches of images.

    Parameters
    ----------
    batch_a : ndarray
        Batch (N, H, W, C).
    batch_b : ndarray, optional
        Batch (M, H, W, C). If None, `batch_a` is used.

    Returns
    -------
    ndarray
        Array (N, M).
    """

    flat_a = _flatten(batch_a)
    flat_b = flat_a if batch_b is None else _flatten(batch_b)
    if flat_a.shape[1]!=flat_b.shape[1]:
        raise ArgumentError('Batches contain images of different sizes')

    return cdist(flat_a, flat_b)/np.sqrt(flat_a.shape[1])

def tiled_l2_matrix(batch_a, grid, batch_b=None):
    """Matrix of `tiled_l2` distances between two batches of images."""

    tiles_a = tiles(np.asarray(batch_a, dtype=np.float64), grid)
    tiles_b = tiles_a if batch_b is None else tiles(np.asarray(batch_b, dtype=np.float64), grid)
    if tiles_a.shape[1:]!=tiles_b.shape[1:]:
        raise ArgumentError('Batches contain images of different sizes')

    tile_size = tiles_a.shape[-1]
    dist = np.zeros((len(tiles_a), len(tiles_b)))
    for idx in range(tiles_a.shape[1]):
        dist = np.maximum(dist, cdist(tiles_a[:, idx], tiles_b[:, idx]))

    return dist/np.sqrt(tile_size)

def relative_distance(xhat, x, neighbors, alpha=0.5):
    """Distance of a generation to a training image relative to the mean distance to its nearest
    training neighbors, l2(xhat, x)/(alpha*mean(l2(xhat, y) for y in neighbors)). Small values
    indicate that `xhat` is abnormally close to `x`.

    Parameters
    ----------
    xhat : ndarray
        Generated image.
    x : ndarray
        Training image.
    neighbors : NeighborSet
        The n nearest training images of `xhat`, with l2 distances.
    alpha : float
        Scale of the neighborhood distance.

    Returns
    -------
    float
        The relative distance.
    """

    if alpha<=0:
        raise ArgumentError('`alpha` must be positive')
    if neighbors.k==0:
        raise DegenerateInputError('Relative distance needs at least one neighbor')

    scale = alpha*float(np.mean(neighbors.distances))
    if scale==0:
        raise DegenerateInputError('All neighbors are at distance 0, relative distance is undefined')

    return l2_normalized(xhat, x)/scale

@dataclass
class Embedding:
    """Stand-in image embedding. `constant` is True for images without contrast, in which case
    `vec` is the zero vector."""

    vec: np.ndarray
    constant: bool = False

    @property
    def dim(self):

        return len(self.vec)

def embed(x, grid=EMBEDDING_GRID):
    """Embed an image as its luminance, block-averaged to `grid`, mean-subtracted and scaled to
    unit norm.

    Parameters
    ----------
    x : ndarray
        Image (H, W, C) in [0, 1].
    grid : tuple of int
        Size of the downsampled luminance.

    Returns
    -------
    Embedding
        Vector of dimension grid[0]*grid[1].
    """

    small = area_downsample(luminance(x), grid)
    vec = small.ravel() - small.mean()
    norm = np.linalg.norm(vec)
    if norm<1e-12:
        return Embedding(np.zeros(vec.size), constant=True)

    return Embedding(vec/norm)

def embed_batch(images, grid=EMBEDDING_GRID):
    """Embed a batch of images.

    Returns
    -------
    vectors : ndarray
        Array (N, grid[0]*grid[1]).
    constant : ndarray
        Boolean flags of images without contrast.
    """

    embeddings = [embed(img, grid) for img in images]
    dim = grid[0]*grid[1]
    vectors = np.array([emb.vec for emb in embeddings]).reshape(len(embeddings), dim)
    constant = np.array([emb.constant for emb in embeddings], dtype=bool)

    return vectors, constant

def cosine_similarity(u, v):
    """Cosine of the angle between two embeddings (or plain vectors)."""

    u = np.asarray(u.vec if isinstance(u, Embedding) else u, dtype=np.float64)
    v = np.asarray(v.vec if isinstance(v, Embedding) else v, dtype=np.float64)
    if u.shape!=v.shape:
        raise ArgumentError(f'Embedding dimensions differ: {u.shape} vs {v.shape}')
    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)
    if norm_u==0 or norm_v==0:
        raise DegenerateInputError('Cosine similarity is undefined for zero-norm vectors')

    return float(np.clip(u @ v/(norm_u*norm_v), -1., 1.))

@dataclass
class NeighborSet:
    """Nearest corpus items of a query, sorted by increasing distance."""

    query: Optional[int]
    ids: np.ndarray
    distances: np.ndarray

    @property
    def k(self):

        return len(self.ids)

def _distances(query, corpus, metric):
    """Distances between one query row and each corpus row."""

    if metric=='l2':
        return cdist(query[None], corpus)[0]/np.sqrt(corpus.shape[1])
    with np.errstate(invalid='ignore', divide='ignore'):
        dist = cdist(query[None], corpus, metric='cosine')[0]
    # Zero vectors have no direction
    return np.nan_to_num(dist, nan=1.)

def nearest_neighbors(query, corpus, k, metric='l2', query_id=None, exclude=None,
                      num_threads=1, chunk_size=4096):
    """Exact k nearest neighbors by linear scan. Ties are broken by ascending corpus id.

    Parameters
    ----------
    query : ndarray
        Image or embedding vector.
    corpus : ndarray
        Array (N, ...) of images or embedding vectors with the same shape as `query`.
    k : int
        Number of neighbors.
    metric : {'l2', 'cosine'}
        'l2' is `l2_normalized`, 'cosine' is 1 - cosine similarity.
    query_id : int, optional
        Id of the query, stored in the result.
    exclude : int, optional
        Corpus id that is not returned, used to avoid self-matches.
    num_threads : int
        If larger than 1, the corpus is split in chunks scanned in parallel. The result is
        identical to the serial scan.
    chunk_size : int
        Number of corpus items per chunk for the parallel scan.

    Returns
    -------
    NeighborSet
        The neighbors.
    """

    if metric not in METRICS:
        raise ArgumentError(f'Unknown metric {metric}, use one of {METRICS}')
    corpus = np.asarray(corpus, dtype=np.float64)
    if len(corpus)==0:
        raise ArgumentError('Cannot search neighbors in an empty corpus')
    corpus = corpus.reshape(len(corpus), -1)
    query = np.asarray(query, dtype=np.float64).ravel()
    if query.size!=corpus.shape[1]:
        raise ArgumentError('Query and corpus items have different sizes')

    num_available = len(corpus) - (exclude is not None)
    if not 0<=k<=num_available:
        raise ArgumentError(f'k={k} outside [0, {num_available}]')

    if num_threads>1:
        chunks = get_batches(len(corpus), chunk_size)
        with ThreadPoolExecutor(max_workers=num_threads) as executor:
            parts = executor.map(lambda chunk: _distances(query, corpus[chunk], metric), chunks)
            dist = np.concatenate(list(parts))
    else:
        dist = _distances(query, corpus, metric)

    order = np.argsort(dist, kind='stable')
    if exclude is not None:
        order = order[order!=exclude]
    order = order[:k]

    return NeighborSet(query_id, order, dist[order])

def outlier_score(x, corpus, k, metric='cosine', exclude=None):
    """Mean distance of an embedding to its k nearest neighbors in a corpus of embeddings.
    Larger values indicate more atypical images.

    Parameters
    ----------
    x : Embedding or ndarray
        The embedding.
    corpus : ndarray
        Embeddings (N, dim).
    k : int
        Number of neighbors.
    metric : {'l2', 'cosine'}
        Distance used.
    exclude : int, optional
        Corpus id of `x` itself, if it belongs to the corpus.

    Returns
    -------
    float
        The score.
    """

    vec = x.vec if isinstance(x, Embedding) else x
    neighbors = nearest_neighbors(vec, corpus, k, metric, exclude=exclude)
    if neighbors.k==0:
        raise DegenerateInputError('Outlier score needs at least one neighbor')

    return float(neighbors.distances.mean())

def write_distance_table(path, matrix, row_ids=None, col_ids=None):
    """Write a distance matrix as a CSV file. The header row contains the column ids and the
    first column the row ids."""

    matrix = np.asarray(matrix)
    if row_ids is None:
        row_ids = np.arange(matrix.shape[0])
    if col_ids is None:
        col_ids = np.arange(matrix.shape[1])

    table = pd.DataFrame(matrix, columns=[str(idx) for idx in col_ids])
    table.insert(0, 'id', list(row_ids))

    return write_table(path, table)
