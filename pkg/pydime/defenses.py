"""Defense evaluation and auditing: deduplication of a training set with image embeddings, and
insertion of noise canaries whose exposure measures how much a model memorizes them."""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
from scipy import special, stats

from .diffusion.sampling import GenerationRequest, sample
from .diffusion.training import train
from .errors import ArgumentError, ConfigurationError, StateError
from .extraction import GenerationBatch, untargeted_extraction_scan
from .membership import averaged_losses
from .metrics import EMBEDDING_GRID, embed_batch
from .util import derive_seed, get_batches

logger = logging.getLogger(__name__)

# Rounding slack of the embedding dot products; exact duplicates must pass threshold 1
SIMILARITY_TOLERANCE = 1e-9

@dataclass
class DedupResult:
    """Outcome of `deduplicate`.

    Attributes
    ----------
    kept : ndarray
        Ids of the images kept, in increasing order.
    removed : ndarray
        Ids of the removed images.
    representatives : ndarray
        For each removed image, the kept image it duplicates.
    similarities : ndarray
        Cosine similarity between each removed image and its representative.
    threshold : float
        Similarity threshold used.
    """

    kept: np.ndarray
    removed: np.ndarray
    representatives: np.ndarray
    similarities: np.ndarray
    threshold: float

    @property
    def num_removed(self):

        return len(self.removed)

    def apply(self, data):
        """Dataset containing only the kept images. The provenance links to `data`."""

        return data.subset(self.kept, operation=f'dedup(threshold={self.threshold})')

    def to_table(self):

        return pd.DataFrame({'id': self.removed, 'representative': self.representatives,
                             'similarity': self.similarities})

def deduplicate(data, threshold=0.85, grid=EMBEDDING_GRID, chunk_size=1024):
    """Remove near-duplicate images. Images are visited in increasing id order and an image is
    removed if its embedding has cosine similarity at least `threshold` with an image kept
    before it, up to `SIMILARITY_TOLERANCE`, so a recorded similarity can be below `threshold` by
    at most that amount. Images without contrast have no embedding direction and are only
    matched to kept images with identical pixels.

    Parameters
    ----------
    data : Dataset
        The dataset.
    threshold : float
        Similarity threshold in (0, 1].
    grid : tuple of int
        Embedding grid.
    chunk_size : int
        Number of rows of the similarity matrix computed at once.

    Returns
    -------
    DedupResult
        Kept and removed ids.
    """

    if not 0<threshold<=1:
        raise ArgumentError('`threshold` must be in (0, 1]')

    vectors, constant = embed_batch(data.images, grid)
    num_images = len(data)
    kept_mask = np.zeros(num_images, dtype=bool)
    removed, representatives, similarities = [], [], []
    kept_constant = []

    for chunk in get_batches(num_images, chunk_size):
        sim = vectors[chunk] @ vectors.T
        for row, idx in enumerate(range(chunk.start, chunk.stop)):
            if constant[idx]:
                rep = next((j for j in kept_constant
                            if np.array_equal(data.images[j], data.images[idx])), None)
                if rep is None:
                    kept_constant.append(idx)
                    kept_mask[idx] = True
                else:
                    removed.append(idx)
                    representatives.append(rep)
                    similarities.append(1.)
                continue

            candidates = np.nonzero(kept_mask[:idx] & ~constant[:idx])[0]
            cand_sim = sim[row, candidates]
            close = cand_sim>=threshold-SIMILARITY_TOLERANCE
            if close.any():
                # Most similar kept image, lowest id on ties
                best = int(np.argmax(np.where(close, cand_sim, -np.inf)))
                removed.append(idx)
                representatives.append(int(candidates[best]))
                similarities.append(float(min(cand_sim[best], 1.)))
            else:
                kept_mask[idx] = True

    result = DedupResult(np.nonzero(kept_mask)[0], np.array(removed, dtype=np.int64),
                         np.array(representatives, dtype=np.int64), np.array(similarities),
                         float(threshold))
    logger.info('Deduplication at %.3f removed %d of %d images', threshold, result.num_removed,
                num_images)

    return result

def _count_extractions(data, cfg, s, arch, num_generations, seed, train_set, extract_params):

    model = train(data, cfg, s, arch)
    label = 0 if model.arch.is_conditional else None
    images = sample(model, s, GenerationRequest(seed, label, num_generations))
    seeds = [derive_seed(seed, 'sample', idx) for idx in range(num_generations)]
    batch = GenerationBatch(images, seeds, label, 'dedup-experiment')

    return len(untargeted_extraction_scan(batch, train_set, **extract_params))

def dedup_defense_experiment(data, threshold, cfg, s, arch, num_generations=1024, seed=0,
                             **extract_params):
    """Measure the effect of deduplication on extraction. Two models are trained with the same
    configuration, one on `data` and one on its deduplicated version, and the unique training
    images extracted by `num_generations` generations of each are counted against `data`.

    Parameters
    ----------
    data : Dataset
        Training set.
    threshold : float
        Deduplication threshold.
    cfg : TrainingConfig
        Training configuration shared by both models.
    s : NoiseSchedule
        Noise schedule.
    arch : Architecture
        Network description.
    num_generations : int
        Number of generations of each model.
    seed : int
        Seed of the generations, shared by both models.
    **extract_params
        Keyword arguments of `untargeted_extraction_scan` (alpha, n, score_cutoff, delta,
        eidetic_delta).

    Returns
    -------
    pandas.DataFrame
        One row with columns threshold, removed, count_before, count_after.
    """

    dedup = deduplicate(data, threshold)
    logger.info('Training on the original dataset')
    before = _count_extractions(data, cfg, s, arch, num_generations, seed, data, extract_params)
    logger.info('Training on the deduplicated dataset')
    after = _count_extractions(dedup.apply(data), cfg, s, arch, num_generations, seed, data,
                               extract_params)

    return pd.DataFrame({'threshold': [threshold], 'removed': [dedup.num_removed],
                         'count_before': [before], 'count_after': [after]})

@dataclass
class CanaryPool:
    """Pool of uniform noise images, some of which are inserted in a training set.

    Attributes
    ----------
    canaries : ndarray
        Array (P, H, W, C) in [0, 1]. P must be a power of two.
    seed : int
        Seed used to generate the pool.
    inserted : dict
        Maps canary id to the number of copies inserted. Canaries absent from the dict (or with
        count 0) were not inserted.
    losses : ndarray, optional
        Loss of every canary under the audited model.
    """

    canaries: np.ndarray = field(repr=False)
    seed: int = 0
    inserted: dict = field(default_factory=dict)
    losses: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):

        size = len(self.canaries)
        if size<2 or size & (size-1):
            raise ConfigurationError(f'Canary pool size must be a power of two >= 2, got {size}')
        if any(not 0<=idx<size for idx in self.inserted):
            raise ArgumentError('Inserted canary id outside the pool')

    @property
    def pool_size(self):

        return len(self.canaries)

    @property
    def max_exposure(self):

        return float(np.log2(self.pool_size))

    def duplicate_count(self, canary_id):

        return int(self.inserted.get(canary_id, 0))

def generate_canaries(pool_size, shape, seed=0):
    """Pool of `pool_size` images of independent uniform noise."""

    rng = np.random.default_rng(derive_seed(seed, 'canaries'))
    canaries = rng.random((pool_size, *shape), dtype=np.float32)

    return CanaryPool(canaries, seed)

def assign_duplicate_counts(counts, per_count=1):
    """Map canary ids to duplicate counts, `per_count` consecutive canaries for each count.

    For instance counts (1, 2) with per_count 2 gives {0: 1, 1: 1, 2: 2, 3: 2}.
    """

    assignment = {}
    for count in counts:
        for _ in range(per_count):
            assignment[len(assignment)] = int(count)

    return assignment

def insert_canaries(data, pool, duplicate_counts, label=0):
    """Append duplicated canaries to a dataset.

    Parameters
    ----------
    data : Dataset
        Training set.
    pool : CanaryPool
        The pool.
    duplicate_counts : dict
        Maps canary id to the number of copies inserted.
    label : int
        Label of the canaries, used if `data` is labeled.

    Returns
    -------
    dataset : Dataset
        New dataset. provenance['canaries'] maps canary id to the ids of its copies.
    pool : CanaryPool
        Copy of the pool with `inserted` set.
    """

    if any(count<0 for count in duplicate_counts.values()):
        raise ArgumentError('Duplicate counts must be non-negative')
    if pool.canaries.shape[1:]!=data.shape:
        raise ArgumentError(f'Canary shape {pool.canaries.shape[1:]} differs from {data.shape}')

    ids = [idx for idx, count in sorted(duplicate_counts.items()) for _ in range(count)]
    if not ids:
        logger.warning('No canary inserted')
    labels = None if data.labels is None else [label]*len(ids)
    images = pool.canaries[np.array(ids, dtype=np.int64)].reshape(len(ids), *data.shape)
    new_data = data.concat(images, labels, operation='insert-canaries')

    copies = {}
    for offset, idx in enumerate(ids):
        copies.setdefault(idx, []).append(len(data)+offset)
    new_data.provenance['canaries'] = copies
    new_pool = replace(pool, inserted={int(k): int(v) for k, v in duplicate_counts.items()},
                       losses=None)

    return new_data, new_pool

def measure_pool_losses(model, pool, t=100, n_noise=20, seed=0, label=0):
    """Averaged loss of every canary of the pool. Returns a copy of the pool with `losses` set."""

    labels = [label]*pool.pool_size if model.arch.is_conditional else None
    losses = averaged_losses(model, pool.canaries, t, n_noise, seed=derive_seed(seed, 'canary'),
                             labels=labels)

    return replace(pool, losses=losses)

def exposures(pool):
    """Exposure log2(P) - log2(rank) of every canary, where rank is the position of its loss
    among all pool losses in increasing order. Tied losses share their average rank."""

    if pool.losses is None:
        raise StateError('Canary losses were not measured')

    ranks = stats.rankdata(pool.losses, method='average')

    return pool.max_exposure - np.log2(ranks)

def exposure(pool, canary_id):
    """Exposure of one canary, between 0 and log2(P)."""

    if not 0<=canary_id<pool.pool_size:
        raise ArgumentError(f'Canary id {canary_id} outside the pool')

    return float(exposures(pool)[canary_id])

def exposure_null(pool_size, draws, seed=0):
    """Exposures of canaries whose rank is uniform over 1..P, the distribution expected for
    canaries the model never saw."""

    rng = np.random.default_rng(derive_seed(seed, 'exposure-null'))
    ranks = rng.integers(1, pool_size+1, draws)

    return np.log2(pool_size) - np.log2(ranks)

def exposure_null_mean(pool_size):
    """Mean of the null exposure, log2(P) - log2(P!)/P."""

    return float(np.log2(pool_size) - special.gammaln(pool_size+1)/np.log(2)/pool_size)

def null_agreement(pool, draws=100000, seed=0):
    """Two-sample Kolmogorov-Smirnov p-value between the exposures of the canaries that were not
    inserted and the null exposure."""

    values = exposures(pool)
    free = [idx for idx in range(pool.pool_size) if pool.duplicate_count(idx)==0]
    if not free:
        raise StateError('Every canary was inserted, no null sample available')

    return float(stats.ks_2samp(values[free], exposure_null(pool.pool_size, draws, seed)).pvalue)

def canary_audit(data, pool, duplicate_counts, cfg, s, arch, t=100, n_noise=20, label=0,
                 verbose=False):
    """Train a model on `data` with inserted canaries and report the exposure of the canaries by
    duplicate count. Canaries that were not inserted form the row with duplicate count 0.

    Returns
    -------
    table : pandas.DataFrame
        Columns duplicate_count, num_canaries, max_exposure, mean_exposure.
    pool : CanaryPool
        The pool with insertion counts and losses.
    """

    train_data, pool = insert_canaries(data, pool, duplicate_counts, label)
    model = train(train_data, cfg, s, arch, verbose=verbose)
    pool = measure_pool_losses(model, pool, t, n_noise, cfg.seed, label)
    values = exposures(pool)

    counts = np.array([pool.duplicate_count(idx) for idx in range(pool.pool_size)])
    rows = []
    for count in np.unique(counts):
        group = values[counts==count]
        rows.append({'duplicate_count': int(count), 'num_canaries': len(group),
                     'max_exposure': float(group.max()), 'mean_exposure': float(group.mean())})
    logger.info('Canary audit: maximum exposure %.2f of %.2f', values.max(), pool.max_exposure)

    return pd.DataFrame(rows), pool
