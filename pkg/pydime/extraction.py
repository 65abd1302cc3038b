"""Extraction of training images from a generative model. Generations are flagged as memorized
when many of them are near-identical, matched to the training set under an l2 threshold, and
scored by their distance relative to the local density of training images."""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import networkx as nx
import numpy as np
import pandas as pd

from .diffusion.sampling import GenerationRequest, sample
from .errors import ArgumentError, ConfigurationError, DegenerateInputError
from .metrics import (NeighborSet, embed_batch, outlier_score, pairwise_l2, relative_distance,
                      tiled_l2_matrix)
from .util import derive_seed, get_batches

logger = logging.getLogger(__name__)

EXACT_CLIQUE_LIMIT = 500

@dataclass
class GenerationBatch:
    """Images generated by a model together with the seed of each image.

    Attributes
    ----------
    images : ndarray
        Array (N, H, W, C) in [0, 1].
    seeds : ndarray
        Seed of each image. Must be pairwise distinct.
    label : int, optional
        Class label used for generation.
    model_id : str
        Identification of the generating model.
    """

    images: np.ndarray
    seeds: np.ndarray
    label: Optional[int] = None
    model_id: str = ''

    def __post_init__(self):

        self.images = np.asarray(self.images, dtype=np.float32)
        self.seeds = np.asarray(self.seeds, dtype=np.uint64)
        if len(self.images)!=len(self.seeds):
            raise ArgumentError('A generation batch needs one seed per image')
        if len(np.unique(self.seeds))!=len(self.seeds):
            raise ArgumentError('Seeds of a generation batch must be distinct')

    def __len__(self):

        return len(self.images)

def generate_batch(model, schedule, seed, count, label=None, stride=1, model_id='', verbose=False):
    """Sample `count` images and wrap them in a GenerationBatch."""

    images = sample(model, schedule, GenerationRequest(seed, label, count), stride,
                    verbose=verbose)
    seeds = [derive_seed(seed, 'sample', idx) for idx in range(count)]

    return GenerationBatch(images, seeds, label, model_id)

def _images_of(batch):

    if isinstance(batch, GenerationBatch):
        return batch.images
    return np.asarray(batch)

def _graph_from_distances(dist, threshold, grid):

    graph = nx.Graph()
    graph.add_nodes_from(range(len(dist)))
    rows, cols = np.nonzero(np.triu(dist<=threshold, k=1))
    graph.add_edges_from((int(i), int(j), {'distance': float(dist[i, j])})
                         for i, j in zip(rows, cols))
    graph.graph['threshold'] = threshold
    graph.graph['grid'] = tuple(grid)

    return graph

def build_similarity_graph(batch, threshold, grid=(2, 2)):
    """Graph over generations with an edge between two images when their tiled l2 distance
    is at most `threshold`. All pairs are examined.

    Parameters
    ----------
    batch : GenerationBatch or ndarray
        The generations.
    threshold : float
        Largest distance of connected images.
    grid : tuple of int
        Tile grid of the distance.

    Returns
    -------
    networkx.Graph
        Graph with attributes 'threshold' and 'grid'. Each edge has attribute 'distance'.
    """

    if threshold<=0:
        raise ArgumentError('`threshold` must be positive')

    dist = tiled_l2_matrix(_images_of(batch), grid)

    return _graph_from_distances(dist, threshold, grid)

@dataclass
class Clique:
    """Nodes of a clique, sorted. `approximate` is True when the clique was found by the greedy
    search and may not be maximum."""

    nodes: list
    approximate: bool = False

    def __len__(self):

        return len(self.nodes)

def _greedy_clique(graph):
    """Largest clique found by growing a clique from every node, visiting candidates by
    decreasing degree."""

    order = sorted(graph.nodes, key=lambda node: (-graph.degree[node], node))
    best = []
    for start in order:
        clique = [start]
        for node in order:
            if node!=start and all(graph.has_edge(node, member) for member in clique):
                clique.append(node)
        if len(clique)>len(best):
            best = clique

    return sorted(best)

def largest_clique(graph, exact_limit=EXACT_CLIQUE_LIMIT):
    """Maximum clique of a graph. Graphs with at most `exact_limit` nodes are solved exactly by
    enumerating maximal cliques with pivoting; larger graphs use a greedy search.

    Returns
    -------
    Clique
        The clique. Among cliques of maximum size the lexicographically smallest is returned.
    """

    if graph.number_of_nodes()==0:
        return Clique([])

    if graph.number_of_nodes()>exact_limit:
        logger.warning('Graph with %d nodes exceeds the exact clique limit %d, using greedy search',
                       graph.number_of_nodes(), exact_limit)
        return Clique(_greedy_clique(graph), approximate=True)

    best = None
    for clique in nx.find_cliques(graph):
        clique = sorted(clique)
        if best is None or len(clique)>len(best) or (len(clique)==len(best) and clique<best):
            best = clique

    return Clique(best)

@dataclass
class MemorizationFlag:
    """A clique of near-identical generations.

    Attributes
    ----------
    clique : Clique
        The generations in the clique.
    representative : int
        Clique medoid, the generation with the smallest summed distance to the others.
    image : ndarray
        Image of the representative.
    mean_distance : float
        Mean pairwise distance inside the clique. Used for ordering flagged batches.
    """

    clique: Clique
    representative: int
    image: np.ndarray = field(repr=False)
    mean_distance: float

def flag_memorized(batch, threshold, clique_min=10, grid=(2, 2)):
    """Predict that a batch of generations reproduces a memorized image when its similarity graph
    has a clique of at least `clique_min` images.

    Parameters
    ----------
    batch : GenerationBatch or ndarray
        The generations.
    threshold : float
        Edge threshold of the similarity graph.
    clique_min : int
        Smallest clique size considered as memorization.
    grid : tuple of int
        Tile grid of the distance.

    Returns
    -------
    MemorizationFlag or None
        The flagged clique, or None if the largest clique is too small.
    """

    if clique_min<2:
        raise ArgumentError('`clique_min` must be at least 2')
    if threshold<=0:
        raise ArgumentError('`threshold` must be positive')

    images = _images_of(batch)
    dist = tiled_l2_matrix(images, grid)
    graph = _graph_from_distances(dist, threshold, grid)
    clique = largest_clique(graph)
    if len(clique)<clique_min:
        return None

    nodes = np.array(clique.nodes)
    sub = dist[np.ix_(nodes, nodes)]
    representative = int(nodes[np.argmin(sub.sum(axis=1))])
    mean_distance = float(sub[np.triu_indices(len(nodes), k=1)].mean())

    return MemorizationFlag(clique, representative, images[representative], mean_distance)

def calibrate_edge_threshold(batch, grid=(2, 2), quantile=0.001):
    """Edge threshold given by a low quantile of the tiled distances between all pairs of a
    calibration batch."""

    images = _images_of(batch)
    if len(images)<2:
        raise DegenerateInputError('Calibration needs at least two generations')

    dist = tiled_l2_matrix(images, grid)
    values = dist[np.triu_indices(len(images), k=1)]

    return float(np.quantile(values, quantile))

def _check_delta(delta):

    if not 0<delta<1:
        raise ArgumentError(f'`delta` must be in (0, 1), got {delta}')

def match_to_training(xhat, train, delta=0.15):
    """Nearest training image of `xhat` if its l2 distance is at most `delta`.

    Returns
    -------
    tuple or None
        (training id, distance), or None when no training image is close enough.
    """

    _check_delta(delta)
    if len(train)==0:
        raise ArgumentError('The training set is empty')

    dist = pairwise_l2(np.asarray(xhat)[None], train.images)[0]
    idx = int(np.argmin(dist))
    if dist[idx]>delta:
        return None

    return idx, float(dist[idx])

def eidetic_count(x, train, delta=0.1):
    """Number of training images within l2 distance `delta` of `x`, including `x` itself when
    it belongs to the training set."""

    _check_delta(delta)
    if len(train)==0:
        return 0

    dist = pairwise_l2(np.asarray(x)[None], train.images)[0]

    return int(np.sum(dist<=delta))

@dataclass
class ExtractionRecord:
    """Result of matching one generation against the training set.

    Attributes
    ----------
    generation_id : int
        Index of the generation.
    train_id : int or None
        Nearest training image.
    distance : float
        l2 distance to the nearest training image.
    score : float
        Relative distance. Infinite when undefined.
    extracted : bool
        Verdict. True implies `distance` is at most the threshold used.
    eidetic_k : int
        Number of training images within the eidetic threshold of the matched image.
    group_id : int
        Smallest id among those training images. Duplicated training images share a group.
    clique_size : int, optional
        Size of the clique containing the generation, when clique inference was used.
    error : str, optional
        Reason the score is undefined.
    """

    generation_id: int
    train_id: Optional[int]
    distance: float
    score: float
    extracted: bool
    eidetic_k: int
    group_id: Optional[int]
    clique_size: Optional[int] = None
    error: Optional[str] = None

def records_table(records):
    """Convert extraction records to a table."""

    columns = [f.name for f in fields(ExtractionRecord)]
    table = pd.DataFrame([asdict(rec) for rec in records], columns=columns)
    table['verdict'] = np.where(table['extracted'].astype(bool), 'extracted', 'not-extracted')

    return table

def _stack_generations(generations):

    if isinstance(generations, (list, tuple)):
        arrays = [_images_of(batch) for batch in generations]
        images = np.concatenate(arrays) if arrays else np.zeros((0,))
    else:
        images = _images_of(generations)
    if images.ndim!=4 or len(images)==0:
        raise ArgumentError(f'Expected a non-empty (N, H, W, C) set of generations, got shape '
                            f'{images.shape}')

    return images

def score_generations(generations, train, alpha=0.5, n=50, delta=0.15, eidetic_delta=0.1,
                      score_cutoff=None, batch_size=1024):
    """Score every generation by its relative distance to the nearest training image.

    Parameters
    ----------
    generations : GenerationBatch or ndarray or list
        Generated images. A list of batches is concatenated.
    train : Dataset
        Training set.
    alpha : float
        Scale of the neighborhood distance.
    n : int
        Number of nearest training images forming the neighborhood. Reduced to the training
        set size if larger.
    delta : float
        l2 threshold of an extraction.
    eidetic_delta : float
        l2 threshold used for counting training near-duplicates.
    score_cutoff : float, optional
        If given, the verdict also requires a score at most this value.
    batch_size : int
        Number of generations whose distances are computed together.

    Returns
    -------
    list of ExtractionRecord
        One record per generation, in generation order.
    """

    _check_delta(delta)
    _check_delta(eidetic_delta)
    if len(train)==0:
        raise ArgumentError('The training set is empty')
    images = _stack_generations(generations)
    n = min(n, len(train))

    groups = {}

    def group_of(train_id):
        if train_id not in groups:
            train_dist = pairwise_l2(train.images[train_id][None], train.images)[0]
            close = np.nonzero(train_dist<=eidetic_delta)[0]
            groups[train_id] = (len(close), int(close.min()))
        return groups[train_id]

    records = []
    for batch in get_batches(len(images), batch_size):
        dist = pairwise_l2(images[batch], train.images)
        for row, gen_id in enumerate(range(batch.start, batch.stop)):
            order = np.argsort(dist[row], kind='stable')[:n]
            nearest = int(order[0])
            neighbors = NeighborSet(gen_id, order, dist[row, order])
            error = None
            try:
                score = relative_distance(images[gen_id], train.images[nearest], neighbors, alpha)
            except DegenerateInputError as exc:
                score = np.inf
                error = str(exc)
            distance = float(dist[row, nearest])
            eidetic_k, group_id = group_of(nearest)
            extracted = distance<=delta and (score_cutoff is None or score<=score_cutoff)
            records.append(ExtractionRecord(gen_id, nearest, distance, float(score),
                                            bool(extracted), eidetic_k, group_id, error=error))

    num_errors = sum(rec.error is not None for rec in records)
    if num_errors>0:
        logger.warning('Relative distance undefined for %d generations', num_errors)

    return records

def calibrate_score_cutoff(null_scores, quantile=0.):
    """Cutoff placed at a low quantile of the scores of a model that memorizes nothing, e.g. an
    untrained model. With the default, no null score falls strictly below the cutoff."""

    null_scores = np.asarray(null_scores, dtype=float)
    null_scores = null_scores[np.isfinite(null_scores)]
    if null_scores.size==0:
        raise DegenerateInputError('No finite null scores for calibrating the cutoff')

    return float(np.quantile(null_scores, quantile))

def untargeted_extraction_scan(batches, train, alpha=0.5, n=50, score_cutoff=1., delta=0.15,
                               eidetic_delta=0.1):
    """Unique training images extracted by a set of generations. A generation extracts its nearest
    training image when the relative distance is at most `score_cutoff` and the l2 distance is
    at most `delta`. Only the first generation of each training image is counted, and
    duplicated training images (within `eidetic_delta` of each other) count once.

    Returns
    -------
    list of ExtractionRecord
        Extracted records sorted by increasing score.
    """

    records = score_generations(batches, train, alpha, n, delta, eidetic_delta, score_cutoff)

    seen = set()
    extracted = []
    for rec in records:
        if rec.extracted and rec.group_id not in seen:
            seen.add(rec.group_id)
            extracted.append(rec)
    extracted.sort(key=lambda rec: (rec.score, rec.generation_id))

    logger.info('%d of %d generations extract %d unique training images',
                sum(rec.extracted for rec in records), len(records), len(extracted))

    return extracted

def precision_recall(scores, labels):
    """Precision and number of true extractions among the records with the lowest scores.

    Parameters
    ----------
    scores : array_like
        Score of each record, lower meaning more likely extracted.
    labels : array_like of bool
        Ground truth of each record.

    Returns
    -------
    pandas.DataFrame
        Columns rank, score, precision and extracted_count, one row per prefix of the ranking.
    """

    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape!=labels.shape:
        raise ArgumentError('Need one label per score')
    if not labels.any():
        raise DegenerateInputError('Precision-recall needs at least one positive record')

    order = np.argsort(scores, kind='stable')
    count = np.cumsum(labels[order])
    rank = np.arange(1, len(scores)+1)

    return pd.DataFrame({'rank': rank, 'score': scores[order], 'precision': count/rank,
                         'extracted_count': count})

def rank_outliers(train, k=50, grid=(8, 8)):
    """Training images ordered from most to least atypical, measured as the mean cosine distance
    of the embedding to its k nearest neighbors.

    Returns
    -------
    ids : ndarray
        Training ids, most atypical first. Ties keep ascending id order.
    scores : ndarray
        Outlier score of each id in `ids`.
    """

    vectors, _ = embed_batch(train.images, grid)
    k = min(k, len(train)-1)
    scores = np.array([outlier_score(vectors[idx], vectors, k, exclude=idx)
                       for idx in range(len(train))])
    ids = np.argsort(-scores, kind='stable')

    return ids, scores[ids]

def targeted_outlier_extraction(model, schedule, train, top=10, per_target=16, k=50, delta=0.15,
                                seed=0, stride=1):
    """Attack the most atypical training images of a class-conditional model by generating with
    their labels and checking whether any generation reproduces them.

    Returns
    -------
    pandas.DataFrame
        Columns train_id, outlier_score, label, min_distance and extracted.
    """

    if not model.arch.is_conditional:
        raise ConfigurationError('Targeted extraction needs a class-conditional model')
    if train.labels is None:
        raise ConfigurationError('Targeted extraction needs a labeled training set')
    _check_delta(delta)

    ids, scores = rank_outliers(train, k)
    rows = []
    for train_id, score in zip(ids[:top], scores[:top]):
        label = train.label_of(train_id)
        req = GenerationRequest(derive_seed(seed, 'targeted', int(train_id)), label, per_target)
        images = sample(model, schedule, req, stride)
        min_distance = float(pairwise_l2(train.images[train_id][None], images).min())
        rows.append({'train_id': int(train_id), 'outlier_score': float(score), 'label': label,
                     'min_distance': min_distance, 'extracted': min_distance<=delta})

    return pd.DataFrame(rows, columns=['train_id', 'outlier_score', 'label', 'min_distance',
                                       'extracted'])

def extraction_frequency_by_duplication(generations, train, groups, delta=0.15):
    """Number of generations reproducing each planted training image.

    Parameters
    ----------
    generations : GenerationBatch or ndarray or list
        Generated images.
    train : Dataset
        Training set.
    groups : dict
        Maps a planted image id to the ids of all its copies.
    delta : float
        l2 threshold of a match.

    Returns
    -------
    pandas.DataFrame
        Columns planted_id, duplicate_count and matches, sorted by duplicate count.
    """

    _check_delta(delta)
    images = _stack_generations(generations)
    groups = {int(planted): [int(member) for member in members]
              for planted, members in groups.items()}
    owner = {member: planted for planted, members in groups.items() for member in members}

    matches = {planted: 0 for planted in groups}
    for batch in get_batches(len(images), 1024):
        dist = pairwise_l2(images[batch], train.images)
        nearest = np.argmin(dist, axis=1)
        for row, train_id in enumerate(nearest):
            planted = owner.get(int(train_id))
            if planted is not None and dist[row, train_id]<=delta:
                matches[planted] += 1

    rows = [{'planted_id': planted, 'duplicate_count': len(groups[planted]), 'matches': count}
            for planted, count in matches.items()]
    table = pd.DataFrame(rows, columns=['planted_id', 'duplicate_count', 'matches'])

    return table.sort_values(['duplicate_count', 'planted_id'], kind='stable').reset_index(drop=True)
