"""Reconstruction attack based on inpainting. Part of a target image is masked, many completions
are generated by a model, and the completions are ranked by the ratio between the loss of the
model and the loss of a model that did not train on the target."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats

from .diffusion.sampling import inpaint_batch
from .errors import ArgumentError, ConfigurationError, DegenerateInputError
from .membership import averaged_losses
from .metrics import pairwise_l2
from .util import derive_seed

logger = logging.getLogger(__name__)

MASK_KINDS = ('left-half', 'central-fraction', 'random', 'custom')

@dataclass
class MaskSpec:
    """Description of the region hidden from the model.

    Attributes
    ----------
    kind : {'left-half', 'central-fraction', 'random', 'custom'}
        'left-half' hides the left half of the columns, 'central-fraction' a centered rectangle
        covering `fraction` of the pixels, 'random' each pixel with probability `fraction`.
    fraction : float
        Hidden fraction for the central and random kinds.
    seed : int
        Seed of random masks.
    custom : ndarray, optional
        Boolean array (H, W) or (H, W, C), True for known pixels, used by kind 'custom'.
    """

    kind: str = 'left-half'
    fraction: float = 0.6
    seed: int = 0
    custom: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):

        if self.kind not in MASK_KINDS:
            raise ConfigurationError(f'Unknown mask kind {self.kind}, use one of {MASK_KINDS}')
        if self.kind in ('central-fraction', 'random') and not 0<self.fraction<1:
            raise ConfigurationError('Mask `fraction` must be in (0, 1)')
        if self.kind=='custom' and self.custom is None:
            raise ConfigurationError('A custom mask needs the `custom` array')

    def build(self, shape):
        """Boolean mask of shape (H, W, C), True for known pixels."""

        height, width, channels = shape
        known = np.ones((height, width), dtype=bool)
        if self.kind=='left-half':
            known[:, :width//2] = False
        elif self.kind=='central-fraction':
            side = np.sqrt(self.fraction)
            mask_h = max(1, int(round(height*side)))
            mask_w = max(1, int(round(width*side)))
            top = (height - mask_h)//2
            left = (width - mask_w)//2
            known[top:top+mask_h, left:left+mask_w] = False
        elif self.kind=='random':
            rng = np.random.default_rng(derive_seed(self.seed, 'mask'))
            known = rng.random((height, width))>=self.fraction
        else:
            custom = np.asarray(self.custom, dtype=bool)
            if custom.shape[:2]!=(height, width):
                raise ArgumentError(f'Custom mask shape {custom.shape} incompatible with {shape}')
            return np.broadcast_to(custom.reshape(height, width, -1), shape).copy()

        return np.repeat(known[..., None], channels, axis=-1)

@dataclass
class ReconstructionSet:
    """Completions of one masked target.

    Attributes
    ----------
    target_id : int
        Id of the target in the dataset.
    reconstructions : ndarray
        Array (n, H, W, C).
    seeds : list of int
        Seed of each reconstruction.
    mask : ndarray
        Known-pixel mask used.
    l2_masked : ndarray
        l2 distance to the target restricted to the hidden pixels.
    l2_whole : ndarray
        l2 distance to the target over the whole image.
    main_loss, support_loss, score : ndarray or None
        Losses of the main and support models and their ratio, filled by `score_contrastive`.
    """

    target_id: int
    reconstructions: np.ndarray = field(repr=False)
    seeds: list
    mask: np.ndarray = field(repr=False)
    l2_masked: np.ndarray
    l2_whole: np.ndarray
    main_loss: Optional[np.ndarray] = None
    support_loss: Optional[np.ndarray] = None
    score: Optional[np.ndarray] = None

    def __len__(self):

        return len(self.reconstructions)

    def ranking(self):
        """Reconstruction indices by increasing contrastive score."""

        if self.score is None:
            raise ArgumentError('Reconstructions were not scored')

        return np.argsort(self.score, kind='stable')

    def top(self, k):
        """Indices of the k best-scoring reconstructions."""

        if not 1<=k<=len(self):
            raise ArgumentError(f'top_k={k} outside [1, {len(self)}]')

        return self.ranking()[:k]

def masked_l2(reconstructions, target, mask):
    """l2 distance between each reconstruction and the target over the hidden pixels. Returns
    zeros when nothing is hidden."""

    hidden = ~np.asarray(mask, dtype=bool)
    if not hidden.any():
        return np.zeros(len(reconstructions))

    diff = np.asarray(reconstructions, dtype=np.float64)[:, hidden] - target[hidden]

    return np.sqrt(np.mean(diff**2, axis=1))

def generate_reconstructions(main_model, schedule, target, mask, n, seed=0, target_id=0,
                             label=None, jump_length=10, resamplings=2, verbose=False):
    """Inpaint the hidden region of a target `n` times with distinct seeds.

    Parameters
    ----------
    main_model : DenoiserModel
        Model used for inpainting.
    schedule : NoiseSchedule
        Noise schedule.
    target : ndarray
        Target image (H, W, C).
    mask : MaskSpec or ndarray
        Hidden region.
    n : int
        Number of reconstructions.
    seed : int
        Master seed; reconstruction i uses a seed derived from (seed, target_id, i).
    target_id : int
        Id of the target.
    label : int, optional
        Label for class-conditional models.

    Returns
    -------
    ReconstructionSet
        Reconstructions with distances filled and scores empty.
    """

    if n<1:
        raise ArgumentError('`n` must be at least 1')
    target = np.asarray(target, dtype=np.float32)
    if isinstance(mask, MaskSpec):
        mask = mask.build(target.shape)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(*target.shape[:2], -1),
                           target.shape).copy()

    seeds = [derive_seed(seed, 'reconstruction', target_id, idx) for idx in range(n)]
    recs = inpaint_batch(main_model, schedule, target, mask, seeds, label, jump_length,
                         resamplings, verbose=verbose)
    l2_whole = pairwise_l2(recs, target[None])[:, 0]

    return ReconstructionSet(int(target_id), recs, seeds, mask, masked_l2(recs, target, mask),
                             l2_whole)

def score_contrastive(rset, main_model, support_model, t=100, n_noise=1, seed=0, label=None):
    """Score each reconstruction by main loss / support loss at timestep t. Lower scores indicate
    completions the main model fits unusually well.

    Returns
    -------
    ReconstructionSet
        The same set, with losses and scores filled.
    """

    labels = None if label is None else [label]*len(rset)
    ids = np.arange(len(rset))
    main = averaged_losses(main_model, rset.reconstructions, t, n_noise, seed=seed,
                           labels=labels if main_model.arch.is_conditional else None, ids=ids)
    support = averaged_losses(support_model, rset.reconstructions, t, n_noise, seed=seed,
                              labels=labels if support_model.arch.is_conditional else None,
                              ids=ids)
    if np.any(support<=0):
        raise DegenerateInputError('Support model loss is zero, contrastive score undefined')

    rset.main_loss = main
    rset.support_loss = support
    rset.score = main/support

    return rset

def select_support_model(ensemble, target_id, main_index):
    """Index of the model used as support for a target: an OUT model other than the main model,
    with the number of training steps closest to the main model. If the main model is itself
    OUT and no other OUT model exists, it is reused with a warning."""

    main_step = ensemble.models[main_index].step
    out_models = [idx for idx in np.nonzero(~ensemble.masks[:, target_id])[0] if idx!=main_index]
    if not out_models:
        if not ensemble.masks[main_index, target_id]:
            logger.warning('No other OUT model for target %d, reusing model %d as support',
                           target_id, main_index)
            return main_index
        raise ConfigurationError(f'Target {target_id} has no OUT model to use as support')

    return int(min(out_models, key=lambda idx: (abs(ensemble.models[idx].step - main_step), idx)))

def _attack_one(ensemble, schedule, dataset, target_id, main_index, mask, n, top_k, t, seed,
                n_noise, jump_length, resamplings):

    label = dataset.label_of(target_id)
    main = ensemble.models[main_index]
    rset = generate_reconstructions(main, schedule, dataset.images[target_id], mask, n,
                                    derive_seed(seed, 'model', main_index), target_id,
                                    label if main.arch.is_conditional else None, jump_length,
                                    resamplings)
    support_index = select_support_model(ensemble, target_id, main_index)
    score_contrastive(rset, main, ensemble.models[support_index], t, n_noise, seed, label)
    best = rset.top(top_k)

    return rset, support_index, rset.l2_masked[best].mean(), rset.l2_whole[best].mean()

def evaluate_attack(ensemble, schedule, dataset, targets, mask, n=200, top_k=10, t=100, seed=0,
                    n_noise=1, jump_length=10, resamplings=2):
    """Compare reconstructions of targets by a model trained on them (IN) and by a model that was
    not (OUT). For each target the top_k reconstructions by contrastive score are kept and their
    mean distance to the target is reported.

    Parameters
    ----------
    ensemble : ShadowEnsemble
        Models with known membership.
    schedule : NoiseSchedule
        Noise schedule.
    dataset : Dataset
        The dataset indexed by the ensemble masks.
    targets : list of int
        Ids of the attacked images.
    mask : MaskSpec
        Hidden region.
    n : int
        Number of reconstructions per target and model.
    top_k : int
        Number of best-scoring reconstructions averaged.
    t : int
        Timestep of the losses.

    Returns
    -------
    table : pandas.DataFrame
        One row per target with columns target_id, in_model, out_model, in_mean, out_mean, gap,
        in_mean_whole, out_mean_whole and success. Distances are computed on the hidden region,
        the *_whole columns over the whole image.
    sets : dict
        Maps (target_id, 'in' or 'out') to the ReconstructionSet.
    """

    if not 1<=top_k<=n:
        raise ArgumentError(f'Need 1 <= top_k <= n, got top_k={top_k}, n={n}')

    rows = []
    sets = {}
    for target_id in targets:
        target_id = int(target_id)
        in_models = np.nonzero(ensemble.masks[:, target_id])[0]
        out_models = np.nonzero(~ensemble.masks[:, target_id])[0]
        if in_models.size==0 or out_models.size==0:
            raise ConfigurationError(f'Target {target_id} needs an IN and an OUT model')

        row = {'target_id': target_id}
        for side, main_index in (('in', int(in_models[0])), ('out', int(out_models[0]))):
            rset, _, mean_masked, mean_whole = _attack_one(
                ensemble, schedule, dataset, target_id, main_index, mask, n, top_k, t, seed,
                n_noise, jump_length, resamplings)
            sets[(target_id, side)] = rset
            row[f'{side}_model'] = main_index
            row[f'{side}_mean'] = mean_masked
            row[f'{side}_mean_whole'] = mean_whole
        row['gap'] = row['out_mean'] - row['in_mean']
        row['success'] = row['in_mean']<row['out_mean']
        rows.append(row)
        logger.info('Target %d: IN %.4f, OUT %.4f', target_id, row['in_mean'], row['out_mean'])

    columns = ['target_id', 'in_model', 'out_model', 'in_mean', 'out_mean', 'gap', 'in_mean_whole',
               'out_mean_whole', 'success']

    return pd.DataFrame(rows, columns=columns), sets

def contrastive_correlation(rset):
    """Pearson correlation of the masked-region distance with the main loss and with the
    contrastive score of a scored set.

    Returns
    -------
    dict
        Keys 'main_loss' and 'contrastive'.
    """

    if rset.score is None:
        raise ArgumentError('Reconstructions were not scored')
    if len(rset)<2 or np.std(rset.l2_masked)==0:
        raise DegenerateInputError('Correlation needs at least two distinct distances')

    result = {}
    for name, values in (('main_loss', rset.main_loss), ('contrastive', rset.score)):
        if np.std(values)==0:
            raise DegenerateInputError(f'Constant {name}, correlation undefined')
        result[name] = float(stats.pearsonr(rset.l2_masked, values)[0])

    return result

def sign_test(table):
    """One-sided binomial sign test of in_mean < out_mean over the targets of `evaluate_attack`.
    Ties are discarded.

    Returns
    -------
    float
        The p-value. 1 when all targets are ties.
    """

    gap = np.asarray(table['out_mean'] - table['in_mean'], dtype=float)
    gap = gap[gap!=0]
    if gap.size==0:
        return 1.

    return float(stats.binomtest(int(np.sum(gap>0)), gap.size, 0.5, alternative='greater').pvalue)
