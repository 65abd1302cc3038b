"""Membership inference against diffusion models: shadow ensembles, the loss-threshold attack,
the likelihood-ratio attack (LiRA) and ROC-based evaluation."""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
import torch
from scipy import stats
from sklearn import metrics as sk_metrics
from tqdm import tqdm

from .diffusion.model import flip_images, per_example_loss
from .diffusion.training import train
from .errors import ArgumentError, ConfigurationError, DegenerateInputError, PydimeError
from .image import to_model_range
from .util import derive_seed, get_batches

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6

@dataclass
class ShadowEnsemble:
    """Models trained on random subsets of a dataset.

    Attributes
    ----------
    models : list of DenoiserModel
        The shadow models.
    masks : ndarray
        Boolean array (count, N). masks[i, j] is True when example j was in the training set of
        model i.
    split : float
        Fraction of the dataset used by each model.
    dataset_id : str
        Identification of the dataset.
    checkpoints : dict
        Maps a training step to the list of model copies at that step, one per model.
    """

    models: list
    masks: np.ndarray
    split: float
    dataset_id: str = ''
    checkpoints: dict = field(default_factory=dict)

    def __len__(self):

        return len(self.models)

    def coverage(self):
        """Number of models having each example IN and OUT."""

        in_counts = self.masks.sum(axis=0)

        return in_counts, len(self.masks) - in_counts

    def check_coverage(self, ids=None):
        """Raise ConfigurationError if an example is not IN for some model and OUT for another."""

        in_counts, out_counts = self.coverage()
        if ids is not None:
            in_counts, out_counts = in_counts[ids], out_counts[ids]
        uncovered = np.nonzero((in_counts==0) | (out_counts==0))[0]
        if uncovered.size>0:
            raise ConfigurationError(f'{uncovered.size} examples lack an IN or an OUT shadow model, '
                                     f'e.g. example {int(uncovered[0])}')

    def checkpoints_of(self, index):
        """List of (step, model) with the checkpoints of model `index`."""

        return [(step, models[index]) for step, models in sorted(self.checkpoints.items())]

def _uncovered(masks):

    in_counts = masks.sum(axis=0)

    return np.nonzero((in_counts==0) | (in_counts==len(masks)))[0]

def make_membership_masks(n, count, split, seed, max_repairs=None):
    """Random membership masks with exactly floor(split*n) examples per model. When `count` is at
    least 4, examples that are IN for every model or OUT for every model are swapped with
    examples of a random model until every example has both an IN and an OUT model.

    Parameters
    ----------
    n : int
        Dataset size.
    count : int
        Number of models.
    split : float
        Fraction of examples per model.
    seed : int
        Random seed.
    max_repairs : int, optional
        Maximum number of swaps. Defaults to 100*n.

    Returns
    -------
    ndarray
        Boolean array (count, n).
    """

    if count<2:
        raise ConfigurationError('A shadow ensemble needs at least 2 models')
    if not 0<split<1:
        raise ConfigurationError(f'`split` must be in (0, 1), got {split}')
    size = int(np.floor(split*n))
    if size<1 or size>=n:
        raise ConfigurationError(f'Split {split} of {n} examples gives {size} examples per model')

    rng = np.random.default_rng(derive_seed(seed, 'masks'))
    masks = np.zeros((count, n), dtype=bool)
    for row in masks:
        row[rng.permutation(n)[:size]] = True

    if count<4:
        return masks

    if max_repairs is None:
        max_repairs = 100*n
    for _ in range(max_repairs):
        uncovered = _uncovered(masks)
        if uncovered.size==0:
            return masks
        example = uncovered[0]
        always_in = masks[0, example]
        model = rng.integers(count)
        # Swap partners keep their own coverage
        in_counts = masks.sum(axis=0)
        if always_in:
            candidates = np.nonzero(~masks[model] & (count - in_counts>=2))[0]
        else:
            candidates = np.nonzero(masks[model] & (in_counts>=2))[0]
        if candidates.size==0:
            continue
        partner = rng.choice(candidates)
        masks[model, example] = not always_in
        masks[model, partner] = always_in

    raise ConfigurationError('Could not build membership masks covering every example')

def train_shadow_models(data, count, split, cfg, s, arch, dataset_id='', verbose=False):
    """Train `count` models, each on a random subset of `data`.

    Parameters
    ----------
    data : Dataset
        The dataset.
    count : int
        Number of models.
    split : float
        Fraction of the dataset used by each model.
    cfg : TrainingConfig
        Training configuration. The seed of model i is derived from cfg.seed and i. Checkpoints
        requested by `cfg.checkpoint_every` are stored in the ensemble.
    s : NoiseSchedule
        Noise schedule.
    arch : Architecture
        Network description.
    dataset_id : str
        Identification of the dataset.
    verbose : bool
        Show training progress.

    Returns
    -------
    ShadowEnsemble
        The ensemble.
    """

    masks = make_membership_masks(len(data), count, split, cfg.seed)
    ensemble = ShadowEnsemble([], masks, split, dataset_id)

    def store_checkpoint(step, model):
        ensemble.checkpoints.setdefault(step, []).append(model.copy())

    for index, mask in enumerate(masks):
        subset = data.subset(np.nonzero(mask)[0], operation=f'shadow-{index}')
        member_cfg = replace(cfg, seed=derive_seed(cfg.seed, 'shadow', index))
        logger.info('Training shadow model %d of %d', index+1, count)
        try:
            model = train(subset, member_cfg, s, arch, on_checkpoint=store_checkpoint,
                          verbose=verbose)
        except PydimeError as exc:
            raise type(exc)(f'Shadow model {index} failed: {exc}') from exc
        ensemble.models.append(model)

    return ensemble

def _example_noise(seed, example_id, n_noise, shape):
    """Loss noise of one example. Every model sees the same noise for the same example."""

    rng = np.random.default_rng(derive_seed(seed, 'loss-noise', int(example_id)))

    return rng.standard_normal((n_noise, *shape))

def averaged_losses(m, images, t, n_noise=1, use_flip=False, seed=0, labels=None, ids=None,
                    batch_size=256):
    """Diffusion loss at timestep t averaged over `n_noise` noise draws, for each image of a batch.
    With `use_flip` the horizontally flipped image is also evaluated with the same noise, and the
    average is taken over the 2*n_noise values.

    Parameters
    ----------
    m : DenoiserModel
        The model.
    images : ndarray
        Images (N, H, W, C) in [0, 1].
    t : int
        Timestep.
    n_noise : int
        Number of noise draws.
    use_flip : bool
        Also average over the flipped images.
    seed : int
        Seed of the noise.
    labels : array_like, optional
        Labels of the images, for class-conditional models.
    ids : array_like, optional
        Example ids used for deriving the noise. Defaults to 0..N-1.
    batch_size : int
        Number of images evaluated together.

    Returns
    -------
    ndarray
        float64 array (N,).
    """

    if n_noise<1:
        raise ArgumentError('`n_noise` must be at least 1')
    t = m.schedule.check_timestep(t)
    images = np.asarray(images)
    if images.shape[1:]!=m.input_shape:
        raise ArgumentError(f'Image shape {images.shape[1:]} differs from model input {m.input_shape}')
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    labels_all = m.label_tensor(labels, len(images)) if m.arch.is_conditional else None

    losses = np.empty(len(images))
    for batch in get_batches(len(images), batch_size):
        x = torch.as_tensor(to_model_range(images[batch]), dtype=m.dtype)
        num = x.shape[0]
        eps = np.stack([_example_noise(seed, idx, n_noise, m.input_shape) for idx in ids[batch]])
        eps = torch.as_tensor(eps, dtype=m.dtype).reshape(num*n_noise, *m.input_shape)
        x_rep = x.repeat_interleave(n_noise, dim=0)
        t_vec = torch.full((num*n_noise,), t, dtype=torch.long)
        if labels_all is None:
            y = torch.zeros(num*n_noise, dtype=torch.long)
        else:
            y = labels_all[batch].repeat_interleave(n_noise)

        with torch.no_grad():
            loss = per_example_loss(m, x_rep, t_vec, eps, y).reshape(num, n_noise)
            if use_flip:
                flipped = per_example_loss(m, flip_images(x_rep), t_vec, eps, y)
                loss = torch.cat((loss, flipped.reshape(num, n_noise)), dim=1)
        losses[batch] = loss.to(torch.float64).mean(dim=1).numpy()

    return losses

def averaged_loss(m, x, t, n_noise=1, use_flip=False, seed=0, label=None, example_id=0):
    """Averaged loss of a single image. See `averaged_losses`."""

    labels = None if label is None else [label]

    return float(averaged_losses(m, np.asarray(x)[None], t, n_noise, use_flip, seed, labels,
                                 np.array([example_id]))[0])

@dataclass
class AttackScoreSet:
    """Membership scores of a set of examples, higher meaning more likely member.

    Attributes
    ----------
    scores : ndarray
        Score of each example.
    labels : ndarray or None
        True membership of each example.
    attack : str
        Attack name.
    t : int
        Timestep of the loss.
    config : dict
        Loss averaging and variance options.
    ids : ndarray
        Example ids.
    """

    scores: np.ndarray
    labels: Optional[np.ndarray]
    attack: str
    t: int
    config: dict = field(default_factory=dict)
    ids: Optional[np.ndarray] = None

    def __post_init__(self):

        self.scores = np.asarray(self.scores, dtype=float)
        if not np.all(np.isfinite(self.scores)):
            raise DegenerateInputError(f'Non-finite scores in attack {self.attack}')
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape!=self.scores.shape:
                raise ArgumentError('Need one membership label per score')
        if self.ids is None:
            self.ids = np.arange(len(self.scores))

    def to_table(self):

        table = pd.DataFrame({'id': self.ids, 'score': self.scores})
        if self.labels is not None:
            table['member'] = self.labels.astype(int)
        table['attack'] = self.attack
        table['t'] = self.t

        return table

def loss_threshold_attack(losses, tau):
    """Predict member when the loss is strictly below `tau`."""

    return np.asarray(losses)<tau

def select_threshold(losses, labels, metric='accuracy', fpr=0.01):
    """Threshold of the loss attack maximizing a metric over a labeled calibration set.

    Parameters
    ----------
    losses : array_like
        Loss of each example.
    labels : array_like of bool
        Membership of each example.
    metric : {'accuracy', 'tpr_at_fpr'}
        Metric maximized. 'tpr_at_fpr' maximizes the true positive rate among thresholds whose
        false positive rate is at most `fpr`.
    fpr : float
        Largest false positive rate for metric 'tpr_at_fpr'.

    Returns
    -------
    float
        The threshold. Among thresholds with equal metric the smallest is returned.
    """

    losses = np.asarray(losses, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise DegenerateInputError('Threshold selection needs members and non-members')

    values = np.unique(losses)
    candidates = np.concatenate(([-np.inf], (values[:-1] + values[1:])/2, [np.inf]))
    preds = losses[None]<candidates[:, None]
    tpr = (preds & labels).sum(axis=1)/labels.sum()
    fpr_c = (preds & ~labels).sum(axis=1)/(~labels).sum()

    if metric=='accuracy':
        value = (preds==labels).mean(axis=1)
    elif metric=='tpr_at_fpr':
        value = np.where(fpr_c<=fpr, tpr, -1.)
    else:
        raise ArgumentError(f'Unknown metric {metric}')

    return float(candidates[np.argmax(value)])

@dataclass
class LiRAStats:
    """Gaussians fitted to the losses of an example under IN and OUT shadow models."""

    in_losses: np.ndarray
    out_losses: np.ndarray
    mu_in: float
    sigma_in: float
    mu_out: float
    sigma_out: float

def fit_lira_stats(in_losses, out_losses, sigma_in=None, sigma_out=None, floor=VARIANCE_FLOOR):
    """Fit the IN and OUT Gaussians of one example. A side with fewer than 2 losses uses the
    within-group deviation pooled over both sides, each loss taken around the mean of its own
    side. Deviations are floored at `floor`. `sigma_in` and `sigma_out` replace the fitted
    deviations when given.

    Returns
    -------
    LiRAStats
        The fitted statistics.
    """

    in_losses = np.asarray(in_losses, dtype=float)
    out_losses = np.asarray(out_losses, dtype=float)
    if in_losses.size==0 or out_losses.size==0:
        raise DegenerateInputError('LiRA needs at least one IN and one OUT loss')

    pooled = np.concatenate((in_losses - in_losses.mean(), out_losses - out_losses.mean())).std()
    if sigma_in is None:
        sigma_in = in_losses.std() if in_losses.size>=2 else pooled
    if sigma_out is None:
        sigma_out = out_losses.std() if out_losses.size>=2 else pooled

    return LiRAStats(in_losses, out_losses, float(in_losses.mean()), max(float(sigma_in), floor),
                     float(out_losses.mean()), max(float(sigma_out), floor))

def lira_score(l_star, lira_stats):
    """Log-likelihood ratio log p_in(l*) - log p_out(l*). Positive values indicate membership."""

    if not (np.isfinite(lira_stats.sigma_in) and lira_stats.sigma_in>0 and
            np.isfinite(lira_stats.sigma_out) and lira_stats.sigma_out>0):
        raise DegenerateInputError('LiRA deviations must be positive and finite')

    return float(stats.norm.logpdf(l_star, lira_stats.mu_in, lira_stats.sigma_in)
                 - stats.norm.logpdf(l_star, lira_stats.mu_out, lira_stats.sigma_out))

def _global_sigmas(losses, masks):
    """Deviation of the losses around their per-example mean, pooled over examples, per side."""

    resid_in = []
    resid_out = []
    for j in range(losses.shape[1]):
        in_l = losses[masks[:, j], j]
        out_l = losses[~masks[:, j], j]
        resid_in.append(in_l - in_l.mean())
        resid_out.append(out_l - out_l.mean())

    return np.concatenate(resid_in).std(), np.concatenate(resid_out).std()

def model_losses(models, dataset, t, n_noise=1, use_flip=False, seed=0, ids=None, verbose=False):
    """Averaged losses of the selected examples under each model, array (num_models, num_ids)."""

    if ids is None:
        ids = np.arange(len(dataset))
    images = dataset.images[ids]
    labels = None if dataset.labels is None else dataset.labels[ids]

    return np.stack([averaged_losses(m, images, t, n_noise, use_flip, seed,
                                     labels if m.arch.is_conditional else None, ids)
                     for m in tqdm(models, disable=not verbose, desc='losses')])

def run_lira(ensemble, target, dataset, t=100, n_noise=1, use_flip=False, target_membership=None,
             fixed_variance=False, seed=0, ids=None, verbose=False):
    """Likelihood-ratio attack on a target model.

    Parameters
    ----------
    ensemble : ShadowEnsemble
        Shadow models. Each example must be IN for some model and OUT for another.
    target : DenoiserModel
        Attacked model.
    dataset : Dataset
        The examples, indexed as the ensemble masks.
    t : int
        Timestep of the loss.
    n_noise : int
        Number of noise draws per loss.
    use_flip : bool
        Also average over flipped images.
    target_membership : array_like of bool, optional
        True membership of each example in the target, used as labels.
    fixed_variance : bool
        If True, a single deviation per side pooled over all examples is used.
    seed : int
        Seed of the loss noise.
    ids : array_like, optional
        Examples attacked. Defaults to all.
    verbose : bool
        Show progress.

    Returns
    -------
    AttackScoreSet
        LiRA scores.
    """

    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    ensemble.check_coverage(ids)

    shadow = model_losses(ensemble.models, dataset, t, n_noise, use_flip, seed, ids, verbose)
    target_l = model_losses([target], dataset, t, n_noise, use_flip, seed, ids)[0]
    masks = ensemble.masks[:, ids]

    sigma_in = sigma_out = None
    if fixed_variance:
        sigma_in, sigma_out = _global_sigmas(shadow, masks)

    scores = np.empty(len(ids))
    for j in range(len(ids)):
        lira_stats = fit_lira_stats(shadow[masks[:, j], j], shadow[~masks[:, j], j], sigma_in,
                                    sigma_out)
        scores[j] = lira_score(target_l[j], lira_stats)

    labels = None if target_membership is None else np.asarray(target_membership)[ids]
    config = {'n_noise': n_noise, 'use_flip': use_flip, 'fixed_variance': fixed_variance,
              'shadow_models': len(ensemble)}

    return AttackScoreSet(scores, labels, 'lira', t, config, ids)

def run_loss_attack(target, dataset, t=100, n_noise=1, use_flip=False, target_membership=None,
                    seed=0, ids=None):
    """Loss-threshold attack as a score set, with score = -loss."""

    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    losses = model_losses([target], dataset, t, n_noise, use_flip, seed, ids)[0]
    labels = None if target_membership is None else np.asarray(target_membership)[ids]

    return AttackScoreSet(-losses, labels, 'loss', t, {'n_noise': n_noise, 'use_flip': use_flip},
                          ids)

def split_target(ensemble, index):
    """Use model `index` of an ensemble as target and the other models as shadows.

    Returns
    -------
    shadows : ShadowEnsemble
        Ensemble without the target.
    target : DenoiserModel
        The target model.
    membership : ndarray
        Membership of each example in the target's training set.
    """

    if not 0<=index<len(ensemble):
        raise ArgumentError(f'Target index {index} outside the ensemble')

    keep = [idx for idx in range(len(ensemble)) if idx!=index]
    checkpoints = {step: [models[idx] for idx in keep] for step, models in ensemble.checkpoints.items()}
    shadows = ShadowEnsemble([ensemble.models[idx] for idx in keep], ensemble.masks[keep],
                             ensemble.split, ensemble.dataset_id, checkpoints)

    return shadows, ensemble.models[index], ensemble.masks[index].copy()

@dataclass
class RocCurve:
    """Empirical ROC curve. `thresholds[i]` gives (fpr[i], tpr[i]) when predicting member for
    scores >= thresholds[i]."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    num_pos: int
    num_neg: int

    def to_table(self):

        return pd.DataFrame({'threshold': self.thresholds, 'fpr': self.fpr, 'tpr': self.tpr})

def roc_curve(scores, labels=None):
    """Exact ROC curve over all score thresholds.

    Parameters
    ----------
    scores : AttackScoreSet or array_like
        Scores, higher meaning member.
    labels : array_like of bool, optional
        Membership labels. Required when `scores` is an array.

    Returns
    -------
    RocCurve
        The curve.
    """

    if isinstance(scores, AttackScoreSet):
        labels = scores.labels
        scores = scores.scores
    if labels is None:
        raise ArgumentError('ROC computation needs membership labels')
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    if labels.all() or not labels.any():
        raise DegenerateInputError('ROC needs both members and non-members')

    fpr, tpr, thresholds = sk_metrics.roc_curve(labels, scores, drop_intermediate=False)

    return RocCurve(fpr, tpr, thresholds, float(sk_metrics.auc(fpr, tpr)), int(labels.sum()),
                    int((~labels).sum()))

def tpr_at_fpr(curve, fpr):
    """Largest true positive rate among operating points with false positive rate at most `fpr`.
    No interpolation is done."""

    valid = curve.fpr<=fpr
    if not valid.any():
        return 0.

    return float(curve.tpr[valid].max())

def log_log_roc(curve, bins=50, min_fpr=None):
    """TPR on a log-spaced FPR grid, for log-log plots.

    Parameters
    ----------
    curve : RocCurve
        The curve.
    bins : int
        Number of grid points.
    min_fpr : float, optional
        Smallest FPR of the grid. Defaults to 1/(number of non-members).

    Returns
    -------
    pandas.DataFrame
        Columns fpr and tpr.
    """

    if min_fpr is None:
        min_fpr = 1/curve.num_neg
    grid = np.logspace(np.log10(min_fpr), 0, bins)

    return pd.DataFrame({'fpr': grid, 'tpr': [tpr_at_fpr(curve, value) for value in grid]})

def timestep_sweep(ensemble, target, dataset, t_list, fpr=0.01, target_membership=None,
                   n_noise=1, use_flip=False, seed=0, ids=None):
    """Run LiRA at several timesteps.

    Returns
    -------
    pandas.DataFrame
        Columns t, tpr and auc.
    """

    if target_membership is None:
        raise ArgumentError('A timestep sweep needs the target membership')
    rows = []
    for t in t_list:
        if not 1<=t<=target.schedule.T:
            raise ArgumentError(f'Timestep {t} outside [1, {target.schedule.T}]')
        scores = run_lira(ensemble, target, dataset, t, n_noise, use_flip, target_membership,
                          seed=seed, ids=ids)
        curve = roc_curve(scores)
        rows.append({'t': int(t), 'tpr': tpr_at_fpr(curve, fpr), 'auc': curve.auc})
        logger.info('t=%d: TPR %.3f at FPR %.3g, AUC %.3f', t, rows[-1]['tpr'], fpr, curve.auc)

    return pd.DataFrame(rows, columns=['t', 'tpr', 'auc'])

def training_progress_attack(checkpoints, ensemble, dataset, target_membership, t=100, fpr=0.1,
                             n_noise=1, use_flip=False, seed=0):
    """LiRA success along the training of a target model. Shadow models are taken at the same
    step when the ensemble holds checkpoints for it, otherwise fully trained shadows are used.

    Parameters
    ----------
    checkpoints : list of tuple
        (step, model) pairs of the target, ordered by step.
    ensemble : ShadowEnsemble
        Shadow models.
    dataset : Dataset
        The examples.
    target_membership : array_like of bool
        Membership of each example in the target.
    t : int
        Timestep of the loss.
    fpr : float
        False positive rate at which TPR is reported.

    Returns
    -------
    progress : pandas.DataFrame
        Columns step, examples_seen, tpr and auc.
    first_success : pandas.DataFrame
        For each member, the first step at which its score exceeds the threshold giving `fpr`
        on non-members, or -1.
    """

    steps = [step for step, _ in checkpoints]
    if steps!=sorted(steps):
        raise ArgumentError('Checkpoints must be ordered by step')

    membership = np.asarray(target_membership, dtype=bool)
    members = np.nonzero(membership)[0]
    first_step = np.full(len(members), -1)
    rows = []
    for step, model in checkpoints:
        shadows = ensemble
        if step in ensemble.checkpoints:
            shadows = replace(ensemble, models=ensemble.checkpoints[step])
        scores = run_lira(shadows, model, dataset, t, n_noise, use_flip, membership, seed=seed)
        curve = roc_curve(scores)
        rows.append({'step': step, 'examples_seen': model.examples_seen,
                     'tpr': tpr_at_fpr(curve, fpr), 'auc': curve.auc})

        tau = np.quantile(scores.scores[~membership], 1 - fpr, method='higher')
        success = scores.scores[members]>tau
        first_step[(first_step<0) & success] = step

    progress = pd.DataFrame(rows, columns=['step', 'examples_seen', 'tpr', 'auc'])
    first_success = pd.DataFrame({'example_id': members, 'first_step': first_step})

    return progress, first_success

def rank_vulnerability(scores, top=10):
    """Members ranked by attack score.

    Returns
    -------
    easiest : pandas.DataFrame
        The `top` members with the highest scores.
    hardest : pandas.DataFrame
        The `top` members with the lowest scores.
    """

    if scores.labels is None:
        raise ArgumentError('Ranking members needs membership labels')

    table = scores.to_table()
    table = table[table['member']==1].sort_values(['score', 'id'], ascending=[False, True],
                                                   kind='stable')
    table['rank'] = np.arange(1, len(table)+1)

    return table.head(top).reset_index(drop=True), table.tail(top)[::-1].reset_index(drop=True)

def compare_attacks(score_sets, fprs=(0.01, 0.1)):
    """AUC and TPR at fixed FPRs of several attacks.

    Parameters
    ----------
    score_sets : dict
        Maps a name to an AttackScoreSet.
    fprs : tuple of float
        FPR values at which TPR is reported.

    Returns
    -------
    pandas.DataFrame
        One row per attack.
    """

    rows = []
    for name, scores in score_sets.items():
        curve = roc_curve(scores)
        row = {'attack': name, 't': scores.t, 'auc': curve.auc}
        for value in fprs:
            row[f'tpr_at_{value:g}'] = tpr_at_fpr(curve, value)
        rows.append(row)

    return pd.DataFrame(rows)
