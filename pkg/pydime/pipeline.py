"""Experiment pipeline executing the stages of a privacy audit (training, generation, extraction,
membership inference, inpainting, deduplication and canaries) and storing their artifacts."""

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import data_io, defenses, extraction, inpainting_attack, membership
from .config import output_root
from .dataset import make_toy_dataset
from .diffusion.checkpoint import load_checkpoint, save_checkpoint
from .diffusion.model import build_model
from .diffusion.sampling import GenerationRequest, sample
from .diffusion.training import train
from .errors import ConfigurationError, StateError
from .util import derive_seed, file_hash, read_table, write_json, write_table

logger = logging.getLogger(__name__)

class Experiment:
    """Run the stages of an experiment described by an ExperimentConfig. Each stage writes its
    artifacts in its own folder of the output directory, and after every stage the run manifest
    `manifest.json` is updated with the configuration, the derived seeds and the SHA-256 of
    every artifact.

    Parameters
    ----------
    config : ExperimentConfig
        The configuration.
    output_path : str or Path, optional
        Output directory. Defaults to config.output_dir, then to a folder named after the seed
        under the output root.
    verbose : bool
        Show progress bars.
    """

    STAGES = ('train', 'generate', 'extract', 'mia', 'sweep-t', 'progress', 'inpaint', 'dedup',
              'canary', 'report')
    DIRECTORY_NAMES = ('train', 'generate', 'extract', 'mia', 'sweep_t', 'progress', 'inpaint',
                       'dedup', 'canary', 'report')
    MANIFEST_NAME = 'manifest.json'

    def __init__(self, config, output_path=None, verbose=False):

        if output_path is None:
            output_path = config.output_dir
        if output_path is None:
            output_path = output_root()/f'run-{config.seed}'

        self.config = config
        self.output_path = Path(output_path)
        self.verbose = verbose
        self.seeds = {}
        self.artifacts = {}
        self._data = None
        self._schedule = None

        if config.threads>0:
            torch.set_num_threads(config.threads)

    def derive_seed(self, *labels):
        """Child seed of the master seed, recorded in the manifest."""

        seed = derive_seed(self.config.seed, *labels)
        self.seeds[':'.join(str(label) for label in labels)] = seed

        return seed

    def get_output_directory(self, stage):
        """Output folder of a stage."""

        directory = self.output_path/self.DIRECTORY_NAMES[self.STAGES.index(stage)]
        directory.mkdir(parents=True, exist_ok=True)

        return directory

    @property
    def data(self):
        """Training set described by the data configuration."""

        if self._data is None:
            cfg = self.config.data
            if cfg.format=='toy':
                duplicates = {int(idx): count for idx, count in cfg.toy_duplicates.items()}
                data = make_toy_dataset(cfg.toy_size, cfg.toy_shape, duplicates,
                                        cfg.toy_num_classes, seed=self.derive_seed('toy-data'))
            elif cfg.format=='cifar10':
                data = data_io.read_cifar10(cfg.path)
            else:
                data = data_io.read_raw(cfg.path)
            if cfg.limit is not None and cfg.limit<len(data):
                groups = data.provenance.get('duplicate_groups')
                data = data.subset(np.arange(cfg.limit), operation='limit')
                if groups is not None:
                    data.provenance['duplicate_groups'] = {
                        idx: [member for member in members if member<cfg.limit]
                        for idx, members in groups.items() if idx<cfg.limit}
            logger.info('Loaded dataset with %d images of shape %s', len(data), data.shape)
            self._data = data

        return self._data

    @property
    def schedule(self):

        if self._schedule is None:
            self._schedule = self.config.schedule.build()

        return self._schedule

    def training_config(self, role='main'):
        """Training configuration of a stage, with a seed derived from the master seed."""

        return replace(self.config.train, seed=self.derive_seed('train', role))

    def run(self, stage):
        """Execute a stage and update the run manifest."""

        if stage not in self.STAGES:
            raise ConfigurationError(f'Unknown stage {stage}, use one of {self.STAGES}')

        logger.info('Running stage %s in %s', stage, self.output_path)
        runner = getattr(self, '_run_' + stage.replace('-', '_'))
        result = runner()
        self.save_manifest(stage)

        return result

    def _record(self, path):
        """Register an artifact of the run."""

        path = Path(path)
        self.artifacts[str(path.relative_to(self.output_path))] = file_hash(path)

        return path

    def _write_table(self, stage, name, table):

        return self._record(write_table(self.get_output_directory(stage)/name, table))

    def _write_json(self, stage, name, obj):

        return self._record(write_json(self.get_output_directory(stage)/name, obj))

    def save_manifest(self, stage):
        """Write the run manifest. Artifacts of previous invocations are kept."""

        path = self.output_path/self.MANIFEST_NAME
        stages = []
        artifacts = {}
        seeds = {}
        if path.is_file():
            previous = json.loads(path.read_text())
            stages = previous.get('stages', [])
            artifacts = previous.get('artifacts', {})
            seeds = previous.get('seeds', {})
        artifacts.update(self.artifacts)
        seeds.update(self.seeds)
        if stage not in stages:
            stages.append(stage)

        manifest = {'config': self.config.to_dict(), 'stages': stages, 'seeds': seeds,
                    'artifacts': dict(sorted(artifacts.items()))}

        return write_json(path, manifest)

    def _checkpoint_path(self):

        path = self.config.generate.checkpoint
        if path is None:
            path = self.get_output_directory('train')/'checkpoints'/'final.ckpt'
        path = Path(path)
        if not path.is_file():
            raise StateError(f'Checkpoint {path} not found, run the train stage first')

        return path

    def _run_train(self):

        checkpoint_dir = self.get_output_directory('train')/'checkpoints'
        cfg = self.training_config()

        def save_step(step, model):
            path = checkpoint_dir/f'step_{step:07d}.ckpt'
            save_checkpoint(path, model, seed=self.config.seed)
            self._record(path)

        model = train(self.data, cfg, self.schedule, self.config.arch, on_checkpoint=save_step,
                      verbose=self.verbose)
        final = checkpoint_dir/'final.ckpt'
        save_checkpoint(final, model, seed=self.config.seed)
        self._record(final)
        self._write_table('train', 'history.csv',
                          {'step': np.arange(1, len(model.history)+1), 'loss': model.history})

        return model

    def _generations_path(self):

        return self.get_output_directory('generate')/'generations.json'

    def _run_generate(self):

        cfg = self.config.generate
        model, _ = load_checkpoint(self._checkpoint_path())
        label = cfg.label
        if label is None and model.arch.is_conditional:
            label = 0
        seed = self.derive_seed('generate')
        images = sample(model, model.schedule, GenerationRequest(seed, label, cfg.count),
                        cfg.stride, cfg.batch_size, self.verbose)
        manifest, tensor = data_io.export_tensor(images, self._generations_path())
        self._record(manifest)
        self._record(tensor)

        return images

    def _load_generations(self):

        path = self._generations_path()
        if not path.is_file():
            raise StateError(f'Generations {path} not found, run the generate stage first')

        return data_io.read_raw(path).images

    def _run_extract(self):

        cfg = self.config.extract
        data = self.data
        images = self._load_generations()
        params = {'alpha': cfg.alpha, 'n': cfg.n, 'delta': cfg.delta,
                  'eidetic_delta': cfg.eidetic_delta}

        score_cutoff = cfg.score_cutoff
        if cfg.calibrate:
            untrained = build_model(self.config.arch, data.shape, self.schedule,
                                    seed=self.derive_seed('untrained'))
            label = 0 if untrained.arch.is_conditional else None
            null_images = sample(untrained, self.schedule,
                                 GenerationRequest(self.derive_seed('null'), label, len(images)))
            null_records = extraction.score_generations(null_images, data, **params)
            score_cutoff = extraction.calibrate_score_cutoff([rec.score for rec in null_records])
            logger.info('Calibrated score cutoff %.4g', score_cutoff)

        records = extraction.score_generations(images, data, score_cutoff=score_cutoff, **params)
        self._write_table('extract', 'records.csv', extraction.records_table(records))
        extracted = extraction.untargeted_extraction_scan(images, data, score_cutoff=score_cutoff,
                                                          **params)
        self._write_table('extract', 'extracted.csv', extraction.records_table(extracted))
        summary = {'generations': len(images), 'extracted': len(extracted),
                   'score_cutoff': score_cutoff}

        if cfg.clique_threshold is not None:
            threshold = cfg.clique_threshold
            if threshold=='auto':
                threshold = extraction.calibrate_edge_threshold(images, cfg.grid)
            flag = extraction.flag_memorized(images, threshold, cfg.clique_min, cfg.grid)
            summary['clique'] = None if flag is None else {
                'size': len(flag.clique), 'nodes': list(flag.clique.nodes),
                'representative': flag.representative, 'mean_distance': flag.mean_distance,
                'approximate': flag.clique.approximate, 'threshold': threshold}

        groups = data.provenance.get('duplicate_groups')
        if groups:
            table = extraction.extraction_frequency_by_duplication(images, data, groups, cfg.delta)
            self._write_table('extract', 'duplication.csv', table)

        if cfg.targeted_top>0:
            model, _ = load_checkpoint(self._checkpoint_path())
            table = extraction.targeted_outlier_extraction(
                model, model.schedule, data, cfg.targeted_top, cfg.targeted_per_target,
                delta=cfg.delta, seed=self.derive_seed('targeted'))
            self._write_table('extract', 'targeted.csv', table)

        self._write_json('extract', 'summary.json', summary)

        return extracted

    def _run_report(self):

        path = self.get_output_directory('extract')/'records.csv'
        if not path.is_file():
            raise StateError(f'Extraction records {path} not found, run the extract stage first')
        records = read_table(path)
        labels = records['distance']<=self.config.extract.delta
        table = extraction.precision_recall(records['score'], labels)
        self._write_table('report', 'precision_recall.csv', table)

        return table

    def _ensemble_key(self):

        cfg = self.config
        return {'data': cfg.to_dict()['data'], 'train': cfg.to_dict()['train'],
                'arch': cfg.arch.to_dict(), 'schedule': cfg.to_dict()['schedule'],
                'shadow_models': cfg.mia.shadow_models, 'split': cfg.mia.split,
                'seed': cfg.seed}

    def _save_ensemble(self, ensemble, directory):

        steps = sorted(ensemble.checkpoints)
        for index, model in enumerate(ensemble.models):
            path = directory/f'model_{index:03d}.ckpt'
            save_checkpoint(path, model)
            self._record(path)
        for step in steps:
            for index, model in enumerate(ensemble.checkpoints[step]):
                path = directory/'checkpoints'/f'step_{step:07d}_model_{index:03d}.ckpt'
                save_checkpoint(path, model)
                self._record(path)
        self._write_json('mia', 'ensemble/ensemble.json',
                         {'key': self._ensemble_key(), 'masks': ensemble.masks.astype(int),
                          'split': ensemble.split, 'steps': steps})

    def _load_ensemble(self, directory):

        info = json.loads((directory/'ensemble.json').read_text())
        masks = np.array(info['masks'], dtype=bool)
        models = [load_checkpoint(directory/f'model_{index:03d}.ckpt')[0]
                  for index in range(len(masks))]
        checkpoints = {}
        for step in info['steps']:
            checkpoints[step] = [
                load_checkpoint(directory/'checkpoints'/f'step_{step:07d}_model_{index:03d}.ckpt')[0]
                for index in range(len(masks))]
        dataset_id = self.data.provenance.get('source', '')

        return membership.ShadowEnsemble(models, masks, info['split'], dataset_id, checkpoints)

    def ensemble(self):
        """Shadow models of the run. They are trained once and reused by the mia, sweep-t,
        progress and inpaint stages while the configuration is unchanged."""

        directory = self.get_output_directory('mia')/'ensemble'
        info_path = directory/'ensemble.json'
        if info_path.is_file():
            info = json.loads(info_path.read_text())
            if info.get('key')==self._ensemble_key():
                logger.info('Reusing shadow models from %s', directory)
                return self._load_ensemble(directory)

        cfg = self.config.mia
        ensemble = membership.train_shadow_models(
            self.data, cfg.shadow_models, cfg.split, self.training_config('shadow'),
            self.schedule, self.config.arch, self.data.provenance.get('source', ''), self.verbose)
        self._save_ensemble(ensemble, directory)

        return ensemble

    def _run_mia(self):

        cfg = self.config.mia
        shadows, target, target_membership = membership.split_target(self.ensemble(),
                                                                      cfg.target_index)
        seed = self.derive_seed('mia-noise')
        lira = membership.run_lira(shadows, target, self.data, cfg.t, cfg.n_noise, cfg.use_flip,
                                   target_membership, cfg.fixed_variance, seed,
                                   verbose=self.verbose)
        loss = membership.run_loss_attack(target, self.data, cfg.t, cfg.n_noise, cfg.use_flip,
                                          target_membership, seed)
        curve = membership.roc_curve(lira)

        self._write_table('mia', 'scores.csv', lira.to_table())
        self._write_table('mia', 'roc.csv', curve.to_table())
        self._write_table('mia', 'roc_loglog.csv', membership.log_log_roc(curve))
        comparison = membership.compare_attacks({'loss': loss, 'lira': lira},
                                                fprs=(cfg.fpr, cfg.progress_fpr))
        self._write_table('mia', 'comparison.csv', comparison)
        easiest, hardest = membership.rank_vulnerability(lira)
        self._write_table('mia', 'easiest.csv', easiest)
        self._write_table('mia', 'hardest.csv', hardest)
        logger.info('LiRA: AUC %.3f, TPR %.3f at FPR %.3g', curve.auc,
                    membership.tpr_at_fpr(curve, cfg.fpr), cfg.fpr)

        return comparison

    def _run_sweep_t(self):

        cfg = self.config.mia
        T = self.schedule.T
        t_list = cfg.t_list
        if t_list is None:
            t_list = sorted({1, max(1, T//10), max(1, T//4), max(1, T//2), max(1, 9*T//10)})
        shadows, target, target_membership = membership.split_target(self.ensemble(),
                                                                      cfg.target_index)
        table = membership.timestep_sweep(shadows, target, self.data, t_list, cfg.fpr,
                                          target_membership, cfg.n_noise, cfg.use_flip,
                                          self.derive_seed('mia-noise'))
        self._write_table('sweep-t', 'sweep.csv', table)

        return table

    def _run_progress(self):

        if self.config.train.checkpoint_every<1:
            raise ConfigurationError('The progress stage needs train.checkpoint_every > 0')

        cfg = self.config.mia
        ensemble = self.ensemble()
        shadows, target, target_membership = membership.split_target(ensemble, cfg.target_index)
        checkpoints = ensemble.checkpoints_of(cfg.target_index)
        if not checkpoints or checkpoints[-1][0]!=target.step:
            checkpoints.append((target.step, target))
        progress, first_success = membership.training_progress_attack(
            checkpoints, shadows, self.data, target_membership, cfg.t, cfg.progress_fpr,
            cfg.n_noise, cfg.use_flip, self.derive_seed('mia-noise'))
        self._write_table('progress', 'progress.csv', progress)
        self._write_table('progress', 'first_success.csv', first_success)

        return progress

    def _run_inpaint(self):

        cfg = self.config.inpaint
        ensemble = self.ensemble()
        in_counts, out_counts = ensemble.coverage()
        covered = np.nonzero((in_counts>0) & (out_counts>0))[0]
        if covered.size==0:
            raise ConfigurationError('No example has both an IN and an OUT shadow model')
        targets = covered[:cfg.num_targets]
        mask = inpainting_attack.MaskSpec(cfg.mask, cfg.fraction, self.derive_seed('mask'))

        table, sets = inpainting_attack.evaluate_attack(
            ensemble, self.schedule, self.data, targets, mask, cfg.n, cfg.top_k, cfg.t,
            self.derive_seed('inpaint'), cfg.n_noise, cfg.jump_length, cfg.resamplings)
        self._write_table('inpaint', 'inpaint.csv', table)

        directory = self.get_output_directory('inpaint')/'reconstructions'
        for (target_id, side), rset in sorted(sets.items()):
            manifest, tensor = data_io.export_tensor(rset.reconstructions,
                                                     directory/f'target_{target_id:05d}_{side}.json')
            self._record(manifest)
            self._record(tensor)

        summary = {'targets': len(table), 'successes': int(table['success'].sum()),
                   'sign_test_p': inpainting_attack.sign_test(table)}
        self._write_json('inpaint', 'summary.json', summary)

        return table

    def _run_dedup(self):

        cfg = self.config.dedup
        data = self.data
        result = defenses.deduplicate(data, cfg.threshold)
        self._write_table('dedup', 'dedup.csv', result.to_table())
        removed_path = self.get_output_directory('dedup')/'removed_ids.txt'
        removed_path.write_text(''.join(f'{idx}\n' for idx in result.removed))
        self._record(removed_path)

        if cfg.experiment:
            extract = self.config.extract
            table = defenses.dedup_defense_experiment(
                data, cfg.threshold, self.training_config('dedup'), self.schedule, self.config.arch,
                cfg.generations, self.derive_seed('dedup-generate'), alpha=extract.alpha,
                n=extract.n, score_cutoff=extract.score_cutoff, delta=extract.delta,
                eidetic_delta=extract.eidetic_delta)
            self._write_table('dedup', 'dedup_experiment.csv', table)

        return result

    def _run_canary(self):

        cfg = self.config.canary
        data = self.data
        pool = defenses.generate_canaries(cfg.pool_size, data.shape, self.derive_seed('canaries'))
        counts = defenses.assign_duplicate_counts(cfg.duplicate_counts, cfg.per_count)
        table, pool = defenses.canary_audit(data, pool, counts, self.training_config('canary'),
                                            self.schedule, self.config.arch, cfg.t, cfg.n_noise,
                                            cfg.label, self.verbose)
        self._write_table('canary', 'exposure.csv', table)
        summary = {'pool_size': pool.pool_size, 'max_exposure': pool.max_exposure,
                   'null_mean': defenses.exposure_null_mean(pool.pool_size)}
        if len(counts)<pool.pool_size:
            summary['null_ks_p'] = defenses.null_agreement(pool, seed=self.derive_seed('null'))
        self._write_json('canary', 'summary.json', summary)

        return table
