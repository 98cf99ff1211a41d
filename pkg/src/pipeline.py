"""
Integration of the two stages: dataset -> stage 1 -> feature cache ->
stage 2 -> predictions -> evaluation, with one output directory per step
under the run root.
"""
import json
import logging
import os
from dataclasses import replace

from errors import ConfigError, DataError, EvaluationError
from eval_metrics import evaluate, read_prediction_dir, stability_section, write_report
from feature_cache import FeatureCache
from phase_data import (generate_synthetic, load_annotations, load_phase_mapping,
                        make_split, write_canonical, write_phase_mapping, write_synthetic)
from regime_probe import run_probe, write_probe
from runtime import set_seed, write_manifest
from stage1_train import (Stage1Checkpoint, extract_features, search_stage1_learning_rate,
                          train_stage1)
from temporal_tcn import (TcnCheckpoint, framewise_predictions, predict, search_stage2_learning_rate,
                          train_stage2, write_predictions)
from visualization import render_prediction_ribbons

logger = logging.getLogger(__name__)

SPLIT_NAMES = ('train', 'val', 'test')


class RunPaths:
    def __init__(self, root):
        self.root = root
        self.data = os.path.join(root, 'data')
        self.stage1 = os.path.join(root, 'stage1')
        self.stage1_checkpoint = os.path.join(self.stage1, 'stage1.ckpt')
        self.features = os.path.join(root, 'features')
        self.stage2 = os.path.join(root, 'stage2')
        self.stage2_checkpoint = os.path.join(self.stage2, 'stage2.ckpt')
        self.predictions = os.path.join(root, 'preds')
        self.stage1_predictions = os.path.join(root, 'preds_stage1')
        self.report = os.path.join(root, 'report')
        self.probe = os.path.join(root, 'probe')


class PhaseRecognitionPipeline:
    """
    Runs the pipeline steps for one PipelineConfig. Every step that produces
    outputs writes a manifest next to them once it has succeeded.
    """

    def __init__(self, config, out_root=None, argv=None, progress=True):
        self.config = config
        self.paths = RunPaths(out_root or config.out_root)
        self.argv = argv
        self.progress = progress
        self._dataset = None
        set_seed(config.seed)

    def _manifest(self, out_dir, command, extra=None):
        return write_manifest(out_dir, command, self.config.to_json(), self.config.seed,
                              argv=self.argv, extra=extra)

    # Data

    def synthesize(self, out_dir=None):
        spec = self.config.synthetic
        if spec is None:
            raise ConfigError('No [synthetic] section in the config')
        out_dir = out_dir or self.paths.data
        dataset = generate_synthetic(spec)
        videos = write_synthetic(dataset, out_dir)
        self._manifest(out_dir, 'data synth', {'videos': len(videos)})
        return videos, dataset.vocabulary

    def ingest(self, source, format_id, out_dir):
        videos, vocabulary = load_annotations(source, format_id)
        write_canonical(videos, vocabulary, out_dir, frames_root=source)
        self._manifest(out_dir, 'data ingest', {'source': os.path.abspath(source),
                                                'format': format_id, 'videos': len(videos)})
        return videos, vocabulary

    def load_dataset(self):
        """(videos, vocabulary, split); synthetic data is generated on first use"""
        if self._dataset is not None:
            return self._dataset
        if self.config.synthetic is not None:
            if not os.path.isdir(os.path.join(self.paths.data, 'annotations')):
                self.synthesize()
            videos, vocabulary = load_annotations(self.paths.data, 'canonical-tsv')
        else:
            self.config.validate_paths()
            videos, vocabulary = load_annotations(self.config.dataset.root,
                                                  self.config.dataset.format)
        counts = self.config.dataset.split_counts(len(videos))
        split = make_split(videos, counts, self.config.dataset.ordering)
        os.makedirs(self.paths.root, exist_ok=True)
        write_phase_mapping(vocabulary, os.path.join(self.paths.root, 'phases.json'))
        with open(os.path.join(self.paths.root, 'split.json'), 'w') as f:
            json.dump(split.to_json(), f, indent=2)
        logger.info('Split: %d train / %d val / %d test', len(split.train), len(split.val),
                    len(split.test))
        self._dataset = (videos, vocabulary, split)
        return self._dataset

    # Stage 1

    def stage1_lr_search(self):
        videos, vocabulary, split = self.load_dataset()
        result = search_stage1_learning_rate(videos, split, vocabulary, self.config.stage1)
        out_dir = os.path.join(self.paths.stage1, 'lr_search')
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, 'lr_search.json'), 'w') as f:
            json.dump({'selected': result.rate,
                       'scores': {f'{r:.3e}': s for r, s in sorted(result.scores.items())}},
                      f, indent=2, sort_keys=True)
        self._manifest(out_dir, 'stage1 lr-search', {'selected_lr': result.rate})
        return result

    def _stage1_config(self):
        cfg = self.config.stage1
        if cfg.lr is None:
            cfg = replace(cfg, lr=self.stage1_lr_search().rate)
        return cfg

    def train_stage1(self):
        videos, vocabulary, split = self.load_dataset()
        cfg = self._stage1_config()
        checkpoint = train_stage1(videos, split, vocabulary, cfg, checkpoint_dir=self.paths.stage1,
                                  progress=self.progress)
        checkpoint.save(self.paths.stage1_checkpoint)
        extra = {'best_epoch': checkpoint.epoch, 'best_val_accuracy': checkpoint.best_val_accuracy}
        if hasattr(checkpoint.model, 'prompt_bank'):
            extra['reference_indices'] = list(
                checkpoint.model.prompt_bank.config.reference_indices)
        self._manifest(self.paths.stage1, 'stage1 train', extra)
        return checkpoint

    def load_stage1(self):
        return Stage1Checkpoint.load(self.paths.stage1_checkpoint)

    def extract(self, splits=SPLIT_NAMES, checkpoint=None, batch_size=None):
        videos, _, split = self.load_dataset()
        unknown = [s for s in splits if s not in SPLIT_NAMES]
        if unknown:
            raise ConfigError(f'Unknown split name(s) {unknown}; use {SPLIT_NAMES}')
        wanted = {vid for s in splits for vid in getattr(split, s)}
        selected = [v for v in videos if v.video_id in wanted]
        checkpoint = checkpoint or self.load_stage1()
        cache = FeatureCache(self.paths.features)
        extract_features(checkpoint, selected, cache,
                         batch_size=batch_size or self.config.stage1.batch_size,
                         progress=self.progress)
        self._manifest(self.paths.features, 'stage1 extract',
                       {'splits': list(splits), 'videos': cache.video_ids()})
        return cache

    # Stage 2

    def train_stage2(self):
        _, vocabulary, split = self.load_dataset()
        cache = FeatureCache(self.paths.features)
        cfg = self.config.stage2
        if cfg.lr is None:
            result = search_stage2_learning_rate(cache, split, vocabulary.P, cfg)
            cfg = replace(cfg, lr=result.rate)
        checkpoint = train_stage2(cache, split, vocabulary.P, cfg, progress=self.progress)
        checkpoint.save(self.paths.stage2_checkpoint)
        self._manifest(self.paths.stage2, 'stage2 train',
                       {'best_epoch': checkpoint.epoch, 'lr': cfg.lr,
                        'best_val_accuracy': checkpoint.best_val_accuracy})
        return checkpoint

    def predict(self, split_name='test', out_dir=None):
        _, _, split = self.load_dataset()
        if split_name not in SPLIT_NAMES:
            raise ConfigError(f'Unknown split {split_name!r}')
        video_ids = list(getattr(split, split_name))
        if not video_ids:
            raise DataError(f'The {split_name} split is empty; nothing to predict')
        cache = FeatureCache(self.paths.features)
        cache.require(video_ids)
        out_dir = out_dir or self.paths.predictions
        checkpoint = TcnCheckpoint.load(self.paths.stage2_checkpoint)
        write_predictions(predict(checkpoint, cache, video_ids), out_dir,
                          save_logits=self.config.eval.save_logits)
        self._manifest(out_dir, 'stage2 predict', {'split': split_name})

        if self.config.eval.stability and os.path.exists(self.paths.stage1_checkpoint):
            framewise = framewise_predictions(self.load_stage1(), cache, video_ids)
            write_predictions(framewise, self.paths.stage1_predictions,
                              save_logits=self.config.eval.save_logits)
            self._manifest(self.paths.stage1_predictions, 'stage2 predict',
                           {'split': split_name, 'method': 'stage1 framewise'})
        return out_dir

    # Evaluation

    def phase_names(self):
        path = os.path.join(self.paths.root, 'phases.json')
        if os.path.exists(path):
            return load_phase_mapping(path)[0].names
        return self.load_dataset()[1].names

    def evaluate(self, preds_dir=None, out_dir=None, baseline_dir=None, phase_names=None):
        preds_dir = preds_dir or self.paths.predictions
        out_dir = out_dir or self.paths.report
        names = phase_names or self.phase_names()
        report = evaluate_directories(preds_dir, out_dir, names,
                                      baseline_dir=baseline_dir or self._baseline_dir(),
                                      ribbons=self.config.eval.ribbons,
                                      ribbon_videos=self.config.eval.ribbon_videos)
        self._manifest(out_dir, 'eval run')
        return report

    def _baseline_dir(self):
        if self.config.eval.stability and os.path.isdir(self.paths.stage1_predictions):
            return self.paths.stage1_predictions
        return None

    def run_all(self):
        """Data, stage 1, features, stage 2, predictions and the report, in order"""
        self.load_dataset()
        stage1 = self.train_stage1()
        self.extract(checkpoint=stage1)
        self.train_stage2()
        self.predict('test')
        report = self.evaluate()
        self._manifest(self.paths.root, 'pipeline all')
        return report

    def run_probe(self):
        table = run_probe(self.config.probe, self._probe_stage1_config(),
                          os.path.join(self.paths.probe, 'data'), progress=self.progress)
        path = write_probe(table, self.paths.probe)
        self._manifest(self.paths.probe, 'pipeline probe')
        return path

    def _probe_stage1_config(self):
        cfg = self.config.stage1
        if cfg.lr is None:
            raise ConfigError('pipeline probe needs stage1.lr; set it in the config or with '
                              '--set stage1.lr=...')
        return cfg


def evaluate_directories(preds_dir, out_dir, phase_names, baseline_dir=None, gt_dir=None,
                         ribbons=True, ribbon_videos=None):
    """
    Score the TSVs in `preds_dir` (and optionally a stage-1 baseline directory)
    and write report.json, report.md and ribbons/ into `out_dir`.
    """
    ground_truth, predictions = read_prediction_dir(preds_dir)
    if gt_dir is not None:
        ground_truth = _ground_truth_from(gt_dir, ground_truth)
    reports = [evaluate('stage2', predictions, ground_truth, phase_names)]
    methods = {'stage2': predictions}
    stability = None
    if baseline_dir is not None:
        _, baseline = read_prediction_dir(baseline_dir)
        reports.insert(0, evaluate('stage1', baseline, ground_truth, phase_names))
        methods = {'stage1': baseline, 'stage2': predictions}
        stability = stability_section(ground_truth, baseline, predictions)
    path = write_report(reports, out_dir, stability)

    if ribbons:
        logits_dirs = {'stage2': preds_dir}
        if baseline_dir is not None:
            logits_dirs['stage1'] = baseline_dir
        render_prediction_ribbons(ground_truth, methods, phase_names,
                                  os.path.join(out_dir, 'ribbons'), video_ids=ribbon_videos,
                                  logits_dirs=logits_dirs)
    return path


def _ground_truth_from(gt_dir, from_predictions):
    """Ground truth from a canonical dataset directory, checked against the prediction files"""
    videos, _ = load_annotations(gt_dir, 'canonical-tsv')
    ground_truth = {v.video_id: v.labels for v in videos if v.video_id in from_predictions}
    missing = sorted(set(from_predictions) - set(ground_truth))
    if missing:
        raise EvaluationError(f'{gt_dir} has no annotations for predicted videos {missing}')
    return ground_truth
