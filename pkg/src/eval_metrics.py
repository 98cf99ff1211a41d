"""
Phase recognition evaluation: video-wise accuracy, phase-wise video-wise
precision / recall / Jaccard, F1 from the mean precision and recall, and
transition counts for the stability comparison.

Per (video, phase) cells where the phase is absent from both ground truth and
prediction are undefined and left out. Inside a defined cell, precision is
undefined when the phase was never predicted and recall when it never occurs
in the ground truth; both are left out the same way (NaN, averaged with nanmean).
"""
import glob
import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import EvaluationError

logger = logging.getLogger(__name__)

METRICS = ('precision', 'recall', 'jaccard')


@dataclass
class AccuracySummary:
    mean: float
    std: float
    per_video: dict

    def to_json(self):
        return {'mean': self.mean, 'std': self.std, 'per_video': self.per_video}


@dataclass
class PhaseMetrics:
    cells: pd.DataFrame
    per_phase: pd.DataFrame
    mean: dict
    std: dict


@dataclass
class EvalReport:
    method: str
    phase_names: tuple
    accuracy: AccuracySummary
    phases: PhaseMetrics
    f1: float
    transitions: dict = field(default_factory=dict)

    def to_json(self):
        per_phase = {
            str(phase): {m: _finite_or_none(row[m]) for m in METRICS}
            for phase, row in self.phases.per_phase.iterrows()
        }
        return {
            'method': self.method,
            'accuracy': self.accuracy.to_json(),
            'precision': {'mean': _finite_or_none(self.phases.mean['precision']),
                          'std': _finite_or_none(self.phases.std['precision'])},
            'recall': {'mean': _finite_or_none(self.phases.mean['recall']),
                       'std': _finite_or_none(self.phases.std['recall'])},
            'jaccard': {'mean': _finite_or_none(self.phases.mean['jaccard']),
                        'std': _finite_or_none(self.phases.std['jaccard'])},
            'f1': _finite_or_none(self.f1),
            'per_phase': per_phase,
            'cells': [{k: _plain(v) for k, v in row.items()}
                      for row in self.phases.cells.to_dict(orient='records')],
            'transitions': self.transitions,
        }


def _finite_or_none(value):
    value = float(value)
    return value if np.isfinite(value) else None


def _plain(value):
    if isinstance(value, (float, np.floating)):
        return _finite_or_none(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _spread(values):
    """Sample standard deviation; 0 for a single value"""
    values = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if values.size == 0:
        return float('nan')
    if values.size == 1:
        return 0.0
    return float(np.std(values, ddof=1))


def _check_pair(video_id, pred, gt):
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise EvaluationError(f'{video_id}: {pred.size} predictions for {gt.size} '
                              f'ground-truth frames')
    if gt.size == 0:
        raise EvaluationError(f'{video_id}: empty label sequence')
    return pred, gt


def _video_ids(preds, video_ids):
    return list(video_ids) if video_ids is not None else [f'video{i + 1}' for i in range(len(preds))]


def accuracy(preds, gts, video_ids=None):
    """Frame accuracy per video, then mean and std across videos"""
    if len(preds) != len(gts):
        raise EvaluationError(f'{len(preds)} prediction sequences for {len(gts)} videos')
    if not preds:
        raise EvaluationError('No videos to evaluate')
    per_video = {}
    for video_id, pred, gt in zip(_video_ids(preds, video_ids), preds, gts):
        pred, gt = _check_pair(video_id, pred, gt)
        per_video[video_id] = float(np.mean(pred == gt))
    values = list(per_video.values())
    return AccuracySummary(mean=float(np.mean(values)), std=_spread(values), per_video=per_video)


def confusion_cells(preds, gts, P, video_ids=None):
    """One row per defined (video, phase) cell with TP/FP/FN and the three ratios"""
    rows = []
    for video_id, pred, gt in zip(_video_ids(preds, video_ids), preds, gts):
        pred, gt = _check_pair(video_id, pred, gt)
        for labels, kind in ((gt, 'ground truth'), (pred, 'prediction')):
            if labels.min() < 1 or labels.max() > P:
                raise EvaluationError(f'{video_id}: {kind} phase ids outside 1..{P}')
        for phase in range(1, P + 1):
            in_gt, in_pred = gt == phase, pred == phase
            if not in_gt.any() and not in_pred.any():
                continue
            tp = int(np.sum(in_gt & in_pred))
            fp = int(np.sum(~in_gt & in_pred))
            fn = int(np.sum(in_gt & ~in_pred))
            rows.append({
                'video_id': video_id, 'phase': phase, 'tp': tp, 'fp': fp, 'fn': fn,
                'precision': tp / (tp + fp) if tp + fp else float('nan'),
                'recall': tp / (tp + fn) if tp + fn else float('nan'),
                'jaccard': tp / (tp + fp + fn),
            })
    columns = ['video_id', 'phase', 'tp', 'fp', 'fn'] + list(METRICS)
    return pd.DataFrame(rows, columns=columns)


def phase_video_metrics(preds, gts, P, video_ids=None):
    """
    Average each metric per phase over the videos where it is defined, then
    report mean and std over phases.
    """
    if len(preds) != len(gts):
        raise EvaluationError(f'{len(preds)} prediction sequences for {len(gts)} videos')
    cells = confusion_cells(preds, gts, P, video_ids)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', category=RuntimeWarning)
        per_phase = (cells.groupby('phase')[list(METRICS)].mean()
                     .reindex(range(1, P + 1)))
    mean = {m: float(np.nanmean(per_phase[m])) if per_phase[m].notna().any() else float('nan')
            for m in METRICS}
    std = {m: _spread(per_phase[m].to_numpy()) for m in METRICS}
    return PhaseMetrics(cells=cells, per_phase=per_phase, mean=mean, std=std)


def f1_from_means(mean_precision, mean_recall):
    """Harmonic mean of the mean precision and the mean recall"""
    for name, value in (('precision', mean_precision), ('recall', mean_recall)):
        if not 0.0 <= value <= 1.0:
            raise EvaluationError(f'Mean {name} {value} outside [0, 1]')
    if mean_precision + mean_recall == 0:
        logger.warning('Mean precision and recall are both 0; F1 reported as 0')
        return 0.0
    return 2 * mean_precision * mean_recall / (mean_precision + mean_recall)


def count_transitions(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError('Cannot count transitions of an empty sequence')
    return int(np.count_nonzero(labels[1:] != labels[:-1]))


def evaluate(method, predictions, ground_truth, phase_names):
    """
    `predictions` and `ground_truth` map video id -> label sequence.
    Videos are scored in sorted id order so the report does not depend on input order.
    """
    missing = sorted(set(ground_truth) - set(predictions))
    if missing:
        raise EvaluationError(f'{method}: no predictions for videos {missing}')
    video_ids = sorted(ground_truth)
    preds = [np.asarray(predictions[v]) for v in video_ids]
    gts = [np.asarray(ground_truth[v]) for v in video_ids]
    P = len(phase_names)

    acc = accuracy(preds, gts, video_ids)
    phases = phase_video_metrics(preds, gts, P, video_ids)
    if np.isfinite(phases.mean['precision']) and np.isfinite(phases.mean['recall']):
        f1 = f1_from_means(phases.mean['precision'], phases.mean['recall'])
    else:
        f1 = float('nan')
    transitions = {v: count_transitions(p) for v, p in zip(video_ids, preds)}
    return EvalReport(method=method, phase_names=tuple(phase_names), accuracy=acc,
                      phases=phases, f1=f1, transitions=transitions)


def stability_section(ground_truth, framewise, temporal):
    """Transition counts of ground truth, stage-1 argmax and stage-2 per video"""
    rows, fewer = {}, 0
    for video_id in sorted(ground_truth):
        counts = {
            'ground_truth': count_transitions(ground_truth[video_id]),
            'stage1': count_transitions(framewise[video_id]),
            'stage2': count_transitions(temporal[video_id]),
        }
        fewer += counts['stage2'] < counts['stage1']
        rows[video_id] = counts
    return {'per_video': rows,
            'fraction_stage2_fewer': fewer / len(rows) if rows else None}


def read_prediction_dir(path):
    """Read `<video_id>.tsv` prediction files -> (ground truth, predictions) dicts"""
    if not os.path.isdir(path):
        raise EvaluationError(f'Prediction directory not found: {path}')
    files = sorted(glob.glob(os.path.join(path, '*.tsv')))
    if not files:
        raise EvaluationError(f'No prediction files (*.tsv) in {path}')
    ground_truth, predictions = {}, {}
    for file in files:
        video_id = os.path.splitext(os.path.basename(file))[0]
        try:
            table = pd.read_csv(file, sep='\t')
            ground_truth[video_id] = table['gt_phase'].to_numpy(dtype=np.int64)
            predictions[video_id] = table['pred_phase'].to_numpy(dtype=np.int64)
        except (KeyError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise EvaluationError(f'{file}: expected columns second, gt_phase, pred_phase '
                                  f'({e})') from e
    return ground_truth, predictions


def _percent(mean, std=None):
    if mean is None or not np.isfinite(mean):
        return 'n/a'
    text = f'{100 * mean:.2f}'
    if std is not None and np.isfinite(std):
        text += f' ± {100 * std:.2f}'
    return text


def report_markdown(reports, stability=None):
    lines = ['| Method | Accuracy | Precision | Recall | Jaccard | F1 |',
             '|---|---|---|---|---|---|']
    for report in reports:
        ph = report.phases
        lines.append('| {} | {} | {} | {} | {} | {} |'.format(
            report.method,
            _percent(report.accuracy.mean, report.accuracy.std),
            _percent(ph.mean['precision'], ph.std['precision']),
            _percent(ph.mean['recall'], ph.std['recall']),
            _percent(ph.mean['jaccard'], ph.std['jaccard']),
            _percent(report.f1)))
    lines += ['', 'Values in percent; ± is the std over videos for accuracy '
              'and over phases for the other metrics.']
    if stability is not None:
        lines += ['', '## Phase transitions', '',
                  '| Video | Ground truth | Stage 1 | Stage 2 |', '|---|---|---|---|']
        for video_id, counts in stability['per_video'].items():
            lines.append(f"| {video_id} | {counts['ground_truth']} | {counts['stage1']} "
                         f"| {counts['stage2']} |")
        if stability['fraction_stage2_fewer'] is not None:
            lines += ['', f"Stage 2 has fewer transitions than stage 1 in "
                          f"{100 * stability['fraction_stage2_fewer']:.2f}% of videos."]
    return '\n'.join(lines) + '\n'


def write_report(reports, out_dir, stability=None):
    """report.json (sorted keys, no timestamps), report.md and one cells TSV per method"""
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        'phases': list(reports[0].phase_names),
        'methods': {r.method: r.to_json() for r in reports},
    }
    if stability is not None:
        payload['stability'] = stability
    json_path = os.path.join(out_dir, 'report.json')
    with open(json_path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    with open(os.path.join(out_dir, 'report.md'), 'w') as f:
        f.write(report_markdown(reports, stability))
    for report in reports:
        report.phases.cells.to_csv(os.path.join(out_dir, f'cells_{report.method}.tsv'),
                                   sep='\t', index=False)
    logger.info('Wrote evaluation report to %s', out_dir)
    return json_path
