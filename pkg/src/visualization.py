import json
import logging
import os

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Patch
from scipy.special import softmax

from errors import EvaluationError
from phase_data import phase_color

logger = logging.getLogger(__name__)


def ribbon_segments(labels):
    """Runs of equal labels as (start, end_exclusive, phase_id)"""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    bounds = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [labels.size]])
    return [(int(s), int(e), int(labels[s])) for s, e in zip(starts, ends)]


class PhaseRibbonVisualization:
    """
    Timeline figure for one video: one horizontal color band per row
    (ground truth first, then each method) on a shared time axis.
    """

    def __init__(self, phase_names, row_height=0.5, width=12, dpi=100):
        self.phase_names = tuple(phase_names)
        self.P = len(self.phase_names)
        self.row_height = row_height
        self.width = width
        self.dpi = dpi

    def color(self, phase_id):
        return phase_color(phase_id - 1, self.P)

    def build_figure(self, video_id, rows):
        """rows: list of (row name, 1-based label sequence)"""
        lengths = {len(labels) for _, labels in rows}
        if len(lengths) != 1:
            raise EvaluationError(f'{video_id}: ribbon rows have different lengths {sorted(lengths)}')
        T = lengths.pop()

        fig = Figure(figsize=(self.width, 1.0 + self.row_height * len(rows) + 0.6), dpi=self.dpi)
        FigureCanvasAgg(fig)
        ax = fig.add_subplot(1, 1, 1)
        for r, (name, labels) in enumerate(rows):
            y = len(rows) - 1 - r
            for start, end, phase in ribbon_segments(labels):
                ax.broken_barh([(start, end - start)], (y + 0.1, 0.8),
                               facecolors=[self.color(phase)], linewidth=0)

        ax.set_xlim(0, T)
        ax.set_ylim(0, len(rows))
        ax.set_yticks([len(rows) - 1 - r + 0.5 for r in range(len(rows))])
        ax.set_yticklabels([name for name, _ in rows])
        ax.set_xlabel('Time (s)')
        ax.set_title(video_id)
        handles = [Patch(color=self.color(p), label=name)
                   for p, name in enumerate(self.phase_names, start=1)]
        ax.legend(handles=handles, loc='upper center', bbox_to_anchor=(0.5, -0.35),
                  ncol=min(self.P, 4), fontsize='small', frameon=False)
        fig.subplots_adjust(left=0.15, right=0.98, bottom=0.4, top=0.85)
        return fig

    def save_figure(self, fig, filename):
        # No software tag in the PNG so reruns produce identical bytes
        fig.savefig(filename, dpi=self.dpi, metadata={'Software': None})


def ribbon_series(video_id, rows, confidence=None):
    series = {'video_id': video_id,
              'rows': [{'name': name, 'labels': [int(x) for x in labels],
                        'segments': [list(s) for s in ribbon_segments(labels)]}
                       for name, labels in rows]}
    if confidence is not None:
        series['confidence'] = {name: [round(float(c), 6) for c in values]
                                for name, values in confidence.items()}
    return series


def logits_confidence(logits):
    """Max softmax probability per frame"""
    return softmax(np.asarray(logits, dtype=np.float64), axis=1).max(axis=1)


def render_ribbon(video_id, rows, phase_names, out_dir, confidence=None):
    """
    Write ribbons/<video_id>.png and ribbons/<video_id>.json.
    `rows` is an ordered list of (name, labels), ground truth first.
    """
    if not rows:
        raise EvaluationError(f'{video_id}: nothing to plot')
    os.makedirs(out_dir, exist_ok=True)
    vis = PhaseRibbonVisualization(phase_names)
    png_path = os.path.join(out_dir, f'{video_id}.png')
    vis.save_figure(vis.build_figure(video_id, rows), png_path)
    with open(os.path.join(out_dir, f'{video_id}.json'), 'w') as f:
        json.dump(ribbon_series(video_id, rows, confidence), f, indent=1, sort_keys=True)
    logger.debug('Rendered ribbon %s', png_path)
    return png_path


def render_prediction_ribbons(ground_truth, methods, phase_names, out_dir, video_ids=None,
                              logits_dirs=None):
    """
    One ribbon per video. `methods` maps method name -> {video_id: labels};
    `logits_dirs` optionally maps method name -> directory holding
    `<video_id>.logits.npy` sidecars.
    """
    video_ids = sorted(ground_truth) if video_ids is None else list(video_ids)
    paths = []
    for video_id in video_ids:
        if video_id not in ground_truth:
            raise EvaluationError(f'No ground truth for video {video_id}')
        rows = [('ground truth', ground_truth[video_id])]
        for name, predictions in methods.items():
            if video_id not in predictions:
                raise EvaluationError(f'Missing {name} prediction for video {video_id}')
            rows.append((name, predictions[video_id]))

        confidence = {}
        for name, directory in (logits_dirs or {}).items():
            sidecar = os.path.join(directory, f'{video_id}.logits.npy')
            if os.path.exists(sidecar):
                confidence[name] = logits_confidence(np.load(sidecar))
        paths.append(render_ribbon(video_id, rows, phase_names, out_dir, confidence or None))
    logger.info('Rendered %d ribbon plots into %s', len(paths), out_dir)
    return paths
