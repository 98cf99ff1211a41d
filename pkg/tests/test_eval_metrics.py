import json
import math
import os

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from errors import EvaluationError
from eval_metrics import (accuracy, confusion_cells, count_transitions, evaluate, f1_from_means,
                          phase_video_metrics, read_prediction_dir, stability_section,
                          write_report)
from visualization import (PhaseRibbonVisualization, logits_confidence, render_prediction_ribbons,
                           ribbon_segments)

NAMES = ('a', 'b', 'c')


def _write_tsv(directory, video_id, gt, pred):
    os.makedirs(directory, exist_ok=True)
    pd.DataFrame({'second': np.arange(len(gt)), 'gt_phase': gt, 'pred_phase': pred}) \
        .to_csv(os.path.join(directory, f'{video_id}.tsv'), sep='\t', index=False)


def test_accuracy_examples():
    assert accuracy([[1, 2, 3]], [[1, 2, 3]]).mean == 1.0
    assert accuracy([[1, 2, 2, 2]], [[1, 1, 2, 2]]).mean == 0.75
    summary = accuracy([[1, 1], [1, 2]], [[1, 1], [1, 1]], ['v1', 'v2'])
    assert summary.mean == 0.75
    assert summary.std == pytest.approx(np.std([1.0, 0.5], ddof=1))
    assert summary.per_video == {'v1': 1.0, 'v2': 0.5}


def test_single_video_std_is_zero():
    assert accuracy([[1, 2]], [[1, 1]]).std == 0.0


def test_accuracy_length_mismatch():
    with pytest.raises(EvaluationError):
        accuracy([[1, 2]], [[1, 2, 3]])
    with pytest.raises(EvaluationError):
        accuracy([], [])


def test_phase_metrics_example():
    cells = confusion_cells([np.array([1, 2, 2, 2])], [np.array([1, 1, 2, 2])], 2).set_index('phase')
    assert cells.loc[1, 'precision'] == 1.0
    assert cells.loc[1, 'recall'] == 0.5
    assert cells.loc[1, 'jaccard'] == 0.5
    assert cells.loc[2, 'precision'] == pytest.approx(2 / 3)
    assert cells.loc[2, 'recall'] == 1.0
    assert cells.loc[2, 'jaccard'] == pytest.approx(2 / 3)


def test_perfect_prediction_metrics():
    gt = [np.array([1, 1, 2, 3]), np.array([2, 3, 3])]
    metrics = phase_video_metrics(gt, gt, 3)
    assert metrics.mean == {'precision': 1.0, 'recall': 1.0, 'jaccard': 1.0}
    assert metrics.std['jaccard'] == 0.0


def test_phase_absent_from_both_is_excluded():
    cells = confusion_cells([np.array([1, 1])], [np.array([1, 1])], 3)
    assert cells['phase'].tolist() == [1]
    per_phase = phase_video_metrics([np.array([1, 1])], [np.array([1, 1])], 3).per_phase
    assert per_phase.loc[2].isna().all() and per_phase.loc[3].isna().all()


def test_false_positive_phase():
    cells = confusion_cells([np.array([1, 3])], [np.array([1, 1])], 3).set_index('phase')
    assert cells.loc[3, 'precision'] == 0.0
    assert math.isnan(cells.loc[3, 'recall'])
    assert cells.loc[3, 'jaccard'] == 0.0


def test_out_of_range_prediction():
    with pytest.raises(EvaluationError):
        confusion_cells([np.array([1, 4])], [np.array([1, 1])], 3)


def _oracle(preds, gts, P):
    """Plain-loop accuracy, per-phase means of the defined cells, means over phases and F1"""
    accuracy_values = [sum(1 for x, y in zip(pred, gt) if x == y) / len(gt)
                       for pred, gt in zip(preds, gts)]
    per_phase = {}
    for p in range(1, P + 1):
        values = {'precision': [], 'recall': [], 'jaccard': []}
        for pred, gt in zip(preds, gts):
            tp = sum(1 for x, y in zip(pred, gt) if x == p and y == p)
            fp = sum(1 for x, y in zip(pred, gt) if x == p and y != p)
            fn = sum(1 for x, y in zip(pred, gt) if x != p and y == p)
            if tp + fp + fn == 0:
                continue
            values['jaccard'].append(tp / (tp + fp + fn))
            if tp + fp:
                values['precision'].append(tp / (tp + fp))
            if tp + fn:
                values['recall'].append(tp / (tp + fn))
        per_phase[p] = {m: (sum(v) / len(v) if v else None) for m, v in values.items()}
    means = {}
    for m in ('precision', 'recall', 'jaccard'):
        defined = [per_phase[p][m] for p in per_phase if per_phase[p][m] is not None]
        means[m] = sum(defined) / len(defined) if defined else None
    f1 = None
    if means['precision'] is not None and means['recall'] is not None:
        total = means['precision'] + means['recall']
        f1 = 0.0 if total == 0 else 2 * means['precision'] * means['recall'] / total
    return {'accuracy': sum(accuracy_values) / len(accuracy_values), 'per_phase': per_phase,
            'means': means, 'f1': f1}


@st.composite
def _videos(draw, max_phases=8, max_frames=50, max_videos=6):
    P = draw(st.integers(2, max_phases))
    n = draw(st.integers(1, max_videos))
    preds, gts = [], []
    for _ in range(n):
        T = draw(st.integers(1, max_frames))
        gts.append(np.array(draw(st.lists(st.integers(1, P), min_size=T, max_size=T))))
        preds.append(np.array(draw(st.lists(st.integers(1, P), min_size=T, max_size=T))))
    return P, preds, gts


def _close(got, expected):
    if expected is None:
        return got is None or math.isnan(got)
    return abs(got - expected) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(_videos())
def test_metrics_match_brute_force(case):
    P, preds, gts = case
    ids = [f'video{i}' for i in range(len(preds))]
    names = tuple(f'phase {p}' for p in range(1, P + 1))
    report = evaluate('m', dict(zip(ids, preds)), dict(zip(ids, gts)), names)
    expected = _oracle(preds, gts, P)

    assert _close(report.accuracy.mean, expected['accuracy'])
    for p in range(1, P + 1):
        for m in ('precision', 'recall', 'jaccard'):
            assert _close(report.phases.per_phase.loc[p, m], expected['per_phase'][p][m])
    for m in ('precision', 'recall', 'jaccard'):
        assert _close(report.phases.mean[m], expected['means'][m])
    assert _close(report.f1, expected['f1'])


@settings(max_examples=100, deadline=None)
@given(_videos(max_phases=5, max_frames=12, max_videos=4))
def test_jaccard_bounded_by_precision_and_recall(case):
    P, preds, gts = case
    cells = confusion_cells(preds, gts, P)
    for _, row in cells.iterrows():
        for m in ('precision', 'recall'):
            if not math.isnan(row[m]):
                assert row['jaccard'] <= row[m] + 1e-12


@settings(max_examples=100, deadline=None)
@given(_videos(max_frames=20), st.randoms())
def test_report_ignores_video_order(case, random):
    P, preds, gts = case
    ids = [f'video{i}' for i in range(len(preds))]
    names = tuple(f'phase {p}' for p in range(1, P + 1))
    shuffled = list(range(len(ids)))
    random.shuffle(shuffled)
    a = evaluate('m', dict(zip(ids, preds)), dict(zip(ids, gts)), names)
    b = evaluate('m', {ids[i]: preds[i] for i in shuffled}, {ids[i]: gts[i] for i in shuffled},
                 names)
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)


def test_f1_examples():
    assert f1_from_means(0.4, 0.4) == pytest.approx(0.4)
    assert f1_from_means(5 / 6, 3 / 4) == pytest.approx(0.7895, abs=1e-4)
    assert f1_from_means(0.8111, 0.8252) == pytest.approx(0.8181, abs=1e-4)
    assert f1_from_means(0.0, 0.0) == 0.0
    with pytest.raises(EvaluationError):
        f1_from_means(1.2, 0.5)


@given(st.floats(0, 1), st.floats(0, 1))
def test_f1_between_min_and_max(p, r):
    f1 = f1_from_means(p, r)
    assert min(p, r) - 1e-12 <= f1 <= max(p, r) + 1e-12


def test_count_transitions():
    assert count_transitions([1, 1, 1]) == 0
    assert count_transitions([1, 2, 1, 2]) == 3
    assert count_transitions(np.repeat(np.arange(1, 8), 5)) == 6
    with pytest.raises(EvaluationError):
        count_transitions([])


def test_evaluate_missing_video():
    with pytest.raises(EvaluationError, match='v2'):
        evaluate('m', {'v1': [1]}, {'v1': [1], 'v2': [1]}, NAMES)


def test_stability_section():
    gt = {'v1': [1, 1, 2, 2], 'v2': [1, 1, 1, 1]}
    stage1 = {'v1': [1, 2, 1, 2], 'v2': [1, 1, 1, 1]}
    stage2 = {'v1': [1, 1, 2, 2], 'v2': [1, 1, 1, 1]}
    section = stability_section(gt, stage1, stage2)
    assert section['per_video']['v1'] == {'ground_truth': 1, 'stage1': 3, 'stage2': 1}
    assert section['fraction_stage2_fewer'] == 0.5


def test_read_prediction_dir(tmp_path):
    _write_tsv(str(tmp_path), 'video1', [1, 2], [1, 1])
    gt, preds = read_prediction_dir(str(tmp_path))
    assert gt['video1'].tolist() == [1, 2]
    assert preds['video1'].tolist() == [1, 1]


def test_read_prediction_dir_errors(tmp_path):
    with pytest.raises(EvaluationError):
        read_prediction_dir(str(tmp_path / 'missing'))
    with pytest.raises(EvaluationError):
        read_prediction_dir(str(tmp_path))
    (tmp_path / 'bad.tsv').write_text('a\tb\n1\t2\n')
    with pytest.raises(EvaluationError, match='gt_phase'):
        read_prediction_dir(str(tmp_path))


def test_report_files_are_deterministic(tmp_path):
    gt = {'v1': [1, 1, 2, 3], 'v2': [1, 2, 2, 3]}
    pred = {'v1': [1, 2, 2, 3], 'v2': [1, 2, 3, 3]}
    report = evaluate('stage2', pred, gt, NAMES)
    first = write_report([report], str(tmp_path / 'a'))
    second = write_report([report], str(tmp_path / 'b'))
    with open(first, 'rb') as fa, open(second, 'rb') as fb:
        assert fa.read() == fb.read()
    payload = json.loads(open(first).read())
    assert payload['phases'] == list(NAMES)
    assert payload['methods']['stage2']['accuracy']['mean'] == pytest.approx(0.75)
    markdown = (tmp_path / 'a' / 'report.md').read_text()
    assert '| stage2 | 75.00 ± 0.00 |' in markdown
    assert (tmp_path / 'a' / 'cells_stage2.tsv').exists()


def test_ribbon_segments():
    assert ribbon_segments([2, 2, 2]) == [(0, 3, 2)]
    labels = [1, 2, 1, 2, 1]
    assert len(ribbon_segments(labels)) == count_transitions(labels) + 1


def test_ribbon_figure_rows():
    vis = PhaseRibbonVisualization(NAMES)
    fig = vis.build_figure('v', [('ground truth', [1, 1, 2]), ('stage1', [1, 2, 2]),
                                 ('stage2', [1, 1, 2]), ('other', [3, 3, 3])])
    ax = fig.axes[0]
    assert [t.get_text() for t in ax.get_yticklabels()] == ['ground truth', 'stage1',
                                                            'stage2', 'other']
    assert ax.get_xlim() == (0.0, 3.0)
    with pytest.raises(EvaluationError):
        vis.build_figure('v', [('ground truth', [1, 1]), ('stage2', [1])])


def test_logits_confidence():
    confidence = logits_confidence(np.array([[0.0, 0.0], [10.0, -10.0]]))
    assert confidence[0] == pytest.approx(0.5)
    assert confidence[1] == pytest.approx(1.0)


def test_render_prediction_ribbons(tmp_path):
    preds_dir = str(tmp_path / 'preds')
    _write_tsv(preds_dir, 'v1', [1, 1, 2], [1, 2, 2])
    np.save(os.path.join(preds_dir, 'v1.logits.npy'), np.zeros((3, 3)))
    gt, preds = read_prediction_dir(preds_dir)
    out = str(tmp_path / 'ribbons')
    paths = render_prediction_ribbons(gt, {'stage2': preds}, NAMES, out,
                                      logits_dirs={'stage2': preds_dir})
    assert paths == [os.path.join(out, 'v1.png')]
    series = json.loads(open(os.path.join(out, 'v1.json')).read())
    assert [row['name'] for row in series['rows']] == ['ground truth', 'stage2']
    assert series['confidence']['stage2'] == [pytest.approx(1 / 3, abs=1e-6)] * 3
    with pytest.raises(EvaluationError):
        render_prediction_ribbons(gt, {'stage2': preds}, NAMES, out, video_ids=['v9'])
