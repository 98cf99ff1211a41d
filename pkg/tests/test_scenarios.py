"""
End-to-end scenarios on the bundled synthetic configs.

These run the whole pipeline on CPU and take a few minutes; they are
deselected by default. Run them with

    pytest -m slow tests/test_scenarios.py
or
    python tests/test_scenarios.py
"""
import filecmp
import json
import os
import sys

import pandas as pd
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from cli import run_subcommand  # noqa: E402

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'config')

pytestmark = pytest.mark.slow


def _run(*argv):
    code = run_subcommand(list(argv) + ['--no-progress'])
    assert code == 0, f'{" ".join(argv)} exited with {code}'


def _json(path):
    with open(path, 'r') as f:
        return json.load(f)


@pytest.fixture(scope='module')
def clean_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp('synthetic_run'))
    _run('pipeline', 'all', '--config', os.path.join(CONFIG_DIR, 'synthetic.toml'), '--out', root)
    return root


@pytest.fixture(scope='module')
def noisy_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp('synthetic_noisy_run'))
    _run('pipeline', 'all', '--config', os.path.join(CONFIG_DIR, 'synthetic_noisy.toml'),
         '--out', root)
    return root


class TestScenarios:
    """Scenarios validating the two-stage pipeline on generated videos"""

    def test_clean_run_accuracy(self, clean_run):
        """Stage 1 separates the phases and stage 2 keeps up on the test videos"""
        stage1 = _json(os.path.join(clean_run, 'stage1', 'manifest.json'))
        assert stage1['best_val_accuracy'] >= 0.90

        report = _json(os.path.join(clean_run, 'report', 'report.json'))
        stage2_acc = report['methods']['stage2']['accuracy']['mean']
        stage1_acc = report['methods']['stage1']['accuracy']['mean']
        print(f'test accuracy: stage 1 {stage1_acc:.4f}, stage 2 {stage2_acc:.4f}')
        assert stage2_acc >= 0.90
        assert stage2_acc >= stage1_acc - 0.02

    def test_reference_indices_recorded(self, clean_run):
        stage1 = _json(os.path.join(clean_run, 'stage1', 'manifest.json'))
        assert stage1['reference_indices'] == [1, 4, 7]

    def test_every_step_writes_a_manifest(self, clean_run):
        for step in ('', 'data', 'stage1', 'features', 'stage2', 'preds', 'preds_stage1',
                     'report'):
            manifest = _json(os.path.join(clean_run, step, 'manifest.json'))
            assert manifest['seed'] == 42
            assert manifest['config_digest']

    def test_ribbons_for_every_test_video(self, clean_run):
        split = _json(os.path.join(clean_run, 'split.json'))
        for video_id in split['test']:
            assert os.path.exists(os.path.join(clean_run, 'report', 'ribbons', f'{video_id}.png'))
            series = _json(os.path.join(clean_run, 'report', 'ribbons', f'{video_id}.json'))
            assert [row['name'] for row in series['rows']] == ['ground truth', 'stage1',
                                                               'stage2']

    def test_rerun_report_is_byte_identical(self, clean_run, tmp_path):
        rerun = str(tmp_path / 'rerun')
        _run('pipeline', 'all', '--config', os.path.join(CONFIG_DIR, 'synthetic.toml'),
             '--out', rerun)
        assert filecmp.cmp(os.path.join(clean_run, 'report', 'report.json'),
                           os.path.join(rerun, 'report', 'report.json'), shallow=False)

    def test_noisy_run_is_more_stable_after_stage2(self, noisy_run):
        """Stage 2 switches phase less often than the stage-1 framewise argmax"""
        report = _json(os.path.join(noisy_run, 'report', 'report.json'))
        fraction = report['stability']['fraction_stage2_fewer']
        print(f'videos with fewer stage-2 transitions: {100 * fraction:.1f}%')
        assert fraction >= 0.80

    def test_reduced_regime_probe(self, tmp_path):
        out = str(tmp_path / 'probe_run')
        _run('pipeline', 'probe', '--config', os.path.join(CONFIG_DIR, 'synthetic.toml'),
             '--out', out, '--set', 'probe.seeds=[0, 1]', '--set', 'probe.epochs=1')
        table = pd.read_csv(os.path.join(out, 'probe', 'probe.tsv'), sep='\t')
        assert len(table) == 2 * 2 * 2
        assert set(table['variant']) == {'independent', 'ordinal'}
        assert table['val_accuracy'].between(0.0, 1.0).all()

        again = str(tmp_path / 'probe_again')
        _run('pipeline', 'probe', '--config', os.path.join(CONFIG_DIR, 'synthetic.toml'),
             '--out', again, '--set', 'probe.seeds=[0, 1]', '--set', 'probe.epochs=1')
        assert filecmp.cmp(os.path.join(out, 'probe', 'probe.json'),
                           os.path.join(again, 'probe', 'probe.json'), shallow=False)


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-m', 'slow', '-s']))
