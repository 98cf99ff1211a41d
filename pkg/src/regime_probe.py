"""
Prompt-variant probe over synthetic transition regimes: train independent and
ordinal stage-1 models on sequential and on revisiting videos for several
seeds and tabulate validation frame accuracy.
"""
import json
import logging
import os
from dataclasses import dataclass, replace

import pandas as pd

from errors import ConfigError
from phase_data import (SyntheticSpec, TRANSITION_REGIMES, generate_synthetic, make_split,
                        write_synthetic)
from stage1_train import train_stage1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    regimes: tuple = TRANSITION_REGIMES
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = ('independent', 'ordinal')
    P: int = 7
    videos: int = 12
    split: tuple = (8, 4, 0)
    mean_phase_length: float = 8
    noise_level: float = 0.0
    image_size: int = 64
    epochs: int = 3

    def __post_init__(self):
        for name in ('regimes', 'seeds', 'variants', 'split'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        bad = [r for r in self.regimes if r not in TRANSITION_REGIMES]
        if bad:
            raise ConfigError(f'probe.regimes: unknown regimes {bad}')
        bad = [v for v in self.variants if v not in ('independent', 'ordinal')]
        if bad:
            raise ConfigError(f'probe.variants must be prompt variants, got {bad}')
        if not self.seeds:
            raise ConfigError('probe.seeds is empty')
        if len(self.split) != 3 or self.split[1] < 1:
            raise ConfigError(f'probe.split needs a non-empty validation count, got {self.split}')
        if sum(self.split) > self.videos:
            raise ConfigError(f'probe.split {self.split} exceeds probe.videos={self.videos}')
        if self.epochs < 1:
            raise ConfigError(f'probe.epochs must be >= 1, got {self.epochs}')


def run_probe(probe, stage1_cfg, work_dir, progress=False):
    """
    Returns a table with one row per (regime, seed, variant). Every run is
    seeded from its own seed, so rows do not depend on the order of the loops.
    """
    if stage1_cfg.lr is None:
        raise ConfigError('The regime probe needs stage1.lr to be set')
    rows = []
    for regime in probe.regimes:
        for seed in probe.seeds:
            spec = SyntheticSpec(P=probe.P, videos=probe.videos,
                                 mean_phase_length=probe.mean_phase_length,
                                 transition_regime=regime, noise_level=probe.noise_level,
                                 seed=seed, image_size=probe.image_size)
            dataset = generate_synthetic(spec)
            videos = write_synthetic(dataset, os.path.join(work_dir, regime, f'seed{seed}'))
            split = make_split(videos, probe.split)
            for variant in probe.variants:
                cfg = replace(stage1_cfg, variant=variant, epochs=probe.epochs, seed=seed)
                checkpoint = train_stage1(videos, split, dataset.vocabulary, cfg, progress=progress)
                rows.append({'regime': regime, 'seed': seed, 'variant': variant,
                             'val_accuracy': checkpoint.best_val_accuracy})
                logger.info('probe %s seed %d %s: val acc %.4f', regime, seed, variant,
                            checkpoint.best_val_accuracy)
    return pd.DataFrame(rows, columns=['regime', 'seed', 'variant', 'val_accuracy'])


def summarize_probe(table):
    """Mean validation accuracy per (regime, variant) and which variant leads per regime"""
    means = table.groupby(['regime', 'variant'])['val_accuracy'].mean().unstack('variant')
    summary = {}
    for regime, row in means.iterrows():
        leader = row.idxmax() if row.notna().any() else None
        summary[regime] = {'mean_val_accuracy': {v: float(a) for v, a in row.items()},
                           'leading_variant': leader}
    return summary


def probe_observation(summary):
    """One line per regime, for the log; a tendency, not a pass/fail check"""
    lines = []
    for regime in sorted(summary):
        leader = summary[regime]['leading_variant']
        accs = ', '.join(f'{v} {a:.4f}'
                         for v, a in sorted(summary[regime]['mean_val_accuracy'].items()))
        lines.append(f'{regime}: {accs} -> {leader} ahead')
    return lines


def write_probe(table, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    table = table.sort_values(['regime', 'seed', 'variant']).reset_index(drop=True)
    table.to_csv(os.path.join(out_dir, 'probe.tsv'), sep='\t', index=False)
    summary = summarize_probe(table)
    payload = {'runs': json.loads(table.to_json(orient='records')), 'summary': summary}
    path = os.path.join(out_dir, 'probe.json')
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    for line in probe_observation(summary):
        logger.info('Observation: %s', line)
    return path
