import glob
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from matplotlib.colors import hsv_to_rgb
from PIL import Image
from scipy.ndimage import gaussian_filter

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

# Per-format layout of annotation files under the dataset root
ANNOTATION_FORMATS = {
    'cholec80-style': {'dir': 'phase_annotations', 'pattern': '*-phase.txt',
                       'strip': '-phase', 'labels': 'names'},
    'm2cai16-style': {'dir': 'annotations', 'pattern': '*.txt',
                      'strip': '', 'labels': 'names'},
    'autolaparo-style': {'dir': 'labels', 'pattern': '*.txt',
                         'strip': '', 'labels': 'ids'},
    'canonical-tsv': {'dir': 'annotations', 'pattern': '*.tsv',
                      'strip': '', 'labels': 'ids'},
}

# Conventional train/val/test counts per dataset
DEFAULT_SPLIT_COUNTS = {
    'cholec80-style': (32, 8, 40),
    'autolaparo-style': (10, 4, 7),
    'm2cai16-style': (20, 7, 14),
}

TRANSITION_REGIMES = ('sequential', 'revisiting')
REVISIT_PROBABILITY = 0.4
MAX_REGIME_ATTEMPTS = 1000


@dataclass(frozen=True)
class PhaseVocabulary:
    """Ordered phase names; phase ids are 1..P"""
    names: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, 'names', names)
        if not names:
            raise ConfigError('Phase vocabulary is empty')
        if any(not n.strip() for n in names):
            raise ConfigError('Phase names must be non-empty')
        if len(set(names)) != len(names):
            raise ConfigError(f'Phase names are not unique: {list(names)}')

    @property
    def P(self):
        return len(self.names)

    def name_of(self, phase_id):
        if not 1 <= phase_id <= self.P:
            raise DataError(f'Phase id {phase_id} outside 1..{self.P}')
        return self.names[phase_id - 1]

    def to_json(self):
        return {str(i + 1): name for i, name in enumerate(self.names)}


@dataclass(frozen=True)
class VideoAnnotation:
    """Per-second phase labels (1-based) of one video"""
    video_id: str
    fps_source: float
    labels: np.ndarray
    frame_paths: tuple = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, 'labels', labels)
        if labels.size == 0:
            raise DataError(f'Video {self.video_id} has no annotated frames')
        if labels.min() < 1:
            raise DataError(f'Video {self.video_id} has phase ids below 1')
        if self.frame_paths is not None:
            paths = tuple(str(p) for p in self.frame_paths)
            object.__setattr__(self, 'frame_paths', paths)
            if len(paths) != labels.size:
                raise DataError(f'Video {self.video_id}: {len(paths)} frame paths '
                                f'for {labels.size} labels')

    def __len__(self):
        return int(self.labels.size)

    def check_vocabulary(self, vocabulary):
        if self.labels.max() > vocabulary.P:
            raise DataError(f'Video {self.video_id} has phase id {self.labels.max()} '
                            f'outside 1..{vocabulary.P}')


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        for name in ('train', 'val', 'test'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        seen = {}
        for name in ('train', 'val', 'test'):
            for video_id in getattr(self, name):
                if video_id in seen:
                    raise ConfigError(f'Video {video_id} is in both {seen[video_id]} and {name}')
                seen[video_id] = name

    def check_videos(self, videos):
        known = {v.video_id for v in videos}
        missing = [vid for vid in self.all_ids() if vid not in known]
        if missing:
            raise DataError(f'Split references unknown videos: {missing}')

    def all_ids(self):
        return self.train + self.val + self.test

    def to_json(self):
        return {'train': list(self.train), 'val': list(self.val), 'test': list(self.test)}


@dataclass(frozen=True)
class SyntheticSpec:
    P: int = 7
    videos: int = 20
    mean_phase_length: float = 12
    transition_regime: str = 'sequential'
    noise_level: float = 0.0
    seed: int = 42
    image_size: int = 64

    def __post_init__(self):
        if self.P < 2:
            raise ConfigError(f'Synthetic P must be >= 2, got {self.P}')
        if self.videos < 1:
            raise ConfigError(f'Synthetic video count must be >= 1, got {self.videos}')
        if self.mean_phase_length < 2:
            raise ConfigError(f'mean_phase_length must be >= 2, got {self.mean_phase_length}')
        if self.transition_regime not in TRANSITION_REGIMES:
            raise ConfigError(f'transition_regime must be one of {TRANSITION_REGIMES}, '
                              f'got {self.transition_regime!r}')
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f'noise_level must be in [0, 1], got {self.noise_level}')
        if self.image_size < 8:
            raise ConfigError(f'image_size must be >= 8, got {self.image_size}')


@dataclass
class SyntheticDataset:
    vocabulary: PhaseVocabulary
    videos: list
    frames: dict = field(default_factory=dict)
    corrupted: dict = field(default_factory=dict)


def to_class_index(labels):
    """1-based phase ids -> 0-based class indices (the single conversion point)"""
    return np.asarray(labels, dtype=np.int64) - 1


def to_phase_id(indices):
    """0-based class indices -> 1-based phase ids"""
    return np.asarray(indices, dtype=np.int64) + 1


def natural_key(video_id):
    """Sort key that orders video2 before video10"""
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r'(\d+)', video_id)]


def normalize_phase_name(name):
    return re.sub(r'[^a-z0-9]', '', str(name).lower())


def downsample_to_1fps(frame_labels, fps_source):
    """
    Keep the label at frame floor(t * fps_source) for every whole second t
    that still falls inside the annotation.
    """
    frame_labels = np.asarray(frame_labels)
    if fps_source <= 0:
        raise DataError(f'fps_source must be positive, got {fps_source}')
    if frame_labels.size == 0:
        raise DataError('Cannot downsample an empty annotation')
    seconds = int(math.floor((frame_labels.size - 1) / fps_source)) + 1
    indices = np.floor(np.arange(seconds) * fps_source).astype(np.int64)
    return frame_labels[indices]


def label_counts(videos, P):
    """Frame count per phase (index 0 holds phase 1)"""
    counts = np.zeros(P, dtype=np.int64)
    for video in videos:
        counts += np.bincount(video.labels - 1, minlength=P)[:P]
    return counts


def load_phase_mapping(path):
    """
    Read phases.json.
    Either a plain {"1": name, ...} mapping or {"names": {...}, "aliases": {raw: id}}.
    Returns the vocabulary and a normalized-name -> phase id lookup.
    """
    if not os.path.exists(path):
        raise DataError(f'Phase-name mapping file not found: {path}')
    with open(path, 'r') as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f'{path}: invalid JSON ({e})') from e

    names_map = raw.get('names', raw) if isinstance(raw, dict) else None
    if not isinstance(names_map, dict):
        raise DataError(f'{path}: expected an id -> name object')
    try:
        ids = sorted(int(k) for k in names_map)
    except ValueError as e:
        raise DataError(f'{path}: phase ids must be integers') from e
    if ids != list(range(1, len(ids) + 1)):
        raise DataError(f'{path}: phase ids must be 1..P without gaps, got {ids}')
    vocabulary = PhaseVocabulary(tuple(names_map[str(i)] for i in ids))

    lookup = {normalize_phase_name(name): i + 1 for i, name in enumerate(vocabulary.names)}
    for alias, phase_id in (raw.get('aliases', {}) if 'names' in raw else {}).items():
        if not 1 <= int(phase_id) <= vocabulary.P:
            raise DataError(f'{path}: alias {alias!r} points at unknown phase {phase_id}')
        lookup[normalize_phase_name(alias)] = int(phase_id)
    return vocabulary, lookup


def write_phase_mapping(vocabulary, path):
    with open(path, 'w') as f:
        json.dump(vocabulary.to_json(), f, indent=2)


def _load_fps_metadata(root):
    path = os.path.join(root, 'meta.json')
    if not os.path.exists(path):
        return None
    with open(path, 'r') as f:
        return json.load(f).get('fps')


def _fps_for(video_id, fps_meta, path):
    if isinstance(fps_meta, dict):
        fps = fps_meta.get(video_id, fps_meta.get('default'))
    else:
        fps = fps_meta
    if fps is None:
        raise DataError(f'{path}: no fps metadata for video {video_id} (expected meta.json '
                        f'with an "fps" entry)')
    return float(fps)


def _frame_paths_for(video_id, length, frames_root):
    frames_dir = os.path.join(frames_root, 'videos', video_id, 'frames')
    if not os.path.isdir(frames_dir):
        return None
    return tuple(os.path.join(frames_dir, f'{t:06d}.png') for t in range(length))


def _parse_annotation_file(path, label_kind, lookup, P):
    """Read one annotation file into (frame indices, 1-based phase ids)"""
    try:
        table = pd.read_csv(path, sep='\t', dtype=str, header=0, skip_blank_lines=True,
                            keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise DataError(f'{path}: empty video') from e
    if table.shape[1] < 2:
        raise DataError(f'{path}: expected two tab-separated columns')
    if table.empty:
        raise DataError(f'{path}: empty video')

    frames = np.empty(len(table), dtype=np.int64)
    phases = np.empty(len(table), dtype=np.int64)
    for row, (frame_text, label_text) in enumerate(zip(table.iloc[:, 0], table.iloc[:, 1])):
        line = row + 2  # header is line 1
        try:
            frames[row] = int(str(frame_text).strip())
        except ValueError as e:
            raise DataError(f'{path}:{line}: bad frame index {frame_text!r}') from e
        label_text = str(label_text).strip()
        if label_kind == 'ids':
            try:
                phase_id = int(label_text)
            except ValueError as e:
                raise DataError(f'{path}:{line}: bad phase id {label_text!r}') from e
            if not 1 <= phase_id <= P:
                raise DataError(f'{path}:{line}: phase id {phase_id} outside 1..{P}')
        else:
            phase_id = lookup.get(normalize_phase_name(label_text))
            if phase_id is None:
                raise DataError(f'{path}:{line}: unknown phase name {label_text!r}')
        phases[row] = phase_id

    order = np.argsort(frames, kind='stable')
    frames, phases = frames[order], phases[order]
    if np.any(np.diff(frames) == 0):
        raise DataError(f'{path}: duplicate frame indices')
    return frames, phases


def _dense_labels(path, frames, phases):
    """Per-frame label array from sparse rows; every frame from 0 must be present"""
    if frames[0] != 0 or frames[-1] != frames.size - 1:
        missing = sorted(set(range(int(frames[-1]) + 1)) - set(frames.tolist()))[:5]
        raise DataError(f'{path}: annotation does not cover frames 0..{frames[-1]} '
                        f'(missing e.g. {missing})')
    return phases


def load_annotations(root, format_id):
    """
    Load every video annotation under `root` in the declared format.
    Labels are downsampled to 1 fps; returns (videos, vocabulary).
    """
    if format_id not in ANNOTATION_FORMATS:
        raise ConfigError(f'Unknown annotation format {format_id!r}; '
                          f'choose from {sorted(ANNOTATION_FORMATS)}')
    if not os.path.isdir(root):
        raise DataError(f'Dataset root not found: {root}')
    layout = ANNOTATION_FORMATS[format_id]
    vocabulary, lookup = load_phase_mapping(os.path.join(root, 'phases.json'))

    frames_root = root
    dataset_meta = os.path.join(root, 'dataset.json')
    if os.path.exists(dataset_meta):
        with open(dataset_meta, 'r') as f:
            frames_root = json.load(f).get('frames_root', root)

    fps_meta = None if format_id == 'canonical-tsv' else _load_fps_metadata(root)
    files = sorted(glob.glob(os.path.join(root, layout['dir'], layout['pattern'])),
                   key=lambda p: natural_key(os.path.basename(p)))
    if not files:
        raise DataError(f'No {format_id} annotation files under '
                        f'{os.path.join(root, layout["dir"])}')

    videos = []
    for path in files:
        stem = os.path.splitext(os.path.basename(path))[0]
        video_id = stem[:-len(layout['strip'])] if layout['strip'] and \
            stem.endswith(layout['strip']) else stem
        fps = 1.0 if format_id == 'canonical-tsv' else _fps_for(video_id, fps_meta, path)

        frames, phases = _parse_annotation_file(path, layout['labels'], lookup, vocabulary.P)
        labels = downsample_to_1fps(_dense_labels(path, frames, phases), fps)
        videos.append(VideoAnnotation(
            video_id=video_id,
            fps_source=fps,
            labels=labels,
            frame_paths=_frame_paths_for(video_id, labels.size, frames_root),
        ))
    logger.info('Loaded %d %s videos with %d phases from %s',
                len(videos), format_id, vocabulary.P, root)
    return videos, vocabulary


def write_canonical(videos, vocabulary, out_dir, frames_root=None):
    """Write the canonical layout: annotations/<id>.tsv, phases.json, dataset.json"""
    os.makedirs(os.path.join(out_dir, 'annotations'), exist_ok=True)
    for video in videos:
        table = pd.DataFrame({'second': np.arange(len(video)), 'phase_id': video.labels})
        table.to_csv(os.path.join(out_dir, 'annotations', f'{video.video_id}.tsv'),
                     sep='\t', index=False)
    write_phase_mapping(vocabulary, os.path.join(out_dir, 'phases.json'))
    if frames_root is not None:
        with open(os.path.join(out_dir, 'dataset.json'), 'w') as f:
            json.dump({'frames_root': os.path.abspath(frames_root)}, f, indent=2)


def make_split(videos, counts, ordering='natural'):
    """
    Assign the first `train` ids to train, the next `val` to val and the next
    `test` to test. `ordering` is 'natural' (video-id order) or 'given'.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0:
        raise ConfigError(f'Split counts must be three non-negative integers, got {counts}')
    if sum(counts) > len(videos):
        raise ConfigError(f'Split counts {counts} exceed the {len(videos)} available videos')
    ids = [v.video_id for v in videos]
    if ordering == 'natural':
        ids = sorted(ids, key=natural_key)
    elif ordering != 'given':
        raise ConfigError(f"Unknown split ordering {ordering!r}; use 'natural' or 'given'")
    n_train, n_val, n_test = counts
    return DatasetSplit(
        train=ids[:n_train],
        val=ids[n_train:n_train + n_val],
        test=ids[n_train + n_val:n_train + n_val + n_test],
    )


def phase_color(phase_index, P):
    """RGB in [0, 1] for a 0-based phase index; hues evenly spread"""
    return hsv_to_rgb([phase_index / P, 0.85, 0.95])


def render_phase_frame(phase_index, P, size, rng):
    """
    Procedural frame for one phase: a smoothed grey texture with a full-width
    colored bar whose hue and row position both encode the phase.
    """
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=2.0)
    image = np.repeat((0.2 + 0.05 * texture)[:, :, None], 3, axis=2)

    band = max(2, size // P - 2)
    center = int((phase_index + 0.5) * size / P)
    top, bottom = max(0, center - band // 2), min(size, center - band // 2 + band)
    image[top:bottom, :, :] = phase_color(phase_index, P)
    return (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)


def _phase_order(spec, rng):
    """0-based sequence of phase visits for one video"""
    order = []
    for k in range(spec.P):
        order.append(k)
        if spec.transition_regime == 'revisiting' and k > 0 and rng.random() < REVISIT_PROBABILITY:
            order.append(int(rng.integers(0, k)))
    return order


def _has_decrease(labels):
    return bool(np.any(np.diff(labels) < 0))


def generate_synthetic(spec):
    """
    Deterministic synthetic phase videos with rendered frames.
    Revisiting videos are redrawn until at least one phase id decreases.
    """
    vocabulary = PhaseVocabulary(tuple(f'synthetic phase {p}' for p in range(1, spec.P + 1)))
    dataset = SyntheticDataset(vocabulary=vocabulary, videos=[])
    geometric_p = 1.0 / (spec.mean_phase_length - 1.0)

    for index in range(spec.videos):
        video_id = f'video{index + 1:02d}'
        for attempt in range(MAX_REGIME_ATTEMPTS):
            rng = np.random.default_rng([spec.seed, index, attempt])
            order = _phase_order(spec, rng)
            durations = 1 + rng.geometric(geometric_p, size=len(order))
            labels = np.repeat(np.asarray(order) + 1, durations)
            if spec.transition_regime == 'sequential' or _has_decrease(labels):
                break
        else:
            raise DataError(f'Could not draw a revisiting sequence for {video_id}')

        # Corrupted frames show the appearance of a different, random phase
        corrupted = rng.random(labels.size) < spec.noise_level
        offsets = rng.integers(1, spec.P, size=labels.size)
        appearance = np.where(corrupted, (labels - 1 + offsets) % spec.P, labels - 1)
        frames = np.stack([render_phase_frame(int(k), spec.P, spec.image_size, rng)
                           for k in appearance])

        dataset.videos.append(VideoAnnotation(video_id=video_id, fps_source=1.0, labels=labels))
        dataset.frames[video_id] = frames
        dataset.corrupted[video_id] = corrupted
    logger.info('Generated %d %s synthetic videos (P=%d, noise=%.2f, seed=%d)',
                spec.videos, spec.transition_regime, spec.P, spec.noise_level, spec.seed)
    return dataset


def write_synthetic(dataset, out_dir):
    """Write frames and canonical annotations; returns videos with frame paths"""
    written = []
    for video in dataset.videos:
        frames_dir = os.path.join(out_dir, 'videos', video.video_id, 'frames')
        os.makedirs(frames_dir, exist_ok=True)
        paths = []
        for t, frame in enumerate(dataset.frames[video.video_id]):
            path = os.path.join(frames_dir, f'{t:06d}.png')
            Image.fromarray(frame).save(path)
            paths.append(path)
        written.append(replace(video, frame_paths=tuple(paths)))
    write_canonical(written, dataset.vocabulary, out_dir)
    dataset.videos = written
    return written
