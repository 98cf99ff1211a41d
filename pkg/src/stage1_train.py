"""
Stage 1: fine-tune the image encoder and the prompt bank against a frozen
text encoder with median-frequency weighted cross-entropy, then export
per-frame features for the temporal stage.
"""
import copy
import logging
import math
import os
from dataclasses import dataclass, field, asdict, replace
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader, Dataset
from torchvision import transforms
from tqdm import tqdm

import checkpoint_io
from dual_encoder import LogitHead, attach_pretrained_backbone, compute_logits
from errors import BackboneError, ConfigError, DataError, TrainingError
from phase_data import PhaseVocabulary, label_counts, to_class_index
from prompt_bank import PromptBank, PromptBankConfig
from runtime import config_digest, derive_seed

logger = logging.getLogger(__name__)

LR_RANGE = (5e-6, 5e-4)
STAGE1_VARIANTS = ('independent', 'ordinal', 'conventional')
DTYPES = {'float32': torch.float32, 'float64': torch.float64}


def default_lr_grid():
    return tuple(float(x) for x in np.geomspace(LR_RANGE[0], LR_RANGE[1], 5))


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 50
    lr: float = None
    lr_grid: tuple = field(default_factory=default_lr_grid)
    lr_search_epochs: int = 5
    batch_size: int = 64
    weight_decay: float = 0.01
    resize: int = 256
    crop: int = 224
    eval_resize: int = 224
    hflip_prob: float = 0.5
    max_rotation: float = 10.0
    max_translation: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    normalize: bool = True
    variant: str = 'ordinal'
    m: int = 4
    n: int = 3
    reference_indices: tuple = None
    shared_context: bool = True
    rounding: str = 'half_down'
    init_from_names: bool = True
    backbone: str = 'clip-resnet50'
    weights_path: str = None
    feature_dim: int = 1024
    token_dim: int = 512
    dtype: str = 'float32'
    seed: int = 0
    num_workers: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'lr_grid', tuple(float(x) for x in self.lr_grid))
        object.__setattr__(self, 'scale_range', tuple(float(x) for x in self.scale_range))
        if self.reference_indices is not None:
            object.__setattr__(self, 'reference_indices',
                               tuple(int(r) for r in self.reference_indices))
        if self.epochs < 1:
            raise ConfigError(f'stage1.epochs must be >= 1, got {self.epochs}')
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f'stage1.lr must be positive, got {self.lr}')
        if not self.lr_grid:
            raise ConfigError('stage1.lr_grid is empty')
        lo, hi = LR_RANGE
        if self.lr is not None and not lo <= self.lr <= hi:
            logger.warning('stage1.lr=%g is outside [%g, %g]; the validation lr search is skipped',
                           self.lr, lo, hi)
        outside = [lr for lr in self.lr_grid if not lo <= lr <= hi]
        if outside:
            raise ConfigError(f'stage1.lr_grid values {outside} fall outside [{lo}, {hi}]')
        if self.batch_size < 1:
            raise ConfigError(f'stage1.batch_size must be >= 1, got {self.batch_size}')
        if self.crop > self.resize:
            raise ConfigError(f'stage1.crop ({self.crop}) exceeds stage1.resize ({self.resize})')
        if self.variant not in STAGE1_VARIANTS:
            raise ConfigError(f'stage1.variant must be one of {STAGE1_VARIANTS}, '
                              f'got {self.variant!r}')
        if self.dtype not in DTYPES:
            raise ConfigError(f'stage1.dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}')
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f'stage1.hflip_prob must be in [0, 1], got {self.hflip_prob}')

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_json(self):
        data = asdict(self)
        for key in ('lr_grid', 'scale_range', 'reference_indices'):
            if data[key] is not None:
                data[key] = list(data[key])
        return data


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray
    counts: np.ndarray

    def as_tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.weights, dtype=dtype)

    def to_json(self):
        return {'weights': self.weights.tolist(), 'counts': self.counts.tolist()}


def median_frequency_weights(counts):
    """
    weight_c = median(freq) / freq_c over the phases present in the data.
    Absent phases get weight 0.
    """
    counts = np.asarray(counts, dtype=np.float64)
    present = counts > 0
    if not present.any():
        raise DataError('Cannot compute class weights: every phase has zero frames')
    freq = counts[present] / counts.sum()
    weights = np.zeros_like(counts)
    weights[present] = np.median(freq) / freq
    absent = np.flatnonzero(~present) + 1
    if absent.size:
        logger.warning('Phases %s have no training frames; their loss weight is 0',
                       absent.tolist())
    return ClassWeights(weights=weights, counts=counts.astype(np.int64))


def weighted_cross_entropy(logits, targets, weights):
    """
    Weighted mean of per-sample cross-entropy, normalized by the batch's
    total weight. `targets` are 0-based class indices.
    """
    if not torch.isfinite(logits).all():
        raise TrainingError('Non-finite logits in the loss')
    weights = weights.to(device=logits.device, dtype=logits.dtype)
    if weights[targets].sum() == 0:
        return logits.sum() * 0.0
    # constant weights cancel in the weighted mean
    if bool((weights == weights[0]).all()):
        return F.cross_entropy(logits, targets)
    return F.cross_entropy(logits, targets, weight=weights, reduction='mean')


class PromptPhaseClassifier(nn.Module):
    """Image features scored against prompt-encoded phase text features"""

    def __init__(self, image_encoder, text_encoder, prompt_bank, head=None):
        super().__init__()
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.prompt_bank = prompt_bank
        self.head = head if head is not None else LogitHead()

    def text_features(self):
        return self.text_encoder.encode_tokens(self.prompt_bank.materialize_all())

    def logits_from_features(self, features):
        return compute_logits(features, self.text_features(), self.head)

    def forward(self, images):
        return self.logits_from_features(self.image_encoder(images))


class ConventionalClassifier(nn.Module):
    """Image encoder with a plain linear phase head"""

    def __init__(self, image_encoder, P):
        super().__init__()
        self.image_encoder = image_encoder
        self.classifier = nn.Linear(image_encoder.output_dim, P)

    def logits_from_features(self, features):
        return self.classifier(features)

    def forward(self, images):
        return self.logits_from_features(self.image_encoder(images))


def build_stage1_model(cfg, vocabulary):
    """Attach the backbone and wrap it in the classifier the variant asks for"""
    pair = attach_pretrained_backbone(cfg.backbone, cfg.weights_path, cfg.feature_dim,
                                      cfg.token_dim, seed=cfg.seed)
    if cfg.variant == 'conventional':
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, 'linear-head'))
            model = ConventionalClassifier(pair.image_encoder, vocabulary.P)
        return model.to(cfg.torch_dtype)

    if pair.text_encoder is None:
        raise BackboneError(f'Backbone {cfg.backbone!r} has no text encoder; '
                            f'use it with stage1.variant = "conventional"')
    bank_config = PromptBankConfig(
        P=vocabulary.P, m=cfg.m, token_dim=pair.text_encoder.token_dim,
        variant=cfg.variant, n=cfg.n, reference_indices=cfg.reference_indices,
        shared_context=cfg.shared_context, rounding=cfg.rounding,
    )
    init = None
    if cfg.init_from_names:
        embedded = [pair.embed_text(name) for name in vocabulary.names]
        if all(e is not None for e in embedded):
            init = torch.stack(embedded).float()
    generator = torch.Generator().manual_seed(derive_seed(cfg.seed, 'prompt-bank'))
    bank = PromptBank(bank_config, init_first_tokens=init, generator=generator)
    model = PromptPhaseClassifier(pair.image_encoder, pair.text_encoder, bank)
    return model.to(cfg.torch_dtype)


def _normalization(model, cfg):
    stats = getattr(model.image_encoder, 'normalization', None)
    if not cfg.normalize or stats is None:
        return []
    return [transforms.Normalize(*stats)]


def train_transform(model, cfg):
    return transforms.Compose([
        transforms.Resize((cfg.resize, cfg.resize)),
        transforms.RandomHorizontalFlip(cfg.hflip_prob),
        transforms.RandomAffine(degrees=cfg.max_rotation,
                                translate=(cfg.max_translation, cfg.max_translation),
                                scale=cfg.scale_range),
        transforms.RandomCrop(cfg.crop),
        transforms.ToTensor(),
    ] + _normalization(model, cfg))


def eval_transform(model, cfg):
    return transforms.Compose([
        transforms.Resize((cfg.eval_resize, cfg.eval_resize)),
        transforms.ToTensor(),
    ] + _normalization(model, cfg))


class FrameDataset(Dataset):
    """
    Frames of a list of videos with their 0-based class indices.
    Training-mode randomness is seeded per (seed, epoch, video, frame).
    """

    def __init__(self, videos, transform, seed=0, augment=False):
        self.transform = transform
        self.seed = seed
        self.augment = augment
        self.epoch = 0
        self.items = []
        for video_index, video in enumerate(videos):
            if video.frame_paths is None:
                raise DataError(f'Video {video.video_id} has no frame files; '
                                f'expected videos/{video.video_id}/frames/ under the dataset root')
            targets = to_class_index(video.labels)
            for t, path in enumerate(video.frame_paths):
                self.items.append((path, int(targets[t]), video_index, t))

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index):
        path, target, video_index, t = self.items[index]
        image = load_frame(path)
        if not self.augment:
            return self.transform(image), target
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(self.seed, self.epoch, video_index, t))
            return self.transform(image), target


def load_frame(path):
    if not os.path.exists(path):
        raise DataError(f'Missing frame file: {path}')
    with Image.open(path) as image:
        return image.convert('RGB')


@dataclass
class Stage1Checkpoint:
    model: nn.Module
    config: Stage1Config
    vocabulary: PhaseVocabulary
    class_weights: ClassWeights
    epoch: int
    history: list
    best_val_accuracy: float
    optimizer_state: dict = None

    @property
    def seed(self):
        return self.config.seed

    def manifest(self):
        manifest = {
            'stage': 'stage1',
            'config': self.config.to_json(),
            'config_digest': config_digest(self.config.to_json()),
            'vocabulary': list(self.vocabulary.names),
            'class_weights': self.class_weights.to_json(),
            'epoch': self.epoch,
            'history': self.history,
            'best_val_accuracy': self.best_val_accuracy,
            'seed': self.seed,
        }
        if isinstance(self.model, PromptPhaseClassifier):
            manifest.update(self.model.prompt_bank.export_config())
        return manifest

    def fingerprint(self):
        """Identifies the trained weights; tags feature-cache entries"""
        return config_digest({'config': self.config.to_json(), 'epoch': self.epoch,
                              'history': self.history})

    def save(self, path):
        tensors = {'model': self.model.state_dict(), 'optimizer': self.optimizer_state or {}}
        return checkpoint_io.save_checkpoint(path, tensors, self.manifest())

    @classmethod
    def load(cls, path):
        tensors, manifest = checkpoint_io.load_checkpoint(path)
        if manifest.get('stage') != 'stage1':
            raise DataError(f'{path} is not a stage-1 checkpoint')
        cfg_json = dict(manifest['config'])
        cfg = Stage1Config(**cfg_json)
        vocabulary = PhaseVocabulary(tuple(manifest['vocabulary']))
        model = build_stage1_model(cfg, vocabulary)
        model.load_state_dict(tensors['model'])
        weights = manifest['class_weights']
        return cls(
            model=model, config=cfg, vocabulary=vocabulary,
            class_weights=ClassWeights(np.asarray(weights['weights']),
                                       np.asarray(weights['counts'], dtype=np.int64)),
            epoch=manifest['epoch'], history=manifest['history'],
            best_val_accuracy=manifest['best_val_accuracy'],
            optimizer_state=tensors.get('optimizer'),
        )


def _videos_by_id(videos, ids, split_name):
    lookup = {v.video_id: v for v in videos}
    missing = [vid for vid in ids if vid not in lookup]
    if missing:
        raise DataError(f'{split_name} split references unknown videos: {missing}')
    return [lookup[vid] for vid in ids]


@torch.no_grad()
def frame_accuracy(model, loader, dtype):
    model.eval()
    correct, total = 0, 0
    for images, targets in loader:
        predictions = model(images.to(dtype)).argmax(dim=1)
        correct += int((predictions == targets).sum())
        total += int(targets.numel())
    return correct / total if total else float('nan')


def stage1_param_groups(model, weight_decay):
    """AdamW groups; the temperature and prompt tokens are excluded from weight decay"""
    no_decay_ids = set()
    if hasattr(model, 'prompt_bank'):
        no_decay_ids.update(id(p) for p in model.prompt_bank.parameters())
    if hasattr(model, 'head'):
        no_decay_ids.add(id(model.head.logit_scale))
    decay, no_decay = [], []
    for p in model.parameters():
        if p.requires_grad:
            (no_decay if id(p) in no_decay_ids else decay).append(p)
    groups = [{'params': decay, 'weight_decay': weight_decay}]
    if no_decay:
        groups.append({'params': no_decay, 'weight_decay': 0.0})
    return groups


def train_stage1(videos, split, vocabulary, cfg, checkpoint_dir=None, progress=True):
    """
    Fine-tune on split.train and keep the epoch with the best validation
    frame accuracy (the last epoch when the validation split is empty).
    """
    if cfg.lr is None:
        raise ConfigError('stage1.lr is not set; run `stage1 lr-search` or set stage1.lr')
    train_videos = _videos_by_id(videos, split.train, 'train')
    if not train_videos:
        raise DataError('Stage-1 training split is empty')
    val_videos = _videos_by_id(videos, split.val, 'val')
    for video in train_videos + val_videos:
        video.check_vocabulary(vocabulary)

    torch.manual_seed(cfg.seed)
    model = build_stage1_model(cfg, vocabulary)
    dtype = cfg.torch_dtype
    class_weights = median_frequency_weights(label_counts(train_videos, vocabulary.P))
    weights = class_weights.as_tensor(dtype)

    train_set = FrameDataset(train_videos, train_transform(model, cfg), cfg.seed, augment=True)
    val_loader = None
    if val_videos:
        val_set = FrameDataset(val_videos, eval_transform(model, cfg))
        val_loader = DataLoader(val_set, batch_size=cfg.batch_size, shuffle=False,
                                num_workers=cfg.num_workers)

    optimizer = torch.optim.AdamW(stage1_param_groups(model, cfg.weight_decay), lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs, eta_min=0.0)

    history = []
    best_state, best_optimizer, best_epoch, best_accuracy = None, None, 0, -math.inf
    last_good_path = None
    logger.info('Stage 1: %s variant, %d train / %d val videos, %d frames, lr=%g',
                cfg.variant, len(train_videos), len(val_videos), len(train_set), cfg.lr)

    for epoch in tqdm(range(1, cfg.epochs + 1), desc='stage1', disable=not progress):
        model.train()
        train_set.set_epoch(epoch)
        order = torch.Generator().manual_seed(derive_seed(cfg.seed, 'order', epoch))
        loader = DataLoader(train_set, batch_size=cfg.batch_size, shuffle=True,
                            generator=order, num_workers=cfg.num_workers)
        losses = []
        for images, targets in loader:
            optimizer.zero_grad(set_to_none=True)
            try:
                loss = weighted_cross_entropy(model(images.to(dtype)), targets, weights)
                if not torch.isfinite(loss):
                    raise TrainingError(f'Non-finite stage-1 loss at epoch {epoch}')
            except TrainingError as e:
                if checkpoint_dir is not None and best_state is not None:
                    last_good_path = _save_last_good(model, best_state, cfg, vocabulary,
                                                     class_weights, best_epoch, history,
                                                     best_accuracy, checkpoint_dir)
                raise TrainingError(f'{e}; training aborted', last_good_path) from e
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        scheduler.step()

        train_loss = float(np.mean(losses))
        val_accuracy = frame_accuracy(model, val_loader, dtype) if val_loader else None
        history.append({'epoch': epoch, 'train_loss': train_loss, 'val_accuracy': val_accuracy,
                        'lr': optimizer.param_groups[0]['lr']})
        logger.info('stage1 epoch %d/%d loss %.4f val acc %s', epoch, cfg.epochs, train_loss,
                    'n/a' if val_accuracy is None else f'{val_accuracy:.4f}')

        score = -math.inf if val_accuracy is None else val_accuracy
        if val_loader is None or score > best_accuracy:
            best_accuracy, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
            best_optimizer = copy.deepcopy(optimizer.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return Stage1Checkpoint(
        model=model, config=cfg, vocabulary=vocabulary, class_weights=class_weights,
        epoch=best_epoch, history=history,
        best_val_accuracy=None if val_loader is None else best_accuracy,
        optimizer_state=best_optimizer,
    )


def _save_last_good(model, best_state, cfg, vocabulary, class_weights, epoch, history,
                    accuracy, checkpoint_dir):
    snapshot = copy.deepcopy(model)
    snapshot.load_state_dict(best_state)
    checkpoint = Stage1Checkpoint(model=snapshot, config=cfg, vocabulary=vocabulary,
                                  class_weights=class_weights, epoch=epoch, history=history,
                                  best_val_accuracy=accuracy)
    return checkpoint.save(os.path.join(checkpoint_dir, 'stage1_last_good.ckpt'))


class LearningRateSearch(NamedTuple):
    rate: float
    scores: dict


def select_learning_rate(grid, short_budget, evaluate_candidate, bounds=LR_RANGE):
    """
    Score every rate in `grid` with `evaluate_candidate(rate, short_budget)`
    (validation accuracy, higher is better) and return the best one.
    Ties go to the smaller rate.
    """
    grid = sorted(float(r) for r in grid)
    if not grid:
        raise ConfigError('Learning-rate grid is empty')
    if short_budget < 1:
        raise ConfigError(f'Learning-rate search budget must be >= 1 epoch, got {short_budget}')
    if bounds is not None:
        outside = [r for r in grid if not bounds[0] <= r <= bounds[1]]
        if outside:
            raise ConfigError(f'Learning rates {outside} fall outside [{bounds[0]}, {bounds[1]}]')

    scores = {}
    for rate in grid:
        scores[rate] = float(evaluate_candidate(rate, short_budget))
        logger.info('lr candidate %.2e: validation accuracy %.4f', rate, scores[rate])
    best = max(grid, key=lambda r: (scores[r], -r))
    logger.info('Selected learning rate %.2e', best)
    return LearningRateSearch(rate=best, scores=scores)


def search_stage1_learning_rate(videos, split, vocabulary, cfg, progress=False):
    if not split.val:
        raise DataError('Learning-rate search needs a non-empty validation split')

    def evaluate(rate, budget):
        run_cfg = replace(cfg, lr=rate, epochs=budget)
        return train_stage1(videos, split, vocabulary, run_cfg, progress=progress).best_val_accuracy

    return select_learning_rate(cfg.lr_grid, cfg.lr_search_epochs, evaluate)


@torch.no_grad()
def encode_frames(model, paths, transform, dtype, batch_size):
    """Image-encoder features of `paths` in order, T x d numpy array"""
    model.eval()
    chunks = []
    for start in range(0, len(paths), batch_size):
        batch = torch.stack([transform(load_frame(p)) for p in paths[start:start + batch_size]])
        chunks.append(model.image_encoder(batch.to(dtype)).cpu().numpy())
    return np.concatenate(chunks, axis=0)


def extract_features(checkpoint, videos, cache, batch_size=64, progress=True):
    """
    Encode every frame of `videos` with the frozen image encoder into `cache`.
    Videos already cached with the right length and width are skipped.
    """
    model, cfg = checkpoint.model, checkpoint.config
    transform = eval_transform(model, cfg)
    d = model.image_encoder.output_dim
    source = checkpoint.fingerprint()
    written = 0
    for video in tqdm(videos, desc='extract', disable=not progress):
        if cache.has_entry(video.video_id, length=len(video), d=d, source=source):
            logger.debug('Skipping cached video %s', video.video_id)
            continue
        if video.frame_paths is None:
            raise DataError(f'Video {video.video_id} has no frame files to encode')
        features = encode_frames(model, video.frame_paths, transform, cfg.torch_dtype, batch_size)
        cache.write(video.video_id, features, video.labels, source=source)
        written += 1
    logger.info('Extracted features for %d videos (%d already cached)',
                written, len(videos) - written)
    return cache
