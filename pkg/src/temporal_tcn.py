"""
Stage 2: causal dilated temporal convolutional network over cached frame
features. Each stage is a stack of residual blocks whose convolutions only
look backwards in time; later stages refine the softmax of the previous one.
"""
import copy
import logging
import math
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

import checkpoint_io
from errors import ConfigError, DataError, ShapeMismatchError, TrainingError
from phase_data import to_class_index, to_phase_id
from runtime import config_digest, derive_seed
from stage1_train import (DTYPES, ClassWeights, default_lr_grid, median_frequency_weights,
                          select_learning_rate, weighted_cross_entropy)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TcnConfig:
    stages: int = 1
    layers: int = 8
    hidden_dim: int = 256
    kernel_size: int = 3
    dropout: float = 0.5
    epochs: int = 25
    lr: float = None
    lr_grid: tuple = field(default_factory=default_lr_grid)
    lr_search_epochs: int = 5
    weight_decay: float = 0.01
    dtype: str = 'float32'
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'lr_grid', tuple(float(x) for x in self.lr_grid))
        for name in ('stages', 'layers', 'hidden_dim', 'epochs'):
            if getattr(self, name) < 1:
                raise ConfigError(f'stage2.{name} must be >= 1, got {getattr(self, name)}')
        if self.kernel_size < 2:
            raise ConfigError(f'stage2.kernel_size must be >= 2, got {self.kernel_size}')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f'stage2.dropout must be in [0, 1), got {self.dropout}')
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f'stage2.lr must be positive, got {self.lr}')
        if self.dtype not in DTYPES:
            raise ConfigError(f'stage2.dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}')

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_json(self):
        data = asdict(self)
        data['lr_grid'] = list(self.lr_grid)
        return data


def receptive_field(layers, kernel_size):
    """Frames visible to one output: 1 + (k - 1) * sum(2^l)"""
    return 1 + (kernel_size - 1) * (2 ** layers - 1)


class CausalDilatedResidual(nn.Module):
    def __init__(self, channels, kernel_size, dilation, dropout):
        super().__init__()
        self.left_pad = (kernel_size - 1) * dilation
        self.conv_dilated = nn.Conv1d(channels, channels, kernel_size, dilation=dilation)
        self.conv_1x1 = nn.Conv1d(channels, channels, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        out = F.relu(self.conv_dilated(F.pad(x, (self.left_pad, 0))))
        return x + self.dropout(self.conv_1x1(out))


class SingleStageTCN(nn.Module):
    def __init__(self, in_dim, P, cfg):
        super().__init__()
        self.conv_in = nn.Conv1d(in_dim, cfg.hidden_dim, 1)
        self.blocks = nn.ModuleList([
            CausalDilatedResidual(cfg.hidden_dim, cfg.kernel_size, 2 ** layer, cfg.dropout)
            for layer in range(cfg.layers)
        ])
        self.conv_out = nn.Conv1d(cfg.hidden_dim, P, 1)

    def forward(self, x):
        out = self.conv_in(x)
        for block in self.blocks:
            out = block(out)
        return self.conv_out(out)


class CausalTCN(nn.Module):
    """Input B x d x T, output list of per-stage B x P x T logits"""

    def __init__(self, in_dim, P, cfg):
        super().__init__()
        self.in_dim = in_dim
        self.P = P
        self.stages = nn.ModuleList(
            [SingleStageTCN(in_dim, P, cfg)]
            + [SingleStageTCN(P, P, cfg) for _ in range(cfg.stages - 1)]
        )

    def forward(self, x):
        if x.shape[1] != self.in_dim:
            raise ShapeMismatchError(f'Feature width {x.shape[1]} does not match the '
                                     f'TCN input width {self.in_dim}')
        outputs = [self.stages[0](x)]
        for stage in self.stages[1:]:
            outputs.append(stage(F.softmax(outputs[-1], dim=1)))
        return outputs


def tcn_forward(model, features):
    """T x d features -> T x P logits of the last stage"""
    param = next(model.parameters())
    x = torch.as_tensor(features, dtype=param.dtype, device=param.device)
    if x.dim() != 2 or x.shape[0] < 1:
        raise ShapeMismatchError(f'Expected T x d features with T >= 1, got {tuple(x.shape)}')
    return model(x.t().unsqueeze(0))[-1][0].t()


@dataclass
class PhasePrediction:
    video_id: str
    logits: np.ndarray
    labels: np.ndarray
    gt_labels: np.ndarray = None

    def __post_init__(self):
        if self.logits.shape[0] != self.labels.size:
            raise ShapeMismatchError(f'{self.video_id}: {self.logits.shape[0]} logit rows '
                                     f'for {self.labels.size} labels')


@dataclass
class TcnCheckpoint:
    model: CausalTCN
    config: TcnConfig
    class_weights: ClassWeights
    epoch: int
    history: list
    best_val_accuracy: float

    def manifest(self):
        return {
            'stage': 'stage2',
            'config': self.config.to_json(),
            'config_digest': config_digest(self.config.to_json()),
            'in_dim': self.model.in_dim,
            'P': self.model.P,
            'class_weights': self.class_weights.to_json(),
            'epoch': self.epoch,
            'history': self.history,
            'best_val_accuracy': self.best_val_accuracy,
            'seed': self.config.seed,
        }

    def save(self, path):
        return checkpoint_io.save_checkpoint(path, {'model': self.model.state_dict()},
                                             self.manifest())

    @classmethod
    def load(cls, path):
        tensors, manifest = checkpoint_io.load_checkpoint(path)
        if manifest.get('stage') != 'stage2':
            raise DataError(f'{path} is not a stage-2 checkpoint')
        cfg = TcnConfig(**manifest['config'])
        model = CausalTCN(manifest['in_dim'], manifest['P'], cfg).to(cfg.torch_dtype)
        model.load_state_dict(tensors['model'])
        model.eval()
        weights = manifest['class_weights']
        return cls(model=model, config=cfg,
                   class_weights=ClassWeights(np.asarray(weights['weights']),
                                              np.asarray(weights['counts'], dtype=np.int64)),
                   epoch=manifest['epoch'], history=manifest['history'],
                   best_val_accuracy=manifest['best_val_accuracy'])


def _load_sequences(cache, video_ids, dtype):
    cache.require(video_ids)
    sequences = []
    for video_id in video_ids:
        features, labels = cache.read(video_id)
        sequences.append((video_id,
                          torch.as_tensor(features, dtype=dtype).t().unsqueeze(0),
                          torch.as_tensor(to_class_index(labels))))
    return sequences


@torch.no_grad()
def _sequence_accuracy(model, sequences):
    model.eval()
    correct, total = 0, 0
    for _, x, targets in sequences:
        predictions = model(x)[-1][0].argmax(dim=0)
        correct += int((predictions == targets).sum())
        total += int(targets.numel())
    return correct / total if total else float('nan')


def train_stage2(cache, split, P, cfg, progress=True):
    """
    Train on whole training videos, one video per optimizer step, with the
    loss summed over stages. Keeps the best-validation epoch.
    """
    if cfg.lr is None:
        raise ConfigError('stage2.lr is not set; run the stage-2 lr search or set stage2.lr')
    if not split.train:
        raise DataError('Stage-2 training split is empty')
    dtype = cfg.torch_dtype
    train = _load_sequences(cache, split.train, dtype)
    val = _load_sequences(cache, split.val, dtype)
    d = train[0][1].shape[1]

    counts = np.zeros(P, dtype=np.int64)
    for _, _, targets in train:
        counts += np.bincount(targets.numpy(), minlength=P)[:P]
    class_weights = median_frequency_weights(counts)
    weights = class_weights.as_tensor(dtype)

    torch.manual_seed(cfg.seed)
    model = CausalTCN(d, P, cfg).to(dtype)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs, eta_min=0.0)
    logger.info('Stage 2: %d train / %d val videos, d=%d, receptive field %d',
                len(train), len(val), d, receptive_field(cfg.layers, cfg.kernel_size))

    history = []
    best_state, best_epoch, best_accuracy = None, 0, -math.inf
    for epoch in tqdm(range(1, cfg.epochs + 1), desc='stage2', disable=not progress):
        model.train()
        order = torch.randperm(len(train),
                               generator=torch.Generator().manual_seed(
                                   derive_seed(cfg.seed, 'stage2-order', epoch)))
        losses = []
        for i in order.tolist():
            video_id, x, targets = train[i]
            optimizer.zero_grad(set_to_none=True)
            loss = sum(weighted_cross_entropy(out[0].t(), targets, weights) for out in model(x))
            if not torch.isfinite(loss):
                raise TrainingError(f'Non-finite stage-2 loss at epoch {epoch} on {video_id}')
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        scheduler.step()

        val_accuracy = _sequence_accuracy(model, val) if val else None
        history.append({'epoch': epoch, 'train_loss': float(np.mean(losses)),
                        'val_accuracy': val_accuracy, 'lr': optimizer.param_groups[0]['lr']})
        logger.debug('stage2 epoch %d loss %.4f val acc %s', epoch, history[-1]['train_loss'],
                     val_accuracy)
        if val_accuracy is None or val_accuracy > best_accuracy:
            best_accuracy, best_epoch = (val_accuracy if val else -math.inf), epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    logger.info('Stage 2 best epoch %d (val acc %s)', best_epoch,
                'n/a' if not val else f'{best_accuracy:.4f}')
    return TcnCheckpoint(model=model, config=cfg, class_weights=class_weights, epoch=best_epoch,
                         history=history, best_val_accuracy=best_accuracy if val else None)


def search_stage2_learning_rate(cache, split, P, cfg):
    if not split.val:
        raise DataError('Learning-rate search needs a non-empty validation split')

    def evaluate(rate, budget):
        return train_stage2(cache, split, P, replace(cfg, lr=rate, epochs=budget),
                            progress=False).best_val_accuracy

    return select_learning_rate(cfg.lr_grid, cfg.lr_search_epochs, evaluate, bounds=None)


@torch.no_grad()
def predict(checkpoint, cache, video_ids):
    """Per-frame phase predictions for each cached video"""
    model = checkpoint.model.eval()
    predictions = []
    for video_id in video_ids:
        features, gt = cache.read(video_id)
        logits = tcn_forward(model, features).cpu().numpy()
        predictions.append(PhasePrediction(video_id=video_id, logits=logits,
                                           labels=to_phase_id(logits.argmax(axis=1)),
                                           gt_labels=gt))
    return predictions


@torch.no_grad()
def framewise_predictions(stage1_checkpoint, cache, video_ids):
    """Stage-1 per-frame argmax over cached features (the no-temporal-model baseline)"""
    model = stage1_checkpoint.model.eval()
    dtype = stage1_checkpoint.config.torch_dtype
    predictions = []
    for video_id in video_ids:
        features, gt = cache.read(video_id)
        logits = model.logits_from_features(torch.as_tensor(features, dtype=dtype)).cpu().numpy()
        predictions.append(PhasePrediction(video_id=video_id, logits=logits,
                                           labels=to_phase_id(logits.argmax(axis=1)),
                                           gt_labels=gt))
    return predictions


def write_predictions(predictions, out_dir, save_logits=False):
    """One `<video_id>.tsv` per video: second, gt_phase, pred_phase"""
    os.makedirs(out_dir, exist_ok=True)
    for prediction in predictions:
        if prediction.gt_labels is None:
            raise DataError(f'{prediction.video_id}: no ground truth to write beside predictions')
        table = pd.DataFrame({'second': np.arange(prediction.labels.size),
                              'gt_phase': prediction.gt_labels,
                              'pred_phase': prediction.labels})
        table.to_csv(os.path.join(out_dir, f'{prediction.video_id}.tsv'), sep='\t', index=False)
        if save_logits:
            np.save(os.path.join(out_dir, f'{prediction.video_id}.logits.npy'), prediction.logits)
    logger.info('Wrote %d prediction files to %s', len(predictions), out_dir)
