import logging
import math
import os
import string
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import BackboneError, ShapeMismatchError

logger = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INITIAL_LOGIT_SCALE = math.log(1 / 0.07)
MAX_LOGIT_SCALE = math.log(100)


class ImageEncoder(nn.Module):
    """
    Image encoder interface: encode(B x 3 x H x W) -> B x output_dim.
    `normalization` is the (mean, std) pair the backbone expects, or None for [0, 1] input.
    """
    output_dim = None
    normalization = None

    def encode(self, images):
        return self(images)

    def set_trainable(self, trainable):
        for param in self.parameters():
            param.requires_grad = trainable
        self.train(trainable)
        return self


class TextEncoder(nn.Module):
    """
    Frozen text encoder interface: encode_tokens(P x L x token_dim) -> P x output_dim.
    `embed_text` is the tokenizer hook used to initialize first tokens from text.
    """
    output_dim = None
    token_dim = None

    def freeze(self):
        for param in self.parameters():
            param.requires_grad = False
        return self.eval()

    def train(self, mode=True):
        # Always evaluation mode, whatever the owning model does
        return super().train(False)

    def encode_tokens(self, prompts):
        raise NotImplementedError

    def embed_text(self, text):
        return None


class ToyImageEncoder(ImageEncoder):
    """Small convolutional encoder for desk-scale runs"""

    def __init__(self, output_dim=64, width=32, seed=0):
        super().__init__()
        self.output_dim = output_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(3, width // 2, 5, stride=2, padding=2),
                nn.GELU(),
                nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(width, width, 3, stride=2, padding=1),
                nn.GELU(),
                nn.AdaptiveAvgPool2d(1),
                nn.Flatten(),
            )
            self.projection = nn.Linear(width, output_dim)

    def forward(self, images):
        return self.projection(self.features(images))


class ToyTextEncoder(TextEncoder):
    """
    Deterministic token-sequence encoder: mean of the token embeddings passed
    through a fixed random linear map. Frozen by construction.
    """
    VOCABULARY = string.digits + string.ascii_lowercase + ' '

    def __init__(self, token_dim=32, output_dim=64, seed=0):
        super().__init__()
        self.token_dim = token_dim
        self.output_dim = output_dim
        generator = torch.Generator().manual_seed(seed)
        self.token_embedding = nn.Parameter(
            torch.randn(len(self.VOCABULARY), token_dim, generator=generator))
        self.projection = nn.Parameter(
            torch.randn(output_dim, token_dim, generator=generator) / math.sqrt(token_dim))
        self.freeze()

    def encode_tokens(self, prompts):
        if prompts.dim() != 3 or prompts.shape[-1] != self.token_dim:
            raise ShapeMismatchError(f'Expected P x L x {self.token_dim} prompts, '
                                     f'got {tuple(prompts.shape)}')
        return prompts.mean(dim=1) @ self.projection.t()

    def embed_text(self, text):
        ids = [self.VOCABULARY.index(ch) for ch in str(text).lower() if ch in self.VOCABULARY]
        if not ids:
            return None
        return self.token_embedding[ids].mean(dim=0).detach().clone()


class ClipImageEncoder(ImageEncoder):
    normalization = (CLIP_MEAN, CLIP_STD)

    def __init__(self, visual):
        super().__init__()
        self.visual = visual
        self.output_dim = int(getattr(visual, 'output_dim', 1024))

    def forward(self, images):
        return self.visual(images)


class ClipTextEncoder(TextEncoder):
    """
    CLIP text transformer fed with prompt embeddings instead of token ids:
    [SOT] + prompt tokens + [EOT] + padding, read out at the EOT position.
    """

    def __init__(self, clip_model, tokenizer):
        super().__init__()
        self.tokenizer = tokenizer
        self.token_embedding = clip_model.token_embedding
        self.positional_embedding = clip_model.positional_embedding
        self.transformer = clip_model.transformer
        self.ln_final = clip_model.ln_final
        self.text_projection = clip_model.text_projection
        self.register_buffer('attn_mask', clip_model.attn_mask, persistent=False)

        template = tokenizer(['x'])[0]
        self.sot_id = int(template[0])
        self.eot_id = int(template[2])
        self.context_length = int(self.positional_embedding.shape[0])
        self.token_dim = int(self.token_embedding.weight.shape[1])
        if isinstance(self.text_projection, nn.Linear):
            self.output_dim = int(self.text_projection.out_features)
        else:
            self.output_dim = int(self.text_projection.shape[1])
        self.freeze()

    def _embed_ids(self, ids, like):
        ids = torch.as_tensor(ids, dtype=torch.long, device=like.device)
        return self.token_embedding(ids).to(like.dtype)

    def encode_tokens(self, prompts):
        P, L, D = prompts.shape
        if D != self.token_dim:
            raise ShapeMismatchError(f'Prompt token width {D} != text encoder width {self.token_dim}')
        if L + 2 > self.context_length:
            raise ShapeMismatchError(f'Prompt of {L} tokens does not fit the '
                                     f'{self.context_length}-token context')
        sot = self._embed_ids([self.sot_id], prompts).expand(P, 1, D)
        eot = self._embed_ids([self.eot_id], prompts).expand(P, 1, D)
        pad = self._embed_ids([0], prompts).expand(P, self.context_length - L - 2, D)
        x = torch.cat([sot, prompts, eot, pad], dim=1) + self.positional_embedding.to(prompts.dtype)

        batch_first = getattr(self.transformer, 'batch_first', False)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = self.transformer(x, attn_mask=self.attn_mask)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = self.ln_final(x)[:, L + 1]

        if isinstance(self.text_projection, nn.Linear):
            return self.text_projection(x)
        return x @ self.text_projection

    def embed_text(self, text):
        ids = self.tokenizer([str(text)])[0].tolist()
        end = ids.index(self.eot_id)
        with torch.no_grad():
            return self.token_embedding.weight[ids[1:end]].mean(dim=0).clone()


class TorchvisionResNetEncoder(ImageEncoder):
    """ImageNet ResNet-50 trunk with the classifier removed (conventional baseline)"""
    normalization = (IMAGENET_MEAN, IMAGENET_STD)

    def __init__(self, trunk):
        super().__init__()
        self.output_dim = int(trunk.fc.in_features)
        trunk.fc = nn.Identity()
        self.trunk = trunk

    def forward(self, images):
        return self.trunk(images)


class LogitHead(nn.Module):
    """Inner-product head with optional L2 normalization and a learnable temperature"""

    def __init__(self, normalize=True, initial_scale=INITIAL_LOGIT_SCALE):
        super().__init__()
        self.normalize = normalize
        self.logit_scale = nn.Parameter(torch.tensor(float(initial_scale)))

    def forward(self, image_features, text_features):
        return compute_logits(image_features, text_features, self)


def compute_logits(image_features, text_features, head):
    """B x d image features against P x d text features -> B x P logits"""
    if image_features.dim() != 2 or text_features.dim() != 2:
        raise ShapeMismatchError(f'Expected 2-D features, got {tuple(image_features.shape)} '
                                 f'and {tuple(text_features.shape)}')
    if image_features.shape[1] != text_features.shape[1]:
        raise ShapeMismatchError(f'Feature width mismatch: image d={image_features.shape[1]}, '
                                 f'text d={text_features.shape[1]}')
    if head.normalize:
        image_features = F.normalize(image_features, dim=-1)
        text_features = F.normalize(text_features, dim=-1)
    scale = head.logit_scale.to(image_features.dtype).clamp(max=MAX_LOGIT_SCALE).exp()
    return scale * image_features @ text_features.t()


@dataclass
class EncoderPair:
    name: str
    image_encoder: ImageEncoder
    text_encoder: TextEncoder = None

    @property
    def feature_dim(self):
        return self.image_encoder.output_dim

    def embed_text(self, text):
        if self.text_encoder is None:
            return None
        return self.text_encoder.embed_text(text)


def _require_weights(name, weights_path):
    if not weights_path:
        raise BackboneError(f'Backbone {name!r} needs a weights file; set stage1.weights_path')
    if not os.path.isfile(weights_path):
        raise BackboneError(f'Weights file for {name!r} not found: {weights_path}. '
                            f'Download it once and point stage1.weights_path at it.')


def _build_toy(weights_path, feature_dim, token_dim, seed):
    return EncoderPair(
        name='toy',
        image_encoder=ToyImageEncoder(output_dim=feature_dim, seed=seed),
        text_encoder=ToyTextEncoder(token_dim=token_dim, output_dim=feature_dim, seed=seed + 1),
    )


def _build_clip_resnet50(weights_path, feature_dim, token_dim, seed):
    _require_weights('clip-resnet50', weights_path)
    try:
        import open_clip
    except ImportError as e:
        raise BackboneError('clip-resnet50 needs the open_clip_torch package') from e
    try:
        model, _, _ = open_clip.create_model_and_transforms('RN50', pretrained=weights_path)
    except Exception as e:
        raise BackboneError(f'Could not load CLIP RN50 weights from {weights_path}: {e}. '
                            f'Check that the file is an open_clip/OpenAI RN50 checkpoint.') from e
    tokenizer = open_clip.get_tokenizer('RN50')
    return EncoderPair(
        name='clip-resnet50',
        image_encoder=ClipImageEncoder(model.visual),
        text_encoder=ClipTextEncoder(model, tokenizer),
    )


def _build_imagenet_resnet50(weights_path, feature_dim, token_dim, seed):
    _require_weights('imagenet-resnet50', weights_path)
    from torchvision.models import resnet50
    trunk = resnet50(weights=None)
    try:
        trunk.load_state_dict(torch.load(weights_path, map_location='cpu'))
    except Exception as e:
        raise BackboneError(f'Could not load ImageNet ResNet-50 weights from {weights_path}: {e}') from e
    return EncoderPair(name='imagenet-resnet50', image_encoder=TorchvisionResNetEncoder(trunk))


def _build_clip_vit_b16(weights_path, feature_dim, token_dim, seed):
    raise BackboneError('clip-vit-b16 is not implemented; the encoder interface is compatible '
                        'with it, but only clip-resnet50 and toy are wired up')


BACKBONES = {
    'toy': _build_toy,
    'clip-resnet50': _build_clip_resnet50,
    'imagenet-resnet50': _build_imagenet_resnet50,
    'clip-vit-b16': _build_clip_vit_b16,
}


def attach_pretrained_backbone(name, weights_path=None, feature_dim=64, token_dim=32, seed=0):
    """
    Build the image/text encoder pair registered under `name`.
    The text encoder (if any) comes back frozen; the image encoder trainable.
    """
    if name not in BACKBONES:
        raise BackboneError(f'Unsupported backbone {name!r}; choose from {sorted(BACKBONES)}')
    pair = BACKBONES[name](weights_path, feature_dim, token_dim, seed)
    pair.image_encoder.set_trainable(True)
    if pair.text_encoder is not None:
        pair.text_encoder.freeze()
    logger.info('Attached backbone %s (d=%d)', name, pair.feature_dim)
    return pair
