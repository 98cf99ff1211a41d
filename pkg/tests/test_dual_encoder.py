import math

import pytest
from hypothesis import assume, given, settings, strategies as st
import torch

from dual_encoder import (MAX_LOGIT_SCALE, LogitHead, ToyImageEncoder, ToyTextEncoder,
                          attach_pretrained_backbone, compute_logits)
from errors import BackboneError, ConfigError, ShapeMismatchError


def test_toy_encoder_shapes():
    pair = attach_pretrained_backbone('toy', feature_dim=16, token_dim=8, seed=1)
    images = torch.rand(3, 3, 16, 16)
    assert pair.image_encoder.encode(images).shape == (3, 16)
    assert pair.text_encoder.encode_tokens(torch.rand(4, 5, 8)).shape == (4, 16)
    assert pair.feature_dim == 16


def test_toy_encoder_is_seeded():
    a = ToyImageEncoder(output_dim=8, seed=5)
    b = ToyImageEncoder(output_dim=8, seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_toy_encoder_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    ToyImageEncoder(output_dim=8, seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_text_encoder_is_frozen():
    pair = attach_pretrained_backbone('toy', feature_dim=8, token_dim=4)
    text = pair.text_encoder
    assert all(not p.requires_grad for p in text.parameters())
    text.train()
    assert not text.training
    assert all(p.requires_grad for p in pair.image_encoder.parameters())


def test_text_encoder_rejects_bad_width():
    with pytest.raises(ShapeMismatchError):
        ToyTextEncoder(token_dim=4, output_dim=8).encode_tokens(torch.rand(2, 3, 5))


def test_gradient_flows_to_prompts_only():
    text = ToyTextEncoder(token_dim=4, output_dim=8)
    prompts = torch.rand(3, 2, 4, requires_grad=True)
    text.encode_tokens(prompts).sum().backward()
    assert prompts.grad is not None
    assert all(p.grad is None for p in text.parameters())


def test_embed_text():
    text = ToyTextEncoder(token_dim=4, output_dim=8)
    assert text.embed_text('Preparation').shape == (4,)
    assert text.embed_text('!!!') is None


def test_logit_scale_initialization():
    head = LogitHead()
    assert head.logit_scale.item() == pytest.approx(math.log(1 / 0.07), rel=1e-6)


def test_normalized_logits_bounded():
    head = LogitHead()
    img, txt = torch.randn(5, 6) * 100, torch.randn(3, 6)
    logits = head(img, txt)
    assert logits.shape == (5, 3)
    assert logits.abs().max().item() <= head.logit_scale.exp().item() + 1e-4


def test_unnormalized_logits_are_scaled_inner_products():
    head = LogitHead(normalize=False, initial_scale=0.0)
    img, txt = torch.randn(2, 4), torch.randn(3, 4)
    torch.testing.assert_close(head(img, txt), img @ txt.t())


def _random_features(seed, B, P, d):
    gen = torch.Generator().manual_seed(seed)
    img = torch.randn(B, d, generator=gen, dtype=torch.float64)
    txt = torch.randn(P, d, generator=gen, dtype=torch.float64)
    return img, txt


def _cosine_oracle(img, txt, scale):
    rows = []
    for b in range(img.shape[0]):
        row = []
        for p in range(txt.shape[0]):
            dot = sum(float(img[b, k]) * float(txt[p, k]) for k in range(img.shape[1]))
            na = math.sqrt(sum(float(x) ** 2 for x in img[b]))
            nb = math.sqrt(sum(float(x) ** 2 for x in txt[p]))
            row.append(scale * dot / (na * nb))
        rows.append(row)
    return rows


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(1, 5), st.integers(2, 8))
def test_double_precision_logits_match_oracle(seed, B, P, d):
    head = LogitHead()
    img, txt = _random_features(seed, B, P, d)
    logits = compute_logits(img, txt, head)
    assert logits.dtype == torch.float64
    expected = _cosine_oracle(img, txt, math.exp(float(head.logit_scale)))
    for b in range(B):
        for p in range(P):
            assert abs(float(logits[b, p]) - expected[b][p]) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e3))
def test_argmax_invariant_to_positive_image_scaling(seed, c):
    head = LogitHead()
    img, txt = _random_features(seed, 3, 5, 6)
    logits = compute_logits(img, txt, head)
    top2 = logits.topk(2, dim=1).values
    assume(bool((top2[:, 0] - top2[:, 1] > 1e-9).all()))
    assert torch.equal(compute_logits(img * c, txt, head).argmax(dim=1), logits.argmax(dim=1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 8))
def test_identical_and_orthogonal_vectors_at_unit_scale(seed, d):
    head = LogitHead(initial_scale=0.0)
    gen = torch.Generator().manual_seed(seed)
    u = torch.randn(d, generator=gen, dtype=torch.float64)
    v = torch.randn(d, generator=gen, dtype=torch.float64)
    v = v - (v @ u) / (u @ u) * u
    assume(float(v.norm()) > 1e-3)
    same = compute_logits(u[None], u[None], head)
    orthogonal = compute_logits(u[None], v[None], head)
    assert float(same) == pytest.approx(1.0, abs=1e-12)
    assert float(orthogonal) == pytest.approx(0.0, abs=1e-12)


def test_logit_scale_is_clamped():
    head = LogitHead(initial_scale=10.0)
    img = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    logits = compute_logits(img, img, head)
    assert float(logits) == pytest.approx(100.0, rel=1e-12)
    assert head.logit_scale.item() == 10.0
    assert MAX_LOGIT_SCALE == pytest.approx(math.log(100))


def test_toy_image_encoder_is_deterministic_in_eval_mode():
    pair = attach_pretrained_backbone('toy', feature_dim=16, token_dim=8, seed=3)
    encoder = pair.image_encoder.eval()
    frame = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(encoder.encode(frame), encoder.encode(frame))


def test_logit_width_mismatch():
    with pytest.raises(ShapeMismatchError):
        compute_logits(torch.rand(2, 4), torch.rand(3, 5), LogitHead())


def test_unknown_backbone():
    with pytest.raises(BackboneError):
        attach_pretrained_backbone('vgg')


def test_backbone_error_is_config_error():
    assert issubclass(BackboneError, ConfigError)


def test_clip_backbone_needs_weights(tmp_path):
    with pytest.raises(BackboneError, match='weights'):
        attach_pretrained_backbone('clip-resnet50')
    with pytest.raises(BackboneError, match='not found'):
        attach_pretrained_backbone('clip-resnet50', weights_path=str(tmp_path / 'missing.pt'))


def test_vit_backbone_not_wired():
    with pytest.raises(BackboneError, match='not implemented'):
        attach_pretrained_backbone('clip-vit-b16')
