import math

import numpy as np
import pytest
import torch
from conftest import tiny_model_config
from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st

from audiolog import errors
from audiolog.features import AudioClip
from audiolog.features import PatchTokenGrid
from audiolog.features import StftConfig
from audiolog.features import compute_logmel
from audiolog.features import pad_to_patch_multiple
from audiolog.model.core import EncoderOutput
from audiolog.model.core import ModelConfig
from audiolog.model.core import Predictions
from audiolog.model.core import Targets
from audiolog.model.mtl import MTLModel
from audiolog.model.mtl import SceneHead
from audiolog.model.mtl import TokenSemanticHead
from audiolog.model.mtl import combine_losses
from audiolog.model.mtl import encode
from audiolog.model.mtl import forward
from audiolog.model.mtl import mtl_loss
from audiolog.model.mtl import scene_head
from audiolog.model.mtl import scene_loss
from audiolog.model.mtl import sed_loss
from audiolog.model.mtl import token_semantic_head
from audiolog.model.swin import SwinGroup
from audiolog.model.swin import WindowAttention
from audiolog.model.swin import fit_window
from audiolog.model.swin import swin_group
from audiolog.model.swin import window_partition
from audiolog.model.swin import window_reverse


@settings(max_examples=20, deadline=None)
@given(patch_size=st.sampled_from([2, 4]),
       time_units=st.integers(min_value=1, max_value=3),
       freq_units=st.integers(min_value=1, max_value=2))
def test_encoder_reduces_the_grid_eightfold(patch_size, time_units, freq_units):
    model = MTLModel(tiny_model_config(patch_size=patch_size)).eval()
    n_frames = model.alignment * time_units
    n_bins = model.alignment * freq_units

    with torch.no_grad():
        tokens = model.patch_embed(torch.randn(1, n_frames, n_bins))
        enc = encode(PatchTokenGrid(tokens=tokens), model)

    assert tokens.shape == (1, n_frames // patch_size, n_bins // patch_size, 8)
    assert enc.tokens.shape == (1, time_units, freq_units, 64)


def test_group_with_merge_halves_the_grid_and_doubles_channels():
    group = SwinGroup(dim=96, depth=2, num_heads=4, window_size=8, merge=True).eval()

    with torch.no_grad():
        out = swin_group(PatchTokenGrid(tokens=torch.randn(1, 64, 16, 96)), group)

    assert (out.height, out.width, out.dim) == (32, 8, 192)


def test_default_encoder_maps_64_by_16_to_8_by_2():
    model = MTLModel(ModelConfig()).eval()

    with torch.no_grad():
        enc = encode(PatchTokenGrid(tokens=torch.randn(1, 64, 16, 96)), model)

    assert enc.tokens.shape == (1, 8, 2, 768)


def test_odd_grid_is_rejected():
    model = MTLModel(tiny_model_config())

    with pytest.raises(errors.ShapeMismatch):
        encode(PatchTokenGrid(tokens=torch.randn(1, 12, 8, 8)), model)


@pytest.mark.parametrize('row, col', [(0, 0), (7, 8), (15, 15)])
def test_perturbing_one_token_changes_the_encoding(row, col):
    model = MTLModel(tiny_model_config()).double().eval()
    tokens = torch.randn(1, 16, 16, 8, dtype=torch.float64)
    eps = 1e-4
    perturbed = tokens.clone()
    perturbed[0, row, col] += eps * torch.randn(8, dtype=torch.float64)

    with torch.no_grad():
        base = encode(PatchTokenGrid(tokens=tokens), model).tokens
        moved = encode(PatchTokenGrid(tokens=perturbed), model).tokens

    assert float((moved - base).abs().max()) / eps > 1e-6


@pytest.mark.parametrize('size, window, expected', [(16, 8, 8), (2, 8, 2), (12, 8, 6), (7, 4, 1)])
def test_window_fits_the_axis(size, window, expected):
    assert fit_window(size, window) == expected


def test_window_partition_is_inverted_by_reverse():
    x = torch.randn(2, 8, 4, 3)

    windows = window_partition(x, 4, 2)

    assert windows.shape == (2 * 2 * 2, 8, 3)
    assert torch.equal(window_reverse(windows, 4, 2, 8, 4), x)


def test_uniform_attention_averages_each_window():
    dim = 4
    attention = WindowAttention(dim=dim, window_size=2, num_heads=1)
    with torch.no_grad():
        attention.qkv.weight.zero_()
        attention.qkv.weight[2 * dim:].copy_(torch.eye(dim))
        attention.qkv.bias.zero_()
        attention.relative_position_bias_table.zero_()
        attention.proj.weight.copy_(torch.eye(dim))
        attention.proj.bias.zero_()

    x = torch.randn(3, 4, dim)
    with torch.no_grad():
        out = attention(x, (2, 2))

    assert torch.allclose(out, x.mean(dim=1, keepdim=True).expand_as(x), atol=1e-6)


def test_zero_encoding_gives_even_event_odds():
    head = TokenSemanticHead(in_dim=16, num_classes=11)
    with torch.no_grad():
        head.conv.bias.zero_()

    with torch.no_grad():
        probs = head(torch.zeros(2, 8, 2, 16), n_frames=64)

    assert probs.shape == (2, 64, 11)
    assert torch.allclose(probs, torch.full_like(probs, 0.5))


def test_event_probabilities_are_bounded():
    model = MTLModel(tiny_model_config(num_event_classes=11))

    with torch.no_grad():
        probs = token_semantic_head(EncoderOutput(tokens=10 * torch.randn(1, 8, 2, 64)), model, 64)

    assert probs.shape == (1, 64, 11)
    assert torch.all((probs >= 0) & (probs <= 1))


def test_time_constant_encoding_gives_time_constant_probabilities():
    head = TokenSemanticHead(in_dim=4, num_classes=3)
    column = torch.randn(1, 1, 2, 4)

    with torch.no_grad():
        probs = head(column.expand(1, 6, 2, 4), n_frames=48)

    assert torch.allclose(probs, probs[:, :1].expand_as(probs), atol=1e-6)


def test_zero_encoding_gives_zero_scene_logits():
    head = SceneHead(in_dim=16, num_classes=5)
    with torch.no_grad():
        head.fc.bias.zero_()

    with torch.no_grad():
        logits = head(torch.zeros(1, 8, 2, 16))

    assert logits.shape == (1, 5)
    assert torch.count_nonzero(logits) == 0


def test_scene_logits_ignore_token_order():
    model = MTLModel(tiny_model_config(num_scene_classes=5))
    tokens = torch.randn(1, 4, 2, 64)
    order = torch.randperm(8)
    shuffled = tokens.reshape(1, 8, 64)[:, order].reshape(1, 4, 2, 64)

    with torch.no_grad():
        reference = scene_head(EncoderOutput(tokens=tokens), model)
        permuted = scene_head(EncoderOutput(tokens=shuffled), model)

    assert torch.allclose(reference, permuted, atol=1e-6)


def test_evaluation_mode_is_deterministic():
    model = MTLModel(tiny_model_config()).eval()
    x = torch.randn(2, 32, 16)

    with torch.no_grad():
        first = model(x)
        second = model(x)

    assert torch.equal(first.sed_probs, second.sed_probs)
    assert torch.equal(first.scene_logits, second.scene_logits)


def test_ten_second_clip_gives_frame_probabilities_and_scene_logits():
    model = MTLModel(tiny_model_config(num_event_classes=11, num_scene_classes=5)).eval()
    rng = np.random.default_rng(0)
    clip = AudioClip(samples=rng.uniform(-0.3, 0.3, 10 * 32000).astype(np.float32),
                     sample_rate=32000)
    spec = pad_to_patch_multiple(compute_logmel(clip, StftConfig()), model.cfg.patch_size,
                                 model.cfg.merge_depth)

    with torch.no_grad():
        first = forward(spec, model)
        second = forward(spec, model)

    assert first.sed_probs.shape == (spec.T, 11)
    assert first.scene_logits.shape == (5,)
    assert torch.equal(first.sed_probs, second.sed_probs)
    assert torch.equal(first.scene_logits, second.scene_logits)


def test_batch_items_are_independent():
    model = MTLModel(tiny_model_config()).eval()
    x = torch.randn(2, 32, 16)

    with torch.no_grad():
        batch = model(x)
        single = model(x[1:])

    assert torch.allclose(batch.sed_probs[1:], single.sed_probs, atol=1e-5)
    assert torch.allclose(batch.scene_logits[1:], single.scene_logits, atol=1e-5)


def test_combined_loss_example():
    assert combine_losses(1.0, 2.0, 0.7) == 2.4


@settings(max_examples=100, deadline=None)
@given(sed=st.floats(min_value=0.0, max_value=50.0),
       scene=st.floats(min_value=0.0, max_value=50.0),
       alpha=st.floats(min_value=0.0, max_value=10.0))
def test_combined_loss_adds_weighted_scene_loss(sed, scene, alpha):
    assert combine_losses(sed, scene, alpha) == pytest.approx(sed + alpha * scene, rel=1e-6)


def _hand_example() -> tuple[Predictions, Targets]:
    pred = Predictions(sed_probs=torch.tensor([[[0.8, 0.1], [0.3, 0.6]]], dtype=torch.float64),
                       scene_logits=torch.tensor([[2.0, 0.5]], dtype=torch.float64))
    tgt = Targets(sed_targets=torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64),
                  scene_target=torch.tensor([0]))
    return pred, tgt


def test_losses_match_hand_computation():
    pred, tgt = _hand_example()

    expected_sed = -(math.log(0.8) + math.log(0.9) + math.log(0.7) + math.log(0.6)) / 4
    expected_scene = math.log(1 + math.exp(-1.5))

    assert float(sed_loss(pred, tgt)) == pytest.approx(expected_sed, rel=1e-9)
    assert float(scene_loss(pred, tgt)) == pytest.approx(expected_scene, rel=1e-9)

    loss = mtl_loss(pred, tgt, alpha=0.7)
    assert float(loss.total) == pytest.approx(expected_sed + 0.7 * expected_scene, rel=1e-9)


def test_zero_alpha_reduces_to_event_loss():
    pred, tgt = _hand_example()

    loss = mtl_loss(pred, tgt, alpha=0.0)

    assert torch.equal(loss.total, loss.sed)


def test_negative_alpha_is_rejected():
    pred, tgt = _hand_example()

    with pytest.raises(ValueError):
        mtl_loss(pred, tgt, alpha=-0.1)


def test_perfect_predictions_have_zero_loss():
    targets = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]])
    pred = Predictions(sed_probs=targets.clone(), scene_logits=torch.tensor([[50.0, -50.0]]))
    tgt = Targets(sed_targets=targets, scene_target=torch.tensor([0]))

    assert float(mtl_loss(pred, tgt, alpha=0.7).total) < 1e-6


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2 ** 16), alpha=st.floats(0.0, 5.0))
def test_loss_is_never_negative(seed, alpha):
    generator = torch.Generator().manual_seed(seed)
    pred = Predictions(sed_probs=torch.rand(2, 5, 3, generator=generator),
                       scene_logits=torch.randn(2, 4, generator=generator))
    tgt = Targets(sed_targets=torch.rand(2, 5, 3, generator=generator),
                  scene_target=torch.randint(0, 4, (2,), generator=generator))

    assert float(mtl_loss(pred, tgt, alpha).total) >= 0.0


def test_shape_mismatch_is_reported():
    pred, tgt = _hand_example()
    short = Targets(sed_targets=tgt.sed_targets[:, :1], scene_target=tgt.scene_target)

    with pytest.raises(errors.ShapeMismatch):
        sed_loss(pred, short)


def _small_problem() -> tuple[MTLModel, torch.Tensor, Targets]:
    model = MTLModel(tiny_model_config()).double().eval()
    x = torch.randn(1, 32, 16, dtype=torch.float64)
    tgt = Targets(sed_targets=torch.rand(1, 32, 2, dtype=torch.float64),
                  scene_target=torch.tensor([1]))
    return model, x, tgt


def test_gradients_match_finite_differences():
    model, x, tgt = _small_problem()

    def loss_value() -> torch.Tensor:
        return mtl_loss(model(x), tgt, alpha=0.7).total

    model.zero_grad()
    loss_value().backward()

    generator = torch.Generator().manual_seed(1)
    eps = 1e-6
    parts = [model.patch_embed, *model.encoder.groups, model.sed_head, model.scene_head]

    for part in parts:
        params = [p for p in part.parameters() if p.numel() > 0]
        for _ in range(3):
            param = params[int(torch.randint(len(params), (1,), generator=generator))]
            index = int(torch.randint(param.numel(), (1,), generator=generator))
            analytic = float(param.grad.reshape(-1)[index])

            flat = param.data.reshape(-1)
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + eps
                upper = float(loss_value())
                flat[index] = original - eps
                lower = float(loss_value())
                flat[index] = original
            numeric = (upper - lower) / (2 * eps)

            assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-8


@pytest.mark.parametrize('loss_name', ['sed', 'scene'])
def test_each_task_trains_the_shared_trunk(loss_name):
    model, x, tgt = _small_problem()

    loss = getattr(mtl_loss(model(x), tgt, alpha=0.7), loss_name)
    loss.backward()

    trunk_grad = sum(float(p.grad.abs().sum()) for p in model.trunk_parameters()
                     if p.grad is not None)
    assert trunk_grad > 0.0


def test_trunk_state_dict_excludes_heads():
    model = MTLModel(tiny_model_config())

    names = model.trunk_state_dict().keys()

    assert any(name.startswith('encoder.') for name in names)
    assert not any(name.startswith(('sed_head.', 'scene_head.')) for name in names)
