"""Contains the multi-task model: shared hierarchical encoder, event head and scene head.

Shape chain for a padded (T, F) spectrogram with patch side P and three merges:
(T, F) -> (T/P x F/P, D) -> (T/8P x F/8P, 8D) -> (T, K_e) event probabilities and K_s logits.
"""
import dataclasses
import logging
from typing import Iterator

import torch
from torch import nn

from audiolog import errors
from audiolog.features import LogMelSpectrogram
from audiolog.features import PatchEmbed
from audiolog.features import PatchTokenGrid
from audiolog.model.core import EncoderOutput
from audiolog.model.core import ModelConfig
from audiolog.model.core import Predictions
from audiolog.model.core import Targets
from audiolog.model.swin import SwinGroup


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


class HierarchicalEncoder(nn.Module):
    """Four Swin groups; every group but the last ends with a patch merge."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()

        self.reduction = 2 ** cfg.merge_depth

        self.patch_norm = nn.LayerNorm(cfg.embed_dim)
        self.pos_drop = nn.Dropout(cfg.dropout)
        self.groups = nn.ModuleList([
            SwinGroup(dim=cfg.group_dim(g),
                      depth=cfg.depths[g],
                      num_heads=cfg.num_heads[g],
                      window_size=cfg.window_size,
                      merge=g < cfg.num_groups - 1,
                      mlp_ratio=cfg.mlp_ratio,
                      drop=cfg.dropout)
            for g in range(cfg.num_groups)
        ])
        self.norm = nn.LayerNorm(cfg.out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Encodes a (B, H, W, D) grid into (B, H/8, W/8, D_out)."""

        _, h, w, _ = tokens.shape
        if h % self.reduction or w % self.reduction:
            raise errors.ShapeMismatch(
                f'token grid {h}x{w} is not divisible by the encoder reduction {self.reduction}')

        x = self.pos_drop(self.patch_norm(tokens))
        for group in self.groups:
            x = group(x)

        return self.norm(x)


class TokenSemanticHead(nn.Module):
    """Maps encoder channels to event classes and stretches them back to frame resolution.

    A 3 x 3 convolution (replicate padding) produces class maps, the frequency axis is averaged,
    the time axis is linearly interpolated to the frame count, and a sigmoid gives probabilities.
    """

    def __init__(self, in_dim: int, num_classes: int) -> None:
        super().__init__()

        self.conv = nn.Conv2d(in_dim, num_classes, kernel_size=3, padding=1,
                              padding_mode='replicate')

    def forward(self, tokens: torch.Tensor, n_frames: int) -> torch.Tensor:
        """Returns (B, n_frames, K_e) probabilities for a (B, H, W, C) encoder grid."""

        class_maps = self.conv(tokens.permute(0, 3, 1, 2))
        per_step = class_maps.mean(dim=3)
        per_frame = nn.functional.interpolate(per_step, size=n_frames, mode='linear',
                                              align_corners=False)
        return torch.sigmoid(per_frame).transpose(1, 2)


class SceneHead(nn.Module):
    """Global average over the token grid followed by one fully-connected layer."""

    def __init__(self, in_dim: int, num_classes: int) -> None:
        super().__init__()

        self.fc = nn.Linear(in_dim, num_classes)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Returns (B, K_s) logits for a (B, H, W, C) encoder grid."""
        return self.fc(tokens.mean(dim=(1, 2)))


def _init_weights(module: nn.Module) -> None:

    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)

    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class MTLModel(nn.Module):
    """Joint scene classification and sound event detection network with a shared trunk."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()

        self.cfg = cfg

        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.encoder = HierarchicalEncoder(cfg)
        self.sed_head = TokenSemanticHead(cfg.out_dim, cfg.num_event_classes)
        self.scene_head = SceneHead(cfg.out_dim, cfg.num_scene_classes)

        self.apply(_init_weights)

    @property
    def alignment(self) -> int:
        """T and F of the input must be multiples of this value."""
        return self.cfg.patch_size * 2 ** self.cfg.merge_depth

    def forward(self, x: torch.Tensor) -> Predictions:
        """Runs a (B, T, F) batch of padded, standardized spectrograms through both tasks."""

        if x.dim() != 3:
            raise errors.ShapeMismatch(f'expected a (B, T, F) batch, got shape {tuple(x.shape)}')

        encoded = self.encoder(self.patch_embed(x))

        return Predictions(sed_probs=self.sed_head(encoded, n_frames=x.shape[1]),
                           scene_logits=self.scene_head(encoded))

    def trunk_parameters(self) -> Iterator[nn.Parameter]:
        """Parameters shared by both tasks."""
        yield from self.patch_embed.parameters()
        yield from self.encoder.parameters()

    def trunk_state_dict(self) -> dict[str, torch.Tensor]:
        """Named tensors of the shared trunk, keyed as in ``state_dict``."""

        return {name: tensor for name, tensor in self.state_dict().items()
                if name.startswith(('patch_embed.', 'encoder.'))}


def encode(tokens: PatchTokenGrid, model: MTLModel) -> EncoderOutput:
    """Runs the shared encoder on a token grid."""
    return EncoderOutput(tokens=model.encoder(tokens.tokens))


def token_semantic_head(enc: EncoderOutput, model: MTLModel, n_frames: int) -> torch.Tensor:
    """Frame-aligned event probabilities for an encoder output."""
    return model.sed_head(enc.tokens, n_frames=n_frames)


def scene_head(enc: EncoderOutput, model: MTLModel) -> torch.Tensor:
    """Scene logits for an encoder output."""
    return model.scene_head(enc.tokens)


def forward(spec: LogMelSpectrogram, model: MTLModel) -> Predictions:
    """Runs one aligned spectrogram through the model, returning unbatched predictions."""

    pred = model(spec.values.unsqueeze(0))
    return dataclasses.replace(pred, sed_probs=pred.sed_probs[0], scene_logits=pred.scene_logits[0])


@dataclasses.dataclass(frozen=True)
class MTLLoss:
    """Joint loss and its two components."""

    total: torch.Tensor
    sed: torch.Tensor
    scene: torch.Tensor


def combine_losses(sed: torch.Tensor | float,
                   scene: torch.Tensor | float,
                   alpha: float) -> torch.Tensor | float:
    """L = L_e + alpha * L_s."""
    return sed + alpha * scene


def sed_loss(pred: Predictions, tgt: Targets) -> torch.Tensor:
    """Mean binary cross-entropy between event probabilities and (soft) targets."""

    if pred.sed_probs.shape != tgt.sed_targets.shape:
        raise errors.ShapeMismatch(f'event predictions {tuple(pred.sed_probs.shape)} and targets '
                                   f'{tuple(tgt.sed_targets.shape)} differ')

    return nn.functional.binary_cross_entropy(pred.sed_probs,
                                              tgt.sed_targets.to(pred.sed_probs.dtype))


def scene_loss(pred: Predictions, tgt: Targets) -> torch.Tensor:
    """Categorical cross-entropy of the scene logits."""

    logits = pred.scene_logits
    target = tgt.scene_target

    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        target = target.reshape(1)

    if logits.shape[0] != target.shape[0]:
        raise errors.ShapeMismatch(f'{logits.shape[0]} scene predictions for '
                                   f'{target.shape[0]} targets')

    return nn.functional.cross_entropy(logits, target.long())


def mtl_loss(pred: Predictions, tgt: Targets, alpha: float) -> MTLLoss:
    """Joint loss of both tasks, weighting the scene loss by alpha."""

    if alpha < 0:
        raise ValueError(f'alpha must be non-negative, got {alpha}')

    l_e = sed_loss(pred, tgt)
    l_s = scene_loss(pred, tgt)

    total = combine_losses(l_e, l_s, alpha)
    assert isinstance(total, torch.Tensor)

    return MTLLoss(total=total, sed=l_e, scene=l_s)
