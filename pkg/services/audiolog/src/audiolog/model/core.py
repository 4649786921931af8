"""Contains the model configuration and the tensors passed between model stages."""
import dataclasses

import pydantic
import torch


class ModelConfig(pydantic.BaseModel):
    """Configuration of the hierarchical token-semantic encoder and its two heads."""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    patch_size: int = pydantic.Field(default=4, ge=1)
    embed_dim: int = pydantic.Field(default=96, ge=1)
    depths: tuple[int, int, int, int] = (2, 2, 6, 2)
    num_heads: tuple[int, int, int, int] = (4, 8, 16, 32)
    window_size: int = pydantic.Field(default=8, ge=1)
    mlp_ratio: float = pydantic.Field(default=4.0, gt=0.0)
    num_event_classes: int = pydantic.Field(default=11, ge=1)
    num_scene_classes: int = pydantic.Field(default=5, ge=1)
    alpha: float = pydantic.Field(default=0.7, ge=0.0)
    dropout: float = pydantic.Field(default=0.0, ge=0.0, lt=1.0)
    pretrained_path: str | None = None

    @pydantic.model_validator(mode='after')
    def _check_heads(self) -> 'ModelConfig':
        for group, heads in enumerate(self.num_heads):
            if heads < 1 or self.group_dim(group) % heads:
                raise ValueError(f'group {group} dim {self.group_dim(group)} is not divisible '
                                 f'by {heads} heads')
        if any(depth < 1 for depth in self.depths):
            raise ValueError('every group needs at least one block')
        return self

    @property
    def num_groups(self) -> int:
        """Number of encoder groups."""
        return len(self.depths)

    @property
    def merge_depth(self) -> int:
        """Number of patch-merge layers, one fewer than groups."""
        return self.num_groups - 1

    @property
    def out_dim(self) -> int:
        """Channel dimension of the encoder output."""
        return self.group_dim(self.num_groups - 1)

    def group_dim(self, group: int) -> int:
        """Channel dimension inside a group; doubles with each merge."""
        return self.embed_dim * 2 ** group


@dataclasses.dataclass(frozen=True)
class EncoderOutput:
    """(B, T/8P, F/8P, D_out) token grid produced by the encoder."""

    tokens: torch.Tensor


@dataclasses.dataclass(frozen=True)
class Predictions:
    """Frame-wise event probabilities (B, T', K_e) and clip scene logits (B, K_s)."""

    sed_probs: torch.Tensor
    scene_logits: torch.Tensor


@dataclasses.dataclass(frozen=True)
class Targets:
    """Frame-wise event activity in [0, 1] and scene class indices."""

    sed_targets: torch.Tensor
    scene_target: torch.Tensor

    @classmethod
    def stack(cls, targets: list['Targets']) -> 'Targets':
        """Collates per-example targets into a batch."""

        return cls(sed_targets=torch.stack([t.sed_targets for t in targets]),
                   scene_target=torch.stack([t.scene_target for t in targets]))
