"""Contains saving and loading of model checkpoints.

A checkpoint is a directory with:
    config.json         schema version, model and feature configs, label vocabularies
    model.pt            state dict (parameter name -> tensor) written by ``torch.save``
    feature_stats.json  {"mean": [...], "std": [...]}
"""
import dataclasses
import logging
import pickle
from pathlib import Path

import pydantic
import torch

from audiolog import errors
from audiolog.features import FeatureStats
from audiolog.features import StftConfig
from audiolog.model.core import ModelConfig
from audiolog.model.mtl import MTLModel


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


SCHEMA_VERSION = 1

CONFIG_FILE = 'config.json'
WEIGHTS_FILE = 'model.pt'
STATS_FILE = 'feature_stats.json'


class CheckpointMeta(pydantic.BaseModel):
    """Everything besides the weights needed to run a checkpoint."""

    model_config = pydantic.ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    model: ModelConfig
    features: StftConfig
    event_labels: list[str]
    scene_labels: list[str]


@dataclasses.dataclass
class Checkpoint:
    """Model restored from disk together with its metadata."""

    model: MTLModel
    meta: CheckpointMeta
    stats: FeatureStats


def save_checkpoint(directory: str | Path,
                    model: MTLModel,
                    meta: CheckpointMeta,
                    stats: FeatureStats) -> Path:
    """Writes a checkpoint directory, replacing the files of a previous one."""

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    (directory / CONFIG_FILE).write_text(meta.model_dump_json(indent=2), encoding='utf-8')
    torch.save(model.state_dict(), directory / WEIGHTS_FILE)
    stats.save(directory / STATS_FILE)

    _logger().debug('Saved checkpoint to %s.', directory)

    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    """Restores a checkpoint written by ``save_checkpoint``; the model is put in eval mode.

    Raises:
        CheckpointError: If the directory or one of its files is missing or invalid.
    """

    directory = Path(directory)

    if not directory.is_dir():
        raise errors.CheckpointError(f'{directory}: checkpoint directory does not exist')

    try:
        meta = CheckpointMeta.model_validate_json(
            (directory / CONFIG_FILE).read_text(encoding='utf-8'))
        stats = FeatureStats.load(directory / STATS_FILE)
        state = torch.load(directory / WEIGHTS_FILE, map_location='cpu', weights_only=True)
    except (OSError, EOFError, pickle.UnpicklingError, pydantic.ValidationError,
            RuntimeError) as e:
        raise errors.CheckpointError(f'{directory}: {e}') from e

    if meta.schema_version != SCHEMA_VERSION:
        raise errors.CheckpointError(f'{directory}: schema version {meta.schema_version} is not '
                                     f'supported (expected {SCHEMA_VERSION})')

    if len(stats.mean) != meta.features.n_mels:
        raise errors.CheckpointError(f'{directory}: statistics cover {len(stats.mean)} bins, '
                                     f'features have {meta.features.n_mels}')

    model = MTLModel(meta.model)

    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise errors.CheckpointError(f'{directory}: weights do not match the config: {e}') from e

    model.eval()

    return Checkpoint(model=model, meta=meta, stats=stats)


def import_pretrained_trunk(model: MTLModel, path: str | Path) -> tuple[list[str], list[str]]:
    """Loads trunk weights (patch embed and encoder) from a state dict file.

    Only tensors whose names and shapes match the trunk are taken; the heads keep their
    initialization.

    Returns:
        Names of trunk tensors left untouched and names of file tensors that were ignored.
    """

    try:
        state = torch.load(Path(path), map_location='cpu', weights_only=True)
    except (OSError, EOFError, pickle.UnpicklingError, RuntimeError) as e:
        raise errors.CheckpointError(f'{path}: {e}') from e

    trunk = model.trunk_state_dict()

    accepted = {name: tensor for name, tensor in state.items()
                if name in trunk and trunk[name].shape == tensor.shape}

    model.load_state_dict(accepted, strict=False)

    missing = sorted(set(trunk) - set(accepted))
    unexpected = sorted(set(state) - set(accepted))

    _logger().info('Imported %d trunk tensors from %s (%d missing, %d ignored).',
                   len(accepted), path, len(missing), len(unexpected))

    if missing:
        _logger().warning('Trunk tensors not found in %s: %s', path, missing)

    return missing, unexpected
