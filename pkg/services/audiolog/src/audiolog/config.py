"""Contains the run configuration composed from hydra YAML files and flag overrides."""
import logging
import os
from pathlib import Path
from typing import Any

import hydra
import omegaconf
import pydantic
from hydra.errors import HydraException

from audiolog import errors
from audiolog.data.synthetic import SynthConfig
from audiolog.features import StftConfig
from audiolog.llm.core import ProviderConfig
from audiolog.model.core import ModelConfig
from audiolog.pipeline import PostprocessConfig
from audiolog.training import TrainConfig


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


CFG_DIR_ENV = 'AUDIOLOG_CFG_DIR'

DEFAULT_CFG_DIR = Path(__file__).resolve().parents[2] / 'cfg'


class DataConfig(pydantic.BaseModel):
    """Locations of a strongly labelled dataset."""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    annotation_path: str | None = None
    audio_root: str | None = None
    scene_map_path: str | None = None
    event_vocab_path: str | None = None
    scene_vocab_path: str | None = None
    validation_fraction: float = pydantic.Field(default=0.25, ge=0.0, lt=1.0)

    def validate_paths(self, keys: tuple[str, ...] | None = None) -> None:
        """Checks that the given (by default all) dataset paths are set and exist.

        Raises:
            ConfigError: Naming the first key that is unset or points nowhere.
        """

        keys = keys or ('annotation_path', 'audio_root', 'scene_map_path', 'event_vocab_path',
                        'scene_vocab_path')

        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise errors.ConfigError(f'data.{key} is not set')
            if not Path(value).exists():
                raise errors.ConfigError(f'data.{key}: {value} does not exist')


class RunConfig(pydantic.BaseModel):
    """Every setting of a run; unknown keys anywhere are rejected."""

    model_config = pydantic.ConfigDict(extra='forbid')

    persist_data_path: str = 'data/'
    features: StftConfig = StftConfig()
    model: ModelConfig = ModelConfig()
    training: TrainConfig = TrainConfig()
    postprocess: PostprocessConfig = PostprocessConfig()
    provider: ProviderConfig = ProviderConfig()
    synth: SynthConfig = SynthConfig()
    data: DataConfig = DataConfig()

    @pydantic.model_validator(mode='after')
    def _sync_alpha(self) -> 'RunConfig':
        if self.model.alpha != self.training.alpha:
            self.model = self.model.model_copy(update={'alpha': self.training.alpha})
        return self


def resolve_config_location(config_path: str | Path | None) -> tuple[Path, str]:
    """Returns the directory and name of the primary config.

    Without an explicit path, ``main.yaml`` of ``$AUDIOLOG_CFG_DIR`` or of the service's ``cfg``
    directory is used.
    """

    if config_path is None:
        return Path(os.environ.get(CFG_DIR_ENV, DEFAULT_CFG_DIR)).resolve(), 'main'

    config_path = Path(config_path)
    if not config_path.is_file():
        raise errors.ConfigError(f'config file {config_path} does not exist')

    return config_path.resolve().parent, config_path.stem


def load_run_config(config_path: str | Path | None = None,
                    overrides: list[str] | None = None) -> tuple[RunConfig, omegaconf.DictConfig]:
    """Composes the config with hydra overrides and validates it.

    Returns:
        The validated config and the composed raw config (for logging).

    Raises:
        ConfigError: If composition fails or the result does not validate.
    """

    config_dir, config_name = resolve_config_location(config_path)

    try:
        with hydra.initialize_config_dir(version_base=None, config_dir=str(config_dir)):
            raw = hydra.compose(config_name=config_name, overrides=overrides or [])
    except (HydraException, omegaconf.errors.OmegaConfBaseException) as e:
        raise errors.ConfigError(f'cannot compose config {config_name} from {config_dir}: '
                                 f'{e}') from e

    container: Any = omegaconf.OmegaConf.to_container(raw, resolve=True)

    try:
        return RunConfig.model_validate(container), raw
    except pydantic.ValidationError as e:
        raise errors.ConfigError(f'invalid configuration: {e}') from e
