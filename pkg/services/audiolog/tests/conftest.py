"""Shared fixtures: tiny model configs and small synthetic datasets."""
import pytest
import torch

from audiolog.data.synthetic import SynthConfig
from audiolog.data.synthetic import generate_synthetic_dataset
from audiolog.data.synthetic import synthetic_vocabularies
from audiolog.features import StftConfig
from audiolog.model.core import ModelConfig
from audiolog.pipeline import PostprocessConfig
from audiolog.training import AudioDataset
from audiolog.training import prepare_dataset


def tiny_model_config(num_event_classes: int = 2,
                      num_scene_classes: int = 2,
                      embed_dim: int = 8,
                      patch_size: int = 2) -> ModelConfig:
    """Smallest useful encoder: one block and one head per group."""

    return ModelConfig(patch_size=patch_size,
                       embed_dim=embed_dim,
                       depths=(1, 1, 1, 1),
                       num_heads=(1, 1, 1, 1),
                       window_size=4,
                       num_event_classes=num_event_classes,
                       num_scene_classes=num_scene_classes)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def small_synth_cfg() -> SynthConfig:
    return SynthConfig(n_clips=4, clip_len_s=3, n_scenes=2, n_events=2,
                       min_events_per_clip=1, max_events_per_clip=2,
                       min_event_len_s=1, max_event_len_s=2, seed=3)


@pytest.fixture
def small_stft_cfg() -> StftConfig:
    return StftConfig(n_mels=32)


@pytest.fixture
def small_postprocess_cfg() -> PostprocessConfig:
    return PostprocessConfig(segment_len_s=3.0, segment_hop_s=3.0, median_window=3)


@pytest.fixture
def small_dataset(small_synth_cfg: SynthConfig,
                  small_stft_cfg: StftConfig,
                  small_postprocess_cfg: PostprocessConfig) -> AudioDataset:
    clips = generate_synthetic_dataset(small_synth_cfg)
    event_vocab, scene_vocab = synthetic_vocabularies(small_synth_cfg)
    return prepare_dataset(clips, event_vocab, scene_vocab, small_stft_cfg, small_postprocess_cfg)


@pytest.fixture(autouse=True)
def _torch_state():
    threads = torch.get_num_threads()
    torch.manual_seed(0)
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(threads)
