"""Contains audio loading, log-Mel feature extraction and patch tokenization.

Framing convention: frames are centered (reflect padding) on samples ``t * hop_length`` for
``t in [0, ceil(N / hop_length))``, so a one second clip at 32 kHz with hop 320 yields exactly
100 frames and frame ``t`` covers the time ``t / frame_rate_hz``.
"""
import dataclasses
import functools
import json
import logging
import math
from pathlib import Path

import numpy as np
import pydantic
import soundfile as sf
import torch
import torchaudio
from torch import nn

from audiolog import errors


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


DEFAULT_SAMPLE_RATE = 32000

_SUPPORTED_FORMATS = {'.wav': ('WAV', 'WAVEX'), '.flac': ('FLAC',)}


@dataclasses.dataclass(frozen=True)
class AudioClip:
    """Mono audio signal with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    @property
    def duration_s(self) -> float:
        """Length of the clip in seconds."""
        return len(self.samples) / self.sample_rate


class StftConfig(pydantic.BaseModel):
    """Configuration of the log-Mel front-end."""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    sample_rate: int = pydantic.Field(default=DEFAULT_SAMPLE_RATE, gt=0)
    window_size: int = pydantic.Field(default=1024, ge=1)
    hop_length: int = pydantic.Field(default=320, ge=1)
    n_mels: int = pydantic.Field(default=64, ge=1)
    f_min: float = pydantic.Field(default=50.0, ge=0.0)
    f_max: float | None = 14000.0
    log_floor: float = pydantic.Field(default=1e-10, gt=0.0)

    @pydantic.model_validator(mode='after')
    def _check_framing(self) -> 'StftConfig':
        if self.hop_length > self.window_size:
            raise ValueError('hop_length must not exceed window_size')
        if self.sample_rate % self.hop_length:
            raise ValueError(f'sample_rate {self.sample_rate} is not a whole number of '
                             f'{self.hop_length}-sample hops, frames per second must be whole')
        if self.f_min >= self.effective_f_max:
            raise ValueError('f_min must be below the upper mel frequency')
        return self

    @property
    def effective_f_max(self) -> float:
        """Upper edge of the mel filterbank, clamped to the Nyquist frequency."""
        nyquist = self.sample_rate / 2
        return nyquist if self.f_max is None else min(self.f_max, nyquist)

    @property
    def frame_rate_hz(self) -> float:
        """Number of spectrogram frames per second."""
        return self.sample_rate / self.hop_length


@dataclasses.dataclass(frozen=True)
class LogMelSpectrogram:
    """T x F log-energy matrix."""

    values: torch.Tensor
    frame_rate_hz: float
    log_floor: float

    @property
    def T(self) -> int:  # pylint: disable=invalid-name
        """Number of frames."""
        return int(self.values.shape[0])

    @property
    def F(self) -> int:  # pylint: disable=invalid-name
        """Number of mel bins."""
        return int(self.values.shape[1])

    @property
    def floor_value(self) -> float:
        """Value a silent time-frequency cell takes."""
        return math.log(self.log_floor)


@dataclasses.dataclass(frozen=True)
class PatchTokenGrid:
    """Batch of (T/P) x (F/P) grids of D-dimensional tokens, laid out as (B, H, W, D)."""

    tokens: torch.Tensor

    @property
    def height(self) -> int:
        """Grid size along time."""
        return int(self.tokens.shape[1])

    @property
    def width(self) -> int:
        """Grid size along frequency."""
        return int(self.tokens.shape[2])

    @property
    def dim(self) -> int:
        """Token dimension."""
        return int(self.tokens.shape[3])

    @property
    def count(self) -> int:
        """Number of tokens in one grid."""
        return self.height * self.width


def load_audio(path: str | Path, target_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    """Reads a WAV or FLAC file as a mono clip at ``target_rate``.

    Multi-channel audio is downmixed by the channel mean. The result is rescaled only if
    resampling pushed its peak above 1.

    Raises:
        UnsupportedFormat: If the file is neither WAV nor FLAC.
        UnreadableFile: If the file is missing, truncated or otherwise undecodable.
    """

    path = Path(path)
    allowed = _SUPPORTED_FORMATS.get(path.suffix.lower())

    if allowed is None:
        raise errors.UnsupportedFormat(f'{path}: only WAV and FLAC files are supported')

    if not path.is_file():
        raise errors.UnreadableFile(f'{path}: file does not exist')

    try:
        info = sf.info(str(path))
        data, rate = sf.read(str(path), dtype='float32', always_2d=True)
    except (sf.SoundFileError, RuntimeError) as e:
        raise errors.UnreadableFile(f'{path}: {e}') from e

    if info.format not in allowed:
        raise errors.UnsupportedFormat(f'{path}: container {info.format} is not {allowed[0]}')

    mono = data.mean(axis=1)

    if not np.all(np.isfinite(mono)):
        raise errors.UnreadableFile(f'{path}: decoded samples are not finite')

    if rate != target_rate and len(mono) > 0:
        _logger().debug('Resampling %s from %d Hz to %d Hz.', path, rate, target_rate)
        mono = torchaudio.functional.resample(
            torch.from_numpy(mono), orig_freq=rate, new_freq=target_rate).numpy()

    peak = float(np.max(np.abs(mono))) if len(mono) else 0.0
    if peak > 1.0:
        mono = mono / peak

    return AudioClip(samples=mono.astype(np.float32), sample_rate=target_rate)


@functools.lru_cache(maxsize=8)
def _mel_transform(cfg: StftConfig) -> torchaudio.transforms.MelSpectrogram:

    return torchaudio.transforms.MelSpectrogram(
        sample_rate=cfg.sample_rate,
        n_fft=cfg.window_size,
        win_length=cfg.window_size,
        hop_length=cfg.hop_length,
        f_min=cfg.f_min,
        f_max=cfg.effective_f_max,
        n_mels=cfg.n_mels,
        window_fn=torch.hann_window,
        power=2.0,
        center=True,
        pad_mode='reflect',
        mel_scale='htk',
    )


def frame_count(n_samples: int, hop_length: int) -> int:
    """Number of frames produced for ``n_samples`` samples."""
    return -(-n_samples // hop_length)


def compute_logmel(clip: AudioClip, cfg: StftConfig) -> LogMelSpectrogram:
    """Computes ``log(mel_energy + log_floor)`` of a clip.

    Raises:
        EmptyClip: If the clip holds no samples.
        ValueError: If the clip's sample rate differs from the configured one.
    """

    if len(clip.samples) == 0:
        raise errors.EmptyClip('cannot compute features of an empty clip')

    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f'clip sample rate {clip.sample_rate} Hz differs from the configured '
                         f'{cfg.sample_rate} Hz')

    n_frames = frame_count(len(clip.samples), cfg.hop_length)

    waveform = torch.as_tensor(clip.samples, dtype=torch.float32)

    # Reflect padding needs more samples than half a window.
    if len(waveform) <= cfg.window_size // 2:
        waveform = nn.functional.pad(waveform, (0, cfg.window_size // 2 + 1 - len(waveform)))

    with torch.no_grad():
        mel = _mel_transform(cfg)(waveform)

    values = torch.log(mel.T[:n_frames] + cfg.log_floor).contiguous()

    return LogMelSpectrogram(values=values,
                             frame_rate_hz=cfg.frame_rate_hz,
                             log_floor=cfg.log_floor)


def pad_to_patch_multiple(spec: LogMelSpectrogram,
                          patch_size: int,
                          depth: int) -> LogMelSpectrogram:
    """Pads T and F up to the next multiple of ``patch_size * 2 ** depth``.

    The padding is filled with the spectrogram's silence value ``log(log_floor)``; the original
    content stays at the origin. Aligned inputs are returned unchanged.
    """

    if patch_size < 1 or depth < 0:
        raise errors.ShapeMismatch(f'invalid patch size {patch_size} or merge depth {depth}')

    multiple = patch_size * 2 ** depth
    pad_t = -spec.T % multiple
    pad_f = -spec.F % multiple

    if pad_t == 0 and pad_f == 0:
        return spec

    values = nn.functional.pad(spec.values, (0, pad_f, 0, pad_t), value=spec.floor_value)

    return dataclasses.replace(spec, values=values)


class PatchEmbed(nn.Module):
    """Linear P x P patch projection implemented as a strided convolution."""

    def __init__(self, patch_size: int, embed_dim: int, bias: bool = True) -> None:
        super().__init__()

        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.proj = nn.Conv2d(1, embed_dim, kernel_size=patch_size, stride=patch_size, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Maps a (B, T, F) batch of spectrograms to (B, T/P, F/P, D) tokens."""

        _, n_frames, n_bins = x.shape

        if n_frames % self.patch_size or n_bins % self.patch_size:
            raise errors.ShapeMismatch(
                f'spectrogram {n_frames}x{n_bins} is not divisible by patch size {self.patch_size}')

        return self.proj(x.unsqueeze(1)).permute(0, 2, 3, 1)


def patch_embed(spec: LogMelSpectrogram, embed: PatchEmbed) -> PatchTokenGrid:
    """Tokenizes a single spectrogram into a (T/P) x (F/P) grid of D-vectors."""
    return PatchTokenGrid(tokens=embed(spec.values.unsqueeze(0)))


class FeatureStats(pydantic.BaseModel):
    """Per mel-bin standardization statistics computed on the training set."""

    model_config = pydantic.ConfigDict(extra='forbid')

    mean: list[float]
    std: list[float]

    @pydantic.model_validator(mode='after')
    def _check_lengths(self) -> 'FeatureStats':
        if len(self.mean) != len(self.std):
            raise ValueError('mean and std must have the same length')
        if any(s <= 0 for s in self.std):
            raise ValueError('std entries must be positive')
        return self

    def normalize(self, values: torch.Tensor) -> torch.Tensor:
        """Standardizes a (..., F) tensor bin by bin."""

        if values.shape[-1] != len(self.mean):
            raise errors.ShapeMismatch(
                f'feature has {values.shape[-1]} bins, statistics cover {len(self.mean)}')

        mean = torch.tensor(self.mean, dtype=values.dtype)
        std = torch.tensor(self.std, dtype=values.dtype)
        return (values - mean) / std

    def save(self, path: str | Path) -> None:
        """Writes the statistics as ``{"mean": [...], "std": [...]}``."""
        Path(path).write_text(json.dumps(self.model_dump()), encoding='utf-8')

    @classmethod
    def load(cls, path: str | Path) -> 'FeatureStats':
        """Reads statistics written by ``save``."""
        return cls.model_validate_json(Path(path).read_text(encoding='utf-8'))


def compute_feature_stats(specs: list[LogMelSpectrogram], min_std: float = 1e-5) -> FeatureStats:
    """Computes mean and standard deviation of every mel bin over all frames."""

    if not specs:
        raise errors.EmptyDataset('cannot compute feature statistics without spectrograms')

    stacked = torch.cat([spec.values for spec in specs], dim=0).double()

    return FeatureStats(mean=stacked.mean(dim=0).tolist(),
                        std=stacked.std(dim=0, unbiased=False).clamp_min(min_std).tolist())


def prepare_input(spec: LogMelSpectrogram,
                  stats: FeatureStats,
                  patch_size: int,
                  depth: int) -> torch.Tensor:
    """Pads a spectrogram to patch alignment and standardizes it for the model."""
    return stats.normalize(pad_to_patch_multiple(spec, patch_size, depth).values)
