"""Contains a deterministic generator of small scene/event datasets.

Every scene is a coloured noise background with its own spectral slope and mains-like hum. Every
event is a one second signature (a steady tone for even class indices, a rising chirp for odd
ones) tiled over whole seconds, so annotations fall on the one second table grid.
"""
import csv
import logging
from pathlib import Path

import numpy as np
import pydantic
import scipy.signal
import soundfile as sf

from audiolog.data.annotations import AnnotatedClip
from audiolog.data.annotations import AnnotatedEvent
from audiolog.data.vocabulary import Vocabulary
from audiolog.features import AudioClip
from audiolog.features import DEFAULT_SAMPLE_RATE


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


_SCENE_NAMES = ('city_center', 'metro_station', 'residential_area', 'home', 'office', 'park',
                'grocery_store')

_EVENT_NAMES = ('car', 'birds_singing', 'people_talking', 'footsteps', 'brakes_squeaking',
                'children', 'large_vehicle', 'dishes', 'door', 'cutlery', 'bus')

_LOWEST_EVENT_HZ = 400.0
_HIGHEST_EVENT_HZ = 8000.0
_CHIRP_SPAN = 1.25


class SynthConfig(pydantic.BaseModel):
    """Configuration of the synthetic dataset generator."""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    n_clips: int = pydantic.Field(default=8, ge=1)
    clip_len_s: int = pydantic.Field(default=10, ge=1)
    n_scenes: int = pydantic.Field(default=3, ge=2)
    n_events: int = pydantic.Field(default=4, ge=2)
    min_events_per_clip: int = pydantic.Field(default=1, ge=0)
    max_events_per_clip: int = pydantic.Field(default=3, ge=0)
    min_event_len_s: int = pydantic.Field(default=1, ge=1)
    max_event_len_s: int = pydantic.Field(default=3, ge=1)
    sample_rate: int = pydantic.Field(default=DEFAULT_SAMPLE_RATE, gt=0)
    seed: int = 7
    event_amplitude: float = pydantic.Field(default=0.2, gt=0.0, le=1.0)
    background_rms: float = pydantic.Field(default=0.02, ge=0.0, le=1.0)

    @pydantic.model_validator(mode='after')
    def _check_ranges(self) -> 'SynthConfig':
        if self.max_events_per_clip < self.min_events_per_clip:
            raise ValueError('max_events_per_clip must not be below min_events_per_clip')
        if not self.min_event_len_s <= self.max_event_len_s <= self.clip_len_s:
            raise ValueError('event lengths must satisfy min <= max <= clip_len_s')
        if _HIGHEST_EVENT_HZ * _CHIRP_SPAN >= self.sample_rate / 2:
            raise ValueError(f'sample rate {self.sample_rate} Hz is too low for the event '
                             'signatures')
        return self


def _names(pool: tuple[str, ...], count: int, prefix: str) -> tuple[str, ...]:
    return tuple(pool[i] if i < len(pool) else f'{prefix}_{i}' for i in range(count))


def synthetic_vocabularies(cfg: SynthConfig) -> tuple[Vocabulary, Vocabulary]:
    """Returns the (event, scene) vocabularies of a generated dataset."""

    return (Vocabulary(_names(_EVENT_NAMES, cfg.n_events, 'event')),
            Vocabulary(_names(_SCENE_NAMES, cfg.n_scenes, 'scene')))


def event_base_frequency(index: int, n_events: int) -> float:
    """Integer frequency of an event class, log-spaced between 400 Hz and 8 kHz."""

    frequencies = np.geomspace(_LOWEST_EVENT_HZ, _HIGHEST_EVENT_HZ, n_events)
    return float(np.round(frequencies[index]))


def event_signature(index: int, n_events: int, sample_rate: int) -> np.ndarray:
    """One second unit of an event class with unit peak amplitude."""

    t = np.arange(sample_rate) / sample_rate
    f0 = event_base_frequency(index, n_events)

    if index % 2 == 0:
        unit = np.sin(2 * np.pi * f0 * t)
    else:
        unit = scipy.signal.chirp(t, f0=f0, t1=1.0, f1=f0 * _CHIRP_SPAN, method='linear')

    return (unit * scipy.signal.windows.tukey(sample_rate, alpha=0.02)).astype(np.float32)


def scene_background(scene: int,
                     n_scenes: int,
                     n_samples: int,
                     cfg: SynthConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Coloured noise with a scene-specific slope and hum, scaled to ``background_rms``."""

    slopes = np.linspace(-0.5, 2.0, n_scenes)
    hums = np.linspace(60.0, 300.0, n_scenes)

    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / cfg.sample_rate)
    spectrum *= np.maximum(freqs, 20.0) ** (-slopes[scene] / 2)

    noise = np.fft.irfft(spectrum, n=n_samples)
    noise /= max(float(np.sqrt(np.mean(noise ** 2))), 1e-12)

    t = np.arange(n_samples) / cfg.sample_rate
    background = 0.8 * noise + 0.6 * np.sin(2 * np.pi * hums[scene] * t)
    background /= max(float(np.sqrt(np.mean(background ** 2))), 1e-12)

    return background * cfg.background_rms


def _place_events(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:

    n_placed = int(rng.integers(cfg.min_events_per_clip, cfg.max_events_per_clip + 1))
    placements = []

    for _ in range(n_placed):
        event = int(rng.integers(cfg.n_events))
        length = int(rng.integers(cfg.min_event_len_s, cfg.max_event_len_s + 1))
        onset = int(rng.integers(0, cfg.clip_len_s - length + 1))
        placements.append((onset, length, event))

    return placements


def generate_synthetic_dataset(cfg: SynthConfig) -> list[AnnotatedClip]:
    """Generates ``n_clips`` clips with balanced scenes; identical for identical configs."""

    _logger().info('Generating synthetic dataset with config: %s', cfg)

    rng = np.random.default_rng(cfg.seed)
    event_vocab, scene_vocab = synthetic_vocabularies(cfg)
    n_samples = cfg.clip_len_s * cfg.sample_rate

    signatures = [event_signature(i, cfg.n_events, cfg.sample_rate) for i in range(cfg.n_events)]
    scenes = rng.permutation(np.arange(cfg.n_clips) % cfg.n_scenes)

    clips = []
    for i, scene in enumerate(scenes):
        samples = scene_background(int(scene), cfg.n_scenes, n_samples, cfg, rng)

        events = []
        for onset, length, event in _place_events(cfg, rng):
            start = onset * cfg.sample_rate
            samples[start:start + length * cfg.sample_rate] += \
                cfg.event_amplitude * np.tile(signatures[event], length)
            events.append(AnnotatedEvent(onset_s=float(onset),
                                         offset_s=float(onset + length),
                                         label=event_vocab.labels[event]))

        clips.append(AnnotatedClip(
            filename=f'clip_{i:04d}.wav',
            clip=AudioClip(samples=np.clip(samples, -1.0, 1.0).astype(np.float32),
                           sample_rate=cfg.sample_rate),
            scene=scene_vocab.labels[scene],
            events=tuple(sorted(events, key=lambda e: (e.onset_s, e.label)))))

    _logger().info('Generated %d clips with %d events.',
                   len(clips), sum(len(clip.events) for clip in clips))

    return clips


def write_dataset(clips: list[AnnotatedClip],
                  out_dir: str | Path,
                  event_vocab: Vocabulary,
                  scene_vocab: Vocabulary) -> dict[str, Path]:
    """Persists clips as 16-bit WAV files plus the annotation, scene map and vocabulary files.

    Returns:
        Paths keyed like the ``data`` config section: ``annotation_path``, ``audio_root``,
        ``scene_map_path``, ``event_vocab_path`` and ``scene_vocab_path``.
    """

    out_dir = Path(out_dir)
    paths = {'annotation_path': out_dir / 'annotations.tsv',
             'audio_root': out_dir / 'audio',
             'scene_map_path': out_dir / 'scenes.csv',
             'event_vocab_path': out_dir / 'events.txt',
             'scene_vocab_path': out_dir / 'scenes.txt'}

    paths['audio_root'].mkdir(parents=True, exist_ok=True)

    for clip in clips:
        sf.write(paths['audio_root'] / clip.filename, clip.clip.samples, clip.clip.sample_rate,
                 subtype='PCM_16')

    with open(paths['annotation_path'], 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, delimiter='\t', lineterminator='\n')
        writer.writerow(('filename', 'onset', 'offset', 'event_label', 'confidence'))
        for clip in clips:
            writer.writerows((clip.filename, f'{event.onset_s:.3f}', f'{event.offset_s:.3f}',
                              event.label, f'{event.confidence:g}') for event in clip.events)

    with open(paths['scene_map_path'], 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(('filename', 'scene'))
        writer.writerows((clip.filename, clip.scene) for clip in clips)

    event_vocab.save(paths['event_vocab_path'])
    scene_vocab.save(paths['scene_vocab_path'])

    _logger().info('Wrote %d clips to %s.', len(clips), out_dir)

    return paths
