"""Contains ingestion of strongly labelled (DCASE-style) datasets and target construction.

Annotation files are tab-separated ``filename, onset, offset, event[, confidence]`` rows; an
optional first line starting with ``filename`` is a header. Scenes come from a sidecar CSV of
``filename,scene`` rows, which also lists the clips without any event.
"""
import csv
import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import torch

from audiolog import errors
from audiolog.data.vocabulary import Vocabulary
from audiolog.features import AudioClip
from audiolog.features import DEFAULT_SAMPLE_RATE
from audiolog.features import load_audio
from audiolog.model.core import Targets


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


# Annotations may overshoot the decoded audio by up to this much.
_DURATION_TOLERANCE_S = 1e-3


@dataclasses.dataclass(frozen=True)
class AnnotatedEvent:
    """Event occurrence on [onset_s, offset_s) with a confidence in [0, 1]."""

    onset_s: float
    offset_s: float
    label: str
    confidence: float = 1.0


@dataclasses.dataclass(frozen=True)
class AnnotatedClip:
    """Audio clip with its scene label and event annotations."""

    filename: str
    clip: AudioClip
    scene: str
    events: tuple[AnnotatedEvent, ...]


@dataclasses.dataclass(frozen=True)
class _AnnotationRow:
    line_number: int
    filename: str
    event: AnnotatedEvent


def _parse_float(value: str, name: str, line_number: int) -> float:

    try:
        parsed = float(value)
    except ValueError as e:
        raise errors.MalformedRow(f'{name} {value!r} is not a number', line_number) from e

    if not math.isfinite(parsed):
        raise errors.MalformedRow(f'{name} {value!r} is not finite', line_number)

    return parsed


def _parse_annotation_line(fields: list[str],
                           line_number: int,
                           event_vocab: Vocabulary) -> _AnnotationRow:

    if len(fields) not in (4, 5):
        raise errors.MalformedRow(f'expected 4 or 5 tab-separated fields, got {len(fields)}',
                                  line_number)

    filename, onset_text, offset_text, label = (field.strip() for field in fields[:4])

    onset = _parse_float(onset_text, 'onset', line_number)
    offset = _parse_float(offset_text, 'offset', line_number)
    confidence = 1.0 if len(fields) == 4 else _parse_float(fields[4], 'confidence', line_number)

    if not filename:
        raise errors.MalformedRow('empty filename', line_number)
    if onset < 0 or offset <= onset:
        raise errors.MalformedRow(f'invalid event span [{onset}, {offset})', line_number)
    if not 0.0 <= confidence <= 1.0:
        raise errors.MalformedRow(f'confidence {confidence} outside [0, 1]', line_number)

    if label not in event_vocab:
        raise errors.UnknownLabel(f'line {line_number}: event {label!r} is not in the vocabulary')

    return _AnnotationRow(line_number=line_number,
                          filename=filename,
                          event=AnnotatedEvent(onset, offset, label, confidence))


def read_annotation_rows(annotation_path: str | Path,
                         event_vocab: Vocabulary) -> list[_AnnotationRow]:
    """Parses and validates every row of an annotation TSV."""

    rows = []
    lines = Path(annotation_path).read_text(encoding='utf-8').splitlines()

    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue

        fields = line.split('\t')
        if not rows and line_number == 1 and fields[0].strip().lower() == 'filename':
            continue

        rows.append(_parse_annotation_line(fields, line_number, event_vocab))

    return rows


def load_scene_map(scene_map_path: str | Path, scene_vocab: Vocabulary) -> dict[str, str]:
    """Reads the ``filename,scene`` sidecar CSV.

    Raises:
        MalformedRow: On rows without exactly two fields or with a repeated filename.
        UnknownLabel: On scenes outside the vocabulary.
    """

    scenes: dict[str, str] = {}

    with open(scene_map_path, encoding='utf-8', newline='') as file:
        for line_number, record in enumerate(csv.reader(file), start=1):
            if not record:
                continue
            if line_number == 1 and record[0].strip().lower() == 'filename':
                continue
            if len(record) != 2:
                raise errors.MalformedRow(f'expected filename,scene, got {len(record)} fields',
                                          line_number)

            filename, scene = record[0].strip(), record[1].strip()
            if filename in scenes:
                raise errors.MalformedRow(f'duplicate entry for {filename}', line_number)
            if scene not in scene_vocab:
                raise errors.UnknownLabel(f'line {line_number}: scene {scene!r} is not in the '
                                          'vocabulary')
            scenes[filename] = scene

    return scenes


def load_strong_labels(annotation_path: str | Path,
                       audio_root: str | Path,
                       scene_map_path: str | Path,
                       event_vocab: Vocabulary,
                       scene_vocab: Vocabulary,
                       sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[AnnotatedClip]:
    """Loads every clip of the scene map together with its validated annotations.

    Raises:
        MalformedRow: On unparsable rows, rows for files without a scene, or events that end
            after the audio.
        MissingAudio: If a listed audio file does not exist.
        UnknownLabel: On events or scenes outside their vocabularies.
    """

    _logger().info('Loading annotations from %s with audio root %s.', annotation_path, audio_root)

    scenes = load_scene_map(scene_map_path, scene_vocab)
    rows = read_annotation_rows(annotation_path, event_vocab)

    events_by_file: dict[str, list[_AnnotationRow]] = {filename: [] for filename in scenes}
    for row in rows:
        if row.filename not in events_by_file:
            raise errors.MalformedRow(f'{row.filename} has no scene entry', row.line_number)
        events_by_file[row.filename].append(row)

    clips = []
    for filename, file_rows in events_by_file.items():
        audio_path = Path(audio_root) / filename
        if not audio_path.is_file():
            raise errors.MissingAudio(f'{audio_path} does not exist')

        clip = load_audio(audio_path, sample_rate)

        for row in file_rows:
            if row.event.offset_s > clip.duration_s + _DURATION_TOLERANCE_S:
                raise errors.MalformedRow(f'event ends at {row.event.offset_s} s, after the '
                                          f'{clip.duration_s:.3f} s of {filename}',
                                          row.line_number)

        clips.append(AnnotatedClip(filename=filename,
                                   clip=clip,
                                   scene=scenes[filename],
                                   events=tuple(row.event for row in file_rows)))

    _logger().info('Loaded %d clips with %d events.', len(clips), len(rows))

    return clips


def _frame_span(event: AnnotatedEvent, frame_rate_hz: float) -> tuple[int, int]:
    return int(round(event.onset_s * frame_rate_hz)), int(round(event.offset_s * frame_rate_hz))


def targets_from_annotations(clip: AnnotatedClip,
                             frame_rate_hz: float,
                             event_vocab: Vocabulary,
                             scene_vocab: Vocabulary,
                             n_frames: int | None = None) -> Targets:
    """Paints event confidences onto a (frames x K_e) matrix over [onset, offset).

    Overlapping events of one class combine by maximum; soft confidences are kept as they are.

    Raises:
        UnknownLabel: If an event or the scene is outside its vocabulary.
    """

    if n_frames is None:
        n_frames = int(math.ceil(clip.clip.duration_s * frame_rate_hz - 1e-9))

    sed = torch.zeros(n_frames, len(event_vocab), dtype=torch.float32)

    for event in clip.events:
        column = event_vocab.index(event.label)
        first, last = _frame_span(event, frame_rate_hz)
        sed[first:last, column] = sed[first:last, column].clamp_min(event.confidence)

    return Targets(sed_targets=sed,
                   scene_target=torch.tensor(scene_vocab.index(clip.scene), dtype=torch.long))


def active_seconds(events: tuple[AnnotatedEvent, ...] | list[AnnotatedEvent],
                   horizon_s: int,
                   event_vocab: Vocabulary,
                   frame_rate_hz: float = 100.0,
                   threshold: float = 0.5) -> np.ndarray:
    """Returns the (seconds x K_e) reference activity of annotated events.

    Events with confidence above ``threshold`` count; a second is active for a class when the
    union of the class's events covers more than half of the second's frames.
    """

    frames_per_second = int(round(frame_rate_hz))
    activity = np.zeros((horizon_s, len(event_vocab)), dtype=bool)

    spans: dict[int, list[tuple[int, int]]] = {}
    for event in events:
        if event.confidence > threshold:
            spans.setdefault(event_vocab.index(event.label), []).append(
                _frame_span(event, frame_rate_hz))

    for column, class_spans in spans.items():
        merged: list[list[int]] = []
        for first, last in sorted(class_spans):
            if merged and first <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], last)
            else:
                merged.append([first, last])

        for second in range(horizon_s):
            lo, hi = second * frames_per_second, (second + 1) * frames_per_second
            covered = sum(max(0, min(hi, last) - max(lo, first)) for first, last in merged)
            activity[second, column] = covered * 2 > frames_per_second

    return activity
