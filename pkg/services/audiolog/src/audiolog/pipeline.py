"""Contains long-audio inference: segmentation, post-processing and table assembly."""
import dataclasses
import logging
import math
from typing import Literal
from typing import Sequence

import numpy as np
import pydantic
import scipy.ndimage
import torch

from audiolog import errors
from audiolog.features import AudioClip
from audiolog.features import FeatureStats
from audiolog.features import StftConfig
from audiolog.features import compute_logmel
from audiolog.features import frame_count
from audiolog.features import prepare_input
from audiolog.model.mtl import MTLModel
from audiolog.table import EventRow
from audiolog.table import EventTable


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


class PostprocessConfig(pydantic.BaseModel):
    """Configuration of segmentation and of the frame-to-second post-processing."""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    threshold: float = pydantic.Field(default=0.5, gt=0.0, lt=1.0)
    median_window: int = pydantic.Field(default=7, ge=1)
    segment_len_s: float = pydantic.Field(default=10.0, gt=0.0)
    segment_hop_s: float = pydantic.Field(default=10.0, gt=0.0)
    resolution_s: Literal[1] = 1
    scene_smoothing: bool = False
    batch_size: int = pydantic.Field(default=8, ge=1)

    @pydantic.model_validator(mode='after')
    def _check_windows(self) -> 'PostprocessConfig':
        if self.median_window % 2 == 0:
            raise ValueError('median_window must be odd')
        if self.segment_hop_s > self.segment_len_s:
            raise ValueError('segment_hop_s must not exceed segment_len_s')
        return self


@dataclasses.dataclass(frozen=True)
class AudioSegment:
    """Fixed-length piece of a longer clip; samples beyond the true length are zeros."""

    index: int
    start_s: float
    samples: np.ndarray
    sample_rate: int
    true_length_s: float

    @property
    def end_s(self) -> float:
        """End of the real audio inside the segment, in clip time."""
        return self.start_s + self.true_length_s

    @property
    def clip(self) -> AudioClip:
        """The padded segment as a clip."""
        return AudioClip(samples=self.samples, sample_rate=self.sample_rate)


def segment_long_audio(clip: AudioClip, cfg: PostprocessConfig) -> list[AudioSegment]:
    """Cuts a clip into ``segment_len_s`` pieces every ``segment_hop_s`` seconds.

    The last segment is zero-padded to full length and records its true length.

    Raises:
        EmptyClip: If the clip holds no samples.
    """

    n_samples = len(clip.samples)
    if n_samples == 0:
        raise errors.EmptyClip('cannot segment an empty clip')

    seg_len = int(round(cfg.segment_len_s * clip.sample_rate))
    hop = int(round(cfg.segment_hop_s * clip.sample_rate))

    n_segments = 1 if n_samples <= seg_len else 1 + -(-(n_samples - seg_len) // hop)

    segments = []
    for index in range(n_segments):
        start = index * hop
        piece = clip.samples[start:start + seg_len]
        samples = np.zeros(seg_len, dtype=np.float32)
        samples[:len(piece)] = piece
        segments.append(AudioSegment(index=index,
                                     start_s=start / clip.sample_rate,
                                     samples=samples,
                                     sample_rate=clip.sample_rate,
                                     true_length_s=len(piece) / clip.sample_rate))

    return segments


def binarize_and_smooth(sed_probs: np.ndarray,
                        frame_rate_hz: float,
                        cfg: PostprocessConfig) -> np.ndarray:
    """Turns (frames x classes) probabilities into (seconds x classes) activity.

    Each class is median filtered over ``median_window`` frames, thresholded with a strict ``>``
    and pooled per second: a second is active when more than half of its frames are. Only whole
    seconds are returned.
    """

    frames_per_second = frame_rate_hz * cfg.resolution_s
    if not math.isclose(frames_per_second, round(frames_per_second)):
        raise ValueError(f'frame rate {frame_rate_hz} Hz gives no whole frame count per second')
    frames_per_second = int(round(frames_per_second))

    probs = np.asarray(sed_probs, dtype=np.float64)
    if probs.ndim != 2:
        raise errors.ShapeMismatch(f'expected (frames, classes) probabilities, got {probs.shape}')

    smoothed = scipy.ndimage.median_filter(probs, size=(cfg.median_window, 1), mode='nearest')
    active = smoothed > cfg.threshold

    n_seconds = active.shape[0] // frames_per_second
    per_second = active[:n_seconds * frames_per_second].reshape(
        n_seconds, frames_per_second, active.shape[1])

    return per_second.sum(axis=1) * 2 > frames_per_second


def _segment_span_s(index: int, cfg: PostprocessConfig) -> tuple[float, float]:
    start = index * cfg.segment_hop_s
    return start, start + cfg.segment_len_s


def _majority_filter(labels: np.ndarray) -> np.ndarray:
    """Width-3 majority vote; a window without majority keeps its centre label."""

    smoothed = labels.copy()
    for i in range(1, len(labels) - 1):
        left, centre, right = labels[i - 1:i + 2]
        if left == right and left != centre:
            smoothed[i] = left
    return smoothed


def scene_per_second(scene_logits: np.ndarray,
                     horizon_s: int,
                     cfg: PostprocessConfig) -> np.ndarray:
    """Assigns every second the argmax scene of the segment covering it.

    ``scene_logits`` is (segments x K_s) in segment order. A second is covered by the latest
    segment starting at or before it; ties between logits go to the lowest class index.

    Raises:
        CoverageGap: If some second in ``[0, horizon_s)`` is not covered by any segment.
    """

    logits = np.asarray(scene_logits)
    segment_scenes = np.argmax(logits, axis=1) if len(logits) else np.zeros(0, dtype=np.int64)

    if cfg.scene_smoothing and len(segment_scenes) >= 3:
        segment_scenes = _majority_filter(segment_scenes)

    scenes = np.empty(horizon_s, dtype=np.int64)
    for second in range(horizon_s):
        index = min(int(second // cfg.segment_hop_s), len(segment_scenes) - 1)

        if index < 0 or second >= _segment_span_s(index, cfg)[1]:
            raise errors.CoverageGap(f'second {second} is not covered by any segment')

        scenes[second] = segment_scenes[index]

    return scenes


def assemble_table(scenes: Sequence[int],
                   activity: np.ndarray,
                   scene_labels: Sequence[str],
                   event_labels: Sequence[str],
                   duration_s: float | None = None) -> EventTable:
    """Emits one row per (second, active event) carrying that second's scene.

    Raises:
        VocabularyMismatch: If class counts or indices disagree with the label lists.
        LengthMismatch: If scenes and activity cover different horizons.
    """

    activity = np.asarray(activity, dtype=bool)

    if activity.ndim != 2 or activity.shape[1] != len(event_labels):
        raise errors.VocabularyMismatch(
            f'activity of shape {activity.shape} does not match {len(event_labels)} events')

    if len(scenes) != activity.shape[0]:
        raise errors.LengthMismatch(
            f'{len(scenes)} scene seconds for {activity.shape[0]} activity seconds')

    if any(not 0 <= scene < len(scene_labels) for scene in scenes):
        raise errors.VocabularyMismatch(f'scene index outside the {len(scene_labels)} labels')

    rows = [EventRow(start_s=int(second),
                     end_s=int(second) + 1,
                     scene=scene_labels[scenes[second]],
                     event=event_labels[event])
            for second, event in zip(*np.nonzero(activity))]

    return EventTable.from_rows(rows, activity.shape[0] if duration_s is None else duration_s)


@dataclasses.dataclass(frozen=True)
class ClipAnalysis:
    """Table of a clip plus the unsmoothed argmax scene index of each of its segments."""

    table: EventTable
    segment_scenes: tuple[int, ...]


class AudioLogPipeline:
    """Runs a trained model over long audio and produces the scene/event table."""

    def __init__(self,
                 model: MTLModel,
                 stft_cfg: StftConfig,
                 stats: FeatureStats,
                 postprocess_cfg: PostprocessConfig,
                 scene_labels: Sequence[str],
                 event_labels: Sequence[str]) -> None:

        _logger().info('Initializing AudioLogPipeline with config: %s', postprocess_cfg)

        if len(scene_labels) != model.cfg.num_scene_classes or \
                len(event_labels) != model.cfg.num_event_classes:
            raise errors.VocabularyMismatch('label lists do not match the model class counts')

        self._model = model
        self._stft_cfg = stft_cfg
        self._stats = stats
        self._cfg = postprocess_cfg
        self._scene_labels = list(scene_labels)
        self._event_labels = list(event_labels)

    def predict_segments(self,
                         segments: list[AudioSegment]) -> tuple[list[np.ndarray], np.ndarray]:
        """Returns per-segment event probabilities over true frames and stacked scene logits."""

        inputs = [prepare_input(compute_logmel(segment.clip, self._stft_cfg), self._stats,
                                self._model.cfg.patch_size, self._model.cfg.merge_depth)
                  for segment in segments]

        sed_probs: list[np.ndarray] = []
        scene_logits: list[np.ndarray] = []

        self._model.eval()
        with torch.no_grad():
            for start in range(0, len(inputs), self._cfg.batch_size):
                batch = torch.stack(inputs[start:start + self._cfg.batch_size])
                pred = self._model(batch)
                sed_probs.extend(pred.sed_probs.numpy())
                scene_logits.extend(pred.scene_logits.numpy())

        true_frames = [frame_count(int(round(segment.true_length_s * segment.sample_rate)),
                                   self._stft_cfg.hop_length) for segment in segments]

        return ([probs[:n] for probs, n in zip(sed_probs, true_frames)],
                np.stack(scene_logits))

    def _clip_frames(self,
                     segments: list[AudioSegment],
                     sed_probs: list[np.ndarray],
                     horizon_s: int) -> np.ndarray:
        """Places segment probabilities on one clip-level frame grid.

        Overlapping frames take the later segment; frames no segment reaches stay at zero.
        """

        frame_rate = self._stft_cfg.frame_rate_hz
        offsets = [int(round(segment.start_s * frame_rate)) for segment in segments]

        n_frames = max([int(round(horizon_s * frame_rate))] +
                       [offset + len(probs) for offset, probs in zip(offsets, sed_probs)])

        frames = np.zeros((n_frames, len(self._event_labels)))
        for offset, probs in zip(offsets, sed_probs):
            frames[offset:offset + len(probs)] = probs

        return frames

    def process(self, clip: AudioClip) -> EventTable:
        """Builds the per-second scene/event table of a clip."""
        return self.analyze(clip).table

    def analyze(self, clip: AudioClip) -> ClipAnalysis:
        """Builds the table of a clip and keeps the scene decided for every segment."""

        horizon_s = int(math.floor(clip.duration_s + 1e-9))

        _logger().info('Processing %.2f s of audio (%d table seconds).', clip.duration_s, horizon_s)

        segments = segment_long_audio(clip, self._cfg)
        sed_probs, scene_logits = self.predict_segments(segments)

        activity = binarize_and_smooth(self._clip_frames(segments, sed_probs, horizon_s),
                                       self._stft_cfg.frame_rate_hz, self._cfg)[:horizon_s]

        scenes = scene_per_second(scene_logits, horizon_s, self._cfg)

        table = assemble_table(scenes, activity, self._scene_labels, self._event_labels,
                               duration_s=clip.duration_s)

        _logger().debug('Assembled table with %d rows from %d segments.',
                        len(table), len(segments))

        return ClipAnalysis(table=table,
                            segment_scenes=tuple(int(s) for s in np.argmax(scene_logits, axis=1)))
