"""Contains the joint training harness and evaluation of the scene/event model."""
import dataclasses
import logging
import math
import random
import time
from pathlib import Path

import numpy as np
import pydantic
import torch
from torch.utils.data import DataLoader

from audiolog import errors
from audiolog.data.annotations import AnnotatedClip
from audiolog.data.annotations import active_seconds
from audiolog.data.annotations import targets_from_annotations
from audiolog.data.vocabulary import Vocabulary
from audiolog.features import FeatureStats
from audiolog.features import LogMelSpectrogram
from audiolog.features import StftConfig
from audiolog.features import compute_feature_stats
from audiolog.features import compute_logmel
from audiolog.features import frame_count
from audiolog.features import prepare_input
from audiolog.metrics import MetricsBundle
from audiolog.metrics import SegmentCounts
from audiolog.metrics import accuracy
from audiolog.metrics import activity_grid
from audiolog.metrics import count_segments
from audiolog.model.checkpoint import CheckpointMeta
from audiolog.model.checkpoint import save_checkpoint
from audiolog.model.core import Targets
from audiolog.model.mtl import MTLModel
from audiolog.model.mtl import mtl_loss
from audiolog.pipeline import AudioLogPipeline
from audiolog.pipeline import PostprocessConfig
from audiolog.pipeline import assemble_table
from audiolog.pipeline import segment_long_audio
from audiolog.table import EventTable

REPORT_FILE = 'train_report.jsonl'
SUMMARY_FILE = 'train_summary.json'


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


class TrainConfig(pydantic.BaseModel):
    """Configuration of joint training.

    A learning rate of zero is accepted and leaves all parameters untouched.
    """

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    learning_rate: float = pydantic.Field(default=1e-4, ge=0.0)
    batch_size: int = pydantic.Field(default=32, ge=1)
    epochs: int = pydantic.Field(default=50, ge=1)
    weight_decay: float = pydantic.Field(default=0.01, ge=0.0)
    seed: int = 0
    alpha: float = pydantic.Field(default=0.7, ge=0.0)
    checkpoint_dir: str = 'checkpoints'
    patience: int = pydantic.Field(default=10, ge=1)
    freeze_trunk: bool = False
    deterministic: bool = False
    max_grad_norm: float | None = pydantic.Field(default=None, gt=0.0)


class EpochRecord(pydantic.BaseModel):
    """One line of the training report."""

    epoch: int
    loss: float
    sed_loss: float
    scene_loss: float
    acc: float | None
    er: float | None
    f1: float
    wall_time_s: float


class TrainReport(pydantic.BaseModel):
    """Loss curves, validation metrics and the outcome of a training run."""

    alpha: float
    learning_rate: float
    seed: int
    epochs: list[EpochRecord] = []
    best_epoch: int | None = None
    best_f1: float | None = None
    stopped_early: bool = False
    wall_time_s: float = 0.0
    checkpoint_dir: str | None = None

    @property
    def losses(self) -> list[float]:
        """Mean training loss of every epoch."""
        return [record.loss for record in self.epochs]


@dataclasses.dataclass(frozen=True)
class AudioDataset:
    """Annotated clips with everything needed to turn them into model inputs."""

    clips: list[AnnotatedClip]
    event_vocab: Vocabulary
    scene_vocab: Vocabulary
    stft_cfg: StftConfig
    postprocess_cfg: PostprocessConfig
    stats: FeatureStats

    def __len__(self) -> int:
        return len(self.clips)


@dataclasses.dataclass(frozen=True)
class TrainingExample:
    """Padded, standardized segment spectrogram (T, F) and its targets."""

    features: torch.Tensor
    targets: Targets
    filename: str
    segment_index: int


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seeds python, numpy and torch; optionally forces deterministic single-threaded kernels."""

    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)

    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _segment_spectrograms(
        clip: AnnotatedClip,
        stft_cfg: StftConfig,
        postprocess_cfg: PostprocessConfig) -> list[tuple[float, int, LogMelSpectrogram]]:
    """(segment start, true frame count, spectrogram) of every segment of a clip."""

    return [(segment.start_s,
             frame_count(int(round(segment.true_length_s * segment.sample_rate)),
                         stft_cfg.hop_length),
             compute_logmel(segment.clip, stft_cfg))
            for segment in segment_long_audio(clip.clip, postprocess_cfg)]


def prepare_dataset(clips: list[AnnotatedClip],
                    event_vocab: Vocabulary,
                    scene_vocab: Vocabulary,
                    stft_cfg: StftConfig,
                    postprocess_cfg: PostprocessConfig,
                    stats: FeatureStats | None = None) -> AudioDataset:
    """Bundles clips with their feature setup, computing feature statistics when none are given.

    Statistics cover the real frames of every segment, as seen by the model at inference time.
    """

    if stats is None:
        if not clips:
            raise errors.EmptyDataset('cannot compute feature statistics of an empty dataset')

        specs = [dataclasses.replace(spec, values=spec.values[:n_true])
                 for clip in clips
                 for _, n_true, spec in _segment_spectrograms(clip, stft_cfg, postprocess_cfg)]
        stats = compute_feature_stats(specs)

    return AudioDataset(clips=clips,
                        event_vocab=event_vocab,
                        scene_vocab=scene_vocab,
                        stft_cfg=stft_cfg,
                        postprocess_cfg=postprocess_cfg,
                        stats=stats)


def build_training_examples(dataset: AudioDataset, model: MTLModel) -> list[TrainingExample]:
    """Cuts every clip into inference-sized segments paired with frame-wise targets.

    Targets beyond a segment's real audio are zero, like the silence the input is padded with.
    """

    frame_rate = dataset.stft_cfg.frame_rate_hz
    examples = []

    for clip in dataset.clips:
        segments = _segment_spectrograms(clip, dataset.stft_cfg, dataset.postprocess_cfg)
        last_start = int(round(segments[-1][0] * frame_rate))

        full = targets_from_annotations(clip, frame_rate, dataset.event_vocab,
                                        dataset.scene_vocab,
                                        n_frames=last_start + segments[-1][1])

        for index, (start_s, n_true, spec) in enumerate(segments):
            features = prepare_input(spec, dataset.stats, model.cfg.patch_size,
                                     model.cfg.merge_depth)

            offset = int(round(start_s * frame_rate))
            sed = torch.zeros(features.shape[0], len(dataset.event_vocab))
            painted = full.sed_targets[offset:offset + n_true]
            sed[:len(painted)] = painted

            examples.append(TrainingExample(features=features,
                                            targets=Targets(sed_targets=sed,
                                                            scene_target=full.scene_target),
                                            filename=clip.filename,
                                            segment_index=index))

    return examples


def _collate(batch: list[TrainingExample]) -> tuple[torch.Tensor, Targets]:
    return (torch.stack([example.features for example in batch]),
            Targets.stack([example.targets for example in batch]))


def split_clips(clips: list[AnnotatedClip],
                validation_fraction: float,
                seed: int) -> tuple[list[AnnotatedClip], list[AnnotatedClip]]:
    """Splits clips into training and validation lists by a seeded shuffle.

    The validation list is empty when the fraction leaves no clip for it, or all of them.
    """

    n_val = int(math.floor(len(clips) * validation_fraction))
    if n_val == 0 or n_val >= len(clips):
        return list(clips), []

    val_ids = set(np.random.default_rng(seed).permutation(len(clips))[:n_val].tolist())

    return ([clip for i, clip in enumerate(clips) if i not in val_ids],
            [clip for i, clip in enumerate(clips) if i in val_ids])


def reference_table(clip: AnnotatedClip, dataset: AudioDataset) -> EventTable:
    """Per-second table of a clip's annotations, in the shape the pipeline emits."""

    horizon_s = int(math.floor(clip.clip.duration_s + 1e-9))
    activity = active_seconds(clip.events, horizon_s, dataset.event_vocab,
                              frame_rate_hz=dataset.stft_cfg.frame_rate_hz)

    return assemble_table([dataset.scene_vocab.index(clip.scene)] * horizon_s,
                          activity,
                          dataset.scene_vocab.labels,
                          dataset.event_vocab.labels,
                          duration_s=clip.clip.duration_s)


def evaluate(model: MTLModel, dataset: AudioDataset) -> MetricsBundle:
    """Scene accuracy over segments and segment-based ER/F1 over one second segments.

    Raises:
        EmptyDataset: If the dataset holds no clip.
    """

    if not dataset.clips:
        raise errors.EmptyDataset('cannot evaluate on an empty dataset')

    pipeline = AudioLogPipeline(model, dataset.stft_cfg, dataset.stats, dataset.postprocess_cfg,
                                dataset.scene_vocab.labels, dataset.event_vocab.labels)

    counts = SegmentCounts()
    pred_scenes: list[int] = []
    ref_scenes: list[int] = []

    for clip in dataset.clips:
        analysis = pipeline.analyze(clip.clip)
        horizon_s = int(math.floor(clip.clip.duration_s + 1e-9))

        counts += count_segments(
            activity_grid(reference_table(clip, dataset), horizon_s, dataset.event_vocab.labels),
            activity_grid(analysis.table, horizon_s, dataset.event_vocab.labels))

        pred_scenes.extend(analysis.segment_scenes)
        ref_scenes.extend([dataset.scene_vocab.index(clip.scene)] * len(analysis.segment_scenes))

    return MetricsBundle.from_counts(counts, acc=accuracy(pred_scenes, ref_scenes))


def _check_compatible(model: MTLModel, dataset: AudioDataset) -> None:

    if model.cfg.num_event_classes != len(dataset.event_vocab) or \
            model.cfg.num_scene_classes != len(dataset.scene_vocab):
        raise errors.VocabularyMismatch(
            f'model has {model.cfg.num_event_classes} events and {model.cfg.num_scene_classes} '
            f'scenes, dataset {len(dataset.event_vocab)} and {len(dataset.scene_vocab)}')

    if len(dataset.stats.mean) != dataset.stft_cfg.n_mels:
        raise errors.ShapeMismatch('feature statistics do not match the number of mel bins')


def _write_report(report: TrainReport, directory: Path) -> None:

    directory.mkdir(parents=True, exist_ok=True)

    with open(directory / REPORT_FILE, 'w', encoding='utf-8') as file:
        for record in report.epochs:
            file.write(record.model_dump_json() + '\n')

    (directory / SUMMARY_FILE).write_text(report.model_dump_json(indent=2), encoding='utf-8')


def fit(model: MTLModel,
        dataset: AudioDataset,
        cfg: TrainConfig,
        validation: AudioDataset | None = None) -> TrainReport:
    """Trains the model with AdamW on the joint loss.

    After every epoch the model is evaluated on ``validation`` (the training set when none is
    given); the checkpoint with the best event F1 is written to ``cfg.checkpoint_dir`` and
    training stops after ``cfg.patience`` epochs without improvement. The report is written next
    to the checkpoint as JSON lines plus a summary.

    Raises:
        EmptyDataset: If the dataset holds no clip.
        DivergedTraining: If a batch loss becomes non-finite.
    """

    _logger().info('Initializing training with config: %s', cfg)

    if not dataset.clips:
        raise errors.EmptyDataset('cannot train on an empty dataset')

    _check_compatible(model, dataset)

    seed_everything(cfg.seed, cfg.deterministic)

    examples = build_training_examples(dataset, model)
    if validation is None:
        validation = dataset

    loader = DataLoader(examples,  # type: ignore[arg-type]
                        batch_size=cfg.batch_size,
                        shuffle=True,
                        collate_fn=_collate,
                        num_workers=0,
                        generator=torch.Generator().manual_seed(cfg.seed))

    for parameter in model.trunk_parameters():
        parameter.requires_grad_(not cfg.freeze_trunk)

    optimizer = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad],
                                  lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)

    checkpoint_dir = Path(cfg.checkpoint_dir)
    meta = CheckpointMeta(model=model.cfg.model_copy(update={'alpha': cfg.alpha}),
                          features=dataset.stft_cfg,
                          event_labels=list(dataset.event_vocab.labels),
                          scene_labels=list(dataset.scene_vocab.labels))

    report = TrainReport(alpha=cfg.alpha, learning_rate=cfg.learning_rate, seed=cfg.seed,
                         checkpoint_dir=str(checkpoint_dir))

    _logger().info('Training on %d segments from %d clips, validating on %d clips.',
                   len(examples), len(dataset), len(validation))

    started = time.perf_counter()
    since_best = 0

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        sums = np.zeros(3)

        for step, (features, targets) in enumerate(loader):
            optimizer.zero_grad()
            loss = mtl_loss(model(features), targets, cfg.alpha)

            if not torch.isfinite(loss.total):
                diagnostics = {'loss': float(loss.total), 'sed_loss': float(loss.sed),
                               'scene_loss': float(loss.scene)}
                _logger().error('Training diverged at epoch %d, step %d: %s',
                                epoch, step, diagnostics)
                raise errors.DivergedTraining('non-finite training loss', epoch, step, diagnostics)

            loss.total.backward()

            if cfg.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)

            optimizer.step()

            sums += len(features) * np.array([loss.total.item(), loss.sed.item(),
                                              loss.scene.item()])

        metrics = evaluate(model, validation)
        mean = sums / len(examples)

        record = EpochRecord(epoch=epoch, loss=mean[0], sed_loss=mean[1], scene_loss=mean[2],
                             acc=metrics.acc, er=metrics.er, f1=metrics.f1,
                             wall_time_s=time.perf_counter() - started)
        report.epochs.append(record)

        _logger().info('Epoch %d: loss %.4f (sed %.4f, scene %.4f), acc %s, er %s, f1 %.3f',
                       epoch, record.loss, record.sed_loss, record.scene_loss,
                       record.acc, record.er, record.f1)

        if report.best_f1 is None or metrics.f1 > report.best_f1:
            report.best_f1 = metrics.f1
            report.best_epoch = epoch
            since_best = 0
            save_checkpoint(checkpoint_dir, model, meta, dataset.stats)
        else:
            since_best += 1

        if since_best >= cfg.patience:
            _logger().info('No F1 improvement for %d epochs, stopping.', since_best)
            report.stopped_early = True
            break

    report.wall_time_s = time.perf_counter() - started

    _write_report(report, checkpoint_dir)

    _logger().info('Training finished after %.1f s; best F1 %.3f at epoch %s.',
                   report.wall_time_s, report.best_f1, report.best_epoch)

    return report
