"""Contains the command-line entry points: synth, train, infer, log and eval.

Exit codes:
    0  success
    1  unexpected failure
    2  invalid configuration or input
    3  training diverged
    4  checkpoint or audio cannot be used
    5  the LLM provider failed after all retries

Diagnostics go to stderr and to the log file; stdout carries only command data.
"""
import argparse
import json
import logging
import logging.config
import math
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Callable

import omegaconf

from audiolog import errors
from audiolog.config import RunConfig
from audiolog.config import load_run_config
from audiolog.data.annotations import load_strong_labels
from audiolog.data.synthetic import generate_synthetic_dataset
from audiolog.data.synthetic import synthetic_vocabularies
from audiolog.data.synthetic import write_dataset
from audiolog.data.vocabulary import Vocabulary
from audiolog.data.vocabulary import load_vocabulary
from audiolog.features import load_audio
from audiolog.llm.core import TEMPLATES
from audiolog.llm.core import get_template
from audiolog.llm.service import AudioLogService
from audiolog.llm.service import save_result
from audiolog.metrics import MetricsBundle
from audiolog.metrics import accuracy
from audiolog.metrics import segment_er_f1
from audiolog.model.checkpoint import import_pretrained_trunk
from audiolog.model.checkpoint import load_checkpoint
from audiolog.model.mtl import MTLModel
from audiolog.pipeline import AudioLogPipeline
from audiolog.table import TABLE_FORMATS
from audiolog.table import TableFormat
from audiolog.table import merge_contiguous
from audiolog.table import read_table
from audiolog.table import serialize_table
from audiolog.table import table_format_for
from audiolog.training import evaluate
from audiolog.training import fit
from audiolog.training import prepare_dataset
from audiolog.training import seed_everything
from audiolog.training import split_clips


def _logger() -> logging.Logger:
    return logging.getLogger('audiolog')


EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_MODEL = 4
EXIT_PROVIDER = 5

_EXIT_CODES: list[tuple[type[Exception], int]] = [
    (errors.DivergedTraining, EXIT_DIVERGED),
    (errors.ProviderError, EXIT_PROVIDER),
    (errors.CheckpointError, EXIT_MODEL),
    (errors.UnreadableFile, EXIT_MODEL),
    (errors.UnsupportedFormat, EXIT_MODEL),
    (errors.EmptyClip, EXIT_MODEL),
    (errors.ShapeMismatch, EXIT_MODEL),
    (errors.ConfigError, EXIT_INPUT),
    (errors.MalformedTable, EXIT_INPUT),
    (errors.MalformedRow, EXIT_INPUT),
    (errors.MissingAudio, EXIT_INPUT),
    (errors.UnknownLabel, EXIT_INPUT),
    (errors.VocabularyMismatch, EXIT_INPUT),
    (errors.LengthMismatch, EXIT_INPUT),
    (errors.EmptyInput, EXIT_INPUT),
    (errors.EmptyReference, EXIT_INPUT),
    (errors.EmptyDataset, EXIT_INPUT),
]


def exit_code_for(error: Exception) -> int:
    """Maps an exception to the documented exit code."""

    for error_type, code in _EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return EXIT_UNEXPECTED


def _configure_logging(persist_data_path: str) -> None:

    log_dir = os.path.join(persist_data_path, 'log')
    os.makedirs(log_dir, exist_ok=True)

    logging.config.dictConfig({
        'version': 1,
        'disable_existing_loggers': False,
        'loggers': {
            'root': {
                'level': 'WARNING',
                'handlers': ['console', 'file']
            },
            'audiolog': {
                'level': 'DEBUG',
                'handlers': ['console', 'file'],
                'propagate': False
            }
        },
        'handlers': {
            'console': {
                'class': 'logging.StreamHandler',
                'level': 'INFO',
                'formatter': 'default',
                'stream': 'ext://sys.stderr'
            },
            'file': {
                'class': 'logging.handlers.RotatingFileHandler',
                'level': 'DEBUG',
                'formatter': 'default',
                'filename': os.path.join(log_dir,
                                         f'{datetime.now().strftime("%Y-%m-%d_%H-%M-%S")}.log'),
                'maxBytes': 5_000_000,
                'backupCount': 5,
                'encoding': 'utf-8',
            }
        },
        'formatters': {
            'default': {
                'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            }
        }
    })


def _flag_overrides(args: argparse.Namespace) -> list[str]:
    """Hydra overrides from the dedicated flags; they win over ``--override`` entries."""

    overrides = dict(item.split('=', 1) for item in args.override if '=' in item)

    if args.alpha is not None:
        overrides['training.alpha'] = str(args.alpha)
    if args.threshold is not None:
        overrides['postprocess.threshold'] = str(args.threshold)
    if args.segment_len is not None:
        overrides['postprocess.segment_len_s'] = str(args.segment_len)
        overrides['postprocess.segment_hop_s'] = str(args.segment_len)
    if args.seed is not None:
        overrides['training.seed'] = str(args.seed)
        overrides['synth.seed'] = str(args.seed)
    if args.deterministic:
        overrides['training.deterministic'] = 'true'
    if args.provider is not None:
        overrides['provider'] = args.provider

    return [f'{key}={value}' for key, value in overrides.items()]


def _emit(payload: str) -> None:
    sys.stdout.write(payload if payload.endswith('\n') else payload + '\n')
    sys.stdout.flush()


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Generates the synthetic dataset and prints the written paths."""

    clips = generate_synthetic_dataset(cfg.synth)
    event_vocab, scene_vocab = synthetic_vocabularies(cfg.synth)

    paths = write_dataset(clips, args.out_dir, event_vocab, scene_vocab)

    _emit(json.dumps({key: str(path) for key, path in paths.items()}, indent=2))
    return EXIT_OK


def _class_counts_from(cfg: RunConfig,
                       event_vocab: Vocabulary,
                       scene_vocab: Vocabulary) -> RunConfig:

    if (cfg.model.num_event_classes, cfg.model.num_scene_classes) != \
            (len(event_vocab), len(scene_vocab)):
        _logger().info('Setting model class counts to the vocabularies: %d events, %d scenes.',
                       len(event_vocab), len(scene_vocab))

    return cfg.model_copy(update={'model': cfg.model.model_copy(
        update={'num_event_classes': len(event_vocab), 'num_scene_classes': len(scene_vocab)})})


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Trains on the configured dataset and prints the training summary."""

    del args

    cfg.data.validate_paths()
    assert cfg.data.annotation_path and cfg.data.audio_root and cfg.data.scene_map_path
    assert cfg.data.event_vocab_path and cfg.data.scene_vocab_path

    event_vocab = load_vocabulary(cfg.data.event_vocab_path)
    scene_vocab = load_vocabulary(cfg.data.scene_vocab_path)
    cfg = _class_counts_from(cfg, event_vocab, scene_vocab)

    clips = load_strong_labels(cfg.data.annotation_path, cfg.data.audio_root,
                               cfg.data.scene_map_path, event_vocab, scene_vocab,
                               sample_rate=cfg.features.sample_rate)

    seed_everything(cfg.training.seed, cfg.training.deterministic)

    model = MTLModel(cfg.model)
    if cfg.model.pretrained_path:
        import_pretrained_trunk(model, cfg.model.pretrained_path)

    train_clips, val_clips = split_clips(clips, cfg.data.validation_fraction, cfg.training.seed)

    # Feature statistics come from the training clips only.
    train_set = prepare_dataset(train_clips, event_vocab, scene_vocab, cfg.features,
                                cfg.postprocess)
    validation = prepare_dataset(val_clips, event_vocab, scene_vocab, cfg.features,
                                 cfg.postprocess, stats=train_set.stats) if val_clips else None

    report = fit(model, train_set, cfg.training, validation)

    _emit(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Writes the scene/event table of an audio file."""

    checkpoint = load_checkpoint(args.checkpoint)
    meta = checkpoint.meta

    if (len(meta.event_labels), len(meta.scene_labels)) != \
            (meta.model.num_event_classes, meta.model.num_scene_classes):
        raise errors.CheckpointError(f'{args.checkpoint}: vocabularies do not match the model')

    fmt: TableFormat = args.format or (table_format_for(args.out) if args.out else 'csv')

    clip = load_audio(args.audio, meta.features.sample_rate)

    pipeline = AudioLogPipeline(checkpoint.model, meta.features, checkpoint.stats,
                                cfg.postprocess, meta.scene_labels, meta.event_labels)
    table = pipeline.process(clip)

    if args.merge:
        table = merge_contiguous(table)

    text = serialize_table(table, fmt)

    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding='utf-8')
        _logger().info('Wrote %d rows to %s.', len(table), args.out)
    else:
        _emit(text)

    return EXIT_OK


def cmd_log(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Summarizes a table with the configured provider and writes the audio log."""

    template = get_template(args.template)
    table = read_table(args.table)

    result = AudioLogService(cfg.provider).summarize(table, template)

    table_path = Path(args.table)
    out = Path(args.out) if args.out else table_path.with_name(f'{table_path.stem}_audiolog')
    save_result(result, out)

    _emit(result.response_text)
    return EXIT_OK


def _read_labels(path: str) -> list[str]:
    try:
        return [line.strip() for line in Path(path).read_text(encoding='utf-8').splitlines()
                if line.strip()]
    except OSError as e:
        raise errors.ConfigError(f'cannot read scene labels from {path}: {e}') from e


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Prints (and optionally writes) the metrics bundle."""

    if args.checkpoint:
        bundle = _eval_checkpoint(cfg, args.checkpoint)
    else:
        bundle = _eval_tables(args)

    payload = bundle.model_dump_json(indent=2)

    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload, encoding='utf-8')

    _emit(payload)
    return EXIT_OK


def _eval_tables(args: argparse.Namespace) -> MetricsBundle:

    if not args.ref or not args.est:
        raise errors.ConfigError('eval needs --ref and --est tables, or --checkpoint')

    ref = read_table(args.ref)
    est = read_table(args.est)

    horizon_s = args.horizon or int(math.ceil(max(ref.duration_s, est.duration_s)))
    event_labels = load_vocabulary(args.events).labels if args.events else None

    metrics = segment_er_f1(ref, est, horizon_s, event_labels)

    acc = None
    if args.ref_scenes or args.est_scenes:
        if not (args.ref_scenes and args.est_scenes):
            raise errors.ConfigError('--ref-scenes and --est-scenes must be given together')
        acc = accuracy(_read_labels(args.est_scenes), _read_labels(args.ref_scenes))

    return MetricsBundle.from_counts(metrics.counts, acc=acc)


def _eval_checkpoint(cfg: RunConfig, checkpoint_dir: str) -> MetricsBundle:

    cfg.data.validate_paths(('annotation_path', 'audio_root', 'scene_map_path'))
    assert cfg.data.annotation_path and cfg.data.audio_root and cfg.data.scene_map_path

    checkpoint = load_checkpoint(checkpoint_dir)
    event_vocab = Vocabulary(tuple(checkpoint.meta.event_labels))
    scene_vocab = Vocabulary(tuple(checkpoint.meta.scene_labels))

    clips = load_strong_labels(cfg.data.annotation_path, cfg.data.audio_root,
                               cfg.data.scene_map_path, event_vocab, scene_vocab,
                               sample_rate=checkpoint.meta.features.sample_rate)

    dataset = prepare_dataset(clips, event_vocab, scene_vocab, checkpoint.meta.features,
                              cfg.postprocess, stats=checkpoint.stats)

    return evaluate(checkpoint.model, dataset)


def _build_parser() -> argparse.ArgumentParser:

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='primary YAML config; defaults to cfg/main.yaml')
    common.add_argument('-o', '--override', action='append', default=[], metavar='KEY=VALUE',
                        help='hydra override, e.g. training.epochs=5 (repeatable)')
    common.add_argument('--alpha', type=float, help='scene loss weight')
    common.add_argument('--threshold', type=float, help='event probability threshold')
    common.add_argument('--segment-len', type=float, help='segment length (and hop) in seconds')
    common.add_argument('--provider', help='provider config group, e.g. mock or ollama')
    common.add_argument('--seed', type=int)
    common.add_argument('--deterministic', action='store_true')

    parser = argparse.ArgumentParser(prog='audiolog',
                                     description='Scene/event tables and audio logs.')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', parents=[common], help='generate a synthetic dataset')
    synth.add_argument('--out-dir', required=True)

    commands.add_parser('train', parents=[common], help='train on the configured dataset')

    infer = commands.add_parser('infer', parents=[common], help='write the table of an audio file')
    infer.add_argument('audio')
    infer.add_argument('--checkpoint', required=True)
    infer.add_argument('--out')
    infer.add_argument('--format', choices=TABLE_FORMATS)
    infer.add_argument('--merge', action='store_true', help='fuse contiguous rows')

    log = commands.add_parser('log', parents=[common], help='summarize a table into an audio log')
    log.add_argument('table')
    log.add_argument('--template', default='prompt1', help=f'one of {", ".join(TEMPLATES)}')
    log.add_argument('--out', help='output path without suffix; .json and .txt are written')

    evaluation = commands.add_parser('eval', parents=[common], help='compute ACC, ER and F1')
    evaluation.add_argument('--ref')
    evaluation.add_argument('--est')
    evaluation.add_argument('--ref-scenes')
    evaluation.add_argument('--est-scenes')
    evaluation.add_argument('--events', help='event vocabulary file')
    evaluation.add_argument('--horizon', type=int, help='evaluated seconds')
    evaluation.add_argument('--checkpoint')
    evaluation.add_argument('--out')

    return parser


_COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    'synth': cmd_synth,
    'train': cmd_train,
    'infer': cmd_infer,
    'log': cmd_log,
    'eval': cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    """Runs one command and returns its exit code."""

    args = _build_parser().parse_args(argv)

    try:
        cfg, raw = load_run_config(args.config, _flag_overrides(args))
    except errors.ConfigError as e:
        _logger().error('%s', e)
        return EXIT_INPUT

    _configure_logging(cfg.persist_data_path)

    _logger().info('Running %s with configuration:\n%s',
                   args.command, omegaconf.OmegaConf.to_yaml(raw))

    try:
        return _COMMANDS[args.command](cfg, args)

    except errors.AudioLogError as e:
        code = exit_code_for(e)
        _logger().error('%s failed (exit %d): %s', args.command, code, e)
        return code

    except Exception as e:  # pylint: disable=broad-except
        _logger().exception('%s failed unexpectedly: %s', args.command, e)
        return EXIT_UNEXPECTED
