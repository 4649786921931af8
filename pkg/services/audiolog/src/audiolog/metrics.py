"""Contains scene accuracy and segment-based error rate / F1 for event detection.

Segment-based counting (one-second segments): in every segment and for every class the
reference and estimated activities are compared; per segment S = min(FN, FP), D = FN - S and
I = FP - S. ER = (S + D + I) / N and F1 = 2TP / (2TP + FP + FN), both over all segments.
"""
import dataclasses
from typing import Sequence

import numpy as np
import pydantic

from audiolog import errors
from audiolog.table import EventTable


@dataclasses.dataclass(frozen=True)
class SegmentCounts:
    """Aggregated segment-level counts."""

    N: int = 0  # pylint: disable=invalid-name
    TP: int = 0  # pylint: disable=invalid-name
    FP: int = 0  # pylint: disable=invalid-name
    FN: int = 0  # pylint: disable=invalid-name
    S: int = 0  # pylint: disable=invalid-name
    D: int = 0  # pylint: disable=invalid-name
    I: int = 0  # pylint: disable=invalid-name

    def __add__(self, other: 'SegmentCounts') -> 'SegmentCounts':
        return SegmentCounts(**{field.name: getattr(self, field.name) + getattr(other, field.name)
                                for field in dataclasses.fields(self)})

    @property
    def error_rate(self) -> float:
        """(S + D + I) / N.

        Raises:
            EmptyReference: If the reference holds no active segment.
        """

        if self.N == 0:
            raise errors.EmptyReference('error rate is undefined without reference activity')
        return (self.S + self.D + self.I) / self.N

    @property
    def f1(self) -> float:
        """2TP / (2TP + FP + FN); 1.0 when nothing is active on either side."""

        denominator = 2 * self.TP + self.FP + self.FN
        return 1.0 if denominator == 0 else 2 * self.TP / denominator


@dataclasses.dataclass(frozen=True)
class SegmentMetrics:
    """Segment-based error rate, F1 and the counts they come from."""

    er: float
    f1: float
    counts: SegmentCounts


class MetricsBundle(pydantic.BaseModel):
    """Evaluation result as emitted by the CLI and the training report."""

    acc: float | None
    er: float | None
    f1: float
    counts: dict[str, int]

    @classmethod
    def from_counts(cls, counts: SegmentCounts, acc: float | None) -> 'MetricsBundle':
        """Builds the bundle from summed counts; ER is null without reference activity."""

        return cls(acc=acc,
                   er=counts.error_rate if counts.N else None,
                   f1=counts.f1,
                   counts=dataclasses.asdict(counts))


def accuracy(pred_scenes: Sequence[str | int], ref_scenes: Sequence[str | int]) -> float:
    """Fraction of exactly matching scene labels.

    Raises:
        LengthMismatch: If the sequences differ in length.
        EmptyInput: If both are empty.
    """

    if len(pred_scenes) != len(ref_scenes):
        raise errors.LengthMismatch(
            f'{len(pred_scenes)} predicted scenes for {len(ref_scenes)} references')

    if not ref_scenes:
        raise errors.EmptyInput('accuracy needs at least one scene')

    return sum(p == r for p, r in zip(pred_scenes, ref_scenes)) / len(ref_scenes)


def activity_grid(table: EventTable,
                  horizon_s: int,
                  event_labels: Sequence[str],
                  segment_s: int = 1) -> np.ndarray:
    """Boolean (segments x classes) grid of event activity.

    Raises:
        VocabularyMismatch: If a row's event is not in ``event_labels``.
        ValueError: If a row ends after ``horizon_s``.
    """

    index = {label: i for i, label in enumerate(event_labels)}
    n_segments = -(-horizon_s // segment_s)
    grid = np.zeros((n_segments, len(event_labels)), dtype=bool)

    for row in table.rows:
        if row.event not in index:
            raise errors.VocabularyMismatch(f'event {row.event!r} is not in the vocabulary')
        if row.end_s > horizon_s:
            raise ValueError(f'row {row} exceeds the horizon of {horizon_s} s')

        first = row.start_s // segment_s
        last = -(-row.end_s // segment_s)
        grid[first:last, index[row.event]] = True

    return grid


def count_segments(ref_grid: np.ndarray, est_grid: np.ndarray) -> SegmentCounts:
    """Counts TP/FP/FN and S/D/I for two activity grids of equal shape."""

    if ref_grid.shape != est_grid.shape:
        raise errors.LengthMismatch(f'activity grids {ref_grid.shape} and {est_grid.shape} differ')

    tp = (ref_grid & est_grid).sum(axis=1)
    fp = (~ref_grid & est_grid).sum(axis=1)
    fn = (ref_grid & ~est_grid).sum(axis=1)
    subs = np.minimum(fp, fn)

    return SegmentCounts(N=int(ref_grid.sum()),
                         TP=int(tp.sum()),
                         FP=int(fp.sum()),
                         FN=int(fn.sum()),
                         S=int(subs.sum()),
                         D=int((fn - subs).sum()),
                         I=int((fp - subs).sum()))


def segment_er_f1(ref: EventTable,
                  est: EventTable,
                  horizon_s: int,
                  event_labels: Sequence[str] | None = None,
                  segment_s: int = 1) -> SegmentMetrics:
    """Segment-based ER and F1 of an estimated table against a reference table.

    When ``event_labels`` is omitted the vocabulary is every event seen in either table.

    Raises:
        EmptyReference: If the reference has no active segment.
        VocabularyMismatch: If a table uses an event outside ``event_labels``.
    """

    if event_labels is None:
        event_labels = sorted({row.event for row in (*ref.rows, *est.rows)})

    counts = count_segments(activity_grid(ref, horizon_s, event_labels, segment_s),
                            activity_grid(est, horizon_s, event_labels, segment_s))

    return SegmentMetrics(er=counts.error_rate, f1=counts.f1, counts=counts)
