import random

import pytest
from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st

from audiolog import errors
from audiolog.metrics import MetricsBundle
from audiolog.metrics import SegmentCounts
from audiolog.metrics import accuracy
from audiolog.metrics import segment_er_f1
from audiolog.table import EventRow
from audiolog.table import EventTable
from audiolog.table import merge_contiguous

_EVENTS = ['car', 'dishes', 'door']


def _table(rows: list[tuple[int, int, str]], duration: int = 10) -> EventTable:
    return EventTable.from_rows([EventRow(s, e, 'home', ev) for s, e, ev in rows], duration)


def _random_table(rng: random.Random, horizon: int) -> EventTable:
    rows = []
    for _ in range(rng.randint(0, 6)):
        start = rng.randrange(horizon)
        end = rng.randint(start + 1, horizon)
        rows.append((start, end, rng.choice(_EVENTS)))
    return _table(rows, horizon)


def _brute_force(ref: EventTable, est: EventTable, horizon: int) -> SegmentCounts:
    totals = dict.fromkeys(('N', 'TP', 'FP', 'FN', 'S', 'D', 'I'), 0)

    for second in range(horizon):
        ref_active = {row.event for row in ref.rows if row.start_s <= second < row.end_s}
        est_active = {row.event for row in est.rows if row.start_s <= second < row.end_s}
        fp = len(est_active - ref_active)
        fn = len(ref_active - est_active)
        subs = min(fp, fn)
        totals['N'] += len(ref_active)
        totals['TP'] += len(ref_active & est_active)
        totals['FP'] += fp
        totals['FN'] += fn
        totals['S'] += subs
        totals['D'] += fn - subs
        totals['I'] += fp - subs

    return SegmentCounts(**totals)


def test_counts_match_per_second_enumeration():
    rng = random.Random(11)
    checked = 0

    while checked < 200:
        horizon = rng.randint(1, 10)
        ref = _random_table(rng, horizon)
        est = _random_table(rng, horizon)
        expected = _brute_force(ref, est, horizon)
        if expected.N == 0:
            continue

        result = segment_er_f1(ref, est, horizon, _EVENTS)

        assert result.counts == expected
        assert result.er == (expected.S + expected.D + expected.I) / expected.N
        checked += 1


def test_identical_tables_are_perfect():
    ref = _table([(0, 3, 'car'), (2, 5, 'door')])

    result = segment_er_f1(ref, ref, 10, _EVENTS)

    assert (result.er, result.f1) == (0.0, 1.0)


def test_empty_estimate_deletes_everything():
    ref = _table([(0, 3, 'car'), (2, 5, 'door')])

    result = segment_er_f1(ref, _table([]), 10, _EVENTS)

    assert (result.er, result.f1) == (1.0, 0.0)
    assert result.counts.D == result.counts.N == 6


def test_wrong_class_counts_as_substitution():
    ref = EventTable.from_rows([EventRow(0, 2, 'home', 'a')], 2)
    est = EventTable.from_rows([EventRow(0, 2, 'home', 'b')], 2)

    result = segment_er_f1(ref, est, 2, ['a', 'b'])

    assert result.counts.S == 2
    assert (result.counts.D, result.counts.I) == (0, 0)
    assert (result.er, result.f1) == (1.0, 0.0)


def test_empty_reference_has_no_error_rate():
    with pytest.raises(errors.EmptyReference):
        segment_er_f1(_table([]), _table([(0, 1, 'car')]), 10, _EVENTS)


def test_unknown_estimated_event_is_an_error():
    with pytest.raises(errors.VocabularyMismatch):
        segment_er_f1(_table([(0, 1, 'car')]), _table([(0, 1, 'bus')]), 10, _EVENTS)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_metrics_ignore_row_compaction(seed):
    rng = random.Random(seed)
    ref = _random_table(rng, 10)
    est = _random_table(rng, 10)
    if not ref.rows:
        ref = _table([(0, 1, 'car')])

    plain = segment_er_f1(ref, est, 10, _EVENTS)
    merged = segment_er_f1(merge_contiguous(ref), merge_contiguous(est), 10, _EVENTS)

    assert plain == merged
    assert plain.er >= 0.0
    assert 0.0 <= plain.f1 <= 1.0
    assert (plain.er == 0.0) == (plain.counts.FP == 0 and plain.counts.FN == 0)


@pytest.mark.parametrize('pred, ref, expected', [
    (['a', 'b'], ['a', 'b'], 1.0),
    (['a', 'b'], ['b', 'a'], 0.0),
    (['a', 'b', 'c', 'd'], ['a', 'b', 'c', 'a'], 0.75),
])
def test_accuracy(pred, ref, expected):
    assert accuracy(pred, ref) == expected


def test_accuracy_needs_matching_non_empty_inputs():
    with pytest.raises(errors.LengthMismatch):
        accuracy(['a'], ['a', 'b'])
    with pytest.raises(errors.EmptyInput):
        accuracy([], [])


def test_bundle_has_null_error_rate_without_reference():
    bundle = MetricsBundle.from_counts(SegmentCounts(FP=2, I=2), acc=0.5)

    assert bundle.er is None
    assert bundle.f1 == 0.0
    assert bundle.counts == {'N': 0, 'TP': 0, 'FP': 2, 'FN': 0, 'S': 0, 'D': 0, 'I': 2}
