"""Contains the timestamped scene/event table and its text formats."""
import csv
import dataclasses
import io
import unicodedata
from pathlib import Path
from typing import Literal

from audiolog import errors

TableFormat = Literal['csv', 'tsv', 'markdown']

TABLE_FORMATS: tuple[TableFormat, ...] = ('csv', 'tsv', 'markdown')

HEADER = ('Start', 'End', 'Scene', 'Event')

_BREAKING_CATEGORIES = frozenset({'Cc', 'Zl', 'Zp'})

_SUFFIX_FORMATS: dict[str, TableFormat] = {'.csv': 'csv', '.tsv': 'tsv', '.md': 'markdown'}


def _check_label(label: str, kind: str) -> None:

    if not label or label != label.strip() or any(
            unicodedata.category(char) in _BREAKING_CATEGORIES for char in label):
        raise ValueError(f'{kind} label {label!r} must be non-empty, stripped and free of '
                         'control and line separator characters')


@dataclasses.dataclass(frozen=True, order=True)
class EventRow:
    """One (start, end, scene, event) entry; times are whole seconds."""

    start_s: int
    end_s: int
    scene: str
    event: str

    def __post_init__(self) -> None:

        if self.start_s < 0 or self.end_s <= self.start_s:
            raise ValueError(f'invalid span [{self.start_s}, {self.end_s})')

        _check_label(self.scene, 'scene')
        _check_label(self.event, 'event')

    @property
    def sort_key(self) -> tuple[int, str, int, str]:
        """Table order: start, then event, then end and scene."""
        return self.start_s, self.event, self.end_s, self.scene


@dataclasses.dataclass(frozen=True)
class EventTable:
    """Rows ordered by (start, event), all lying within [0, duration_s]."""

    rows: tuple[EventRow, ...]
    duration_s: float

    def __post_init__(self) -> None:

        if self.duration_s < 0:
            raise ValueError(f'negative duration {self.duration_s}')

        for row in self.rows:
            if row.end_s > self.duration_s:
                raise ValueError(f'row {row} ends after the table duration {self.duration_s}')

        if list(self.rows) != sorted(self.rows, key=lambda row: row.sort_key):
            raise ValueError('rows must be sorted by (start, event)')

    @classmethod
    def from_rows(cls, rows: list[EventRow], duration_s: float) -> 'EventTable':
        """Builds a table, sorting the rows."""
        return cls(rows=tuple(sorted(rows, key=lambda row: row.sort_key)), duration_s=duration_s)

    def __len__(self) -> int:
        return len(self.rows)


def merge_contiguous(table: EventTable) -> EventTable:
    """Fuses rows with the same (scene, event) whose spans touch. Idempotent."""

    open_rows: dict[tuple[str, str], EventRow] = {}
    merged: list[EventRow] = []

    for row in sorted(table.rows, key=lambda r: (r.start_s, r.end_s)):
        key = (row.scene, row.event)
        previous = open_rows.get(key)

        if previous is not None and previous.end_s >= row.start_s:
            open_rows[key] = dataclasses.replace(previous, end_s=max(previous.end_s, row.end_s))
            continue

        if previous is not None:
            merged.append(previous)
        open_rows[key] = row

    merged.extend(open_rows.values())

    return EventTable.from_rows(merged, table.duration_s)


def serialize_table(table: EventTable, fmt: TableFormat) -> str:
    """Renders the table with the header ``Start, End, Scene, Event``."""

    if fmt == 'markdown':
        lines = ['| ' + ' | '.join(HEADER) + ' |', '| ' + ' | '.join('---' for _ in HEADER) + ' |']
        lines.extend(f'| {row.start_s} | {row.end_s} | {_md_escape(row.scene)} | '
                     f'{_md_escape(row.event)} |' for row in table.rows)
        return '\n'.join(lines) + '\n'

    if fmt not in ('csv', 'tsv'):
        raise ValueError(f'unknown table format {fmt!r}')

    buffer = io.StringIO()
    writer = csv.writer(buffer, delimiter=',' if fmt == 'csv' else '\t', lineterminator='\n')
    writer.writerow(HEADER)
    writer.writerows((row.start_s, row.end_s, row.scene, row.event) for row in table.rows)
    return buffer.getvalue()


def parse_table(text: str, fmt: TableFormat, duration_s: float | None = None) -> EventTable:
    """Parses text written by ``serialize_table``.

    When ``duration_s`` is not given the table duration is the latest row end.

    Raises:
        MalformedTable: If the header or any row cannot be parsed.
    """

    if fmt == 'markdown':
        records = _parse_markdown(text)
    elif fmt in ('csv', 'tsv'):
        records = [rec for rec in csv.reader(io.StringIO(text),
                                             delimiter=',' if fmt == 'csv' else '\t') if rec]
    else:
        raise ValueError(f'unknown table format {fmt!r}')

    if not records or tuple(records[0]) != HEADER:
        raise errors.MalformedTable(f'expected header {",".join(HEADER)}')

    rows = []
    for line_number, record in enumerate(records[1:], start=2):
        if len(record) != len(HEADER):
            raise errors.MalformedTable(f'row {line_number}: expected {len(HEADER)} fields')
        try:
            rows.append(EventRow(int(record[0]), int(record[1]), record[2], record[3]))
        except ValueError as e:
            raise errors.MalformedTable(f'row {line_number}: {e}') from e

    if duration_s is None:
        duration_s = max((row.end_s for row in rows), default=0)

    try:
        return EventTable.from_rows(rows, duration_s)
    except ValueError as e:
        raise errors.MalformedTable(str(e)) from e


def table_format_for(path: str | Path) -> TableFormat:
    """Infers the table format from a file suffix (.csv, .tsv, .md)."""

    fmt = _SUFFIX_FORMATS.get(Path(path).suffix.lower())
    if fmt is None:
        raise errors.MalformedTable(f'{path}: cannot infer table format from the suffix')
    return fmt


def read_table(path: str | Path, duration_s: float | None = None) -> EventTable:
    """Reads a table file, inferring its format from the suffix."""

    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise errors.MalformedTable(f'{path}: {e}') from e

    return parse_table(text, table_format_for(path), duration_s)


def _md_escape(label: str) -> str:
    return label.replace('\\', '\\\\').replace('|', '\\|')


def _md_unescape(cell: str) -> str:

    out = []
    chars = iter(cell)
    for char in chars:
        if char == '\\':
            out.append(next(chars, '\\'))
        else:
            out.append(char)
    return ''.join(out)


def _split_md_row(line: str) -> list[str]:

    body = line.strip()
    if not (body.startswith('|') and body.endswith('|')) or len(body) < 2:
        raise errors.MalformedTable(f'not a markdown table row: {line!r}')

    cells, current, escaped = [], [], False
    for char in body[1:-1]:
        if escaped:
            current.append('\\' + char)
            escaped = False
        elif char == '\\':
            escaped = True
        elif char == '|':
            cells.append(''.join(current))
            current = []
        else:
            current.append(char)

    cells.append(''.join(current))
    return [_md_unescape(cell.strip()) for cell in cells]


def _parse_markdown(text: str) -> list[list[str]]:

    lines = [line for line in text.splitlines() if line.strip()]
    if len(lines) < 2:
        raise errors.MalformedTable('markdown table needs a header and a separator row')

    separator = _split_md_row(lines[1])
    if not all(cell and set(cell) <= set('-:') for cell in separator):
        raise errors.MalformedTable('second markdown line must be the separator row')

    return [_split_md_row(lines[0])] + [_split_md_row(line) for line in lines[2:]]
