"""Contains label vocabularies stored as one label per line."""
import dataclasses
from pathlib import Path

from audiolog import errors


@dataclasses.dataclass(frozen=True)
class Vocabulary:
    """Ordered label list; a label's index is its line number (from zero)."""

    labels: tuple[str, ...]

    def __post_init__(self) -> None:

        if len(set(self.labels)) != len(self.labels):
            raise ValueError('vocabulary labels must be unique')
        if any(not label or label != label.strip() for label in self.labels):
            raise ValueError('vocabulary labels must be non-empty and stripped')

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: object) -> bool:
        return label in self.labels

    def index(self, label: str) -> int:
        """Returns the class index of a label.

        Raises:
            UnknownLabel: If the label is not in the vocabulary.
        """

        try:
            return self.labels.index(label)
        except ValueError as e:
            raise errors.UnknownLabel(f'label {label!r} is not in the vocabulary') from e

    def save(self, path: str | Path) -> None:
        """Writes one label per line."""
        Path(path).write_text(''.join(f'{label}\n' for label in self.labels), encoding='utf-8')


def load_vocabulary(path: str | Path) -> Vocabulary:
    """Reads a vocabulary file, ignoring blank lines."""

    lines = Path(path).read_text(encoding='utf-8').splitlines()
    return Vocabulary(labels=tuple(line.strip() for line in lines if line.strip()))
