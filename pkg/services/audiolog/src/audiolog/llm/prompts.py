"""Contains rendering of prompt templates against event tables."""
from audiolog.llm.core import PromptTemplate
from audiolog.table import EventTable
from audiolog.table import serialize_table


def render_prompt(table: EventTable, template: PromptTemplate) -> str:
    """Preamble, the Markdown table and the request line, separated by blank lines."""

    return (f'{template.general_preamble}\n\n'
            f'{serialize_table(table, "markdown")}\n'
            f'{template.request_text}\n')
