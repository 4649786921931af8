"""Contains service responsible for turning event tables into audio logs."""
import datetime
import logging
import time
from pathlib import Path
from typing import Callable

import httpx
import ollama
import requests
from langchain_core.language_models.chat_models import BaseChatModel
from langchain_core.messages import HumanMessage

from audiolog import errors
from audiolog.llm.core import AudioLogResult
from audiolog.llm.core import PromptTemplate
from audiolog.llm.core import ProviderConfig
from audiolog.llm.prompts import render_prompt
from audiolog.llm.providers import build_chat_model
from audiolog.table import EventTable


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


_TIMEOUTS = (requests.Timeout, httpx.TimeoutException, TimeoutError)

_TRANSIENT = (requests.ConnectionError, requests.HTTPError, httpx.TransportError, ConnectionError)


class AudioLogService:
    """Sends rendered prompts to the configured provider and collects the summaries."""

    def __init__(self,
                 provider_cfg: ProviderConfig,
                 llm: BaseChatModel | None = None,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        """Args:
            provider_cfg: Provider settings, including the retry policy.
            llm: Chat model to use instead of the one built from ``provider_cfg``.
            sleep: Waits between retries; replaceable in tests.
        """

        _logger().info('Initializing AudioLogService with config: %s', provider_cfg)

        self._cfg = provider_cfg
        self._llm = llm if llm is not None else build_chat_model(provider_cfg)
        self._sleep = sleep

    def summarize(self, table: EventTable, template: PromptTemplate) -> AudioLogResult:
        """Returns the provider's summary of the table, verbatim.

        Transient failures are retried up to ``max_retries`` times, waiting ``backoff_s`` and
        doubling the wait after every attempt.

        Raises:
            ProviderTimeout: If the last attempt timed out.
            ProviderRejected: If the provider refused the request.
            MalformedResponse: If the answer is empty or not text.
            ProviderError: If the provider stayed unreachable.
        """

        prompt = render_prompt(table, template)

        _logger().debug('Summarizing %d rows with template %s:\n%s',
                        len(table), template.name, prompt)

        max_attempts = self._cfg.max_retries + 1
        failure: Exception | None = None

        for attempt in range(1, max_attempts + 1):
            started = time.perf_counter()

            try:
                response = self._llm.invoke([HumanMessage(content=prompt)])

            except errors.ProviderError:
                raise

            except ollama.ResponseError as e:
                if e.status_code < 500:
                    raise errors.ProviderRejected(f'ollama rejected the request: {e}') from e
                failure = e

            except (*_TIMEOUTS, *_TRANSIENT) as e:
                failure = e

            else:
                return self._result(prompt, template, response.content, attempt,
                                    latency_ms=(time.perf_counter() - started) * 1000)

            _logger().warning('Provider call %d/%d failed: %s', attempt, max_attempts, failure)

            if attempt < max_attempts:
                self._sleep(self._cfg.backoff_s * 2 ** (attempt - 1))

        _logger().error('Provider %s failed after %d attempts.', self._cfg.provider_id,
                        max_attempts)

        if isinstance(failure, _TIMEOUTS):
            raise errors.ProviderTimeout(f'provider {self._cfg.provider_id} timed out',
                                         max_attempts) from failure

        raise errors.ProviderError(f'provider {self._cfg.provider_id} is unreachable after '
                                   f'{max_attempts} attempts') from failure

    def _result(self,
                prompt: str,
                template: PromptTemplate,
                content: object,
                attempts: int,
                latency_ms: float) -> AudioLogResult:

        if not isinstance(content, str) or not content.strip():
            raise errors.MalformedResponse(
                f'provider {self._cfg.provider_id} returned an empty or non-text answer')

        return AudioLogResult(prompt_used=prompt,
                              response_text=content,
                              provider_id=self._cfg.provider_id,
                              template=template.name,
                              model_name=self._cfg.model_name,
                              latency_ms=latency_ms,
                              attempts=attempts,
                              created_at=datetime.datetime.now(datetime.timezone.utc))


def summarize(table: EventTable,
              template: PromptTemplate,
              provider: ProviderConfig) -> AudioLogResult:
    """Summarizes a table with a one-off service for ``provider``."""
    return AudioLogService(provider).summarize(table, template)


def save_result(result: AudioLogResult, out_path: str | Path) -> tuple[Path, Path]:
    """Writes ``<stem>.json`` with the full result and ``<stem>.txt`` with the summary alone."""

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    json_path = out_path.with_suffix('.json')
    text_path = out_path.with_suffix('.txt')

    json_path.write_text(result.model_dump_json(indent=2), encoding='utf-8')
    text_path.write_text(result.response_text + '\n', encoding='utf-8')

    _logger().info('Saved audio log to %s and %s.', json_path, text_path)

    return json_path, text_path
