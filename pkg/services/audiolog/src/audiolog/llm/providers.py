"""Contains the chat models a summary can be requested from.

The ``chat_completions`` provider speaks the common HTTP JSON chat-completion shape:

    request:  {"model": str, "temperature": float,
               "messages": [{"role": "system" | "user" | "assistant", "content": str}, ...]}
    response: {"choices": [{"message": {"role": "assistant", "content": str}}, ...]}

with the key sent as ``Authorization: Bearer <key>``.
"""
import logging
import os
from typing import Any

import pydantic
import requests
from langchain_core.callbacks import CallbackManagerForLLMRun
from langchain_core.language_models.chat_models import BaseChatModel
from langchain_core.messages import AIMessage
from langchain_core.messages import BaseMessage
from langchain_core.outputs import ChatGeneration
from langchain_core.outputs import ChatResult
from langchain_ollama import ChatOllama

from audiolog import errors
from audiolog.llm.core import ProviderConfig
from audiolog.table import parse_table


def _logger() -> logging.Logger:
    return logging.getLogger(__name__)


_ROLES = {'system': 'system', 'human': 'user', 'ai': 'assistant'}


def _single_generation(text: str) -> ChatResult:
    return ChatResult(generations=[ChatGeneration(message=AIMessage(content=text))])


class MockSummaryChatModel(BaseChatModel):
    """Offline model answering ``MOCK SUMMARY: <n> rows`` for the Markdown table in the prompt."""

    @property
    def _llm_type(self) -> str:
        return 'audiolog-mock'

    def _generate(self,
                  messages: list[BaseMessage],
                  stop: list[str] | None = None,
                  run_manager: CallbackManagerForLLMRun | None = None,
                  **kwargs: Any) -> ChatResult:

        prompt = str(messages[-1].content)
        table_lines = [line for line in prompt.splitlines() if line.lstrip().startswith('|')]

        n_rows = len(parse_table('\n'.join(table_lines), 'markdown')) if table_lines else 0

        return _single_generation(f'MOCK SUMMARY: {n_rows} rows')


class ChatCompletionsModel(BaseChatModel):
    """Chat model behind an HTTP chat-completion endpoint."""

    endpoint: str
    model: str
    api_key: pydantic.SecretStr | None = None
    timeout_s: float = 60.0
    temperature: float = 0.0

    @property
    def _llm_type(self) -> str:
        return 'chat-completions'

    def _generate(self,
                  messages: list[BaseMessage],
                  stop: list[str] | None = None,
                  run_manager: CallbackManagerForLLMRun | None = None,
                  **kwargs: Any) -> ChatResult:

        payload: dict[str, Any] = {
            'model': self.model,
            'temperature': self.temperature,
            'messages': [{'role': _ROLES.get(message.type, 'user'),
                          'content': str(message.content)} for message in messages],
        }
        if stop:
            payload['stop'] = stop

        headers = {'Content-Type': 'application/json'}
        if self.api_key is not None:
            headers['Authorization'] = f'Bearer {self.api_key.get_secret_value()}'

        response = requests.post(self.endpoint, json=payload, headers=headers,
                                 timeout=self.timeout_s)

        # Auth, quota (429) and request errors are not retried.
        if 400 <= response.status_code < 500:
            raise errors.ProviderRejected(
                f'{self.endpoint} rejected the request with status {response.status_code}')

        # 5xx statuses surface as requests.HTTPError and count as transient.
        response.raise_for_status()

        try:
            content = response.json()['choices'][0]['message']['content']
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise errors.MalformedResponse(
                f'{self.endpoint} returned no choices[0].message.content') from e

        if not isinstance(content, str):
            raise errors.MalformedResponse(f'{self.endpoint} returned non-text content')

        return _single_generation(content)


def build_chat_model(cfg: ProviderConfig) -> BaseChatModel:
    """Creates the chat model of a provider configuration.

    Raises:
        ConfigError: If the provider needs an API key and its environment variable is unset.
    """

    _logger().info('Creating chat model for provider %s (%s).', cfg.provider_id, cfg.model_name)

    if cfg.provider_id == 'mock':
        return MockSummaryChatModel()

    if cfg.provider_id == 'ollama':
        return ChatOllama(model=cfg.model_name,
                          base_url=cfg.endpoint,
                          temperature=cfg.temperature,
                          client_kwargs={'timeout': cfg.timeout_s})

    api_key = None
    if cfg.auth_env:
        secret = os.environ.get(cfg.auth_env)
        if not secret:
            raise errors.ConfigError(f'provider.auth_env: environment variable {cfg.auth_env} '
                                     'is not set')
        api_key = pydantic.SecretStr(secret)

    assert cfg.endpoint is not None

    return ChatCompletionsModel(endpoint=cfg.endpoint,
                                model=cfg.model_name,
                                api_key=api_key,
                                timeout_s=cfg.timeout_s,
                                temperature=cfg.temperature)
