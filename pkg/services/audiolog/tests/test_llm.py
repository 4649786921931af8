import json
from typing import Any

import pytest
import requests
from langchain_core.language_models.chat_models import BaseChatModel
from langchain_core.messages import AIMessage
from langchain_core.messages import BaseMessage
from langchain_core.outputs import ChatGeneration
from langchain_core.outputs import ChatResult

from audiolog import errors
from audiolog.llm.core import AudioLogResult
from audiolog.llm.core import GENERAL_PREAMBLE
from audiolog.llm.core import ProviderConfig
from audiolog.llm.core import TEMPLATES
from audiolog.llm.core import get_template
from audiolog.llm.prompts import render_prompt
from audiolog.llm.providers import ChatCompletionsModel
from audiolog.llm.providers import build_chat_model
from audiolog.llm.service import AudioLogService
from audiolog.llm.service import save_result
from audiolog.llm.service import summarize
from audiolog.table import EventRow
from audiolog.table import EventTable
from audiolog.table import serialize_table

_TABLE = EventTable.from_rows([
    EventRow(0, 1, 'city_center', 'car'),
    EventRow(1, 2, 'city_center', 'birds_singing'),
    EventRow(2, 3, 'city_center', 'car'),
], duration_s=3)


class ScriptedChatModel(BaseChatModel):
    """Raises the queued failures in order, then answers ``reply``."""

    failures: list[Exception] = []
    reply: Any = 'a summary'
    calls: int = 0

    @property
    def _llm_type(self) -> str:
        return 'scripted'

    def _generate(self, messages: list[BaseMessage], stop=None, run_manager=None,
                  **kwargs: Any) -> ChatResult:
        self.calls += 1
        if self.failures:
            raise self.failures.pop(0)
        return ChatResult(generations=[ChatGeneration(message=AIMessage(content=self.reply))])


class _Response:

    def __init__(self, status_code: int, body: Any) -> None:
        self.status_code = status_code
        self._body = body

    def json(self) -> Any:
        if isinstance(self._body, Exception):
            raise self._body
        return self._body

    def raise_for_status(self) -> None:
        if self.status_code >= 400:
            raise requests.HTTPError(f'status {self.status_code}')


def _service(model: BaseChatModel, max_retries: int = 3, sleeps: list | None = None):
    cfg = ProviderConfig(max_retries=max_retries, backoff_s=0.5)
    return AudioLogService(cfg, llm=model, sleep=(sleeps if sleeps is not None else []).append)


def test_templates_carry_the_verbatim_request_texts():
    assert GENERAL_PREAMBLE.startswith(
        'The above table provides a description of acoustic events and scenes')
    assert TEMPLATES['prompt1'].request_text == 'Please provide a concise overview of this audio.'
    assert TEMPLATES['prompt2'].request_text.endswith(
        'along with the timing information for sound scenes and events.')
    assert TEMPLATES['prompt3'].request_text.endswith('without timing information.')


def test_prompt_is_preamble_table_then_request():
    prompt = render_prompt(_TABLE, TEMPLATES['prompt1'])

    preamble_at = prompt.index(GENERAL_PREAMBLE)
    table_at = prompt.index(serialize_table(_TABLE, 'markdown'))
    request_at = prompt.index('Please provide a concise overview of this audio.')

    assert preamble_at < table_at < request_at
    assert prompt == render_prompt(_TABLE, TEMPLATES['prompt1'])


def test_prompt2_asks_for_timing():
    prompt = render_prompt(_TABLE, TEMPLATES['prompt2'])

    assert 'along with the timing information for sound scenes and events' in prompt


def test_empty_table_still_renders_a_header():
    prompt = render_prompt(EventTable.from_rows([], duration_s=0), TEMPLATES['prompt3'])

    assert '| Start | End | Scene | Event |' in prompt
    assert prompt.endswith('without timing information.\n')


def test_unknown_template_lists_valid_names():
    with pytest.raises(errors.ConfigError, match='prompt1, prompt2, prompt3'):
        get_template('prompt9')


def test_mock_provider_counts_rows():
    result = summarize(_TABLE, TEMPLATES['prompt1'], ProviderConfig())

    assert result.response_text == 'MOCK SUMMARY: 3 rows'
    assert result.provider_id == 'mock'
    assert result.attempts == 1
    assert result.prompt_used == render_prompt(_TABLE, TEMPLATES['prompt1'])


def test_mock_provider_is_deterministic_and_leaves_the_table_alone():
    before = serialize_table(_TABLE, 'csv')

    first = summarize(_TABLE, TEMPLATES['prompt2'], ProviderConfig())
    second = summarize(_TABLE, TEMPLATES['prompt2'], ProviderConfig())

    assert first.response_text == second.response_text
    assert serialize_table(_TABLE, 'csv') == before


def test_timeouts_are_retried_with_backoff():
    model = ScriptedChatModel(failures=[requests.Timeout('slow')] * 4)
    sleeps: list[float] = []

    with pytest.raises(errors.ProviderTimeout) as excinfo:
        _service(model, max_retries=3, sleeps=sleeps).summarize(_TABLE, TEMPLATES['prompt1'])

    assert excinfo.value.attempts == 4
    assert model.calls == 4
    assert sleeps == [0.5, 1.0, 2.0]


def test_transient_failure_then_success():
    model = ScriptedChatModel(failures=[requests.ConnectionError('down')], reply='It is busy.')

    result = _service(model).summarize(_TABLE, TEMPLATES['prompt1'])

    assert result.response_text == 'It is busy.'
    assert result.attempts == 2


def test_exhausted_connection_failures_are_provider_errors():
    model = ScriptedChatModel(failures=[requests.ConnectionError('down')] * 2)

    with pytest.raises(errors.ProviderError) as excinfo:
        _service(model, max_retries=1).summarize(_TABLE, TEMPLATES['prompt1'])

    assert not isinstance(excinfo.value, errors.ProviderTimeout)


def test_rejections_are_not_retried():
    model = ScriptedChatModel(failures=[errors.ProviderRejected('quota')] * 3)

    with pytest.raises(errors.ProviderRejected):
        _service(model).summarize(_TABLE, TEMPLATES['prompt1'])

    assert model.calls == 1


@pytest.mark.parametrize('reply', ['', '   '])
def test_empty_answers_are_malformed(reply):
    with pytest.raises(errors.MalformedResponse):
        _service(ScriptedChatModel(reply=reply)).summarize(_TABLE, TEMPLATES['prompt1'])


def test_chat_completions_wire_shape(monkeypatch):
    sent: dict[str, Any] = {}

    def post(url, json, headers, timeout):  # pylint: disable=redefined-outer-name
        sent.update(url=url, json=json, headers=headers, timeout=timeout)
        return _Response(200, {'choices': [{'message': {'role': 'assistant',
                                                        'content': 'Street noise.'}}]})

    monkeypatch.setattr(requests, 'post', post)
    monkeypatch.setenv('AUDIOLOG_TEST_KEY', 'secret-key')
    cfg = ProviderConfig(provider_id='chat_completions', endpoint='http://llm.test/v1/chat',
                         auth_env='AUDIOLOG_TEST_KEY', model_name='small', timeout_s=5)

    result = AudioLogService(cfg).summarize(_TABLE, TEMPLATES['prompt3'])

    assert result.response_text == 'Street noise.'
    assert sent['url'] == 'http://llm.test/v1/chat'
    assert sent['timeout'] == 5
    assert sent['headers']['Authorization'] == 'Bearer secret-key'
    assert sent['json']['model'] == 'small'
    assert sent['json']['messages'] == [{'role': 'user', 'content': result.prompt_used}]


@pytest.mark.parametrize('status', [401, 429])
def test_chat_completions_client_errors_are_rejections(monkeypatch, status):
    monkeypatch.setattr(requests, 'post', lambda *args, **kwargs: _Response(status, {}))
    model = ChatCompletionsModel(endpoint='http://llm.test', model='m')

    with pytest.raises(errors.ProviderRejected):
        _service(model).summarize(_TABLE, TEMPLATES['prompt1'])


def test_chat_completions_server_errors_are_retried(monkeypatch):
    responses = [_Response(503, {}),
                 _Response(200, {'choices': [{'message': {'content': 'Quiet home.'}}]})]
    monkeypatch.setattr(requests, 'post', lambda *args, **kwargs: responses.pop(0))
    model = ChatCompletionsModel(endpoint='http://llm.test', model='m')

    result = _service(model).summarize(_TABLE, TEMPLATES['prompt1'])

    assert (result.response_text, result.attempts) == ('Quiet home.', 2)


@pytest.mark.parametrize('body', [{'choices': []}, {'error': 'x'}, ValueError('not json')])
def test_chat_completions_bad_bodies_are_malformed(monkeypatch, body):
    monkeypatch.setattr(requests, 'post', lambda *args, **kwargs: _Response(200, body))
    model = ChatCompletionsModel(endpoint='http://llm.test', model='m')

    with pytest.raises(errors.MalformedResponse):
        _service(model).summarize(_TABLE, TEMPLATES['prompt1'])


def test_missing_secret_is_a_config_error(monkeypatch):
    monkeypatch.delenv('AUDIOLOG_TEST_KEY', raising=False)
    cfg = ProviderConfig(provider_id='chat_completions', endpoint='http://llm.test',
                         auth_env='AUDIOLOG_TEST_KEY')

    with pytest.raises(errors.ConfigError, match='AUDIOLOG_TEST_KEY'):
        build_chat_model(cfg)


def test_remote_providers_need_an_endpoint():
    with pytest.raises(ValueError):
        ProviderConfig(provider_id='ollama')


def test_results_are_saved_as_json_and_text(tmp_path):
    result = summarize(_TABLE, TEMPLATES['prompt1'], ProviderConfig())

    json_path, text_path = save_result(result, tmp_path / 'logs' / 'clip_audiolog')

    assert json_path.name == 'clip_audiolog.json'
    assert text_path.read_text(encoding='utf-8') == 'MOCK SUMMARY: 3 rows\n'
    saved = json.loads(json_path.read_text(encoding='utf-8'))
    assert AudioLogResult.model_validate(saved) == result
