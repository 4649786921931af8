"""Contains prompt templates, provider configuration and the summarization result."""
import dataclasses
import datetime
from typing import Literal

import pydantic

from audiolog import errors

TemplateName = Literal['prompt1', 'prompt2', 'prompt3']

ProviderId = Literal['mock', 'ollama', 'chat_completions']

GENERAL_PREAMBLE = ('The above table provides a description of acoustic events and scenes from an '
                    'audio clip, along with their start and end times in seconds.')


@dataclasses.dataclass(frozen=True)
class PromptTemplate:
    """General preamble plus one request line."""

    name: TemplateName
    request_text: str
    general_preamble: str = GENERAL_PREAMBLE


TEMPLATES: dict[str, PromptTemplate] = {
    'prompt1': PromptTemplate(
        name='prompt1',
        request_text='Please provide a concise overview of this audio.'),
    'prompt2': PromptTemplate(
        name='prompt2',
        request_text=('Please provide a concise overview of this audio, along with the timing '
                      'information for sound scenes and events.')),
    'prompt3': PromptTemplate(
        name='prompt3',
        request_text='Please provide a concise overview of this audio without timing information.'),
}


def get_template(name: str) -> PromptTemplate:
    """Looks a template up by name.

    Raises:
        ConfigError: If the name is unknown; the message lists the valid names.
    """

    try:
        return TEMPLATES[name]
    except KeyError as e:
        raise errors.ConfigError(f'unknown template {name!r}, valid names: '
                                 f'{", ".join(TEMPLATES)}') from e


class ProviderConfig(pydantic.BaseModel):
    """Connection settings of the summarizing LLM.

    ``auth_env`` names the environment variable holding the API key; the key itself never
    appears in configuration files.
    """

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    provider_id: ProviderId = 'mock'
    endpoint: str | None = None
    auth_env: str | None = None
    model_name: str = 'mock'
    timeout_s: float = pydantic.Field(default=60.0, gt=0.0)
    max_retries: int = pydantic.Field(default=3, ge=0)
    backoff_s: float = pydantic.Field(default=1.0, ge=0.0)
    temperature: float = pydantic.Field(default=0.0, ge=0.0)

    @pydantic.model_validator(mode='after')
    def _check_endpoint(self) -> 'ProviderConfig':
        if self.provider_id != 'mock' and not self.endpoint:
            raise ValueError(f'provider {self.provider_id} needs an endpoint')
        return self


class AudioLogResult(pydantic.BaseModel):
    """Summary returned by a provider, stored verbatim together with its prompt."""

    prompt_used: str
    response_text: str = pydantic.Field(min_length=1)
    provider_id: str
    template: TemplateName
    model_name: str
    latency_ms: float = pydantic.Field(ge=0.0)
    attempts: int = pydantic.Field(ge=1)
    created_at: datetime.datetime
