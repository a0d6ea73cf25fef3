"""Endpoint configuration: which model to call, where, and under what limits."""

import dataclasses
import json
from dataclasses import dataclass, field

import yaml

from ..errors import ConfigError


@dataclass(frozen=True)
class ModelEndpoint:
    """One model behind one URL.

    ``base_url`` selects the transport: ``http(s)://...`` for chat-completion
    compatible servers, ``mock:<kind>?param=value`` for scripted backends.
    API keys never live in config files; ``api_key_env`` names the environment
    variable to read at request time.
    """

    base_url: str
    model_id: str = "default"
    role: str = "policy"
    api_key_env: str | None = None
    max_prompt_tokens: int | None = None
    max_output_tokens: int = 1024
    temperature: float = 1.0
    retry_limit: int = 3
    backoff_base: float = 0.5
    timeout: float = 120.0
    max_in_flight: int = 8
    judge_samples: int = 8
    think_open: str = "<think>"
    think_close: str = "</think>"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_url:
            raise ConfigError("endpoint base_url must be non-empty")
        if self.retry_limit < 0:
            raise ConfigError("retry_limit must be >= 0")
        if self.max_prompt_tokens is not None and self.max_prompt_tokens <= 0:
            raise ConfigError("max_prompt_tokens must be positive when set")
        if self.judge_samples < 1:
            raise ConfigError("judge_samples must be >= 1")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelEndpoint":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown endpoint config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad endpoint config: {exc}") from exc


def load_endpoint(path: str) -> ModelEndpoint:
    """Read an endpoint config from a .yaml/.yml/.json file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            if path.endswith(".json"):
                data = json.load(fh)
            elif path.endswith((".yaml", ".yml")):
                data = yaml.safe_load(fh)
            else:
                raise ConfigError(f"unsupported endpoint config extension: {path}")
    except OSError as exc:
        raise ConfigError(f"cannot read endpoint config {path}: {exc}") from exc
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse endpoint config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"endpoint config {path} must be a mapping")
    return ModelEndpoint.from_dict(data)
