"""
Run-time configuration shared by the library entry points and the CLI.

Values are resolved from explicit arguments first, then from the
environment, then from the defaults declared below.
"""

import os
from typing import Literal, Union

from pydantic import BaseModel, field_validator, model_validator

ENV_SCORER_ENDPOINT = "AVFORGE_SCORER_ENDPOINT"
ENV_JUDGE_ENDPOINT = "AVFORGE_JUDGE_ENDPOINT"
ENV_GENERATOR_ENDPOINT = "AVFORGE_GENERATOR_ENDPOINT"
ENV_WORKERS = "AVFORGE_WORKERS"


class RetryPolicy(BaseModel):
    # Number of retries after the first attempt
    retries: int = 2
    # Base delay in seconds; attempt k waits backoff * 2**(k - 1)
    backoff: float = 0.5
    # Timeout of a single HTTP request in seconds
    timeout: float = 60.0

    @field_validator("retries")
    @classmethod
    def _validate_retries(cls, value):
        if value < 0:
            raise ValueError("'retries' must not be negative.")
        return value

    @field_validator("backoff")
    @classmethod
    def _validate_backoff(cls, value):
        if value < 0:
            raise ValueError("'backoff' must not be negative.")
        return value

    @field_validator("timeout")
    @classmethod
    def _validate_timeout(cls, value):
        if value <= 0:
            raise ValueError("'timeout' must be positive.")
        return value


class GlobalConfig(BaseModel):
    # Scoring backend: built-in tiny transformer or a remote scoring server
    scorer: Literal["tiny", "remote"] = "tiny"
    scorer_endpoint: Union[str, None] = None
    judge_endpoint: Union[str, None] = None
    generator_endpoint: Union[str, None] = None
    # Worker threads for per-tensor merges, per-sample scoring and search cells
    workers: int = 1
    # Upper bound on concurrent HTTP requests
    max_in_flight: int = 4
    retry: RetryPolicy = RetryPolicy()
    output: Literal["human", "json"] = "human"

    @field_validator("workers", "max_in_flight")
    @classmethod
    def _validate_positive(cls, value):
        if value < 1:
            raise ValueError("Worker counts must be at least 1.")
        return value

    @model_validator(mode="after")
    def _validate_endpoint(self):
        if self.scorer == "remote" and not self.scorer_endpoint:
            raise ValueError(
                f"The remote scorer requires an endpoint (set {ENV_SCORER_ENDPOINT} or pass --endpoint)."
            )
        return self

    @classmethod
    def from_env(cls, environ=None, **overrides):
        """
        Build the configuration from environment variables. Keyword
        arguments that are not None take precedence over the environment.
        """
        environ = os.environ if environ is None else environ
        values = {}
        if environ.get(ENV_SCORER_ENDPOINT):
            values["scorer_endpoint"] = environ[ENV_SCORER_ENDPOINT]
        if environ.get(ENV_JUDGE_ENDPOINT):
            values["judge_endpoint"] = environ[ENV_JUDGE_ENDPOINT]
        if environ.get(ENV_GENERATOR_ENDPOINT):
            values["generator_endpoint"] = environ[ENV_GENERATOR_ENDPOINT]
        if environ.get(ENV_WORKERS):
            values["workers"] = environ[ENV_WORKERS]
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)
