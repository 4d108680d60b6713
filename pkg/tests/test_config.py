import pytest
from pydantic import ValidationError

from avforge.config import ENV_SCORER_ENDPOINT, ENV_WORKERS, GlobalConfig, RetryPolicy


def test_defaults():
    config = GlobalConfig.from_env(environ={})
    assert config.scorer == "tiny"
    assert config.workers == 1
    assert config.retry == RetryPolicy(retries=2, backoff=0.5, timeout=60.0)


def test_environment_and_overrides():
    environ = {ENV_SCORER_ENDPOINT: "http://localhost:8000", ENV_WORKERS: "4"}
    config = GlobalConfig.from_env(environ=environ, scorer="remote")
    assert config.scorer_endpoint == "http://localhost:8000"
    assert config.workers == 4
    # Explicit values win, None means "not given"
    config = GlobalConfig.from_env(environ=environ, workers=2, scorer_endpoint=None)
    assert config.workers == 2
    assert config.scorer_endpoint == "http://localhost:8000"


def test_reads_process_environment(monkeypatch):
    monkeypatch.setenv(ENV_WORKERS, "3")
    assert GlobalConfig.from_env().workers == 3


def test_remote_scorer_needs_endpoint():
    with pytest.raises(ValidationError):
        GlobalConfig.from_env(environ={}, scorer="remote")


@pytest.mark.parametrize("values", [dict(workers=0), dict(max_in_flight=0), dict(output="xml")])
def test_invalid_values(values):
    with pytest.raises(ValidationError):
        GlobalConfig(**values)


@pytest.mark.parametrize("values", [dict(retries=-1), dict(backoff=-0.1), dict(timeout=0)])
def test_invalid_retry_policy(values):
    with pytest.raises(ValidationError):
        RetryPolicy(**values)
