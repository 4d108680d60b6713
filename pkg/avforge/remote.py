"""
HTTP clients for remote scoring, judging and text generation.

All three speak JSON over POST and share one retry loop: transport errors,
non-200 replies and malformed bodies are retried with exponential backoff
and surfaced as a distinct exception once the retries are used up.
"""

import logging
import math
import time

import requests

from .config import RetryPolicy

_log = logging.getLogger(__name__)

SCORE_ROUTE = "/v1/score"
JUDGE_ROUTE = "/v1/judge"
GENERATE_ROUTE = "/v1/generate"


class RemoteException(RuntimeError):
    pass


class RemoteFailedException(RemoteException):
    pass


class MalformedResponseException(RemoteException):
    pass


class QuotaExhaustedException(RemoteException):
    pass


class JsonClient:
    def __init__(self, endpoint, retry=None, session=None):
        if not endpoint:
            raise ValueError("An endpoint URL is required.")
        self.endpoint = endpoint.rstrip("/")
        self.retry = RetryPolicy() if retry is None else retry
        self.session = requests.Session() if session is None else session

    def post(self, route, payload, parse):
        """
        POST `payload` to `route` and return `parse(body)`. `parse` raises
        MalformedResponseException for bodies it cannot interpret.
        """
        url = f"{self.endpoint}{route}"
        error = None
        for attempt in range(self.retry.retries + 1):
            if attempt > 0:
                time.sleep(self.retry.backoff * 2 ** (attempt - 1))
            try:
                response = self.session.post(url, json=payload, timeout=self.retry.timeout)
            except requests.RequestException as exc:
                error = RemoteFailedException(f"POST {url} failed: {exc}")
            else:
                if response.status_code == 429:
                    error = QuotaExhaustedException(f"POST {url} was rejected: quota exhausted (HTTP 429).")
                elif response.status_code != 200:
                    error = RemoteFailedException(f"POST {url} returned HTTP {response.status_code}.")
                else:
                    try:
                        return parse(response.json())
                    except ValueError as exc:
                        error = MalformedResponseException(f"POST {url} returned a body that is not JSON: {exc}")
                    except MalformedResponseException as exc:
                        error = exc
            _log.warning(f"Attempt {attempt + 1} of {self.retry.retries + 1}: {error}")
        raise error


def _parse_logprobs(body):
    if not isinstance(body, dict):
        raise MalformedResponseException("Score response must be a JSON object.")
    logprobs = body.get("logprobs")
    if not isinstance(logprobs, list) or len(logprobs) == 0:
        raise MalformedResponseException("Score response must carry a non-empty 'logprobs' list.")
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in logprobs):
        raise MalformedResponseException("'logprobs' must contain finite numbers only.")
    token_count = body.get("token_count", len(logprobs))
    if token_count != len(logprobs):
        raise MalformedResponseException(
            f"'token_count' is {token_count}, but {len(logprobs)} log-probabilities were returned."
        )
    return [float(x) for x in logprobs]


def _parse_label(body):
    if not isinstance(body, dict) or not isinstance(body.get("label"), str):
        raise MalformedResponseException("Judge response must carry a string 'label'.")
    return body["label"]


def _parse_text(body):
    if not isinstance(body, dict) or not isinstance(body.get("text"), str):
        raise MalformedResponseException("Generation response must carry a string 'text'.")
    return body["text"]


class ScoringClient(JsonClient):
    def logprobs(self, prompt, completion):
        """Per-token natural-log probabilities of `completion` as returned by the server."""
        return self.post(SCORE_ROUTE, {"prompt": prompt, "completion": completion}, _parse_logprobs)


class JudgeClient(JsonClient):
    def judge(self, query, response, labels):
        return self.post(JUDGE_ROUTE, {"query": query, "response": response, "labels": list(labels)}, _parse_label)


class GenerationClient(JsonClient):
    def __init__(self, endpoint, retry=None, session=None, max_tokens=1024):
        super().__init__(endpoint, retry=retry, session=session)
        self.max_tokens = max_tokens

    def generate(self, prompt):
        return self.post(GENERATE_ROUTE, {"prompt": prompt, "max_tokens": self.max_tokens}, _parse_text)
