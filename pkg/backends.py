"""
Completion backends. Every backend exposes `identity` and
`complete(prompt, max_new_tokens, params) -> str`.
"""
import copy
import hashlib
import json
import logging
import os
import threading
import time

import requests
from tenacity import (before_sleep_log, retry, retry_if_exception_type,
                      stop_after_attempt, wait_exponential)

from errors import BackendError, ConfigError, TransientBackendError
from paraphrase_engine import SpinMode, SpinPolicy, prompt_target, spin

logger = logging.getLogger(__name__)

API_KEY_ENV = 'PARAFORGE_API_KEY'
TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class MockBackend:
    """
    Deterministic stand-in. With `responses` it returns them in turn, chosen by the
    request seed; with echo=True it returns the prompt's target unchanged.
    """

    def __init__(self, responses=None, echo=False, name='mock'):
        if not echo and not responses:
            raise ConfigError("mock backend needs responses or echo=True")
        self.responses = list(responses or [])
        self.echo = echo
        self.identity = f"{name}:echo" if echo else f"{name}:{_short_hash(self.responses)}"

    def complete(self, prompt, max_new_tokens, params, target=None):
        if self.echo:
            return prompt_target(prompt) if target is None else target
        return self.responses[params.seed % len(self.responses)]


class SpinnerBackend:
    """Rule-based paraphraser: spins the prompt's target with a synonym table."""

    def __init__(self, policy):
        self.policy = policy
        self.identity = (f"spinner:{policy.mode.value}:k{policy.period}:p{policy.prob}:"
                         f"{_short_hash(sorted(policy.synonym_table.items()))}")

    def complete(self, prompt, max_new_tokens, params, target=None):
        seed = params.seed if self.policy.mode is SpinMode.PROBABILITY else 0
        return spin(prompt_target(prompt) if target is None else target, self.policy, seed=seed)


class RateLimiter:
    """Spaces calls so that no more than `per_minute` start in any minute."""

    def __init__(self, per_minute):
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._lock = threading.Lock()
        self._next_slot = 0.0

    def wait(self):
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next_slot)
            self._next_slot = slot + self.interval
        if slot > now:
            time.sleep(slot - now)


def fill_template(template, values):
    """Substitutes {{name}} placeholders in every string of a JSON-like template."""
    if isinstance(template, dict):
        return {key: fill_template(value, values) for key, value in template.items()}
    if isinstance(template, list):
        return [fill_template(value, values) for value in template]
    if isinstance(template, str):
        for name, value in values.items():
            placeholder = '{{' + name + '}}'
            if template == placeholder:
                # A bare placeholder keeps the value's JSON type.
                return value
            template = template.replace(placeholder, str(value))
    return template


def extract_path(document, path):
    """Follows a slash-separated key/index path such as 'choices/0/text'."""
    current = document
    for part in [p for p in path.split('/') if p]:
        try:
            current = current[int(part)] if isinstance(current, list) else current[part]
        except (KeyError, IndexError, ValueError, TypeError) as e:
            raise BackendError(f"response has no '{part}' along path '{path}'") from e
    if not isinstance(current, str):
        raise BackendError(f"value at '{path}' is {type(current).__name__}, expected text")
    return current


class RemoteBackend:
    """HTTP JSON completion endpoint configured by a body template and a response path."""

    def __init__(self, endpoint, body_template, response_path, name='remote',
                 requests_per_minute=60, timeout=60.0, max_attempts=5, session=None):
        self.endpoint = endpoint
        self.body_template = copy.deepcopy(body_template)
        self.response_path = response_path
        self.timeout = timeout
        self.identity = f"{name}:{endpoint}"
        self._limiter = RateLimiter(requests_per_minute)
        self._session = session or requests.Session()
        self._api_key = os.environ.get(API_KEY_ENV)
        if not self._api_key:
            logger.warning("%s is not set; requests to %s go out unauthenticated", API_KEY_ENV, endpoint)
        self._post = retry(
            stop=stop_after_attempt(max_attempts),
            wait=wait_exponential(multiplier=1, min=1, max=30),
            retry=retry_if_exception_type(TransientBackendError),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )(self._post_once)

    def _post_once(self, body):
        self._limiter.wait()
        headers = {'Content-Type': 'application/json'}
        if self._api_key:
            headers['Authorization'] = f"Bearer {self._api_key}"
        try:
            response = self._session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            raise TransientBackendError(f"request failed: {e}", self.identity) from e
        if response.status_code in TRANSIENT_STATUS:
            raise TransientBackendError(f"HTTP {response.status_code}", self.identity)
        if response.status_code >= 400:
            raise BackendError(f"HTTP {response.status_code}: {response.text[:200]}", self.identity)
        try:
            return response.json()
        except ValueError as e:
            raise BackendError(f"response is not JSON: {e}", self.identity) from e

    def complete(self, prompt, max_new_tokens, params, target=None):
        body = fill_template(self.body_template, {
            'prompt': prompt,
            'max_tokens': max_new_tokens,
            'temperature': params.temperature,
            'seed': params.seed,
        })
        return extract_path(self._post(body), self.response_path)


def _short_hash(value):
    return hashlib.sha256(json.dumps(value, sort_keys=True).encode('utf-8')).hexdigest()[:12]


def make_backend(config, synonym_table=None):
    """Builds a backend from a BackendConfig section."""
    if config.kind == 'mock':
        return MockBackend(responses=config.responses, echo=config.echo)
    if config.kind == 'spinner':
        policy = SpinPolicy(period=config.spin_period, synonym_table=synonym_table or {},
                            mode=SpinMode(config.spin_mode), prob=config.spin_prob)
        return SpinnerBackend(policy)
    if config.kind == 'remote':
        if not config.endpoint:
            raise ConfigError(f"remote backend '{config.name}' needs an endpoint")
        return RemoteBackend(config.endpoint, config.body_template, config.response_path,
                             name=config.name, requests_per_minute=config.requests_per_minute,
                             timeout=config.timeout)
    raise ConfigError(f"unknown backend kind '{config.kind}'")
