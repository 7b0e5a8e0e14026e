"""LLM endpoint client with retry/backoff, configured through the environment.

Variables: RETFIT_LLM_BASE_URL (required; an OpenAI-style /chat/completions
is appended), RETFIT_LLM_MODEL (required), RETFIT_LLM_API_KEY (optional),
RETFIT_LLM_TIMEOUT, RETFIT_LLM_MAX_RETRIES, RETFIT_LLM_BACKOFF_BASE.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import requests

from . import ModelError, UsageError

logger = logging.getLogger(__name__)


@dataclass
class LlmConfig:
    base_url: str
    model: str
    api_key: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5

    @classmethod
    def from_env(cls) -> "LlmConfig":
        base_url = os.environ.get("RETFIT_LLM_BASE_URL")
        model = os.environ.get("RETFIT_LLM_MODEL")
        if not base_url or not model:
            raise UsageError(
                "query generation needs RETFIT_LLM_BASE_URL and RETFIT_LLM_MODEL set"
            )
        return cls(
            base_url=base_url.rstrip("/"),
            model=model,
            api_key=os.environ.get("RETFIT_LLM_API_KEY"),
            timeout=float(os.environ.get("RETFIT_LLM_TIMEOUT", "60")),
            max_retries=int(os.environ.get("RETFIT_LLM_MAX_RETRIES", "3")),
            backoff_base=float(os.environ.get("RETFIT_LLM_BACKOFF_BASE", "0.5")),
        )


class LlmClient:
    """Chat-completion calls with exponential backoff on transient failures."""

    RETRYABLE_STATUS = {429, 500, 502, 503, 504}

    def __init__(self, config: LlmConfig):
        self.config = config
        self.session = requests.Session()

    def complete(self, prompt: str, deterministic: bool = True) -> str:
        cfg = self.config
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0 if deterministic else 0.7,
        }
        url = f"{cfg.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                delay = cfg.backoff_base * (2 ** (attempt - 1))
                logger.warning("retrying LLM call in %.2fs (attempt %d)", delay, attempt + 1)
                time.sleep(delay)
            try:
                response = self.session.post(url, json=payload, headers=headers, timeout=cfg.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code in self.RETRYABLE_STATUS:
                last_error = ModelError(f"endpoint returned {response.status_code}")
                continue
            if response.status_code != 200:
                raise ModelError(f"endpoint returned {response.status_code}: {response.text[:200]}")
            try:
                return response.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as exc:
                raise ModelError(f"malformed endpoint response: {exc}") from exc
        raise ModelError(f"endpoint failed after {cfg.max_retries + 1} attempts: {last_error}")
