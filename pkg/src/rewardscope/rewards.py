"""Reward model backends: pointwise and contrastive scoring.

Backends score (prompt, response) pairs. A contrastive backend scores a
pair of responses directly; any pointwise backend can be lifted to a
contrastive one via `contrastive_of_pointwise`, which is exact by
construction: score_contrastive(x, a, b) == score(x, a) - score(x, b).
"""

from __future__ import annotations

import math
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .cache import DiskCache, content_key
from .errors import ConfigError, ScoringError


class RewardBackend(ABC):
    @abstractmethod
    def score(self, prompt: str, response: str) -> float:
        """Pointwise reward for one (prompt, response) pair."""

    def score_contrastive(self, prompt: str, response_a: str, response_b: str) -> float:
        raise ScoringError(
            f"backend {self.fingerprint()!r} does not support contrastive scoring"
        )

    def supports_contrastive(self) -> bool:
        return False

    @abstractmethod
    def fingerprint(self) -> str:
        """Stable identifier of the scoring model and configuration."""


class ConstantReward(RewardBackend):
    def __init__(self, value: float):
        self.value = float(value)

    def score(self, prompt: str, response: str) -> float:
        return self.value

    def fingerprint(self) -> str:
        return f"mock:constant:{self.value!r}"


class LengthScaledReward(RewardBackend):
    """Character count of the response divided by a fixed divisor."""

    def __init__(self, divisor: float):
        if divisor == 0:
            raise ConfigError("length_scaled divisor must be non-zero")
        self.divisor = float(divisor)

    def score(self, prompt: str, response: str) -> float:
        return len(response) / self.divisor

    def fingerprint(self) -> str:
        return f"mock:length_scaled:{self.divisor!r}"


class KeywordBonusReward(RewardBackend):
    """Base reward plus a bonus when the keyword occurs in the response."""

    def __init__(self, word: str, bonus: float, base: float = 0.0):
        if not word:
            raise ConfigError("keyword_bonus word must be non-empty")
        self.word = word
        self.bonus = float(bonus)
        self.base = float(base)

    def score(self, prompt: str, response: str) -> float:
        return self.base + (self.bonus if self.word in response else 0.0)

    def fingerprint(self) -> str:
        return f"mock:keyword_bonus:{self.word}:{self.bonus!r}:{self.base!r}"


class ContrastiveOfPointwise(RewardBackend):
    """Lifts a pointwise backend to contrastive scoring by subtraction."""

    def __init__(self, inner: RewardBackend):
        self.inner = inner

    def score(self, prompt: str, response: str) -> float:
        return self.inner.score(prompt, response)

    def score_contrastive(self, prompt: str, response_a: str, response_b: str) -> float:
        return self.inner.score(prompt, response_a) - self.inner.score(prompt, response_b)

    def supports_contrastive(self) -> bool:
        return True

    def fingerprint(self) -> str:
        return f"contrastive({self.inner.fingerprint()})"


def contrastive_of_pointwise(backend: RewardBackend) -> ContrastiveOfPointwise:
    return ContrastiveOfPointwise(backend)


class HttpRewardBackend(RewardBackend):
    """Client for a reward-scoring HTTP service.

    Protocol: POST {base}/v1/score with {"prompt", "response"} returns
    {"reward": number}; POST {base}/v1/score_contrastive with {"prompt",
    "response_a", "response_b"} likewise; GET {base}/v1/healthz returns
    {"status": "ok", "model_fingerprint": str}. Errors carry {"error": str}.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        fingerprint_pin: str | None = None,
        bearer_token_env: str | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.fingerprint_pin = fingerprint_pin
        self.bearer_token_env = bearer_token_env
        self._sleep = sleep
        self._remote_fingerprint: str | None = None

    def _headers(self) -> dict[str, str]:
        import os

        headers = {"Content-Type": "application/json"}
        if self.bearer_token_env:
            token = os.environ.get(self.bearer_token_env)
            if not token:
                raise ConfigError(
                    f"environment variable {self.bearer_token_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, path: str, payload: dict) -> float:
        import requests

        url = f"{self.base_url}{path}"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                resp = requests.post(
                    url, json=payload, headers=self._headers(), timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = ScoringError(f"server error {resp.status_code} from {url}")
                continue
            if resp.status_code >= 400:
                try:
                    detail = resp.json().get("error", "")
                except Exception:
                    detail = resp.text[:200]
                raise ScoringError(
                    f"reward service rejected request ({resp.status_code}): {detail}"
                )
            try:
                reward = resp.json()["reward"]
            except Exception as exc:
                raise ScoringError(f"malformed reward response from {url}: {exc}") from exc
            if not isinstance(reward, (int, float)) or isinstance(reward, bool):
                raise ScoringError(f"reward service returned a non-numeric reward: {reward!r}")
            return float(reward)
        raise ScoringError(
            f"scoring request failed after {self.max_attempts} attempts: {last_error}"
        ) from last_error

    def score(self, prompt: str, response: str) -> float:
        return self._post("/v1/score", {"prompt": prompt, "response": response})

    def score_contrastive(self, prompt: str, response_a: str, response_b: str) -> float:
        return self._post(
            "/v1/score_contrastive",
            {"prompt": prompt, "response_a": response_a, "response_b": response_b},
        )

    def supports_contrastive(self) -> bool:
        return True

    def healthz(self) -> dict:
        import requests

        try:
            resp = requests.get(f"{self.base_url}/v1/healthz", timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except Exception as exc:
            raise ScoringError(f"health check failed for {self.base_url}: {exc}") from exc

    def fingerprint(self) -> str:
        if self.fingerprint_pin:
            return self.fingerprint_pin
        if self._remote_fingerprint is None:
            self._remote_fingerprint = str(self.healthz().get("model_fingerprint", self.base_url))
        return self._remote_fingerprint


class CountingBackend(RewardBackend):
    """Delegating wrapper that counts scoring calls; for cache assertions."""

    def __init__(self, inner: RewardBackend):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def score(self, prompt: str, response: str) -> float:
        with self._lock:
            self.calls += 1
        return self.inner.score(prompt, response)

    def score_contrastive(self, prompt: str, response_a: str, response_b: str) -> float:
        with self._lock:
            self.calls += 1
        return self.inner.score_contrastive(prompt, response_a, response_b)

    def supports_contrastive(self) -> bool:
        return self.inner.supports_contrastive()

    def fingerprint(self) -> str:
        return self.inner.fingerprint()


def _checked(value: float, item_id: str) -> float:
    if not math.isfinite(value):
        raise ScoringError(f"non-finite reward {value!r} for item {item_id!r}")
    return value


def score_batch(
    backend: RewardBackend,
    items: Sequence[tuple[str, str]],
    *,
    cache: DiskCache | None = None,
    parallelism: int = 4,
    ids: Sequence[str] | None = None,
) -> list[float]:
    """Score (prompt, response) pairs; output order matches input order.

    Results are cached by (backend fingerprint, prompt, response). Non-finite
    rewards abort with the offending item's id.
    """
    n = len(items)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    fp = backend.fingerprint()
    out: list[float] = [0.0] * n

    def work(idx: int) -> None:
        prompt, response = items[idx]
        if cache is None:
            value = backend.score(prompt, response)
        else:
            key = content_key("score", fp, prompt, response)
            value = float(
                cache.get_or_compute(key, lambda: repr(backend.score(prompt, response)))
            )
        out[idx] = _checked(value, ids[idx])

    if parallelism <= 1 or n <= 1:
        for i in range(n):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(work, range(n)))
    return out


def score_contrastive_batch(
    backend: RewardBackend,
    items: Sequence[tuple[str, str, str]],
    *,
    cache: DiskCache | None = None,
    parallelism: int = 4,
    ids: Sequence[str] | None = None,
) -> list[float]:
    """Contrastive analog of `score_batch` over (prompt, a, b) triples."""
    n = len(items)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    fp = backend.fingerprint()
    out: list[float] = [0.0] * n

    def work(idx: int) -> None:
        prompt, a, b = items[idx]
        if cache is None:
            value = backend.score_contrastive(prompt, a, b)
        else:
            key = content_key("score_contrastive", fp, prompt, a, b)
            value = float(
                cache.get_or_compute(key, lambda: repr(backend.score_contrastive(prompt, a, b)))
            )
        out[idx] = _checked(value, ids[idx])

    if parallelism <= 1 or n <= 1:
        for i in range(n):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(work, range(n)))
    return out


@dataclass(frozen=True)
class MockRewardSpec:
    """Config-level description of a mock backend."""

    kind: str
    params: dict


def make_mock_backend(kind: str, params: dict) -> RewardBackend:
    """Factory for the built-in mock reward kinds."""
    if kind == "constant":
        return ConstantReward(params["value"])
    if kind == "length_scaled":
        return LengthScaledReward(params["divisor"])
    if kind == "keyword_bonus":
        return KeywordBonusReward(
            params["word"], params["bonus"], params.get("base", 0.0)
        )
    if kind == "additive_latent":
        from .synthetic import AdditiveLatentReward

        return AdditiveLatentReward.from_params(params)
    raise ConfigError(f"unknown mock reward kind {kind!r}")
