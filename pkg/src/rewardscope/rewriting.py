"""Counterfactual rewriting of responses via chat-completion clients.

The central operation is the double rewrite: every response is rewritten to
the opposite attribute value, and that rewrite is rewritten back to the
original value. Comparing the two rewrites (instead of rewrite vs original)
keeps the rewriter's stylistic artifacts on both sides of the contrast.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .cache import DiskCache, canonical_json, content_key
from .data import Dataset, LabeledExample
from .errors import (
    BatchRewriteError,
    ConfigError,
    EmptyCompletionError,
    RewriteError,
    RewriteRefusalError,
)

log = logging.getLogger(__name__)

PLACEHOLDER = "{W}"

# Deliberately narrow: a rewrite of an apology can legitimately start with
# "I'm sorry", so only unambiguous refusal phrasings are matched by default.
DEFAULT_REFUSAL_PATTERNS = (
    r"(?i)\bI(?:'m| am) sorry,? but I (?:can(?:no|')t|cannot|won't|will not)\b",
    r"(?i)\bI (?:can(?:no|')t|cannot) (?:assist|help|comply) with\b",
    r"(?i)\bI(?:'m| am) (?:unable|not able) to (?:assist|help|comply|rewrite)\b",
    r"(?i)\bas an AI(?: language model)?\b.{0,40}\b(?:can(?:no|')t|cannot|won't)\b",
)


@dataclass(frozen=True, slots=True)
class RewriteInstruction:
    """Template for asking a rewriter to flip one attribute and nothing else.

    `template` must contain the placeholder {W} exactly once; rendering
    substitutes the description of the targeted attribute value and appends
    `extra_rules` verbatim when present.
    """

    attribute_name: str
    description_w1: str
    description_w0: str
    template: str
    extra_rules: str | None = None

    def __post_init__(self) -> None:
        if self.template.count(PLACEHOLDER) != 1:
            raise ConfigError(
                f"instruction template must contain {PLACEHOLDER} exactly once, "
                f"found {self.template.count(PLACEHOLDER)}"
            )

    def render(self, target_w: int) -> str:
        if target_w not in (0, 1):
            raise ConfigError(f"rewrite target must be 0 or 1, got {target_w!r}")
        desc = self.description_w1 if target_w == 1 else self.description_w0
        text = self.template.replace(PLACEHOLDER, desc)
        if self.extra_rules:
            text = f"{text} {self.extra_rules}"
        return text

    def digest(self) -> str:
        return content_key(
            self.attribute_name,
            self.description_w1,
            self.description_w0,
            self.template,
            self.extra_rules or "",
        )


class ChatClient(ABC):
    """Minimal chat-completion interface used for rewriting."""

    @abstractmethod
    def complete(self, system_instruction: str, user_text: str, decode_params: dict) -> str:
        """Return the completion text for one system+user exchange."""

    @abstractmethod
    def fingerprint(self) -> str:
        """Stable identifier of the client configuration (never secrets)."""


class IdentityStubClient(ChatClient):
    """Echoes the input back; useful for null-effect checks."""

    def complete(self, system_instruction: str, user_text: str, decode_params: dict) -> str:
        return user_text

    def fingerprint(self) -> str:
        return "stub:identity"


class CallableStubClient(ChatClient):
    """Wraps a plain function (system, user, target-free) for tests."""

    def __init__(self, fn: Callable[[str, str], str], name: str = "callable"):
        self._fn = fn
        self._name = name

    def complete(self, system_instruction: str, user_text: str, decode_params: dict) -> str:
        return self._fn(system_instruction, user_text)

    def fingerprint(self) -> str:
        return f"stub:{self._name}"


def instruction_key(rendered_instruction: str) -> str:
    """Lookup key for scripted stub tables: hash of the rendered instruction."""
    return hashlib.sha256(rendered_instruction.encode("utf-8")).hexdigest()[:16]


class ScriptedStubClient(ChatClient):
    """Replays completions from a JSON lookup table.

    The table maps instruction_key(rendered instruction) -> {input text ->
    output text}. A "*" instruction key acts as a fallback for any
    instruction. Missing entries raise, so fixtures stay exact.
    """

    def __init__(self, table: dict[str, dict[str, str]], name: str = "scripted"):
        self._table = table
        self._name = name
        self._digest = hashlib.sha256(
            canonical_json(table).encode("utf-8")
        ).hexdigest()[:16]

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedStubClient":
        path = Path(path)
        try:
            table = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load scripted stub table {path}: {exc}") from exc
        if not isinstance(table, dict):
            raise ConfigError(f"scripted stub table {path} must be a JSON object")
        return cls(table, name=path.stem)

    def complete(self, system_instruction: str, user_text: str, decode_params: dict) -> str:
        key = instruction_key(system_instruction)
        for section_key in (key, "*"):
            section = self._table.get(section_key)
            if section is not None and user_text in section:
                return section[user_text]
        raise RewriteError(
            f"scripted stub has no entry for instruction key {key!r} "
            f"and input {user_text[:60]!r}"
        )

    def fingerprint(self) -> str:
        return f"stub:scripted:{self._digest}"


class CountingClient(ChatClient):
    """Delegating wrapper that counts completions; for cache-hit assertions."""

    def __init__(self, inner: ChatClient):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, system_instruction: str, user_text: str, decode_params: dict) -> str:
        with self._lock:
            self.calls += 1
        return self.inner.complete(system_instruction, user_text, decode_params)

    def fingerprint(self) -> str:
        return self.inner.fingerprint()


class HttpChatClient(ChatClient):
    """OpenAI-style chat-completions client over HTTP.

    Retries transport failures with exponential backoff. The API key is read
    from the named environment variable at call time and never enters the
    fingerprint or any persisted artifact.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str | None = None,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        import os

        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise ConfigError(
                    f"environment variable {self.api_key_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, system_instruction: str, user_text: str, decode_params: dict) -> str:
        import requests

        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_instruction},
                {"role": "user", "content": user_text},
            ],
            **decode_params,
        }
        url = f"{self.base_url}/chat/completions"
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
                last_error = RewriteError(f"server error {resp.status_code} from {url}")
                continue
            if resp.status_code >= 400:
                raise RewriteError(
                    f"rewriter rejected the request ({resp.status_code}): {resp.text[:200]}"
                )
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:
                raise RewriteError(f"malformed completion response from {url}: {exc}") from exc
        raise RewriteError(
            f"rewrite request failed after {self.max_attempts} attempts: {last_error}"
        ) from last_error

    def fingerprint(self) -> str:
        return "httpchat:" + content_key(self.base_url, self.model)[:16]


@dataclass(frozen=True, slots=True)
class RewriteRecord:
    """A response with its rewrite and rewrite-of-rewrite.

    `rewrite` targets 1 - example.label; `rewrite2` re-targets example.label.
    Both texts are non-empty. `meta` holds timestamps and whatever usage
    metadata the client surfaced.
    """

    example: LabeledExample
    rewrite: str
    rewrite2: str
    rewriter_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.rewrite or not self.rewrite2:
            raise RewriteError(
                f"example {self.example.id!r}: rewrites must be non-empty"
            )


def rewriter_identity(client: ChatClient, instruction: RewriteInstruction) -> str:
    """Stable id of the (client config, instruction) pair."""
    return content_key(client.fingerprint(), instruction.digest())[:16]


def _detect_refusal(text: str, patterns: Sequence[str]) -> str | None:
    for pat in patterns:
        if re.search(pat, text):
            return pat
    return None


def rewrite_once(
    client: ChatClient,
    instruction: RewriteInstruction,
    text: str,
    target_w: int,
    *,
    cache: DiskCache | None = None,
    decode_params: dict | None = None,
    refusal_patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS,
    prompt: str = "",
    include_prompt: bool = False,
) -> str:
    """One rewrite hop. Returns the rewritten text.

    By default only the response is sent to the rewriter; `include_prompt`
    opts into prepending the prompt for context. Results are cached by
    (client fingerprint, rendered instruction, input text, decode params),
    with at most one in-flight request per key.
    """
    decode_params = decode_params or {}
    system_instruction = instruction.render(target_w)
    if include_prompt and prompt:
        user_text = f"Prompt:\n{prompt}\n\nResponse:\n{text}"
    else:
        user_text = text

    def fetch() -> str:
        completion = client.complete(system_instruction, user_text, decode_params).strip()
        if not completion:
            raise EmptyCompletionError("rewriter returned an empty completion")
        matched = _detect_refusal(completion, refusal_patterns)
        if matched:
            raise RewriteRefusalError(
                f"rewriter refused (matched pattern {matched!r}): {completion[:120]!r}"
            )
        return completion

    if cache is None:
        return fetch()
    key = content_key(
        client.fingerprint(), system_instruction, user_text, decode_params
    )
    return cache.get_or_compute(key, fetch)


def double_rewrite(
    client: ChatClient,
    instruction: RewriteInstruction,
    example: LabeledExample,
    *,
    cache: DiskCache | None = None,
    decode_params: dict | None = None,
    refusal_patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS,
    include_prompt: bool = False,
) -> RewriteRecord:
    """Rewrite to the opposite attribute value, then back to the original."""
    kwargs = dict(
        cache=cache,
        decode_params=decode_params,
        refusal_patterns=refusal_patterns,
        prompt=example.prompt,
        include_prompt=include_prompt,
    )
    try:
        first = rewrite_once(
            client, instruction, example.response, 1 - example.label, **kwargs
        )
    except RewriteError as exc:
        raise type(exc)(f"example {example.id!r}, first hop: {exc}") from exc
    try:
        second = rewrite_once(client, instruction, first, example.label, **kwargs)
    except RewriteError as exc:
        raise type(exc)(f"example {example.id!r}, second hop: {exc}") from exc
    return RewriteRecord(
        example=example,
        rewrite=first,
        rewrite2=second,
        rewriter_id=rewriter_identity(client, instruction),
        meta={"created_at": time.time()},
    )


@dataclass
class BatchRewriteResult:
    """Successful records in input order plus (id, reason) failures."""

    records: list[RewriteRecord]
    failures: list[tuple[str, str]]

    @property
    def n_failed(self) -> int:
        return len(self.failures)


def batch_rewrite(
    client: ChatClient,
    instruction: RewriteInstruction,
    dataset: Dataset | Sequence[LabeledExample],
    *,
    cache: DiskCache | None = None,
    parallelism: int = 4,
    failure_threshold: float = 0.0,
    decode_params: dict | None = None,
    refusal_patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS,
    include_prompt: bool = False,
    on_progress: Callable[[int, int], None] | None = None,
) -> BatchRewriteResult:
    """Double-rewrite a whole dataset with bounded concurrency.

    Output order matches input order. Per-example failures are collected;
    if the failed fraction exceeds `failure_threshold` the whole batch
    raises with the failure report attached.
    """
    examples = list(dataset)
    total = len(examples)
    results: list[RewriteRecord | None] = [None] * total
    failures: list[tuple[int, str, str]] = []
    done = 0
    progress_lock = threading.Lock()

    def work(idx: int) -> None:
        nonlocal done
        ex = examples[idx]
        try:
            results[idx] = double_rewrite(
                client,
                instruction,
                ex,
                cache=cache,
                decode_params=decode_params,
                refusal_patterns=refusal_patterns,
                include_prompt=include_prompt,
            )
        except RewriteError as exc:
            failures.append((idx, ex.id, str(exc)))
        with progress_lock:
            done += 1
            if on_progress is not None:
                on_progress(done, total)

    if parallelism <= 1:
        for i in range(total):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(work, range(total)))

    failures.sort()
    failed = [(ex_id, reason) for _, ex_id, reason in failures]
    if total and len(failed) / total > failure_threshold:
        raise BatchRewriteError(
            f"{len(failed)}/{total} rewrites failed "
            f"(threshold {failure_threshold:.0%}); first: {failed[0][0]!r}: {failed[0][1]}",
            failed,
        )
    records = [r for r in results if r is not None]
    return BatchRewriteResult(records=records, failures=failed)
