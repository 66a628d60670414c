"""Served reward models.

Two kinds. The formula model is a fixed arithmetic rule with no
dependencies, meant for integration tests against the wire protocol. The
classifier model wraps a pinned sequence classifier and serves its
positive-class probability; it imports torch/transformers lazily so the
formula path stays dependency-free.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass


class ModelError(Exception):
    """Scoring failed inside the served model (reported as HTTP 500)."""


def _digest(*parts: str) -> str:
    return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class FormulaModel:
    """reward = length_coef * len(response) + bonus * [keyword in response].

    Pure arithmetic on the response text; the prompt is accepted but does
    not enter the formula. Deterministic by construction.
    """

    length_coef: float = 0.001
    keyword: str = "best"
    bonus: float = 0.2

    @property
    def kind(self) -> str:
        return "formula"

    def fingerprint(self) -> str:
        spec = _digest("formula", repr(self.length_coef), self.keyword, repr(self.bonus))
        return f"formula:{spec}"

    def score(self, prompt: str, response: str) -> dict:
        reward = self.length_coef * len(response)
        if self.keyword in response:
            reward += self.bonus
        return {"reward": reward}


class ClassifierModel:
    """Positive-class probability of a pinned sequence classifier.

    The prompt is ignored: the classifier judges the response text alone.
    Inputs longer than the model context are truncated, and the response
    body says so in a "truncated" field. Inference runs under no_grad on
    the configured device; with a fixed revision, repeated scores agree to
    well under 1e-6.
    """

    def __init__(
        self,
        model_id: str = "distilbert-base-uncased-finetuned-sst-2-english",
        revision: str = "af0f99b",
        device: str = "cpu",
    ):
        import torch
        from transformers import AutoModelForSequenceClassification, AutoTokenizer

        self._torch = torch
        self.model_id = model_id
        self.revision = revision
        self.device = device
        self.tokenizer = AutoTokenizer.from_pretrained(model_id, revision=revision)
        self.model = AutoModelForSequenceClassification.from_pretrained(
            model_id, revision=revision
        )
        self.model.to(device)
        self.model.eval()
        self.max_length = int(min(self.tokenizer.model_max_length, 4096))
        labels = getattr(self.model.config, "id2label", None) or {}
        self.positive_index = next(
            (int(i) for i, name in labels.items() if str(name).upper().startswith("POS")),
            self.model.config.num_labels - 1,
        )

    @property
    def kind(self) -> str:
        return "classifier"

    def fingerprint(self) -> str:
        return f"classifier:{_digest('classifier', self.model_id, self.revision)}"

    def score(self, prompt: str, response: str) -> dict:
        del prompt
        try:
            full = self.tokenizer(response, truncation=False, return_tensors="pt")
            truncated = full["input_ids"].shape[1] > self.max_length
            inputs = self.tokenizer(
                response,
                truncation=True,
                max_length=self.max_length,
                return_tensors="pt",
            ).to(self.device)
            with self._torch.no_grad():
                logits = self.model(**inputs).logits
            probs = self._torch.softmax(logits, dim=-1)
        except Exception as exc:
            raise ModelError(f"classifier inference failed: {exc}") from exc
        return {"reward": float(probs[0, self.positive_index].item()), "truncated": truncated}


def build_model(kind: str, **kwargs):
    if kind == "formula":
        return FormulaModel(**kwargs)
    if kind == "classifier":
        return ClassifierModel(**kwargs)
    raise ValueError(f"unknown model kind {kind!r}")
