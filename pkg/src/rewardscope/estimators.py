"""Treatment-effect estimators over scored rewrite records.

Three families, all contrasting rewards for a binary response attribute W:

* naive: difference in mean original rewards between the two label classes.
  Confounded by anything correlated with W.
* single-rewrite: each original is compared against its own rewrite to the
  opposite attribute value. Controls confounders but inherits the rewriter's
  stylistic shift on exactly one side of the contrast.
* double-rewrite: the rewrite is rewritten back to the original attribute
  value, and the two rewrites are compared. Both sides of the contrast have
  passed through the rewriter once, so its additive artifacts cancel.

Per-record summands (w = example label, R = reward):
  double-rewrite, w=1:  R(rewrite2) - R(rewrite)     # both sides rewritten
  double-rewrite, w=0:  R(rewrite)  - R(rewrite2)
  single-rewrite, w=1:  R(original) - R(rewrite)
  single-rewrite, w=0:  R(rewrite)  - R(original)

ATT averages summands over w=1, ATU over w=0, and ATE is their class-size
weighted average. Reductions use exactly rounded summation (math.fsum), so
estimates are invariant to record order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import IO, Sequence

from .errors import EstimationError
from .rewards import RewardBackend, score_batch, score_contrastive_batch
from .rewriting import RewriteRecord

NAIVE = "naive"
SINGLE_ATT = "single_ATT"
SINGLE_ATU = "single_ATU"
SINGLE_ATE = "single_ATE"
RATE_ATT = "rate_ATT"
RATE_ATU = "rate_ATU"
RATE_ATE = "rate_ATE"
CONTRASTIVE_RATE_ATT = "contrastive_rate_ATT"
CONTRASTIVE_RATE_ATU = "contrastive_rate_ATU"
CONTRASTIVE_RATE_ATE = "contrastive_rate_ATE"

DEFAULT_CI_LEVEL = 0.95


@dataclass(frozen=True, slots=True)
class ScoredRecord:
    """A rewrite record with rewards for all three response variants."""

    record: RewriteRecord
    reward_original: float
    reward_rewrite: float
    reward_rewrite2: float
    backend_fingerprint: str

    @property
    def label(self) -> int:
        return self.record.example.label

    @property
    def id(self) -> str:
        return self.record.example.id


@dataclass(frozen=True, slots=True)
class EffectEstimate:
    """A point estimate with its normal-theory uncertainty summary."""

    estimand: str
    point: float
    se: float
    ci_low: float
    ci_high: float
    cohens_d: float | None
    n1: int
    n0: int

    def to_dict(self, backend_fingerprint: str = "", rewriter_id: str = "") -> dict:
        return {
            "estimand": self.estimand,
            "point": self.point,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "cohens_d": self.cohens_d,
            "n1": self.n1,
            "n0": self.n0,
            "backend_fingerprint": backend_fingerprint,
            "rewriter_id": rewriter_id,
        }


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _sample_sd(values: Sequence[float]) -> float:
    # n == 1 leaves the spread unidentified; reported as 0 by convention
    n = len(values)
    if n < 2:
        return 0.0
    m = _mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (n - 1))


def _check_finite(value: float, record_id: str, field: str) -> float:
    if not math.isfinite(value):
        raise EstimationError(f"record {record_id!r}: non-finite {field} ({value!r})")
    return value


def normal_ci(point: float, se: float, level: float = DEFAULT_CI_LEVEL) -> tuple[float, float]:
    """Normal-approximation confidence interval, point +/- z * se."""
    if not 0.0 < level < 1.0:
        raise EstimationError(f"confidence level must be in (0, 1), got {level}")
    z = NormalDist().inv_cdf((1.0 + level) / 2.0)
    return (point - z * se, point + z * se)


def cohens_d(point_estimate: float, arm_a: Sequence[float], arm_b: Sequence[float]) -> float:
    """Standardized effect size: point estimate over pooled arm SD.

    Pooled SD uses the classic (n_a - 1, n_b - 1)-weighted formula. Raises
    when the pooled variance is zero (d is undefined there).
    """
    n_a, n_b = len(arm_a), len(arm_b)
    if n_a + n_b < 3:
        raise EstimationError("cohens_d needs at least 3 observations across arms")
    s2_a = _sample_sd(arm_a) ** 2
    s2_b = _sample_sd(arm_b) ** 2
    pooled = ((n_a - 1) * s2_a + (n_b - 1) * s2_b) / (n_a + n_b - 2)
    if pooled <= 0.0:
        raise EstimationError("cohens_d is undefined: pooled variance is zero")
    return point_estimate / math.sqrt(pooled)


def _maybe_d(point: float, arm_a: Sequence[float], arm_b: Sequence[float]) -> float | None:
    try:
        return cohens_d(point, arm_a, arm_b)
    except EstimationError:
        return None


def _split(records: Sequence[ScoredRecord]) -> tuple[list[ScoredRecord], list[ScoredRecord]]:
    ones = [r for r in records if r.label == 1]
    zeros = [r for r in records if r.label == 0]
    if not ones or not zeros:
        raise EstimationError(
            f"both label classes must be non-empty (n1={len(ones)}, n0={len(zeros)})"
        )
    return ones, zeros


def _paired_estimate(
    estimand: str,
    summands: Sequence[float],
    n1: int,
    n0: int,
    level: float,
    arm_a: Sequence[float] | None = None,
    arm_b: Sequence[float] | None = None,
) -> EffectEstimate:
    point = _mean(summands)
    se = _sample_sd(summands) / math.sqrt(len(summands))
    low, high = normal_ci(point, se, level)
    d = _maybe_d(point, arm_a, arm_b) if arm_a is not None and arm_b is not None else None
    return EffectEstimate(estimand, point, se, low, high, d, n1, n0)


def _combine_ate(
    estimand: str,
    att: EffectEstimate,
    atu: EffectEstimate,
    level: float,
    arm_a: Sequence[float] | None = None,
    arm_b: Sequence[float] | None = None,
) -> EffectEstimate:
    """Class-size weighted average of ATT and ATU with stratified variance."""
    n1, n0 = att.n1, att.n0
    n = n1 + n0
    w1, w0 = n1 / n, n0 / n
    point = (n1 * att.point + n0 * atu.point) / n
    se = math.sqrt(w1 ** 2 * att.se ** 2 + w0 ** 2 * atu.se ** 2)
    low, high = normal_ci(point, se, level)
    d = _maybe_d(point, arm_a, arm_b) if arm_a is not None and arm_b is not None else None
    return EffectEstimate(estimand, point, se, low, high, d, n1, n0)


def score_records(
    records: Sequence[RewriteRecord],
    backend: RewardBackend,
    *,
    cache=None,
    parallelism: int = 4,
) -> list[ScoredRecord]:
    """Score all three text variants of each record with one backend.

    Items are batched in record order (original, rewrite, rewrite2), so
    cache keys and ids stay stable across runs.
    """
    items: list[tuple[str, str]] = []
    ids: list[str] = []
    for r in records:
        p, ex_id = r.example.prompt, r.example.id
        items += [(p, r.example.response), (p, r.rewrite), (p, r.rewrite2)]
        ids += [f"{ex_id}:original", f"{ex_id}:rewrite", f"{ex_id}:rewrite2"]
    scores = score_batch(backend, items, cache=cache, parallelism=parallelism, ids=ids)
    fp = backend.fingerprint()
    return [
        ScoredRecord(
            record=r,
            reward_original=scores[3 * i],
            reward_rewrite=scores[3 * i + 1],
            reward_rewrite2=scores[3 * i + 2],
            backend_fingerprint=fp,
        )
        for i, r in enumerate(records)
    ]


def naive_estimate(
    records: Sequence[ScoredRecord], level: float = DEFAULT_CI_LEVEL
) -> EffectEstimate:
    """Difference in mean original rewards across label classes (Welch SE)."""
    ones, zeros = _split(records)
    r1 = [_check_finite(r.reward_original, r.id, "reward_original") for r in ones]
    r0 = [_check_finite(r.reward_original, r.id, "reward_original") for r in zeros]
    point = _mean(r1) - _mean(r0)
    se = math.sqrt(_sample_sd(r1) ** 2 / len(r1) + _sample_sd(r0) ** 2 / len(r0))
    low, high = normal_ci(point, se, level)
    return EffectEstimate(
        NAIVE, point, se, low, high, _maybe_d(point, r1, r0), len(r1), len(r0)
    )


def _validate_rewards(records: Sequence[ScoredRecord]) -> None:
    for r in records:
        _check_finite(r.reward_original, r.id, "reward_original")
        _check_finite(r.reward_rewrite, r.id, "reward_rewrite")
        _check_finite(r.reward_rewrite2, r.id, "reward_rewrite2")


def rate_summand(record: ScoredRecord) -> float:
    """Double-rewrite per-record contrast, oriented so positive means W=1 helps."""
    if record.label == 1:
        return record.reward_rewrite2 - record.reward_rewrite
    return record.reward_rewrite - record.reward_rewrite2


def single_summand(record: ScoredRecord) -> float:
    """Single-rewrite per-record contrast (original vs its one rewrite)."""
    if record.label == 1:
        return record.reward_original - record.reward_rewrite
    return record.reward_rewrite - record.reward_original


def rate_estimates(
    records: Sequence[ScoredRecord], level: float = DEFAULT_CI_LEVEL
) -> dict[str, EffectEstimate]:
    """ATT, ATU, and ATE from double-rewrite contrasts.

    The returned ATE is exactly the class-size weighted average of ATT and
    ATU. Effect-size arms are the two reward arrays entering each contrast
    (rewrite2 vs rewrite for ATT, and the attribute-present vs
    attribute-absent pools for ATE).
    """
    ones, zeros = _split(records)
    _validate_rewards(records)
    n1, n0 = len(ones), len(zeros)
    att = _paired_estimate(
        RATE_ATT,
        [rate_summand(r) for r in ones],
        n1, n0, level,
        [r.reward_rewrite2 for r in ones],
        [r.reward_rewrite for r in ones],
    )
    atu = _paired_estimate(
        RATE_ATU,
        [rate_summand(r) for r in zeros],
        n1, n0, level,
        [r.reward_rewrite for r in zeros],
        [r.reward_rewrite2 for r in zeros],
    )
    present = [r.reward_rewrite2 for r in ones] + [r.reward_rewrite for r in zeros]
    absent = [r.reward_rewrite for r in ones] + [r.reward_rewrite2 for r in zeros]
    ate = _combine_ate(RATE_ATE, att, atu, level, present, absent)
    return {RATE_ATT: att, RATE_ATU: atu, RATE_ATE: ate}


def single_rewrite_estimates(
    records: Sequence[ScoredRecord], level: float = DEFAULT_CI_LEVEL
) -> dict[str, EffectEstimate]:
    """ATT, ATU, and ATE from single-rewrite contrasts (biased baseline)."""
    ones, zeros = _split(records)
    _validate_rewards(records)
    n1, n0 = len(ones), len(zeros)
    att = _paired_estimate(
        SINGLE_ATT,
        [single_summand(r) for r in ones],
        n1, n0, level,
        [r.reward_original for r in ones],
        [r.reward_rewrite for r in ones],
    )
    atu = _paired_estimate(
        SINGLE_ATU,
        [single_summand(r) for r in zeros],
        n1, n0, level,
        [r.reward_rewrite for r in zeros],
        [r.reward_original for r in zeros],
    )
    present = [r.reward_original for r in ones] + [r.reward_rewrite for r in zeros]
    absent = [r.reward_rewrite for r in ones] + [r.reward_original for r in zeros]
    ate = _combine_ate(SINGLE_ATE, att, atu, level, present, absent)
    return {SINGLE_ATT: att, SINGLE_ATU: atu, SINGLE_ATE: ate}


def contrastive_rate_estimates(
    records: Sequence[RewriteRecord],
    backend: RewardBackend,
    *,
    level: float = DEFAULT_CI_LEVEL,
    cache=None,
    parallelism: int = 4,
) -> dict[str, EffectEstimate]:
    """Double-rewrite estimates from a contrastive scorer.

    The backend scores (rewrite2, rewrite) pairs directly, ordered so the
    attribute-present variant comes first. With a contrastive backend
    derived from a pointwise one this reproduces `rate_estimates` exactly.
    Effect sizes are not defined here (there are no per-arm rewards).
    """
    ones = [r for r in records if r.example.label == 1]
    zeros = [r for r in records if r.example.label == 0]
    if not ones or not zeros:
        raise EstimationError(
            f"both label classes must be non-empty (n1={len(ones)}, n0={len(zeros)})"
        )
    items = [(r.example.prompt, r.rewrite2, r.rewrite) for r in ones]
    items += [(r.example.prompt, r.rewrite, r.rewrite2) for r in zeros]
    ids = [r.example.id for r in ones] + [r.example.id for r in zeros]
    scores = score_contrastive_batch(
        backend, items, cache=cache, parallelism=parallelism, ids=ids
    )
    s1, s0 = scores[: len(ones)], scores[len(ones):]
    n1, n0 = len(ones), len(zeros)
    att = _paired_estimate(CONTRASTIVE_RATE_ATT, s1, n1, n0, level)
    atu = _paired_estimate(CONTRASTIVE_RATE_ATU, s0, n1, n0, level)
    ate = _combine_ate(CONTRASTIVE_RATE_ATE, att, atu, level)
    return {CONTRASTIVE_RATE_ATT: att, CONTRASTIVE_RATE_ATU: atu, CONTRASTIVE_RATE_ATE: ate}


def all_estimates(
    records: Sequence[ScoredRecord], level: float = DEFAULT_CI_LEVEL
) -> list[EffectEstimate]:
    """Naive, single-rewrite, and double-rewrite estimates in report order."""
    out = [naive_estimate(records, level)]
    singles = single_rewrite_estimates(records, level)
    rates = rate_estimates(records, level)
    out += [singles[k] for k in (SINGLE_ATT, SINGLE_ATU, SINGLE_ATE)]
    out += [rates[k] for k in (RATE_ATT, RATE_ATU, RATE_ATE)]
    return out


SUMMAND_COLUMNS = (
    "record_id",
    "label",
    "reward_original",
    "reward_rewrite",
    "reward_rewrite2",
    "single_summand",
    "rate_summand",
)


def write_summands_csv(records: Sequence[ScoredRecord], out: IO[str]) -> None:
    """Per-record rewards and contrasts, for external plotting or audit."""
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SUMMAND_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.id,
                r.label,
                repr(r.reward_original),
                repr(r.reward_rewrite),
                repr(r.reward_rewrite2),
                repr(single_summand(r)),
                repr(rate_summand(r)),
            ]
        )
