"""Synthetic latent-variable world for validating the estimators.

The world has a binary attribute W, a correlated binary confounder Z, and a
continuous nuisance factor xi. Rewards are a known additive function of
(W, Z, xi), so every estimand has a closed form and estimator bias can be
measured exactly. A synthetic "rewrite" flips W, keeps Z, and resamples xi
from the rewriter's own distribution, which reproduces the situation where
rewrites carry a stylistic shift: single-rewrite contrasts inherit the shift
while double-rewrite contrasts cancel it.

Latent values are rendered into parseable text, so the same worlds can also
drive the full text pipeline end to end.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import Dataset, LabeledExample
from .errors import CheckFailedError, ConfigError, DataError
from .estimators import (
    NAIVE,
    RATE_ATE,
    RATE_ATT,
    RATE_ATU,
    SINGLE_ATE,
    SINGLE_ATT,
    SINGLE_ATU,
    EffectEstimate,
    ScoredRecord,
    naive_estimate,
    rate_estimates,
    single_rewrite_estimates,
)
from .rewards import RewardBackend
from .rewriting import RewriteRecord

# fillers differ in length and vocabulary so text-feature mock rewards
# (length_scaled, keyword_bonus) also respond to Z
FILLER_Z1 = " style:ornate gilded prose with flourish"
FILLER_Z0 = " style:plain"

_XI_DECIMALS = 9
_LATENT_RE = re.compile(r"^w=([01])\|z=([01])\|xi=(-?\d+\.\d{9})")


def _quantize(x):
    """Snap xi draws to a 9-decimal grid so text rendering is lossless."""
    return np.round(x, _XI_DECIMALS)


def render_latent(w: int, z: int, xi: float) -> str:
    filler = FILLER_Z1 if z == 1 else FILLER_Z0
    return f"w={w}|z={z}|xi={xi:.{_XI_DECIMALS}f}{filler}"


def parse_latent(text: str) -> tuple[int, int, float]:
    """Inverse of `render_latent` on its first three fields."""
    m = _LATENT_RE.match(text)
    if m is None:
        raise DataError(f"text does not encode latent values: {text[:60]!r}")
    return int(m.group(1)), int(m.group(2)), float(m.group(3))


@dataclass(frozen=True, slots=True)
class SyntheticWorld:
    """Parameters of the latent data-generating process.

    W ~ Bernoulli(p_w); Z given W=1 is Bernoulli(rho) and given W=0 is
    Bernoulli(1 - rho), so rho controls the W-Z correlation. xi is normal
    with (mu_xi, sigma_xi) in nature and (mu_re, sigma_re) after a rewrite.
    Rewards: alpha*w + beta*z + gamma*w*z + delta*xi + eta*z*xi. The eta
    term breaks the additive structure for robustness studies.
    """

    p_w: float = 0.5
    rho: float = 0.5
    mu_xi: float = 0.0
    sigma_xi: float = 1.0
    mu_re: float = 0.0
    sigma_re: float = 1.0
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 0.0
    delta: float = 1.0
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.p_w < 1.0:
            raise ConfigError(f"p_w must be in (0, 1), got {self.p_w}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if self.sigma_xi < 0 or self.sigma_re < 0:
            raise ConfigError("sigma_xi and sigma_re must be non-negative")

    def expected_z(self) -> float:
        return self.p_w * self.rho + (1.0 - self.p_w) * (1.0 - self.rho)


# no slots here: cached_property needs the instance __dict__
@dataclass(frozen=True)
class LatentExample:
    """One draw of (w, z, xi) with its text rendering."""

    id: str
    w: int
    z: int
    xi: float

    @cached_property
    def rendered(self) -> LabeledExample:
        return LabeledExample(
            id=self.id,
            prompt="",
            response=render_latent(self.w, self.z, self.xi),
            label=self.w,
            aux_label=self.z,
        )


@dataclass(frozen=True, slots=True)
class TrueEffects:
    ate: float
    att: float
    atu: float

    def for_estimand(self, estimand: str) -> float:
        if estimand.endswith("ATT"):
            return self.att
        if estimand.endswith("ATU"):
            return self.atu
        return self.ate


def true_effects(world: SyntheticWorld) -> TrueEffects:
    """Closed-form estimands; only valid in the additive world (eta = 0)."""
    if world.eta != 0.0:
        raise ConfigError(
            "closed-form effects assume eta=0; the eta term makes the true "
            "effect depend on xi, which the additive decomposition cannot express"
        )
    return TrueEffects(
        ate=world.alpha + world.gamma * world.expected_z(),
        att=world.alpha + world.gamma * world.rho,
        atu=world.alpha + world.gamma * (1.0 - world.rho),
    )


class SyntheticReward(RewardBackend):
    """Reward as a known additive function of the latent values.

    Scores rendered latent text by parsing it back; `score_latent` is the
    closed form on raw latents, exactly consistent with text scoring.
    """

    def __init__(self, alpha: float, beta: float, gamma: float, delta: float, eta: float = 0.0):
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.gamma = float(gamma)
        self.delta = float(delta)
        self.eta = float(eta)

    @classmethod
    def for_world(cls, world: SyntheticWorld) -> "SyntheticReward":
        return cls(world.alpha, world.beta, world.gamma, world.delta, world.eta)

    @classmethod
    def from_params(cls, params: dict) -> "SyntheticReward":
        return cls(
            params.get("alpha", 0.0),
            params.get("beta", 0.0),
            params.get("gamma", 0.0),
            params.get("delta", 0.0),
            params.get("eta", 0.0),
        )

    def score_latent(self, w, z, xi):
        return (
            self.alpha * w
            + self.beta * z
            + self.gamma * w * z
            + self.delta * xi
            + self.eta * z * xi
        )

    def score(self, prompt: str, response: str) -> float:
        w, z, xi = parse_latent(response)
        return float(self.score_latent(w, z, xi))

    def fingerprint(self) -> str:
        return (
            "mock:additive_latent:"
            f"{self.alpha!r},{self.beta!r},{self.gamma!r},{self.delta!r},{self.eta!r}"
        )


# config-facing alias: the mock kind is named for what the reward is
AdditiveLatentReward = SyntheticReward

REWRITE_MODES = ("assumption_true", "mean_shifted")


def sample_latents(
    world: SyntheticWorld, n: int, rng: np.random.Generator | None = None
) -> list[LatentExample]:
    """Draw n examples from the world; reproducible from the world's seed."""
    if rng is None:
        rng = np.random.default_rng(world.seed)
    w = (rng.random(n) < world.p_w).astype(np.int64)
    p_z = np.where(w == 1, world.rho, 1.0 - world.rho)
    z = (rng.random(n) < p_z).astype(np.int64)
    xi = _quantize(rng.normal(world.mu_xi, world.sigma_xi, n))
    return [
        LatentExample(id=str(i), w=int(w[i]), z=int(z[i]), xi=float(xi[i]))
        for i in range(n)
    ]


def sample_dataset(world: SyntheticWorld, n: int, attribute_name: str = "w") -> Dataset:
    """Render a fresh draw as a text dataset for full-pipeline runs."""
    latents = sample_latents(world, n)
    return Dataset(
        examples=tuple(lat.rendered for lat in latents),
        attribute_name=attribute_name,
        source=f"synthetic(seed={world.seed}, n={n})",
    )


def synthetic_rewrite(
    world: SyntheticWorld,
    example: LatentExample,
    target_w: int,
    rng: np.random.Generator | None = None,
    *,
    mode: str = "assumption_true",
    xi_new: float | None = None,
) -> LatentExample:
    """Rewrite an example to the target attribute value.

    The attribute flips to the target, the confounder z is untouched, and
    xi is resampled from the rewriter's distribution (mu_re, sigma_re); both
    rewrite hops draw from that same distribution. `mode` is documentation
    of intent: "mean_shifted" flags that mu_re differs from mu_xi, which is
    exactly what biases single-rewrite contrasts.
    """
    if mode not in REWRITE_MODES:
        raise ConfigError(f"unknown rewrite mode {mode!r}; expected one of {REWRITE_MODES}")
    if target_w not in (0, 1):
        raise ConfigError(f"rewrite target must be 0 or 1, got {target_w!r}")
    if xi_new is None:
        if rng is None:
            raise ConfigError("synthetic_rewrite needs an rng when xi_new is not supplied")
        xi_new = float(_quantize(rng.normal(world.mu_re, world.sigma_re)))
    return LatentExample(id=example.id, w=target_w, z=example.z, xi=xi_new)


def simulate_scored_records(
    world: SyntheticWorld, n: int, rng: np.random.Generator
) -> list[ScoredRecord]:
    """One dataset of double-rewrite records, scored in closed form.

    Follows the standard collection pattern: first hop targets the opposite
    attribute value, second hop targets the original value, each hop with a
    fresh xi draw.
    """
    latents = sample_latents(world, n, rng)
    xi_first = _quantize(rng.normal(world.mu_re, world.sigma_re, n))
    xi_second = _quantize(rng.normal(world.mu_re, world.sigma_re, n))
    backend = SyntheticReward.for_world(world)
    fp = backend.fingerprint()
    records: list[ScoredRecord] = []
    for i, lat in enumerate(latents):
        first = synthetic_rewrite(world, lat, 1 - lat.w, xi_new=float(xi_first[i]))
        second = synthetic_rewrite(world, first, lat.w, xi_new=float(xi_second[i]))
        rr = RewriteRecord(
            example=lat.rendered,
            rewrite=first.rendered.response,
            rewrite2=second.rendered.response,
            rewriter_id="synthetic",
        )
        records.append(
            ScoredRecord(
                record=rr,
                reward_original=float(backend.score_latent(lat.w, lat.z, lat.xi)),
                reward_rewrite=float(backend.score_latent(first.w, first.z, first.xi)),
                reward_rewrite2=float(backend.score_latent(second.w, second.z, second.xi)),
                backend_fingerprint=fp,
            )
        )
    return records


@dataclass(frozen=True, slots=True)
class ReportRow:
    """One estimate in the flat report shape shared by sweeps and oracles."""

    rho: float
    estimator: str
    point: float
    se: float
    truth: float
    n: int


@dataclass(frozen=True)
class EstimandSummary:
    estimand: str
    truth: float
    expected_bias: float
    mean_point: float
    mean_bias: float
    sd_point: float
    rmse: float
    coverage: float
    bias_tolerance: float
    bias_ok: bool
    coverage_ok: bool | None  # None when coverage is not a pass criterion

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScalingSummary:
    n_small: int
    n_large: int
    sd_small: float
    sd_large: float
    ratio: float
    expected_ratio: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OracleReport:
    world: SyntheticWorld
    n: int
    replications: int
    summaries: dict[str, EstimandSummary]
    scaling: ScalingSummary | None
    rows: tuple[ReportRow, ...]

    @property
    def passed(self) -> bool:
        ok = all(s.bias_ok for s in self.summaries.values())
        ok = ok and all(
            s.coverage_ok for s in self.summaries.values() if s.coverage_ok is not None
        )
        if self.scaling is not None:
            ok = ok and self.scaling.passed
        return ok

    def to_dict(self) -> dict:
        return {
            "world": asdict(self.world),
            "n": self.n,
            "replications": self.replications,
            "estimands": {k: v.to_dict() for k, v in self.summaries.items()},
            "scaling": self.scaling.to_dict() if self.scaling else None,
            "passed": self.passed,
        }


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _sd(xs: Sequence[float]) -> float:
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _expected_single_bias(world: SyntheticWorld, estimand: str) -> float:
    shift = world.delta * (world.mu_re - world.mu_xi)
    if estimand == SINGLE_ATT:
        return -shift
    if estimand == SINGLE_ATU:
        return shift
    if estimand == SINGLE_ATE:
        return shift * (1.0 - 2.0 * world.p_w)
    return 0.0


_ORACLE_ESTIMANDS = (RATE_ATT, RATE_ATU, RATE_ATE, SINGLE_ATT, SINGLE_ATU, SINGLE_ATE)


def _run_replications(
    world: SyntheticWorld, n: int, replications: int, seed: int, level: float
) -> dict[str, list[EffectEstimate]]:
    by_estimand: dict[str, list[EffectEstimate]] = {k: [] for k in _ORACLE_ESTIMANDS}
    for rep in range(replications):
        rng = np.random.default_rng([seed, n, rep])
        records = simulate_scored_records(world, n, rng)
        for est in rate_estimates(records, level).values():
            by_estimand[est.estimand].append(est)
        for est in single_rewrite_estimates(records, level).values():
            by_estimand[est.estimand].append(est)
    return by_estimand


def run_unbiasedness_check(
    world: SyntheticWorld,
    n: int,
    replications: int,
    *,
    level: float = 0.95,
    include_scaling: bool = False,
    scaling_factor: int = 4,
    seed: int | None = None,
) -> OracleReport:
    """Monte Carlo validation of the double-rewrite unbiasedness claim.

    Replications are seeded independently from (seed, n, rep). The report
    carries, per estimand: mean bias against the closed-form truth with a
    3-sigma Monte Carlo tolerance, CI coverage (a pass criterion only for
    the double-rewrite estimands, whose CIs are supposed to be honest), and
    RMSE. With `include_scaling`, the run repeats at n * scaling_factor and
    checks that the sd of the ATE shrinks like 1/sqrt(n), within 20%.
    """
    if seed is None:
        seed = world.seed
    truths = true_effects(world)
    by_estimand = _run_replications(world, n, replications, seed, level)

    summaries: dict[str, EstimandSummary] = {}
    rows: list[ReportRow] = []
    for estimand in _ORACLE_ESTIMANDS:
        ests = by_estimand[estimand]
        truth = truths.for_estimand(estimand)
        points = [e.point for e in ests]
        mean_point = _mean(points)
        sd_point = _sd(points)
        expected = _expected_single_bias(world, estimand)
        bias = mean_point - truth
        tol = 3.0 * sd_point / math.sqrt(replications)
        coverage = _mean([1.0 if e.ci_low <= truth <= e.ci_high else 0.0 for e in ests])
        cover_band = 3.0 * math.sqrt(level * (1.0 - level) / replications)
        coverage_ok: bool | None = None
        if estimand.startswith("rate"):
            coverage_ok = abs(coverage - level) <= cover_band
        summaries[estimand] = EstimandSummary(
            estimand=estimand,
            truth=truth,
            expected_bias=expected,
            mean_point=mean_point,
            mean_bias=bias,
            sd_point=sd_point,
            rmse=math.sqrt(_mean([(p - truth) ** 2 for p in points])),
            coverage=coverage,
            bias_tolerance=tol,
            bias_ok=abs(bias - expected) <= tol,
            coverage_ok=coverage_ok,
        )
        rows += [
            ReportRow(world.rho, estimand, e.point, e.se, truth, n) for e in ests
        ]

    scaling = None
    if include_scaling:
        n_large = n * scaling_factor
        large = _run_replications(world, n_large, replications, seed, level)
        sd_small = summaries[RATE_ATE].sd_point
        sd_large = _sd([e.point for e in large[RATE_ATE]])
        ratio = sd_large / sd_small if sd_small else float("inf")
        expected_ratio = 1.0 / math.sqrt(scaling_factor)
        scaling = ScalingSummary(
            n_small=n,
            n_large=n_large,
            sd_small=sd_small,
            sd_large=sd_large,
            ratio=ratio,
            expected_ratio=expected_ratio,
            passed=abs(ratio - expected_ratio) <= 0.2 * expected_ratio,
        )
        rows += [
            ReportRow(world.rho, RATE_ATE, e.point, e.se, truths.ate, n_large)
            for e in large[RATE_ATE]
        ]

    return OracleReport(
        world=world,
        n=n,
        replications=replications,
        summaries=summaries,
        scaling=scaling,
        rows=tuple(rows),
    )


@dataclass(frozen=True)
class SweepReport:
    """Estimates across a sweep of W-Z correlation levels."""

    world: SyntheticWorld
    n: int
    levels: tuple[float, ...]
    rows: tuple[ReportRow, ...]

    @property
    def passed(self) -> bool:
        """Double-rewrite ATE must stay within 3 SE of truth at every level."""
        return all(
            abs(r.point - r.truth) <= 3.0 * r.se
            for r in self.rows
            if r.estimator == RATE_ATE
        )

    def to_dict(self) -> dict:
        return {
            "world": asdict(self.world),
            "n": self.n,
            "levels": list(self.levels),
            "passed": self.passed,
        }


def run_shift_sweep(
    world: SyntheticWorld,
    rho_levels: Sequence[float],
    n: int,
    *,
    level: float = 0.95,
    seed: int | None = None,
) -> SweepReport:
    """Estimate effects at each correlation level with one fresh sample each.

    Shows the naive contrast drifting with the W-Z correlation while the
    double-rewrite estimates stay pinned to the truth.
    """
    if seed is None:
        seed = world.seed
    rows: list[ReportRow] = []
    for k, rho in enumerate(rho_levels):
        w = replace(world, rho=rho)
        truths = true_effects(w)
        rng = np.random.default_rng([seed, 1_000_000 + k])
        records = simulate_scored_records(w, n, rng)
        naive = naive_estimate(records, level)
        rows.append(ReportRow(rho, NAIVE, naive.point, naive.se, truths.ate, n))
        for est in rate_estimates(records, level).values():
            rows.append(
                ReportRow(
                    rho, est.estimand, est.point, est.se,
                    truths.for_estimand(est.estimand), n,
                )
            )
    return SweepReport(world=world, n=n, levels=tuple(rho_levels), rows=tuple(rows))


REPORT_COLUMNS = ("rho", "estimator", "point", "se", "truth", "n")


def write_report_csv(rows: Sequence[ReportRow], out) -> None:
    import csv

    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([repr(r.rho), r.estimator, repr(r.point), repr(r.se), repr(r.truth), r.n])
