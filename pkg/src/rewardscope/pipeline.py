"""Run orchestration: load, rewrite, score, estimate, write artifacts.

Every run gets its own directory under the configured output root,
named by a UTC timestamp plus the config digest. The canonical outputs
are delimited (JSON / JSONL / CSV); figures are rendered next to them
unless disabled. All writes are atomic (temp file + rename), and the
estimate report is deterministic byte-for-byte given the same inputs
and a deterministic backend.
"""

from __future__ import annotations

import io
import json
import random
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .cache import DiskCache
from .config import RunConfig, build_backend, build_client, secret_env_names
from .data import (
    Dataset,
    dataset_digest,
    default_class_size,
    filter_by_length,
    induce_correlation,
    load_dataset,
)
from .errors import CheckFailedError, ConfigError, DataError
from .estimators import (
    CONTRASTIVE_RATE_ATE,
    CONTRASTIVE_RATE_ATT,
    CONTRASTIVE_RATE_ATU,
    EffectEstimate,
    ScoredRecord,
    all_estimates,
    contrastive_rate_estimates,
    naive_estimate,
    rate_estimates,
    score_records,
    single_rewrite_estimates,
    write_summands_csv,
)
from .rewards import RewardBackend
from .rewriting import ChatClient, RewriteRecord, batch_rewrite, rewriter_identity
from .synthetic import (
    ReportRow,
    run_shift_sweep,
    run_unbiasedness_check,
    write_report_csv,
)

_CONTRASTIVE_ORDER = (CONTRASTIVE_RATE_ATT, CONTRASTIVE_RATE_ATU, CONTRASTIVE_RATE_ATE)


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("rewardscope")
    except Exception:
        return "unknown"


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def make_run_id(config: RunConfig, when: datetime | None = None) -> str:
    stamp = (when or _utc_now()).strftime("%Y%m%dT%H%M%SZ")
    return f"{stamp}-{config.digest()}"


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


@dataclass
class RunResult:
    run_id: str
    run_dir: Path
    manifest: dict
    estimates: list[dict]
    records: list[ScoredRecord]

    @property
    def exit_code(self) -> int:
        return 0


def _prepare_run_dir(config: RunConfig, run_id: str | None) -> tuple[str, Path]:
    run_id = run_id or make_run_id(config)
    run_dir = Path(config.output_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_id, run_dir


def _load_stage(config: RunConfig) -> Dataset:
    ds_cfg = config.dataset
    dataset = load_dataset(ds_cfg.path, ds_cfg.attribute_name, lenient=ds_cfg.lenient)
    if ds_cfg.max_tokens is not None:
        dataset = filter_by_length(dataset, ds_cfg.max_tokens)
    if not dataset.examples:
        raise DataError(f"dataset {ds_cfg.path} has no usable examples")
    return dataset


def _base_manifest(config: RunConfig, run_id: str) -> dict:
    return {
        "run_id": run_id,
        "created_at": _utc_now().isoformat(),
        "package_version": _package_version(),
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "secret_env_names": secret_env_names(config),
    }


def _estimate_row(
    est: EffectEstimate, config: RunConfig, backend_fp: str, rewriter_id: str
) -> dict:
    row = est.to_dict(backend_fingerprint=backend_fp, rewriter_id=rewriter_id)
    if not config.estimator.cohens_d:
        row["cohens_d"] = None
    return row


def _scored_jsonl(records: list[ScoredRecord]) -> str:
    lines = []
    for r in records:
        ex = r.record.example
        lines.append(
            json.dumps(
                {
                    "id": ex.id,
                    "label": ex.label,
                    "aux_label": ex.aux_label,
                    "prompt": ex.prompt,
                    "response": ex.response,
                    "rewrite": r.record.rewrite,
                    "rewrite2": r.record.rewrite2,
                    "reward_original": r.reward_original,
                    "reward_rewrite": r.reward_rewrite,
                    "reward_rewrite2": r.reward_rewrite2,
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def _summands_csv(records: list[ScoredRecord]) -> str:
    buf = io.StringIO()
    write_summands_csv(records, buf)
    return buf.getvalue()


def _want_contrastive(config: RunConfig, backend: RewardBackend) -> bool:
    mode = config.estimator.contrastive
    if mode == "off":
        return False
    if mode == "on":
        return True
    return backend.supports_contrastive()


def evaluate_run(
    config: RunConfig,
    *,
    client: ChatClient | None = None,
    backend: RewardBackend | None = None,
    run_id: str | None = None,
) -> RunResult:
    """One full evaluation: rewrite twice, score all variants, estimate.

    Injectable client/backend keep tests and library callers in control;
    by default both are built from the config.
    """
    config.require("dataset", "instruction", "rewriter", "reward")
    run_id, run_dir = _prepare_run_dir(config, run_id)
    timings: dict[str, float] = {}
    t_total = time.monotonic()

    t = time.monotonic()
    dataset = _load_stage(config)
    timings["load"] = time.monotonic() - t

    client = client if client is not None else build_client(config)
    backend = backend if backend is not None else build_backend(config)
    cache = DiskCache(config.cache_dir) if config.cache_dir else None
    rw = config.rewriter

    t = time.monotonic()
    batch = batch_rewrite(
        client,
        config.instruction,
        dataset,
        cache=cache,
        parallelism=config.parallelism,
        failure_threshold=rw.failure_threshold,
        decode_params=rw.decode_params(),
        refusal_patterns=rw.patterns(),
        include_prompt=rw.include_prompt,
    )
    timings["rewrite"] = time.monotonic() - t

    t = time.monotonic()
    scored = score_records(
        batch.records, backend, cache=cache, parallelism=config.parallelism
    )
    timings["score"] = time.monotonic() - t

    t = time.monotonic()
    level = config.estimator.ci_level
    estimates = all_estimates(scored, level)
    if _want_contrastive(config, backend):
        by_name = contrastive_rate_estimates(
            batch.records, backend, level=level, cache=cache,
            parallelism=config.parallelism,
        )
        estimates += [by_name[k] for k in _CONTRASTIVE_ORDER]
    timings["estimate"] = time.monotonic() - t

    backend_fp = backend.fingerprint()
    rw_id = rewriter_identity(client, config.instruction)
    rows = [_estimate_row(e, config, backend_fp, rw_id) for e in estimates]
    report = {
        "attribute": dataset.attribute_name,
        "backend_fingerprint": backend_fp,
        "rewriter_id": rw_id,
        "ci_level": level,
        "n_records": len(scored),
        "estimates": rows,
    }

    manifest = _base_manifest(config, run_id)
    manifest.update(
        {
            "kind": "evaluate",
            "dataset_digest": dataset_digest(config.dataset.path),
            "dataset_source": dataset.source,
            "rewriter_id": rw_id,
            "rewriter_fingerprint": client.fingerprint(),
            "backend_fingerprint": backend_fp,
            "counts": _counts(
                loaded=len(dataset.examples),
                rewritten=len(dataset.examples),
                failed=batch.n_failed,
                scored=len(scored),
                cached=cache.stats.hits if cache else 0,
            ),
            "failures": [{"id": i, "reason": r} for i, r in batch.failures],
            "artifacts": [
                "manifest.json",
                "scored.jsonl",
                "estimates.json",
                "summands.csv",
            ],
        }
    )

    atomic_write_text(run_dir / "estimates.json", _dump_json(report))
    atomic_write_text(run_dir / "scored.jsonl", _scored_jsonl(scored))
    atomic_write_text(run_dir / "summands.csv", _summands_csv(scored))

    if config.figures:
        from . import plots

        manifest["artifacts"] += plots.render_evaluate_figures(run_dir, scored, rows)

    timings["total"] = time.monotonic() - t_total
    manifest["timings_s"] = {k: round(v, 6) for k, v in timings.items()}
    atomic_write_text(run_dir / "manifest.json", _dump_json(manifest))

    return RunResult(
        run_id=run_id,
        run_dir=run_dir,
        manifest=manifest,
        estimates=rows,
        records=scored,
    )


def _counts(*, loaded: int, rewritten: int, failed: int, scored: int, cached: int) -> dict:
    counts = {
        "loaded": loaded,
        "rewritten": rewritten,
        "failed": failed,
        "scored": scored,
        "cached": cached,
    }
    # Every record sent to the rewriter either scored or failed; a violation
    # here means records were dropped silently, which must never happen.
    if counts["scored"] + counts["failed"] != counts["rewritten"]:
        raise RuntimeError(f"count reconciliation failed: {counts}")
    return counts


def _format_rewards(r: ScoredRecord | None) -> str:
    if r is None:
        return "(-, -, -)"
    return f"({r.reward_original:g}, {r.reward_rewrite:g}, {r.reward_rewrite2:g})"


def sample_dump_run(
    config: RunConfig,
    k: int,
    *,
    seed: int | None = None,
    score: bool = True,
    client: ChatClient | None = None,
    backend: RewardBackend | None = None,
    run_id: str | None = None,
) -> tuple[Path, str, list[str]]:
    """Dump k sampled (original, rewrite, rewrite-of-rewrite) triples.

    Meant for eyeballing rewrite quality while tuning the instruction.
    Only the sampled examples are rewritten (and scored when a reward
    section is configured and `score` is true). Returns the output path,
    the rendered text, and any warnings.
    """
    config.require("dataset", "instruction", "rewriter")
    if k < 1:
        raise ConfigError(f"sample count must be >= 1, got {k}")
    run_id, run_dir = _prepare_run_dir(config, run_id)
    dataset = _load_stage(config)
    warnings: list[str] = []
    if k > len(dataset.examples):
        warnings.append(
            f"asked for {k} samples but the dataset has "
            f"{len(dataset.examples)}; dumping all of them"
        )
        picked = list(dataset.examples)
    else:
        rng = random.Random(config.seed if seed is None else seed)
        picked = rng.sample(list(dataset.examples), k)

    client = client if client is not None else build_client(config)
    cache = DiskCache(config.cache_dir) if config.cache_dir else None
    rw = config.rewriter
    batch = batch_rewrite(
        client,
        config.instruction,
        picked,
        cache=cache,
        parallelism=config.parallelism,
        failure_threshold=rw.failure_threshold,
        decode_params=rw.decode_params(),
        refusal_patterns=rw.patterns(),
        include_prompt=rw.include_prompt,
    )

    scored_by_id: dict[str, ScoredRecord] = {}
    if score and (backend is not None or config.reward is not None):
        backend = backend if backend is not None else build_backend(config)
        for s in score_records(
            batch.records, backend, cache=cache, parallelism=config.parallelism
        ):
            scored_by_id[s.id] = s

    blocks = []
    for rec in batch.records:
        ex = rec.example
        w, other = ex.label, 1 - ex.label
        blocks.append(
            "\n".join(
                [
                    f"=== example {ex.id} (label={w}) ===",
                    f"original [w={w}]: {ex.response}",
                    f"rewrite  [w={other}]: {rec.rewrite}",
                    f"rewrite2 [w={w}]: {rec.rewrite2}",
                    "rewards (original, rewrite, rewrite2): "
                    + _format_rewards(scored_by_id.get(ex.id)),
                ]
            )
        )
    for ex_id, reason in batch.failures:
        blocks.append(f"=== example {ex_id} ===\nrewrite failed: {reason}")

    text = "\n\n".join(blocks) + "\n"
    out_path = run_dir / "samples.txt"
    atomic_write_text(out_path, text)
    return out_path, text, warnings


def _data_sweep(
    config: RunConfig,
    *,
    client: ChatClient | None,
    backend: RewardBackend | None,
) -> tuple[list[ReportRow], dict]:
    """Correlation sweep on a real dataset: subsample, evaluate, tabulate.

    Ground truth is unknown here, so the truth column is NaN; the point of
    the exercise is watching the naive contrast drift across levels while
    the double-rewrite estimates hold still.
    """
    config.require("dataset", "instruction", "rewriter", "reward")
    synth = config.synthetic
    dataset = _load_stage(config)
    class_size = synth.sweep_class_size or default_class_size(dataset)
    client = client if client is not None else build_client(config)
    backend = backend if backend is not None else build_backend(config)
    cache = DiskCache(config.cache_dir) if config.cache_dir else None
    rw = config.rewriter
    level = config.estimator.ci_level

    rows: list[ReportRow] = []
    totals = {"loaded": 0, "rewritten": 0, "failed": 0, "scored": 0}
    nan = float("nan")
    for p in synth.rho_levels:
        sub = induce_correlation(dataset, p, config.seed, class_size=class_size)
        batch = batch_rewrite(
            client,
            config.instruction,
            sub,
            cache=cache,
            parallelism=config.parallelism,
            failure_threshold=rw.failure_threshold,
            decode_params=rw.decode_params(),
            refusal_patterns=rw.patterns(),
            include_prompt=rw.include_prompt,
        )
        scored = score_records(
            batch.records, backend, cache=cache, parallelism=config.parallelism
        )
        totals["loaded"] += len(sub.examples)
        totals["rewritten"] += len(sub.examples)
        totals["failed"] += batch.n_failed
        totals["scored"] += len(scored)
        n = len(scored)
        naive = naive_estimate(scored, level)
        rows.append(ReportRow(p, naive.estimand, naive.point, naive.se, nan, n))
        for est in single_rewrite_estimates(scored, level).values():
            rows.append(ReportRow(p, est.estimand, est.point, est.se, nan, n))
        for est in rate_estimates(scored, level).values():
            rows.append(ReportRow(p, est.estimand, est.point, est.se, nan, n))

    summary = {
        "levels": list(synth.rho_levels),
        "class_size": class_size,
        "counts": _counts(cached=cache.stats.hits if cache else 0, **totals),
        "backend_fingerprint": backend.fingerprint(),
        "rewriter_id": rewriter_identity(client, config.instruction),
    }
    return rows, summary


SYNTHETIC_CHECKS = ("unbiasedness", "sweep", "data-sweep")


def synthetic_run(
    config: RunConfig,
    check: str,
    *,
    client: ChatClient | None = None,
    backend: RewardBackend | None = None,
    run_id: str | None = None,
    raise_on_fail: bool = True,
) -> tuple[Path, dict]:
    """Closed-form laboratory checks, or a correlation sweep on real data.

    unbiasedness and sweep validate the estimators against known ground truth
    and raise CheckFailedError (exit 5) when a validation criterion fails
    (set `raise_on_fail` False to inspect the report instead; it carries
    a "passed" flag). data-sweep has no ground truth and only reports.
    """
    if check not in SYNTHETIC_CHECKS:
        raise ConfigError(f"unknown synthetic check {check!r}; pick from {SYNTHETIC_CHECKS}")
    config.require("synthetic")
    synth = config.synthetic
    run_id, run_dir = _prepare_run_dir(config, run_id)
    manifest = _base_manifest(config, run_id)
    manifest["kind"] = f"synthetic:{check}"
    t0 = time.monotonic()

    if check == "unbiasedness":
        report = run_unbiasedness_check(
            synth.world,
            synth.n,
            synth.replications,
            level=config.estimator.ci_level,
            include_scaling=synth.include_scaling,
            scaling_factor=synth.scaling_factor,
            seed=config.seed,
        )
        payload = report.to_dict()
        rows = report.rows
        passed = report.passed
        base = "unbiasedness"
    elif check == "sweep":
        report = run_shift_sweep(
            synth.world,
            synth.rho_levels,
            synth.n,
            level=config.estimator.ci_level,
            seed=config.seed,
        )
        payload = report.to_dict()
        rows = report.rows
        passed = report.passed
        base = "sweep"
    else:
        rows, payload = _data_sweep(config, client=client, backend=backend)
        passed = True
        base = "data_sweep"
        manifest["counts"] = payload["counts"]

    buf = io.StringIO()
    write_report_csv(rows, buf)
    atomic_write_text(run_dir / f"{base}.csv", buf.getvalue())
    atomic_write_text(run_dir / f"{base}.json", _dump_json(payload))
    manifest["artifacts"] = ["manifest.json", f"{base}.csv", f"{base}.json"]

    if config.figures:
        from . import plots

        manifest["artifacts"] += plots.render_report_figures(run_dir, base, rows)

    manifest["passed"] = passed
    manifest["timings_s"] = {"total": round(time.monotonic() - t0, 6)}
    atomic_write_text(run_dir / "manifest.json", _dump_json(manifest))

    payload = dict(payload, passed=passed)
    if raise_on_fail and not passed:
        raise CheckFailedError(
            f"synthetic {check} check failed; see {run_dir / (base + '.json')}"
        )
    return run_dir, payload


def cache_stats(cache_dir: str) -> dict:
    cache = DiskCache(cache_dir)
    return {"entries": cache.entry_count(), "bytes": cache.size_bytes()}


def cache_clear(cache_dir: str) -> dict:
    cache = DiskCache(cache_dir)
    return {"removed": cache.clear()}


def cache_verify(cache_dir: str) -> dict:
    cache = DiskCache(cache_dir)
    bad = cache.verify()
    return {"entries": cache.entry_count(), "corrupt": bad, "ok": not bad}


def plan(config: RunConfig, command: str, **extra) -> dict:
    """What a run would do, for --dry-run output. No side effects."""
    out: dict = {
        "command": command,
        "config_digest": config.digest(),
        "output_dir": config.output_dir,
        "cache_dir": config.cache_dir,
        "seed": config.seed,
        "parallelism": config.parallelism,
        "figures": config.figures,
        "secret_env_names": secret_env_names(config),
    }
    if config.dataset is not None:
        out["dataset"] = {
            "path": config.dataset.path,
            "attribute_name": config.dataset.attribute_name,
        }
    if config.rewriter is not None:
        out["rewriter_kind"] = config.rewriter.kind
    if config.reward is not None:
        out["reward_kind"] = config.reward.kind
    if config.synthetic is not None:
        out["synthetic"] = {
            "n": config.synthetic.n,
            "replications": config.synthetic.replications,
            "rho_levels": list(config.synthetic.rho_levels),
        }
    out.update(extra)
    return out
