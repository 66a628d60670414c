"""Config parsing and the evaluate/sample-dump/synthetic run orchestration.

The 8-record fixture under tests/fixtures is the workhorse: its scripted
rewrites and length-based rewards make every estimate computable by hand,
and the checked-in golden_estimates.json must match byte for byte. The
golden itself is re-derived here from the raw fixture texts with plain
arithmetic, so a stale or doctored golden cannot pass.
"""

from __future__ import annotations

import json
import math
from statistics import NormalDist

import pytest

from conftest import EIGHT_INSTRUCTION, FIXTURES, make_eval_config
from rewardscope.config import (
    RunConfig,
    build_backend,
    build_client,
    secret_env_names,
)
from rewardscope.errors import (
    BatchRewriteError,
    CheckFailedError,
    ConfigError,
    DataError,
)
from rewardscope.estimators import SUMMAND_COLUMNS
from rewardscope.pipeline import (
    evaluate_run,
    make_run_id,
    sample_dump_run,
    synthetic_run,
)
from rewardscope.rewards import CountingBackend, LengthScaledReward
from rewardscope.rewriting import CallableStubClient, CountingClient, ScriptedStubClient
from rewardscope.synthetic import REPORT_COLUMNS


def _config(tmp_path, **over) -> RunConfig:
    return RunConfig.from_dict(make_eval_config(tmp_path, **over))


# ---------------------------------------------------------------- config

class TestRunConfig:
    def test_round_trips_through_yaml_file(self, tmp_path):
        import yaml

        raw = make_eval_config(tmp_path)
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(raw))
        config = RunConfig.from_file(path)
        assert config.dataset.path == raw["dataset"]["path"]
        assert config.rewriter.kind == "scripted"
        assert config.reward.mock_kind == "length_scaled"
        assert config.reward.mock_params == {"divisor": 100.0}
        assert config.estimator.ci_level == 0.95
        assert config.seed == 7

    def test_missing_required_key_names_it(self, tmp_path):
        raw = make_eval_config(tmp_path)
        del raw["dataset"]["path"]
        with pytest.raises(ConfigError, match="dataset.path"):
            RunConfig.from_dict(raw)

    def test_unknown_key_rejected(self, tmp_path):
        raw = make_eval_config(tmp_path)
        raw["rewriter"]["modle"] = "typo"
        with pytest.raises(ConfigError, match="modle"):
            RunConfig.from_dict(raw)
        raw = make_eval_config(tmp_path)
        raw["outputdir"] = "x"
        with pytest.raises(ConfigError, match="outputdir"):
            RunConfig.from_dict(raw)

    def test_kind_enums_validated(self, tmp_path):
        with pytest.raises(ConfigError, match="rewriter.kind"):
            _config(tmp_path, rewriter={"kind": "telepathy"})
        with pytest.raises(ConfigError, match="reward.kind"):
            _config(tmp_path, reward={"kind": "vibes"})
        with pytest.raises(ConfigError, match="ci_level"):
            _config(tmp_path, estimator={"ci_level": 1.5})
        with pytest.raises(ConfigError, match="contrastive"):
            _config(tmp_path, estimator={"contrastive": "maybe"})

    def test_http_kinds_require_endpoints(self, tmp_path):
        with pytest.raises(ConfigError, match="base_url"):
            _config(tmp_path, rewriter={"kind": "http"})
        with pytest.raises(ConfigError, match="base_url"):
            _config(tmp_path, reward={"kind": "http", "mock": None})

    def test_missing_section_error_names_command_need(self, tmp_path):
        raw = make_eval_config(tmp_path)
        del raw["reward"]
        config = RunConfig.from_dict(raw)
        with pytest.raises(ConfigError, match="reward"):
            config.require("dataset", "reward")

    def test_digest_tracks_content(self, tmp_path):
        a = _config(tmp_path)
        b = _config(tmp_path)
        c = _config(tmp_path, seed=8)
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()
        assert len(a.digest()) == 8

    def test_empty_config_file_rejected(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        with pytest.raises(ConfigError, match="empty"):
            RunConfig.from_file(path)

    def test_build_client_and_backend_kinds(self, tmp_path):
        config = _config(tmp_path)
        assert isinstance(build_client(config), ScriptedStubClient)
        assert build_backend(config).fingerprint() == "mock:length_scaled:100.0"

    def test_contrastive_on_wraps_pointwise_backend(self, tmp_path):
        config = _config(tmp_path, estimator={"contrastive": "on"})
        backend = build_backend(config)
        assert backend.supports_contrastive()
        assert backend.fingerprint() == "contrastive(mock:length_scaled:100.0)"

    def test_secret_env_names_collects_names_only(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RS_TEST_KEY", "hunter2")
        config = _config(
            tmp_path,
            rewriter={
                "kind": "http",
                "base_url": "http://example.invalid",
                "model": "m",
                "api_key_env": "RS_TEST_KEY",
            },
        )
        names = secret_env_names(config)
        assert names == {"rewriter.api_key_env": "RS_TEST_KEY"}
        from rewardscope.config import canonical_config_json

        assert "hunter2" not in canonical_config_json(config)

    def test_run_id_is_timestamp_plus_digest(self, tmp_path):
        config = _config(tmp_path)
        run_id = make_run_id(config)
        stamp, digest = run_id.rsplit("-", 1)
        assert digest == config.digest()
        assert len(stamp) == 16 and stamp.endswith("Z")


# ------------------------------------------------- golden-fixture oracle

def _fixture_chains():
    """(id, label, reward_original, reward_rewrite, reward_rewrite2) rows,
    derived from the raw fixture files with nothing but json and len()."""
    rows = [
        json.loads(line)
        for line in (FIXTURES / "eight.jsonl").read_text().splitlines()
    ]
    table = json.loads((FIXTURES / "rewrites.json").read_text())
    import hashlib

    def key(rendered):
        return hashlib.sha256(rendered.encode()).hexdigest()[:16]

    tpl = EIGHT_INSTRUCTION["template"]
    k1 = key(tpl.replace("{W}", EIGHT_INSTRUCTION["description_w1"]))
    k0 = key(tpl.replace("{W}", EIGHT_INSTRUCTION["description_w0"]))
    out = []
    for row in rows:
        first, second = (k0, k1) if row["label"] == 1 else (k1, k0)
        rw = table[first][row["response"]]
        rw2 = table[second][rw]
        out.append(
            (row["id"], row["label"],
             len(row["response"]) / 100.0, len(rw) / 100.0, len(rw2) / 100.0)
        )
    return out


def _mean(xs):
    return math.fsum(xs) / len(xs)


def _sd(xs):
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _pooled_d(point, a, b):
    pooled = math.sqrt(
        ((len(a) - 1) * _sd(a) ** 2 + (len(b) - 1) * _sd(b) ** 2)
        / (len(a) + len(b) - 2)
    )
    return point / pooled


def _expected_estimates():
    recs = _fixture_chains()
    ones = [r for r in recs if r[1] == 1]
    zeros = [r for r in recs if r[1] == 0]
    n1, n0 = len(ones), len(zeros)
    w1, w0 = n1 / (n1 + n0), n0 / (n1 + n0)
    z = NormalDist().inv_cdf((1 + 0.95) / 2)

    def paired(summands):
        return _mean(summands), _sd(summands) / math.sqrt(len(summands))

    att, att_se = paired([r2 - r for _, _, o, r, r2 in ones])
    atu, atu_se = paired([r - r2 for _, _, o, r, r2 in zeros])
    ate = (n1 * att + n0 * atu) / (n1 + n0)
    ate_se = math.sqrt(w1**2 * att_se**2 + w0**2 * atu_se**2)
    s_att, s_att_se = paired([o - r for _, _, o, r, r2 in ones])
    s_atu, s_atu_se = paired([r - o for _, _, o, r, r2 in zeros])
    s_ate = (n1 * s_att + n0 * s_atu) / (n1 + n0)
    s_ate_se = math.sqrt(w1**2 * s_att_se**2 + w0**2 * s_atu_se**2)
    o1 = [o for _, _, o, r, r2 in ones]
    o0 = [o for _, _, o, r, r2 in zeros]
    nv = _mean(o1) - _mean(o0)
    nv_se = math.sqrt(_sd(o1) ** 2 / n1 + _sd(o0) ** 2 / n0)

    rw2_1 = [r2 for _, _, o, r, r2 in ones]
    rw_1 = [r for _, _, o, r, r2 in ones]
    rw_0 = [r for _, _, o, r, r2 in zeros]
    rw2_0 = [r2 for _, _, o, r, r2 in zeros]

    def row(name, point, se, d):
        return {
            "estimand": name, "point": point, "se": se,
            "ci_low": point - z * se, "ci_high": point + z * se,
            "cohens_d": d, "n1": n1, "n0": n0,
        }

    return [
        row("naive", nv, nv_se, _pooled_d(nv, o1, o0)),
        row("single_ATT", s_att, s_att_se, _pooled_d(s_att, o1, rw_1)),
        row("single_ATU", s_atu, s_atu_se, _pooled_d(s_atu, rw_0, o0)),
        row("single_ATE", s_ate, s_ate_se, _pooled_d(s_ate, o1 + rw_0, rw_1 + o0)),
        row("rate_ATT", att, att_se, _pooled_d(att, rw2_1, rw_1)),
        row("rate_ATU", atu, atu_se, _pooled_d(atu, rw_0, rw2_0)),
        row("rate_ATE", ate, ate_se, _pooled_d(ate, rw2_1 + rw_0, rw_1 + rw2_0)),
    ]


class TestGoldenFixture:
    def test_checked_in_golden_matches_arithmetic_oracle(self):
        golden = json.loads((FIXTURES / "golden_estimates.json").read_text())
        assert golden["n_records"] == 8
        assert golden["ci_level"] == 0.95
        assert golden["attribute"] == "sentiment"
        for got, want in zip(golden["estimates"], _expected_estimates(), strict=True):
            for field, value in want.items():
                assert got[field] == value, (want["estimand"], field)

    def test_evaluate_reproduces_golden_byte_for_byte(self, tmp_path):
        result = evaluate_run(_config(tmp_path), run_id="golden-check")
        got = (result.run_dir / "estimates.json").read_bytes()
        assert got == (FIXTURES / "golden_estimates.json").read_bytes()


# ------------------------------------------------------------- evaluate

class TestEvaluateRun:
    def test_manifest_counts_reconcile_and_stages_timed(self, tmp_path):
        result = evaluate_run(_config(tmp_path))
        counts = result.manifest["counts"]
        assert counts == {
            "loaded": 8, "rewritten": 8, "failed": 0, "scored": 8, "cached": 0,
        }
        assert counts["scored"] + counts["failed"] == counts["rewritten"]
        for stage in ("load", "rewrite", "score", "estimate", "total"):
            assert result.manifest["timings_s"][stage] >= 0.0
        assert result.manifest["rewriter_id"] == result.estimates[0]["rewriter_id"]
        assert len(result.manifest["dataset_digest"]) == 64

    def test_manifest_embeds_full_config(self, tmp_path):
        config = _config(tmp_path)
        result = evaluate_run(config)
        assert result.manifest["config"] == config.to_dict()
        assert result.manifest["config_digest"] == config.digest()

    def test_scored_jsonl_preserves_order_and_rewards(self, tmp_path):
        result = evaluate_run(_config(tmp_path))
        lines = (result.run_dir / "scored.jsonl").read_text().splitlines()
        rows = [json.loads(line) for line in lines]
        assert [r["id"] for r in rows] == [c[0] for c in _fixture_chains()]
        for row, (_, label, ro, rr, rr2) in zip(rows, _fixture_chains()):
            assert row["label"] == label
            assert row["reward_original"] == ro
            assert row["reward_rewrite"] == rr
            assert row["reward_rewrite2"] == rr2
            assert len(row["rewrite"]) == round(rr * 100)

    def test_summands_csv_shape(self, tmp_path):
        result = evaluate_run(_config(tmp_path))
        lines = (result.run_dir / "summands.csv").read_text().splitlines()
        assert lines[0] == ",".join(SUMMAND_COLUMNS)
        assert len(lines) == 9

    def test_identity_rewriter_nulls_all_rewrite_estimates(self, tmp_path):
        config = _config(tmp_path, rewriter={"kind": "identity", "table_path": None})
        result = evaluate_run(config)
        originals_1 = [o for _, lab, o, _, _ in _fixture_chains() if lab == 1]
        originals_0 = [o for _, lab, o, _, _ in _fixture_chains() if lab == 0]
        by_name = {r["estimand"]: r for r in result.estimates}
        for name, row in by_name.items():
            if name == "naive":
                assert row["point"] == _mean(originals_1) - _mean(originals_0)
                continue
            assert row["point"] == 0.0
            assert row["se"] == 0.0
            # arms still vary (original lengths differ), so d is a true zero
            assert row["cohens_d"] == 0.0

    def test_contrastive_on_appends_identical_rate_rows(self, tmp_path):
        config = _config(tmp_path, estimator={"contrastive": "on"})
        result = evaluate_run(config)
        names = [r["estimand"] for r in result.estimates]
        assert names[-3:] == [
            "contrastive_rate_ATT", "contrastive_rate_ATU", "contrastive_rate_ATE",
        ]
        by_name = {r["estimand"]: r for r in result.estimates}
        for kind in ("ATT", "ATU", "ATE"):
            plain = by_name[f"rate_{kind}"]
            paired = by_name[f"contrastive_rate_{kind}"]
            assert paired["point"] == plain["point"]
            assert paired["se"] == plain["se"]
            assert paired["cohens_d"] is None

    def test_cohens_d_off_blanks_the_field(self, tmp_path):
        config = _config(tmp_path, estimator={"cohens_d": False})
        result = evaluate_run(config)
        assert all(r["cohens_d"] is None for r in result.estimates)

    def test_warm_cache_rerun_is_byte_identical_with_zero_calls(self, tmp_path):
        config = _config(tmp_path)

        def run(run_id):
            client = CountingClient(build_client(config))
            backend = CountingBackend(build_backend(config))
            result = evaluate_run(config, client=client, backend=backend, run_id=run_id)
            return result, client.calls, backend.calls

        first, cold_client_calls, cold_backend_calls = run("cold")
        assert cold_client_calls == 16  # two hops per record
        assert cold_backend_calls == 24  # three variants per record
        second, warm_client_calls, warm_backend_calls = run("warm")
        assert warm_client_calls == 0
        assert warm_backend_calls == 0
        assert second.manifest["counts"]["cached"] > 0
        for name in ("estimates.json", "scored.jsonl", "summands.csv"):
            assert (second.run_dir / name).read_bytes() == (
                first.run_dir / name
            ).read_bytes(), name

    def test_rewrite_failures_tolerated_below_threshold(self, tmp_path):
        table = json.loads((FIXTURES / "rewrites.json").read_text())
        for section in table.values():
            section.pop(
                "The soup was rich and the service made the whole evening feel special.",
                None,
            )
        broken = tmp_path / "partial.json"
        broken.write_text(json.dumps(table))
        config = _config(
            tmp_path,
            rewriter={"kind": "scripted", "table_path": str(broken),
                      "failure_threshold": 0.2},
        )
        result = evaluate_run(config)
        counts = result.manifest["counts"]
        assert counts == {
            "loaded": 8, "rewritten": 8, "failed": 1, "scored": 7, "cached": 0,
        }
        assert counts["scored"] + counts["failed"] == counts["rewritten"]
        assert result.manifest["failures"][0]["id"] == "a1"
        assert "first hop" in result.manifest["failures"][0]["reason"]
        assert {r["id"] for r in map(
            json.loads, (result.run_dir / "scored.jsonl").read_text().splitlines()
        )} == {"a2", "a3", "a4", "b1", "b2", "b3", "b4"}

    def test_rewrite_failures_above_threshold_abort(self, tmp_path):
        config = _config(
            tmp_path,
            rewriter={"kind": "scripted",
                      "table_path": str(FIXTURES / "rewrites.json")},
            dataset={"path": str(FIXTURES / "eight.jsonl")},
        )
        bad = tmp_path / "unknown.jsonl"
        bad.write_text(
            json.dumps({"id": "x", "prompt": "", "response": "not in table",
                        "label": 1}) + "\n"
            + (FIXTURES / "eight.jsonl").read_text()
        )
        config = _config(tmp_path, dataset={"path": str(bad)})
        with pytest.raises(BatchRewriteError, match="no entry"):
            evaluate_run(config)

    def test_figures_rendered_when_enabled(self, tmp_path):
        result = evaluate_run(_config(tmp_path, figures=True))
        for name in ("reward_distributions.png", "estimator_comparison.png"):
            assert (result.run_dir / name).stat().st_size > 0
            assert name in result.manifest["artifacts"]

    def test_empty_dataset_is_a_data_error(self, tmp_path):
        empty = tmp_path / "none.jsonl"
        empty.write_text("\n")
        with pytest.raises(DataError, match="no usable examples"):
            evaluate_run(_config(tmp_path, dataset={"path": str(empty)}))

    def test_padding_stub_gives_closed_form_rate_ate(self, tmp_path):
        # Rewrites are forced to fixed lengths per target: every second-hop
        # text is 80 chars, every first-hop text 20 (or vice versa for
        # label=0), so with length/1000 rewards the double-rewrite effect
        # is exactly (80 - 20) / 1000 regardless of the originals.
        long_mark = "verbose"

        def pad(system_instruction, user_text):
            solid = user_text.replace(" ", "_")  # keep strip() from trimming a cut
            if long_mark in system_instruction:
                return (solid + "x" * 80)[:80]
            return (solid + "y" * 20)[:20]

        config = _config(
            tmp_path,
            instruction={
                "attribute_name": "length",
                "description_w1": "verbose",
                "description_w0": "terse",
                "template": "Make this response {W}.",
            },
            reward={"kind": "mock", "mock": {"kind": "length_scaled", "divisor": 1000.0}},
        )
        result = evaluate_run(config, client=CallableStubClient(pad, name="padder"))
        by_name = {r["estimand"]: r for r in result.estimates}
        assert by_name["rate_ATE"]["point"] == (80 - 20) / 1000.0
        assert by_name["rate_ATT"]["point"] == (80 - 20) / 1000.0
        assert by_name["rate_ATU"]["point"] == (80 - 20) / 1000.0
        assert by_name["rate_ATE"]["se"] == 0.0


# ----------------------------------------------------------- sample-dump

class TestSampleDump:
    def test_reproducible_under_seed(self, tmp_path):
        config = _config(tmp_path)
        _, text_a, warn_a = sample_dump_run(config, 3, seed=5, run_id="a")
        _, text_b, _ = sample_dump_run(config, 3, seed=5, run_id="b")
        _, text_c, _ = sample_dump_run(config, 3, seed=6, run_id="c")
        assert text_a == text_b
        assert text_a != text_c
        assert warn_a == []
        assert text_a.count("=== example") == 3

    def test_block_format_includes_all_three_texts_and_rewards(self, tmp_path):
        _, text, _ = sample_dump_run(_config(tmp_path), 8, seed=1)
        assert text.count("=== example") == 8
        block = text.split("\n\n")[0]
        assert "original [w=" in block
        assert "rewrite  [w=" in block
        assert "rewrite2 [w=" in block
        assert "rewards (original, rewrite, rewrite2): (0." in block

    def test_oversized_k_dumps_all_with_warning(self, tmp_path):
        _, text, warnings = sample_dump_run(_config(tmp_path), 99, seed=1)
        assert text.count("=== example") == 8
        assert warnings and "8" in warnings[0]

    def test_unscored_run_uses_absent_markers(self, tmp_path):
        raw = make_eval_config(tmp_path)
        del raw["reward"]
        config = RunConfig.from_dict(raw)
        path, text, _ = sample_dump_run(config, 2, seed=3)
        assert "(-, -, -)" in text
        assert path.read_text() == text

    def test_k_below_one_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match=">= 1"):
            sample_dump_run(_config(tmp_path), 0)


# ------------------------------------------------------------- synthetic

def _synthetic_config(tmp_path, **world_over) -> RunConfig:
    world = {"p_w": 0.5, "rho": 0.8, "mu_re": 0.5, "alpha": 1.0,
             "beta": 2.0, "delta": 1.0}
    world.update(world_over)
    return RunConfig.from_dict(
        {
            "synthetic": {"world": world, "n": 300, "replications": 20,
                          "rho_levels": [0.5, 0.75, 1.0]},
            "output_dir": str(tmp_path / "runs"),
            "cache_dir": None,
            "seed": 13,
            "figures": False,
        }
    )


class TestSyntheticRun:
    def test_unbiasedness_writes_report_and_passes(self, tmp_path):
        run_dir, payload = synthetic_run(_synthetic_config(tmp_path), "unbiasedness")
        assert payload["passed"] is True
        report = json.loads((run_dir / "unbiasedness.json").read_text())
        assert set(report["estimands"]) == {
            "rate_ATT", "rate_ATU", "rate_ATE",
            "single_ATT", "single_ATU", "single_ATE",
        }
        header = (run_dir / "unbiasedness.csv").read_text().splitlines()[0]
        assert header == ",".join(REPORT_COLUMNS)
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["kind"] == "synthetic:unbiasedness"
        assert manifest["passed"] is True

    def test_sweep_writes_rows_per_level(self, tmp_path):
        run_dir, payload = synthetic_run(_synthetic_config(tmp_path), "sweep")
        assert payload["passed"] is True
        lines = (run_dir / "sweep.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 * 4  # header + (naive + 3 rate rows) per level

    def test_failing_check_raises_exit_code_5(self, tmp_path, monkeypatch):
        import rewardscope.pipeline as pipeline_module

        class FailingReport:
            rows = ()
            passed = False

            def to_dict(self):
                return {"passed": False}

        monkeypatch.setattr(
            pipeline_module, "run_unbiasedness_check", lambda *a, **kw: FailingReport()
        )
        with pytest.raises(CheckFailedError) as err:
            synthetic_run(_synthetic_config(tmp_path), "unbiasedness")
        assert err.value.exit_code == 5
        _, payload = synthetic_run(
            _synthetic_config(tmp_path), "unbiasedness", raise_on_fail=False
        )
        assert payload["passed"] is False

    def test_unknown_check_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown synthetic check"):
            synthetic_run(_synthetic_config(tmp_path), "bogus")

    def test_data_sweep_runs_identity_pipeline_per_level(self, tmp_path):
        # 40-record dataset, 10 per (label, aux) cell; the identity rewriter
        # makes every rewrite-based estimate exactly zero at every level.
        path = tmp_path / "sweepable.jsonl"
        with path.open("w") as fh:
            i = 0
            for label in (0, 1):
                for aux in (0, 1):
                    for _ in range(10):
                        fh.write(json.dumps({
                            "id": f"r{i}", "prompt": "",
                            "response": "word " * (3 + i % 5) + f"tail{i}",
                            "label": label, "aux_label": aux,
                        }) + "\n")
                        i += 1
        config = RunConfig.from_dict(
            make_eval_config(
                tmp_path,
                dataset={"path": str(path), "attribute_name": "verbosity"},
                rewriter={"kind": "identity", "table_path": None},
                synthetic={"world": {}, "rho_levels": [0.5, 0.6], "n": 100},
            )
        )
        run_dir, payload = synthetic_run(config, "data-sweep")
        lines = (run_dir / "data_sweep.csv").read_text().splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS)
        assert len(lines) == 1 + 2 * 7  # naive + 3 single + 3 rate per level
        assert payload["class_size"] == 10
        for line in lines[1:]:
            rho, estimator, point, se, truth, n = line.split(",")
            assert truth == "nan"
            assert n == "20"
            if estimator.startswith(("rate", "single")):
                assert float(point) == 0.0
        counts = payload["counts"]
        assert counts["scored"] + counts["failed"] == counts["rewritten"]

    def test_report_figures_rendered_when_enabled(self, tmp_path):
        import dataclasses

        config = _synthetic_config(tmp_path)
        config = dataclasses.replace(config, figures=True)
        run_dir, _ = synthetic_run(config, "sweep")
        assert (run_dir / "sweep.png").stat().st_size > 0
        run_dir, _ = synthetic_run(config, "unbiasedness")
        assert (run_dir / "unbiasedness.png").stat().st_size > 0
