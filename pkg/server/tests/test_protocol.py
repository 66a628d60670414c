"""Wire protocol conformance against a live formula-model listener."""

import json
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from rewardserve.models import FormulaModel, build_model
from rewardserve.server import create_server


def post(base, path, payload, **kwargs):
    return requests.post(f"{base}{path}", json=payload, timeout=10, **kwargs)


class TestFormulaModel:
    def test_hundred_chars_without_keyword(self):
        assert FormulaModel().score("q", "x" * 100) == {"reward": 0.1}

    def test_keyword_bonus(self):
        assert FormulaModel().score("q", "the best" + "x" * 92)["reward"] == 0.001 * 100 + 0.2

    def test_prompt_does_not_enter_formula(self):
        model = FormulaModel()
        assert model.score("a", "yy") == model.score("completely different", "yy")

    def test_fingerprint_changes_with_spec(self):
        assert FormulaModel().fingerprint() != FormulaModel(bonus=0.3).fingerprint()
        assert FormulaModel().fingerprint().startswith("formula:")

    def test_build_model_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown model kind"):
            build_model("oracle")


class TestScoreEndpoint:
    def test_formula_hundred_char_reward(self, formula_server):
        resp = post(formula_server, "/v1/score", {"prompt": "q", "response": "x" * 100})
        assert resp.status_code == 200
        assert resp.json() == {"reward": 0.1}

    def test_identical_requests_identical_bytes(self, formula_server):
        payload = {"prompt": "q", "response": "z" * 137}
        bodies = {post(formula_server, "/v1/score", payload).content for _ in range(5)}
        assert len(bodies) == 1

    def test_missing_field_is_400_with_error_json(self, formula_server):
        resp = post(formula_server, "/v1/score", {"prompt": "q"})
        assert resp.status_code == 400
        assert "response" in resp.json()["error"]

    def test_non_string_field_is_400(self, formula_server):
        resp = post(formula_server, "/v1/score", {"prompt": "q", "response": 7})
        assert resp.status_code == 400
        assert "error" in resp.json()

    def test_unparseable_body_is_400(self, formula_server):
        resp = requests.post(
            f"{formula_server}/v1/score",
            data=b"not json{",
            headers={"Content-Type": "application/json"},
            timeout=10,
        )
        assert resp.status_code == 400
        assert "JSON" in resp.json()["error"]

    def test_concurrent_requests_all_agree(self, formula_server):
        def one(i):
            return post(
                formula_server, "/v1/score", {"prompt": "", "response": "k" * 250}
            ).json()["reward"]

        with ThreadPoolExecutor(max_workers=8) as pool:
            rewards = set(pool.map(one, range(16)))
        assert rewards == {0.25}


class TestContrastiveEndpoint:
    def test_self_pair_is_zero(self, formula_server):
        resp = post(
            formula_server,
            "/v1/score_contrastive",
            {"prompt": "q", "response_a": "same text", "response_b": "same text"},
        )
        assert resp.status_code == 200
        assert resp.json() == {"reward": 0.0}

    def test_equals_pointwise_difference_exactly(self, formula_server):
        a, b = "u" * 313, "the best of " + "v" * 88
        ra = post(formula_server, "/v1/score", {"prompt": "", "response": a}).json()["reward"]
        rb = post(formula_server, "/v1/score", {"prompt": "", "response": b}).json()["reward"]
        pair = post(
            formula_server,
            "/v1/score_contrastive",
            {"prompt": "", "response_a": a, "response_b": b},
        ).json()["reward"]
        assert pair == ra - rb

    def test_missing_pair_field_is_400(self, formula_server):
        resp = post(
            formula_server, "/v1/score_contrastive", {"prompt": "q", "response_a": "a"}
        )
        assert resp.status_code == 400
        assert "response_b" in resp.json()["error"]


class TestHealthzAndRouting:
    def test_healthz_shape_and_fingerprint(self, formula_server):
        resp = requests.get(f"{formula_server}/v1/healthz", timeout=10)
        assert resp.status_code == 200
        assert resp.json() == {
            "status": "ok",
            "model_fingerprint": FormulaModel().fingerprint(),
        }

    def test_unknown_path_is_404(self, formula_server):
        resp = post(formula_server, "/v1/rank", {"prompt": "q", "response": "r"})
        assert resp.status_code == 404
        assert "error" in resp.json()

    def test_get_on_score_is_404_style_error(self, formula_server):
        resp = requests.get(f"{formula_server}/v1/score", timeout=10)
        assert resp.status_code == 404
        assert "error" in resp.json()

    def test_post_on_healthz_is_405(self, formula_server):
        resp = post(formula_server, "/v1/healthz", {})
        assert resp.status_code == 405
        assert "error" in resp.json()


class TestBearerToken:
    @pytest.fixture()
    def guarded_server(self, monkeypatch):
        monkeypatch.setenv("RS_SERVE_TOKEN", "sesame")
        server = create_server("127.0.0.1", 0, FormulaModel(), bearer_token_env="RS_SERVE_TOKEN")
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        host, port = server.server_address
        yield f"http://{host}:{port}"
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)

    def test_missing_token_is_401(self, guarded_server):
        resp = post(guarded_server, "/v1/score", {"prompt": "", "response": "r"})
        assert resp.status_code == 401
        assert "bearer" in resp.json()["error"]

    def test_wrong_token_is_401(self, guarded_server):
        resp = post(
            guarded_server,
            "/v1/score",
            {"prompt": "", "response": "r"},
            headers={"Authorization": "Bearer nope"},
        )
        assert resp.status_code == 401

    def test_correct_token_scores(self, guarded_server):
        resp = post(
            guarded_server,
            "/v1/score",
            {"prompt": "", "response": "r" * 50},
            headers={"Authorization": "Bearer sesame"},
        )
        assert resp.status_code == 200
        assert resp.json()["reward"] == 0.05

    def test_healthz_stays_open(self, guarded_server):
        assert requests.get(f"{guarded_server}/v1/healthz", timeout=10).status_code == 200


def test_response_bodies_are_json_objects(formula_server):
    for path, payload in [
        ("/v1/score", {"prompt": "p", "response": "r"}),
        ("/v1/score_contrastive", {"prompt": "p", "response_a": "a", "response_b": "b"}),
    ]:
        resp = post(formula_server, path, payload)
        body = json.loads(resp.content)
        assert isinstance(body, dict) and isinstance(body["reward"], float)
