"""Run configuration: one YAML file describing data, rewriter, scorer, output.

Secrets never enter the config tree: fields ending in `_env` name the
environment variable holding the credential, which is read at call time.
The manifest can therefore embed the config verbatim without redaction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .cache import canonical_json, content_key
from .data import DEFAULT_LEVELS
from .errors import ConfigError
from .rewards import (
    HttpRewardBackend,
    RewardBackend,
    contrastive_of_pointwise,
    make_mock_backend,
)
from .rewriting import (
    DEFAULT_REFUSAL_PATTERNS,
    ChatClient,
    HttpChatClient,
    IdentityStubClient,
    RewriteInstruction,
    ScriptedStubClient,
)
from .synthetic import REWRITE_MODES, SyntheticWorld

_MISSING = object()


def _take(section: dict, key: str, default: Any = _MISSING, where: str = "") -> Any:
    if key in section:
        return section.pop(key)
    if default is _MISSING:
        raise ConfigError(f"missing required config key '{where}{key}'")
    return default


def _no_leftovers(section: dict, where: str) -> None:
    if section:
        raise ConfigError(f"unknown config keys under {where}: {sorted(section)}")


@dataclass(frozen=True)
class DatasetConfig:
    path: str
    attribute_name: str
    lenient: bool = False
    max_tokens: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        out = cls(
            path=str(_take(d, "path", where="dataset.")),
            attribute_name=str(_take(d, "attribute_name", where="dataset.")),
            lenient=bool(_take(d, "lenient", False)),
            max_tokens=_take(d, "max_tokens", None),
        )
        _no_leftovers(d, "dataset")
        return out


@dataclass(frozen=True)
class RewriterConfig:
    kind: str  # identity | scripted | http
    base_url: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    table_path: str | None = None
    temperature: float | None = None
    max_completion_tokens: int | None = None
    include_prompt: bool = False
    failure_threshold: float = 0.0
    refusal_patterns: tuple[str, ...] | None = None
    max_attempts: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "RewriterConfig":
        d = dict(d)
        kind = str(_take(d, "kind", where="rewriter."))
        patterns = _take(d, "refusal_patterns", None)
        out = cls(
            kind=kind,
            base_url=_take(d, "base_url", None),
            model=_take(d, "model", None),
            api_key_env=_take(d, "api_key_env", None),
            table_path=_take(d, "table_path", None),
            temperature=_take(d, "temperature", None),
            max_completion_tokens=_take(d, "max_completion_tokens", None),
            include_prompt=bool(_take(d, "include_prompt", False)),
            failure_threshold=float(_take(d, "failure_threshold", 0.0)),
            refusal_patterns=tuple(patterns) if patterns is not None else None,
            max_attempts=int(_take(d, "max_attempts", 3)),
        )
        _no_leftovers(d, "rewriter")
        if out.kind not in ("identity", "scripted", "http"):
            raise ConfigError(f"rewriter.kind must be identity, scripted or http, got {kind!r}")
        if out.kind == "http" and not (out.base_url and out.model):
            raise ConfigError("rewriter.kind http needs base_url and model")
        if out.kind == "scripted" and not out.table_path:
            raise ConfigError("rewriter.kind scripted needs table_path")
        if not 0.0 <= out.failure_threshold <= 1.0:
            raise ConfigError("rewriter.failure_threshold must be in [0, 1]")
        return out

    def decode_params(self) -> dict:
        params: dict = {}
        if self.temperature is not None:
            params["temperature"] = self.temperature
        if self.max_completion_tokens is not None:
            params["max_tokens"] = self.max_completion_tokens
        return params

    def patterns(self) -> tuple[str, ...]:
        return self.refusal_patterns if self.refusal_patterns is not None else DEFAULT_REFUSAL_PATTERNS


@dataclass(frozen=True)
class RewardConfig:
    kind: str  # mock | http
    mock_kind: str | None = None
    mock_params: dict = field(default_factory=dict)
    base_url: str | None = None
    fingerprint_pin: str | None = None
    bearer_token_env: str | None = None
    max_attempts: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        d = dict(d)
        kind = str(_take(d, "kind", where="reward."))
        mock = _take(d, "mock", None)
        mock_kind, mock_params = None, {}
        if mock is not None:
            mock = dict(mock)
            mock_kind = str(_take(mock, "kind", where="reward.mock."))
            mock_params = mock  # remaining keys are the mock's parameters
        out = cls(
            kind=kind,
            mock_kind=mock_kind,
            mock_params=mock_params,
            base_url=_take(d, "base_url", None),
            fingerprint_pin=_take(d, "fingerprint_pin", None),
            bearer_token_env=_take(d, "bearer_token_env", None),
            max_attempts=int(_take(d, "max_attempts", 3)),
        )
        _no_leftovers(d, "reward")
        if out.kind not in ("mock", "http"):
            raise ConfigError(f"reward.kind must be mock or http, got {kind!r}")
        if out.kind == "mock" and out.mock_kind is None:
            raise ConfigError("reward.kind mock needs a reward.mock section")
        if out.kind == "http" and not out.base_url:
            raise ConfigError("reward.kind http needs base_url")
        return out


@dataclass(frozen=True)
class EstimatorConfig:
    ci_level: float = 0.95
    cohens_d: bool = True
    contrastive: str = "auto"  # auto | on | off

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        d = dict(d)
        out = cls(
            ci_level=float(_take(d, "ci_level", 0.95)),
            cohens_d=bool(_take(d, "cohens_d", True)),
            contrastive=str(_take(d, "contrastive", "auto")),
        )
        _no_leftovers(d, "estimator")
        if not 0.0 < out.ci_level < 1.0:
            raise ConfigError("estimator.ci_level must be in (0, 1)")
        if out.contrastive not in ("auto", "on", "off"):
            raise ConfigError("estimator.contrastive must be auto, on or off")
        return out


@dataclass(frozen=True)
class SyntheticConfig:
    world: SyntheticWorld
    n: int = 2000
    replications: int = 200
    rho_levels: tuple[float, ...] = DEFAULT_LEVELS
    mode: str = "assumption_true"
    include_scaling: bool = False
    scaling_factor: int = 4
    sweep_class_size: int | None = None

    @classmethod
    def from_dict(cls, d: dict, default_seed: int) -> "SyntheticConfig":
        d = dict(d)
        world_dict = dict(_take(d, "world", {}))
        world_dict.setdefault("seed", default_seed)
        try:
            world = SyntheticWorld(**world_dict)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic.world parameters: {exc}") from exc
        levels = _take(d, "rho_levels", None)
        out = cls(
            world=world,
            n=int(_take(d, "n", 2000)),
            replications=int(_take(d, "replications", 200)),
            rho_levels=tuple(levels) if levels is not None else cls.rho_levels,
            mode=str(_take(d, "mode", "assumption_true")),
            include_scaling=bool(_take(d, "include_scaling", False)),
            scaling_factor=int(_take(d, "scaling_factor", 4)),
            sweep_class_size=_take(d, "sweep_class_size", None),
        )
        _no_leftovers(d, "synthetic")
        if out.mode not in REWRITE_MODES:
            raise ConfigError(f"synthetic.mode must be one of {REWRITE_MODES}")
        if out.n < 10 or out.replications < 1:
            raise ConfigError("synthetic.n must be >= 10 and replications >= 1")
        return out


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig | None
    instruction: RewriteInstruction | None
    rewriter: RewriterConfig | None
    reward: RewardConfig | None
    estimator: EstimatorConfig
    synthetic: SyntheticConfig | None
    output_dir: str = "runs"
    cache_dir: str | None = ".rewardscope-cache"
    seed: int = 0
    parallelism: int = 4
    figures: bool = True

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        raw = dict(raw)
        seed = int(_take(raw, "seed", 0))
        dataset = raw.pop("dataset", None)
        instruction = raw.pop("instruction", None)
        rewriter = raw.pop("rewriter", None)
        reward = raw.pop("reward", None)
        estimator = raw.pop("estimator", {})
        synthetic = raw.pop("synthetic", None)

        instr_obj = None
        if instruction is not None:
            instruction = dict(instruction)
            instr_obj = RewriteInstruction(
                attribute_name=str(_take(instruction, "attribute_name", where="instruction.")),
                description_w1=str(_take(instruction, "description_w1", where="instruction.")),
                description_w0=str(_take(instruction, "description_w0", where="instruction.")),
                template=str(_take(instruction, "template", where="instruction.")),
                extra_rules=_take(instruction, "extra_rules", None),
            )
            _no_leftovers(instruction, "instruction")

        out = cls(
            dataset=DatasetConfig.from_dict(dataset) if dataset is not None else None,
            instruction=instr_obj,
            rewriter=RewriterConfig.from_dict(rewriter) if rewriter is not None else None,
            reward=RewardConfig.from_dict(reward) if reward is not None else None,
            estimator=EstimatorConfig.from_dict(estimator),
            synthetic=SyntheticConfig.from_dict(synthetic, seed) if synthetic is not None else None,
            output_dir=str(_take(raw, "output_dir", "runs")),
            cache_dir=_take(raw, "cache_dir", ".rewardscope-cache"),
            seed=seed,
            parallelism=int(_take(raw, "parallelism", 4)),
            figures=bool(_take(raw, "figures", True)),
        )
        _no_leftovers(raw, "the config root")
        if out.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        return out

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if raw is None:
            raise ConfigError(f"config {path} is empty")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out: dict = {
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
            "seed": self.seed,
            "parallelism": self.parallelism,
            "figures": self.figures,
            "estimator": asdict(self.estimator),
        }
        if self.dataset is not None:
            out["dataset"] = asdict(self.dataset)
        if self.instruction is not None:
            out["instruction"] = {
                "attribute_name": self.instruction.attribute_name,
                "description_w1": self.instruction.description_w1,
                "description_w0": self.instruction.description_w0,
                "template": self.instruction.template,
                "extra_rules": self.instruction.extra_rules,
            }
        if self.rewriter is not None:
            out["rewriter"] = asdict(self.rewriter)
        if self.reward is not None:
            out["reward"] = asdict(self.reward)
        if self.synthetic is not None:
            synth = asdict(self.synthetic)
            out["synthetic"] = synth
        return out

    def digest(self) -> str:
        return content_key("config", self.to_dict())[:8]

    def require(self, *sections: str) -> None:
        for name in sections:
            if getattr(self, name) is None:
                raise ConfigError(f"this command needs a {name!r} section in the config")


def build_client(config: RunConfig) -> ChatClient:
    rw = config.rewriter
    if rw is None:
        raise ConfigError("no rewriter section configured")
    if rw.kind == "identity":
        return IdentityStubClient()
    if rw.kind == "scripted":
        return ScriptedStubClient.from_file(rw.table_path)
    return HttpChatClient(
        base_url=rw.base_url,
        model=rw.model,
        api_key_env=rw.api_key_env,
        max_attempts=rw.max_attempts,
    )


def build_backend(config: RunConfig) -> RewardBackend:
    rc = config.reward
    if rc is None:
        raise ConfigError("no reward section configured")
    if rc.kind == "mock":
        backend = make_mock_backend(rc.mock_kind, dict(rc.mock_params))
    else:
        backend = HttpRewardBackend(
            base_url=rc.base_url,
            fingerprint_pin=rc.fingerprint_pin,
            bearer_token_env=rc.bearer_token_env,
            max_attempts=rc.max_attempts,
        )
    if config.estimator.contrastive == "on" and not backend.supports_contrastive():
        backend = contrastive_of_pointwise(backend)
    return backend


def secret_env_names(config: RunConfig) -> dict[str, str]:
    """Names (never values) of the environment variables a run will read."""
    names: dict[str, str] = {}
    if config.rewriter and config.rewriter.api_key_env:
        names["rewriter.api_key_env"] = config.rewriter.api_key_env
    if config.reward and config.reward.bearer_token_env:
        names["reward.bearer_token_env"] = config.reward.bearer_token_env
    return names


def config_yaml(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def canonical_config_json(config: RunConfig) -> str:
    return canonical_json(config.to_dict())
