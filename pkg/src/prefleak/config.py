"""Run configuration: one declarative file, overridable from the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from prefleak.core import INFERENCE_VARIANTS
from prefleak.dialogue import DialogueLimits

BACKENDS = ("scripted", "remote")
BUYER_FAMILIES = ("auto", "role-coherent", "gagged")
ROLES = ("buyer", "seller", "inference", "redactor")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    design: str = "main"
    trials_per_cell: int = 60
    master_seed: int = 0
    backend: str = "scripted"
    buyer_family: str = "auto"
    endpoint: str | None = None
    model: str | None = None
    models: dict[str, str] = field(default_factory=dict)  # per-role overrides
    api_key_env: str = "PREFLEAK_API_KEY"
    concurrency: int = 8
    variants: tuple[str, ...] = ("full", "dollar_redacted")
    max_buyer_turns: int = 4
    per_call_timeout: float = 60.0
    max_retries: int = 3
    retry_base_delay: float = 1.0
    max_chars: int = 4000
    n_resamples: int = 2000
    bootstrap_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.buyer_family not in BUYER_FAMILIES:
            raise ConfigError(f"buyer_family must be one of {BUYER_FAMILIES}, got {self.buyer_family!r}")
        bad = [v for v in self.variants if v not in INFERENCE_VARIANTS]
        if bad:
            raise ConfigError(f"unknown inference variants {bad}")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.trials_per_cell < 1 or self.n_resamples < 1:
            raise ConfigError("trials_per_cell and n_resamples must be >= 1")
        if set(self.models) - set(ROLES):
            raise ConfigError(f"models keys must be among {ROLES}")
        if self.backend == "remote" and not self.endpoint:
            raise ConfigError("remote backend needs an endpoint")
        if self.backend == "remote" and not (self.model or set(self.models) == set(ROLES)):
            raise ConfigError("remote backend needs a model (or one per role)")
        try:
            self.limits
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def limits(self) -> DialogueLimits:
        return DialogueLimits(
            max_buyer_turns=self.max_buyer_turns,
            per_call_timeout=self.per_call_timeout,
            max_retries=self.max_retries,
            max_chars=self.max_chars,
            retry_base_delay=self.retry_base_delay,
        )

    def model_for(self, role: str) -> str:
        return self.models.get(role) or self.model or ""

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["variants"] = list(self.variants)
        return d

    def with_overrides(self, **overrides: Any) -> RunConfig:
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Read a JSON or YAML config file (optional) and apply non-None overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text) or {}
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping")
    try:
        base = RunConfig().with_overrides(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return base.with_overrides(**overrides)
