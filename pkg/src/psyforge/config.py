"""Run configuration: one JSON or YAML file plus environment overrides."""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from ._util import canonical_json
from .gateway import LLMProviderHandle
from .prompts import templates_digest

ROLES = ("synthesis", "validation", "judge", "model", "simulator")
_SECRET_KEYS = {"api_key", "apikey", "key", "secret", "token", "password"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProviderConfig:
    provider: str = "mock"
    model: str = "mock-model"
    endpoint: str = ""
    auth_env: str = ""
    rate_limit: float = 600.0
    max_retries: int = 3
    timeout: float = 60.0

    def handle(self) -> LLMProviderHandle:
        return LLMProviderHandle(
            provider_name=self.provider,
            model_name=self.model,
            endpoint=self.endpoint,
            auth_env=self.auth_env,
            rate_limit=self.rate_limit,
            max_retries=self.max_retries,
            timeout=self.timeout,
        )


@dataclass(frozen=True)
class Paths:
    workdir: str = "forge-run"
    patterns: str = ""
    corpus: str = ""
    names_male: str = ""
    names_female: str = ""
    general_pool: str = ""
    roleplay_pool: str = ""
    cache: str = ""

    def resolve(self, name: str) -> Path | None:
        value = getattr(self, name)
        return Path(value) if value else None


@dataclass(frozen=True)
class PipelineConfig:
    providers: Mapping[str, ProviderConfig] = field(default_factory=lambda: {r: ProviderConfig() for r in ROLES})
    seed: int = 0
    parallelism: int = 4
    chunk_size: int = 15
    repeats: int = 1
    ratio: tuple[int, int, int] = (4, 4, 2)
    id_eval_size: int = 50
    eval_mode: str = "replay"
    paths: Paths = field(default_factory=Paths)

    def provider(self, role: str) -> ProviderConfig:
        if role not in ROLES:
            raise ConfigError(f"unknown provider role {role!r}")
        return self.providers.get(role, ProviderConfig())

    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["providers"] = {k: asdict(v) for k, v in sorted(self.providers.items())}
        d["ratio"] = list(self.ratio)
        return d

    def hash(self) -> str:
        """Binds a run to its parameters and the exact prompt templates.

        The working directory is left out so the same run in two places
        hashes the same.
        """
        d = self.to_dict()
        d["paths"] = {k: v for k, v in d["paths"].items() if k not in ("workdir", "cache")}
        h = hashlib.sha256(canonical_json(d).encode())
        h.update(templates_digest().encode())
        return h.hexdigest()[:16]

    def with_overrides(self, **changes: Any) -> "PipelineConfig":
        cfg = replace(self, **{k: v for k, v in changes.items() if v is not None and k != "provider"})
        if changes.get("provider"):
            cfg = replace(
                cfg, providers={r: replace(cfg.provider(r), provider=changes["provider"]) for r in ROLES}
            )
        return cfg

    def require_paths(self, *names: str) -> None:
        """Fail before any provider call if a needed input path is unset or missing."""
        for name in names:
            p = self.paths.resolve(name)
            if p is None:
                raise ConfigError(f"config path {name!r} is not set")
            if not p.exists():
                raise ConfigError(f"config path {name!r} does not exist: {p}")


def _check_no_secrets(obj: Any, where: str = "") -> None:
    if isinstance(obj, Mapping):
        for k, v in obj.items():
            if str(k).lower() in _SECRET_KEYS:
                raise ConfigError(f"secret-like key {where}{k!r} in config; pass credentials via environment variables")
            _check_no_secrets(v, f"{where}{k}.")


def _build(cls: type, data: Mapping[str, Any], where: str) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    _check_no_secrets(data)
    data = dict(data)
    providers = {r: ProviderConfig() for r in ROLES}
    for role, pc in dict(data.pop("providers", {}) or {}).items():
        if role not in ROLES:
            raise ConfigError(f"unknown provider role {role!r}; expected one of {ROLES}")
        providers[role] = _build(ProviderConfig, pc or {}, f"providers.{role}")
    paths = _build(Paths, data.pop("paths", {}) or {}, "paths")
    if "ratio" in data:
        ratio = tuple(int(x) for x in data["ratio"])
        if len(ratio) != 3:
            raise ConfigError("ratio needs three integers")
        data["ratio"] = ratio
    cfg = _build(PipelineConfig, {**data, "providers": providers, "paths": paths}, "top-level")
    if cfg.parallelism < 1 or cfg.chunk_size < 1 or cfg.repeats < 1:
        raise ConfigError("parallelism, chunk_size and repeats must be positive")
    if cfg.eval_mode not in ("replay", "selfplay"):
        raise ConfigError(f"eval_mode must be replay or selfplay, got {cfg.eval_mode!r}")
    return cfg


ENV_OVERRIDES = {
    "FORGE_SEED": ("seed", int),
    "FORGE_PARALLELISM": ("parallelism", int),
    "FORGE_CHUNK_SIZE": ("chunk_size", int),
    "FORGE_REPEATS": ("repeats", int),
    "FORGE_EVAL_MODE": ("eval_mode", str),
}


def load_config(path: str | Path | None = None, environ: Mapping[str, str] | None = None) -> PipelineConfig:
    """Read a JSON/YAML config (or defaults) and apply FORGE_* environment overrides.

    ``FORGE_WORKDIR`` overrides ``paths.workdir``; ``FORGE_PROVIDER`` sets the
    provider for every role.
    """
    env = os.environ if environ is None else environ
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        loaded = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        data = loaded or {}
    for var, (key, conv) in ENV_OVERRIDES.items():
        if var in env:
            try:
                data[key] = conv(env[var])
            except ValueError as exc:
                raise ConfigError(f"{var}={env[var]!r}: {exc}") from exc
    if "FORGE_WORKDIR" in env:
        data["paths"] = {**(data.get("paths") or {}), "workdir": env["FORGE_WORKDIR"]}
    cfg = config_from_dict(data)
    if env.get("FORGE_PROVIDER"):
        cfg = cfg.with_overrides(provider=env["FORGE_PROVIDER"])
    return cfg
