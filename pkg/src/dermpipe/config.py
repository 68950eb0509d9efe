"""Pipeline configuration from a TOML or JSON file, with CLI overrides."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aligner import ApoConfig
from .errors import ConfigError
from .gateway import GatewayConfig
from .mac import MacConfig
from .reranker import RankStrategy
from .retrieval import DEFAULT_MAX_CANDIDATES, RetrievalStrategy

_PATH_FIELDS = ("dataset_path", "prompts_dir", "rules_path", "out_dir", "script_path", "replay_manifest")
_NESTED = {"gateway": GatewayConfig, "mac": MacConfig, "apo": ApoConfig}


@dataclass(frozen=True)
class PipelineConfig:
    dataset_path: Path | None = None
    prompts_dir: Path | None = None
    rules_path: Path | None = None
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    mac: MacConfig = field(default_factory=MacConfig)
    apo: ApoConfig = field(default_factory=ApoConfig)
    retrieval_strategy: RetrievalStrategy = RetrievalStrategy.NAIVE_COT
    rerank_strategy: RankStrategy = RankStrategy.NAIVE_COT
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    judge_mode: str = "exact"
    seed: int = 0
    max_concurrency: int = 4
    out_dir: Path = Path("runs")
    script_path: Path | None = None
    replay_manifest: Path | None = None

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.max_candidates < 1:
            raise ConfigError("max_candidates must be >= 1")
        if self.judge_mode not in ("exact", "llm"):
            raise ConfigError(f"judge_mode must be exact or llm, got {self.judge_mode!r}")

    def with_overrides(self, **changes: Any) -> "PipelineConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        if "seed" in changes:
            changes["gateway"] = dataclasses.replace(changes.get("gateway", self.gateway), seed=changes["seed"])
        return dataclasses.replace(self, **changes)

    def check_paths(self, *names: str) -> None:
        """Raise ConfigError unless each named path field is set and exists."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name} is not set")
            if not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")
        for name in ("prompts_dir", "rules_path"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in _NESTED:
                value = dataclasses.asdict(value)
                if f.name == "mac":
                    value["specialist_names"] = list(value["specialist_names"])
            elif isinstance(value, Path):
                value = str(value)
            elif hasattr(value, "value"):
                value = value.value
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        if "seed" in data and "seed" not in (data.get("gateway") or {}):
            data = {**data, "gateway": {**(data.get("gateway") or {}), "seed": data["seed"]}}
        try:
            for key, value in data.items():
                if key in _NESTED:
                    if not isinstance(value, dict):
                        raise ConfigError(f"[{key}] must be a table")
                    if key == "mac" and "specialist_names" in value:
                        value = {**value, "specialist_names": tuple(value["specialist_names"])}
                    kwargs[key] = _NESTED[key](**value)
                elif key in _PATH_FIELDS:
                    if value is not None:
                        path = Path(value)
                        kwargs[key] = path if path.is_absolute() or base_dir is None else base_dir / path
                elif key == "retrieval_strategy":
                    kwargs[key] = RetrievalStrategy(value)
                elif key == "rerank_strategy":
                    kwargs[key] = RankStrategy(value)
                else:
                    kwargs[key] = value
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> PipelineConfig:
    """Read a .toml or .json config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return PipelineConfig.from_dict(data, base_dir=path.parent.resolve())
