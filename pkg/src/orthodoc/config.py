"""Engine configuration: defaults < JSON config file < command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import CONFIG_SCHEMA_VERSION


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    # paths
    store: str = "store"
    graph: str = "graph.json"
    index: str | None = None  # defaults to <store>/index.json
    weights: str = "weights.json"
    lexicon: str | None = None
    # corpus / graph
    max_chunk_tokens: int = 256
    overlap_tokens: int = 32
    window_tokens: int = 12
    # retrieval
    k: int = 5
    depth: int = 1
    k1: float = 1.2
    b: float = 0.75
    # fusion
    d: int = 32
    seed: int = 0
    lr: float = 0.5
    epochs: int = 200
    # report
    tau: float = 0.3
    policy: str = "strict"
    template_id: str = "article"
    # backend
    backend: str = "template"
    backend_url: str | None = None
    max_in_flight: int = 4
    # eval
    bootstrap_resamples: int = 1000

    @property
    def index_path(self) -> Path:
        return Path(self.index) if self.index else Path(self.store) / "index.json"

    def validate(self) -> "EngineConfig":
        checks = [
            (0 <= self.overlap_tokens < self.max_chunk_tokens, "need 0 <= overlap_tokens < max_chunk_tokens"),
            (self.window_tokens >= 1, "window_tokens must be >= 1"),
            (self.k >= 1, "k must be >= 1"),
            (self.depth >= 0, "depth must be >= 0"),
            (self.k1 > 0, "k1 must be > 0"),
            (0.0 <= self.b <= 1.0, "b must lie in [0, 1]"),
            (self.d >= 1, "d must be >= 1"),
            (self.lr >= 0 and self.epochs >= 0, "lr and epochs must be >= 0"),
            (0.0 < self.tau <= 1.0, "tau must lie in (0, 1]"),
            (self.policy in ("strict", "lenient"), "policy must be strict or lenient"),
            (self.backend in ("template", "http"), "backend must be template or http"),
            (self.max_in_flight >= 1, "max_in_flight must be >= 1"),
            (self.bootstrap_resamples >= 100, "bootstrap_resamples must be >= 100"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return {"config_schema": CONFIG_SCHEMA_VERSION, **asdict(self)}


def load_config(path: str | Path | None = None, **overrides) -> EngineConfig:
    """Build a config from an optional JSON file plus explicit overrides.

    ``None`` overrides are ignored so unset command-line flags fall through
    to the file or the defaults.
    """
    cfg = EngineConfig()
    known = {f.name for f in fields(EngineConfig)}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        data.pop("config_schema", None)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config key(s): {', '.join(sorted(unknown))}")
        cfg = replace(cfg, **data)
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None and k in known})
    return cfg.validate()
