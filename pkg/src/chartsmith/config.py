"""Run configuration: TOML file, defaults, and strict validation.

Precedence is CLI flags > config file > built-in defaults. Unknown keys
are rejected by name before anything else runs.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

_SCHEMA = {
    "model": {
        "base_url": str,
        "model_id": str,
        "backend": str,
        "script_path": str,
        "agents": None,  # nested per-agent overrides, validated separately
    },
    "loop": {
        "t_max": int,
        "variant": str,
        "paper_order": bool,
        "return_last": bool,
    },
    "sampling": {
        "generation_temperature": float,
        "critique_temperature": float,
        "revision_temperature": float,
        "generation_max_tokens": int,
        "critique_max_tokens": int,
        "revision_max_tokens": int,
    },
    "verifier": {
        "mode": str,
        "threshold": float,
        "decay": float,
    },
    "ocr": {
        "backend": str,
        "command": str,
    },
    "render": {
        "command": str,
        "timeout": float,
        "max_output_bytes": int,
        "workers": int,
        "keep_artifacts": bool,
    },
    "bench": {
        "n": int,
    },
    "output": {
        "dir": str,
    },
    "seed": int,
}

_AGENT_OVERRIDE_KEYS = {"base_url", "model_id"}


@dataclass
class ModelConfig:
    base_url: str = ""
    model_id: str = "default"
    backend: str = "http"
    script_path: str = ""
    agents: dict[str, dict[str, str]] = field(default_factory=dict)


@dataclass
class LoopSection:
    t_max: int = 5
    variant: str = "full"
    paper_order: bool = False
    return_last: bool = False


@dataclass
class SamplingSection:
    generation_temperature: float = 0.2
    critique_temperature: float = 0.0
    revision_temperature: float = 0.2
    generation_max_tokens: int = 2048
    critique_max_tokens: int = 600
    revision_max_tokens: int = 600


@dataclass
class VerifierSection:
    mode: str = "average"
    threshold: float = 0.9
    decay: float = 0.0


@dataclass
class OcrSection:
    backend: str = "fixture"
    command: str = ""


@dataclass
class RenderSection:
    command: str = "python3"
    timeout: float = 60.0
    max_output_bytes: int = 64 * 1024
    workers: int = 0  # 0 means one worker per CPU

    keep_artifacts: bool = False

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


@dataclass
class BenchSection:
    n: int = 5


@dataclass
class OutputSection:
    dir: str = "out"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loop: LoopSection = field(default_factory=LoopSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    verifier: VerifierSection = field(default_factory=VerifierSection)
    ocr: OcrSection = field(default_factory=OcrSection)
    render: RenderSection = field(default_factory=RenderSection)
    bench: BenchSection = field(default_factory=BenchSection)
    output: OutputSection = field(default_factory=OutputSection)
    seed: int = 0

    def validate(self) -> None:
        if self.loop.t_max < 1:
            raise ConfigError("loop.t_max must be >= 1")
        if self.loop.variant not in ("full", "visual_only", "code_only", "single_critique"):
            raise ConfigError(f"loop.variant invalid: {self.loop.variant!r}")
        if self.verifier.mode not in ("average", "all_pass"):
            raise ConfigError(f"verifier.mode invalid: {self.verifier.mode!r}")
        if not 0.0 <= self.verifier.threshold <= 1.0:
            raise ConfigError("verifier.threshold must be in [0, 1]")
        if self.verifier.decay < 0:
            raise ConfigError("verifier.decay must be non-negative")
        if self.ocr.backend not in ("fixture", "command"):
            raise ConfigError(f"ocr.backend invalid: {self.ocr.backend!r}")
        if self.ocr.backend == "command" and not self.ocr.command:
            raise ConfigError("ocr.command required when ocr.backend is 'command'")
        if self.model.backend not in ("http", "scripted"):
            raise ConfigError(f"model.backend invalid: {self.model.backend!r}")
        if self.model.backend == "scripted" and not self.model.script_path:
            raise ConfigError("model.script_path required for scripted backend")
        if self.render.timeout <= 0:
            raise ConfigError("render.timeout must be positive")
        if self.bench.n < 1:
            raise ConfigError("bench.n must be >= 1")

    def snapshot(self) -> dict:
        """Plain-dict view for persistence in run.json."""
        out: dict = {}
        for section_name in (
            "model",
            "loop",
            "sampling",
            "verifier",
            "ocr",
            "render",
            "bench",
            "output",
        ):
            section = getattr(self, section_name)
            out[section_name] = {
                f.name: getattr(section, f.name) for f in fields(section)
            }
        out["seed"] = self.seed
        return out


def _check_unknown(data: dict) -> None:
    for key, value in data.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
        spec = _SCHEMA[key]
        if spec is int:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be a table")
        for sub, subval in value.items():
            if sub not in spec:
                raise ConfigError(f"unknown config key: {key}.{sub!r}")
            expected = spec[sub]
            if expected is None:
                _check_agent_overrides(key, subval)
            elif expected is float:
                if not isinstance(subval, (int, float)) or isinstance(subval, bool):
                    raise ConfigError(f"config key {key}.{sub} must be a number")
            elif not isinstance(subval, expected) or (
                expected is int and isinstance(subval, bool)
            ):
                raise ConfigError(
                    f"config key {key}.{sub} must be {expected.__name__}"
                )


def _check_agent_overrides(section: str, value) -> None:
    if not isinstance(value, dict):
        raise ConfigError(f"{section}.agents must be a table of agent tables")
    for agent, override in value.items():
        if not isinstance(override, dict):
            raise ConfigError(f"{section}.agents.{agent} must be a table")
        for key in override:
            if key not in _AGENT_OVERRIDE_KEYS:
                raise ConfigError(f"unknown config key: {section}.agents.{agent}.{key!r}")


def load_config(path: Path | str | None = None) -> RunConfig:
    """Defaults, overlaid with the TOML file when one is given."""
    config = RunConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file is not valid TOML: {exc}") from exc
    _check_unknown(data)

    for section_name, section_data in data.items():
        if section_name == "seed":
            config.seed = int(section_data)
            continue
        section = getattr(config, section_name)
        for key, value in section_data.items():
            if key == "agents":
                section.agents = {a: dict(o) for a, o in value.items()}
            else:
                current = getattr(section, key)
                if isinstance(current, float):
                    value = float(value)
                setattr(section, key, value)
    config.validate()
    return config
