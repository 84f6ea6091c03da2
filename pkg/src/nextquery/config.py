"""Run configuration from TOML.

One file drives a run: backend definitions in ``[backend.<name>]`` sections,
interface choice, judge ensemble, curation rules, and trainer settings.
Unknown keys are rejected so a typo cannot silently fall back to a default,
and any referenced path must exist at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import tomli

from .curation import CurationRules
from .errors import ConfigError
from .gateway import BackendConfig, ScriptRule
from .grpo import TOY_STAGE1, TOY_STAGE2, GrpoConfig
from .history import InterfaceSpec
from .judging import DEFAULT_LAMBDA


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    interface: InterfaceSpec = field(default_factory=lambda: InterfaceSpec("recursive_memory"))
    backends: dict = field(default_factory=lambda: {"mock": BackendConfig()})
    default_backend: str = "mock"
    judge_backends: tuple[str, ...] = ("mock", "mock", "mock")
    judge_lambda: float = DEFAULT_LAMBDA
    curation: CurationRules = field(default_factory=CurationRules)
    grpo_stage1: GrpoConfig = field(default_factory=lambda: TOY_STAGE1)
    grpo_stage2: GrpoConfig = field(default_factory=lambda: TOY_STAGE2)
    workers: int = 1
    prompt_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.default_backend not in self.backends:
            raise ConfigError(f"default backend {self.default_backend!r} is not defined")
        for name in self.judge_backends:
            if name not in self.backends:
                raise ConfigError(f"judge backend {name!r} is not defined")
        if len(self.judge_backends) < 3 or len(self.judge_backends) % 2 == 0:
            raise ConfigError("judge ensemble must be odd and >= 3")
        if not 0.0 <= self.judge_lambda <= 1.0:
            raise ConfigError("judge lambda must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")


def _dataclass_from(section: dict, cls, where: str):
    allowed = {f.name for f in fields(cls)}
    _check_keys(section, allowed, where)
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad [{where}] section: {exc}") from exc


def load_config(path: Path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    _check_keys(
        data, {"run", "backend", "judges", "curation", "grpo"}, "top level"
    )

    run = data.get("run", {})
    _check_keys(
        run,
        {"seed", "interface", "k", "n_candidates", "w", "workers", "default_backend", "prompt_dir"},
        "run",
    )
    interface = InterfaceSpec(
        kind=run.get("interface", "recursive_memory"),
        w=run.get("w", 3),
        k=run.get("k", 500),
        n_candidates=run.get("n_candidates", 3),
    )
    prompt_dir = None
    if run.get("prompt_dir"):
        prompt_dir = Path(run["prompt_dir"])
        if not prompt_dir.is_dir():
            raise ConfigError(f"prompt_dir does not exist: {prompt_dir}")

    backend_sections = data.get("backend", {"mock": {}})
    if not isinstance(backend_sections, dict) or not backend_sections:
        raise ConfigError("at least one [backend.<name>] section is required")
    backends = {}
    for name, section in backend_sections.items():
        if not isinstance(section, dict):
            raise ConfigError(f"[backend.{name}] must be a table")
        backends[name] = _dataclass_from(dict(section), BackendConfig, f"backend.{name}")

    judges = data.get("judges", {})
    _check_keys(judges, {"ensemble", "lam"}, "judges")
    judge_backends = tuple(judges.get("ensemble", ("mock", "mock", "mock")))
    judge_lambda = judges.get("lam", DEFAULT_LAMBDA)

    curation_section = dict(data.get("curation", {}))
    if "blocked_phrases" in curation_section:
        curation_section["blocked_phrases"] = tuple(curation_section["blocked_phrases"])
    curation = _dataclass_from(curation_section, CurationRules, "curation")

    grpo_section = dict(data.get("grpo", {}))
    stage1_over = dict(grpo_section.pop("stage1", {}))
    stage2_over = dict(grpo_section.pop("stage2", {}))
    _check_keys(grpo_section, {f.name for f in fields(GrpoConfig)}, "grpo")
    stage1_base = {f.name: getattr(TOY_STAGE1, f.name) for f in fields(GrpoConfig)}
    stage2_base = {f.name: getattr(TOY_STAGE2, f.name) for f in fields(GrpoConfig)}
    stage1 = _dataclass_from({**stage1_base, **grpo_section, **stage1_over}, GrpoConfig, "grpo.stage1")
    stage2 = _dataclass_from({**stage2_base, **grpo_section, **stage2_over}, GrpoConfig, "grpo.stage2")

    return RunConfig(
        seed=run.get("seed", 0),
        interface=interface,
        backends=backends,
        default_backend=run.get("default_backend", next(iter(backends))),
        judge_backends=judge_backends,
        judge_lambda=judge_lambda,
        curation=curation,
        grpo_stage1=stage1,
        grpo_stage2=stage2,
        workers=run.get("workers", 1),
        prompt_dir=prompt_dir,
    )


def load_mock_script(path: Path) -> list[ScriptRule]:
    """Read scripted-backend rules from a JSON file.

    The file holds a list of objects with optional keys ``match`` (substring
    of the last user message), ``reply``, ``behavior`` ("ok", "fail:<code>",
    or "timeout"), and ``times`` (uses before the rule exhausts).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"mock script not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise ConfigError("mock script must be a non-empty JSON list")
    rules = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ConfigError(f"mock script entry {i} must be an object")
        unknown = set(entry) - {"match", "reply", "behavior", "times"}
        if unknown:
            raise ConfigError(f"mock script entry {i} has unknown key(s): {sorted(unknown)}")
        rules.append(
            ScriptRule(
                reply=entry.get("reply", ""),
                match=entry.get("match"),
                behavior=entry.get("behavior", "ok"),
                times=entry.get("times"),
            )
        )
    return rules
