"""Define the configurable parameters of a run.

Two layers: ``RunConfig`` is the YAML file a run is reproduced from, and
``Configuration`` holds the per-party knobs a graph reads from its
``RunnableConfig``.
"""

import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from langchain_core.runnables import RunnableConfig
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from biased_qkd.schemas import CascadeConfig, SourceModel, StationModel
from biased_qkd.utils import config_digest

logger = logging.getLogger(__name__)

ENV_PREFIX = "BIASED_QKD_"


@dataclass(kw_only=True)
class Configuration:
    """Per-party runtime knobs."""

    role: str = "alice"
    announce_block: int = 100_000
    tag_len: int = 40

    @classmethod
    def from_runnable_config(cls, config: Optional[RunnableConfig] = None) -> "Configuration":
        """Create a Configuration instance from a RunnableConfig.

        With a ``run_config`` in the configurable, its session section supplies
        the defaults and a knob that disagrees with it is refused, so the run's
        digest always describes what the party did.
        """
        configurable = config["configurable"] if config and "configurable" in config else {}
        run = configurable.get("run_config")
        values: dict[str, Any] = {}
        for f in fields(cls):
            if not f.init:
                continue
            pinned = getattr(run.session, f.name, None) if run is not None else None
            raw = configurable.get(f.name)
            if raw is None or raw == "":
                if pinned is not None:
                    values[f.name] = pinned
                continue
            kind = type(f.default)
            try:
                values[f.name] = kind(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"{f.name}: cannot read {raw!r} as {kind.__name__}", field=f.name) from None
            if pinned is not None and values[f.name] != pinned:
                raise ConfigError(f"{f.name}={values[f.name]!r} differs from session.{f.name}={pinned!r}", field=f.name)
        return cls(**values)


class ConfigError(ValueError):
    """A configuration file or override is unusable."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line = line


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KeyRateSection(_Section):
    p_eps: float = Field(default=1e-6, gt=0.0, lt=1.0, description="Total phase-error estimate failure probability")
    optimize_split: bool = Field(default=True, description="Co-optimise the P_eps split instead of halving it")
    f_x: float = Field(default=1.31, ge=1.0, description="Expected X error-correction inefficiency")
    f_z: float = Field(default=1.59, ge=1.0, description="Expected Z error-correction inefficiency")
    q_step: float = Field(default=0.005, gt=0.0, le=0.1, description="Bias grid step for optimize-bias")


class SessionSection(_Section):
    session_id: Optional[str] = None
    n_rounds: int = Field(default=1_000_000, ge=1)
    source_seed: int = Field(default=1, ge=0)
    protocol_seed: int = Field(default=2, ge=0, description="Alice's shuffle, tag and hash seeds")
    announce_block: int = Field(default=100_000, ge=1)
    tag_len: int = Field(default=40, ge=1)
    transport: Literal["queue", "socket"] = "queue"
    timeout: float = Field(default=60.0, gt=0.0)


class OutputSection(_Section):
    dir: str = "out"
    format: Literal["csv", "json"] = "csv"
    qber_window: int = Field(default=100_000, ge=100, description="Rounds per QBER time-series bucket")
    events: bool = Field(default=False, description="Also dump the per-round event CSV")
    transcript: bool = Field(default=False, description="Also write the cascade transcripts")


class RunConfig(BaseModel):
    """Everything a run needs; unknown keys anywhere are errors."""

    model_config = ConfigDict(extra="forbid")

    source: SourceModel
    alice: StationModel
    bob: StationModel
    cascade: CascadeConfig = Field(default_factory=CascadeConfig)
    keyrate: KeyRateSection = Field(default_factory=KeyRateSection)
    session: SessionSection = Field(default_factory=SessionSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def digest(self) -> str:
        return config_digest(self.model_dump(mode="json"))

    def seeds(self) -> dict[str, int]:
        return {
            "source_seed": self.session.source_seed,
            "protocol_seed": self.session.protocol_seed,
            "cascade_seed": self.cascade.seed,
        }


REQUIRED_KEYS = ["source.p_bx", "source.p_bz", "alice.q", "bob.q"]


def _line_of(node: Optional[yaml.Node], path: tuple) -> Optional[int]:
    """1-based line of the YAML node at ``path``, or of its nearest parent."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if not isinstance(node, yaml.MappingNode):
            break
        for k, v in node.value:
            if k.value == str(key):
                node = v
                line = k.start_mark.line + 1
                break
        else:
            break
    return line


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else None
        raise ConfigError(f"{source}: not valid YAML: {exc}", line=line) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping of sections, got {type(data).__name__}")
    for name, section in data.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"{source}: section {name!r} must be a mapping", field=str(name), line=_line_of(root, (name,)))
    data = {k: ({} if v is None else v) for k, v in data.items()}

    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        errors = exc.errors()
        missing = [".".join(map(str, e["loc"])) for e in errors if e["type"] == "missing"]
        if missing and len(missing) == len(errors):
            required = [k for k in REQUIRED_KEYS if k in missing or k.split(".")[0] in missing]
            keys = ", ".join(required or missing)
            raise ConfigError(f"{source}: missing required keys: {keys}", field=(required or missing)[0]) from None
        problems = []
        for e in errors:
            loc = tuple(e["loc"])
            name = ".".join(map(str, loc))
            line = _line_of(root, loc)
            where = f" (line {line})" if line else ""
            problems.append((name, line, f"{name}: {e['msg']}{where}"))
        name, line, _ = problems[0]
        raise ConfigError(f"{source}: " + "; ".join(p[2] for p in problems), field=name, line=line) from None


# Session settings a deployment may override from the environment
ENV_OVERRIDES = ("announce_block", "tag_len", "timeout")


def apply_env_overrides(run: RunConfig) -> RunConfig:
    """Fold ``BIASED_QKD_<FIELD>`` session overrides into the run.

    The overrides land in ``run.session`` so ``run.digest()`` records them.
    """
    update = {}
    for name in ENV_OVERRIDES:
        raw = os.environ.get(ENV_PREFIX + name.upper(), "").strip()
        if raw:
            update[name] = raw
    if not update:
        return run
    data = run.model_dump()
    data["session"].update(update)
    try:
        overridden = RunConfig.model_validate(data)
    except ValidationError as exc:
        e = exc.errors()[0]
        name = ".".join(map(str, e["loc"]))
        raise ConfigError(f"{ENV_PREFIX}{str(e['loc'][-1]).upper()}: {e['msg']}", field=name) from None
    logger.info(f"Session overrides from the environment: {update}")
    return overridden


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file {path} does not exist")
    return apply_env_overrides(parse_config(path.read_text(), source=str(path)))


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
