import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from app.core.errors import ConfigurationError
from app.schemas.experiment import ExperimentConfig

CONFIGS_DIR = Path(__file__).parent.parent / "configs"


class Settings(BaseModel):
    """Process settings read from the environment."""
    OUTPUT_DIR: str = Field("runs", description="Default directory for run outputs")
    THREADS: int = Field(1, ge=1, description="Worker threads for trajectory rollouts")


@lru_cache()
def get_settings() -> Settings:
    """Get process settings from environment variables (a ``.env`` file is read first)."""
    load_dotenv()
    values: Dict[str, Any] = {}
    if os.getenv("SEIKO_OUTPUT_DIR"):
        values["OUTPUT_DIR"] = os.getenv("SEIKO_OUTPUT_DIR")
    if os.getenv("SEIKO_THREADS"):
        values["THREADS"] = os.getenv("SEIKO_THREADS")
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid environment settings: {e.errors()[0]['msg']}") from e


def _node_lines(node: yaml.Node, path: Tuple = ()) -> Dict[Tuple, int]:
    """Map every key path of a composed YAML document to its 1-based line."""
    lines = {path: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            child = path + (key_node.value,)
            lines.update(_node_lines(value_node, child))
            lines[child] = key_node.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for index, item in enumerate(node.value):
            lines.update(_node_lines(item, path + (index,)))
    return lines


def _locate(loc: Tuple, lines: Dict[Tuple, int]) -> int:
    loc = tuple(str(part) if not isinstance(part, int) else part for part in loc)
    while loc and loc not in lines:
        loc = loc[:-1]
    return lines.get(loc, 1)


def parse_experiment(text: str, source: str = "<config>") -> ExperimentConfig:
    """Validate experiment YAML text.

    Args:
        text: YAML document
        source: name used in error messages

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigurationError: ``source:LINE: field.path: message`` for the first problem found
    """
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigurationError(f"{source}:{line}: invalid YAML: {getattr(e, 'problem', e)}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}:1: config must be a mapping of sections")

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = _node_lines(root)
        messages = []
        for error in e.errors():
            loc = tuple(part for part in error["loc"] if not isinstance(part, str) or part)
            field = ".".join(str(part) for part in loc) or "<root>"
            messages.append(f"{source}:{_locate(loc, lines)}: {field}: {error['msg']}")
        raise ConfigurationError("\n".join(messages)) from e


def load_experiment(path: Union[str, Path]) -> ExperimentConfig:
    """Load and validate an experiment config file.

    A bare name such as ``benchmark_1d_bump`` resolves to a bundled config.

    Raises:
        ConfigurationError: if the file is missing or invalid
    """
    path = resolve_config_path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"{path}:1: cannot read config: {e.strerror}") from e
    return parse_experiment(text, str(path))


def resolve_config_path(path: Union[str, Path]) -> Path:
    candidate = Path(path)
    if candidate.exists():
        return candidate
    bundled = bundled_config(str(path))
    return bundled if bundled is not None else candidate


def bundled_config(name: str) -> Optional[Path]:
    """Return the path of a bundled config by name, or None."""
    stem = Path(name).stem
    candidate = CONFIGS_DIR / f"{stem}.yaml"
    return candidate if candidate.exists() else None


def experiment_schema() -> Dict[str, Any]:
    """JSON schema of the experiment config."""
    return ExperimentConfig.model_json_schema()
