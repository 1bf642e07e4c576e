"""Run configuration: JSON loading, schema validation and workflow checks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ParameterError
from .model import ModelParams

WORKFLOWS = ("det", "hjb", "simulate", "xval")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def schema() -> dict:
    text = resources.files("abatement_game").joinpath("schemas/run_config.schema.json").read_text()
    return json.loads(text)


@dataclass
class RunConfig:
    workflow: str
    output_dir: Path
    params: ModelParams | None = None
    grid: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    trajectory: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    xval: dict = field(default_factory=dict)

    def scaled(self, key: str, default: int, factor: float) -> int:
        """Node count from the grid section multiplied by ``factor``."""
        return max(8, int(round(int(self.grid.get(key, default)) * factor)))


def load_config(source, workflow: str | None = None, output: str | None = None,
                seed: int | None = None) -> RunConfig:
    """Read and validate a config. ``source`` is a path, a dict or None (empty config).

    Command-line values override the file. Raises ConfigError on any problem.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    if workflow is not None:
        if raw.get("workflow", workflow) != workflow:
            raise ConfigError(f"workflow {workflow!r} conflicts with config's {raw['workflow']!r}")
        raw["workflow"] = workflow
    if output is not None:
        raw["output_dir"] = str(output)
    if seed is not None:
        raw.setdefault("sim", {})["seed"] = int(seed)
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as e:
        where = "/".join(map(str, e.absolute_path)) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    if "workflow" not in raw:
        raise ConfigError("no workflow given (config 'workflow' or command line)")
    if "output_dir" not in raw:
        raise ConfigError("no output directory given (config 'output_dir' or --output)")
    wf = raw["workflow"]
    params = None
    if "params" in raw:
        try:
            params = ModelParams.from_dict(raw["params"])
        except ParameterError as e:
            raise ConfigError(f"params: {e}") from None
    if wf == "det" and not (params.sigma == 0 and params.mu <= 0):
        raise ConfigError("det workflow requires sigma = 0 and mu <= 0")
    if wf == "hjb" and params.sigma <= 0:
        raise ConfigError("hjb workflow requires sigma > 0")
    if wf == "simulate" and params.sigma == 0 and params.mu > 0:
        raise ConfigError("simulate with sigma = 0 requires mu <= 0")
    return RunConfig(workflow=wf, output_dir=Path(raw["output_dir"]), params=params,
                     grid=raw.get("grid", {}), solver=raw.get("solver", {}),
                     trajectory=raw.get("trajectory", {}), sim=raw.get("sim", {}),
                     xval=raw.get("xval", {}))
