"""Named presets bundled with the package.

Presets live in one directory with a subdirectory per kind (``params``,
``machines``, ``workflows``, ``systems``, ``datasets``). Setting
``FMO_PETASIM_PRESET_DIR`` replaces the bundled directory. Every loader also
accepts a path to a file of the right format.
"""

from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path

from .calibrate import TimingRecord, read_records
from .costmodel import CostParameters, MachineSpec
from .errors import ParseError, PresetNotFoundError
from .fragments import FragmentSystem, load_system
from .schedsim import ClusterConfig, WorkflowSpec, workflow_from_dict

ENV_VAR = "FMO_PETASIM_PRESET_DIR"

_SUFFIX = {
    "params": ".json",
    "machines": ".json",
    "workflows": ".json",
    "systems": ".json",
    "datasets": ".csv",
}


def preset_dir() -> Path:
    override = os.environ.get(ENV_VAR)
    if override:
        return Path(override)
    return Path(str(resources.files("fmo_petasim") / "data"))


def available(kind: str) -> list[str]:
    folder = preset_dir() / kind
    if not folder.is_dir():
        return []
    return sorted(p.stem for p in folder.glob("*" + _SUFFIX[kind]))


def resolve(kind: str, name: str | os.PathLike) -> Path:
    """Map a preset name or an existing file path to a file."""
    candidate = Path(name)
    if candidate.is_file():
        return candidate
    path = preset_dir() / kind / f"{name}{_SUFFIX[kind]}"
    if path.is_file():
        return path
    choices = ", ".join(available(kind)) or "none"
    raise PresetNotFoundError(f"unknown {kind[:-1]} preset {str(name)!r} (available: {choices})")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from exc


def load_params(name: str = "paper-tableIV") -> CostParameters:
    return CostParameters.from_dict(_read_json(resolve("params", name)))


def load_machine(name: str) -> MachineSpec:
    data = _read_json(resolve("machines", name))
    data.setdefault("name", str(name))
    return MachineSpec.from_dict(data)


def load_workflow(name: str) -> tuple[WorkflowSpec, ClusterConfig | None, str | None]:
    """Workflow spec, its cluster (if embedded) and its baseline preset name."""
    data = _read_json(resolve("workflows", name))
    spec, cluster = workflow_from_dict(data)
    return spec, cluster, data.get("baseline")


def load_system_preset(name: str) -> FragmentSystem:
    return load_system(resolve("systems", name))


def load_dataset(name: str = "paper-tables") -> list[TimingRecord]:
    return read_records(resolve("datasets", name))
