import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from config import DeskDefaults, LabConfig
from exceptions import ParseError
from models import ArrowCombinator, CatCombinator, Combinator, EditMode, SumCombinator, UniformMerge

ExperimentName = Literal[
    "edit_locality",
    "theorem1",
    "library_comparison",
    "graph_library",
    "same_multiple",
    "kernel_convergence",
]


class DimsConfig(BaseModel):
    d: int = Field(default=DeskDefaults.D, ge=2)
    m: int = Field(default=DeskDefaults.M, ge=1)


class WorldConfig(BaseModel):
    num_entities: int = Field(default=DeskDefaults.NUM_ENTITIES, ge=2)
    num_relations: int = Field(default=DeskDefaults.NUM_RELATIONS, ge=1)
    density: float = Field(default=DeskDefaults.DENSITY, gt=0.0, le=1.0)


class GraphSettings(BaseModel):
    modes: List[Literal["disjoint", "shared"]] = ["disjoint", "shared"]
    partition_sizes: Tuple[int, int, int] = (36, 36, 36)
    chains_per_composition: Optional[int] = None


class Tolerances(BaseModel):
    """Acceptance thresholds; checked by --check, reported otherwise."""
    recall_min: float = 1.0
    edited_accuracy_min: float = 1.0
    retention_min: float = 0.99
    two_hop_accuracy_max: float = 0.10
    oracle_accuracy_min: float = 1.0
    residual_max: float = 0.05
    coefficient_rel_max: float = 0.10
    ratio_error_max: float = 0.02
    exponent_min: float = -0.6
    exponent_max: float = -0.4
    same_multiple_rel_max: float = 0.20
    mode_gap_max: float = 0.10


class OutputConfig(BaseModel):
    dir: Optional[str] = None
    stem: Optional[str] = None


class ExperimentConfig(BaseModel):
    schema_version: Literal[1] = 1
    experiment: ExperimentName
    name: Optional[str] = None
    dims: DimsConfig = DimsConfig()
    world: WorldConfig = WorldConfig()
    ridge: float = Field(default=DeskDefaults.RIDGE, ge=0.0)
    store_two_hop: bool = True
    seeds: List[int] = Field(min_length=1)

    # edit_locality
    num_edits: int = Field(default=5, ge=0)
    edit_relation: int = Field(default=0, ge=0)
    edit_modes: List[EditMode] = [EditMode.EXACT_REDIRECT, EditMode.PAPER_STRICT]

    # theorem1 / library_comparison / same_multiple
    relations: Tuple[int, int] = (0, 1)
    chains_per_world: int = Field(default=5, ge=1)
    combinators: List[Combinator] = [SumCombinator(), UniformMerge(), CatCombinator(), ArrowCombinator()]

    # graph_library
    graph: GraphSettings = GraphSettings()

    # kernel_convergence
    m_sweep: List[int] = [2 ** k for k in range(10, 17)]
    kernel_pairs: int = Field(default=20, ge=1)

    tolerances: Tolerances = Tolerances()
    output: OutputConfig = OutputConfig()

    @field_validator("seeds", mode="before")
    @classmethod
    def _expand_seed_range(cls, value):
        # `seeds: {start: 0, count: 100}` is shorthand for a contiguous list.
        if isinstance(value, dict):
            start, count = int(value.get("start", 0)), int(value["count"])
            return list(range(start, start + count))
        return value

    @model_validator(mode="after")
    def _check_references(self):
        for rel in self.relations:
            if rel >= self.world.num_relations:
                raise ValueError(f"relation {rel} out of range for {self.world.num_relations} relations")
        if self.edit_relation >= self.world.num_relations:
            raise ValueError(f"edit_relation {self.edit_relation} out of range")
        if any(m < 1 for m in self.m_sweep):
            raise ValueError("m_sweep entries must be >= 1")
        return self

    @property
    def run_name(self) -> str:
        return self.output.stem or self.name or self.experiment

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        return self.model_copy(update={"seeds": [s + offset for s in self.seeds]})


class Check(BaseModel):
    """One acceptance gate: observed value against its threshold."""
    name: str
    claim: str
    value: Optional[float]
    threshold: str
    passed: bool


class ExperimentReport(BaseModel):
    experiment: ExperimentName
    name: str
    config_hash: str
    format_version: int = LabConfig.FORMAT_VERSION
    rows: List[Dict[str, Any]] = []
    aggregates: List[Dict[str, Any]] = []
    checks: List[Check] = []
    extras: Dict[str, Any] = {}

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed_checks(self) -> List[Check]:
        return [c for c in self.checks if not c.passed]


def load_experiment_config(path, experiment: Optional[str] = None) -> ExperimentConfig:
    """Read a YAML experiment config; file and schema problems raise ParseError.

    `experiment` fills in a config that omits it and must agree with one that does not.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}", {"path": str(path)})
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        details = {"path": str(path)}
        if mark is not None:
            details.update(line=mark.line + 1, column=mark.column + 1)
        raise ParseError(f"{path}: invalid YAML: {e}", details)
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: config must be a mapping", {"path": str(path)})
    if experiment is not None:
        declared = raw.setdefault("experiment", experiment)
        if declared != experiment:
            raise ParseError(f"{path} configures {declared!r}, not {experiment!r}",
                             {"path": str(path), "experiment": declared})
    version = raw.get("schema_version", 1)
    if version != 1:
        raise ParseError(f"{path}: unsupported schema_version {version!r}",
                         {"path": str(path), "schema_version": version})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise ParseError(f"{path}: {field}: {first['msg']}", {"path": str(path), "field": field})


# Desk-scale settings each experiment runs with when no config file is given.
DEFAULT_SETTINGS: Dict[str, Dict[str, Any]] = {
    "edit_locality": {"seeds": {"count": 10}, "store_two_hop": False},
    "theorem1": {"seeds": {"count": 100}},
    "library_comparison": {
        "seeds": {"count": 10},
        "combinators": [{"strategy": "arrow"}, {"strategy": "uniform"}, {"strategy": "sum"}],
    },
    "graph_library": {
        "seeds": {"count": 5},
        "combinators": [{"strategy": "sum"}, {"strategy": "uniform"}, {"strategy": "arrow"}],
    },
    "same_multiple": {"seeds": {"count": 10}, "dims": {"d": 512, "m": 32768}, "store_two_hop": False},
    "kernel_convergence": {"seeds": {"count": 5}, "dims": {"d": 64}},
}


def default_config(experiment: str) -> ExperimentConfig:
    if experiment not in DEFAULT_SETTINGS:
        raise ParseError(f"unknown experiment {experiment!r}", {"experiment": experiment})
    return ExperimentConfig.model_validate({"experiment": experiment, **DEFAULT_SETTINGS[experiment]})
