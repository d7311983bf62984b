from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator


# --- Prompts and facts -----------------------------------------------------

class OneHop(BaseModel):
    """Prompt `X REL`."""
    model_config = ConfigDict(frozen=True)
    kind: Literal["one_hop"] = "one_hop"
    subject: int = Field(ge=0)
    rel: int = Field(ge=0)

    def token_ids(self, num_entities: int) -> Tuple[int, ...]:
        return (self.subject, num_entities + self.rel)

    def __str__(self) -> str:
        return f"x{self.subject} r{self.rel}"


class TwoHop(BaseModel):
    """Prompt `X REL1 REL2`."""
    model_config = ConfigDict(frozen=True)
    kind: Literal["two_hop"] = "two_hop"
    subject: int = Field(ge=0)
    rel1: int = Field(ge=0)
    rel2: int = Field(ge=0)

    def token_ids(self, num_entities: int) -> Tuple[int, ...]:
        return (self.subject, num_entities + self.rel1, num_entities + self.rel2)

    def __str__(self) -> str:
        return f"x{self.subject} r{self.rel1} r{self.rel2}"


Prompt = Annotated[Union[OneHop, TwoHop], Field(discriminator="kind")]


class Fact(BaseModel):
    model_config = ConfigDict(frozen=True)
    rel: int = Field(ge=0)
    subject: int = Field(ge=0)
    target: int = Field(ge=0)


class FactEdit(BaseModel):
    """Redirects r(x) from `old_target` to `new_target`."""
    model_config = ConfigDict(frozen=True)
    rel: int = Field(ge=0)
    subject: int = Field(ge=0)
    old_target: int = Field(ge=0)
    new_target: int = Field(ge=0)

    @property
    def prompt(self) -> OneHop:
        return OneHop(subject=self.subject, rel=self.rel)


class TrainItem(BaseModel):
    """A prompt together with the entity it should complete to."""
    model_config = ConfigDict(frozen=True)
    prompt: Prompt
    target: int = Field(ge=0)


class World(BaseModel):
    """Entities, relations and the partial-function fact table."""
    num_entities: int = Field(ge=2)
    relations: List[int]
    facts: List[Fact] = []
    seed: int = 0

    _table: Dict[Tuple[int, int], int] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def _check_invariants(self):
        if not self.relations:
            raise ValueError("a world needs at least one relation")
        if self.relations != list(range(len(self.relations))):
            raise ValueError("relation ids must be dense and contiguous from 0")
        table = {}
        for i, fact in enumerate(self.facts):
            if fact.rel >= len(self.relations):
                raise ValueError(f"facts[{i}]: relation {fact.rel} out of range")
            if fact.subject >= self.num_entities or fact.target >= self.num_entities:
                raise ValueError(f"facts[{i}]: entity id out of range [0, {self.num_entities})")
            key = (fact.rel, fact.subject)
            if key in table:
                raise ValueError(
                    f"facts[{i}]: duplicate (rel={fact.rel}, subject={fact.subject}); "
                    "relations must be partial functions"
                )
            table[key] = fact.target
        return self

    def model_post_init(self, __context) -> None:
        self._table = {(f.rel, f.subject): f.target for f in self.facts}

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def target(self, rel: int, subject: int) -> Optional[int]:
        return self._table.get((rel, subject))

    def relation_map(self, rel: int) -> Dict[int, int]:
        return {s: t for (r, s), t in self._table.items() if r == rel}


class Chain(BaseModel):
    """One instance x -Rel_a-> y -Rel_b-> z of a two-hop composition."""
    model_config = ConfigDict(frozen=True)
    composition: Tuple[int, int]
    subject: int
    bridge: int
    target: int


GraphMode = Literal["disjoint", "shared"]


class GraphConfig(BaseModel):
    """Three-partition graph with five atomic relations (ids 0..4 = Rel1..Rel5)."""
    mode: GraphMode
    partition_sizes: Tuple[int, int, int]
    atomic_facts: List[Fact]
    trained_compositions: List[Tuple[int, int]]
    held_out_composition: Tuple[int, int]
    chains: List[Chain]
    seed: int = 0

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.held_out_composition in self.trained_compositions:
            raise ValueError("held-out composition must not be trained")
        World(num_entities=self.num_entities, relations=list(range(5)), facts=self.atomic_facts)
        return self

    @property
    def num_entities(self) -> int:
        return sum(self.partition_sizes)

    def partition(self, index: int) -> range:
        start = sum(self.partition_sizes[:index])
        return range(start, start + self.partition_sizes[index])

    def to_world(self) -> World:
        return World(
            num_entities=self.num_entities,
            relations=list(range(5)),
            facts=list(self.atomic_facts),
            seed=self.seed,
        )

    def chains_for(self, composition: Tuple[int, int]) -> List[Chain]:
        return [c for c in self.chains if tuple(c.composition) == tuple(composition)]


# --- Model -----------------------------------------------------------------

class ModelDims(BaseModel):
    model_config = ConfigDict(frozen=True)
    d: int = Field(ge=2)
    m: int = Field(ge=1)
    num_entities: int = Field(ge=2)
    num_relations: int = Field(ge=1)

    @property
    def vocab(self) -> int:
        return self.num_entities + self.num_relations


class ModelParams(BaseModel):
    """Frozen random E, U, V and the trainable output map W.

    Key and query matrices are not stored: attention is exactly uniform, so
    they cannot influence any output.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    E: np.ndarray
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    dims: ModelDims
    seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self):
        d, m, n = self.dims.d, self.dims.m, self.dims.num_entities
        expected = {
            "E": (self.dims.vocab, d),
            "U": (m, d),
            "V": (d, d),
            "W": (n, m),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ValueError(f"{name} has shape {actual}, expected {shape}")
        return self

    def with_output(self, W: np.ndarray) -> "ModelParams":
        return ModelParams(E=self.E, U=self.U, V=self.V, W=W, dims=self.dims, seed=self.seed)


# --- Adapters and routing --------------------------------------------------

class EditMode(str, Enum):
    PAPER_STRICT = "paper_strict"
    EXACT_REDIRECT = "exact_redirect"


class Provenance(BaseModel):
    model_config = ConfigDict(frozen=True)
    prompt: Prompt
    old_target: int
    new_target: int


class Adapter(BaseModel):
    """Low-rank update delta = out_factor @ in_factor.T."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    out_factor: np.ndarray
    in_factor: np.ndarray
    provenance: List[Provenance] = Field(min_length=1)
    mode: EditMode = EditMode.EXACT_REDIRECT
    name: str = ""

    @model_validator(mode="after")
    def _check_factors(self):
        if self.out_factor.ndim != 2 or self.in_factor.ndim != 2:
            raise ValueError("adapter factors must be 2-d")
        if self.out_factor.shape[1] != self.in_factor.shape[1]:
            raise ValueError(
                f"factor ranks differ: {self.out_factor.shape[1]} vs {self.in_factor.shape[1]}"
            )
        if self.out_factor.shape[1] < 1:
            raise ValueError("adapter rank must be >= 1")
        return self

    @property
    def rank(self) -> int:
        return self.out_factor.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return self.out_factor @ self.in_factor.T

    def rescaled(self, c: float) -> "Adapter":
        """Same update with out_factor * c and in_factor / c."""
        return self.model_copy(update={
            "out_factor": self.out_factor * c,
            "in_factor": self.in_factor / c,
        })


class SumCombinator(BaseModel):
    strategy: Literal["sum"] = "sum"


class UniformMerge(BaseModel):
    strategy: Literal["uniform"] = "uniform"


class LinearMerge(BaseModel):
    strategy: Literal["linear"] = "linear"
    weights: List[float]


class CatCombinator(BaseModel):
    """Weighted sum of full updates; weights=None means fit them on probes."""
    strategy: Literal["cat"] = "cat"
    weights: Optional[List[float]] = None


class ArrowCombinator(BaseModel):
    strategy: Literal["arrow"] = "arrow"
    temperature: float = Field(default=1.0, gt=0)
    use_abs: bool = True
    features: Literal["post_relu", "pre_relu"] = "post_relu"
    merge: Literal["cat", "linear"] = "cat"


Combinator = Annotated[
    Union[SumCombinator, UniformMerge, LinearMerge, CatCombinator, ArrowCombinator],
    Field(discriminator="strategy"),
]


def combinator_label(combinator) -> str:
    if isinstance(combinator, ArrowCombinator) and combinator.merge == "linear":
        return "arrow_linear"
    return combinator.strategy


class RoutedDelta(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    delta: np.ndarray
    per_adapter_weights: List[float]
    similarities: Optional[List[float]] = None


class CatWeights(BaseModel):
    weights: List[float]
    degenerate: bool = False
    residual: float = 0.0


# --- Libraries -------------------------------------------------------------

class AdapterTrainSpec(BaseModel):
    name: str
    items: List[TrainItem] = Field(min_length=1)


class LibrarySpec(BaseModel):
    adapters: List[AdapterTrainSpec] = Field(min_length=1)
    combinator: Combinator = SumCombinator()
    eval_prompts: List[TrainItem] = []
    allow_overlap: bool = False

    @model_validator(mode="after")
    def _check_disjoint(self):
        if self.allow_overlap:
            return self
        seen = {}
        for spec in self.adapters:
            for item in spec.items:
                owner = seen.get(item.prompt)
                if owner is not None and owner != spec.name:
                    raise ValueError(
                        f"prompt '{item.prompt}' is trained by both '{owner}' and '{spec.name}'"
                    )
                seen[item.prompt] = spec.name
        return self


# --- Kernel ----------------------------------------------------------------

class KernelPrediction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    c1: float
    c2: float
    eta1: np.ndarray
    eta2: np.ndarray
    xi: np.ndarray


class MixtureDecomposition(BaseModel):
    c1_hat: float
    c2_hat: float
    residual_rel: float
