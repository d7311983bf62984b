"""Synthetic universes: entities, partial-function relations, edits and graphs.

Every generator is a pure function of its arguments; randomness comes only
from `numpy.random.default_rng(seed)`.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from exceptions import ParameterError, ParseError
from models import (
    AdapterTrainSpec,
    Chain,
    Fact,
    FactEdit,
    GraphConfig,
    LibrarySpec,
    OneHop,
    TrainItem,
    TwoHop,
    World,
)
from validation_utils import check_count, check_index

logger = logging.getLogger(__name__)

# Rel1..Rel5 are relation ids 0..4.
RELATION_NAMES = ("Rel1", "Rel2", "Rel3", "Rel4", "Rel5")
FIRST_HOP_RELATIONS = (0, 2, 4)   # U1 -> U2
SECOND_HOP_RELATIONS = (1, 3)     # U2 -> U3
TRAINED_COMPOSITIONS = [(0, 3), (2, 3), (2, 1), (4, 1), (4, 3)]
HELD_OUT_COMPOSITION = (0, 1)
ALL_COMPOSITIONS = TRAINED_COMPOSITIONS + [HELD_OUT_COMPOSITION]


def derive_seed(seed: int, stream: str) -> int:
    """Independent, reproducible sub-seed for a named random stream."""
    key = [int(b) for b in stream.encode("utf-8")]
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def gen_world(num_entities: int, num_relations: int, density: float, seed: int) -> World:
    check_count(num_entities, 2, "num_entities")
    check_count(num_relations, 1, "num_relations")
    if not 0.0 < density <= 1.0:
        raise ParameterError(f"density must lie in (0, 1], got {density}", {"density": density})

    rng = np.random.default_rng(seed)
    facts = []
    for rel in range(num_relations):
        present = rng.random(num_entities) < density
        targets = rng.integers(0, num_entities, size=num_entities)
        for subject in range(num_entities):
            if present[subject]:
                facts.append(Fact(rel=rel, subject=subject, target=int(targets[subject])))

    logger.debug("Generated world", extra={"entities": num_entities, "facts": len(facts), "seed": seed})
    return World(num_entities=num_entities, relations=list(range(num_relations)), facts=facts, seed=seed)


def compose(world: World, r1: int, r2: int) -> Dict[int, int]:
    """x -> r2(r1(x)) wherever both hops are defined."""
    check_index(r1, world.num_relations, "relation")
    check_index(r2, world.num_relations, "relation")
    composed = {}
    for subject, bridge in sorted(world.relation_map(r1).items()):
        target = world.target(r2, bridge)
        if target is not None:
            composed[subject] = target
    return composed


def edit_fact(world: World, rel: int, subject: int, rng: np.random.Generator) -> FactEdit:
    """Redirect r(subject) to a uniformly drawn entity other than the current one."""
    old = world.target(rel, subject)
    if old is None:
        raise ParameterError(
            f"relation {rel} is undefined on subject {subject}",
            {"rel": rel, "subject": subject},
        )
    choice = int(rng.integers(0, world.num_entities - 1))
    new = choice if choice < old else choice + 1
    return FactEdit(rel=rel, subject=subject, old_target=old, new_target=new)


def gen_edits(world: World, rel: int, count: int, seed: int) -> List[FactEdit]:
    check_index(rel, world.num_relations, "relation")
    check_count(count, 0, "count")
    subjects = sorted(world.relation_map(rel))
    if len(subjects) < count:
        raise ParameterError(
            f"relation {rel} has {len(subjects)} facts, cannot draw {count} edits",
            {"rel": rel, "available": len(subjects), "count": count},
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(subjects), size=count, replace=False) if count else []
    return [edit_fact(world, rel, subjects[i], rng) for i in chosen]


def apply_edits(world: World, edits: List[FactEdit]) -> World:
    table = {(f.rel, f.subject): f.target for f in world.facts}
    for edit in edits:
        table[(edit.rel, edit.subject)] = edit.new_target
    facts = [Fact(rel=r, subject=s, target=t) for (r, s), t in sorted(table.items())]
    return World(num_entities=world.num_entities, relations=list(world.relations), facts=facts, seed=world.seed)


def stored_facts(world: World, include_two_hop: bool = False) -> List[TrainItem]:
    """Every one-hop fact, and optionally every defined two-hop composition."""
    items = [
        TrainItem(prompt=OneHop(subject=f.subject, rel=f.rel), target=f.target)
        for f in sorted(world.facts, key=lambda f: (f.rel, f.subject))
    ]
    if include_two_hop:
        for r1 in world.relations:
            for r2 in world.relations:
                for subject, target in compose(world, r1, r2).items():
                    items.append(TrainItem(prompt=TwoHop(subject=subject, rel1=r1, rel2=r2), target=target))
    return items


class TwoHopChain(BaseModel):
    """x -r1-> y -r2-> z after the two edits."""
    subject: int
    r1: int
    r2: int
    edit1: FactEdit
    edit2: FactEdit

    @property
    def bridge(self) -> int:
        return self.edit1.new_target

    @property
    def target(self) -> int:
        return self.edit2.new_target

    @property
    def prompt(self) -> TwoHop:
        return TwoHop(subject=self.subject, rel1=self.r1, rel2=self.r2)


def sample_chains(world: World, r1: int, r2: int, count: int, rng: np.random.Generator) -> List[TwoHopChain]:
    """Draw `count` chains with distinct subjects and distinct edited bridges.

    A chain is skipped when its edited answer equals the bridge or the
    pre-edit composition r2(r1(x)), which the base model already predicts.
    """
    check_index(r1, world.num_relations, "relation")
    check_index(r2, world.num_relations, "relation")
    subjects = sorted(world.relation_map(r1))
    pre_edit = compose(world, r1, r2)
    order = rng.permutation(len(subjects))
    chains, used_bridges = [], set()
    for i in order:
        if len(chains) == count:
            break
        subject = subjects[i]
        edit1 = edit_fact(world, r1, subject, rng)
        bridge = edit1.new_target
        if bridge in used_bridges or world.target(r2, bridge) is None:
            continue
        if r1 == r2 and bridge == subject:
            continue
        edit2 = edit_fact(world, r2, bridge, rng)
        if edit2.new_target in (bridge, pre_edit.get(subject)):
            continue
        used_bridges.add(bridge)
        chains.append(TwoHopChain(subject=subject, r1=r1, r2=r2, edit1=edit1, edit2=edit2))
    if len(chains) < count:
        raise ParameterError(
            f"could only build {len(chains)} of {count} chains over relations ({r1}, {r2})",
            {"r1": r1, "r2": r2, "count": count},
        )
    return chains


def build_two_hop_library(chain: TwoHopChain, include_oracle: bool = False,
                          include_mixed: bool = False) -> LibrarySpec:
    """Adapters for each hop of `chain`, optionally plus the oracle and mixed experts."""
    hop1 = TrainItem(prompt=chain.edit1.prompt, target=chain.edit1.new_target)
    hop2 = TrainItem(prompt=chain.edit2.prompt, target=chain.edit2.new_target)
    adapters = [
        AdapterTrainSpec(name="hop1", items=[hop1]),
        AdapterTrainSpec(name="hop2", items=[hop2]),
    ]
    if include_oracle:
        adapters.append(AdapterTrainSpec(name="oracle", items=[TrainItem(prompt=chain.prompt, target=chain.target)]))
    if include_mixed:
        adapters.append(AdapterTrainSpec(name="mixed", items=[hop1, hop2]))
    return LibrarySpec(
        adapters=adapters,
        eval_prompts=[TrainItem(prompt=chain.prompt, target=chain.target)],
        allow_overlap=include_mixed,
    )


def gen_graph_config(mode: str, partition_sizes: Tuple[int, int, int], seed: int,
                     chains_per_composition: Optional[int] = None) -> GraphConfig:
    """Five atomic relations over U1 x U2 (Rel1, Rel3, Rel5) and U2 x U3 (Rel2, Rel4).

    Disjoint mode gives every chain its own entities, so no entity appears in
    two triples of the same relation family. Shared mode draws total random
    functions over the whole partitions and lets chains reuse entities.
    """
    if mode not in ("disjoint", "shared"):
        raise ParameterError(f"unknown graph mode {mode!r}", {"mode": mode})
    if len(partition_sizes) != 3:
        raise ParameterError("partition_sizes must have three entries", {"sizes": list(partition_sizes)})
    for size in partition_sizes:
        check_count(size, 1, "partition size")

    per_comp = chains_per_composition
    if per_comp is None:
        per_comp = min(partition_sizes) // len(ALL_COMPOSITIONS)
    if mode == "disjoint" and per_comp * len(ALL_COMPOSITIONS) > min(partition_sizes):
        per_comp = 0
    if mode == "disjoint" and per_comp < 1:
        raise ParameterError(
            f"partitions {tuple(partition_sizes)} are too small for disjoint graphs "
            f"({len(ALL_COMPOSITIONS)} compositions need at least one private chain each)",
            {"sizes": list(partition_sizes)},
        )
    per_comp = max(per_comp, 1)
    if per_comp > partition_sizes[0]:
        raise ParameterError("more chains per composition than U1 subjects", {"chains": per_comp})

    n1, n2, _ = partition_sizes
    u1 = np.arange(0, n1)
    u2 = np.arange(n1, n1 + n2)
    u3 = np.arange(n1 + n2, sum(partition_sizes))
    rng = np.random.default_rng(seed)

    table: Dict[Tuple[int, int], int] = {}
    chains: List[Chain] = []
    if mode == "disjoint":
        p1, p2, p3 = rng.permutation(u1), rng.permutation(u2), rng.permutation(u3)
        slot = 0
        for a, b in ALL_COMPOSITIONS:
            for _ in range(per_comp):
                x, y, z = int(p1[slot]), int(p2[slot]), int(p3[slot])
                table[(a, x)] = y
                table[(b, y)] = z
                chains.append(Chain(composition=(a, b), subject=x, bridge=y, target=z))
                slot += 1
    else:
        for rel in FIRST_HOP_RELATIONS:
            for x, y in zip(u1, rng.choice(u2, size=n1)):
                table[(rel, int(x))] = int(y)
        for rel in SECOND_HOP_RELATIONS:
            for y, z in zip(u2, rng.choice(u3, size=n2)):
                table[(rel, int(y))] = int(z)
        for a, b in ALL_COMPOSITIONS:
            for x in rng.choice(u1, size=per_comp, replace=False):
                y = table[(a, int(x))]
                chains.append(Chain(composition=(a, b), subject=int(x), bridge=y, target=table[(b, y)]))

    facts = [Fact(rel=r, subject=s, target=t) for (r, s), t in sorted(table.items())]
    config = GraphConfig(
        mode=mode,
        partition_sizes=tuple(partition_sizes),
        atomic_facts=facts,
        trained_compositions=list(TRAINED_COMPOSITIONS),
        held_out_composition=HELD_OUT_COMPOSITION,
        chains=chains,
        seed=seed,
    )
    if mode == "disjoint":
        check_disjoint(config)
    return config


def check_disjoint(config: GraphConfig) -> None:
    """No entity may appear in two triples of the same relation family."""
    for family in (FIRST_HOP_RELATIONS, SECOND_HOP_RELATIONS):
        seen = set()
        for fact in config.atomic_facts:
            if fact.rel not in family:
                continue
            for entity in (fact.subject, fact.target):
                if entity in seen:
                    raise ParameterError(
                        f"entity {entity} appears in two triples of family {family}",
                        {"entity": entity, "family": list(family)},
                    )
                seen.add(entity)


def build_graph_library(config: GraphConfig) -> LibrarySpec:
    """Five atomic-relation adapters, five trained-composition adapters, held-out eval."""
    adapters = []
    for rel in range(len(RELATION_NAMES)):
        items = [
            TrainItem(prompt=OneHop(subject=f.subject, rel=f.rel), target=f.target)
            for f in config.atomic_facts if f.rel == rel
        ]
        if items:
            adapters.append(AdapterTrainSpec(name=RELATION_NAMES[rel], items=items))
    for a, b in config.trained_compositions:
        items = [
            TrainItem(prompt=TwoHop(subject=c.subject, rel1=a, rel2=b), target=c.target)
            for c in config.chains_for((a, b))
        ]
        adapters.append(AdapterTrainSpec(name=f"{RELATION_NAMES[a]}->{RELATION_NAMES[b]}", items=items))
    a, b = config.held_out_composition
    eval_items = [
        TrainItem(prompt=TwoHop(subject=c.subject, rel1=a, rel2=b), target=c.target)
        for c in config.chains_for((a, b))
    ]
    return LibrarySpec(adapters=adapters, eval_prompts=eval_items)


# --- Files -----------------------------------------------------------------

def _dump(model: BaseModel, path) -> None:
    Path(path).write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _load(model_cls, path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}", {"path": str(path)})
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(
            f"{path}:{e.lineno}:{e.colno}: {e.msg}",
            {"path": str(path), "line": e.lineno, "column": e.colno},
        )
    try:
        return model_cls.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ParseError(
            f"{path}: field '{field}': {first['msg']}",
            {"path": str(path), "field": field, "errors": len(e.errors())},
        )


def save_world(world: World, path) -> None:
    _dump(world, path)


def load_world(path) -> World:
    return _load(World, path)


def save_graph_config(config: GraphConfig, path) -> None:
    _dump(config, path)


def load_graph_config(path) -> GraphConfig:
    return _load(GraphConfig, path)


def save_library_spec(spec: LibrarySpec, path) -> None:
    _dump(spec, path)


def load_library_spec(path) -> LibrarySpec:
    return _load(LibrarySpec, path)
