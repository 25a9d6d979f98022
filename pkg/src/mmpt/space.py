"""Attribute/object label sets, the composition product grid and its splits."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


class SpaceError(ValueError):
    pass


class Regime(str, enum.Enum):
    SUPERVISED = "supervised"
    ZSL = "zsl"
    GENERALIZED = "generalized"
    OPEN_WORLD = "open_world"


@dataclass(frozen=True)
class LabelSet:
    names: tuple[str, ...]
    role: str = "attribute"

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if self.role not in ("attribute", "object"):
            raise SpaceError(f"role must be 'attribute' or 'object', got {self.role!r}")
        seen = set()
        for name in self.names:
            if name in seen:
                raise SpaceError(f"duplicate {self.role} label: {name!r}")
            seen.add(name)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SpaceError(f"unknown {self.role} label: {name!r}") from None


@dataclass(frozen=True, order=True)
class Composition:
    attribute_idx: int
    object_idx: int

    def as_tuple(self) -> tuple[int, int]:
        return (self.attribute_idx, self.object_idx)


def _as_composition(pair) -> Composition:
    if isinstance(pair, Composition):
        return pair
    a, o = pair
    return Composition(int(a), int(o))


@dataclass(frozen=True)
class CompositionSpace:
    attributes: LabelSet
    objects: LabelSet
    seen: frozenset = field(default_factory=frozenset)
    unseen_val: frozenset = field(default_factory=frozenset)
    unseen_test: frozenset = field(default_factory=frozenset)
    splits_assigned: bool = False

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def size(self) -> int:
        return self.n_attributes * self.n_objects

    @property
    def unseen(self) -> frozenset:
        return self.unseen_val | self.unseen_test

    def __iter__(self) -> Iterator[Composition]:
        # attribute-major
        for a in range(self.n_attributes):
            for o in range(self.n_objects):
                yield Composition(a, o)

    def contains(self, c: Composition) -> bool:
        return 0 <= c.attribute_idx < self.n_attributes and 0 <= c.object_idx < self.n_objects

    def flat_index(self, c: Composition) -> int:
        return c.attribute_idx * self.n_objects + c.object_idx

    def from_flat(self, k: int) -> Composition:
        return Composition(*divmod(int(k), self.n_objects))

    def lookup(self, attr_name: str, obj_name: str) -> Composition:
        return Composition(self.attributes.index(attr_name), self.objects.index(obj_name))

    def names_of(self, c: Composition) -> tuple[str, str]:
        return self.attributes.names[c.attribute_idx], self.objects.names[c.object_idx]

    def seen_mask(self):
        """Boolean |A|x|O| array marking seen compositions."""
        import numpy as np

        mask = np.zeros((self.n_attributes, self.n_objects), dtype=bool)
        for c in self.seen:
            mask[c.attribute_idx, c.object_idx] = True
        return mask

    def same_labels(self, other: "CompositionSpace") -> bool:
        return self.attributes.names == other.attributes.names and self.objects.names == other.objects.names

    def to_dict(self) -> dict:
        def pairs(s):
            return [list(self.names_of(c)) for c in sorted(s)]

        return {
            "attributes": list(self.attributes.names),
            "objects": list(self.objects.names),
            "seen": pairs(self.seen),
            "unseen_val": pairs(self.unseen_val),
            "unseen_test": pairs(self.unseen_test),
        }


def build_space(attrs: LabelSet | Iterable[str], objs: LabelSet | Iterable[str]) -> CompositionSpace:
    if not isinstance(attrs, LabelSet):
        attrs = LabelSet(tuple(attrs), "attribute")
    if not isinstance(objs, LabelSet):
        objs = LabelSet(tuple(objs), "object")
    if len(attrs) == 0 or len(objs) == 0:
        raise SpaceError("attribute and object label sets must be non-empty")
    return CompositionSpace(attrs, objs)


def assign_splits(space: CompositionSpace, seen, unseen_val=(), unseen_test=()) -> CompositionSpace:
    splits = {
        "seen": frozenset(_as_composition(p) for p in seen),
        "unseen_val": frozenset(_as_composition(p) for p in unseen_val),
        "unseen_test": frozenset(_as_composition(p) for p in unseen_test),
    }
    for name, members in splits.items():
        bad = sorted(c.as_tuple() for c in members if not space.contains(c))
        if bad:
            raise SpaceError(f"{name} contains out-of-vocabulary pairs: {bad}")
    names = list(splits)
    for i, x in enumerate(names):
        for y in names[i + 1:]:
            overlap = splits[x] & splits[y]
            if overlap:
                listed = sorted(c.as_tuple() for c in overlap)
                raise SpaceError(f"splits {x} and {y} overlap on pairs: {listed}")
    return CompositionSpace(space.attributes, space.objects, splits_assigned=True, **splits)


def output_space(space: CompositionSpace, regime: Regime | str) -> frozenset:
    regime = Regime(regime)
    if not space.splits_assigned:
        raise SpaceError(f"cannot build the {regime.value} output space before splits are assigned")
    if regime is Regime.SUPERVISED:
        return space.seen
    if regime is Regime.ZSL:
        return space.unseen
    if regime is Regime.GENERALIZED:
        return space.seen | space.unseen
    return frozenset(space)


def space_from_dict(d: dict) -> CompositionSpace:
    for key in ("attributes", "objects"):
        if key not in d:
            raise SpaceError(f"space definition is missing {key!r}")
    space = build_space(LabelSet(tuple(d["attributes"]), "attribute"), LabelSet(tuple(d["objects"]), "object"))

    def resolve(key):
        out = []
        for pair in d.get(key, []):
            if len(pair) != 2:
                raise SpaceError(f"{key} entry {pair!r} is not an [attribute, object] pair")
            out.append(space.lookup(*pair))
        return out

    return assign_splits(space, resolve("seen"), resolve("unseen_val"), resolve("unseen_test"))


def load_space(path) -> CompositionSpace:
    with open(path) as f:
        return space_from_dict(json.load(f))


def save_space(space: CompositionSpace, path) -> None:
    Path(path).write_text(json.dumps(space.to_dict(), indent=2) + "\n")


DEFAULT_ATTRIBUTES = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "violet")
DEFAULT_OBJECTS = (
    "circle", "square", "triangle", "hbars", "vbars",
    "ring", "cross", "diamond", "frame", "dot",
)


def default_space() -> CompositionSpace:
    """Desk-scale 8x10 space with 56 seen, 12 unseen-val and 12 unseen-test pairs.

    Each attribute holds out three objects at offsets {0, 3, 6} so every
    attribute and every object keeps seen examples; held-out pairs alternate
    between the val and test splits.
    """
    space = build_space(DEFAULT_ATTRIBUTES, DEFAULT_OBJECTS)
    n_obj = space.n_objects
    held_out = sorted(
        Composition(a, (a + k) % n_obj) for a in range(space.n_attributes) for k in (0, 3, 6)
    )
    val = held_out[0::2]
    test = held_out[1::2]
    seen = [c for c in space if c not in set(held_out)]
    return assign_splits(space, seen, val, test)
