"""Label spaces: occasions, clothing categories with body zones, attribute types."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import yaml

from .errors import OntologyError

NA = "n/a"
BODY_ZONES = ("upper", "lower", "full")


@dataclass(frozen=True)
class Category:
    name: str
    body_zone: str


@dataclass(frozen=True)
class AttributeType:
    name: str
    values: tuple

    @property
    def na_index(self) -> int:
        return self.values.index(NA)


@dataclass(frozen=True)
class LabelSpace:
    occasions: tuple
    categories: tuple
    attribute_types: tuple

    def __post_init__(self):
        _validate(self)

    @property
    def n_occasions(self) -> int:
        return len(self.occasions)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_attribute_types(self) -> int:
        return len(self.attribute_types)

    @property
    def attribute_sizes(self) -> tuple:
        return tuple(len(a.values) for a in self.attribute_types)

    def head_sizes(self) -> dict:
        """Class count per prediction head, keyed by head name."""
        sizes = {"occasion": self.n_occasions, "category": self.n_categories}
        for a in self.attribute_types:
            sizes[a.name] = len(a.values)
        return sizes

    @cached_property
    def _index(self) -> dict:
        return {
            "occasion": {n: i for i, n in enumerate(self.occasions)},
            "category": {c.name: i for i, c in enumerate(self.categories)},
            "attribute_type": {a.name: i for i, a in enumerate(self.attribute_types)},
        }

    def occasion_index(self, name: str) -> int:
        return self._index["occasion"][name]

    def category_index(self, name: str) -> int:
        return self._index["category"][name]

    def attribute_type_index(self, name: str) -> int:
        return self._index["attribute_type"][name]

    def value_index(self, type_index: int, value: str) -> int:
        return self.attribute_types[type_index].values.index(value)

    def body_zone(self, category: int) -> str:
        return self.categories[category].body_zone

    def to_dict(self) -> dict:
        return {
            "occasions": list(self.occasions),
            "categories": [{"name": c.name, "body_zone": c.body_zone} for c in self.categories],
            "attribute_types": [{"name": a.name, "values": list(a.values)}
                                for a in self.attribute_types],
        }

    def serialize(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @cached_property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _unique(names, what):
    seen = set()
    for n in names:
        if n in seen:
            raise OntologyError(f"duplicate {what} name {n!r}")
        seen.add(n)


def _validate(space: LabelSpace) -> None:
    if not space.occasions:
        raise OntologyError("at least one occasion is required")
    if not space.categories:
        raise OntologyError("at least one category is required")
    if not space.attribute_types:
        raise OntologyError("at least one attribute type is required")
    _unique(space.occasions, "occasion")
    _unique([c.name for c in space.categories], "category")
    _unique([a.name for a in space.attribute_types], "attribute type")
    for c in space.categories:
        if c.body_zone not in BODY_ZONES:
            raise OntologyError(f"category {c.name!r} has invalid body_zone {c.body_zone!r}")
    for a in space.attribute_types:
        _unique(a.values, f"value in attribute type {a.name!r}")
        if a.values.count(NA) != 1:
            raise OntologyError(f"attribute type {a.name!r} must contain exactly one {NA!r}")


def from_dict(doc: dict) -> LabelSpace:
    if not isinstance(doc, dict):
        raise OntologyError("ontology document must be a mapping")
    missing = {"occasions", "categories", "attribute_types"} - set(doc)
    if missing:
        raise OntologyError(f"ontology is missing {sorted(missing)}")
    cats = []
    for c in doc["categories"] or []:
        if not isinstance(c, dict) or "name" not in c:
            raise OntologyError(f"malformed category entry {c!r}")
        if not c.get("body_zone"):
            raise OntologyError(f"category {c['name']!r} has no body_zone")
        cats.append(Category(str(c["name"]), str(c["body_zone"])))
    attrs = []
    for a in doc["attribute_types"] or []:
        if not isinstance(a, dict) or "name" not in a or "values" not in a:
            raise OntologyError(f"malformed attribute type entry {a!r}")
        attrs.append(AttributeType(str(a["name"]), tuple(str(v) for v in a["values"])))
    return LabelSpace(tuple(str(o) for o in doc["occasions"] or []), tuple(cats), tuple(attrs))


def load_ontology(source=None) -> LabelSpace:
    """Load a label space.

    ``source`` may be a path, YAML text, an already-parsed mapping, or one of
    the bundled names ``"default"`` / ``"tiny"``. ``None`` means default.
    """
    if source is None:
        source = "default"
    if isinstance(source, LabelSpace):
        return source
    if isinstance(source, dict):
        return from_dict(source)
    if isinstance(source, str) and source in ("default", "tiny"):
        text = resources.files("fashionke.data").joinpath(f"{source}_ontology.yaml").read_text()
    elif isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                      and Path(source).exists()):
        text = Path(source).read_text()
    else:
        text = str(source)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise OntologyError(f"ontology is not valid YAML: {exc}") from None
    return from_dict(doc)


def validate_record(record, space: LabelSpace) -> list:
    """Return the list of label violations in ``record`` (empty when valid)."""
    problems = []
    if not 0 <= record.occasion < space.n_occasions:
        problems.append("occasion out of range")
    K = space.n_attribute_types
    for r, region in enumerate(record.regions):
        if not 0 <= region.category < space.n_categories:
            problems.append(f"region {r}: category out of range")
        if len(region.attributes) != K:
            problems.append(f"region {r}: attribute arity {len(region.attributes)} != {K}")
            continue
        for k, v in enumerate(region.attributes):
            if not 0 <= v < len(space.attribute_types[k].values):
                problems.append(f"region {r}: attribute {space.attribute_types[k].name} out of range")
    return problems
