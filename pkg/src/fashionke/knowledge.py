"""From per-item concepts to (occasion, person, clothing) knowledge.

Clothes are canonicalized to a category plus a few attributes of interest,
paired into outfits by body zone, and counted per (occasion, gender). The
same outfit enumeration feeds the ranked triplets and the matching
statistics, and predicted or annotated records go through identical code.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidLabel
from .ontology import NA, LabelSpace

PREDICTED, GROUND_TRUTH = "predicted", "ground-truth"
MAX_ATTRS = 3
DEFAULT_TOP_N = 20


@dataclass(frozen=True)
class Clothing:
    category: int
    attributes: tuple


@dataclass(frozen=True)
class Person:
    gender: str
    clothes: tuple


@dataclass(frozen=True)
class ConceptRecord:
    post_id: str
    occasion: int
    persons: tuple
    source: str = GROUND_TRUTH
    metadata: dict | None = field(default=None, compare=False, hash=False)


@dataclass(frozen=True, order=True)
class ClothingKey:
    category: int
    attributes: tuple = ()  # ((type index, value index), ...) sorted by type index

    def label(self, space: LabelSpace) -> str:
        parts = [space.categories[self.category].name]
        parts += [f"{space.attribute_types[k].name}={space.attribute_types[k].values[v]}"
                  for k, v in self.attributes]
        return "|".join(parts)


@dataclass(frozen=True)
class Outfit:
    """Either a full-body item alone or an (upper, lower) pair with one side possibly absent."""
    upper: ClothingKey | None = None
    lower: ClothingKey | None = None
    full: ClothingKey | None = None

    def sort_key(self) -> tuple:
        if self.full is not None:
            return (1, self.full)
        return (0, _opt(self.upper), _opt(self.lower))

    def label(self, space: LabelSpace) -> dict:
        if self.full is not None:
            return {"full": self.full.label(space)}
        return {"upper": self.upper.label(space) if self.upper else None,
                "lower": self.lower.label(space) if self.lower else None}


def _opt(key):
    return (0,) if key is None else (1, key)


@dataclass(frozen=True)
class KnowledgeTriplet:
    occasion: int
    gender: str
    outfit: Outfit
    support: int
    rank: int

    def to_dict(self, space: LabelSpace) -> dict:
        return {"rank": self.rank, "support": self.support,
                "occasion": space.occasions[self.occasion], "gender": self.gender,
                "outfit": self.outfit.label(space)}


# -- canonicalization and outfits --------------------------------------------------------------

def default_attrs_of_interest(space: LabelSpace) -> dict:
    """First three attribute types, in ontology order, for every category."""
    first = tuple(range(min(MAX_ATTRS, space.n_attribute_types)))
    return {c: first for c in range(space.n_categories)}


def resolve_attrs_of_interest(spec, space: LabelSpace) -> dict:
    """Normalize a per-category mapping (names or indices) to ``{category: (type, ...)}``."""
    out = default_attrs_of_interest(space)
    for cat, types in (spec or {}).items():
        c = space.category_index(cat) if isinstance(cat, str) else int(cat)
        if not 0 <= c < space.n_categories:
            raise InvalidLabel(f"category {cat!r} out of range")
        idx = tuple(sorted(space.attribute_type_index(t) if isinstance(t, str) else int(t)
                           for t in types))
        if len(idx) > MAX_ATTRS:
            raise ConfigError(f"category {cat!r} lists {len(idx)} attributes of interest; "
                              f"at most {MAX_ATTRS} are allowed")
        if len(set(idx)) != len(idx) or any(not 0 <= k < space.n_attribute_types for k in idx):
            raise ConfigError(f"invalid attributes of interest for category {cat!r}")
        out[c] = idx
    return out


def canonicalize_clothing(clothing: Clothing, attrs_of_interest: dict, space: LabelSpace) -> ClothingKey:
    c = int(clothing.category)
    if not 0 <= c < space.n_categories:
        raise InvalidLabel(f"category {c} out of range [0, {space.n_categories})")
    chosen = attrs_of_interest.get(c, ())
    if len(chosen) > MAX_ATTRS:
        raise ConfigError(f"at most {MAX_ATTRS} attributes of interest per category")
    pairs = []
    for k in sorted(chosen):
        v = int(clothing.attributes[k])
        if not 0 <= v < len(space.attribute_types[k].values):
            raise InvalidLabel(f"attribute {space.attribute_types[k].name} value {v} out of range")
        if v != space.attribute_types[k].na_index:
            pairs.append((k, v))
    return ClothingKey(c, tuple(pairs))


def build_outfits(clothes, space: LabelSpace, attrs_of_interest: dict | None = None) -> list:
    """Outfits worn by one person, in a deterministic order."""
    aoi = attrs_of_interest if attrs_of_interest is not None else default_attrs_of_interest(space)
    uppers, lowers, fulls = [], [], []
    for item in clothes:
        key = canonicalize_clothing(item, aoi, space)
        zone = space.body_zone(key.category)
        (uppers if zone == "upper" else lowers if zone == "lower" else fulls).append(key)
    outfits = [Outfit(full=k) for k in fulls]
    if uppers and lowers:
        outfits += [Outfit(upper=u, lower=l) for u in uppers for l in lowers]
    else:
        outfits += [Outfit(upper=u) for u in uppers] + [Outfit(lower=l) for l in lowers]
    return outfits


# -- mining ------------------------------------------------------------------------------------

def _instances(records, space, aoi):
    """Yield (occasion, gender, outfit) for every outfit of every person."""
    for rec in records:
        for person in rec.persons:
            for outfit in build_outfits(person.clothes, space, aoi):
                yield rec.occasion, person.gender, outfit


def _triplet_order(item):
    (occ, gender, outfit), support = item
    return (-support, occ, gender, outfit.sort_key())


def mine_triplets(records, space: LabelSpace, min_support: int = 1, attrs_of_interest=None) -> list:
    """Ranked triplets: descending support, ties by (occasion, gender, outfit)."""
    if min_support < 1:
        raise ConfigError("min_support must be at least 1")
    aoi = resolve_attrs_of_interest(attrs_of_interest, space)
    counts = Counter(_instances(records, space, aoi))
    kept = sorted(((k, n) for k, n in counts.items() if n >= min_support), key=_triplet_order)
    return [KnowledgeTriplet(o, g, out, n, rank) for rank, ((o, g, out), n) in enumerate(kept, 1)]


@dataclass
class LabeledMatrix:
    rows: list
    cols: list
    counts: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + list(self.cols))
            for name, row in zip(self.rows, self.counts):
                w.writerow([name] + [int(v) for v in row])

    def edges(self) -> list:
        """Nonzero cells as (row label, column label, count), row-major."""
        return [(self.rows[i], self.cols[j], int(self.counts[i, j]))
                for i, j in zip(*np.nonzero(self.counts))]


def _value_labels(space):
    labels, offset = [], []
    for a in space.attribute_types:
        offset.append(len(labels))
        labels += [f"{a.name}={v}" for v in a.values]
    return labels, offset


def matching_stats(records, space: LabelSpace, attrs_of_interest=None, top_n: int = DEFAULT_TOP_N) -> dict:
    """Category and attribute matching graphs plus the occasion x clothing matrix.

    ``category_graph[u, l]`` counts (upper, lower) outfit pairs by category;
    ``attribute_graph`` counts every (upper attribute value, lower attribute
    value) combination of the paired keys; ``occasion_matrix`` counts worn
    items per (occasion, gender) for the ``top_n`` most frequent keys.
    """
    aoi = resolve_attrs_of_interest(attrs_of_interest, space)
    cats = [c.name for c in space.categories]
    values, offset = _value_labels(space)
    cat_graph = np.zeros((len(cats), len(cats)), dtype=np.int64)
    attr_graph = np.zeros((len(values), len(values)), dtype=np.int64)
    for _, _, outfit in _instances(records, space, aoi):
        if outfit.upper is None or outfit.lower is None:
            continue
        cat_graph[outfit.upper.category, outfit.lower.category] += 1
        for ku, vu in outfit.upper.attributes:
            for kl, vl in outfit.lower.attributes:
                attr_graph[offset[ku] + vu, offset[kl] + vl] += 1

    worn = Counter()
    for rec in records:
        for person in rec.persons:
            for item in person.clothes:
                worn[(rec.occasion, person.gender, canonicalize_clothing(item, aoi, space))] += 1
    key_freq = Counter()
    for (_, _, key), n in worn.items():
        key_freq[key] += n
    top = [k for k, _ in sorted(key_freq.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]]
    groups = sorted({(o, g) for o, g, _ in worn})
    col = {k: j for j, k in enumerate(top)}
    row = {g: i for i, g in enumerate(groups)}
    occ = np.zeros((len(groups), len(top)), dtype=np.int64)
    for (o, g, key), n in worn.items():
        if key in col:
            occ[row[(o, g)], col[key]] += n
    return {
        "category_graph": LabeledMatrix(cats, cats, cat_graph),
        "attribute_graph": LabeledMatrix(values, values, attr_graph),
        "occasion_matrix": LabeledMatrix([f"{space.occasions[o]}|{g}" for o, g in groups],
                                         [k.label(space) for k in top], occ),
    }


# -- record conversion --------------------------------------------------------------------------

def _group_persons(regions, labels):
    persons = {}
    for reg, (cat, attrs) in zip(regions, labels):
        g, items = persons.setdefault(reg.person, (reg.person_gender, []))
        items.append(Clothing(int(cat), tuple(int(a) for a in attrs)))
    return tuple(Person(g, tuple(items)) for _, (g, items) in sorted(persons.items()))


def concept_records_from_posts(posts) -> list:
    """Annotated concepts of each post, regions grouped by their person."""
    return [ConceptRecord(p.post_id, int(p.occasion),
                          _group_persons(p.regions, [(r.category, r.attributes) for r in p.regions]),
                          GROUND_TRUTH, p.metadata)
            for p in posts]


def concept_records_from_predictions(posts, predictions) -> list:
    """Predicted concepts (see :func:`fashionke.trainer.predict`) in the same layout."""
    out = []
    for b, p in enumerate(posts):
        labels = list(zip(predictions.category[b], predictions.attributes[b]))
        out.append(ConceptRecord(p.post_id, int(predictions.occasion[b]),
                                 _group_persons(p.regions, labels), PREDICTED, p.metadata))
    return out


# -- export ---------------------------------------------------------------------------------------

def write_triplets_json(triplets, space: LabelSpace, path) -> None:
    Path(path).write_text(json.dumps([t.to_dict(space) for t in triplets], indent=2) + "\n")


def write_edge_list(matrix: LabeledMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "target", "weight"])
        w.writerows(matrix.edges())


def export_knowledge(triplets, stats: dict, space: LabelSpace, directory) -> list:
    """Write triplets.json, one CSV per matrix and edge lists for the two matching graphs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / "triplets.json"]
    write_triplets_json(triplets, space, paths[0])
    for name, m in stats.items():
        p = directory / f"{name}.csv"
        m.to_csv(p)
        paths.append(p)
    for name in ("category_graph", "attribute_graph"):
        p = directory / f"{name}_edges.csv"
        write_edge_list(stats[name], p)
        paths.append(p)
    return paths
