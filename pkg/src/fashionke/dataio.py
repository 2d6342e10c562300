"""Post records, the dataset file format, splitting, and the synthetic generator.

The generator stands in for real social-media data: it plants a known
occasion -> category chain -> attribute dependency structure, emits
prototype-plus-Gaussian features, and flips category/attribute labels of
weak-flagged posts with known transition matrices. True labels and the
tagging-tool labels are both kept on every region so noise statistics can
be measured exactly and transition matrices can be estimated from the
clean part.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidTransitionMatrix, ParseError, SplitError
from .ontology import LabelSpace

SCHEMA = "fashionke.dataset"
SCHEMA_VERSION = 1
CLEAN, WEAK = "clean", "weak"
GENDERS = ("female", "male")


@dataclass(eq=False)
class RegionRecord:
    bbox: tuple
    feature: np.ndarray
    category: int
    attributes: list
    person_gender: str = "unknown"
    person: int = 0
    # hidden ground truth and tagging-tool output; never used as training targets
    true_category: int | None = None
    true_attributes: list | None = None
    tool_category: int | None = None
    tool_attributes: list | None = None

    def to_dict(self) -> dict:
        d = {
            "bbox": [float(v) for v in self.bbox],
            "feature": [float(v) for v in self.feature],
            "category": int(self.category),
            "attributes": [int(v) for v in self.attributes],
            "person_gender": self.person_gender,
            "person": int(self.person),
        }
        for key in ("true_category", "tool_category"):
            v = getattr(self, key)
            if v is not None:
                d[key] = int(v)
        for key in ("true_attributes", "tool_attributes"):
            v = getattr(self, key)
            if v is not None:
                d[key] = [int(x) for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegionRecord":
        return cls(
            bbox=tuple(float(v) for v in d["bbox"]),
            feature=np.asarray(d["feature"], dtype=np.float64),
            category=int(d["category"]),
            attributes=[int(v) for v in d["attributes"]],
            person_gender=d.get("person_gender", "unknown"),
            person=int(d.get("person", 0)),
            true_category=d.get("true_category"),
            true_attributes=d.get("true_attributes"),
            tool_category=d.get("tool_category"),
            tool_attributes=d.get("tool_attributes"),
        )

    def __eq__(self, other):
        return isinstance(other, RegionRecord) and self.to_dict() == other.to_dict()


@dataclass(eq=False)
class PostRecord:
    post_id: str
    whole_feature: np.ndarray
    tokens: list
    regions: list
    occasion: int
    provenance: str = CLEAN
    metadata: dict | None = None

    @property
    def is_weak(self) -> bool:
        return self.provenance == WEAK

    def to_dict(self) -> dict:
        d = {
            "post_id": self.post_id,
            "whole_feature": [float(v) for v in self.whole_feature],
            "tokens": [int(t) for t in self.tokens],
            "regions": [r.to_dict() for r in self.regions],
            "occasion": int(self.occasion),
            "provenance": self.provenance,
        }
        if self.metadata is not None:
            d["metadata"] = dict(self.metadata)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PostRecord":
        prov = d.get("provenance", CLEAN)
        if prov not in (CLEAN, WEAK):
            raise ValueError(f"unknown provenance {prov!r}")
        return cls(
            post_id=str(d["post_id"]),
            whole_feature=np.asarray(d["whole_feature"], dtype=np.float64),
            tokens=[int(t) for t in d["tokens"]],
            regions=[RegionRecord.from_dict(r) for r in d["regions"]],
            occasion=int(d["occasion"]),
            provenance=prov,
            metadata=d.get("metadata"),
        )

    def __eq__(self, other):
        return isinstance(other, PostRecord) and self.to_dict() == other.to_dict()


def spatial_order(bboxes) -> list:
    """Indices sorting boxes left-to-right, then top-to-bottom, then by input order."""
    return sorted(range(len(bboxes)), key=lambda i: (bboxes[i][0], bboxes[i][1], i))


# -- file format -----------------------------------------------------------------

def write_dataset(dataset, path) -> None:
    """Write one JSON object per line after a schema header; atomic replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION}) + "\n")
            for rec in dataset:
                fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_dataset(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed record ({exc.msg})", lineno) from None
            if lineno == 1:
                if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
                    raise ParseError("missing dataset schema header", lineno)
                if doc.get("version") != SCHEMA_VERSION:
                    raise ParseError(f"unsupported schema version {doc.get('version')!r}", lineno)
                continue
            try:
                out.append(PostRecord.from_dict(doc))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"invalid record ({exc!r})", lineno) from None
    return out


# -- transition matrices for noise injection ------------------------------------------

def make_transition(n: int, kind: str = "pair", mass: float = 0.0) -> np.ndarray:
    """Column-stochastic ``Q[j, i] = p(weak=j | true=i)``.

    ``pair`` moves ``mass`` of each column onto the next class (cyclically);
    ``uniform`` spreads it evenly over the other classes; ``sink`` moves it
    onto class 0 (class 0 itself leaks to class 1), like a tagger falling
    back to a default label.
    """
    if not 0.0 <= mass <= 1.0:
        raise ConfigError(f"noise mass {mass} outside [0, 1]")
    if n == 1 or mass == 0.0 or kind == "identity":
        return np.eye(n)
    q = np.eye(n) * (1.0 - mass)
    if kind == "pair":
        for i in range(n):
            q[(i + 1) % n, i] += mass
    elif kind == "uniform":
        q += (1.0 - np.eye(n)) * (mass / (n - 1))
    elif kind == "sink":
        q[0, 1:] += mass
        q[1, 0] += mass
    else:
        raise ConfigError(f"unknown noise kind {kind!r}")
    return q


def check_stochastic(q, name="Q", tol=1e-9) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise InvalidTransitionMatrix(f"{name} must be square, got {q.shape}")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise InvalidTransitionMatrix(f"{name} has negative or non-finite entries")
    if np.abs(q.sum(axis=0) - 1.0).max() > tol:
        raise InvalidTransitionMatrix(f"{name} columns do not sum to 1")
    return q


def noise_heads(space: LabelSpace) -> list:
    return ["category"] + [a.name for a in space.attribute_types]


def inject_label_noise(dataset, q_true: dict, seed: int, space: LabelSpace | None = None) -> list:
    """Draw tagging-tool labels from ``q_true`` columns for every region.

    Weak records take the drawn labels as their training labels; clean
    records keep theirs and only record the tool output. Occasion labels are
    never touched. Heads missing from ``q_true`` are treated as noiseless.
    Attribute heads are matched by name through ``space`` when given,
    otherwise by the order of the non-category keys of ``q_true``.
    """
    qs = {h: check_stochastic(q, h) for h, q in q_true.items()}
    if space is not None:
        names = [a.name for a in space.attribute_types]
    else:
        names = [h for h in q_true if h != "category"]
    cdfs = {h: np.cumsum(q, axis=0) for h, q in qs.items()}
    rng = np.random.default_rng(seed)
    out = []
    for rec in dataset:
        regions = []
        for reg in rec.regions:
            true_c = reg.true_category if reg.true_category is not None else reg.category
            true_a = list(reg.true_attributes if reg.true_attributes is not None else reg.attributes)
            tool_c = _draw(cdfs, "category", true_c, rng)
            tool_a = []
            for k, v in enumerate(true_a):
                head = names[k] if k < len(names) else None
                tool_a.append(_draw(cdfs, head, v, rng))
            new = replace(reg, true_category=true_c, true_attributes=true_a,
                          tool_category=tool_c, tool_attributes=tool_a)
            if rec.is_weak:
                new.category, new.attributes = tool_c, list(tool_a)
            regions.append(new)
        out.append(replace(rec, regions=regions))
    return out


def _draw(cdfs, head, true_label, rng) -> int:
    u = rng.random()
    if head is None or head not in cdfs:
        return int(true_label)
    col = cdfs[head][:, true_label]
    return int(min(np.searchsorted(col, u, side="right"), len(col) - 1))


def assign_provenance(dataset, n_weak: int, seed: int) -> list:
    """Re-flag exactly ``n_weak`` posts as weak (using their tool labels).

    All other posts become clean with their true labels restored. Requires
    records that carry both true and tool labels, as generated ones do.
    """
    if not 0 <= n_weak <= len(dataset):
        raise SplitError(f"cannot flag {n_weak} of {len(dataset)} posts as weak")
    rng = np.random.default_rng(seed)
    return _reflag(dataset, set(rng.permutation(len(dataset))[:n_weak].tolist()))


def _reflag(dataset, weak: set) -> list:
    out = []
    for i, rec in enumerate(dataset):
        is_weak = i in weak
        regions = []
        for reg in rec.regions:
            if reg.true_category is None or reg.tool_category is None:
                raise SplitError(f"post {rec.post_id} lacks true/tool labels")
            src_c = reg.tool_category if is_weak else reg.true_category
            src_a = reg.tool_attributes if is_weak else reg.true_attributes
            regions.append(replace(reg, category=int(src_c), attributes=list(src_a)))
        out.append(replace(rec, regions=regions, provenance=WEAK if is_weak else CLEAN))
    return out


def human_correction_pairs(dataset, space: LabelSpace) -> dict:
    """(tool label, human label) pairs per noisy head, from clean posts."""
    heads = noise_heads(space)
    pairs = {h: [] for h in heads}
    for rec in dataset:
        if rec.is_weak:
            continue
        for reg in rec.regions:
            if reg.tool_category is None:
                continue
            pairs["category"].append((reg.tool_category, reg.category))
            for k, a in enumerate(space.attribute_types):
                pairs[a.name].append((reg.tool_attributes[k], reg.attributes[k]))
    return pairs


# -- splitting --------------------------------------------------------------------

def split_dataset(dataset, fractions=(0.7, 0.2, 0.1), seed: int = 0) -> tuple:
    """Partition into (train_weak, train_clean, test).

    Sizes are ``round(f * n)`` for the weak and test parts, the rest clean.
    The test part is sampled from clean-flagged posts only; the weak part
    must match the number of weak-flagged posts exactly.
    """
    fractions = tuple(float(f) for f in (fractions.values() if isinstance(fractions, dict)
                                         else fractions))
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three non-negative numbers summing to 1: {fractions}")
    n = len(dataset)
    n_weak = int(round(fractions[0] * n))
    n_test = int(round(fractions[2] * n))
    weak_idx = [i for i, r in enumerate(dataset) if r.is_weak]
    clean_idx = [i for i, r in enumerate(dataset) if not r.is_weak]
    if len(weak_idx) != n_weak:
        raise SplitError(f"{len(weak_idx)} weak-flagged posts but the split asks for {n_weak}")
    if len(clean_idx) < n_test:
        raise SplitError(f"only {len(clean_idx)} clean posts for a test part of {n_test}")
    rng = np.random.default_rng(seed)
    clean_idx = [clean_idx[i] for i in rng.permutation(len(clean_idx))]
    test = sorted(clean_idx[:n_test])
    train_clean = sorted(clean_idx[n_test:])
    return ([dataset[i] for i in weak_idx], [dataset[i] for i in train_clean],
            [dataset[i] for i in test])


def provenance_split(dataset, weak_fraction: float, test_fraction: float = 0.1,
                     seed: int = 0) -> tuple:
    """(train_weak, train_clean, test) with a test part that ignores ``weak_fraction``.

    A single seeded permutation fixes the test posts first; weak posts are
    then the leading ``round(weak_fraction * n)`` of the remainder, so weak
    sets are nested as the fraction grows. Records need true and tool labels.
    """
    n = len(dataset)
    n_test = int(round(test_fraction * n))
    n_weak = int(round(weak_fraction * n))
    if weak_fraction < 0 or test_fraction < 0 or n_weak + n_test > n:
        raise SplitError(f"weak fraction {weak_fraction} and test fraction {test_fraction} "
                         f"do not fit {n} posts")
    order = np.random.default_rng(seed).permutation(n)
    test_idx = sorted(order[:n_test].tolist())
    weak_idx = set(order[n_test:n_test + n_weak].tolist())
    flagged = _reflag(dataset, weak_idx)
    test = set(test_idx)
    return ([flagged[i] for i in range(n) if i in weak_idx],
            [flagged[i] for i in range(n) if i not in weak_idx and i not in test],
            [flagged[i] for i in test_idx])


# -- synthetic generation ---------------------------------------------------------------

@dataclass
class SynthConfig:
    n_posts: int = 1000
    d: int = 16
    vocab_size: int = 200
    max_regions: int = 4
    min_regions: int = 1
    dependency_strength: float = 0.5
    weak_fraction: float = 0.7
    seed: int = 0
    noise_kind: str = "pair"
    noise_mass: float = 0.3
    noise_matrices: dict | None = None  # explicit per-head overrides
    feature_sigma: float = 0.5
    category_signal: float = 1.0
    attribute_signal: float = 1.0
    occasion_signal: float = 1.0
    text_signal: float = 0.8
    min_tokens: int = 0
    max_tokens: int = 12

    def validate(self) -> None:
        for name in ("dependency_strength", "weak_fraction", "noise_mass", "text_signal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.n_posts < 0 or self.d < 1 or self.vocab_size < 1:
            raise ConfigError("n_posts, d and vocab_size must be positive")
        if not 0 <= self.min_regions <= self.max_regions:
            raise ConfigError("need 0 <= min_regions <= max_regions")
        if not 0 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 0 <= min_tokens <= max_tokens")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synth config keys {sorted(extra)}")
        return cls(**d)


def ground_truth_noise(cfg: SynthConfig, space: LabelSpace) -> dict:
    sizes = space.head_sizes()
    out = {}
    for head in noise_heads(space):
        if cfg.noise_matrices and head in cfg.noise_matrices:
            q = check_stochastic(cfg.noise_matrices[head], head)
            if q.shape[0] != sizes[head]:
                raise ConfigError(f"noise matrix for {head} has wrong size")
            out[head] = q
        else:
            out[head] = make_transition(sizes[head], cfg.noise_kind, cfg.noise_mass)
    return out


def _prototypes(rng, n: int, d: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q[:n]


def _derangement(rng, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1, dtype=int)
    while True:
        p = rng.permutation(n)
        if np.all(p != np.arange(n)):
            return p


@dataclass
class _World:
    """Fixed generative tables shared by all posts of one dataset."""

    proto_o: np.ndarray
    proto_c: np.ndarray
    proto_a: list
    occ_cat: np.ndarray
    successor: np.ndarray
    cat_attr: list
    occ_words: list = field(default_factory=list)


def _build_world(cfg: SynthConfig, space: LabelSpace, rng) -> _World:
    Mo, Mc = space.n_occasions, space.n_categories
    return _World(
        proto_o=_prototypes(rng, Mo, cfg.d),
        proto_c=_prototypes(rng, Mc, cfg.d),
        proto_a=[_prototypes(rng, n, cfg.d) for n in space.attribute_sizes],
        occ_cat=rng.dirichlet(np.full(Mc, 0.5), size=Mo),
        successor=_derangement(rng, Mc),
        cat_attr=[rng.dirichlet(np.full(n, 0.3), size=Mc) for n in space.attribute_sizes],
        occ_words=np.array_split(rng.permutation(cfg.vocab_size), Mo),
    )


def generate_synthetic(cfg: SynthConfig, space: LabelSpace) -> tuple:
    """Generate ``cfg.n_posts`` posts and return (dataset, true noise matrices).

    Each region's category is drawn from a mixture, weighted by
    ``dependency_strength``, of a uniform base and a dependent part (the
    occasion's category profile for the first region, a fixed successor of
    the previous region's category afterwards). Attributes mix uniform with
    a per-category profile the same way. Features are scaled orthonormal
    class prototypes plus Gaussian noise; tokens come from an
    occasion-conditioned unigram model.
    """
    cfg.validate()
    largest = max(space.head_sizes().values())
    if cfg.d < largest:
        raise ConfigError(f"d={cfg.d} is smaller than the largest head ({largest} classes)")
    q_true = ground_truth_noise(cfg, space)
    root = np.random.SeedSequence(cfg.seed)
    s_world, s_posts, s_flag, s_noise = root.spawn(4)
    world = _build_world(cfg, space, np.random.default_rng(s_world))
    rng = np.random.default_rng(s_posts)
    s = cfg.dependency_strength
    Mo, Mc = space.n_occasions, space.n_categories
    sizes = space.attribute_sizes
    base_c = np.full(Mc, 1.0 / Mc)
    vocab_uniform = np.full(cfg.vocab_size, 1.0 / cfg.vocab_size)
    locations = ("paris", "new_york", "tokyo", "london", "singapore")
    dataset = []
    for n in range(cfg.n_posts):
        occ = int(rng.integers(Mo))
        n_reg = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
        boxes = [(float(rng.uniform(0, 0.8)), float(rng.uniform(0, 0.8)),
                  float(rng.uniform(0.1, 0.2)), float(rng.uniform(0.1, 0.2))) for _ in range(n_reg)]
        boxes = [boxes[i] for i in spatial_order(boxes)]
        gender = GENDERS[int(rng.integers(len(GENDERS)))]
        regions, prev = [], None
        for b in boxes:
            if prev is None:
                dep = world.occ_cat[occ]
            else:
                dep = np.zeros(Mc)
                dep[world.successor[prev]] = 1.0
            cat = int(rng.choice(Mc, p=(1 - s) * base_c + s * dep))
            attrs = [int(rng.choice(m, p=(1 - s) / m + s * world.cat_attr[k][cat]))
                     for k, m in enumerate(sizes)]
            feat = cfg.category_signal * world.proto_c[cat]
            for k, a in enumerate(attrs):
                feat = feat + cfg.attribute_signal * world.proto_a[k][a]
            feat = feat + cfg.feature_sigma * rng.normal(size=cfg.d)
            regions.append(RegionRecord(bbox=b, feature=feat, category=cat, attributes=attrs,
                                        person_gender=gender, true_category=cat,
                                        true_attributes=list(attrs)))
            prev = cat
        whole = cfg.occasion_signal * world.proto_o[occ] + cfg.feature_sigma * rng.normal(size=cfg.d)
        occ_dist = np.zeros(cfg.vocab_size)
        occ_dist[world.occ_words[occ]] = 1.0 / len(world.occ_words[occ])
        n_tok = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        tokens = rng.choice(cfg.vocab_size, size=n_tok,
                            p=(1 - cfg.text_signal) * vocab_uniform + cfg.text_signal * occ_dist)
        meta = {"location": locations[int(rng.integers(len(locations)))],
                "time": f"2018-{int(rng.integers(1, 13)):02d}"}
        dataset.append(PostRecord(post_id=f"post-{n:07d}", whole_feature=whole,
                                  tokens=[int(t) for t in tokens], regions=regions,
                                  occasion=occ, metadata=meta))
    n_weak = int(round(cfg.weak_fraction * cfg.n_posts))
    weak = set(np.random.default_rng(s_flag).permutation(cfg.n_posts)[:n_weak].tolist())
    for i in weak:
        dataset[i].provenance = WEAK
    noise_seed = int(s_noise.generate_state(1)[0])
    return inject_label_noise(dataset, q_true, noise_seed, space), q_true
