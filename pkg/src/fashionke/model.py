"""Contextualized fashion concept learner.

Pipeline per post (all batched, regions flattened across the batch):

* text: embedding -> four wide 1-D convolution banks with ReLU -> max over
  time -> concat (d_t = n_maps * 4) -> projection to d
* regions: Bi-LSTM over spatially ordered region features (or a per-region
  tanh projection when the region LSTM is ablated); category representation
  is an affine map of each region hidden
* occasion: affine map of [whole-image feature, projected text, final
  region state], then a linear classifier
* attributes: K affine branches on each region hidden; with the attribute
  LSTM enabled the K branch outputs plus the category representation form a
  length K+1 sequence fed to a second Bi-LSTM whose per-position hiddens are
  projected back to d

Modes follow the ablation grid: ``base`` (no LSTM), ``bilstm1`` (region
LSTM only), ``bilstm2`` (attribute LSTM only), ``final`` (both).
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import IncompatibleCheckpoint, InvalidLabel, InvalidShape, InvalidToken
from .numcore import Tensor
from .ontology import LabelSpace, from_dict as ontology_from_dict

MODES = ("base", "bilstm1", "bilstm2", "final")
_MODE_ALIASES = {"bi-lstm1": "bilstm1", "bi-lstm_1": "bilstm1", "bilstm_1": "bilstm1",
                 "bi-lstm2": "bilstm2", "bi-lstm_2": "bilstm2", "bilstm_2": "bilstm2"}
CHECKPOINT_VERSION = 1


def normalize_mode(mode: str) -> str:
    m = _MODE_ALIASES.get(mode.lower(), mode.lower())
    if m not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return m


def uses_region_lstm(mode: str) -> bool:
    return normalize_mode(mode) in ("bilstm1", "final")


def uses_attribute_lstm(mode: str) -> bool:
    return normalize_mode(mode) in ("bilstm2", "final")


@dataclass
class ModelConfig:
    d: int = 512
    d_emb: int = 300
    vocab_size: int = 10000
    n_maps: int = 32
    kernel_widths: tuple = (2, 3, 4, 5)

    @property
    def d_t(self) -> int:
        return self.n_maps * len(self.kernel_widths)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "kernel_widths" in d:
            d["kernel_widths"] = tuple(int(w) for w in d["kernel_widths"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kernel_widths"] = list(self.kernel_widths)
        return out


# -- parameters --------------------------------------------------------------------

def _lstm_shapes(prefix, n_in, h):
    return [(f"{prefix}.wx", (n_in, 4 * h)), (f"{prefix}.wh", (h, 4 * h)), (f"{prefix}.b", (4 * h,))]


def parameter_shapes(cfg: ModelConfig, space: LabelSpace) -> list:
    """Ordered (name, shape) list; identical for every mode."""
    d, E = cfg.d, cfg.d_emb
    shapes = [("embedding", (cfg.vocab_size, E))]
    for w in cfg.kernel_widths:
        shapes += [(f"conv{w}.w", (w * E, cfg.n_maps)), (f"conv{w}.b", (cfg.n_maps,))]
    shapes += [("text_proj.w", (cfg.d_t, d)), ("text_proj.b", (d,))]
    shapes += _lstm_shapes("lstm1.fwd", d, d) + _lstm_shapes("lstm1.bwd", d, d)
    shapes += [("region_proj.w", (d, 2 * d)), ("region_proj.b", (2 * d,))]
    shapes += [("category_rep.w", (2 * d, d)), ("category_rep.b", (d,))]
    shapes += [("occasion_rep.w", (4 * d, d)), ("occasion_rep.b", (d,))]
    K = space.n_attribute_types
    for k in range(K):
        shapes += [(f"attr_branch{k}.w", (2 * d, d)), (f"attr_branch{k}.b", (d,))]
    shapes += _lstm_shapes("lstm2.fwd", d, d) + _lstm_shapes("lstm2.bwd", d, d)
    for k in range(K):
        shapes += [(f"attr_proj{k}.w", (2 * d, d)), (f"attr_proj{k}.b", (d,))]
    shapes += [("category_ctx.w", (2 * d, d)), ("category_ctx.b", (d,))]
    shapes += [("occasion_clf.w", (d, space.n_occasions)), ("occasion_clf.b", (space.n_occasions,))]
    shapes += [("category_clf.w", (d, space.n_categories)), ("category_clf.b", (space.n_categories,))]
    for k, m in enumerate(space.attribute_sizes):
        shapes += [(f"attr_clf{k}.w", (d, m)), (f"attr_clf{k}.b", (m,))]
    return shapes


class ModelParams:
    """Named trainable tensors of the concept learner."""

    def __init__(self, cfg: ModelConfig, space: LabelSpace, tensors: dict):
        self.cfg = cfg
        self.space = space
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def lstm(self, prefix: str) -> dict:
        return {direction: {k: self.tensors[f"{prefix}.{direction}.{k}"] for k in ("wx", "wh", "b")}
                for direction in ("fwd", "bwd")}

    def affine(self, prefix: str) -> tuple:
        return self.tensors[f"{prefix}.w"], self.tensors[f"{prefix}.b"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.space, {
            n: Tensor(t.values.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()})

    def arrays(self) -> dict:
        return {n: t.values for n, t in self.tensors.items()}


def init_params(cfg: ModelConfig, space: LabelSpace, seed: int | np.random.Generator = 0) -> ModelParams:
    """Uniform(+-1/sqrt(h)) recurrent weights with forget bias 1, Xavier affine maps."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(cfg, space):
        if name == "embedding":
            v = rng.normal(0.0, 0.1, size=shape)
        elif name.startswith("lstm"):
            h = cfg.d
            if name.endswith(".b"):
                v = np.zeros(shape)
                v[h:2 * h] = 1.0
            else:
                v = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(h)
        elif name.endswith(".b"):
            v = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            v = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(v, requires_grad=True, name=name)
    return ModelParams(cfg, space, tensors)


def load_embeddings(params: ModelParams, path) -> int:
    """Overwrite embedding rows from a text file of ``<token index> <floats...>`` lines.

    Returns the number of rows loaded.
    """
    table = params["embedding"].values
    n = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            idx = int(parts[0])
            vec = np.asarray(parts[1:], dtype=np.float64)
            if not 0 <= idx < table.shape[0] or vec.size != table.shape[1]:
                raise InvalidShape(f"embedding line {lineno} does not fit table {table.shape}")
            table[idx] = vec
            n += 1
    return n


# -- batching ------------------------------------------------------------------------------

@dataclass
class Batch:
    whole: np.ndarray  # (B, d)
    tokens: np.ndarray  # (B, L) int, zero padded
    n_tokens: np.ndarray  # (B,)
    regions: np.ndarray  # (B, R, d)
    region_mask: np.ndarray  # (B, R) float
    flat_index: tuple  # (post index, position) per valid region
    n_regions: np.ndarray  # (B,)
    occasion: np.ndarray  # (B,)
    category: np.ndarray  # (Nv,)
    attributes: np.ndarray  # (Nv, K)
    weak: np.ndarray  # (B,) bool

    @property
    def size(self) -> int:
        return self.whole.shape[0]

    @property
    def region_post(self) -> np.ndarray:
        return self.flat_index[0]

    def __len__(self) -> int:
        return self.size


def collate(records, cfg: ModelConfig, space: LabelSpace) -> Batch:
    B = len(records)
    K = space.n_attribute_types
    n_reg = np.array([len(r.regions) for r in records], dtype=np.int64)
    n_tok = np.array([len(r.tokens) for r in records], dtype=np.int64)
    R = int(n_reg.max()) if B else 0
    L = int(n_tok.max()) if B else 0
    whole = np.zeros((B, cfg.d))
    tokens = np.zeros((B, L), dtype=np.int64)
    regions = np.zeros((B, R, cfg.d))
    mask = np.zeros((B, R))
    cats, attrs = [], []
    for b, rec in enumerate(records):
        wf = np.asarray(rec.whole_feature, dtype=np.float64)
        if wf.shape != (cfg.d,):
            raise InvalidShape(f"post {rec.post_id}: whole feature has shape {wf.shape}")
        whole[b] = wf
        if rec.tokens:
            t = np.asarray(rec.tokens, dtype=np.int64)
            if t.min() < 0 or t.max() >= cfg.vocab_size:
                raise InvalidToken(f"post {rec.post_id}: token outside vocabulary of {cfg.vocab_size}")
            tokens[b, :len(t)] = t
        for i, reg in enumerate(rec.regions):
            f = np.asarray(reg.feature, dtype=np.float64)
            if f.shape != (cfg.d,):
                raise InvalidShape(f"post {rec.post_id}: region feature has shape {f.shape}")
            regions[b, i] = f
            mask[b, i] = 1.0
            if len(reg.attributes) != K:
                raise InvalidLabel(f"post {rec.post_id}: region {i} has {len(reg.attributes)} attributes")
            cats.append(reg.category)
            attrs.append(reg.attributes)
    flat = np.nonzero(mask)
    return Batch(
        whole=whole, tokens=tokens, n_tokens=n_tok, regions=regions, region_mask=mask,
        flat_index=flat, n_regions=n_reg,
        occasion=np.array([r.occasion for r in records], dtype=np.int64),
        category=np.array(cats, dtype=np.int64),
        attributes=np.array(attrs, dtype=np.int64).reshape(-1, K),
        weak=np.array([r.is_weak for r in records], dtype=bool),
    )


# -- components ----------------------------------------------------------------------------

def _encode_text_batch(params: ModelParams, tokens: np.ndarray, n_tokens: np.ndarray) -> Tensor:
    cfg = params.cfg
    B, L = tokens.shape
    emb = nc.embedding(params["embedding"], tokens)  # (B, L, E)
    present = np.arange(L)[None, :] < n_tokens[:, None]
    if not present.all():  # padding slots must read as zero vectors, not token 0
        emb = nc.mul(emb, Tensor(present[..., None].astype(np.float64)))
    pooled = []
    for w in cfg.kernel_widths:
        conv = nc.relu(nc.conv1d_wide(emb, *params.affine(f"conv{w}"), width=w))
        steps = np.arange(L + w - 1)
        valid = (steps[None, :] < (n_tokens[:, None] + w - 1)) & (n_tokens[:, None] > 0)
        pooled.append(nc.time_maxpool(conv, valid))
    return nc.concat(pooled, axis=-1)


def encode_text(tokens, params: ModelParams) -> Tensor:
    """TextCNN vector (length d_t) of one token list; empty input gives zeros."""
    tokens = list(tokens)
    vocab = params.cfg.vocab_size
    if any(t < 0 or t >= vocab for t in tokens):
        raise InvalidToken(f"token outside vocabulary of {vocab}")
    arr = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    out = _encode_text_batch(params, arr, np.array([len(tokens)]))
    return nc.reshape(out, (params.cfg.d_t,))


def encode_region_context(region_features, params: ModelParams, mask=None) -> tuple:
    """Region Bi-LSTM.

    ``region_features`` is (M, d) for one post or (B, R, d) with ``mask``.
    Returns (hiddens, final_state, category_reps): per-region 2d hiddens,
    the 2d final state (zeros with no regions) and per-region d-dim
    category representations.
    """
    x = nc.as_tensor(region_features)
    d = params.cfg.d
    single = x.values.ndim == 2
    if single:
        x = nc.reshape(x, (1,) + x.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    if x.shape[1] == 0:
        B = x.shape[0]
        h_o = Tensor(np.zeros((B, 2 * d)))
        H = Tensor(np.zeros((B, 0, 2 * d)))
        C = Tensor(np.zeros((B, 0, d)))
    else:
        H, h_o = nc.bilstm_encode(x, params.lstm("lstm1"), mask)
        C = nc.affine(H, *params.affine("category_rep"))
    if single:
        H = nc.reshape(H, H.shape[1:])
        h_o = nc.reshape(h_o, h_o.shape[1:])
        C = nc.reshape(C, C.shape[1:])
    return H, h_o, C


def occasion_representation(v_w, t_w, h_o, params: ModelParams, use_text: bool = True) -> Tensor:
    """``o_w = W_wᵀ [v_w, W_tᵀ t_w + b_t, h_o] + b_w``; text slot zeroed without text."""
    v_w, h_o = nc.as_tensor(v_w), nc.as_tensor(h_o)
    d = params.cfg.d
    if v_w.shape[-1] != d or h_o.shape[-1] != 2 * d:
        raise InvalidShape("occasion inputs must have d and 2d features")
    if use_text:
        t_w = nc.as_tensor(t_w)
        if t_w.shape[-1] != params.cfg.d_t:
            raise InvalidShape(f"text vector must have {params.cfg.d_t} features")
        proj = nc.affine(t_w, *params.affine("text_proj"))
    else:
        proj = Tensor(np.zeros(v_w.shape[:-1] + (d,)))
    v_prime = nc.concat([v_w, proj, h_o], axis=-1)
    return nc.affine(v_prime, *params.affine("occasion_rep"))


def attribute_contextualize(h_v, c_v, params: ModelParams, use_lstm: bool = True) -> tuple:
    """Attribute representations and contextualized category representation.

    ``h_v`` is (..., 2d) region hiddens and ``c_v`` (..., d) category reps.
    Returns (a_list, c_ctx) with K tensors of shape (..., d) and one (..., d).
    """
    h_v, c_v = nc.as_tensor(h_v), nc.as_tensor(c_v)
    K = params.space.n_attribute_types
    d = params.cfg.d
    branches = [nc.affine(h_v, *params.affine(f"attr_branch{k}")) for k in range(K)]
    if not use_lstm:
        return branches, c_v
    lead = h_v.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    seq = nc.reshape(nc.stack(branches + [c_v], axis=-2), (n, K + 1, d))
    if n == 0:
        hid = Tensor(np.zeros((0, K + 1, 2 * d)))
    else:
        hid, _ = nc.bilstm_encode(seq, params.lstm("lstm2"))
    a_list = [nc.reshape(nc.affine(hid[:, k], *params.affine(f"attr_proj{k}")), lead + (d,))
              for k in range(K)]
    c_ctx = nc.reshape(nc.affine(hid[:, K], *params.affine("category_ctx")), lead + (d,))
    return a_list, c_ctx


# -- forward ---------------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    """Batched head probabilities; region rows are flattened across posts."""

    occasion: Tensor  # (B, M_o)
    category: Tensor  # (Nv, M_c)
    attributes: list  # K tensors (Nv, M_ak)
    region_post: np.ndarray  # (Nv,) owning post of each region row
    space: LabelSpace = field(repr=False, default=None)

    def for_post(self, b: int) -> dict:
        rows = self.region_post == b
        return {
            "occasion": self.occasion.values[b],
            "category": self.category.values[rows],
            "attributes": [a.values[rows] for a in self.attributes],
        }

    @property
    def occasion_probs(self) -> np.ndarray:
        return self.occasion.values[0] if self.occasion.shape[0] == 1 else self.occasion.values

    @property
    def category_probs(self) -> list:
        return list(self.category.values)

    @property
    def attribute_probs(self) -> list:
        """Per region, a list of K probability vectors."""
        return [[a.values[i] for a in self.attributes] for i in range(self.category.shape[0])]


def forward_batch(params: ModelParams, batch: Batch, mode: str = "final",
                  use_text: bool = True) -> ForwardOutput:
    mode = normalize_mode(mode)
    d = params.cfg.d
    B = batch.size
    flat = batch.flat_index
    if uses_region_lstm(mode) and batch.regions.shape[1] > 0:
        H, h_o = nc.bilstm_encode(Tensor(batch.regions), params.lstm("lstm1"), batch.region_mask)
        Hv = H[flat]
    else:
        xv = Tensor(batch.regions[flat])
        Hv = nc.tanh(nc.affine(xv, *params.affine("region_proj")))
        h_o = Tensor(np.zeros((B, 2 * d)))
    Cv = nc.affine(Hv, *params.affine("category_rep"))
    t_w = _encode_text_batch(params, batch.tokens, batch.n_tokens) if use_text else None
    o_w = occasion_representation(Tensor(batch.whole), t_w, h_o, params, use_text)
    occ = nc.softmax(nc.affine(o_w, *params.affine("occasion_clf")))
    a_list, c_ctx = attribute_contextualize(Hv, Cv, params, use_lstm=uses_attribute_lstm(mode))
    if Cv.shape[0] == 0:
        cat = Tensor(np.zeros((0, params.space.n_categories)))
        attrs = [Tensor(np.zeros((0, m))) for m in params.space.attribute_sizes]
        return ForwardOutput(occ, cat, attrs, flat[0], params.space)
    cat = nc.softmax(nc.affine(c_ctx, *params.affine("category_clf")))
    attrs = [nc.softmax(nc.affine(a, *params.affine(f"attr_clf{k}"))) for k, a in enumerate(a_list)]
    return ForwardOutput(occ, cat, attrs, flat[0], params.space)


def forward(record, params: ModelParams, mode: str = "final", use_text: bool = True) -> ForwardOutput:
    """Forward pass for one post (a batch of one)."""
    return forward_batch(params, collate([record], params.cfg, params.space), mode, use_text)


# -- loss -----------------------------------------------------------------------------------

@dataclass
class Labels:
    """Targets aligned with a :class:`ForwardOutput`."""

    occasion: np.ndarray  # (B,)
    category: np.ndarray  # (Nv,)
    attributes: np.ndarray  # (Nv, K)
    region_post: np.ndarray  # (Nv,)
    n_regions: np.ndarray  # (B,)

    @classmethod
    def from_records(cls, records, K: int) -> "Labels":
        post, cats, attrs = [], [], []
        for b, rec in enumerate(records):
            for reg in rec.regions:
                if len(reg.attributes) != K:
                    raise InvalidLabel(f"post {rec.post_id}: attribute arity {len(reg.attributes)} != {K}")
                post.append(b)
                cats.append(reg.category)
                attrs.append(reg.attributes)
        return cls(np.array([r.occasion for r in records], dtype=np.int64),
                   np.array(cats, dtype=np.int64),
                   np.array(attrs, dtype=np.int64).reshape(-1, K),
                   np.array(post, dtype=np.int64),
                   np.array([len(r.regions) for r in records], dtype=np.int64))


def weighted_concept_loss(out: ForwardOutput, labels, post_weight: np.ndarray,
                          noise: dict | None = None, corrected: np.ndarray | None = None) -> Tensor:
    """Sum over posts of ``w_p * (L_o + mean_r L_c + mean_{r,k} L_a)``.

    ``labels`` is a :class:`Labels` or :class:`Batch`. Rows of posts flagged
    in ``corrected`` score their category/attribute labels against ``Q p``
    (``noise`` maps head name to a realized Q tensor) instead of ``p``.
    Occasion terms are never corrected.
    """
    K = len(out.attributes)
    rp = labels.region_post
    w_o = np.asarray(post_weight, dtype=np.float64)
    w_c = w_o[rp] / labels.n_regions[rp] if rp.size else np.zeros(0)
    w_a = w_c / K
    loss = nc.cross_entropy(out.occasion, labels.occasion, w_o)
    if labels.category.size == 0:
        return loss
    corr = (np.zeros(rp.shape[0], dtype=bool) if corrected is None
            else np.asarray(corrected, dtype=bool)[rp])
    plain = (~corr).astype(np.float64)
    loss = nc.add(loss, nc.cross_entropy(out.category, labels.category, w_c * plain))
    for k in range(K):
        loss = nc.add(loss, nc.cross_entropy(out.attributes[k], labels.attributes[:, k], w_a * plain))
    if corr.any():
        from .weaklabel import correct_prediction

        cw = corr.astype(np.float64)
        names = [a.name for a in out.space.attribute_types]
        loss = nc.add(loss, nc.cross_entropy(correct_prediction(out.category, noise["category"]),
                                             labels.category, w_c * cw))
        for k in range(K):
            q_k = noise[names[k]]
            loss = nc.add(loss, nc.cross_entropy(correct_prediction(out.attributes[k], q_k),
                                                 labels.attributes[:, k], w_a * cw))
    return loss


def clean_loss(output: ForwardOutput, record) -> Tensor:
    """Loss of one post: ``L_o + mean_r L_c + mean_{r,k} L_a``; no regions means ``L_o`` only."""
    labels = Labels.from_records([record], len(output.attributes))
    if labels.category.shape[0] != output.category.shape[0]:
        raise InvalidShape("record and forward output have different region counts")
    return weighted_concept_loss(output, labels, np.ones(1))


# -- checkpoints -------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    noise_logits: dict  # head name -> (N, N) array
    meta: dict  # mode, use_text, train config, epoch, ...

    @property
    def space(self) -> LabelSpace:
        return self.params.space

    @property
    def fingerprint(self) -> str:
        return self.params.space.fingerprint

    def check_space(self, space: LabelSpace) -> None:
        if space.fingerprint != self.fingerprint:
            raise IncompatibleCheckpoint(
                f"checkpoint ontology {self.fingerprint} != dataset ontology {space.fingerprint}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single ``.npz`` with parameters, noise logits and a JSON header; atomic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.params.cfg.to_dict(),
        "ontology": ckpt.params.space.to_dict(),
        "fingerprint": ckpt.params.space.fingerprint,
        "noise_heads": list(ckpt.noise_logits),
        "meta": ckpt.meta,
    }
    arrays = {f"param/{n}": v for n, v in ckpt.params.arrays().items()}
    arrays.update({f"noise/{h}": np.asarray(v) for h, v in ckpt.noise_logits.items()})
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise IncompatibleCheckpoint(f"unsupported checkpoint version {header.get('version')!r}")
        cfg = ModelConfig.from_dict(header["model_config"])
        space = ontology_from_dict(header["ontology"])
        if space.fingerprint != header["fingerprint"]:
            raise IncompatibleCheckpoint("checkpoint ontology fingerprint does not match its contents")
        tensors = {}
        for name, shape in parameter_shapes(cfg, space):
            v = np.array(z[f"param/{name}"])
            if v.shape != shape:
                raise IncompatibleCheckpoint(f"parameter {name} has shape {v.shape}, expected {shape}")
            tensors[name] = Tensor(v, requires_grad=True, name=name)
        noise = {h: np.array(z[f"noise/{h}"]) for h in header["noise_heads"]}
    return Checkpoint(ModelParams(cfg, space, tensors), noise, header["meta"])
