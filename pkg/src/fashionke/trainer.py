"""Mini-batch SGD with momentum, evaluation, and the weak-data ratio sweep."""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .dataio import human_correction_pairs, provenance_split
from .errors import ConfigError, DivergenceError, EmptyTestSet, IncompatibleCheckpoint
from .model import (Checkpoint, ModelConfig, ModelParams, collate, forward_batch, init_params,
                    normalize_mode)
from .ontology import LabelSpace, validate_record
from .weaklabel import NoiseModelSet, fused_loss_parts

log = logging.getLogger(__name__)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component (data, shuffle, init, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    base_lr: float = 0.001
    transition_lr: float = 1e-5
    momentum: float = 0.9
    lr_decay_every: int = 4
    decay_factor: float = 0.1
    beta: float = 0.5
    mode: str = "final"
    use_text: bool = True
    use_weak_label_modeling: bool = True
    seed: int = 0
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    noise_smoothing: float = 1.0

    def validate(self) -> None:
        for name in ("base_lr", "transition_lr", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ConfigError("epochs, batch_size and lr_decay_every must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        normalize_mode(self.mode)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        return cls(**d)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> tuple:
    """(model lr, transition lr) after step decay by ``decay_factor`` every ``lr_decay_every`` epochs."""
    factor = cfg.decay_factor ** (epoch // cfg.lr_decay_every)
    return cfg.base_lr * factor, cfg.transition_lr * factor


class MomentumSGD:
    """``v <- mu * v - lr * g``; ``theta <- theta + v`` per tensor."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, tensors, grads, lr: float) -> None:
        for t in tensors:
            g = grads[t]
            v = self.velocity.get(t.id)
            v = -lr * g if v is None else self.momentum * v - lr * g
            self.velocity[t.id] = v
            t.values += v


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# -- evaluation --------------------------------------------------------------------------------

@dataclass
class EvalReport:
    occasion_acc: float
    category_acc: float
    attribute_acc: float
    per_attribute: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Predictions:
    occasion: np.ndarray  # (B,)
    category: list  # per post, (R,) arrays
    attributes: list  # per post, (R, K) arrays


def predict(params: ModelParams, records, mode: str = "final", use_text: bool = True,
            batch_size: int = 256) -> Predictions:
    occ, cats, attrs = [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = collate(chunk, params.cfg, params.space)
        out = forward_batch(params, batch, mode, use_text)
        occ.append(out.occasion.values.argmax(axis=1))
        c = out.category.values.argmax(axis=1) if out.category.shape[0] else np.zeros(0, dtype=int)
        a = (np.stack([x.values.argmax(axis=1) for x in out.attributes], axis=1)
             if out.category.shape[0] else np.zeros((0, len(out.attributes)), dtype=int))
        bounds = np.cumsum(batch.n_regions)[:-1]
        cats.extend(np.split(c, bounds))
        attrs.extend(np.split(a, bounds))
    return Predictions(np.concatenate(occ) if occ else np.zeros(0, dtype=int), cats, attrs)


def score_predictions(pred: Predictions, records, space: LabelSpace) -> EvalReport:
    if not records:
        raise EmptyTestSet("no posts to evaluate")
    K = space.n_attribute_types
    occ_true = np.array([r.occasion for r in records])
    occ_ok = int((np.asarray(pred.occasion) == occ_true).sum())
    cat_ok = cat_n = 0
    attr_ok = np.zeros(K, dtype=np.int64)
    for rec, pc, pa in zip(records, pred.category, pred.attributes):
        if not rec.regions:
            continue
        tc = np.array([r.category for r in rec.regions])
        ta = np.array([r.attributes for r in rec.regions]).reshape(-1, K)
        cat_ok += int((np.asarray(pc) == tc).sum())
        cat_n += len(tc)
        attr_ok += (np.asarray(pa).reshape(-1, K) == ta).sum(axis=0)
    n_dec = cat_n * K
    return EvalReport(
        occasion_acc=occ_ok / len(records),
        category_acc=cat_ok / cat_n if cat_n else float("nan"),
        attribute_acc=int(attr_ok.sum()) / n_dec if n_dec else float("nan"),
        per_attribute={a.name: (int(attr_ok[k]) / cat_n if cat_n else float("nan"))
                       for k, a in enumerate(space.attribute_types)},
        counts={"posts": len(records), "regions": cat_n, "attribute_decisions": n_dec,
                "occasion_correct": occ_ok, "category_correct": cat_ok,
                "attribute_correct": int(attr_ok.sum())},
    )


def evaluate(checkpoint: Checkpoint, test_set, space: LabelSpace | None = None) -> EvalReport:
    """Argmax accuracy of ``checkpoint`` on clean-labeled ``test_set``."""
    if not test_set:
        raise EmptyTestSet("no posts to evaluate")
    if space is not None:
        checkpoint.check_space(space)
    for rec in test_set:
        problems = validate_record(rec, checkpoint.space)
        if problems:
            raise IncompatibleCheckpoint(f"post {rec.post_id} does not fit the checkpoint ontology: "
                                         f"{problems[0]}")
    mode = checkpoint.meta.get("mode", "final")
    use_text = checkpoint.meta.get("use_text", True)
    pred = predict(checkpoint.params, test_set, mode, use_text)
    return score_predictions(pred, test_set, checkpoint.space)


def _val_score(r: EvalReport) -> float:
    vals = [v for v in (r.occasion_acc, r.category_acc, r.attribute_acc) if not np.isnan(v)]
    return float(np.mean(vals)) if vals else 0.0


# -- training ----------------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list
    best_epoch: int


def train(cfg: TrainConfig, clean_set, weak_set, params_init: ModelParams,
          noise_init: NoiseModelSet | None = None, val_set=None) -> TrainResult:
    """Train on pooled clean + weak posts and keep the best-by-validation state.

    When ``val_set`` is None a ``val_fraction`` slice of ``clean_set`` is held
    out. Without weak-label modeling, weak posts are scored like clean ones.
    """
    cfg.validate()
    mode = normalize_mode(cfg.mode)
    space = params_init.space
    params = params_init.copy()
    clean_set, weak_set = list(clean_set), list(weak_set)
    if val_set is None:
        n_val = int(round(cfg.val_fraction * len(clean_set)))
        order = substream(cfg.seed, "validation").permutation(len(clean_set))
        val_set = [clean_set[i] for i in sorted(order[:n_val])]
        clean_set = [clean_set[i] for i in sorted(order[n_val:])]
    correct = cfg.use_weak_label_modeling
    if noise_init is None:
        noise_init = NoiseModelSet.from_pairs(human_correction_pairs(clean_set, space), space,
                                              cfg.noise_smoothing)
    noise = NoiseModelSet.from_logits(noise_init.logits())
    pool = [(r, False) for r in clean_set] + [(r, correct) for r in weak_set]
    shuffle = substream(cfg.seed, "shuffle")
    opt_model, opt_noise = MomentumSGD(cfg.momentum), MomentumSGD(cfg.momentum)
    model_tensors = list(params)
    noise_tensors = noise.tensors() if correct else []

    def snapshot():
        return Checkpoint(params.copy(), noise.logits(), {"mode": mode, "use_text": cfg.use_text})

    best, best_score, best_epoch, trace = snapshot(), -np.inf, -1, []
    for epoch in range(cfg.epochs):
        lr_m, lr_q = lr_at_epoch(epoch, cfg)
        order = shuffle.permutation(len(pool))
        sums = np.zeros(3)
        n_batches = 0
        for bi, start in enumerate(range(0, len(pool), cfg.batch_size)):
            items = [pool[i] for i in order[start:start + cfg.batch_size]]
            clean_b = [r for r, w in items if not w]
            weak_b = [r for r, w in items if w]
            with nc.Tape() as tape:
                total, l_c, l_w = fused_loss_parts(clean_b, weak_b, params, noise, cfg.beta,
                                                   mode, cfg.use_text, correct=correct)
            if not np.isfinite(total.values).all():
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = nc.backprop(total, tape, leaves=model_tensors + noise_tensors)
            clip_by_global_norm(grads, cfg.clip_norm)
            opt_model.step(model_tensors, grads, lr_m)
            if noise_tensors:
                opt_noise.step(noise_tensors, grads, lr_q)
            sums += (total.item(), l_c.item(), l_w.item())
            n_batches += 1
        means = sums / max(n_batches, 1)
        row = {"epoch": epoch, "loss_clean": means[1], "loss_weak": means[2], "loss_total": means[0],
               "lr": lr_m, "transition_lr": lr_q}
        if val_set:
            rep = score_predictions(predict(params, val_set, mode, cfg.use_text), val_set, space)
            row.update(val_occasion_acc=rep.occasion_acc, val_category_acc=rep.category_acc,
                       val_attribute_acc=rep.attribute_acc)
            score = _val_score(rep)
        else:
            score = float(epoch)
        trace.append(row)
        log.info("epoch %d total=%.4f val=%.4f", epoch, means[0], score)
        if score > best_score:
            best, best_score, best_epoch = snapshot(), score, epoch
    best.meta.update(best_epoch=best_epoch, train_config=asdict(cfg))
    return TrainResult(best, trace, best_epoch)


TRACE_FIELDS = ["epoch", "loss_clean", "loss_weak", "loss_total", "lr", "transition_lr",
                "val_occasion_acc", "val_category_acc", "val_attribute_acc"]


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


# -- weak-ratio sweep ----------------------------------------------------------------------------

ARMS = ("corrected", "uncorrected")
SWEEP_FIELDS = ["ratio", "arm", "occasion_acc", "category_acc", "attribute_acc"]


def ratio_sweep(cfg: TrainConfig, dataset, ratios, model_cfg: ModelConfig, space: LabelSpace,
                arms=ARMS, test_fraction: float = 0.1) -> list:
    """Train and evaluate every (ratio, arm) cell.

    For ratio r the train part holds r*n weak posts and (1 - test - r)*n
    clean ones; the test part is the same clean slice for every ratio.
    """
    rows = []
    for r in ratios:
        if not 0.0 <= r <= 1.0 - test_fraction + 1e-12:
            raise ConfigError(f"ratio {r} incompatible with test fraction {test_fraction}")
        weak, clean, test = provenance_split(dataset, r, test_fraction, cfg.seed)
        cached = None
        for arm in arms:
            if not weak and cached is not None:
                rep = cached
            else:
                run = TrainConfig(**{**asdict(cfg), "use_weak_label_modeling": arm == "corrected"})
                params = init_params(model_cfg, space, substream(cfg.seed, "init"))
                res = train(run, clean, weak, params)
                rep = evaluate(res.checkpoint, test)
                cached = rep
            rows.append({"ratio": r, "arm": arm, "occasion_acc": rep.occasion_acc,
                         "category_acc": rep.category_acc, "attribute_acc": rep.attribute_acc})
            log.info("ratio %.2f %s: category %.4f", r, arm, rep.category_acc)
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def compare_variants(cfg: TrainConfig, dataset, variants, model_cfg: ModelConfig,
                     space: LabelSpace, test_fraction: float = 0.1) -> list:
    """Train each ``TrainConfig`` override in ``variants`` on the same clean split.

    Every variant starts from the same initial parameters and is scored on
    the same test part; returns one ``(variant, EvalReport)`` pair each.
    """
    _, clean, test = provenance_split(dataset, 0.0, test_fraction, cfg.seed)
    out = []
    for variant in variants:
        run = TrainConfig(**{**asdict(cfg), **variant})
        params = init_params(model_cfg, space, substream(cfg.seed, "init"))
        res = train(run, clean, [], params)
        out.append((dict(variant), evaluate(res.checkpoint, test)))
    return out
