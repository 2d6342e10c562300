"""Run configuration: one YAML file per run plus dotted-path overrides."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .dataio import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import ARMS, TrainConfig

OUTPUT_ROOT_ENV = "FASHIONKE_OUTPUT_ROOT"
BUNDLED_CONFIGS = ("tiny", "weak_label", "context", "text")

SECTION_DEFAULTS = {
    "split": {"fractions": [0.7, 0.2, 0.1]},
    "eval": {"checkpoint": None, "dataset": None},
    "sweep": {"ratios": [0.0, 0.1, 0.3, 0.5, 0.7], "arms": list(ARMS), "test_fraction": 0.1},
    "mine": {"source": "ground-truth", "checkpoint": None, "min_support": 1, "top_n": 20,
             "attrs_of_interest": {}},
    "gradcheck": {"eps": 3e-4, "tol": 1e-4, "d": 8, "d_emb": 4, "vocab_size": 20, "n_regions": 2,
                  "perturb": 0.1, "max_coords": None},
}


@dataclass
class RunConfig:
    """Everything a command needs; written next to its outputs.

    ``seed`` is the single source of randomness: it overrides the seeds of
    the data and train sections, which derive named sub-streams from it.
    """
    seed: int = 0
    ontology: str = "default"
    output_dir: str | None = None
    data_path: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: dict = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS["split"]))
    eval: dict = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS["eval"]))
    sweep: dict = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS["sweep"]))
    mine: dict = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS["mine"]))
    gradcheck: dict = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS["gradcheck"]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def resolve_output_dir(self, command: str) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("attrs_of_interest",
                                                                          "noise_matrices"):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        elif isinstance(base[k], float) and isinstance(v, str):
            out[k] = _as_float(v, f"{where}{k}")
        else:
            out[k] = v
    return out


def _as_float(text: str, key: str) -> float:
    """YAML 1.1 reads ``1e-3`` (no dot) as a string; accept it where a float is expected."""
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {text!r}") from None


def from_dict(doc: dict) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a mapping")
    merged = _merge(RunConfig().to_dict(), doc)
    try:
        synth = SynthConfig.from_dict(merged["synth"])
        model = ModelConfig.from_dict(merged["model"])
        train = TrainConfig.from_dict(merged["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    seed = int(merged["seed"])
    synth.seed = seed
    train.seed = seed
    cfg = RunConfig(seed=seed, ontology=str(merged["ontology"]), output_dir=merged["output_dir"],
                    data_path=merged["data_path"], synth=synth, model=model, train=train,
                    **{k: merged[k] for k in SECTION_DEFAULTS})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    cfg.synth.validate()
    cfg.train.validate()
    if cfg.model.d < 1 or cfg.model.d_emb < 1 or cfg.model.vocab_size < 1 or cfg.model.n_maps < 1:
        raise ConfigError("model sizes must be positive")
    if cfg.data_path is None and cfg.model.d != cfg.synth.d:
        raise ConfigError(f"model.d={cfg.model.d} must equal synth.d={cfg.synth.d}")
    if cfg.data_path is None and cfg.model.vocab_size < cfg.synth.vocab_size:
        raise ConfigError("model.vocab_size is smaller than synth.vocab_size")
    fr = cfg.split["fractions"]
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
        raise ConfigError("split.fractions must be three non-negative numbers summing to 1")
    if cfg.mine["source"] not in ("ground-truth", "predicted"):
        raise ConfigError("mine.source must be 'ground-truth' or 'predicted'")
    bad_arms = set(cfg.sweep["arms"]) - set(ARMS)
    if bad_arms:
        raise ConfigError(f"unknown sweep arms {sorted(bad_arms)}")


def bundled_config_text(name: str) -> str:
    return resources.files("fashionke.data").joinpath(f"configs/{name}.yaml").read_text()


def load_config(source=None, overrides=()) -> RunConfig:
    """Load a YAML file (or bundled config name) and apply ``key.path=value`` overrides."""
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = copy.deepcopy(source)
    elif str(source) in BUNDLED_CONFIGS and not Path(str(source)).exists():
        doc = yaml.safe_load(bundled_config_text(str(source)))
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {str(exc).splitlines()[0]}") from None
    doc = doc or {}
    for item in overrides:
        apply_override(doc, item)
    return from_dict(doc)


def apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def schema() -> dict:
    """Machine-readable description of every config key with its default."""
    def describe(value):
        if isinstance(value, dict):
            return {k: describe(v) for k, v in value.items()}
        return {"default": value, "type": type(value).__name__}
    return describe(RunConfig().to_dict())
