"""``fashionke`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import RunConfig, load_config, schema
from .dataio import (SynthConfig, generate_synthetic, human_correction_pairs, read_dataset, split_dataset,
                     write_dataset)
from .errors import FashionKEError, NumericalFailure
from .knowledge import (concept_records_from_posts, concept_records_from_predictions,
                        export_knowledge, matching_stats, mine_triplets)
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .numcore import BACKEND, finite_difference_check
from .ontology import load_ontology
from .trainer import (evaluate, predict, ratio_sweep, substream, train, write_sweep_csv,
                      write_trace_csv)
from .weaklabel import NoiseModelSet, fused_loss, write_matrix_csv

COMMANDS = ("gen-data", "train", "eval", "sweep", "mine", "gradcheck")


class _Run:
    """Resolved config, label space and output directory of one command."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.space = load_ontology(cfg.ontology)
        self.out = cfg.resolve_output_dir(command)
        self.out.mkdir(parents=True, exist_ok=True)

    def save_config(self) -> None:
        cfg = self.cfg.to_dict()
        cfg["output_dir"] = str(self.out)
        (self.out / f"run_config.{self.command}.yaml").write_text(
            f"# fashionke {__version__} -- resolved config of `{self.command}`\n"
            + yaml.safe_dump(cfg, sort_keys=False))

    def dataset(self):
        if self.cfg.data_path:
            return read_dataset(self.cfg.data_path)
        return generate_synthetic(self.cfg.synth, self.space)[0]

    def checkpoint_path(self, key: str) -> Path:
        explicit = self.cfg.eval["checkpoint"] if key == "eval" else self.cfg.mine["checkpoint"]
        return Path(explicit) if explicit else self.out / "checkpoint.npz"


def cmd_gen_data(run: _Run) -> None:
    dataset, q_true = generate_synthetic(run.cfg.synth, run.space)
    write_dataset(dataset, run.out / "dataset.jsonl")
    for head, q in q_true.items():
        write_matrix_csv(run.out / f"noise_true_{head}.csv", q)
    print(f"wrote {len(dataset)} posts to {run.out / 'dataset.jsonl'}")


def cmd_train(run: _Run) -> None:
    cfg = run.cfg
    weak, clean, _ = split_dataset(run.dataset(), cfg.split["fractions"], cfg.seed)
    params = init_params(cfg.model, run.space, substream(cfg.seed, "init"))
    noise = NoiseModelSet.from_pairs(human_correction_pairs(clean, run.space), run.space,
                                     cfg.train.noise_smoothing)
    result = train(cfg.train, clean, weak, params, noise)
    save_checkpoint(result.checkpoint, run.out / "checkpoint.npz")
    write_trace_csv(result.trace, run.out / "trace.csv")
    NoiseModelSet.from_logits(result.checkpoint.noise_logits).export_csv(run.out / "noise")
    print(f"best epoch {result.best_epoch}; checkpoint at {run.out / 'checkpoint.npz'}")


def _test_set(run: _Run):
    if run.cfg.eval["dataset"]:
        return read_dataset(run.cfg.eval["dataset"])
    return split_dataset(run.dataset(), run.cfg.split["fractions"], run.cfg.seed)[2]


def cmd_eval(run: _Run) -> None:
    ckpt = load_checkpoint(run.checkpoint_path("eval"))
    report = evaluate(ckpt, _test_set(run), run.space)
    (run.out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"occasion {report.occasion_acc:.4f}  category {report.category_acc:.4f}  "
          f"attribute {report.attribute_acc:.4f}")


def cmd_sweep(run: _Run) -> None:
    sw = run.cfg.sweep
    rows = ratio_sweep(run.cfg.train, run.dataset(), sw["ratios"], run.cfg.model, run.space,
                       tuple(sw["arms"]), sw["test_fraction"])
    write_sweep_csv(rows, run.out / "sweep.csv")
    for r in rows:
        print(f"ratio {r['ratio']:.2f} {r['arm']:<11} category {r['category_acc']:.4f}")


def cmd_mine(run: _Run) -> None:
    mc = run.cfg.mine
    posts = run.dataset()
    if mc["source"] == "predicted":
        ckpt = load_checkpoint(run.checkpoint_path("mine"))
        ckpt.check_space(run.space)
        pred = predict(ckpt.params, posts, ckpt.meta.get("mode", "final"),
                       ckpt.meta.get("use_text", True))
        records = concept_records_from_predictions(posts, pred)
    else:
        records = concept_records_from_posts(posts)
    triplets = mine_triplets(records, run.space, mc["min_support"], mc["attrs_of_interest"])
    stats = matching_stats(records, run.space, mc["attrs_of_interest"], mc["top_n"])
    export_knowledge(triplets, stats, run.space, run.out)
    print(f"{len(triplets)} triplets from {len(records)} posts")


def gradcheck_instance(run: _Run):
    """Small perturbed model with one clean and one weak post (final mode, text on)."""
    gc = run.cfg.gradcheck
    n_reg = int(gc["n_regions"])
    synth = SynthConfig(n_posts=20, d=gc["d"], vocab_size=gc["vocab_size"], max_regions=n_reg,
                        min_regions=n_reg, max_tokens=6, seed=run.cfg.seed)
    dataset, _ = generate_synthetic(synth, run.space)
    mc = ModelConfig(d=gc["d"], d_emb=gc["d_emb"], vocab_size=gc["vocab_size"],
                     n_maps=run.cfg.model.n_maps, kernel_widths=run.cfg.model.kernel_widths)
    params = init_params(mc, run.space, substream(run.cfg.seed, "init"))
    rng = substream(run.cfg.seed, "gradcheck")
    for t in params:
        t.values += rng.normal(0.0, gc["perturb"], size=t.shape)
    noise = NoiseModelSet.from_pairs(human_correction_pairs(dataset, run.space), run.space)
    clean = [r for r in dataset if not r.is_weak][:1]
    weak = [r for r in dataset if r.is_weak][:1]
    return (lambda: fused_loss(clean, weak, params, noise, run.cfg.train.beta, "final", True),
            list(params) + noise.tensors())


def cmd_gradcheck(run: _Run) -> None:
    gc = run.cfg.gradcheck
    fn, tensors = gradcheck_instance(run)
    rep = finite_difference_check(fn, tensors, eps=gc["eps"], tol=gc["tol"],
                                  max_coords=gc["max_coords"], seed=run.cfg.seed)
    (run.out / "gradcheck.json").write_text(json.dumps(
        {"max_rel_error": rep.max_rel_error, "worst": list(rep.worst), "n_checked": rep.n_checked,
         "n_narrowed": rep.n_narrowed, "tol": rep.tol, "passed": rep.passed}, indent=2) + "\n")
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_checked} coordinates "
          f"(worst {rep.worst[0]}[{rep.worst[1]}])")
    if not rep.passed:
        raise NumericalFailure(f"max relative error {rep.max_rel_error:.3e} exceeds {rep.tol:g}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "mine": cmd_mine, "gradcheck": cmd_gradcheck}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise FashionKEError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fashionke", description="Fashion concept learning and knowledge mining.")
    p.add_argument("--version", action="store_true", help="print version info as JSON and exit")
    p.add_argument("--schema", action="store_true", help="print the config schema as JSON and exit")
    p.add_argument("command", nargs="?", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("-c", "--config", help="YAML run config (or a bundled name: tiny, weak_label, ...)")
    p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. train.epochs=3")
    p.add_argument("-o", "--output-dir", help="output directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.version:
            print(json.dumps({"name": "fashionke", "version": __version__, "backend": BACKEND}))
            return 0
        if args.schema:
            print(json.dumps(schema(), indent=2))
            return 0
        if args.command not in COMMANDS:
            raise FashionKEError(f"unknown command {args.command!r}; expected one of "
                                 + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = list(args.set)
        if args.output_dir:
            overrides.append(f"output_dir={args.output_dir}")
        run = _Run(args.command, load_config(args.config, overrides))
        run.save_config()
        HANDLERS[args.command](run)
        return 0
    except (FashionKEError, OSError, ValueError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"fashionke: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, FashionKEError) and not isinstance(exc, NumericalFailure) else 1


if __name__ == "__main__":
    sys.exit(main())
