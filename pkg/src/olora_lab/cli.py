"""Command-line entry point.

Exit codes: 0 success, 2 config/usage error, 3 runtime divergence or I/O
failure, 4 verification failure.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .adapters import METHODS, spectral_diagnose
from .data import CorpusConfig, build_sources, eval_set, write_tokens
from .errors import CheckpointError, ConfigError, LabError, RankError, RunError, ShapeError
from .autograd import grad_check
from .model import DENSE_LAYERS, ModelSpec
from .persist import read_checkpoint, write_checkpoint
from .train import (PretrainConfig, TrainConfig, adapt, compare, gradcheck_model, load_adapter,
                    model_from_checkpoint, pretrain)

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_VERIFY = 0, 2, 3, 4

SECTIONS = {
    "model": ModelSpec,
    "corpus": CorpusConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
}
GRADCHECK_KEYS = {"step": 1e-4, "tol": 1e-4, "coords": 32, "batch_size": 4, "seed": 0}


class Config:
    """Parsed experiment config; every section falls back to its defaults."""

    def __init__(self, model=None, corpus=None, pretrain=None, train=None, gradcheck=None):
        self.model = model or ModelSpec()
        self.corpus = corpus or CorpusConfig()
        self.pretrain = pretrain or PretrainConfig()
        self.train = train or TrainConfig()
        self.gradcheck = {**GRADCHECK_KEYS, **(gradcheck or {})}


def parse_config(tree):
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(tree) - set(SECTIONS) - {"gradcheck"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    built = {}
    for section, cls in SECTIONS.items():
        values = tree.get(section, {})
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        allowed = {f.name for f in fields(cls)}
        bad = set(values) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
        try:
            built[section] = cls(**values)
        except TypeError as exc:
            raise ConfigError(f"section {section!r}: {exc}") from None
    gc = tree.get("gradcheck", {})
    if not isinstance(gc, dict) or set(gc) - set(GRADCHECK_KEYS):
        raise ConfigError(f"unknown keys in 'gradcheck': {sorted(set(gc) - set(GRADCHECK_KEYS))}")
    return Config(gradcheck=gc, **built)


def load_config(path):
    if path is None:
        return Config()
    try:
        with open(path, encoding="utf-8") as f:
            tree = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(tree)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_pretrain(args):
    cfg = load_config(args.config)
    pcfg = cfg.pretrain if args.seed is None else replace(cfg.pretrain, seed=args.seed)
    result = pretrain(cfg.model, cfg.corpus, config=pcfg)
    write_checkpoint(args.out, result.checkpoint)
    print(f"pretrain: eval loss {result.initial_eval:.4f} -> {result.final_eval:.4f} "
          f"(entropy floor {result.entropy:.4f}); wrote {args.out}")
    return EXIT_OK


def _load_base(path, cfg):
    ckpt = read_checkpoint(path)
    return model_from_checkpoint(ckpt, cfg.model.nonlinearity, cfg.model.context)


def cmd_adapt(args):
    cfg = load_config(args.config)
    overrides = {"method": args.method, "rank": args.rank}
    for key in ("scale", "steps", "seed"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.steps is not None:
        overrides["eval_interval"] = math.gcd(args.steps, cfg.train.eval_interval)
    tcfg = replace(cfg.train, **overrides)
    base = _load_base(args.base, cfg)
    result = adapt(base, tcfg, cfg.corpus)
    result.metrics.write_csv(args.metrics)
    write_checkpoint(args.out, result.checkpoint)
    last = result.metrics.split("eval")[-1]
    print(f"adapt {tcfg.method} r={tcfg.rank} s={tcfg.s:g}: base eval {result.base_eval:.4f}, "
          f"eval at step {last.step} {last.loss:.4f}; init {result.metrics.init_ms:.2f} ms")
    return EXIT_OK


def cmd_compare(args):
    cfg = load_config(args.config)
    if args.seeds < 3:
        raise ConfigError(f"--seeds must be at least 3, got {args.seeds}")
    base = pretrain(cfg.model, cfg.corpus, config=cfg.pretrain).model
    seeds = [cfg.train.seed + i for i in range(args.seeds)]
    summary, runs = compare(base, cfg.corpus, cfg.train, seeds, jobs=args.jobs)
    os.makedirs(args.outdir, exist_ok=True)
    for (method, seed), metrics in runs.items():
        if metrics is not None:
            metrics.write_csv(os.path.join(args.outdir, f"metrics_{method}_seed{seed}.csv"))
    _write_json(os.path.join(args.outdir, "summary.json"), summary)
    print(f"compare: OLoRA wins {summary['win_count']}/{len(seeds)} seeds at step "
          f"{summary['checkpoint_step']}; mean loss there {summary['mean_checkpoint_loss']}")
    return EXIT_RUN if summary["failed"] else EXIT_OK


def cmd_diagnose(args):
    cfg = load_config(args.config)
    base = _load_base(args.base, cfg)
    ckpt = read_checkpoint(args.adapter)
    model = load_adapter(base, ckpt)
    report = {"adapter": ckpt.config, "layers": [spectral_diagnose(model.layers[n])
                                                 for n in DENSE_LAYERS]}
    _write_json(args.out, report)
    worst = max(l["orthonormality_drift"] for l in report["layers"])
    print(f"diagnose: {len(report['layers'])} layers, max orthonormality drift {worst:.3g}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    gc = cfg.gradcheck
    model, tokens = gradcheck_model(cfg.model, cfg.train, batch_size=gc["batch_size"],
                                    seed=gc["seed"])
    report = grad_check(model, tokens, step=gc["step"], tol=gc["tol"], coords=gc["coords"],
                        seed=gc["seed"])
    print(f"{'param':<16}{'coords':>8}{'max rel err':>16}")
    for name, row in report.items():
        print(f"{name:<16}{row['coords']:>8}{row['max_rel_err']:>16.3e}")
    bad = [n for n, row in report.items() if not row["max_rel_err"] <= gc["tol"]]
    if bad:
        print(f"gradcheck FAILED (tol {gc['tol']:g}): {', '.join(bad)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradcheck passed (tol {gc['tol']:g})")
    return EXIT_OK


def cmd_dump_corpus(args):
    cfg = load_config(args.config)
    source, shifted = build_sources(cfg.model.vocab, cfg.corpus)
    src = shifted if args.shifted else source
    tokens = eval_set(src, replace(cfg.corpus, n_eval=args.sequences), cfg.model.context)
    write_tokens(args.out, tokens, cfg.model.vocab)
    print(f"wrote {tokens.size} tokens to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="olora-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="train the base model on the source corpus")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="fine-tune LoRA/OLoRA adapters on the shifted corpus")
    sp.add_argument("--base", required=True)
    sp.add_argument("--method", required=True, choices=METHODS)
    sp.add_argument("--rank", required=True, type=int)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--steps", required=True, type=int)
    sp.add_argument("--seed", required=True, type=int)
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("compare", help="LoRA vs OLoRA over several seeds")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seeds", required=True, type=int)
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("diagnose", help="spectral report for an adapter checkpoint")
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("gradcheck", help="finite-difference check of adapter gradients")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("dump-corpus", help="write sampled sequences as a binary token file")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--sequences", type=int, default=256)
    sp.add_argument("--shifted", action="store_true")
    sp.set_defaults(func=cmd_dump_corpus)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, RankError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
