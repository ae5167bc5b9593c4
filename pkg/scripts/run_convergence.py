"""LoRA vs OLoRA convergence at the 25% checkpoint, swept over rank.

    python3 scripts/run_convergence.py --ranks 8 16 --seeds 5 --out results/convergence.json
"""

import argparse
import json
import os
import time
from dataclasses import replace

from olora_lab.cli import load_config
from olora_lab.train import compare, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--ranks", type=int, nargs="+", default=[8, 16])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/convergence.json")
    args = ap.parse_args()

    cfg = load_config(args.config)
    t0 = time.perf_counter()
    base = pretrain(cfg.model, cfg.corpus, config=cfg.pretrain)
    print(f"pretrained: eval {base.final_eval:.4f}, entropy floor {base.entropy:.4f} "
          f"({time.perf_counter() - t0:.1f}s)", flush=True)

    results = {}
    for rank in args.ranks:
        tcfg = replace(cfg.train, rank=rank)
        t0 = time.perf_counter()
        summary, _ = compare(base.model, cfg.corpus, tcfg, range(args.seeds), jobs=args.jobs)
        means = summary["mean_checkpoint_loss"]
        print(f"r={rank:<3} s={tcfg.s:<5g} wins {summary['win_count']}/{args.seeds} at step "
              f"{summary['checkpoint_step']}: olora {means['olora']:.4f} lora {means['lora']:.4f} "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)
        results[str(rank)] = summary

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
