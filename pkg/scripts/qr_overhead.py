"""Amortization table: OLoRA init time against the cost of T training steps.

    python3 scripts/qr_overhead.py --steps 100 1000 10000
"""

import argparse

from olora_lab.model import ModelSpec
from olora_lab.train import TrainConfig, qr_overhead_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, nargs="+", default=[100, 1000, 10000])
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--embed", type=int, default=32)
    ap.add_argument("--hidden", type=int, default=64)
    args = ap.parse_args()

    spec = ModelSpec(embed=args.embed, hidden=args.hidden)
    print(f"{'T':>8}{'init_ms':>12}{'step_ms':>12}{'ratio':>12}")
    for t in args.steps:
        report = qr_overhead_report(spec, TrainConfig(rank=args.rank, steps=t, eval_interval=t))
        print(f"{t:>8}{report['init_ms']:>12.3f}{report['per_step_ms']:>12.3f}"
              f"{report['ratio']:>12.2e}")


if __name__ == "__main__":
    main()
