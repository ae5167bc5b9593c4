"""Track orthonormality drift and the singular-subset gap of OLoRA adapters during training.

The subset gap is the largest distance from a singular value of B·A to the
nearest singular value of the pre-trained weight. It is printed as a
diagnostic and never thresholded.

    python3 scripts/spectral_probe.py --steps 0 100 500 2000
"""

import argparse
from dataclasses import replace

import numpy as np

from olora_lab.adapters import spectral_diagnose
from olora_lab.cli import load_config
from olora_lab.model import DENSE_LAYERS
from olora_lab.train import adapt, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--steps", type=int, nargs="+", default=[0, 100, 500, 2000])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(args.config)
    base = pretrain(cfg.model, cfg.corpus, config=cfg.pretrain).model
    print(f"{'steps':>6}  {'layer':<9}{'drift':>11}{'subset gap':>12}")
    for t in args.steps:
        tcfg = replace(cfg.train, method="olora", steps=t, eval_interval=max(t, 1),
                       seed=args.seed)
        model = adapt(base, tcfg, cfg.corpus).model
        reports = [spectral_diagnose(model.layers[n]) for n in DENSE_LAYERS]
        for r in reports:
            print(f"{t:>6}  {r['layer']:<9}{r['orthonormality_drift']:>11.3e}"
                  f"{r['subset_gap']:>12.4f}")
        print(f"{t:>6}  {'mean':<9}{np.mean([r['orthonormality_drift'] for r in reports]):>11.3e}"
              f"{np.mean([r['subset_gap'] for r in reports]):>12.4f}")


if __name__ == "__main__":
    main()
