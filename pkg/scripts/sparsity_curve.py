#!/usr/bin/env python3
"""Degradation curve for bottom-k masking, plus per-layer sensitivity at one k."""
import argparse
from pathlib import Path

from vdit_lab.model import ModelConfig, build_model, default_schedule
from vdit_lab.sparsity import exclusion_sweep, layer_sensitivity_sweep, write_reports_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/sparsity"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--k", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.5, 0.7])
    ap.add_argument("--sensitivity-k", type=float, default=0.5)
    ap.add_argument("--exclude", type=int, nargs="*", default=[])
    args = ap.parse_args()

    model = build_model(ModelConfig(seed=args.seed))
    sched = default_schedule(model.config)
    args.out.mkdir(parents=True, exist_ok=True)

    curve = exclusion_sweep(model, args.seed, sorted(args.k), args.exclude, sched, args.seed)
    write_reports_csv(args.out / "curve.csv", curve)
    for r in curve:
        print(f"k={r.plan.k:<5g} mse={r.mse:.5f} psnr={r.psnr:.2f} dB")

    layers = layer_sensitivity_sweep(model, args.seed, args.sensitivity_k, sched, args.seed)
    write_reports_csv(args.out / "layers.csv", layers)
    print("most sensitive layers:", [r.layer for r in layers[:3]])


if __name__ == "__main__":
    main()
