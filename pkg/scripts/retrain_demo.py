#!/usr/bin/env python3
"""Reinitialize the last blocks of the toy model and retrain them with the rest frozen."""
import argparse
from pathlib import Path

from vdit_lab.model import ModelConfig, build_model, clone_model, reinit_layers
from vdit_lab.serialization import save_checkpoint
from vdit_lab.training import TrainingConfig, retrain, synth_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/retrain"))
    ap.add_argument("--layers", type=int, default=4, help="how many final blocks to retrain")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    base = build_model(ModelConfig(seed=args.seed))
    n = base.config.num_layers
    layers = frozenset(range(n - args.layers, n))
    model = reinit_layers(clone_model(base), layers, seed=args.seed + 1)
    tc = TrainingConfig(trainable_layers=layers, total_steps=args.steps, seed=args.seed)
    data = synth_dataset(base.config, args.seed, tc.total_steps * tc.batch_size)
    model, ema, trace = retrain(model, tc, data)

    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.tvdt")
    save_checkpoint(ema, args.out / "model_ema.tvdt")
    w = max(1, min(50, len(trace.losses) // 2))
    print(f"loss first {w}: {sum(trace.losses[:w]) / w:.4f}  last {w}: {sum(trace.losses[-w:]) / w:.4f}")


if __name__ == "__main__":
    main()
