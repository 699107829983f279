#!/usr/bin/env python3
"""Per-layer attention-map transfer from a source prompt into a target prompt.

Layers whose maps alone pull the target furthest toward the source are the
strongest carriers of layout under this model.
"""
import argparse
import json
from pathlib import Path

from vdit_lab.model import ModelConfig, build_model, default_schedule
from vdit_lab.transfer import layerwise_transfer_study, record_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/transfer"))
    ap.add_argument("--source", type=int, default=0)
    ap.add_argument("--target", type=int, default=1)
    ap.add_argument("--noise-seed", type=int, default=0)
    ap.add_argument("--mode", choices=["joint", "self"], default="self")
    args = ap.parse_args()

    model = build_model(ModelConfig(seed=0, attention_mode=args.mode))
    sched = default_schedule(model.config)
    trace = record_trace(model, args.source, args.noise_seed, sched)
    study = layerwise_transfer_study(model, trace, args.target, sched, args.noise_seed)

    rows = {r.layers[0]: r.mse_to_source for r in study.per_layer}
    summary = {
        "baseline_mse_to_source": study.baseline_mse_to_source,
        "full_mse_to_source": study.full.mse_to_source,
        "per_layer_mse_to_source": rows,
        "ranking": study.ranking(),
    }
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "study.json").write_text(json.dumps(summary, indent=2))
    print(f"baseline {study.baseline_mse_to_source:.4f}  all layers {study.full.mse_to_source:.4f}")
    for l in study.ranking():
        print(f"  layer {l}: {rows[l]:.4f}")


if __name__ == "__main__":
    main()
