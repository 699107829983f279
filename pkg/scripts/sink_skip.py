#!/usr/bin/env python3
"""Plant sink heads, detect them, and compare skipping them with skipping random heads."""
import argparse

from vdit_lab.model import ModelConfig, build_model, default_schedule
from vdit_lab.sinks import detect_sink_heads, plant_sink_head, skip_heads_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--plant", nargs="*", default=["6:1", "7:2"], help="layer:head pairs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=5, help="random-head draws")
    args = ap.parse_args()

    model = build_model(ModelConfig(seed=0))
    for lh in args.plant:
        l, h = (int(x) for x in lh.split(":"))
        plant_sink_head(model, l, h)
    sched = default_schedule(model.config)
    heads, _ = detect_sink_heads(model, args.seed, sched)
    print("detected sink heads:", heads)

    sink = skip_heads_run(model, args.seed, "detected_sinks", schedule=sched)
    print(f"skip sinks:  {sink.count} heads, mse {sink.mse:.4f}")
    for t in range(args.trials):
        r = skip_heads_run(model, args.seed, "random_matched", schedule=sched, seed=t)
        print(f"skip random: {r.count} heads {r.skipped}, mse {r.mse:.4f}")


if __name__ == "__main__":
    main()
