"""Per-function ablation table: elbow-selected heads vs random heads of the same count."""
import argparse

import numpy as np

from headprobe import cli
from headprobe import intervene as iv
from headprobe import metrics as mx
from headprobe.vocab import FUNCTIONS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run-dir", default="runs/main/run")
    ap.add_argument("--epsilon", type=float, default=iv.DEFAULT_EPSILON)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    ctx = cli.load_run(args.run_dir)
    model, test = ctx.model, ctx.test
    base = cli.baseline_report(ctx)
    print(f"{'function':22s} {'heads':>5s} {'base':>6s} {'cog':>6s} {'random':>6s} {'others min':>10s}")
    for f in FUNCTIONS:
        if f not in base.per_function:
            continue
        heads = mx.selected_heads(ctx.importance, f)
        hooks = iv.ablation_hooks(iv.AblationPlan(tuple(heads), args.epsilon), model.config)
        cog = iv.evaluate_with_plan(model, test, hooks)
        rand = []
        for s in args.seeds:
            rh = iv.random_heads(len(heads), s, heads)
            rh_hooks = iv.ablation_hooks(iv.AblationPlan(rh, args.epsilon), model.config)
            rand.append(iv.evaluate_with_plan(model, test, rh_hooks, only=f).accuracy(f))
        others = mx.function_accuracy(cog.outcomes, exclude=f)
        worst = min((r["accuracy"] for r in others.values()), default=float("nan"))
        print(f"{f.value:22s} {len(heads):5d} {base.accuracy(f):6.3f} {cog.accuracy(f):6.3f} "
              f"{np.mean(rand):6.3f} {worst:10.3f}")


if __name__ == "__main__":
    main()
