"""Steer the detuned model's spatial heads along correct-minus-incorrect directions."""
import argparse

from headprobe import cli
from headprobe import corpus as C
from headprobe import metrics as mx
from headprobe import model as mm
from headprobe.vocab import FunctionLabel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", default="runs/main/corpus.jsonl")
    ap.add_argument("--run-dir", default="runs/main/run", help="planted run whose importance picks the heads")
    ap.add_argument("--function", default="SpatialPerception")
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.05, 0.1, 0.2, -0.05, -0.1, -0.2])
    args = ap.parse_args()

    f = FunctionLabel(args.function)
    ctx = cli.load_run(args.run_dir)
    heads = mx.selected_heads(ctx.importance, f)
    train, test = C.split_corpus(C.read_corpus(args.corpus), ctx.cfg.split.test_fraction, ctx.cfg.split.seed)
    rows, _ = cli.steering_table(mm.detuned_model(), train, test, heads, f, args.alphas)
    print(f"heads {heads}")
    print(f"{'alpha':>7s} {'accuracy':>9s} {'overall':>8s}")
    for r in rows:
        print(f"{r['alpha']:7.3f} {r['accuracy']:9.3f} {r['overall']:8.3f}")


if __name__ == "__main__":
    main()
