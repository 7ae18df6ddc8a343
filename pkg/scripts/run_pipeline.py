"""Generate a corpus, run the probe pipeline on the planted model and render the heatmap."""
import argparse
from dataclasses import replace
from pathlib import Path

from headprobe import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/main")
    ap.add_argument("--config", help="JSON experiment config")
    ap.add_argument("--num-mains", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cli.load_config(args.config) if args.config else cli.ExperimentConfig()
    cfg = replace(cfg, corpus=replace(cfg.corpus, num_mains=args.num_mains))
    cli.cmd_gen_corpus(cfg, out / "corpus.jsonl", seed=args.seed)
    res = cli.cmd_pipeline(cfg, out / "corpus.jsonl", out / "run")
    cli.emit_heatmap(out / "run" / "importance.csv", out / "heatmap.svg")

    s = res.summary
    print(f"train samples {s['train_samples']}  test samples {s['test_samples']}")
    print(f"probe subset accuracy: train {s['train_subset_accuracy']:.4f}  test {s['test_subset_accuracy']:.4f}")
    print(f"{'function':22s} {'selected':28s} planted")
    for f, heads in s["selected_heads"].items():
        print(f"{f:22s} {str(heads):28s} {s['planted_heads'][f]}")
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()
