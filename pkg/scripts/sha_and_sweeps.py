"""Spatial cue augmentation on the detuned model, then masked-ratio and token-position sweeps."""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from headprobe import cli
from headprobe.vocab import FunctionLabel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", default="runs/main/corpus.jsonl")
    ap.add_argument("--run-dir", default="runs/main/run")
    ap.add_argument("--out-dir", default="runs/sweeps")
    ap.add_argument("--skip-token-pos", action="store_true", help="the token sweep trains four probes")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cli.ExperimentConfig()

    detuned = replace(cfg, model=replace(cfg.model, variant="detuned"))
    doc = cli.cmd_sha(detuned, args.corpus, out / "sha.json")
    print("augmentation (detuned model)")
    for f, d in doc["head_count_delta"].items():
        print(f"  {f:22s} accuracy {doc['none']['accuracy'].get(f, float('nan')):.3f} -> "
              f"{doc['bbox+mask']['accuracy'].get(f, float('nan')):.3f}  head delta {d:+d}")

    for f in (FunctionLabel.SpatialPerception, FunctionLabel.HighLevelVisual):
        rows = cli.cmd_sweep_ratio(args.run_dir, out / f"ratio_{f.value}.csv", function=f.value)
        print(f"masked ratio, {f.value}")
        for r in rows:
            print(f"  K={r['k']}  cognitive {r['cognitive']:.3f}  random {r['random_mean']:.3f}")

    if not args.skip_token_pos:
        rows = cli.cmd_sweep_token_pos(cfg, args.corpus, out / "token_pos.csv")
        print("token position strategies")
        for r in rows:
            print(f"  {r['strategy']:6s} accuracy {r['test_subset_accuracy']:.4f}  heads {r['selected_total']}")
    print(json.dumps({"outputs": sorted(p.name for p in out.iterdir())}))


if __name__ == "__main__":
    main()
