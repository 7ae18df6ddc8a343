"""End-to-end acceptance checks against the planted-head ground truth.

Each test records one PASS/FAIL line (shown in the terminal summary) before asserting.
Thresholds here are the acceptance bounds; do not loosen them to make a run pass.
"""
import json
import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from headprobe import cli
from headprobe import corpus as C
from headprobe import intervene as iv
from headprobe import metrics as mx
from headprobe import model as mm
from headprobe import probe as pb
from headprobe.vocab import FUNCTIONS, FunctionLabel as F

from conftest import ACCEPTANCE_LINES

EPS = 1e-3
RANDOM_SEEDS = (0, 1, 2, 3, 4)


def record(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {num:2d} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@dataclass
class MainRun:
    model: mm.Model
    train: list
    test: list
    probe: pb.ProbeModel
    importance: pb.ImportanceMatrix
    summary: dict
    baseline: mx.EvalReport
    seconds: float


@pytest.fixture(scope="module")
def run():
    t0 = time.time()
    cfg = cli.ExperimentConfig(corpus=C.CorpusConfig(num_mains=1000))
    mains = C.generate_corpus(cfg.corpus, seed=0)
    train, test = C.split_corpus(mains, cfg.split.test_fraction, cfg.split.seed)
    model = mm.default_model()
    probe, imp, summary, _ = cli.run_probe_pipeline(model, train, test, cfg)
    base = iv.evaluate_with_plan(model, test, mm.EMPTY_HOOKS)
    return MainRun(model, train, test, probe, imp, summary, base, time.time() - t0)


def _ablate(model, heads, eps=EPS):
    return iv.ablation_hooks(iv.AblationPlan(tuple(heads), eps), model.config)


# 1 -------------------------------------------------------------------------------------------

def test_c01_gradient_fidelity():
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        p = pb.init_probe(4, 8, 256, seed=i)
        p.b1[:] = rng.normal(scale=0.05, size=p.b1.shape)
        x = rng.normal(size=(4, 8, 512))
        worst = max(worst, pb.grad_check(p, x, h=1e-4, num_coords=8, seed=i))
    ok = worst <= 1e-4
    record(1, "gradient fidelity", ok, f"max relative error {worst:.2e} over 100 pairs (bound 1e-4)")
    assert ok


# 2 -------------------------------------------------------------------------------------------

def test_c02_probe_quality(run):
    acc = run.summary["test_subset_accuracy"]
    ok = acc >= 0.95
    record(2, "probe quality", ok, f"test subset accuracy {acc:.4f} on {run.summary['test_samples']} samples "
                                   f"(bound 0.95; pipeline {run.seconds:.0f}s)")
    assert ok


# 3 -------------------------------------------------------------------------------------------

def test_c03_planted_head_recovery(run):
    bad = {}
    for f in FUNCTIONS:
        sel = set(mx.selected_heads(run.importance, f))
        planted = set(run.model.planted_heads(f))
        if not planted <= sel or len(sel) > 2 * len(planted):
            bad[f.value] = (sorted(sel), sorted(planted))
    ok = not bad
    record(3, "planted-head recovery", ok, "every elbow set covers its planted heads within 2x" if ok else str(bad))
    assert ok


# 4 -------------------------------------------------------------------------------------------

def test_c04_sparsity(run):
    frac = mx.sparsity_stat(run.importance, mx.relative_threshold(run.importance, 1e-3))
    worst = max(frac.values())
    ok = worst < 0.4
    record(4, "importance sparsity", ok, f"max fraction above 0.001*row-max {worst:.3f} (bound < 0.4)")
    assert ok


# 5 -------------------------------------------------------------------------------------------

def test_c05_ablation_asymmetry(run):
    problems, worst_gap, worst_other = [], math.inf, 0.0
    base = run.baseline
    base_other = {f: mx.function_accuracy(base.outcomes, exclude=f) for f in FUNCTIONS}
    for f in FUNCTIONS:
        heads = mx.selected_heads(run.importance, f)
        cog = iv.evaluate_with_plan(run.model, run.test, _ablate(run.model, heads))
        cog_drop = base.accuracy(f) - cog.accuracy(f)
        for s in RANDOM_SEEDS:
            rh = iv.random_heads(len(heads), s, heads)
            rnd = iv.evaluate_with_plan(run.model, run.test, _ablate(run.model, rh), only=f)
            gap = cog_drop - (base.accuracy(f) - rnd.accuracy(f))
            worst_gap = min(worst_gap, gap)
            if gap < 0.5:
                problems.append(f"{f.value} seed {s}: gap {gap:.3f}")
        # other functions: steps that do not carry the ablated label
        after = mx.function_accuracy(cog.outcomes, exclude=f)
        for g, row in after.items():
            move = abs(row["accuracy"] - base_other[f][g]["accuracy"])
            worst_other = max(worst_other, move)
            if move > 0.05:
                problems.append(f"{f.value} moves {g.value} by {move:.3f}")
    ok = not problems
    record(5, "ablation asymmetry", ok, f"min cognitive-minus-random drop {worst_gap:.3f} (bound 0.5), "
                                        f"max other-function move {worst_other:.3f} (bound 0.05)"
           + ("" if ok else f"; {problems[:4]}"))
    assert ok


# 6 -------------------------------------------------------------------------------------------

def test_c06_identity_interventions(run):
    cfg = run.model.config
    all_heads = [(l, m) for l in range(cfg.num_layers) for m in range(cfg.heads_per_layer)]
    rng = np.random.default_rng(0)
    steer = iv.SteeringPlan({h: iv.SteeringDirection(rng.normal(size=cfg.embed_dim), 1.0) for h in all_heads}, 0.0)
    ref = [o.output for o in run.baseline.outcomes]
    same = []
    for hooks in (_ablate(run.model, all_heads, 1.0), iv.steering_hooks(steer, cfg)):
        rep = iv.evaluate_with_plan(run.model, run.test, hooks)
        same.append([o.output for o in rep.outcomes] == ref)
    ok = all(same)
    record(6, "identity interventions", ok, f"epsilon=1 identical {same[0]}, alpha=0 identical {same[1]} "
                                            f"over {len(ref)} test generations")
    assert ok


# 7 -------------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def detuned_split(run):
    return mm.detuned_model(), run.train, run.test


def test_c07_steering(run, detuned_split):
    model, train, test = detuned_split
    heads = mx.selected_heads(run.importance, F.SpatialPerception)
    rows, _ = cli.steering_table(model, train, test, heads, F.SpatialPerception, (0.1, -0.1))
    base, up, down = (r["accuracy"] for r in rows)
    in_band = 0.4 <= base <= 0.7
    ok = in_band and up - base >= 0.05 and down <= base
    record(7, "steering", ok, f"detuned spatial accuracy {base:.3f} (band 0.4-0.7), alpha +0.1 -> {up:.3f} "
                              f"(+{100 * (up - base):.1f} pts, bound +5), alpha -0.1 -> {down:.3f}")
    assert ok


# 8 -------------------------------------------------------------------------------------------

def test_c08_spatial_cue_augmentation(detuned_split):
    model, train, test = detuned_split
    doc = cli.sha_comparison(model, train, test, cli.ExperimentConfig(), "bbox+mask")
    delta = doc["head_count_delta"]
    s = F.SpatialPerception.value
    acc0, acc1 = doc["none"]["accuracy"][s], doc["bbox+mask"]["accuracy"][s]
    ok = delta[s] >= 0 and delta[F.RelationalReasoning.value] >= 0 and acc1 >= acc0
    record(8, "spatial cue augmentation", ok,
           f"head-count delta spatial {delta[s]:+d}, relational {delta[F.RelationalReasoning.value]:+d}; "
           f"spatial accuracy {acc0:.3f} -> {acc1:.3f}")
    assert ok


# 9 -------------------------------------------------------------------------------------------

def test_c09_metric_correctness():
    checks = {
        "bleu identical": mx.bleu("a b c d".split(), "a b c d".split()) == 1.0,
        "bleu disjoint": mx.bleu(["x", "y"], ["a", "b"]) == 0.0,
        "bleu brevity": abs(mx.bleu("the cat sat".split(), "the cat sat down".split()) - math.exp(1 - 4 / 3)) < 1e-15,
        "rouge identical": mx.rouge_l("a b c".split(), "a b c".split()) == 1.0,
        "rouge lcs": abs(mx.rouge_l("a b c".split(), "a x c".split()) - 2 / 3) < 1e-15,
        "rouge empty": mx.rouge_l([], ["a"]) == 0.0,
        "unaffected identical": mx.unaffected(["a", "b"], ["a", "b"]),
        "affected disjoint": not mx.unaffected(["x"], ["a"]),
        "rouge clause": mx.bleu("b c d e a".split(), "a b c d e".split()) < 0.8
        and mx.unaffected("b c d e a".split(), "a b c d e".split()),
        "rouge 0.6 is not above": not mx.unaffected("a x b y c".split(), "a p b q c".split()),
        "thresholds": (mx.BLEU_THRESHOLD, mx.ROUGE_THRESHOLD) == (0.8, 0.6),
    }
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    record(9, "metric correctness", ok, f"{len(checks) - len(failed)}/{len(checks)} hand-count fixtures"
           + (f"; failed {failed}" if failed else ""))
    assert ok


# 10 ------------------------------------------------------------------------------------------

def test_c10_masked_ratio_sweep(run):
    f = F.SpatialPerception
    n_planted = len(run.model.planted_heads(f))
    rows = cli.masked_ratio_curves(run.model, run.test, run.importance, f, range(0, 9), seeds=RANDOM_SEEDS)
    cog = [r["cognitive"] for r in rows]
    base = cog[0]
    decreasing = all(b <= a + 0.02 for a, b in zip(cog, cog[1:]))
    crossed = cog[n_planted] < 0.5
    rand_dev = max(abs(r["random_mean"] - base) for r in rows if r["k"] <= n_planted)
    rand_dev_all = max(abs(v - base) for r in rows if r["k"] <= n_planted for v in r["random"])
    ok = decreasing and crossed and rand_dev <= 0.05
    record(10, "masked-ratio sweep", ok,
           f"cognitive {['%.3f' % c for c in cog]}, below 0.5 at K={n_planted}: {crossed}; "
           f"random mean within {rand_dev:.3f} of baseline (worst single seed {rand_dev_all:.3f}) for K<={n_planted}")
    assert ok


# 11 ------------------------------------------------------------------------------------------

def _full_run(root, cfg_path):
    root.mkdir()
    cfg = cli.load_config(cfg_path)
    cli.cmd_gen_corpus(cfg, root / "corpus.jsonl", seed=2)
    cli.cmd_pipeline(cfg, root / "corpus.jsonl", root / "run")
    cli.cmd_intervene(root / "run", root / "report.json", function="HighLevelVisual")
    cli.cmd_intervene(root / "run", root / "random.json", mode="random", function="HighLevelVisual", seed=3)
    return {
        "corpus": root / "corpus.jsonl",
        "train cache": root / "run" / "train.hsc",
        "test cache": root / "run" / "test.hsc",
        "probe": root / "run" / "probe.bin",
        "importance": root / "run" / "importance.csv",
        "summary": root / "run" / "summary.json",
        "report": root / "report.json",
        "random report": root / "random.json",
    }


def test_c11_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"corpus": {"num_mains": 60}}))
    a, b = (_full_run(tmp_path / name, cfg_path) for name in "ab")
    differ = [k for k in a if a[k].read_bytes() != b[k].read_bytes()]
    ok = not differ
    record(11, "determinism", ok, f"{len(a) - len(differ)}/{len(a)} artifacts byte-identical across two runs"
           + (f"; differ: {differ}" if differ else ""))
    assert ok
