"""Command-line orchestration: corpus, capture, probe, attribution, interventions, sweeps, heatmaps."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as corpus_mod
from . import intervene as iv
from . import metrics as mx
from . import model as model_mod
from . import probe as pb
from . import trace as tr
from .vocab import FUNCTIONS, FunctionLabel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3
MODEL_VARIANTS = ("planted", "detuned")


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelSection:
    variant: str = "planted"
    detune_gain: float = model_mod.DETUNED_GAIN
    value_scale: float = model_mod.ModelConfig.value_scale

    def build(self) -> model_mod.Model:
        cfg = model_mod.ModelConfig(value_scale=self.value_scale)
        if self.variant == "detuned":
            return model_mod.detuned_model(cfg, self.detune_gain)
        return model_mod.default_model(cfg)


@dataclass(frozen=True)
class SplitSection:
    test_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class TraceSection:
    topk: int = tr.DEFAULT_TOPK
    strategy: str = "topk"


@dataclass(frozen=True)
class InterventionSection:
    epsilon: float = iv.DEFAULT_EPSILON
    alpha: float = iv.DEFAULT_ALPHA
    threshold: float = 1e-3           # sparsity cut, relative to each row's max
    random_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = ModelSection()
    corpus: corpus_mod.CorpusConfig = corpus_mod.CorpusConfig()
    split: SplitSection = SplitSection()
    trace: TraceSection = TraceSection()
    probe: pb.TrainConfig = pb.TrainConfig()
    intervention: InterventionSection = InterventionSection()

    def to_dict(self) -> dict:
        doc = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            doc[f.name] = {k.name: _jsonable(getattr(sec, k.name)) for k in fields(sec)}
        return doc

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()[:16]


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _section(cls, doc, name):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown field {name}.{key}")
    kwargs = {}
    for key, val in doc.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(val, list):
                raise ConfigError(f"field {name}.{key} must be a list")
            val = tuple(val)
        elif isinstance(default, bool) or default is None:
            pass
        elif isinstance(default, (int, float)) and not isinstance(val, (int, float)):
            raise ConfigError(f"field {name}.{key} must be a number")
        elif isinstance(default, int) and isinstance(val, float):
            raise ConfigError(f"field {name}.{key} must be an integer")
        elif isinstance(default, str) and not isinstance(val, str):
            raise ConfigError(f"field {name}.{key} must be a string")
        elif isinstance(default, dict) and not isinstance(val, dict):
            raise ConfigError(f"field {name}.{key} must be an object")
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


_SECTIONS = {"model": ModelSection, "corpus": corpus_mod.CorpusConfig, "split": SplitSection,
             "trace": TraceSection, "probe": pb.TrainConfig, "intervention": InterventionSection}


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section {key!r}")
    cfg = ExperimentConfig(**{k: _section(_SECTIONS[k], v, k) for k, v in doc.items()})
    if cfg.model.variant not in MODEL_VARIANTS:
        raise ConfigError(f"field model.variant must be one of {MODEL_VARIANTS}")
    if cfg.trace.strategy not in tr.POSITION_STRATEGIES:
        raise ConfigError(f"field trace.strategy must be one of {tr.POSITION_STRATEGIES}")
    if cfg.trace.topk < 1:
        raise ConfigError("field trace.topk must be at least 1")
    if not 0 < cfg.split.test_fraction < 1:
        raise ConfigError("field split.test_fraction must lie in (0, 1)")
    unknown = set(cfg.corpus.template_weights) - set(corpus_mod.TEMPLATES)
    if unknown:
        raise ConfigError(f"field corpus.template_weights names unknown templates {sorted(unknown)}")
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    corpus_hash: str | None = None
    model_hash: str | None = None
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)     # name -> {"path", "sha256"}
    tool_version: str = __version__
    wall_clock: float = 0.0

    def add(self, name: str, path) -> None:
        self.artifacts[name] = {"path": Path(path).name, "sha256": sha256_file(path)}

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return Path(path)

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _write_json(path, doc) -> Path:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return Path(path)


# ---------------------------------------------------------------------------
# shared helpers


def parse_heads(text: str) -> tuple[tuple[int, int], ...]:
    """``"0,2;0,3"`` -> ((0, 2), (0, 3))."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        try:
            l, m = (int(x) for x in part.split(","))
        except ValueError:
            raise UsageError(f"bad head {part!r}; expected layer,head") from None
        out.append((l, m))
    if not out:
        raise UsageError("no heads given")
    return tuple(out)


def _split(cfg: ExperimentConfig, mains):
    return corpus_mod.split_corpus(mains, cfg.split.test_fraction, cfg.split.seed)


def _augment(mains, mode: str):
    return [corpus_mod.augment_spatial_cues(m, mode) for m in mains] if mode != "none" else list(mains)


def _read_corpus(path):
    if not Path(path).exists():
        raise corpus_mod.CorpusError(f"corpus file {path} not found")
    mains = corpus_mod.read_corpus(path)
    if not mains:
        raise corpus_mod.CorpusError(f"corpus file {path} is empty")
    return mains


def _function(name: str) -> FunctionLabel:
    try:
        return FunctionLabel.parse(name)
    except (KeyError, ValueError):
        raise UsageError(f"unknown function {name!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(cfg: ExperimentConfig, out, seed: int = 0) -> RunManifest:
    t0 = time.time()
    mains = corpus_mod.generate_corpus(cfg.corpus, seed)
    out = Path(out)
    try:
        corpus_mod.write_corpus(mains, out)
    except OSError as exc:
        raise corpus_mod.CorpusError(f"cannot write {out}: {exc}") from None
    man = RunManifest("gen-corpus", cfg.digest(), corpus_mod.corpus_hash(mains), seeds={"corpus": seed})
    man.add("corpus", out)
    man.wall_clock = time.time() - t0
    man.write(Path(str(out) + ".manifest.json"))
    return man


@dataclass
class PipelineResult:
    probe: pb.ProbeModel
    importance: pb.ImportanceMatrix
    summary: dict
    manifest: RunManifest


def run_probe_pipeline(model, train, test, cfg: ExperimentConfig, out_dir=None) -> tuple:
    """Capture, train and attribute; returns (probe, importance, summary, paths)."""
    paths = {}
    cache_tr = cache_te = None
    if out_dir is not None:
        cache_tr, cache_te = Path(out_dir) / "train.hsc", Path(out_dir) / "test.hsc"
    k, strat = cfg.trace.topk, cfg.trace.strategy
    ds_tr = tr.build_probe_dataset(train, model, k, cache_tr, strategy=strat)
    ds_te = tr.build_probe_dataset(test, model, k, cache_te, strategy=strat)
    probe, hist = pb.train_probe(ds_tr, cfg.probe)
    imp = pb.importance_matrix(probe, ds_tr)
    thr = mx.relative_threshold(imp, cfg.intervention.threshold)
    summary = {
        "train_samples": len(ds_tr),
        "test_samples": len(ds_te),
        "train_subset_accuracy": pb.subset_accuracy(probe, ds_tr),
        "test_subset_accuracy": pb.subset_accuracy(probe, ds_te),
        "final_loss": hist.loss[-1] if hist.loss else None,
        "selected_heads": {f.value: [list(h) for h in mx.selected_heads(imp, f)] for f in FUNCTIONS},
        "sparsity": {f.value: v for f, v in mx.sparsity_stat(imp, thr).items()},
        "planted_heads": {f.value: [list(h) for h in model.planted_heads(f)] for f in FUNCTIONS},
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        paths = {"train_cache": cache_tr, "test_cache": cache_te}
        pb.save_probe(probe, out_dir / "probe.bin")
        (out_dir / "importance.csv").write_text(pb.importance_to_csv(imp))
        _write_json(out_dir / "summary.json", summary)
        paths.update(probe=out_dir / "probe.bin", importance=out_dir / "importance.csv",
                     summary=out_dir / "summary.json")
    return probe, imp, summary, paths


def cmd_pipeline(cfg: ExperimentConfig, corpus_path, out_dir, augment: str = "none") -> PipelineResult:
    t0 = time.time()
    mains = _read_corpus(corpus_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = cfg.model.build()
    train, test = _split(cfg, _augment(mains, augment))
    probe, imp, summary, paths = run_probe_pipeline(model, train, test, cfg, out_dir)
    _write_json(out_dir / "config.json", cfg.to_dict())
    _write_json(out_dir / "run.json", {"corpus": str(Path(corpus_path).resolve()), "augment": augment})
    man = RunManifest("pipeline", cfg.digest(), corpus_mod.corpus_hash(mains), model.fingerprint(),
                      seeds={"probe": cfg.probe.seed, "split": cfg.split.seed})
    for name, p in paths.items():
        man.add(name, p)
    man.add("config", out_dir / "config.json")
    man.wall_clock = time.time() - t0
    man.write(out_dir / "manifest.json")
    return PipelineResult(probe, imp, summary, man)


@dataclass
class RunContext:
    cfg: ExperimentConfig
    model: model_mod.Model
    train: list
    test: list
    importance: pb.ImportanceMatrix
    mains: list


def load_run(run_dir) -> RunContext:
    run_dir = Path(run_dir)
    for name in ("config.json", "run.json", "importance.csv"):
        if not (run_dir / name).exists():
            raise tr.TraceError(f"run directory {run_dir} lacks {name}; run the pipeline first")
    cfg = config_from_dict(json.loads((run_dir / "config.json").read_text()))
    info = json.loads((run_dir / "run.json").read_text())
    mains = _augment(_read_corpus(info["corpus"]), info.get("augment", "none"))
    train, test = _split(cfg, mains)
    imp = pb.importance_from_csv((run_dir / "importance.csv").read_text())
    return RunContext(cfg, cfg.model.build(), train, test, imp, mains)


def baseline_report(ctx: RunContext) -> mx.EvalReport:
    return iv.evaluate_with_plan(ctx.model, ctx.test, model_mod.EMPTY_HOOKS, metadata={"plan": None})


def choose_heads(ctx: RunContext, source: str, function: FunctionLabel | None, *, explicit=None,
                 count: int | None = None, seed: int = 0):
    if source == "elbow":
        if function is None:
            raise UsageError("--function is required with --heads elbow")
        return tuple(mx.selected_heads(ctx.importance, function))
    if source == "explicit":
        if not explicit:
            raise UsageError("--explicit is required with --heads explicit")
        return parse_heads(explicit)
    if source == "random":
        excl = mx.selected_heads(ctx.importance, function) if function is not None else ()
        if count is None:
            count = len(excl)
        cfg = ctx.model.config
        return iv.random_heads(count, seed, excl, num_layers=cfg.num_layers, heads_per_layer=cfg.heads_per_layer)
    raise UsageError(f"unknown head source {source!r}")


def cmd_intervene(run_dir, out, *, mode: str = "ablate", heads: str = "elbow", function: str | None = None,
                  explicit: str | None = None, count: int | None = None, epsilon: float | None = None,
                  alpha: float | None = None, seed: int = 0, baseline_path=None) -> mx.EvalReport:
    t0 = time.time()
    ctx = load_run(run_dir)
    f = _function(function) if function else None
    if mode == "random":
        mode, heads = "ablate", "random"
    src = "random" if heads == "random" else heads
    chosen = choose_heads(ctx, src, f, explicit=explicit, count=count, seed=seed)
    if baseline_path is not None:
        baseline = mx.EvalReport.from_json(Path(baseline_path).read_text())
    else:
        baseline = baseline_report(ctx)
    out = Path(out)
    man = RunManifest("intervene", ctx.cfg.digest(), corpus_mod.corpus_hash(ctx.mains), ctx.model.fingerprint(),
                      seeds={"random_heads": seed})
    if mode == "ablate":
        eps = ctx.cfg.intervention.epsilon if epsilon is None else epsilon
        plan = iv.AblationPlan(chosen, eps)
        hooks = iv.ablation_hooks(plan, ctx.model.config)
        plan_doc = plan.to_dict()
    elif mode == "steer":
        if f is None:
            raise UsageError("--function is required for steering")
        a = ctx.cfg.intervention.alpha if alpha is None else alpha
        caps = tr.capture_split(ctx.model, ctx.train, k=ctx.cfg.trace.topk, strategy=ctx.cfg.trace.strategy)
        plan = iv.steering_plan_from_captures(caps, chosen, f, a)
        dir_path = out.with_suffix(".dirs")
        iv.write_directions(plan, dir_path)
        man.add("directions", dir_path)
        hooks = iv.steering_hooks(plan, ctx.model.config)
        plan_doc = plan.to_dict(dir_path.name)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    meta = {"plan": plan_doc, "plan_hash": iv.plan_hash(plan_doc), "function": f.value if f else None}
    report = iv.evaluate_with_plan(ctx.model, ctx.test, hooks, baseline, meta)
    out.write_text(report.to_json())
    man.add("report", out)
    man.wall_clock = time.time() - t0
    man.write(Path(str(out) + ".manifest.json"))
    return report


def steering_table(model, train, test, heads, function: FunctionLabel, alphas, *, k=tr.DEFAULT_TOPK,
                   strategy="topk") -> tuple[list[dict], iv.SteeringPlan]:
    caps = tr.capture_split(model, train, k=k, strategy=strategy)
    plan = iv.steering_plan_from_captures(caps, heads, function, 0.0)
    rows = []
    base = iv.evaluate_with_plan(model, test, model_mod.EMPTY_HOOKS, only=function)
    rows.append({"alpha": 0.0, "accuracy": base.accuracy(function), "overall": base.overall})
    for a in alphas:
        rep = iv.evaluate_with_plan(model, test, iv.steering_hooks(plan.with_alpha(a), model.config), only=function)
        rows.append({"alpha": a, "accuracy": rep.accuracy(function), "overall": rep.overall})
    return rows, plan


def cmd_steer(run_dir, out, *, function: str = "SpatialPerception", alphas=(0.1, -0.1),
              explicit: str | None = None) -> list[dict]:
    t0 = time.time()
    ctx = load_run(run_dir)
    f = _function(function)
    heads = parse_heads(explicit) if explicit else tuple(mx.selected_heads(ctx.importance, f))
    rows, plan = steering_table(ctx.model, ctx.train, ctx.test, heads, f, alphas,
                                k=ctx.cfg.trace.topk, strategy=ctx.cfg.trace.strategy)
    out = Path(out)
    lines = ["alpha,accuracy,overall"] + [f"{r['alpha']:.17g},{r['accuracy']:.17g},{r['overall']:.17g}"
                                           for r in rows]
    out.write_text("\n".join(lines) + "\n")
    dir_path = out.with_suffix(".dirs")
    iv.write_directions(plan, dir_path)
    man = RunManifest("steer", ctx.cfg.digest(), corpus_mod.corpus_hash(ctx.mains), ctx.model.fingerprint())
    man.add("table", out)
    man.add("directions", dir_path)
    man.wall_clock = time.time() - t0
    man.write(Path(str(out) + ".manifest.json"))
    return rows


def masked_ratio_curves(model, test, importance, function: FunctionLabel, ks, *, epsilon=iv.DEFAULT_EPSILON,
                        seeds=(0, 1, 2, 3, 4)) -> list[dict]:
    """Accuracy after masking the top-K heads by importance vs K random heads.

    Random draws avoid the function's selected heads while enough other heads remain.
    """
    cfg = model.config
    n = cfg.num_heads
    bad = [k for k in ks if k < 0 or k > n]
    if bad:
        raise UsageError(f"K values {bad} outside 0..{n}")
    order = np.argsort(-importance.row(function), kind="stable")
    selected = mx.selected_heads(importance, function)

    def acc(heads):
        if not heads:
            hooks = model_mod.EMPTY_HOOKS
        else:
            hooks = iv.ablation_hooks(iv.AblationPlan(tuple(heads), epsilon), cfg)
        return iv.evaluate_with_plan(model, test, hooks, only=function).accuracy(function)

    rows = []
    for k in ks:
        cog = acc([importance.head(j) for j in order[:k]])
        excl = selected if k <= n - len(selected) else ()
        rand = [acc(iv.random_heads(k, s, excl, num_layers=cfg.num_layers, heads_per_layer=cfg.heads_per_layer))
                for s in seeds]
        rows.append({"k": k, "cognitive": cog, "random_mean": float(np.mean(rand)), "random": rand})
    return rows


def cmd_sweep_ratio(run_dir, out, *, function: str = "SpatialPerception", ks=None) -> list[dict]:
    t0 = time.time()
    ctx = load_run(run_dir)
    f = _function(function)
    ks = list(range(0, 9)) if ks is None else list(ks)
    rows = masked_ratio_curves(ctx.model, ctx.test, ctx.importance, f, ks, epsilon=ctx.cfg.intervention.epsilon,
                               seeds=ctx.cfg.intervention.random_seeds)
    seeds = ctx.cfg.intervention.random_seeds
    head = "k,cognitive,random_mean," + ",".join(f"random_seed{s}" for s in seeds)
    lines = [head] + [",".join([str(r["k"]), f"{r['cognitive']:.17g}", f"{r['random_mean']:.17g}"]
                               + [f"{v:.17g}" for v in r["random"]]) for r in rows]
    Path(out).write_text("\n".join(lines) + "\n")
    man = RunManifest("sweep-ratio", ctx.cfg.digest(), corpus_mod.corpus_hash(ctx.mains), ctx.model.fingerprint(),
                      seeds={"random_heads": list(seeds)})
    man.add("table", out)
    man.wall_clock = time.time() - t0
    man.write(Path(str(out) + ".manifest.json"))
    return rows


def cmd_sweep_token_pos(cfg: ExperimentConfig, corpus_path, out,
                        strategies=("first", "last", "full", "topk")) -> list[dict]:
    t0 = time.time()
    mains = _read_corpus(corpus_path)
    model = cfg.model.build()
    train, test = _split(cfg, mains)
    rows = []
    for s in strategies:
        if s not in tr.POSITION_STRATEGIES:
            raise UsageError(f"unknown token strategy {s!r}")
        c = replace(cfg, trace=replace(cfg.trace, strategy=s))
        _, imp, summary, _ = run_probe_pipeline(model, train, test, c)
        rows.append({"strategy": s, "test_subset_accuracy": summary["test_subset_accuracy"],
                     "selected_total": sum(len(v) for v in summary["selected_heads"].values())})
    lines = ["strategy,test_subset_accuracy,selected_total"] + [
        f"{r['strategy']},{r['test_subset_accuracy']:.17g},{r['selected_total']}" for r in rows]
    Path(out).write_text("\n".join(lines) + "\n")
    man = RunManifest("sweep-token-pos", cfg.digest(), corpus_mod.corpus_hash(mains), model.fingerprint(),
                      seeds={"probe": cfg.probe.seed})
    man.add("table", out)
    man.wall_clock = time.time() - t0
    man.write(Path(str(out) + ".manifest.json"))
    return rows


def sha_comparison(model, train, test, cfg: ExperimentConfig, mode: str = "bbox+mask") -> dict:
    """Accuracy and selected-head counts on original vs augmented inputs."""
    out = {}
    imps = {}
    for m in ("none", mode):
        tr_m, te_m = _augment(train, m), _augment(test, m)
        rep = iv.evaluate_with_plan(model, te_m, model_mod.EMPTY_HOOKS)
        _, imps[m], summary, _ = run_probe_pipeline(model, tr_m, te_m, cfg)
        out[m] = {"accuracy": {f.value: rep.per_function[f]["accuracy"] for f in FUNCTIONS if f in rep.per_function},
                  "selected_heads": summary["selected_heads"],
                  "test_subset_accuracy": summary["test_subset_accuracy"]}
    out["head_count_delta"] = {f.value: v for f, v in mx.head_count_delta(imps["none"], imps[mode]).items()}
    return out


def cmd_sha(cfg: ExperimentConfig, corpus_path, out, mode: str = "bbox+mask") -> dict:
    t0 = time.time()
    if mode not in corpus_mod.AUGMENT_MODES or mode == "none":
        raise UsageError(f"augment mode must be one of {[m for m in corpus_mod.AUGMENT_MODES if m != 'none']}")
    mains = _read_corpus(corpus_path)
    model = cfg.model.build()
    train, test = _split(cfg, mains)
    doc = sha_comparison(model, train, test, cfg, mode)
    _write_json(out, doc)
    man = RunManifest("sha", cfg.digest(), corpus_mod.corpus_hash(mains), model.fingerprint(),
                      seeds={"probe": cfg.probe.seed})
    man.add("report", out)
    man.wall_clock = time.time() - t0
    man.write(Path(str(out) + ".manifest.json"))
    return doc


# ---------------------------------------------------------------------------
# heatmaps and reports

_CELL, _GAP, _TITLE = 24, 16, 18
_LOW, _HIGH = (255, 255, 255), (33, 102, 172)


def _ramp(v: float, lo: float, hi: float) -> str:
    t = 0.0 if hi == lo else (v - lo) / (hi - lo)
    rgb = [round(a + t * (b - a)) for a, b in zip(_LOW, _HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def heatmap_svg(imp: pb.ImportanceMatrix) -> str:
    """One L x M grid per function (rows = layers, columns = heads), each with its own min/max legend."""
    L, M = imp.num_layers, imp.heads_per_layer
    block_w = M * _CELL + _GAP
    block_h = _TITLE + L * _CELL + _TITLE + _GAP
    cols = 4
    rows = -(-len(FUNCTIONS) // cols)
    W, H = cols * block_w + _GAP, rows * block_h + _GAP
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'font-family="monospace" font-size="10">']
    for i, f in enumerate(FUNCTIONS):
        x0 = _GAP + (i % cols) * block_w
        y0 = _GAP + (i // cols) * block_h
        grid = imp.grid(f)
        lo, hi = float(grid.min()), float(grid.max())
        out.append(f'<text x="{x0}" y="{y0 + 12}">{f.value}</text>')
        for l in range(L):
            for m in range(M):
                out.append(f'<rect x="{x0 + m * _CELL}" y="{y0 + _TITLE + l * _CELL}" width="{_CELL}" '
                           f'height="{_CELL}" fill="{_ramp(float(grid[l, m]), lo, hi)}" stroke="#999999"/>')
        out.append(f'<text x="{x0}" y="{y0 + _TITLE + L * _CELL + 12}">min {lo:.4g} max {hi:.4g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap(importance_csv, out, fmt: str = "svg") -> Path:
    text = Path(importance_csv).read_text()
    imp = pb.importance_from_csv(text)
    if fmt == "csv":
        Path(out).write_text(pb.importance_to_csv(imp))
    elif fmt == "svg":
        Path(out).write_text(heatmap_svg(imp))
    else:
        raise UsageError(f"unknown heatmap format {fmt!r}")
    return Path(out)


def format_report(report: mx.EvalReport, baseline: mx.EvalReport | None = None) -> str:
    lines = [f"{'function':22s} {'n':>5s} {'accuracy':>9s}" + (f" {'baseline':>9s} {'delta':>7s}" if baseline else "")]
    for f in FUNCTIONS:
        if f not in report.per_function:
            continue
        pf = report.per_function[f]
        row = f"{f.value:22s} {pf['n']:5d} {pf['accuracy']:9.4f}"
        if baseline and f in baseline.per_function:
            b = baseline.per_function[f]["accuracy"]
            row += f" {b:9.4f} {100 * (pf['accuracy'] - b):+7.2f}"
        lines.append(row)
    lines.append(f"{'overall':22s} {report.n:5d} {report.overall:9.4f}")
    if report.affected_rate is not None:
        lines.append(f"affected rate {report.affected_rate:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="headprobe", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON experiment config")
            sp.add_argument("--seed", type=int, help="probe training seed")
            sp.add_argument("--topk", type=int, help="answer tokens averaged per subquestion")
            sp.add_argument("--threshold", type=float, help="sparsity cut as a fraction of each row max")

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-mains", type=int)

    pp = sub.add_parser("pipeline", help="capture, train the probe and attribute heads")
    common(pp)
    pp.add_argument("--corpus", required=True)
    pp.add_argument("--out-dir", required=True)
    pp.add_argument("--augment", default="none", choices=corpus_mod.AUGMENT_MODES)
    pp.add_argument("--model", choices=MODEL_VARIANTS)

    it = sub.add_parser("intervene", help="ablate or steer heads and evaluate")
    it.add_argument("--run-dir", required=True)
    it.add_argument("--out", required=True)
    it.add_argument("--mode", default="ablate", choices=("ablate", "steer", "random"))
    it.add_argument("--heads", default="elbow", choices=("elbow", "explicit", "random"))
    it.add_argument("--function")
    it.add_argument("--explicit", help='heads as "layer,head;layer,head"')
    it.add_argument("--count", type=int)
    it.add_argument("--epsilon", type=float)
    it.add_argument("--alpha", type=float)
    it.add_argument("--seed", type=int, default=0)
    it.add_argument("--baseline")

    st = sub.add_parser("steer", help="steering accuracy table over alpha values")
    st.add_argument("--run-dir", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--function", default="SpatialPerception")
    st.add_argument("--alpha", type=float, action="append", help="repeatable; default 0.1 and -0.1")
    st.add_argument("--explicit")

    sr = sub.add_parser("sweep-ratio", help="accuracy vs number of masked heads")
    sr.add_argument("--run-dir", required=True)
    sr.add_argument("--out", required=True)
    sr.add_argument("--function", default="SpatialPerception")
    sr.add_argument("--kmax", type=int, default=8)

    tp = sub.add_parser("sweep-token-pos", help="probe accuracy per token position strategy")
    common(tp)
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--out", required=True)

    sh = sub.add_parser("sha", help="original vs bbox/mask augmented inputs")
    common(sh)
    sh.add_argument("--corpus", required=True)
    sh.add_argument("--out", required=True)
    sh.add_argument("--mode", default="bbox+mask")
    sh.add_argument("--model", choices=MODEL_VARIANTS, default="detuned")

    hm = sub.add_parser("heatmap", help="render an importance CSV")
    hm.add_argument("--importance", required=True)
    hm.add_argument("--out", required=True)
    hm.add_argument("--format", default="svg", choices=("csv", "svg"))

    rp = sub.add_parser("report", help="print an evaluation report as a table")
    rp.add_argument("report")
    rp.add_argument("--baseline")
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, probe=replace(cfg.probe, seed=args.seed))
    if getattr(args, "topk", None) is not None:
        if args.topk < 1:
            raise UsageError("--topk must be at least 1")
        cfg = replace(cfg, trace=replace(cfg.trace, topk=args.topk))
    if getattr(args, "threshold", None) is not None:
        if args.threshold < 0:
            raise UsageError("--threshold must be nonnegative")
        cfg = replace(cfg, intervention=replace(cfg.intervention, threshold=args.threshold))
    if getattr(args, "model", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, variant=args.model))
    return cfg


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "gen-corpus":
        cfg = load_config(args.config)
        if args.num_mains is not None:
            cfg = replace(cfg, corpus=replace(cfg.corpus, num_mains=args.num_mains))
        man = cmd_gen_corpus(cfg, args.out, args.seed)
        print(f"wrote {args.out} ({man.corpus_hash})")
    elif cmd == "pipeline":
        cfg = _apply_overrides(load_config(args.config), args)
        res = cmd_pipeline(cfg, args.corpus, args.out_dir, args.augment)
        s = res.summary
        print(f"probe test subset accuracy {s['test_subset_accuracy']:.4f}")
        for f, heads in s["selected_heads"].items():
            print(f"  {f:22s} {heads}")
    elif cmd == "intervene":
        rep = cmd_intervene(args.run_dir, args.out, mode=args.mode, heads=args.heads, function=args.function,
                            explicit=args.explicit, count=args.count, epsilon=args.epsilon, alpha=args.alpha,
                            seed=args.seed, baseline_path=args.baseline)
        print(format_report(rep), end="")
    elif cmd == "steer":
        rows = cmd_steer(args.run_dir, args.out, function=args.function,
                         alphas=tuple(args.alpha) if args.alpha else (0.1, -0.1), explicit=args.explicit)
        for r in rows:
            print(f"alpha {r['alpha']:+.3f}  accuracy {r['accuracy']:.4f}")
    elif cmd == "sweep-ratio":
        rows = cmd_sweep_ratio(args.run_dir, args.out, function=args.function, ks=range(0, args.kmax + 1))
        for r in rows:
            print(f"K={r['k']:2d} cognitive {r['cognitive']:.4f} random {r['random_mean']:.4f}")
    elif cmd == "sweep-token-pos":
        cfg = _apply_overrides(load_config(args.config), args)
        for r in cmd_sweep_token_pos(cfg, args.corpus, args.out):
            print(f"{r['strategy']:6s} {r['test_subset_accuracy']:.4f}")
    elif cmd == "sha":
        cfg = _apply_overrides(load_config(args.config), args)
        doc = cmd_sha(cfg, args.corpus, args.out, args.mode)
        print(json.dumps(doc["head_count_delta"], sort_keys=True))
    elif cmd == "heatmap":
        emit_heatmap(args.importance, args.out, args.format)
    elif cmd == "report":
        rep = mx.EvalReport.from_json(Path(args.report).read_text())
        base = mx.EvalReport.from_json(Path(args.baseline).read_text()) if args.baseline else None
        print(format_report(rep, base), end="")


DATA_ERRORS = (ConfigError, corpus_mod.CorpusError, tr.TraceError, pb.ProbeError, iv.InterventionError,
               mx.MetricsError, model_mod.ModelError, OSError, json.JSONDecodeError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"headprobe: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pb.DivergenceError as exc:
        print(f"headprobe: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DATA_ERRORS as exc:
        print(f"headprobe: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
