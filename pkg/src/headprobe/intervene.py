"""Negative (scale by epsilon) and positive (shift along a direction) head interventions."""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .metrics import EvalReport, Outcome, build_report
from .model import HookSet, Model, ModelConfig, generate, strip_eoa

DEFAULT_EPSILON = 1e-3
DEFAULT_ALPHA = 0.1
_DIR_HEADER = struct.Struct("<4sIII")      # magic, version, head count, d
DIR_MAGIC = b"HSD1"


class InterventionError(ValueError):
    pass


Head = tuple[int, int]


def _norm_heads(heads) -> tuple[Head, ...]:
    return tuple(sorted({(int(l), int(m)) for l, m in heads}))


def _check_heads(heads, config: ModelConfig | None):
    if config is None:
        return
    for l, m in heads:
        if not (0 <= l < config.num_layers and 0 <= m < config.heads_per_layer):
            raise InterventionError(f"head ({l}, {m}) outside a {config.num_layers}x{config.heads_per_layer} model")


@dataclass(frozen=True)
class AblationPlan:
    heads: tuple[Head, ...]
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "heads", _norm_heads(self.heads))
        if not 0 < self.epsilon <= 1:
            raise InterventionError("epsilon must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"kind": "ablate", "heads": [list(h) for h in self.heads], "epsilon": self.epsilon}


def ablation_hooks(plan: AblationPlan, config: ModelConfig | None = None) -> HookSet:
    config = config or ModelConfig()
    _check_heads(plan.heads, config)
    zero = np.zeros(config.embed_dim)
    return HookSet({h: (plan.epsilon, zero) for h in plan.heads})


def random_heads(count: int, seed: int, exclude=(), *, num_layers: int = 4, heads_per_layer: int = 8) -> tuple[Head, ...]:
    excl = set(_norm_heads(exclude))
    pool = [(l, m) for l in range(num_layers) for m in range(heads_per_layer) if (l, m) not in excl]
    if count < 0 or count > len(pool):
        raise InterventionError(f"cannot draw {count} heads from {len(pool)} available")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(pool), size=count, replace=False)
    return _norm_heads(pool[int(i)] for i in pick)


# ---------------------------------------------------------------------------
# steering


@dataclass(frozen=True)
class SteeringDirection:
    direction: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise InterventionError("sigma must be nonnegative")
        if not np.all(np.isfinite(self.direction)):
            raise InterventionError("direction must be finite")


@dataclass(frozen=True)
class SteeringPlan:
    directions: dict = field(default_factory=dict)    # (layer, head) -> SteeringDirection
    alpha: float = DEFAULT_ALPHA

    @property
    def heads(self) -> tuple[Head, ...]:
        return _norm_heads(self.directions)

    def with_alpha(self, alpha: float) -> "SteeringPlan":
        return SteeringPlan(self.directions, alpha)

    def to_dict(self, direction_file: str | None = None) -> dict:
        return {"kind": "steer", "alpha": self.alpha, "heads": [list(h) for h in self.heads],
                "sigma": [self.directions[h].sigma for h in self.heads], "direction_file": direction_file}


def steering_direction(correct, incorrect) -> np.ndarray:
    if len(correct) == 0:
        raise InterventionError("no correctly answered activations to average")
    if len(incorrect) == 0:
        raise InterventionError("no incorrectly answered activations to average")
    return np.mean(np.asarray(correct, dtype=np.float64), axis=0) - np.mean(np.asarray(incorrect, dtype=np.float64), axis=0)


def sigma_along(activations, direction) -> float:
    acts = np.asarray(activations, dtype=np.float64)
    if acts.size == 0:
        raise InterventionError("no activations")
    norm = float(np.linalg.norm(direction))
    if norm == 0:
        warnings.warn("zero steering direction; sigma set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    proj = acts @ (np.asarray(direction, dtype=np.float64) / norm)
    return float(np.std(proj))


def steering_hooks(plan: SteeringPlan, config: ModelConfig | None = None) -> HookSet:
    _check_heads(plan.heads, config)
    return HookSet({h: (1.0, plan.alpha * sd.sigma * sd.direction) for h, sd in plan.directions.items()})


def steering_plan_from_captures(captures, heads, function, alpha: float = DEFAULT_ALPHA) -> SteeringPlan:
    """Directions from one function's correct vs incorrect captures, per head."""
    rel = [c for c in captures if function in c.labels]
    good = [c for c in rel if c.correct]
    bad = [c for c in rel if not c.correct]
    dirs = {}
    for l, m in _norm_heads(heads):
        acts_good = [c.head_means[l, m] for c in good]
        acts_bad = [c.head_means[l, m] for c in bad]
        # rounded to the float32 storage precision so saved plans reload exactly
        direction = steering_direction(acts_good, acts_bad).astype(np.float32).astype(np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sigma = sigma_along(acts_good + acts_bad, direction)
        dirs[(l, m)] = SteeringDirection(direction, sigma)
    return SteeringPlan(dirs, alpha)


def write_directions(plan: SteeringPlan, path) -> None:
    heads = plan.heads
    d = len(plan.directions[heads[0]].direction) if heads else 0
    with open(path, "wb") as fh:
        fh.write(_DIR_HEADER.pack(DIR_MAGIC, 1, len(heads), d))
        for h in heads:
            fh.write(struct.pack("<II", *h))
            fh.write(np.asarray(plan.directions[h].direction, dtype="<f4").tobytes())


def read_directions(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < _DIR_HEADER.size:
        raise InterventionError("direction file shorter than its header")
    magic, _, count, d = _DIR_HEADER.unpack_from(raw)
    if magic != DIR_MAGIC:
        raise InterventionError(f"bad direction file magic {magic!r}")
    if len(raw) != _DIR_HEADER.size + count * (8 + 4 * d):
        raise InterventionError("direction file length does not match its header")
    off, out = _DIR_HEADER.size, {}
    for _ in range(count):
        l, m = struct.unpack_from("<II", raw, off)
        off += 8
        out[(l, m)] = np.frombuffer(raw, dtype="<f4", count=d, offset=off).astype(np.float64)
        off += 4 * d
    return out


def plan_from_dict(doc: dict, base_dir=".") -> AblationPlan | SteeringPlan:
    kind = doc.get("kind")
    if kind == "ablate":
        return AblationPlan(tuple(tuple(h) for h in doc["heads"]), float(doc["epsilon"]))
    if kind == "steer":
        vecs = read_directions(Path(base_dir) / doc["direction_file"])
        heads = [tuple(h) for h in doc["heads"]]
        return SteeringPlan({h: SteeringDirection(vecs[h], float(s)) for h, s in zip(heads, doc["sigma"])},
                            float(doc["alpha"]))
    raise InterventionError(f"unknown plan kind {kind!r}")


def plan_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------


def run_outcomes(model: Model, mains, hooks: HookSet, only=None) -> list[Outcome]:
    """Generate every subquestion (or only those labelled ``only``) under ``hooks``."""
    outs = []
    for main in sorted(mains, key=lambda m: m.example_id):
        for step, sub in enumerate(main.subqafs):
            if only is not None and only not in sub.functions:
                continue
            ans = tuple(strip_eoa(generate(model, corpus_mod.render_example(main, step), hooks)))
            outs.append(Outcome(main.example_id, step, sub.functions, ans, ans == sub.answer))
    return outs


def evaluate_with_plan(model: Model, mains, hooks: HookSet, baseline: EvalReport | None = None,
                       metadata: dict | None = None, *, only=None) -> EvalReport:
    if not mains:
        raise InterventionError("evaluation split is empty")
    hooks.validate(model.config)
    outs = run_outcomes(model, mains, hooks, only)
    if not outs:
        raise InterventionError(f"no {only.value} subquestions in the evaluation split")
    return build_report(outs, baseline, metadata)
