"""Synthetic grid-world scenes with main questions decomposed into labelled steps."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import vocab as V
from .vocab import FunctionLabel

F = FunctionLabel

SCHEMA_VERSION = 1
DEFAULT_MAINS = 1142
DEFAULT_SUBQAFS = 3759
AUGMENT_MODES = ("none", "bbox", "mask", "bbox+mask")

TEMPLATES = ("facing", "relative", "counting", "size", "recall", "extract")
# weights keep every function label above 5% of generated steps
DEFAULT_TEMPLATE_WEIGHTS = {"facing": 1.0, "relative": 1.0, "counting": 2.0,
                            "size": 1.0, "recall": 2.0, "extract": 1.5}
TEMPLATE_STEPS = {"facing": 5, "relative": 5, "counting": 3, "size": 4, "recall": 3, "extract": 3}


class CorpusError(ValueError):
    pass


class TemplateError(CorpusError):
    pass


@dataclass(frozen=True)
class Obj:
    kind: str
    color: str
    size: str
    orientation: str
    row: int
    col: int


@dataclass(frozen=True)
class Scene:
    grid_size: int
    objects: tuple[Obj, ...]
    facts: tuple[tuple[str, str], ...] = ()

    def at(self, row: int, col: int) -> Obj | None:
        for o in self.objects:
            if (o.row, o.col) == (row, col):
                return o
        return None


@dataclass(frozen=True)
class SceneConfig:
    grid_size: int = 4
    num_objects: int = 5
    num_facts: int = 2


@dataclass(frozen=True)
class SubQAF:
    question_text: tuple[str, ...]
    answer: tuple[str, ...]
    functions: frozenset
    step_index: int

    def __post_init__(self):
        if not self.functions:
            raise CorpusError("a subquestion needs at least one function label")


@dataclass(frozen=True)
class MainQA:
    example_id: int
    scene: Scene
    main_question: tuple[str, ...]
    main_answer: tuple[str, ...]
    subqafs: tuple[SubQAF, ...]
    template_id: str
    answer_token_importance: tuple[tuple[int, ...], ...]
    named: tuple[int, ...] = ()       # indices of objects the main question names
    augment: str = "none"


# ---------------------------------------------------------------------------
# scenes


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    n = config.grid_size
    if config.num_objects > n * n:
        raise CorpusError(f"cannot place {config.num_objects} objects on a {n}x{n} grid")
    if config.num_facts > len(V.KINDS):
        raise CorpusError(f"at most {len(V.KINDS)} facts")
    rng = np.random.default_rng(seed)
    cells = rng.choice(n * n, size=config.num_objects, replace=False)
    objs = []
    for c in sorted(int(c) for c in cells):
        objs.append(Obj(
            kind=V.KINDS[rng.integers(len(V.KINDS))],
            color=V.COLORS[rng.integers(len(V.COLORS))],
            size=V.SIZES[rng.integers(len(V.SIZES))],
            orientation=V.ORIENTATIONS[rng.integers(len(V.ORIENTATIONS))],
            row=c // n, col=c % n,
        ))
    keys = rng.choice(len(V.KINDS), size=config.num_facts, replace=False)
    facts = tuple((V.KINDS[int(k)], V.PAYLOADS[rng.integers(len(V.PAYLOADS))]) for k in sorted(keys))
    return Scene(n, tuple(objs), facts)


# ---------------------------------------------------------------------------
# analytic answers


def relative_direction(a: Obj, b: Obj) -> str:
    """Where ``a`` sits relative to ``b``; columns take precedence over rows."""
    if a.col < b.col:
        return "left-of"
    if a.col > b.col:
        return "right-of"
    return "above" if a.row < b.row else "below"


def faces_toward(a: Obj, b: Obj) -> bool:
    return a.orientation == V.FACING_TOWARD[relative_direction(a, b)]


def count_color(scene: Scene, color: str) -> int:
    return sum(o.color == color for o in scene.objects)


def _unique_kind_objects(scene: Scene) -> list[int]:
    kinds = [o.kind for o in scene.objects]
    return [i for i, k in enumerate(kinds) if kinds.count(k) == 1]


def _phrase(rng, intent: str, token: str) -> tuple[str, ...]:
    return V.FILLERS[int(rng.integers(len(V.FILLERS)))] + V.INTENT_WORDS[intent] + (token,)


def _loc(o: Obj) -> str:
    return f"{o.row},{o.col}"


def compose_qa(scene: Scene, template_id: str, seed: int, example_id: int | None = None) -> MainQA:
    if template_id not in TEMPLATES:
        raise TemplateError(f"unknown template {template_id!r}")
    rng = np.random.default_rng(seed)
    objs = scene.objects
    steps: list[tuple[tuple[str, ...], tuple[str, ...], set]] = []

    def _q(intent, token):
        return _phrase(rng, intent, token)

    def pick(pool, k):
        if len(pool) < k:
            raise TemplateError(f"template {template_id!r} needs {k} suitable objects, scene has {len(pool)}")
        return [pool[int(i)] for i in rng.choice(len(pool), size=k, replace=False)]

    if template_id in ("facing", "relative"):
        ia, ib = pick(_unique_kind_objects(scene), 2)
        a, b = objs[ia], objs[ib]
        named = (ia, ib)
        rd = relative_direction(a, b)
        steps.append((_q("object", f"object@{_loc(a)}"), (a.kind,), {F.HighLevelVisual}))
        if template_id == "facing":
            steps.append((_q("rel", f"rel:{a.kind},{b.kind}"), (rd,), {F.SpatialPerception, F.HighLevelVisual}))
            steps.append((_q("facing", f"facing@{_loc(a)}"), (a.orientation,),
                          {F.SpatialPerception, F.HighLevelVisual}))
            toward = faces_toward(a, b)
            steps.append((_q("toward", f"toward:{a.kind},{b.kind}"), ("yes" if toward else "no",),
                          {F.RelationalReasoning}))
            main_q = ("is", "the", a.kind, "facing", "the", b.kind)
            truth = toward
        else:
            asked = V.RELDIRS[rng.integers(len(V.RELDIRS))]
            steps.append((_q("object", f"object@{_loc(b)}"), (b.kind,), {F.HighLevelVisual}))
            steps.append((_q("rel", f"rel:{a.kind},{b.kind}"), (rd,), {F.SpatialPerception, F.HighLevelVisual}))
            steps.append((_q("isrel", f"isrel:{asked}"), ("yes" if rd == asked else "no",),
                          {F.RelationalReasoning}))
            main_q = ("is", "the", a.kind, asked, "the", b.kind)
            truth = rd == asked
        steps.append((_q("judge", "judge?"), ("true" if truth else "false",), {F.DecisionMaking}))
        main_a = ("true" if truth else "false",)
    elif template_id == "counting":
        (ix,) = pick(list(range(len(objs))), 1)
        x = objs[ix]
        named = (ix,)
        n = count_color(scene, x.color)
        steps.append((_q("object", f"object@{_loc(x)}"), (x.kind,), {F.HighLevelVisual}))
        steps.append((_q("color", f"color@{_loc(x)}"), (x.color,), {F.LowLevelVisual}))
        steps.append((_q("count", f"count:{x.color}"), (V.count_token(n),), {F.MathReasoning}))
        main_q = ("how", "many", x.color, "objects")
        main_a = (V.count_token(n),)
    elif template_id == "size":
        ia, ib = pick(list(range(len(objs))), 2)
        a, b = objs[ia], objs[ib]
        named = (ia, ib)
        same = a.size == b.size
        steps.append((_q("size", f"size@{_loc(a)}"), (a.size,), {F.LowLevelVisual}))
        steps.append((_q("size", f"size@{_loc(b)}"), (b.size,), {F.LowLevelVisual}))
        steps.append((_q("same", "same-size?"), ("yes" if same else "no",), {F.RelationalReasoning}))
        steps.append((_q("judge", "judge?"), ("true" if same else "false",), {F.DecisionMaking}))
        main_q = ("are", "the", a.kind, "and", "the", b.kind, "the", "same", "size")
        main_a = ("true" if same else "false",)
    elif template_id == "recall":
        known = {k for k, _ in scene.facts}
        (ix,) = pick([i for i, o in enumerate(objs) if o.kind in known], 1)
        x = objs[ix]
        named = (ix,)
        payload = dict(scene.facts)[x.kind]
        steps.append((_q("object", f"object@{_loc(x)}"), (x.kind,), {F.HighLevelVisual}))
        steps.append((_q("recall", f"recall:{x.kind}"), (payload,), {F.KnowledgeRecall}))
        steps.append((_q("extract", "extract:2"), (payload,), {F.InfoExtraction}))
        main_q = ("what", "is", "known", "about", "the", "object", "at", _loc(x))
        main_a = (payload,)
    else:  # extract
        ix, iy = pick(list(range(len(objs))), 2)
        x, y = objs[ix], objs[iy]
        named = (ix,)
        steps.append((_q("color", f"color@{_loc(x)}"), (x.color,), {F.LowLevelVisual}))
        steps.append((_q("object", f"object@{_loc(y)}"), (y.kind,), {F.HighLevelVisual}))
        steps.append((_q("extract", "extract:1"), (x.color,), {F.InfoExtraction}))
        main_q = ("what", "color", "was", "the", "object", "at", _loc(x))
        main_a = (x.color,)

    subqafs = tuple(SubQAF(q, a, frozenset(fs), i) for i, (q, a, fs) in enumerate(steps))
    # answer payload first, end-of-answer marker last
    importance = tuple(tuple(range(len(s.answer) + 1)) for s in subqafs)
    return MainQA(example_id if example_id is not None else seed, scene, main_q, main_a, subqafs,
                  template_id, importance, tuple(named))


def augment_spatial_cues(main: MainQA, mode: str) -> MainQA:
    """Location markers for named objects (bbox) and/or hidden object identity on cells (mask)."""
    if mode not in AUGMENT_MODES:
        raise CorpusError(f"unknown augmentation mode {mode!r}")
    return replace(main, augment=mode)


def scene_tokens(main: MainQA) -> list[str]:
    mode = main.augment
    out = [V.fact_token(k, p) for k, p in main.scene.facts]
    for o in sorted(main.scene.objects, key=lambda o: (o.row, o.col)):
        kind = V.MASKED if "mask" in mode else o.kind
        out.append(V.cell_token(kind, o.color, o.size, o.orientation, o.row, o.col))
    if "bbox" in mode:
        for i in main.named:
            o = main.scene.objects[i]
            out.append(V.marker_token(o.kind, o.row, o.col))
    return out


def render_example(main: MainQA, step: int) -> list[str]:
    """[bos][facts][cells][markers][context Q, step marker, A ...][question, query token]."""
    if not 0 <= step < len(main.subqafs):
        raise CorpusError(f"step {step} out of range for {len(main.subqafs)} subquestions")
    toks = [V.BOS] + scene_tokens(main)
    for prev in main.subqafs[:step]:
        toks.extend(prev.question_text)
        toks.append(V.step_token(prev.step_index + 1))
        toks.extend(prev.answer)
    toks.extend(main.subqafs[step].question_text)
    return toks


# ---------------------------------------------------------------------------
# corpora


@dataclass(frozen=True)
class CorpusConfig:
    num_mains: int = DEFAULT_MAINS
    grid_size: int = 4
    min_objects: int = 3
    max_objects: int = 7
    num_facts: int = 2
    template_weights: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATE_WEIGHTS))
    target_subqafs: int | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _main_seed(seed: int, i: int, attempt: int) -> int:
    ss = np.random.SeedSequence([seed, i, attempt])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_corpus(config: CorpusConfig = CorpusConfig(), seed: int = 0) -> list[MainQA]:
    """Deterministic corpus of ``num_mains`` main questions.

    With ``target_subqafs`` set, templates are chosen so the total step count
    lands exactly on the target (when the target is reachable).
    """
    names = [t for t in TEMPLATES if config.template_weights.get(t, 0) > 0]
    if not names:
        raise CorpusError("template_weights selects no template")
    w = np.array([config.template_weights[t] for t in names], dtype=float)
    w /= w.sum()
    lo = min(TEMPLATE_STEPS[t] for t in names)
    hi = max(TEMPLATE_STEPS[t] for t in names)
    target = config.target_subqafs
    if target is not None and not lo * config.num_mains <= target <= hi * config.num_mains:
        raise CorpusError(f"target of {target} subquestions unreachable with {config.num_mains} mains")
    out = []
    remaining = target
    for i in range(config.num_mains):
        for attempt in range(1000):
            s = _main_seed(seed, i, attempt)
            rng = np.random.default_rng(s)
            allowed = names
            if remaining is not None:
                left = config.num_mains - i - 1
                allowed = [t for t in names
                           if lo * left <= remaining - TEMPLATE_STEPS[t] <= hi * left]
            ww = np.array([config.template_weights[t] for t in allowed], dtype=float)
            tpl = allowed[rng.choice(len(allowed), p=ww / ww.sum())]
            n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
            scene = generate_scene(s, SceneConfig(config.grid_size, n_obj, config.num_facts))
            try:
                main = compose_qa(scene, tpl, s + 1, example_id=i)
            except TemplateError:
                continue
            break
        else:  # pragma: no cover - needs a pathological config
            raise CorpusError(f"could not build main question {i}")
        out.append(main)
        if remaining is not None:
            remaining -= len(main.subqafs)
    return out


def split_corpus(mains, test_fraction: float = 0.2, seed: int = 0):
    """Split by main question, never by subquestion."""
    ids = sorted(m.example_id for m in mains)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test_ids = {ids[int(p)] for p in perm[:n_test]}
    train = [m for m in mains if m.example_id not in test_ids]
    test = [m for m in mains if m.example_id in test_ids]
    return train, test


def iter_steps(mains):
    for m in mains:
        for k in range(len(m.subqafs)):
            yield m, k


# ---------------------------------------------------------------------------
# serialization


def _main_to_record(m: MainQA) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": m.example_id,
        "scene": {
            "grid_size": m.scene.grid_size,
            "objects": [[o.kind, o.color, o.size, o.orientation, o.row, o.col] for o in m.scene.objects],
            "facts": [list(f) for f in m.scene.facts],
        },
        "template_id": m.template_id,
        "main_q": list(m.main_question),
        "main_a": list(m.main_answer),
        "subqafs": [{"q": list(s.question_text), "a": list(s.answer),
                     "f": sorted(f.value for f in s.functions), "step": s.step_index}
                    for s in m.subqafs],
        "importance": [list(r) for r in m.answer_token_importance],
        "named": list(m.named),
        "augment": m.augment,
    }


def _record_to_main(r: dict) -> MainQA:
    if r.get("schema_version") != SCHEMA_VERSION:
        raise CorpusError(f"unsupported schema_version {r.get('schema_version')!r}")
    sc = r["scene"]
    scene = Scene(int(sc["grid_size"]),
                  tuple(Obj(k, c, s, o, int(row), int(col)) for k, c, s, o, row, col in sc["objects"]),
                  tuple((k, p) for k, p in sc["facts"]))
    subs = tuple(SubQAF(tuple(s["q"]), tuple(s["a"]), frozenset(FunctionLabel.parse(f) for f in s["f"]),
                        int(s["step"])) for s in r["subqafs"])
    return MainQA(int(r["id"]), scene, tuple(r["main_q"]), tuple(r["main_a"]), subs, r["template_id"],
                  tuple(tuple(x) for x in r["importance"]), tuple(r.get("named", ())),
                  r.get("augment", "none"))


def dumps_corpus(mains) -> str:
    return "".join(json.dumps(_main_to_record(m), sort_keys=True) + "\n" for m in mains)


def write_corpus(mains, path) -> None:
    Path(path).write_text(dumps_corpus(mains), encoding="utf-8")


def read_corpus(path) -> list[MainQA]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(_record_to_main(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusError(f"line {lineno}: malformed record ({e})") from None
    return out


def corpus_hash(mains) -> str:
    return hashlib.sha256(dumps_corpus(mains).encode()).hexdigest()[:16]
