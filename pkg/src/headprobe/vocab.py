"""Token inventory and residual-stream channel layout shared by the corpus and the model.

Every token is a symbolic bundle of features.  The model embeds a token by
writing those features into named, disjoint channel groups; the corpus renders
scenes and questions into the same token strings.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

KINDS = ("dog", "horse", "cat", "car", "bus")
CATEGORIES = ("animal", "vehicle")
KIND_CATEGORY = {"dog": "animal", "horse": "animal", "cat": "animal", "car": "vehicle", "bus": "vehicle"}
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "medium", "large")
ORIENTATIONS = ("up", "down", "left", "right")
RELDIRS = ("left-of", "right-of", "above", "below")
PAYLOADS = ("loyal", "swift", "wild", "noisy", "heavy")
YESNO = ("yes", "no")
VERDICTS = ("true", "false")
MAX_STEPS = 6

# orientation that points from A toward B when A sits at the given side of B
FACING_TOWARD = {"left-of": "right", "right-of": "left", "above": "down", "below": "up"}

BOS = "<bos>"
EOA = "<eoa>"
NULL = "none"
MASKED = "?"

INTENTS = (
    "color", "size", "object", "rel", "facing", "toward",
    "isrel", "same", "judge", "count", "recall", "extract",
)

# decorative words that precede each query token
INTENT_WORDS = {
    "color": ("what", "color"),
    "size": ("what", "size"),
    "object": ("which", "object"),
    "rel": ("where", "relative"),
    "facing": ("which", "way"),
    "toward": ("facing", "toward"),
    "isrel": ("is", "it"),
    "same": ("same", "size"),
    "judge": ("statement", "verdict"),
    "count": ("how", "many"),
    "recall": ("what", "known"),
    "extract": ("recall", "step"),
}

# optional lead-ins; varied phrasing makes prompt lengths differ within a template
FILLERS = ((), ("now",), ("next", "tell"), ("then", "please", "tell"))


class FunctionLabel(enum.Enum):
    SpatialPerception = "SpatialPerception"
    RelationalReasoning = "RelationalReasoning"
    LowLevelVisual = "LowLevelVisual"
    HighLevelVisual = "HighLevelVisual"
    InfoExtraction = "InfoExtraction"
    KnowledgeRecall = "KnowledgeRecall"
    MathReasoning = "MathReasoning"
    DecisionMaking = "DecisionMaking"

    @property
    def index(self) -> int:
        return FUNCTIONS.index(self)

    @classmethod
    def parse(cls, name: str) -> "FunctionLabel":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown function label {name!r}") from None


FUNCTIONS = tuple(FunctionLabel)
NUM_FUNCTIONS = len(FUNCTIONS)


def labels_to_mask(labels) -> int:
    mask = 0
    for lab in labels:
        mask |= 1 << lab.index
    return mask


def mask_to_labels(mask: int) -> frozenset:
    return frozenset(f for f in FUNCTIONS if mask >> f.index & 1)


def cell_token(kind, color, size, ori, row, col) -> str:
    return f"cell:{kind}/{color}/{size}/{ori}@{row},{col}"


def marker_token(kind, row, col) -> str:
    return f"box:{kind}@{row},{col}"


def fact_token(kind, payload) -> str:
    return f"fact:{kind}={payload}"


def step_token(k: int) -> str:
    return f"S{k}"


def count_token(n: int) -> str:
    return str(n)


# ---------------------------------------------------------------------------
# channel layout


def layout_groups(grid_size: int) -> list[tuple[str, int]]:
    n = grid_size
    return [
        ("const", 1), ("is_bos", 1), ("is_cell", 1), ("is_fact", 1), ("is_word", 1),
        ("is_query", 1), ("is_step", 1), ("is_answer", 1), ("is_marker", 1),
        # scene cells (markers reuse kind/row/col)
        ("cell_kind", len(KINDS)), ("cell_cat", len(CATEGORIES)), ("cell_color", len(COLORS)),
        ("cell_size", len(SIZES)), ("cell_ori", len(ORIENTATIONS)),
        ("cell_row", n), ("cell_col", n),
        ("segment", MAX_STEPS),
        ("fact_key", len(KINDS)), ("fact_payload", len(PAYLOADS)),
        # context answers
        ("ans_color", len(COLORS)), ("ans_kind", len(KINDS)), ("ans_payload", len(PAYLOADS)),
        ("ans_size", len(SIZES)), ("ans_reldir", len(RELDIRS)), ("ans_ori", len(ORIENTATIONS)),
        ("ans_yesno", 2), ("ans_operand", 1), ("ans_verdict", 1),
        # query-token arguments
        ("arg_row", n), ("arg_col", n), ("arg_kind_a", len(KINDS)), ("arg_kind_b", len(KINDS)),
        ("arg_color", len(COLORS)), ("arg_step", MAX_STEPS), ("arg_rel", len(RELDIRS)),
        ("intent", len(INTENTS)),
        # scratch written by heads
        ("scr_lowlevel", len(COLORS) + len(SIZES)),
        ("scr_object", len(KINDS)),
        ("scr_ground", 2 * n),
        ("scr_locate", 2 * n),
        ("scr_recall", len(PAYLOADS)),
        ("scr_extract", len(COLORS) + len(KINDS) + len(PAYLOADS)),
        ("scr_count", 1),
        ("scr_orient", len(ORIENTATIONS)),
        ("scr_relop", len(RELDIRS) + len(ORIENTATIONS) + len(SIZES)),
        ("scr_verdict", 2),
        # scratch written by feedforward logic
        ("ffn_reldir", len(RELDIRS)),
        ("ffn_count", n * n),
        ("ffn_yesno", 2),
    ]


@dataclass(frozen=True)
class ChannelLayout:
    groups: dict[str, tuple[int, int]]
    width: int

    @classmethod
    def build(cls, grid_size: int, embed_dim: int) -> "ChannelLayout":
        groups = {}
        start = 0
        for name, w in layout_groups(grid_size):
            groups[name] = (start, w)
            start += w
        if start > embed_dim:
            raise ValueError(f"channel layout needs {start} channels but embed_dim is {embed_dim}")
        return cls(groups, start)

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def slice(self, name: str) -> slice:
        try:
            s, w = self.groups[name]
        except KeyError:
            raise KeyError(f"unknown channel group {name!r}") from None
        return slice(s, s + w)

    def size(self, name: str) -> int:
        return self.groups[name][1]

    def at(self, name: str, i: int = 0) -> int:
        s, w = self.groups[name]
        if not 0 <= i < w:
            raise IndexError(f"{name}[{i}] out of range")
        return s + i

    def span(self, names) -> list[int]:
        """Channel indices of several groups, concatenated in order.

        Accepts a list of names or a single ``"a+b"`` selector string.
        """
        if isinstance(names, str):
            names = names.split("+")
        out: list[int] = []
        for name in names:
            out.extend(range(*self.slice(name).indices(10**9)))
        return out


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    grid_size: int
    tokens: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)
    features: dict[str, dict[tuple[str, int], float]] = field(default_factory=dict)
    answer_type: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, toks) -> list[int]:
        out = []
        for t in toks:
            if t not in self.index:
                raise KeyError(f"unknown token {t!r}")
            out.append(self.index[t])
        return out

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def _add(self, tok: str, feats: dict, answer_type: str | None = None):
        if tok in self.index:
            raise ValueError(f"duplicate token {tok!r}")
        self.index[tok] = len(self.tokens)
        self.tokens.append(tok)
        self.features[tok] = {("const", 0): 1.0, **feats}
        if answer_type is not None:
            self.answer_type[tok] = answer_type

    @classmethod
    def build(cls, grid_size: int = 4) -> "Vocab":
        v = cls(grid_size)
        n = grid_size

        def kind_feats(kind):
            if kind == MASKED:
                return {}
            return {("cell_kind", KINDS.index(kind)): 1.0,
                    ("cell_cat", CATEGORIES.index(KIND_CATEGORY[kind])): 1.0}

        def ans(group, i, extra=None):
            f = {("is_answer", 0): 1.0, (group, i): 1.0}
            f.update(extra or {})
            return f

        # answers first so greedy ties fall on them deterministically
        v._add(NULL, {("is_answer", 0): 1.0}, "null")
        for i, c in enumerate(COLORS):
            v._add(c, ans("ans_color", i), "color")
        for i, s in enumerate(SIZES):
            v._add(s, ans("ans_size", i, {("ans_operand", 0): 1.0}), "size")
        for i, k in enumerate(KINDS):
            v._add(k, ans("ans_kind", i), "kind")
        for i, r in enumerate(RELDIRS):
            v._add(r, ans("ans_reldir", i, {("ans_operand", 0): 1.0}), "reldir")
        for i, o in enumerate(ORIENTATIONS):
            v._add(o, ans("ans_ori", i, {("ans_operand", 0): 1.0}), "ori")
        for i, y in enumerate(YESNO):
            v._add(y, ans("ans_yesno", i, {("ans_verdict", 0): 1.0}), "yesno")
        for t in VERDICTS:
            v._add(t, {("is_answer", 0): 1.0}, "verdict")
        for cnt in range(1, n * n + 1):
            v._add(count_token(cnt), {("is_answer", 0): 1.0}, "count")
        for i, p in enumerate(PAYLOADS):
            v._add(p, ans("ans_payload", i), "payload")
        v._add(EOA, {}, "eoa")

        v._add(BOS, {("is_bos", 0): 1.0})
        for k in range(1, MAX_STEPS + 1):
            v._add(step_token(k), {("is_step", 0): 1.0})
        words = sorted({w for ws in INTENT_WORDS.values() for w in ws} | {w for f in FILLERS for w in f})
        for w in words:
            v._add(w, {("is_word", 0): 1.0})

        for kind in KINDS + (MASKED,):
            for ci, color in enumerate(COLORS):
                for si, size in enumerate(SIZES):
                    for oi, ori in enumerate(ORIENTATIONS):
                        for r in range(n):
                            for c in range(n):
                                f = {("is_cell", 0): 1.0, ("cell_color", ci): 1.0,
                                     ("cell_size", si): 1.0, ("cell_ori", oi): 1.0,
                                     ("cell_row", r): 1.0, ("cell_col", c): 1.0}
                                f.update(kind_feats(kind))
                                v._add(cell_token(kind, color, size, ori, r, c), f)
        for kind in KINDS:
            for r in range(n):
                for c in range(n):
                    f = {("is_marker", 0): 1.0, ("cell_row", r): 1.0, ("cell_col", c): 1.0}
                    f.update(kind_feats(kind))
                    v._add(marker_token(kind, r, c), f)
        for ki, kind in enumerate(KINDS):
            for pi, p in enumerate(PAYLOADS):
                v._add(fact_token(kind, p), {("is_fact", 0): 1.0, ("fact_key", ki): 1.0,
                                             ("fact_payload", pi): 1.0})

        def query(tok, intent, args):
            f = {("is_query", 0): 1.0, ("intent", INTENTS.index(intent)): 1.0}
            f.update({a: 1.0 for a in args})
            v._add(tok, f)

        for r in range(n):
            for c in range(n):
                rc = [("arg_row", r), ("arg_col", c)]
                query(f"color@{r},{c}", "color", rc)
                query(f"size@{r},{c}", "size", rc)
                query(f"object@{r},{c}", "object", rc)
                query(f"facing@{r},{c}", "facing", rc)
        for ai, a in enumerate(KINDS):
            query(f"recall:{a}", "recall", [("arg_kind_a", ai)])
            for bi, b in enumerate(KINDS):
                if a == b:
                    continue
                ab = [("arg_kind_a", ai), ("arg_kind_b", bi)]
                query(f"rel:{a},{b}", "rel", ab)
                query(f"toward:{a},{b}", "toward", ab)
        for ri, r in enumerate(RELDIRS):
            query(f"isrel:{r}", "isrel", [("arg_rel", ri)])
        query("same-size?", "same", [])
        query("judge?", "judge", [])
        for ci, col in enumerate(COLORS):
            query(f"count:{col}", "count", [("arg_color", ci)])
        for k in range(1, MAX_STEPS + 1):
            query(f"extract:{k}", "extract", [("arg_step", k - 1)])
        return v

    @property
    def answer_tokens(self) -> list[str]:
        return [t for t, a in self.answer_type.items() if a != "eoa"]
