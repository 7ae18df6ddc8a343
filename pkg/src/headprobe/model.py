"""A small decoder transformer whose attention heads are planted by hand.

Weights are constructed, never trained.  Each planted head routes one kind of
information from a matching key token into a scratch channel group of the
residual stream; the feedforward blocks carry only fixed piecewise-linear
arithmetic, so every attributable function lives in an attention head.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from .vocab import (
    COLORS, EOA, FACING_TOWARD, INTENTS, KINDS, NULL, ORIENTATIONS, PAYLOADS, RELDIRS,
    SIZES, ChannelLayout, FunctionLabel, Vocab, count_token,
)

F = FunctionLabel


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    heads_per_layer: int = 8
    embed_dim: int = 256
    head_dim: int = 32
    grid_size: int = 4
    max_seq_len: int = 128
    value_scale: float = 250.0

    def __post_init__(self):
        for name in ("num_layers", "heads_per_layer", "embed_dim", "head_dim", "grid_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.embed_dim != self.heads_per_layer * self.head_dim:
            raise ModelError("embed_dim must equal heads_per_layer * head_dim")
        if self.num_layers < 2:
            raise ModelError("the planted circuitry needs at least 2 layers")

    @cached_property
    def vocab(self) -> Vocab:
        return Vocab.build(self.grid_size)

    @cached_property
    def layout(self) -> ChannelLayout:
        return ChannelLayout.build(self.grid_size, self.embed_dim)

    @property
    def num_heads(self) -> int:
        return self.num_layers * self.heads_per_layer

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PlantedHeadSpec:
    """Routing rule for one head.

    The query token's ``query_selector`` channels are matched against the
    candidate tokens' ``key_selector`` channels; the winner's ``copy_source``
    channels are written into the scratch group ``copy_dest``.  The head only
    leaves its attention sink when the query token carries one of ``intents``.
    """
    layer: int
    head: int
    query_selector: str | None
    key_selector: str | None
    copy_source: str
    copy_dest: str
    gain: float
    function_tag: FunctionLabel
    intents: tuple[str, ...] = ()
    key_bonus: tuple[tuple[str, float], ...] = ()
    match_weight: float = 40.0
    sink_active: float = 60.0
    sink_idle: float = 100.0
    out_scale: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["function_tag"] = self.function_tag.value
        d["intents"] = list(self.intents)
        d["key_bonus"] = [list(b) for b in self.key_bonus]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedHeadSpec":
        d = dict(d)
        d["function_tag"] = FunctionLabel.parse(d["function_tag"])
        d["intents"] = tuple(d.get("intents", ()))
        d["key_bonus"] = tuple((str(g), float(w)) for g, w in d.get("key_bonus", ()))
        return cls(**d)


@dataclass(frozen=True)
class HookSet:
    """Per-head ``x <- scale * x + shift`` applied to residual contributions."""
    entries: dict = field(default_factory=dict)

    def get(self, layer: int, head: int):
        return self.entries.get((layer, head))

    def __bool__(self) -> bool:
        return bool(self.entries)

    def validate(self, config: ModelConfig):
        for (l, m), (scale, shift) in self.entries.items():
            if not (0 <= l < config.num_layers and 0 <= m < config.heads_per_layer):
                raise ModelError(f"hook on invalid head ({l}, {m})")
            if np.shape(shift) != (config.embed_dim,):
                raise ModelError(f"hook shift for ({l}, {m}) must have length {config.embed_dim}")

    @classmethod
    def identity(cls, config: ModelConfig) -> "HookSet":
        z = np.zeros(config.embed_dim)
        return cls({(l, m): (1.0, z) for l in range(config.num_layers)
                    for m in range(config.heads_per_layer)})


EMPTY_HOOKS = HookSet()


@dataclass
class ForwardTrace:
    logits: np.ndarray          # (n, |vocab|), or (1, |vocab|) for the final position only
    head_contribs: np.ndarray   # (n, L, M, d), post-hook
    attention_maps: np.ndarray  # (L, M, n, n)


@dataclass(eq=False)
class Model:
    config: ModelConfig
    planted: tuple[PlantedHeadSpec, ...]
    embedding: np.ndarray   # (|vocab|, d)
    W_q: np.ndarray         # (L, M, d, d_h)
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray         # (L, d, d); rows m*d_h:(m+1)*d_h belong to head m
    ffn_in: tuple           # per layer (d, h) weights
    ffn_bias: tuple
    ffn_out: tuple          # per layer (h, d)
    unembed: np.ndarray     # (d, |vocab|)

    @cached_property
    def _qkv(self) -> np.ndarray:
        # (L, d, 3*M*d_h): all heads' query/key/value maps side by side
        L, M, d, dh = self.W_q.shape
        cat = [w.transpose(0, 2, 1, 3).reshape(L, d, M * dh) for w in (self.W_q, self.W_k, self.W_v)]
        return np.concatenate(cat, axis=2)

    @cached_property
    def _active_layers(self) -> tuple[bool, ...]:
        return tuple(bool(np.any(self.W_v[l])) for l in range(self.config.num_layers))

    @property
    def vocab(self) -> Vocab:
        return self.config.vocab

    def planted_heads(self, function: FunctionLabel | None = None) -> list[tuple[int, int]]:
        return sorted((s.layer, s.head) for s in self.planted
                      if s.gain > 0 and (function is None or s.function_tag == function))

    def fingerprint(self) -> str:
        doc = {"config": self.config.to_dict(), "planted": [s.to_dict() for s in self.planted]}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# attention


def attention_head_output(queries, keys, values, mask):
    """softmax(Q K^T / sqrt(d_h) + mask) V, batched over any leading axes."""
    queries, keys, values, mask = (np.asarray(a, dtype=float) for a in (queries, keys, values, mask))
    n, dh = queries.shape[-2:]
    if keys.shape[-2:] != (n, dh) or values.shape[-2] != n or mask.shape[-2:] != (n, n):
        raise ModelError(
            f"shape mismatch: q {queries.shape}, k {keys.shape}, v {values.shape}, mask {mask.shape}")
    for a in (queries, keys, values):
        if np.isnan(a).any():
            raise FloatingPointError("NaN in attention inputs")
    weights = attention_weights(queries, keys, mask)
    return weights @ values


def attention_weights(queries, keys, mask):
    dh = queries.shape[-1]
    scores = queries @ np.swapaxes(keys, -1, -2) / np.sqrt(dh) + mask
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=-1, keepdims=True)


def _uniform_causal(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = -np.inf
    return m


# ---------------------------------------------------------------------------
# construction


def _match_matrix(layout: ChannelLayout, qsel: str, ksel: str) -> np.ndarray:
    """Signed one-hot matching: +1 for the asked value, -1 for any other value.

    Groups are paired in order; a single query group may also be split across
    several key groups of the same total width.
    """
    qg, kg = qsel.split("+"), ksel.split("+")
    qw = [layout.size(g) for g in qg]
    kw = [layout.size(g) for g in kg]
    if len(qg) == 1 and len(kg) > 1 and qw[0] == sum(kw):
        qw = kw
    if qw != kw:
        raise ModelError(f"no routing from {qsel!r} to {ksel!r}")
    m = np.zeros((sum(qw), sum(kw)))
    o = 0
    for w in kw:
        m[o:o + w, o:o + w] = 2.0 * np.eye(w) - 1.0
        o += w
    return m


def _check_groups(layout: ChannelLayout, selector: str | None):
    if selector is None:
        return
    for g in selector.split("+"):
        if g not in layout:
            raise ModelError(f"unknown channel group {g!r}")


def validate_specs(config: ModelConfig, specs) -> None:
    layout = config.layout
    seen = set()
    for s in specs:
        if not (0 <= s.layer < config.num_layers and 0 <= s.head < config.heads_per_layer):
            raise ModelError(f"head ({s.layer}, {s.head}) outside the model")
        if (s.layer, s.head) in seen:
            raise ModelError(f"duplicate planted head ({s.layer}, {s.head})")
        seen.add((s.layer, s.head))
        for sel in (s.query_selector, s.key_selector, s.copy_source, s.copy_dest):
            _check_groups(layout, sel)
        for g, _ in s.key_bonus:
            _check_groups(layout, g)
        if not s.copy_dest.startswith("scr_"):
            raise ModelError(f"copy_dest {s.copy_dest!r} is not a scratch group")
        if s.gain < 0:
            raise ModelError("gain must be nonnegative")
        for it in s.intents:
            if it not in INTENTS:
                raise ModelError(f"unknown intent {it!r}")
        vw = len(layout.span(s.copy_source))
        if vw != len(layout.span(s.copy_dest)):
            raise ModelError(f"copy_source and copy_dest widths differ for ({s.layer}, {s.head})")
        kw = 0
        if s.query_selector is not None:
            kw = _match_matrix(layout, s.query_selector, s.key_selector).shape[1]
        if kw + 1 + len(s.key_bonus) > config.head_dim or vw > config.head_dim:
            raise ModelError(f"head ({s.layer}, {s.head}) routing does not fit in head_dim")


def _plant(config, spec, Wq, Wk, Wv, Wo):
    layout = config.layout
    V = config.value_scale
    l, m, dh = spec.layer, spec.head, config.head_dim
    if spec.gain == 0:
        return
    g = spec.gain * np.sqrt(dh)
    intents = [layout.at("intent", INTENTS.index(i)) for i in spec.intents]
    col = 0
    if spec.query_selector is not None:
        M = _match_matrix(layout, spec.query_selector, spec.key_selector)
        qch = layout.span(spec.query_selector)
        kch = layout.span(spec.key_selector)
        # scratch is stored at value_scale; read it back in unit terms
        qscale = 1.0 / V if spec.query_selector.startswith("scr_") else 1.0
        for i, c in enumerate(qch):
            Wq[l, m, c, : M.shape[1]] += g * spec.match_weight * qscale * M[i]
        for j, c in enumerate(kch):
            Wk[l, m, c, j] = 1.0
        col = M.shape[1]
    Wq[l, m, layout.at("const"), col] = g * spec.sink_idle
    for c in intents:
        Wq[l, m, c, col] = -g * (spec.sink_idle - spec.sink_active)
    Wk[l, m, layout.at("is_bos"), col] = 1.0
    for b, (group, w) in enumerate(spec.key_bonus):
        for c in intents:
            Wq[l, m, c, col + 1 + b] = g * spec.match_weight * w
        for c in layout.span(group):
            Wk[l, m, c, col + 1 + b] = 1.0
    src = layout.span(spec.copy_source)
    dst = layout.span(spec.copy_dest)
    for j, (s, t) in enumerate(zip(src, dst)):
        Wv[l, m, s, j] = 1.0
        Wo[l, m * dh + j, t] = V * spec.out_scale


class _Rules:
    """Accumulates ``out += coef * relu(sum w_i x_i + bias)`` units."""

    def __init__(self, d):
        self.d = d
        self.units = []

    def add(self, out: int, coef: float, terms, bias: float):
        self.units.append((out, coef, list(terms), bias))

    def matrices(self):
        h = max(len(self.units), 1)
        W1 = np.zeros((self.d, h))
        b1 = np.zeros(h)
        W2 = np.zeros((h, self.d))
        for u, (out, coef, terms, bias) in enumerate(self.units):
            for c, w in terms:
                W1[c, u] += w
            b1[u] = bias
            W2[u, out] = coef
        return W1, b1, W2


def _ffn_layer0(config) -> _Rules:
    L, V, n = config.layout, config.value_scale, config.grid_size
    R = _Rules(config.embed_dim)
    rel = L.at("intent", INTENTS.index("rel"))
    gr = lambda i: L.at("scr_ground", i)           # noqa: E731
    gc = lambda i: L.at("scr_ground", n + i)       # noqa: E731
    br = lambda i: L.at("scr_locate", i)           # noqa: E731
    bc = lambda i: L.at("scr_locate", n + i)       # noqa: E731
    out = {r: L.at("ffn_reldir", RELDIRS.index(r)) for r in RELDIRS}
    u = 1.0 / V
    for i in range(n):
        for j in range(n):
            if i < j:
                R.add(out["left-of"], V, [(gc(i), u), (bc(j), u), (rel, 1.0)], -2.0)
            elif i > j:
                R.add(out["right-of"], V, [(gc(i), u), (bc(j), u), (rel, 1.0)], -2.0)
    for c in range(n):
        for a in range(n):
            for b in range(n):
                if a == b:
                    continue
                terms = [(gc(c), u), (bc(c), u), (gr(a), u), (br(b), u), (rel, 1.0)]
                R.add(out["above" if a < b else "below"], V, terms, -4.0)
    # count = n where the matched fraction n / (n + 1) lands; hat function per bin
    f = L.at("scr_count")
    centers = [k / (k + 1) for k in range(0, n * n + 2)]
    for k in range(1, n * n + 1):
        a, c, b = centers[k - 1], centers[k], centers[k + 1]
        o = L.at("ffn_count", k - 1)
        R.add(o, V / (c - a), [(f, u)], -a)
        R.add(o, -V * (1 / (c - a) + 1 / (b - c)), [(f, u)], -c)
        R.add(o, V / (b - c), [(f, u)], -b)
    return R


def _ffn_layer1(config) -> _Rules:
    L, V = config.layout, config.value_scale
    R = _Rules(config.embed_dim)
    u = 1.0 / V
    nr, no = len(RELDIRS), len(ORIENTATIONS)
    rd = lambda i: L.at("scr_relop", i)                # noqa: E731
    ori = lambda i: L.at("scr_relop", nr + i)          # noqa: E731
    sz = lambda i: L.at("scr_relop", nr + no + i)      # noqa: E731
    yes, no_ = L.at("ffn_yesno", 0), L.at("ffn_yesno", 1)
    it = lambda name: L.at("intent", INTENTS.index(name))  # noqa: E731
    # relational operands arrive doubled: two operands at weight 1/2 each
    for k, r in enumerate(RELDIRS):
        target = ORIENTATIONS.index(FACING_TOWARD[r])
        for j in range(no):
            R.add(yes if j == target else no_, V, [(rd(k), u), (ori(j), u), (it("toward"), 1.0)], -2.0)
    for k in range(nr):
        for j in range(nr):
            R.add(yes if j == k else no_, V,
                  [(rd(k), 0.5 * u), (L.at("arg_rel", j), 1.0), (it("isrel"), 1.0)], -2.0)
    big = 10.0
    for k in range(len(SIZES)):
        R.add(yes, V, [(sz(k), u), (it("same"), 1.0)], -2.0)
        # hat at 1: exactly one of the two operands has this size
        R.add(no_, V, [(sz(k), u), (it("same"), big)], -big)
        R.add(no_, -2 * V, [(sz(k), u), (it("same"), big)], -big - 1.0)
        R.add(no_, V, [(sz(k), u), (it("same"), big)], -big - 2.0)
    return R


def _unembedding(config) -> np.ndarray:
    L, V, vocab = config.layout, config.value_scale, config.vocab
    A, B, E = 10.0 / V, 20.0, 100.0
    U = np.zeros((config.embed_dim, len(vocab)))
    it = lambda name: L.at("intent", INTENTS.index(name))  # noqa: E731

    def tok(t, sources, intents):
        j = vocab.index[t]
        for c in sources:
            U[c, j] += A
        for i in intents:
            U[it(i), j] += B

    nc, nk = len(COLORS), len(KINDS)
    for i, t in enumerate(COLORS):
        tok(t, [L.at("scr_lowlevel", i), L.at("scr_extract", i)], ["color", "extract"])
    for i, t in enumerate(SIZES):
        tok(t, [L.at("scr_lowlevel", nc + i)], ["size"])
    for i, t in enumerate(KINDS):
        tok(t, [L.at("scr_object", i), L.at("scr_extract", nc + i)], ["object", "extract"])
    for i, t in enumerate(PAYLOADS):
        tok(t, [L.at("scr_recall", i), L.at("scr_extract", nc + nk + i)], ["recall", "extract"])
    for i, t in enumerate(RELDIRS):
        tok(t, [L.at("ffn_reldir", i)], ["rel"])
    for i, t in enumerate(ORIENTATIONS):
        tok(t, [L.at("scr_orient", i)], ["facing"])
    for i, t in enumerate(("yes", "no")):
        tok(t, [L.at("ffn_yesno", i)], ["toward", "isrel", "same"])
    for i, t in enumerate(("true", "false")):
        tok(t, [L.at("scr_verdict", i)], ["judge"])
    for k in range(1, config.grid_size ** 2 + 1):
        tok(count_token(k), [L.at("ffn_count", k - 1)], ["count"])
    # abstain unless some answer channel clears half a unit
    U[L.at("is_query"), vocab.index[NULL]] = B + A * V / 2
    U[L.at("is_answer"), vocab.index[EOA]] = E
    return U


def _embedding(config) -> np.ndarray:
    layout, vocab = config.layout, config.vocab
    Emb = np.zeros((len(vocab), config.embed_dim))
    for t, feats in vocab.features.items():
        j = vocab.index[t]
        for (group, i), val in feats.items():
            Emb[j, layout.at(group, i)] = val
    return Emb


def build_model(config: ModelConfig, specs) -> Model:
    specs = tuple(specs)
    validate_specs(config, specs)
    L, M, d, dh = config.num_layers, config.heads_per_layer, config.embed_dim, config.head_dim
    Wq = np.zeros((L, M, d, dh))
    Wk = np.zeros((L, M, d, dh))
    Wv = np.zeros((L, M, d, dh))
    Wo = np.zeros((L, d, d))
    for s in specs:
        _plant(config, s, Wq, Wk, Wv, Wo)
    ffn_in, ffn_bias, ffn_out = [], [], []
    for l in range(L):
        rules = _ffn_layer0(config) if l == 0 else _ffn_layer1(config) if l == 1 else _Rules(d)
        W1, b1, W2 = rules.matrices()
        ffn_in.append(W1)
        ffn_bias.append(b1)
        ffn_out.append(W2)
    arrays = [Wq, Wk, Wv, Wo, *ffn_in, *ffn_bias, *ffn_out]
    for a in arrays:
        a.setflags(write=False)
    emb = _embedding(config)
    U = _unembedding(config)
    emb.setflags(write=False)
    U.setflags(write=False)
    return Model(config, specs, emb, Wq, Wk, Wv, Wo, tuple(ffn_in), tuple(ffn_bias),
                 tuple(ffn_out), U)


# ---------------------------------------------------------------------------
# default registry


def default_specs() -> list[PlantedHeadSpec]:
    loc, cell_loc, kind_key = "arg_row+arg_col", "cell_row+cell_col", "cell_kind"
    P = PlantedHeadSpec
    return [
        P(0, 0, loc, cell_loc, "cell_color+cell_size", "scr_lowlevel", 1.0, F.LowLevelVisual,
          ("color", "size"), (("is_marker", -2.0),)),
        P(0, 1, loc, cell_loc, "cell_kind", "scr_object", 1.0, F.HighLevelVisual, ("object",),
          (("is_marker", 0.5),)),
        P(0, 2, "arg_kind_a", kind_key, "cell_row+cell_col", "scr_ground", 1.0, F.SpatialPerception,
          ("rel",), (("is_marker", 0.5),), match_weight=80.0, sink_active=0.0),
        P(0, 3, "arg_kind_b", kind_key, "cell_row+cell_col", "scr_locate", 1.0, F.SpatialPerception,
          ("rel",), (("is_marker", 0.5),), match_weight=80.0, sink_active=0.0),
        P(0, 4, "arg_kind_a", "fact_key", "fact_payload", "scr_recall", 1.0, F.KnowledgeRecall,
          ("recall",), (("is_fact", 1.0),)),
        P(0, 5, "arg_step", "segment", "ans_color+ans_kind+ans_payload", "scr_extract", 1.0,
          F.InfoExtraction, ("extract",), (("is_answer", 1.0),)),
        P(0, 6, "arg_color", "cell_color", "is_cell", "scr_count", 1.0, F.MathReasoning,
          ("count",), match_weight=60.0, sink_active=60.0),
        P(0, 7, loc, cell_loc, "cell_ori", "scr_orient", 1.0, F.SpatialPerception,
          ("facing",), (("is_marker", -2.0),), match_weight=30.0, sink_active=0.0),
        P(1, 1, None, None, "ans_reldir+ans_ori+ans_size", "scr_relop", 1.0, F.RelationalReasoning,
          ("toward", "isrel", "same"), (("ans_operand", 2.0),), out_scale=2.0),
        P(1, 2, None, None, "ans_yesno", "scr_verdict", 1.0, F.DecisionMaking,
          ("judge",), (("ans_verdict", 2.0),)),
    ]


DETUNED_GAIN = 0.051


def detune(specs, functions=(F.SpatialPerception,), gain: float = DETUNED_GAIN):
    """Scale the planted gain of every head tagged with one of ``functions``."""
    return [replace(s, gain=s.gain * gain) if s.function_tag in functions else s for s in specs]


def default_model(config: ModelConfig | None = None) -> Model:
    return build_model(config or ModelConfig(), default_specs())


def detuned_model(config: ModelConfig | None = None, gain: float = DETUNED_GAIN) -> Model:
    return build_model(config or ModelConfig(), detune(default_specs(), gain=gain))


# ---------------------------------------------------------------------------
# running


def _segments(model: Model, ids) -> np.ndarray:
    """Answer tokens after a step marker carry that step's segment channel."""
    vocab, layout = model.vocab, model.config.layout
    seg = np.zeros((len(ids), model.config.embed_dim))
    current = None
    for p, i in enumerate(ids):
        t = vocab.tokens[i]
        if t[0] == "S" and t[1:].isdigit():
            current = int(t[1:])
        elif t in vocab.answer_type and current is not None:
            seg[p, layout.at("segment", current - 1)] = 1.0
        else:
            current = None
    return seg


def _encode(model: Model, tokens) -> list[int]:
    if len(tokens) > model.config.max_seq_len:
        raise ModelError(f"sequence of {len(tokens)} tokens exceeds max_seq_len")
    if len(tokens) == 0:
        raise ModelError("empty token sequence")
    try:
        return model.vocab.encode(tokens)
    except KeyError as e:
        raise ModelError(str(e.args[0])) from None


def forward(model: Model, tokens, hooks: HookSet = EMPTY_HOOKS, *, last_only: bool = False) -> ForwardTrace:
    cfg = model.config
    hooks.validate(cfg)
    ids = _encode(model, tokens)
    n, M, dh = len(ids), cfg.heads_per_layer, cfg.head_dim
    x = model.embedding[ids] + _segments(model, ids)
    mask = causal_mask(n)
    contribs = np.zeros((n, cfg.num_layers, M, cfg.embed_dim))
    maps = np.zeros((cfg.num_layers, M, n, n))
    for l in range(cfg.num_layers):
        layer_hooks = [(m, hooks.get(l, m)) for m in range(M) if hooks.get(l, m) is not None]
        if model._active_layers[l] or layer_hooks:
            qkv = (x @ model._qkv[l]).reshape(n, 3, M, dh).transpose(1, 2, 0, 3)
            w = attention_weights(qkv[0], qkv[1], mask)
            maps[l] = w
            z = w @ qkv[2]                                      # (M, n, dh)
            wo = model.W_o[l].reshape(M, dh, cfg.embed_dim)
            c = np.matmul(z, wo).transpose(1, 0, 2)              # (n, M, d)
            for m, (scale, shift) in layer_hooks:
                c[:, m] = scale * c[:, m] + np.asarray(shift)
            contribs[:, l] = c
            x = x + c.sum(axis=1)
        else:
            # all value paths are zero: attention is irrelevant to the output
            maps[l] = _uniform_causal(n)
        hid = np.maximum(x @ model.ffn_in[l] + model.ffn_bias[l], 0.0)
        x = x + hid @ model.ffn_out[l]
    logits = (x[-1:] if last_only else x) @ model.unembed
    return ForwardTrace(logits, contribs, maps)


def generate(model: Model, prompt, hooks: HookSet = EMPTY_HOOKS, max_new: int = 4,
             *, return_traces: bool = False):
    """Greedy decoding until the end-of-answer token or ``max_new`` tokens.

    With ``return_traces`` also returns, for each generated token, the head
    contributions (L, M, d) at the position whose logits produced it.
    """
    if max_new < 1:
        raise ModelError("max_new must be at least 1")
    seq = list(prompt)
    out, blocks = [], []
    for _ in range(max_new):
        tr = forward(model, seq, hooks, last_only=True)
        tok = model.vocab.tokens[int(np.argmax(tr.logits[-1]))]
        out.append(tok)
        blocks.append(tr.head_contribs[-1])
        seq.append(tok)
        if tok == EOA or len(seq) >= model.config.max_seq_len:
            break
    if return_traces:
        return out, np.stack(blocks)
    return out


def strip_eoa(tokens) -> list[str]:
    return [t for t in tokens if t != EOA]
