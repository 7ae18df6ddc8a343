"""Activation capture during generation and construction of the probe dataset."""
from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .model import EMPTY_HOOKS, HookSet, Model, generate, strip_eoa
from .vocab import NUM_FUNCTIONS, labels_to_mask, mask_to_labels

DEFAULT_TOPK = 3
POSITION_STRATEGIES = ("topk", "first", "last", "full")
CACHE_MAGIC = b"HSC1"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")      # magic, version, L, M, d, count
_PROV = struct.Struct("<qIB")             # example id, step, label bitmask


class TraceError(ValueError):
    pass


class EmptyDatasetError(TraceError):
    pass


class CacheError(TraceError):
    pass


@dataclass(frozen=True)
class ActivationRecord:
    example_id: int
    step: int
    generated: tuple[str, ...]
    contribs: np.ndarray          # (num_generated, L, M, d)
    correct: bool

    @property
    def num_generated(self) -> int:
        return self.contribs.shape[0]


def run_and_capture(model: Model, tokens, gold, hooks: HookSet = EMPTY_HOOKS, *, max_new: int = 4,
                    example_id: int = -1, step: int = 0) -> ActivationRecord:
    out, blocks = generate(model, tokens, hooks, max_new=max_new, return_traces=True)
    correct = tuple(strip_eoa(out)) == tuple(gold)
    return ActivationRecord(example_id, step, tuple(out), np.stack(blocks), correct)


def select_topk_tokens(record: ActivationRecord, ranking, k: int = DEFAULT_TOPK) -> list[int]:
    """First ``k`` positions of ``ranking`` that exist in this generation.

    Ranked positions beyond the generated length are skipped; if the ranking
    runs short, the remaining positions follow in generation order.
    """
    if k < 1:
        raise TraceError("k must be at least 1")
    n = record.num_generated
    if n == 0:
        raise TraceError("empty answer: nothing was generated")
    order = [int(i) for i in ranking if 0 <= int(i) < n]
    order = list(dict.fromkeys(order))
    order += [i for i in range(n) if i not in order]
    return order[:min(k, n)]


def positions_for(record: ActivationRecord, ranking, strategy: str = "topk", k: int = DEFAULT_TOPK) -> list[int]:
    n = record.num_generated
    if n == 0:
        raise TraceError("empty answer: nothing was generated")
    if strategy == "topk":
        return select_topk_tokens(record, ranking, k)
    if strategy == "first":
        return [0]
    if strategy == "last":
        return [n - 1]
    if strategy == "full":
        return list(range(n))
    raise TraceError(f"unknown token strategy {strategy!r}")


def head_feature(record: ActivationRecord, indices) -> np.ndarray:
    idx = list(indices)
    if not idx:
        raise TraceError("need at least one token position")
    n = record.num_generated
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise TraceError(f"token positions {bad} outside generated range 0..{n - 1}")
    return record.contribs[sorted(idx)].mean(axis=0)


def augment_with_layer_summary(features: np.ndarray) -> np.ndarray:
    """(L, M, d) head means -> (L, M, 2d) with each layer's mean over heads appended."""
    if features.ndim != 3:
        raise TraceError(f"expected an (L, M, d) grid, got shape {features.shape}")
    summary = features.mean(axis=1, keepdims=True)
    return np.concatenate([features, np.broadcast_to(summary, features.shape)], axis=2)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Capture:
    """Compact per-subquestion capture: selected-position head means plus outcome."""
    example_id: int
    step: int
    template_id: str
    labels: frozenset
    generated: tuple[str, ...]
    correct: bool
    head_means: np.ndarray        # (L, M, d) float32


def capture_split(model: Model, mains, hooks: HookSet = EMPTY_HOOKS, *, k: int = DEFAULT_TOPK,
                  strategy: str = "topk") -> list[Capture]:
    out = []
    for main in sorted(mains, key=lambda m: m.example_id):
        for step, sub in enumerate(main.subqafs):
            rec = run_and_capture(model, corpus_mod.render_example(main, step), sub.answer, hooks,
                                  example_id=main.example_id, step=step)
            idx = positions_for(rec, main.answer_token_importance[step], strategy, k)
            out.append(Capture(main.example_id, step, main.template_id, sub.functions, rec.generated,
                               rec.correct, head_feature(rec, idx).astype(np.float32)))
    return out


@dataclass
class ProbeDataset:
    features: np.ndarray          # (N, L, M, 2d) float32
    label_masks: np.ndarray       # (N,) uint8 bitmask
    provenance: np.ndarray        # (N, 2) int64: example id, step

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 4 or self.label_masks.shape != (n,) or self.provenance.shape != (n, 2):
            raise TraceError("inconsistent dataset extents")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def targets(self) -> np.ndarray:
        bits = (self.label_masks[:, None] >> np.arange(NUM_FUNCTIONS)) & 1
        return bits.astype(np.float64)

    def labels(self, i: int) -> frozenset:
        return mask_to_labels(int(self.label_masks[i]))

    def subset(self, idx) -> "ProbeDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ProbeDataset(self.features[idx], self.label_masks[idx], self.provenance[idx])


def dataset_from_captures(captures, *, correct_only: bool = True) -> ProbeDataset:
    keep = [c for c in captures if c.correct or not correct_only]
    if not keep:
        templates = sorted({c.template_id for c in captures})
        raise EmptyDatasetError(f"no correct generations; failing templates: {', '.join(templates) or 'none'}")
    keep.sort(key=lambda c: (c.example_id, c.step))
    feats = np.stack([augment_with_layer_summary(c.head_means) for c in keep]).astype(np.float32)
    # flush subnormals (softmax leakage far below any signal); they slow float32 math badly
    feats[np.abs(feats) < np.finfo(np.float32).tiny] = 0
    masks = np.array([labels_to_mask(c.labels) for c in keep], dtype=np.uint8)
    prov = np.array([(c.example_id, c.step) for c in keep], dtype=np.int64)
    return ProbeDataset(feats, masks, prov)


def build_probe_dataset(mains, model: Model, k: int = DEFAULT_TOPK, cache_path=None, *,
                        hooks: HookSet = EMPTY_HOOKS, strategy: str = "topk") -> ProbeDataset:
    if not mains:
        raise TraceError("corpus split is empty")
    ds = dataset_from_captures(capture_split(model, mains, hooks, k=k, strategy=strategy))
    if cache_path is not None:
        write_cache(ds, cache_path)
        write_manifest(cache_path, model, mains, k, strategy)
    return ds


# ---------------------------------------------------------------------------
# HSC1 cache


def write_cache(ds: ProbeDataset, path) -> None:
    n, L, M, two_d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, L, M, two_d // 2, n))
        for i in range(n):
            fh.write(_PROV.pack(int(ds.provenance[i, 0]), int(ds.provenance[i, 1]), int(ds.label_masks[i])))
            fh.write(np.ascontiguousarray(ds.features[i], dtype="<f4").tobytes())


def read_cache(path, expect: tuple[int, int, int] | None = None) -> ProbeDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheError("cache shorter than its header")
    magic, version, L, M, d, n = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise CacheError(f"bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheError(f"unsupported cache version {version}")
    if expect is not None and (L, M, d) != tuple(expect):
        raise CacheError(f"cache extents {(L, M, d)} do not match model {tuple(expect)}")
    width = L * M * 2 * d
    rec = _PROV.size + 4 * width
    if len(raw) != _HEADER.size + n * rec:
        raise CacheError(f"cache length {len(raw)} does not match {n} records of {rec} bytes")
    feats = np.empty((n, L, M, 2 * d), dtype=np.float32)
    masks = np.empty(n, dtype=np.uint8)
    prov = np.empty((n, 2), dtype=np.int64)
    off = _HEADER.size
    for i in range(n):
        eid, step, mask = _PROV.unpack_from(raw, off)
        off += _PROV.size
        feats[i] = np.frombuffer(raw, dtype="<f4", count=width, offset=off).reshape(L, M, 2 * d)
        off += 4 * width
        masks[i], prov[i] = mask, (eid, step)
    return ProbeDataset(feats, masks, prov)


def write_manifest(cache_path, model: Model, mains, k: int, strategy: str = "topk") -> Path:
    side = Path(str(cache_path) + ".json")
    doc = {"cache": Path(cache_path).name, "model_hash": model.fingerprint(),
           "corpus_hash": corpus_mod.corpus_hash(mains), "k": k, "strategy": strategy}
    side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return side


def accuracy_by_function(captures) -> dict:
    n, hit = Counter(), Counter()
    for c in captures:
        for f in c.labels:
            n[f] += 1
            hit[f] += c.correct
    return {f: hit[f] / n[f] for f in n}


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
