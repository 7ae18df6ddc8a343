"""Multi-label function probe over head features, with gradient x activation attribution."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .trace import ProbeDataset
from .vocab import FUNCTIONS, NUM_FUNCTIONS

PROJ_DIM = 64
HIDDEN_DIM = 512
PROBE_MAGIC = b"HSP1"
PROBE_VERSION = 1
ELBOW_TOL = 1e-9


class ProbeError(ValueError):
    pass


class DivergenceError(ProbeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    dropout: float = 0.3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ProbeError("learning_rate must be positive, epochs nonnegative, batch_size >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ProbeError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()[:8]


@dataclass
class ProbeModel:
    num_layers: int
    heads_per_layer: int
    embed_dim: int
    P: np.ndarray         # (2d, 64) shared projection
    bp: np.ndarray
    W1: np.ndarray        # (64 L M, 512)
    b1: np.ndarray
    W2: np.ndarray        # (512, C)
    b2: np.ndarray
    seed: int = 0
    config_digest: bytes = b"\0" * 8

    PARAMS = ("P", "bp", "W1", "b1", "W2", "b2")

    @property
    def slots(self) -> int:
        return self.num_layers * self.heads_per_layer

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "ProbeModel":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def check_features(self, X: np.ndarray) -> np.ndarray:
        want = (self.num_layers, self.heads_per_layer, 2 * self.embed_dim)
        if X.shape[-3:] != want:
            raise ProbeError(f"feature extents {X.shape[-3:]} do not match probe {want}")
        return X.reshape(X.shape[:-3] + (self.slots, 2 * self.embed_dim))


def init_probe(L: int, M: int, d: int, seed: int = 0, num_classes: int = NUM_FUNCTIONS) -> ProbeModel:
    if min(L, M, d, num_classes) < 1:
        raise ProbeError("probe dimensions must be positive")
    rng = np.random.default_rng(seed)

    def uni(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    return ProbeModel(L, M, d,
                      uni(2 * d, (2 * d, PROJ_DIM)), np.zeros(PROJ_DIM),
                      uni(PROJ_DIM * L * M, (PROJ_DIM * L * M, HIDDEN_DIM)), np.zeros(HIDDEN_DIM),
                      uni(HIDDEN_DIM, (HIDDEN_DIM, num_classes)), np.zeros(num_classes), seed)


# ---------------------------------------------------------------------------
# forward / backward on (B, S, F) slot features


def _forward(p: dict, X: np.ndarray, keep: np.ndarray | None = None):
    B, S, _ = X.shape
    Z = (X.reshape(B * S, -1) @ p["P"] + p["bp"]).reshape(B, S * PROJ_DIM)
    Hpre = Z @ p["W1"] + p["b1"]
    H = np.maximum(Hpre, 0.0)
    if keep is not None:
        H = H * keep
    logits = H @ p["W2"] + p["b2"]
    return logits, (Z, Hpre, H)


def _backward(p: dict, X: np.ndarray, cache, dlogits: np.ndarray, keep=None, want_params=True):
    B, S, F = X.shape
    Z, Hpre, H = cache
    dH = dlogits @ p["W2"].T
    if keep is not None:
        dH = dH * keep
    dHpre = dH * (Hpre > 0)
    dZ = (dHpre @ p["W1"].T).reshape(B * S, PROJ_DIM)
    grads = None
    if want_params:
        grads = {
            "W2": H.T @ dlogits, "b2": dlogits.sum(0),
            "W1": Z.T @ dHpre, "b1": dHpre.sum(0),
            # the shared projection accumulates over every head slot
            "P": X.reshape(B * S, F).T @ dZ, "bp": dZ.sum(0),
        }
    dX = (dZ @ p["P"].T).reshape(B, S, F)
    return grads, dX


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))))


@dataclass(frozen=True)
class History:
    loss: tuple[float, ...]
    accuracy: tuple[float, ...]


def train_probe(dataset: ProbeDataset, config: TrainConfig = TrainConfig(),
                probe: ProbeModel | None = None) -> tuple[ProbeModel, History]:
    if len(dataset) == 0:
        raise ProbeError("cannot train on an empty dataset")
    _, L, M, F = dataset.features.shape
    probe = init_probe(L, M, F // 2, config.seed) if probe is None else probe.copy()
    probe.check_features(dataset.features[:1])
    probe.config_digest = config.digest()
    if config.epochs == 0:
        return probe, History((), ())

    S = L * M
    X_full = dataset.features.reshape(len(dataset), S, F)
    nonzero = X_full != 0
    # Two exact reductions. Input coordinates that are zero everywhere get zero
    # gradient and zero Adam updates, so their projection rows are dropped.
    # Head slots that are zero everywhere project to the bias alone; their hidden
    # blocks all receive the same gradient, so one shared Adam state and one
    # shared offset stand in for all of them.
    dims = np.flatnonzero(nonzero.any(axis=(0, 1)))
    live = np.flatnonzero(nonzero.any(axis=(0, 2)))
    dead = np.setdiff1d(np.arange(S), live)
    dt = np.float32          # single precision keeps a 100-epoch run near a minute
    X = np.ascontiguousarray(X_full[:, live][:, :, dims], dtype=dt)
    Y = dataset.targets.astype(dt)
    W1_blocks = probe.W1.reshape(S, PROJ_DIM, HIDDEN_DIM)
    dead_sum0 = W1_blocks[dead].sum(axis=0).astype(dt)
    p = {
        "P": np.ascontiguousarray(probe.P[dims], dtype=dt), "bp": probe.bp.astype(dt),
        "W1": np.ascontiguousarray(W1_blocks[live].reshape(-1, HIDDEN_DIM), dtype=dt),
        "b1": probe.b1.astype(dt), "W2": probe.W2.astype(dt), "b2": probe.b2.astype(dt),
        "D": np.zeros((PROJ_DIM, HIDDEN_DIM), dtype=dt),
    }
    nd = dt(len(dead))
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(val) for k, val in p.items()}
    tmp = {k: np.empty_like(val) for k, val in p.items()}
    rng = np.random.default_rng(config.seed + 1)
    b1, b2, eps, lr = config.beta1, config.beta2, config.adam_eps, config.learning_rate
    scale = dt(1.0 / (1.0 - config.dropout))
    n, t = len(X), 0
    Sa, Fa = X.shape[1], X.shape[2]
    losses, accs = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        tot = 0.0
        hits = 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            xb, yb = X[idx].reshape(len(idx) * Sa, Fa), Y[idx]
            B = len(idx)
            keep = None
            if config.dropout > 0:
                keep = (rng.random((B, HIDDEN_DIM)) >= config.dropout).astype(dt) * scale
            dead_sum = dead_sum0 + nd * p["D"]
            Z = (xb @ p["P"] + p["bp"]).reshape(B, Sa * PROJ_DIM)
            Hpre = Z @ p["W1"] + (p["bp"] @ dead_sum + p["b1"])
            H = np.maximum(Hpre, 0)
            if keep is not None:
                H *= keep
            out = H @ p["W2"] + p["b2"]
            loss = bce_with_logits(out.astype(np.float64), yb)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            tot += loss * B
            hits += int(np.sum(np.all((out > 0) == (yb > 0.5), axis=1)))
            dlog = (_sigmoid(out) - yb) * dt(1.0 / yb.size)
            dH = dlog @ p["W2"].T
            if keep is not None:
                dH *= keep
            dHpre = dH * (Hpre > 0)
            dHsum = dHpre.sum(0)
            dZ = (dHpre @ p["W1"].T).reshape(B * Sa, PROJ_DIM)
            grads = {
                "W2": H.T @ dlog, "b2": dlog.sum(0),
                "W1": Z.T @ dHpre, "b1": dHsum,
                "P": xb.T @ dZ, "bp": dZ.sum(0) + dead_sum @ dHsum,
                "D": np.outer(p["bp"], dHsum),
            }
            t += 1
            step = float(lr * np.sqrt(1 - b2 ** t) / (1 - b1 ** t))
            eps_hat = float(eps * np.sqrt(1 - b2 ** t))
            for k, g in grads.items():
                mk, vk, tk = m[k], v[k], tmp[k]
                mk *= b1
                mk += (1 - b1) * g
                np.multiply(g, g, out=tk)
                tk *= 1 - b2
                vk *= b2
                vk += tk
                np.sqrt(vk, out=tk)
                tk += eps_hat
                np.divide(mk, tk, out=tk)
                tk *= step
                p[k] -= tk
            if t % 50 == 0:
                # moments of dead units decay toward subnormals, which are very slow
                # to compute with; values this small move no weight anyway
                for k in m:
                    m[k][np.abs(m[k]) < 1e-30] = 0
                    v[k][v[k] < 1e-30] = 0
        losses.append(tot / n)
        accs.append(hits / n)
    P_full = probe.P.copy()
    P_full[dims] = p["P"]
    blocks = W1_blocks.copy()
    blocks[live] = p["W1"].reshape(-1, PROJ_DIM, HIDDEN_DIM)
    blocks[dead] += p["D"].astype(np.float64)
    probe.P = P_full
    probe.W1 = blocks.reshape(S * PROJ_DIM, HIDDEN_DIM)
    for k in ("bp", "b1", "W2", "b2"):
        setattr(probe, k, p[k].astype(np.float64))
    return probe, History(tuple(losses), tuple(accs))


def logits(probe: ProbeModel, features: np.ndarray) -> np.ndarray:
    X = probe.check_features(np.asarray(features, dtype=np.float64))
    single = X.ndim == 2
    out, _ = _forward(probe.params(), X[None] if single else X)
    return out[0] if single else out


def predict(probe: ProbeModel, features: np.ndarray) -> np.ndarray:
    """Per-class sigmoid scores; a label is predicted when its score exceeds 0.5."""
    return _sigmoid(logits(probe, features))


def subset_accuracy(probe: ProbeModel, dataset: ProbeDataset, batch: int = 512) -> float:
    if len(dataset) == 0:
        raise ProbeError("empty dataset")
    Y = dataset.targets > 0.5
    hits = 0
    for s in range(0, len(dataset), batch):
        z = logits(probe, dataset.features[s:s + batch])
        hits += int(np.sum(np.all((z > 0) == Y[s:s + batch], axis=1)))
    return hits / len(dataset)


def feature_gradients(probe: ProbeModel, features: np.ndarray, cls: int) -> np.ndarray:
    """d logit_cls / d features, same shape as ``features`` (batched)."""
    X = probe.check_features(np.asarray(features, dtype=np.float64))
    p = probe.params()
    out, cache = _forward(p, X)
    dlog = np.zeros_like(out)
    dlog[:, cls] = 1.0
    _, dX = _backward(p, X, cache, dlog, want_params=False)
    return dX.reshape(features.shape)


@dataclass(frozen=True)
class ImportanceMatrix:
    values: np.ndarray        # (C, L*M); column = l*M + m
    num_layers: int
    heads_per_layer: int

    def __post_init__(self):
        if self.values.shape[1] != self.num_layers * self.heads_per_layer:
            raise ProbeError("importance columns must equal L*M")
        if not np.all(np.isfinite(self.values)):
            raise ProbeError("importance contains non-finite entries")

    def column(self, layer: int, head: int) -> int:
        return layer * self.heads_per_layer + head

    def head(self, column: int) -> tuple[int, int]:
        return divmod(int(column), self.heads_per_layer)

    def row(self, function) -> np.ndarray:
        return self.values[function.index]

    def grid(self, function) -> np.ndarray:
        return self.row(function).reshape(self.num_layers, self.heads_per_layer)


def importance_matrix(probe: ProbeModel, dataset: ProbeDataset, batch: int = 256) -> ImportanceMatrix:
    """Per class c, mean of sum over feature dims of (d logit_c / d x_j) * x_j.

    The mean runs over the samples labelled c; a class with no samples gets a zero row.
    """
    if len(dataset) == 0:
        raise ProbeError("empty dataset")
    if probe is None or not np.all(np.isfinite(probe.W2)):
        raise ProbeError("probe is not initialised")
    C = probe.W2.shape[1]
    sums = np.zeros((C, probe.slots))
    Y = dataset.targets
    p = probe.params()
    for s in range(0, len(dataset), batch):
        X = probe.check_features(dataset.features[s:s + batch].astype(np.float64))
        y = Y[s:s + batch]
        out, cache = _forward(p, X)
        for c in range(C):
            if not y[:, c].any():
                continue
            dlog = np.zeros_like(out)
            dlog[:, c] = 1.0
            _, dX = _backward(p, X, cache, dlog, want_params=False)
            sums[c] += y[:, c] @ np.sum(dX * X, axis=2)
    counts = Y.sum(axis=0)
    vals = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return ImportanceMatrix(vals, probe.num_layers, probe.heads_per_layer)


def elbow_select(row) -> list[int]:
    """Indices ranked before the point furthest from the chord of the descending curve."""
    y = np.asarray(row, dtype=np.float64)
    if y.size == 0:
        raise ProbeError("empty score row")
    order = np.argsort(-y, kind="stable")
    ys = y[order]
    if y.size <= 2 or ys[0] == ys[-1]:
        return [int(order[0])]
    xn = np.arange(y.size) / (y.size - 1)
    yn = (ys - ys[-1]) / (ys[0] - ys[-1])
    dist = np.abs(xn + yn - 1.0) / np.sqrt(2.0)
    e = int(np.argmax(dist))
    if dist[e] <= ELBOW_TOL:
        return [int(order[0])]
    return [int(i) for i in order[:e]]


def grad_check(probe: ProbeModel, features: np.ndarray, h: float = 1e-4, *, cls: int | None = None,
               num_coords: int = 20, seed: int = 0) -> float:
    """Max relative error of analytic feature gradients against central differences."""
    if not h > 0:
        raise ProbeError("finite-difference step must be positive")
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    classes = range(probe.W2.shape[1]) if cls is None else [cls]
    flat = x.reshape(-1)
    coords = rng.choice(flat.size, size=min(num_coords, flat.size), replace=False)
    worst = 0.0
    for c in classes:
        g = feature_gradients(probe, x[None], c)[0].reshape(-1)
        for i in coords:
            xp, xm = flat.copy(), flat.copy()
            xp[i] += h
            xm[i] -= h
            fd = (logits(probe, xp.reshape(x.shape))[c] - logits(probe, xm.reshape(x.shape))[c]) / (2 * h)
            denom = max(abs(fd), abs(g[i]), 1e-8)
            worst = max(worst, abs(fd - g[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# persistence

_PHEAD = struct.Struct("<4sIIIIIIIq8s")   # magic, version, L, M, d, proj, hidden, C, seed, config digest


def save_probe(probe: ProbeModel, path) -> None:
    C = probe.W2.shape[1]
    with open(path, "wb") as fh:
        fh.write(_PHEAD.pack(PROBE_MAGIC, PROBE_VERSION, probe.num_layers, probe.heads_per_layer,
                             probe.embed_dim, PROJ_DIM, HIDDEN_DIM, C, probe.seed, probe.config_digest))
        for k in ProbeModel.PARAMS:
            fh.write(np.ascontiguousarray(getattr(probe, k), dtype="<f8").tobytes())


def load_probe(path) -> ProbeModel:
    raw = Path(path).read_bytes()
    if len(raw) < _PHEAD.size:
        raise ProbeError("probe file shorter than its header")
    magic, version, L, M, d, proj, hidden, C, seed, digest = _PHEAD.unpack_from(raw)
    if magic != PROBE_MAGIC or version != PROBE_VERSION:
        raise ProbeError(f"not a probe file (magic {magic!r}, version {version})")
    if (proj, hidden) != (PROJ_DIM, HIDDEN_DIM):
        raise ProbeError("probe layer widths differ from this build")
    shapes = [(2 * d, proj), (proj,), (proj * L * M, hidden), (hidden,), (hidden, C), (C,)]
    need = _PHEAD.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise ProbeError(f"probe file length {len(raw)} != expected {need}")
    off, arrs = _PHEAD.size, []
    for s in shapes:
        cnt = int(np.prod(s))
        arrs.append(np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(s).copy())
        off += 8 * cnt
    return ProbeModel(L, M, d, *arrs, seed=seed, config_digest=digest)


def importance_to_csv(imp: ImportanceMatrix) -> str:
    """One block per function: a header line, then L rows of M comma-separated values."""
    lines = []
    for f in FUNCTIONS:
        lines.append(f"# {f.value}")
        for row in imp.grid(f):
            lines.append(",".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def importance_from_csv(text: str) -> ImportanceMatrix:
    blocks: dict[str, list[list[float]]] = {}
    cur = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            cur = line[1:].strip()
            blocks[cur] = []
            continue
        if cur is None:
            raise ProbeError(f"line {lineno}: values before any function header")
        try:
            blocks[cur].append([float(x) for x in line.split(",")])
        except ValueError:
            raise ProbeError(f"line {lineno}: non-numeric entry") from None
    names = [f.value for f in FUNCTIONS]
    if sorted(blocks) != sorted(names):
        raise ProbeError(f"expected function blocks {names}, found {list(blocks)}")
    grids = [np.array(blocks[n]) for n in names]
    shape = grids[0].shape
    if len(shape) != 2 or any(g.shape != shape for g in grids):
        raise ProbeError("function blocks have inconsistent shapes")
    return ImportanceMatrix(np.stack([g.reshape(-1) for g in grids]), shape[0], shape[1])
