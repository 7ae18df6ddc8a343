import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headprobe import probe as pb
from headprobe.trace import ProbeDataset

L, M, D = 2, 3, 4


def _dataset(n=24, seed=0, dead_slots=(4,), dead_dims=(1, 6)):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, L, M, 2 * D)).astype(np.float32)
    for s in dead_slots:
        X[:, s // M, s % M] = 0
    X[..., list(dead_dims)] = 0
    masks = rng.integers(1, 256, size=n).astype(np.uint8)
    prov = np.stack([np.arange(n), np.zeros(n, dtype=int)], axis=1).astype(np.int64)
    return ProbeDataset(X, masks, prov)


# --- init -------------------------------------------------------------------------

def test_init_is_seeded_with_zero_biases():
    a, b = pb.init_probe(L, M, D, 5), pb.init_probe(L, M, D, 5)
    for k in pb.ProbeModel.PARAMS:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    for k in ("bp", "b1", "b2"):
        assert not getattr(a, k).any()
    assert not np.array_equal(a.W1, pb.init_probe(L, M, D, 6).W1)


def test_zero_input_gives_zero_logits():
    p = pb.init_probe(L, M, D, 0)
    np.testing.assert_array_equal(pb.logits(p, np.zeros((L, M, 2 * D))), np.zeros(8))


def test_probe_shapes():
    p = pb.init_probe(4, 8, 256, 0)
    assert p.P.shape == (512, 64) and p.W1.shape == (64 * 32, 512) and p.W2.shape == (512, 8)


# --- training -----------------------------------------------------------------------

def test_zero_epochs_returns_init():
    ds = _dataset()
    p, hist = pb.train_probe(ds, pb.TrainConfig(epochs=0, seed=3))
    ref = pb.init_probe(L, M, D, 3)
    for k in pb.ProbeModel.PARAMS:
        np.testing.assert_array_equal(getattr(p, k), getattr(ref, k))
    assert hist.loss == ()


def test_training_is_deterministic():
    ds = _dataset()
    cfg = pb.TrainConfig(epochs=3, learning_rate=1e-3)
    a, ha = pb.train_probe(ds, cfg)
    b, hb = pb.train_probe(ds, cfg)
    for k in pb.ProbeModel.PARAMS:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    assert ha.loss == hb.loss
    np.testing.assert_array_equal(pb.importance_matrix(a, ds).values, pb.importance_matrix(b, ds).values)


def test_training_lowers_loss():
    ds = _dataset(n=64)
    _, hist = pb.train_probe(ds, pb.TrainConfig(epochs=30, learning_rate=1e-3, dropout=0.0))
    assert hist.loss[-1] < hist.loss[0]


def _naive_train(ds, cfg):
    """Plain float64 Adam on every parameter, no reductions."""
    p = pb.init_probe(L, M, D, cfg.seed)
    params = {k: getattr(p, k).astype(np.float64).copy() for k in pb.ProbeModel.PARAMS}
    mom = {k: np.zeros_like(v) for k, v in params.items()}
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    X = ds.features.reshape(len(ds), L * M, 2 * D).astype(np.float64)
    Y = ds.targets
    rng = np.random.default_rng(cfg.seed + 1)
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(ds))
        for s in range(0, len(ds), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            B = len(idx)
            keep = (rng.random((B, pb.HIDDEN_DIM)) >= cfg.dropout) / (1 - cfg.dropout) if cfg.dropout else None
            xb, yb = X[idx], Y[idx]
            Z = np.einsum("bsf,fp->bsp", xb, params["P"]) + params["bp"]
            Zf = Z.reshape(B, -1)
            Hpre = Zf @ params["W1"] + params["b1"]
            H = np.maximum(Hpre, 0) * (keep if keep is not None else 1)
            out = H @ params["W2"] + params["b2"]
            g_out = (1 / (1 + np.exp(-out)) - yb) / yb.size
            g_H = g_out @ params["W2"].T * (keep if keep is not None else 1) * (Hpre > 0)
            g_Z = (g_H @ params["W1"].T).reshape(Z.shape)
            grads = {"W2": H.T @ g_out, "b2": g_out.sum(0), "W1": Zf.T @ g_H, "b1": g_H.sum(0),
                     "P": np.einsum("bsf,bsp->fp", xb, g_Z), "bp": g_Z.sum((0, 1))}
            t += 1
            for k, g in grads.items():
                mom[k] = cfg.beta1 * mom[k] + (1 - cfg.beta1) * g
                vel[k] = cfg.beta2 * vel[k] + (1 - cfg.beta2) * g * g
                mh = mom[k] / (1 - cfg.beta1 ** t)
                vh = vel[k] / (1 - cfg.beta2 ** t)
                params[k] -= cfg.learning_rate * mh / (np.sqrt(vh) + cfg.adam_eps)
    return params


@pytest.mark.parametrize("dropout", [0.0, 0.3])
def test_reduced_trainer_matches_naive_adam(dropout):
    ds = _dataset(n=40)
    cfg = pb.TrainConfig(epochs=4, learning_rate=1e-3, dropout=dropout, batch_size=16)
    fast, _ = pb.train_probe(ds, cfg)
    ref = _naive_train(ds, cfg)
    # Adam steps are about lr in size whatever the gradient, so single-precision
    # rounding on near-zero gradients shows up as a small fraction of lr
    tol = dict(rtol=1e-4, atol=1e-2 * cfg.learning_rate)
    for k in ("P", "bp", "b1", "W2", "b2"):
        np.testing.assert_allclose(getattr(fast, k), ref[k], err_msg=k, **tol)
    # dead slot blocks may differ individually; only their sum reaches the hidden layer
    fb = fast.W1.reshape(L * M, 64, -1)
    rb = ref["W1"].reshape(L * M, 64, -1)
    live = [s for s in range(L * M) if s != 4]
    np.testing.assert_allclose(fb[live], rb[live], **tol)
    np.testing.assert_allclose(fast.bp @ fb[4], ref["bp"] @ rb[4], **tol)
    x = ds.features[:5]
    np.testing.assert_allclose(pb.logits(fast, x), pb._forward(ref, x.reshape(5, L * M, -1).astype(float))[0],
                               rtol=1e-4, atol=1e-4)


def test_train_config_validation():
    for bad in ({"learning_rate": 0}, {"epochs": -1}, {"dropout": 1.0}, {"batch_size": 0}):
        with pytest.raises(pb.ProbeError):
            pb.TrainConfig(**bad)
    d = pb.TrainConfig()
    assert (d.learning_rate, d.epochs, d.dropout, d.batch_size) == (1e-4, 100, 0.3, 32)


def test_divergence_detected():
    ds = _dataset()
    ds.features[0, 0, 0, 0] = np.nan
    with pytest.raises(pb.DivergenceError):
        pb.train_probe(ds, pb.TrainConfig(epochs=1))


def test_empty_dataset_rejected():
    ds = _dataset().subset([])
    with pytest.raises(pb.ProbeError):
        pb.train_probe(ds)


def test_subset_accuracy_counts_exact_label_sets():
    ds = _dataset(n=4, dead_slots=(), dead_dims=())
    p = pb.init_probe(L, M, D, 0)
    p.W2[:] = 0
    p.b2[:] = np.where(np.arange(8) % 2 == 0, 1.0, -1.0)
    want = int(0b01010101)
    ds.label_masks[:] = [want, want, 1, want]
    assert pb.subset_accuracy(p, ds) == 0.75


# --- gradients ----------------------------------------------------------------------

def test_grad_check_random():
    rng = np.random.default_rng(0)
    for seed in range(5):
        p = pb.init_probe(L, M, D, seed)
        p.b1[:] = rng.normal(scale=0.1, size=p.b1.shape)
        assert pb.grad_check(p, rng.normal(size=(L, M, 2 * D)), 1e-4, seed=seed) <= 1e-4


def _linear_probe(seed=0):
    """All-positive weights and inputs keep every rectifier active."""
    p = pb.init_probe(L, M, D, seed)
    p.P, p.W1 = np.abs(p.P), np.abs(p.W1)
    return p


def test_grad_check_linear_micro_probe():
    p = _linear_probe()
    x = np.abs(np.random.default_rng(1).normal(size=(L, M, 2 * D))) + 1.0
    # central differences are exact on a linear map for any step; a wide step keeps rounding small
    assert pb.grad_check(p, x, 1.0) <= 1e-10


def test_grad_check_rejects_zero_step():
    with pytest.raises(pb.ProbeError):
        pb.grad_check(pb.init_probe(L, M, D, 0), np.zeros((L, M, 2 * D)), 0.0)


# --- importance ---------------------------------------------------------------------

def test_importance_matches_linear_oracle():
    p = _linear_probe(2)
    ds = _dataset(n=10, dead_slots=(), dead_dims=())
    ds.features[:] = np.abs(ds.features) + 0.5
    imp = pb.importance_matrix(p, ds)
    # logit_c = sum_s x_s . (P @ W1_s @ W2[:, c]) + const
    w_eff = np.einsum("fp,sph,hc->csf", p.P, p.W1.reshape(L * M, 64, -1), p.W2)
    X = ds.features.reshape(10, L * M, -1).astype(float)
    Y = ds.targets
    for c in range(8):
        rows = Y[:, c] > 0
        want = np.einsum("nsf,sf->ns", X[rows], w_eff[c]).mean(axis=0) if rows.any() else np.zeros(L * M)
        np.testing.assert_allclose(imp.values[c], want, rtol=1e-9, atol=1e-12)


def test_importance_zero_output_layer():
    p = pb.init_probe(L, M, D, 0)
    p.W2[:] = 0
    np.testing.assert_array_equal(pb.importance_matrix(p, _dataset()).values, 0)


def test_importance_empty_class_row_is_zero():
    ds = _dataset(n=6)
    ds.label_masks[:] = 0b11
    imp = pb.importance_matrix(pb.init_probe(L, M, D, 0), ds)
    assert not imp.values[2:].any()
    assert imp.values[:2].any()


def test_importance_column_mapping():
    imp = pb.ImportanceMatrix(np.zeros((8, 32)), 4, 8)
    assert [imp.head(imp.column(l, m)) for l in range(4) for m in range(8)] == \
        [(l, m) for l in range(4) for m in range(8)]
    with pytest.raises(pb.ProbeError):
        pb.ImportanceMatrix(np.full((8, 32), np.inf), 4, 8)


# --- elbow --------------------------------------------------------------------------

def test_elbow_example():
    assert pb.elbow_select([10, 9, 1, 0.9, 0.8]) == [0, 1]


def test_elbow_unsorted_input():
    assert sorted(pb.elbow_select([0.8, 9, 0.9, 10, 1])) == [1, 3]


def test_elbow_degenerate_rows():
    assert pb.elbow_select([0, 0, 0, 0]) == [0]
    assert pb.elbow_select([3, 1]) == [0]
    with pytest.raises(pb.ProbeError):
        pb.elbow_select([])


@settings(max_examples=100, deadline=None)
@given(row=st.lists(st.floats(0, 100, allow_nan=False), min_size=3, max_size=32),
       s=st.floats(0.01, 100), t=st.floats(-100, 100))
def test_elbow_affine_invariant(row, s, t):
    y = np.asarray(row)
    # ties or near-ties can reorder under rounding; require well-separated values
    sy = np.sort(y)
    if np.min(np.diff(sy)) < 1e-3 * max(1.0, sy[-1] - sy[0]):
        return
    assert pb.elbow_select(y) == pb.elbow_select(s * y + t)


# --- persistence ----------------------------------------------------------------------

def test_probe_roundtrip(tmp_path):
    p, _ = pb.train_probe(_dataset(), pb.TrainConfig(epochs=1, seed=4))
    pb.save_probe(p, tmp_path / "p.bin")
    q = pb.load_probe(tmp_path / "p.bin")
    assert q.seed == 4 and q.config_digest == p.config_digest
    for k in pb.ProbeModel.PARAMS:
        np.testing.assert_array_equal(getattr(q, k), getattr(p, k))
    assert (tmp_path / "p.bin").read_bytes()[:4] == b"HSP1"


def test_probe_file_errors(tmp_path):
    path = tmp_path / "p.bin"
    pb.save_probe(pb.init_probe(L, M, D, 0), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(pb.ProbeError):
        pb.load_probe(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(pb.ProbeError):
        pb.load_probe(path)


def test_importance_csv_roundtrip():
    vals = np.random.default_rng(0).normal(size=(8, 32))
    imp = pb.ImportanceMatrix(vals, 4, 8)
    text = pb.importance_to_csv(imp)
    np.testing.assert_array_equal(pb.importance_from_csv(text).values, vals)
    assert pb.importance_to_csv(pb.importance_from_csv(text)) == text
    assert len(text.splitlines()) == 8 * 5


def test_importance_csv_errors():
    with pytest.raises(pb.ProbeError):
        pb.importance_from_csv("1,2\n")
    with pytest.raises(pb.ProbeError):
        pb.importance_from_csv("# SpatialPerception\n1,x\n")
    with pytest.raises(pb.ProbeError):
        pb.importance_from_csv("# SpatialPerception\n1,2\n")


def test_training_on_all_zero_features_fits_biases_only():
    ds = _dataset(n=8)
    ds.features[:] = 0
    p, hist = pb.train_probe(ds, pb.TrainConfig(epochs=2, learning_rate=1e-2))
    assert len(hist.loss) == 2 and p.b2.any()
    assert not pb.importance_matrix(p, ds).values.any()
