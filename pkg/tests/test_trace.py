import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from headprobe import corpus as C
from headprobe import model as mm
from headprobe import trace as tr


def _record(n, L=2, M=3, d=4, seed=0):
    acts = np.random.default_rng(seed).normal(size=(n, L, M, d))
    return tr.ActivationRecord(0, 0, ("x",) * n, acts, True)


# --- capture -----------------------------------------------------------------------

def test_capture_max_new_one(planted, small_corpus):
    main = small_corpus[0]
    rec = tr.run_and_capture(planted, C.render_example(main, 0), main.subqafs[0].answer, max_new=1)
    cfg = planted.config
    assert rec.contribs.shape == (1, cfg.num_layers, cfg.heads_per_layer, cfg.embed_dim)


def test_capture_correctness(planted, scene7):
    main = C.compose_qa(scene7, "facing", 7)
    for k, s in enumerate(main.subqafs):
        assert tr.run_and_capture(planted, C.render_example(main, k), s.answer).correct


def test_capture_under_full_ablation_is_wrong(planted, scene7):
    main = C.compose_qa(scene7, "facing", 7)
    cfg = planted.config
    z = np.zeros(cfg.embed_dim)
    hooks = mm.HookSet({(l, m): (0.001, z) for l in range(cfg.num_layers) for m in range(cfg.heads_per_layer)})
    for k, s in enumerate(main.subqafs):
        assert not tr.run_and_capture(planted, C.render_example(main, k), s.answer, hooks).correct


# --- token selection -----------------------------------------------------------------

def test_topk_examples():
    rec = _record(5)
    assert tr.select_topk_tokens(rec, [2, 0, 4, 1, 3], 2) == [2, 0]
    assert sorted(tr.select_topk_tokens(rec, [2, 0, 4, 1, 3], 9)) == [0, 1, 2, 3, 4]
    assert tr.DEFAULT_TOPK == 3


def test_topk_errors():
    with pytest.raises(tr.TraceError):
        tr.select_topk_tokens(_record(3), [0], 0)
    empty = tr.ActivationRecord(0, 0, (), np.zeros((0, 1, 1, 1)), False)
    with pytest.raises(tr.TraceError):
        tr.select_topk_tokens(empty, [0], 3)


def test_topk_skips_positions_beyond_generation():
    assert tr.select_topk_tokens(_record(2), [4, 1, 0], 3) == [1, 0]


@pytest.mark.parametrize("strategy,expected", [("first", [0]), ("last", [3]), ("full", [0, 1, 2, 3])])
def test_position_strategies(strategy, expected):
    assert tr.positions_for(_record(4), [2, 1], strategy) == expected


# --- features ------------------------------------------------------------------------

def test_single_index_feature_is_that_activation():
    rec = _record(4)
    np.testing.assert_array_equal(tr.head_feature(rec, [2]), rec.contribs[2])


def test_two_index_feature_is_midpoint():
    rec = _record(4)
    np.testing.assert_allclose(tr.head_feature(rec, [0, 3]), (rec.contribs[0] + rec.contribs[3]) / 2, atol=1e-15)


def test_feature_is_order_invariant():
    rec = _record(5)
    ref = tr.head_feature(rec, [0, 2, 4])
    for perm in itertools.permutations([0, 2, 4]):
        np.testing.assert_array_equal(tr.head_feature(rec, perm), ref)


def test_feature_rejects_bad_indices():
    with pytest.raises(tr.TraceError):
        tr.head_feature(_record(2), [5])
    with pytest.raises(tr.TraceError):
        tr.head_feature(_record(2), [])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 1000))
def test_full_mean_matches_naive_sum(n, seed):
    rec = _record(n, seed=seed)
    naive = np.zeros(rec.contribs.shape[1:])
    for i in range(n):
        naive = naive + rec.contribs[i]
    np.testing.assert_allclose(tr.head_feature(rec, range(n)), naive / n, atol=1e-12)


def test_layer_summary_shared_vector():
    v = np.arange(4.0)
    grid = np.broadcast_to(v, (2, 3, 4)).copy()
    out = tr.augment_with_layer_summary(grid)
    np.testing.assert_allclose(out, np.concatenate([grid, grid], axis=2))


def test_layer_summary_single_nonzero_head():
    grid = np.zeros((1, 4, 3))
    u = np.array([4.0, -8.0, 2.0])
    grid[0, 1] = u
    out = tr.augment_with_layer_summary(grid)
    for m in range(4):
        np.testing.assert_allclose(out[0, m, 3:], u / 4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5, 4), elements=st.floats(-1e3, 1e3)))
def test_layer_summary_matches_naive_mean(grid):
    out = tr.augment_with_layer_summary(grid)
    for l in range(3):
        acc = np.zeros(4)
        for m in range(5):
            acc = acc + grid[l, m]
        for m in range(5):
            np.testing.assert_allclose(out[l, m, 4:], acc / 5, atol=1e-12)
            np.testing.assert_array_equal(out[l, m, :4], grid[l, m])


def test_layer_summary_needs_grid():
    with pytest.raises(tr.TraceError):
        tr.augment_with_layer_summary(np.zeros((3, 4)))


# --- datasets ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_mains(small_corpus):
    return small_corpus[:12]


def test_planted_dataset_keeps_every_subquestion(planted, small_mains, tmp_path):
    ds = tr.build_probe_dataset(small_mains, planted, cache_path=tmp_path / "c.hsc")
    assert len(ds) == sum(len(m.subqafs) for m in small_mains)
    cfg = planted.config
    assert ds.features.shape[1:] == (cfg.num_layers, cfg.heads_per_layer, 2 * cfg.embed_dim)
    assert (tmp_path / "c.hsc.json").exists()
    back = tr.read_cache(tmp_path / "c.hsc", expect=(4, 8, 256))
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.label_masks, ds.label_masks)
    np.testing.assert_array_equal(back.provenance, ds.provenance)


def test_labels_follow_subquestions(planted, small_mains):
    ds = tr.build_probe_dataset(small_mains, planted)
    by_id = {m.example_id: m for m in small_mains}
    for i, (eid, step) in enumerate(ds.provenance):
        assert ds.labels(i) == by_id[int(eid)].subqafs[int(step)].functions


def test_inert_model_gives_empty_dataset(inert, small_mains):
    with pytest.raises(tr.EmptyDatasetError, match="failing templates"):
        tr.build_probe_dataset(small_mains, inert)


def test_empty_split_rejected(planted):
    with pytest.raises(tr.TraceError):
        tr.build_probe_dataset([], planted)


def test_correct_only_filter(detuned, small_mains):
    caps = tr.capture_split(detuned, small_mains)
    assert not all(c.correct for c in caps)
    ds = tr.dataset_from_captures(caps)
    good = {(c.example_id, c.step) for c in caps if c.correct}
    assert {(int(a), int(b)) for a, b in ds.provenance} == good


def test_cache_detects_truncation_and_mismatch(planted, small_mains, tmp_path):
    p = tmp_path / "c.hsc"
    tr.write_cache(tr.build_probe_dataset(small_mains[:2], planted), p)
    with pytest.raises(tr.CacheError):
        tr.read_cache(p, expect=(4, 8, 128))
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(tr.CacheError, match="length"):
        tr.read_cache(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(tr.CacheError, match="magic"):
        tr.read_cache(p)
