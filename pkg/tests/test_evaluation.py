import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acan import _kernels
from acan.core import Network, backward_discriminator, forward_discriminator, forward_extractor
from acan.data import SynthConfig, generate_synthetic
from acan.evaluation import (
    CROSS_CAMERA,
    camera_confusion,
    cmc_map,
    confusion_from_probs,
    evaluate,
    export_embeddings,
    inter_camera_discrepancy,
    off_diagonal_uniformity,
    rank_queries,
)
from acan.objectives import discriminator_loss

from oracles import brute_force_retrieval, naive_distances


def random_instance(rng, nq=None, ng=None, dim=3, ids=6, cams=3):
    nq = nq or int(rng.integers(1, 51))
    ng = ng or int(rng.integers(1, 201))
    q = rng.normal(size=(nq, dim))
    g = rng.normal(size=(ng, dim))
    return (q, g, rng.integers(0, ids, nq), rng.integers(0, cams, nq),
            rng.integers(0, ids, ng), rng.integers(0, cams, ng))


# -- ranking ----------------------------------------------------------------------

def test_exact_copies_rank_first():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(5, 4))
    rr = rank_queries(q, q.copy(), np.arange(5), np.zeros(5, int), np.arange(5), np.ones(5, int))
    assert rr.relevant[:, 0].all()
    cmc, m = cmc_map(rr)
    assert cmc[0] == 1.0 and m == 1.0


def test_single_query_sorted_ranking():
    q = np.zeros((1, 1))
    g = np.array([[0.5], [0.9], [1.2]])
    rr = rank_queries(q, g, [1], [0], [1, 2, 3], [1, 1, 1])
    assert rr.ranking(0).tolist() == [0, 1, 2]
    np.testing.assert_allclose(rr.distances[0], [0.5, 0.9, 1.2])


def test_same_camera_same_identity_is_excluded():
    q = np.zeros((1, 1))
    g = np.array([[0.1], [0.2], [0.3]])
    rr = rank_queries(q, g, [7], [0], [7, 7, 8], [0, 1, 0])
    assert rr.ranking(0).tolist() == [1, 2]
    assert rr.n_valid.tolist() == [2]


def test_ties_break_on_gallery_index():
    g = np.array([[1.0], [-1.0], [1.0]])
    rr = rank_queries(np.zeros((1, 1)), g, [0], [0], [1, 0, 2], [1, 1, 1])
    assert rr.ranking(0).tolist() == [0, 1, 2]


def test_query_without_match_is_counted_not_scored():
    rr = rank_queries(np.zeros((2, 1)), np.ones((2, 1)), [0, 5], [0, 0], [0, 0], [1, 0])
    assert rr.num_excluded == 1
    cmc, m = cmc_map(rr)
    assert m == 1.0


def test_no_valid_query_raises():
    rr = rank_queries(np.zeros((1, 1)), np.ones((1, 1)), [0], [0], [1], [1])
    with pytest.raises(ValueError):
        cmc_map(rr)


@pytest.mark.parametrize("seed", range(5))
def test_ranking_matches_naive_sort(seed):
    q, g, qi, qc, gi, gc = random_instance(np.random.default_rng(seed), nq=8, ng=30)
    rr = rank_queries(q, g, qi, qc, gi, gc)
    dist = naive_distances(q, g)
    for i in range(len(q)):
        keep = [j for j in range(len(g)) if not (gi[j] == qi[i] and gc[j] == qc[i])]
        expected = sorted(keep, key=lambda j: (dist[i, j], j))
        assert rr.ranking(i).tolist() == expected
        assert np.all(np.diff(rr.distances[i, : rr.n_valid[i]]) >= 0)


# -- CMC / mAP ----------------------------------------------------------------------

def test_ap_with_hits_at_one_and_three():
    g = np.array([[1.0], [2.0], [3.0], [4.0]])
    rr = rank_queries(np.zeros((1, 1)), g, [0], [0], [0, 1, 0, 2], [1, 1, 1, 1])
    _, m = cmc_map(rr)
    assert m == pytest.approx(0.5 * (1 + 2 / 3), abs=1e-15)
    assert m == pytest.approx(0.8333, abs=1e-4)


def test_perfect_retrieval():
    q = np.arange(4.0)[:, None]
    g = q + 0.01
    rr = rank_queries(q, g, [0, 1, 2, 3], [0] * 4, [0, 1, 2, 3], [1] * 4)
    cmc, m = cmc_map(rr)
    assert cmc[0] == 1.0 and m == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_cmc_reaches_one_at_gallery_size(seed):
    rr = rank_queries(*random_instance(np.random.default_rng(seed), nq=10, ng=40))
    cmc, _ = cmc_map(rr)
    assert cmc[-1] == 1.0


def test_max_rank_truncates():
    rr = rank_queries(*random_instance(np.random.default_rng(1), nq=10, ng=40))
    cmc, _ = cmc_map(rr, 10)
    assert cmc.shape == (10,)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cmc_monotone_and_bounded(seed):
    rr = rank_queries(*random_instance(np.random.default_rng(seed)))
    if not rr.query_ok.any():
        return
    cmc, m = cmc_map(rr)
    assert np.all(np.diff(cmc) >= 0)
    assert 0 <= cmc.min() and cmc.max() <= 1 and 0 <= m <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_invariant_under_increasing_distance_transform(seed):
    q, g, qi, qc, gi, gc = random_instance(np.random.default_rng(seed), nq=10, ng=40)
    rr = rank_queries(q, g, qi, qc, gi, gc)
    if not rr.query_ok.any():
        return
    # scaling every embedding by a positive factor maps each distance through d -> 3d
    rr2 = rank_queries(3 * q, 3 * g, qi, qc, gi, gc)
    a, b = cmc_map(rr), cmc_map(rr2)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force_exactly(seed):
    q, g, qi, qc, gi, gc = random_instance(np.random.default_rng(1000 + seed))
    rr = rank_queries(q, g, qi, qc, gi, gc)
    if not rr.query_ok.any():
        pytest.skip("no valid query in this draw")
    cmc, m = cmc_map(rr)
    cmc_ref, m_ref, used = brute_force_retrieval(naive_distances(q, g), qi, qc, gi, gc)
    assert used == int(rr.query_ok.sum())
    assert np.array_equal(cmc, cmc_ref)
    assert m == m_ref


def test_kernel_paths_agree():
    if not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    rr = rank_queries(*random_instance(np.random.default_rng(9), nq=40, ng=150))
    keep = rr.query_ok
    a = _kernels.hit_statistics_numpy(rr.relevant[keep], rr.n_valid[keep])
    b = _kernels.hit_statistics_numba(np.ascontiguousarray(rr.relevant[keep]), rr.n_valid[keep])
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


# -- discrepancy --------------------------------------------------------------------

def test_discrepancy_identical_means():
    emb = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    assert inter_camera_discrepancy(emb, [0, 0, 1, 1]) == 0.0


def test_discrepancy_two_cameras():
    emb = np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [2.0, 0.0]])
    assert inter_camera_discrepancy(emb, [0, 0, 1, 1]) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
def test_discrepancy_translation_invariant_and_nonnegative(seed, shift):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(20, 3))
    cams = np.arange(20) % 4
    d = inter_camera_discrepancy(emb, cams)
    assert d >= 0
    assert inter_camera_discrepancy(emb + shift, cams) == pytest.approx(d, abs=1e-9)


def test_discrepancy_empty_camera():
    with pytest.raises(ValueError):
        inter_camera_discrepancy(np.zeros((2, 2)), [0, 0], num_cameras=2)


# -- confusion ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic(SynthConfig(cameras=3, identities_per_camera=4, samples_per_identity=4,
                                          input_dim=5, cross_camera_overlap=3, seed=2))


def test_zero_discriminator_gives_uniform_rows(tiny_ds):
    net = Network.init(np.random.default_rng(0), 5, 3, hidden=(8,), embedding_dim=4)
    net.discriminator.weight[:] = 0
    m = camera_confusion(net, tiny_ds)
    np.testing.assert_allclose(m, np.full((3, 3), 1 / 3), atol=1e-15)
    assert off_diagonal_uniformity(m) == pytest.approx(0.0, abs=1e-12)


def test_trained_discriminator_is_diagonal_dominant():
    ds = generate_synthetic(SynthConfig(cameras=3, identities_per_camera=6, input_dim=6,
                                        camera_shift_scale=6.0, seed=4))
    net = Network.init(np.random.default_rng(0), 6, 3, hidden=(16,), embedding_dim=8)
    emb, _ = forward_extractor(net, ds.features)
    for _ in range(500):
        _, probs = forward_discriminator(net, emb)
        _, g = discriminator_loss(probs, ds.cameras)
        grads, _ = backward_discriminator(net, emb, g)
        net.apply_sgd("discriminator", grads, 0.5)
    m = camera_confusion(net, ds)
    for c in range(3):
        assert m[c, c] > 0.9
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)


def test_uniformity_score_examples():
    assert off_diagonal_uniformity([[0.5, 0.25, 0.25], [0.2, 0.6, 0.2], [0.1, 0.1, 0.8]]) == 0.0
    # row 0 off-diagonal (1, 0) vs uniform (0.5, 0.5): L1 gap 1
    m = [[0.0, 1.0, 0.0], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]
    assert off_diagonal_uniformity(m) == pytest.approx(1 / 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_confusion_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(4), size=30)
    m = confusion_from_probs(probs, np.arange(30) % 4, 4)
    assert (m >= 0).all()
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)


# -- report and export -----------------------------------------------------------------

def test_evaluate_report(tiny_ds):
    net = Network.init(np.random.default_rng(0), 5, 3, hidden=(8,), embedding_dim=4)
    rep = evaluate(net, tiny_ds, max_rank=10)
    assert rep.protocol == CROSS_CAMERA and rep.discrepancy_split == "test"
    assert rep.cmc.shape == (10,)
    assert rep.num_queries == 9 and rep.excluded_queries == 0
    doc = json.loads(rep.dumps())
    assert len(doc["confusion"]) == 9
    assert rep.summary_line().startswith("mAP=")
    assert evaluate(net, tiny_ds, split="train").discrepancy_split == "train"


def test_evaluate_rejects_mismatched_model(tiny_ds):
    net = Network.init(np.random.default_rng(0), 6, 3)
    with pytest.raises(ValueError):
        evaluate(net, tiny_ds)


def test_export_round_trip(tmp_path, tiny_ds):
    net = Network.init(np.random.default_rng(0), 5, 3, hidden=(8,), embedding_dim=4)
    path = tmp_path / "emb.csv"
    export_embeddings(net, tiny_ds, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows[0]) == 3 + 4
    assert len(rows) - 1 == len(tiny_ds)
    back = np.array([[float(v) for v in r[3:]] for r in rows[1:]])
    emb, _ = forward_extractor(net, tiny_ds.features)
    assert np.array_equal(back, emb)
    first = path.read_bytes()
    export_embeddings(net, tiny_ds, path)
    assert path.read_bytes() == first
