import itertools
import math

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import make_episode, random_episode
from spurbench.episodes import Episode
from spurbench.errors import HeadError, SinkhornError
from spurbench.heads import (DEFAULTS, HEADS, HeadConfig, Prediction, bpa_transform, classify,
                             classify_bdcspn, classify_cosine, classify_laplacianshot, classify_linear,
                             classify_proto, classify_protolp, dn4_scores, knn_graph, laplacian_energy,
                             lp_affinity, propagate_labels, rectify_prototypes, sinkhorn,
                             train_cosine_weights, train_logistic)

ALL_HEADS = sorted(HEADS)

# tight low-dimensional fixtures make the default bpa kernel badly conditioned
FIXTURE_CFG = {"bpa": {"eps": 0.2, "max_iter": 2000}}


def fixture_cfg(kind):
    return HeadConfig(kind, FIXTURE_CFG.get(kind, {}))


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- config

def test_config_merges_defaults_and_validates():
    cfg = HeadConfig("protolp", {"rho": 0.5})
    assert cfg["rho"] == 0.5 and cfg["knn"] == DEFAULTS["protolp"]["knn"]
    with pytest.raises(HeadError):
        HeadConfig("protolp", {"rho": 1.0})
    with pytest.raises(HeadError):
        HeadConfig("proto", {"tau": 1.0})
    with pytest.raises(HeadError):
        HeadConfig("nope")
    with pytest.raises(HeadError):
        HeadConfig("dn4", {"k": 0})


def test_argmax_ties_go_to_lowest_index():
    p = Prediction(np.array([[0.5, 0.5], [0.2, 0.8]]))
    assert p.labels.tolist() == [0, 1]


# ---------------------------------------------------------------- generic properties

@pytest.mark.parametrize("kind", ALL_HEADS)
def test_rows_sum_to_one(kind):
    rng = np.random.default_rng(0)
    for _ in range(5):
        ep, emb = random_episode(rng, n_frames=4)
        post = classify(ep, emb, fixture_cfg(kind)).posteriors
        assert post.shape == (len(ep.query), ep.n_way)
        assert np.all(post >= 0)
        assert np.allclose(post.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("kind", ALL_HEADS)
def test_permutation_equivariance(kind):
    rng = np.random.default_rng(1)
    ep, emb = random_episode(rng, n_way=4, n_frames=4)
    perm = [2, 0, 3, 1]
    permuted = Episode(tuple(ep.classes[i] for i in perm), ep.support, ep.query, ep.mode, ep.seed)
    a = classify(ep, emb, fixture_cfg(kind)).posteriors
    b = classify(permuted, emb, fixture_cfg(kind)).posteriors
    assert np.allclose(b, a[:, perm], atol=1e-7)


@pytest.mark.parametrize("kind", ALL_HEADS)
def test_query_order_does_not_change_predictions(kind):
    rng = np.random.default_rng(2)
    ep, emb = random_episode(rng, n_frames=4)
    order = rng.permutation(len(ep.query))
    shuffled = Episode(ep.classes, ep.support, tuple(ep.query[i] for i in order), ep.mode, ep.seed)
    a = classify(ep, emb, fixture_cfg(kind)).labels
    b = classify(shuffled, emb, fixture_cfg(kind)).labels
    assert np.array_equal(b, a[order])


# ---------------------------------------------------------------- proto

def test_proto_two_way_hand_fixture():
    ep, emb = make_episode([([1, 0], "x"), ([0, 1], "y")], [([0.9, 0.1], "x")])
    post = classify_proto(ep, emb).posteriors[0]
    w = np.array([math.exp(-0.02), math.exp(-1.62)])
    assert np.allclose(post, w / w.sum(), atol=1e-12)


def test_proto_against_brute_force_softmax():
    rng = np.random.default_rng(3)
    for _ in range(10):
        ep, emb = random_episode(rng, k_shot=3)
        s = emb.vectors(it.clip_ref for it in ep.support)
        q = emb.vectors(it.clip_ref for it in ep.query)
        protos = [np.mean([s[i] for i in range(len(s)) if ep.support_labels[i] == c], axis=0)
                  for c in range(ep.n_way)]
        dist = [[sum((qi[d] - p[d]) ** 2 for d in range(len(p))) for p in protos] for qi in q]
        assert np.allclose(classify_proto(ep, emb).posteriors, softmax_rows(-np.array(dist)), atol=1e-6)


def test_proto_exact_match_wins():
    ep, emb = make_episode([([1, 2], "x"), ([3, -1], "y")], [([3, -1], "y")])
    post = classify_proto(ep, emb).posteriors[0]
    assert post.argmax() == 1 and post[1] == post.max()


def test_proto_scale_probe():
    rng = np.random.default_rng(4)
    ep, emb = random_episode(rng)
    base = classify_proto(ep, emb)
    for g in (0.5, 0.7):
        scaled_all = type(emb)({r: g * emb[r] for r in emb.refs})
        assert np.array_equal(classify_proto(ep, scaled_all).labels, base.labels)
        q_refs = {it.clip_ref for it in ep.query}
        scaled_q = type(emb)({r: (g * emb[r] if r in q_refs else emb[r]) for r in emb.refs})
        assert not np.allclose(classify_proto(ep, scaled_q).posteriors, base.posteriors)


# ---------------------------------------------------------------- cosine

def cosine_loss(w_flat, xn, y, tau, l2, shape):
    w = w_flat.reshape(shape)
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    z = tau * xn @ wn.T
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(y.size), y].mean() + 0.5 * l2 * np.sum(w * w)


def test_cosine_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 5))
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    y = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    w0 = rng.standard_normal((3, 5))
    lr, tau, l2 = 1e-3, 10.0, 1e-3
    step = (w0 - train_cosine_weights(xn, y, w0, tau, lr, 1, l2)) / lr
    num = np.zeros(w0.size)
    h = 1e-6
    for i in range(w0.size):
        e = np.zeros(w0.size)
        e[i] = h
        num[i] = (cosine_loss(w0.ravel() + e, xn, y, tau, l2, w0.shape)
                  - cosine_loss(w0.ravel() - e, xn, y, tau, l2, w0.shape)) / (2 * h)
    assert np.allclose(step.ravel(), num, atol=1e-6)


def test_cosine_scale_invariance_of_queries():
    rng = np.random.default_rng(6)
    ep, emb = random_episode(rng)
    base = classify_cosine(ep, emb).posteriors
    q_refs = {it.clip_ref for it in ep.query}
    for g in (0.5, 0.7, 3.0):
        scaled = type(emb)({r: (g * emb[r] if r in q_refs else emb[r]) for r in emb.refs})
        assert np.allclose(classify_cosine(ep, scaled).posteriors, base, atol=1e-12)


def test_cosine_one_step_matches_normalized_prototype():
    rng = np.random.default_rng(7)
    ep, emb = random_episode(rng, n_way=2, k_shot=3, spread=5.0)
    s = emb.vectors(it.clip_ref for it in ep.support)
    q = emb.vectors(it.clip_ref for it in ep.query)
    protos = np.stack([s[ep.support_labels == c].mean(0) for c in range(2)])
    pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    one = classify_cosine(ep, emb, HeadConfig("cosine", {"n_iter": 1}))
    assert np.array_equal(one.labels, np.argmax(qn @ pn.T, axis=1))


def test_cosine_angle_ordering():
    ep, emb = make_episode([([1, 0], "x"), ([0, 1], "y")],
                           [([math.cos(math.pi / 6), math.sin(math.pi / 6)], "x")])
    assert classify_cosine(ep, emb).labels[0] == 0


def test_cosine_zero_vector():
    ep, emb = make_episode([([1, 0], "x"), ([0, 1], "y")], [([0, 0], "x")])
    with pytest.raises(HeadError, match="cannot normalize"):
        classify_cosine(ep, emb)


# ---------------------------------------------------------------- linear

def test_linear_separable_support_accuracy():
    rng = np.random.default_rng(8)
    x = np.vstack([rng.normal(3, 0.3, (5, 2)), rng.normal(-3, 0.3, (5, 2))])
    y = np.array([0] * 5 + [1] * 5)
    w, b = train_logistic(x, y, 2, 0.01, 100, 1e-3)
    assert np.array_equal(np.argmax(x @ w.T + b, axis=1), y)


def test_linear_one_shot_query_equals_support():
    ep, emb = make_episode([([2, 1, 0], "x"), ([0, 1, 3], "y")], [([0, 1, 3], "y"), ([2, 1, 0], "x")])
    assert classify_linear(ep, emb).labels.tolist() == [1, 0]


def test_linear_matches_converged_optimizer():
    rng = np.random.default_rng(9)
    ep, emb = random_episode(rng, n_way=3, k_shot=4, dim=4, spread=4.0)
    s = emb.vectors(it.clip_ref for it in ep.support)
    q = emb.vectors(it.clip_ref for it in ep.query)
    y, l2 = ep.support_labels, 1e-3

    def loss(theta):
        w, b = theta[:12].reshape(3, 4), theta[12:]
        z = s @ w.T + b
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(y.size), y].mean() + 0.5 * l2 * np.sum(w * w)

    theta = minimize(loss, np.zeros(15), method="L-BFGS-B", options={"maxiter": 5000}).x
    ref = np.argmax(q @ theta[:12].reshape(3, 4).T + theta[12:], axis=1)
    assert np.array_equal(classify_linear(ep, emb).labels, ref)


# ---------------------------------------------------------------- dn4

def test_dn4_against_exhaustive_pairing():
    rng = np.random.default_rng(10)
    q_frames = [rng.standard_normal((4, 5)) for _ in range(3)]
    c_frames = [rng.standard_normal((8, 5)) for _ in range(2)]

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    for k in (1, 3):
        ref = np.zeros((3, 2))
        for i, qf in enumerate(q_frames):
            for c, cf in enumerate(c_frames):
                for d in qf:
                    sims = sorted((cos(d, e) for e in cf), reverse=True)
                    ref[i, c] += sum(sims[:k])
        assert np.allclose(dn4_scores(q_frames, c_frames, k), ref, atol=1e-12)


def test_dn4_identical_descriptors_win():
    rng = np.random.default_rng(11)
    fa, fb = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    ep, emb = make_episode([(np.ones(6), "x"), (np.ones(6), "y")], [(np.ones(6), "x")],
                           frames={"s0": fa, "s1": fb, "q0": fa.copy()})
    assert classify(ep, emb, "dn4").labels[0] == 0


def test_dn4_single_descriptor_is_nearest_neighbour_cosine():
    rng = np.random.default_rng(12)
    ep, emb = random_episode(rng, n_way=3, k_shot=2)
    frames = {r: emb[r][None, :] for r in emb.refs}
    emb_f = type(emb)({r: emb[r] for r in emb.refs}, frames)
    s = emb.vectors(it.clip_ref for it in ep.support)
    q = emb.vectors(it.clip_ref for it in ep.query)
    sn, qn = s / np.linalg.norm(s, axis=1, keepdims=True), q / np.linalg.norm(q, axis=1, keepdims=True)
    best = ep.support_labels[np.argmax(qn @ sn.T, axis=1)]
    got = classify(ep, emb_f, HeadConfig("dn4", {"k": 1})).labels
    assert np.array_equal(got, best)


def test_dn4_requires_frames():
    ep, emb = make_episode([([1, 0], "x"), ([0, 1], "y")], [([1, 0], "x")])
    from spurbench.errors import EmbeddingError
    with pytest.raises(EmbeddingError, match="no local descriptors"):
        classify(ep, emb, "dn4")


# ---------------------------------------------------------------- laplacianshot

def test_laplacianshot_lambda_zero_is_proto():
    rng = np.random.default_rng(13)
    for _ in range(5):
        ep, emb = random_episode(rng)
        got = classify_laplacianshot(ep, emb, HeadConfig("laplacianshot", {"lam": 0.0}))
        assert np.array_equal(got.labels, classify_proto(ep, emb).labels)


def test_laplacianshot_single_query_is_proto():
    rng = np.random.default_rng(14)
    ep, emb = random_episode(rng, n_query=1)
    ep = Episode(ep.classes, ep.support, ep.query[:1], ep.mode, ep.seed)
    for lam in (0.7, 5.0):
        got = classify_laplacianshot(ep, emb, HeadConfig("laplacianshot", {"lam": lam}))
        assert np.allclose(got.posteriors, classify_proto(ep, emb).posteriors)


def test_laplacianshot_cluster_fixture_matches_enumeration():
    support = [([0.0, 0.0], "A"), ([4.0, 0.0], "B")]
    query = [([2.1, 0.0], "A"), ([1.5, 0.3], "A"), ([1.5, -0.3], "A"),
             ([6.0, 0.0], "B"), ([6.0, 0.3], "B"), ([6.0, -0.3], "B")]
    ep, emb = make_episode(support, query)
    cfg = HeadConfig("laplacianshot", {"knn": 2, "lam": 0.7})
    q = emb.vectors(it.clip_ref for it in ep.query)
    unary = np.array([[np.sum((x - np.array(p)) ** 2) for p, _ in support] for x in q])
    w = knn_graph(q, 2)
    best = min(itertools.product(range(2), repeat=6),
               key=lambda lab: laplacian_energy(unary, w, np.array(lab), 0.7))
    # the first query starts on the wrong side of the prototype boundary
    assert np.argmin(unary[0]) == 1
    assert classify_laplacianshot(ep, emb, cfg).labels.tolist() == list(best) == [0, 0, 0, 1, 1, 1]


# ---------------------------------------------------------------- bd-cspn

def test_bdcspn_zero_shift_when_means_agree():
    s = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = np.array([[0.8, 0.2], [0.2, 0.8]])
    q_shifted, _ = rectify_prototypes(s, np.array([0, 1]), q, 2, 10.0)
    assert np.allclose(q_shifted, q)


def test_bdcspn_cancels_shared_offset():
    rng = np.random.default_rng(15)
    ep, emb = random_episode(rng)
    q_refs = {it.clip_ref for it in ep.query}
    offset = rng.standard_normal(emb.dim) * 5
    moved = type(emb)({r: (emb[r] + offset if r in q_refs else emb[r]) for r in emb.refs})
    assert np.allclose(classify_bdcspn(ep, moved).posteriors, classify_bdcspn(ep, emb).posteriors)


def test_bdcspn_rectified_prototypes_by_hand():
    s = np.array([[2.0, 0.0], [0.0, 2.0]])
    ys = np.array([0, 1])
    q = np.array([[1.0, 0.2], [0.2, 1.0]])
    eps = 10.0
    q_shift = q + (s.mean(0) - q.mean(0))
    p0 = s.copy()

    def soft(x):
        c = [x @ p / (np.linalg.norm(x) * np.linalg.norm(p)) for p in p0]
        e = np.exp(eps * np.array(c))
        return e / e.sum()

    num = np.zeros((2, 2))
    den = np.zeros(2)
    for x, y in zip(s, ys):
        num[y] += soft(x)[y] * x
        den[y] += soft(x)[y]
    for x in q_shift:
        wts = soft(x)
        num += wts[:, None] * x
        den += wts
    _, protos = rectify_prototypes(s, ys, q, 2, eps)
    assert np.allclose(protos, num / den[:, None])


# ---------------------------------------------------------------- proto-lp

def test_propagate_matches_dense_inverse_on_line_graph():
    w = np.zeros((4, 4))
    for i in range(3):
        w[i, i + 1] = w[i + 1, i] = 1.0
    d = w.sum(1)
    s = w / np.sqrt(np.outer(d, d))
    y0 = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    ref = np.linalg.inv(np.eye(4) - 0.9 * s) @ y0
    assert np.allclose(propagate_labels(s, y0, 0.9), ref, atol=1e-12)
    series = sum(np.linalg.matrix_power(0.9 * s, t) for t in range(400)) @ y0
    assert np.allclose(ref, series, atol=1e-9)


def test_lp_affinity_against_loop_oracle():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((7, 3))
    n, k = 7, 3
    d2 = np.array([[np.sum((a - b) ** 2) for b in x] for a in x])
    sigma2 = np.median([d2[i, j] for i in range(n) for j in range(n) if i != j])
    near = [set(sorted((j for j in range(n) if j != i), key=lambda j: d2[i, j])[:k]) for i in range(n)]
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and (j in near[i] or i in near[j]):
                w[i, j] = math.exp(-d2[i, j] / sigma2)
    deg = w.sum(1)
    ref = w / np.sqrt(np.outer(deg, deg))
    assert np.allclose(lp_affinity(x, k), ref, atol=1e-12)


def test_protolp_disconnected_components():
    rng = np.random.default_rng(17)
    a = rng.normal(0, 0.1, (4, 2))
    b = rng.normal(0, 0.1, (4, 2)) + 100
    support = [(a[0], "A"), (b[0], "B")]
    query = [(v, "A") for v in a[1:]] + [(v, "B") for v in b[1:]]
    ep, emb = make_episode(support, query)
    got = classify_protolp(ep, emb, HeadConfig("protolp", {"knn": 2, "normalize": False}))
    assert got.labels.tolist() == [0, 0, 0, 1, 1, 1]


def test_protolp_small_rho_is_one_hop_nearest_support():
    rng = np.random.default_rng(18)
    ep, emb = random_episode(rng, n_way=3, k_shot=1, n_query=2, dim=3)
    cfg = HeadConfig("protolp", {"rho": 1e-6, "knn": 8, "normalize": False})
    x = emb.vectors([it.clip_ref for it in ep.support] + [it.clip_ref for it in ep.query])
    s = lp_affinity(x, 8)
    ref = np.argmax(s[3:, :3], axis=1)
    assert np.array_equal(classify_protolp(ep, emb, cfg).labels, ep.support_labels[ref])


def test_protolp_zero_queries():
    ep, emb = make_episode([([1, 0], "x"), ([0, 1], "y")], [])
    assert classify_protolp(ep, emb).posteriors.shape == (0, 2)


def test_protolp_rejects_rho_one():
    with pytest.raises(HeadError):
        propagate_labels(np.zeros((2, 2)), np.zeros((2, 1)), 1.0)


# ---------------------------------------------------------------- bpa / sinkhorn

def alternating_projections(k, n_iter=20000):
    p = k.copy()
    for _ in range(n_iter):
        p = p / p.sum(axis=1, keepdims=True)
        p = p / p.sum(axis=0, keepdims=True)
    return p


def test_sinkhorn_matches_alternating_projections():
    rng = np.random.default_rng(19)
    x = rng.standard_normal((5, 4))
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    log_k = xn @ xn.T / 0.2
    np.fill_diagonal(log_k, -np.inf)
    ours = sinkhorn(log_k, max_iter=5000, tol=1e-9)
    ref = alternating_projections(np.exp(log_k))
    assert np.allclose(ours, ref, atol=1e-6)


def test_bpa_transform_is_doubly_stochastic():
    rng = np.random.default_rng(20)
    z = bpa_transform(rng.standard_normal((75, 32)))
    assert np.allclose(z.sum(0), 1.0, atol=1e-6) and np.allclose(z.sum(1), 1.0, atol=1e-6)
    assert np.all(np.diag(z) == 0)


def test_bpa_identical_items_have_mirrored_rows():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((6, 5))
    x[3] = x[1]
    z = bpa_transform(x, eps=0.2, max_iter=2000)
    # identical except where each row meets itself and its twin (zero diagonal)
    keep = [i for i in range(6) if i not in (1, 3)]
    assert np.allclose(z[1, keep], z[3, keep], atol=1e-12)
    assert z[1, 3] == pytest.approx(z[3, 1])


def test_sinkhorn_budget_exceeded_reports_residual():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((20, 4))
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    log_k = xn @ xn.T / 0.01
    np.fill_diagonal(log_k, -np.inf)
    with pytest.raises(SinkhornError, match="sinkhorn budget exceeded") as exc:
        sinkhorn(log_k, max_iter=1, tol=1e-12)
    assert exc.value.residual > 1e-12


def test_bpa_converges_on_generator_episodes(catalog, synthetic):
    from spurbench.episodes import EpisodeSpec, Mode, sample_episodes
    _, pool, emb = synthetic
    for mode in (Mode.IID, Mode.OOD):
        for ep in sample_episodes(catalog, EpisodeSpec(5, 5, 10, mode, 3), pool, 40):
            classify(ep, emb, "bpa")
