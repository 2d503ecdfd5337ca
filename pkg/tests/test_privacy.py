import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from muffliato import gossip, graph, privacy
from muffliato.errors import AccountingError, InvalidParameter, SigmaTooSmall

P = privacy.PrivacyParams(alpha=2.0, delta=1.0, sigma2=1.0)


def brute_force_eps(mats: list[np.ndarray], params: privacy.PrivacyParams) -> np.ndarray:
    """eps[u, v] straight from the definition with dense products, one pair at a time."""
    n = mats[0].shape[0]
    c = params.alpha * params.delta ** 2 / (2 * params.sigma2)
    eps = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            if u == v:
                continue
            M = np.eye(n)
            total = 0.0
            for W in mats:
                for w in range(n):
                    if w != v and W[v, w] > 0:
                        total += M[w, u] ** 2 / np.dot(M[w], M[w])
                M = W @ M
            eps[u, v] = c * total
    return eps


def test_per_message_loss():
    assert privacy.PrivacyParams(3.0, 0.5, 2.0).per_message == pytest.approx(3 * 0.25 / 4)
    with pytest.raises(InvalidParameter):
        privacy.PrivacyParams(1.0)
    with pytest.raises(InvalidParameter):
        privacy.PrivacyParams(2.0, sigma2=0.0)


@pytest.mark.parametrize("alpha,delta,sigma", [(2, 0.5, 0.7), (3, 1.0, 1.0), (10, 1.0, 2.0)])
def test_gaussian_divergence_by_quadrature(alpha, delta, sigma):
    def integrand(z):
        return math.exp(-(alpha * (z - delta) ** 2 + (1 - alpha) * z * z) / (2 * sigma * sigma)) / (
            math.sqrt(2 * math.pi) * sigma)
    val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=0, epsrel=1e-13)
    assert math.log(val) / (alpha - 1) == pytest.approx(
        privacy.gaussian_renyi_divergence(delta, sigma * sigma, alpha), abs=1e-9)


@pytest.mark.parametrize("g", [graph.gen_path(4), graph.gen_complete(4), graph.gen_star(4), graph.gen_grid(2, 3)],
                         ids=["path4", "K4", "star4", "grid2x3"])
def test_fixed_graph_matches_brute_force(g):
    W = gossip.hamilton_matrix(g)
    plm = privacy.pairwise_loss_sync(W, 6, P)
    assert np.allclose(plm.eps, brute_force_eps([W.entries] * 6, P), rtol=1e-12, atol=1e-15)


def test_time_varying_matches_brute_force():
    sched = gossip.dropout_schedule(12, 0.4, 0.3, 8, seed=4)
    plm = privacy.pairwise_loss_schedule(sched, P)
    mats = [m.toarray() for m in sched.matrices]
    assert np.allclose(plm.eps, brute_force_eps(mats, P), rtol=1e-12, atol=1e-15)


def test_edge_schedule_matches_matrix_form():
    edges = [(0, 1), (1, 2), (2, 3), (0, 1), (1, 3)]
    by_edge = privacy.pairwise_loss_schedule(gossip.Schedule.from_edges(4, edges), P)
    mats = []
    for v, w in edges:
        M = np.eye(4)
        M[[v, v, w, w], [v, w, v, w]] = 0.5
        mats.append(M)
    assert np.allclose(by_edge.eps, brute_force_eps(mats, P), rtol=1e-12)
    assert np.allclose(by_edge.eps, privacy.pairwise_loss_schedule(gossip.Schedule.from_matrices(mats), P).eps)


def test_path3_single_step():
    # one step on a path: each neighbor sees exactly the other's noisy value
    plm = privacy.pairwise_loss_sync(gossip.hamilton_matrix(graph.gen_path(3)), 1, P)
    expect = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    assert np.allclose(plm.eps, expect)


def test_column_identity_and_self_check():
    plm = privacy.pairwise_loss_sync(gossip.hamilton_matrix(graph.gen_erdos_renyi(30, 0.2, seed=1)), 7, P)
    lhs = (plm.eps.sum(axis=0) + plm.self_loss) / plm.n
    rhs = privacy.closed_form_mean(plm.msg_count, plm.n, P)
    assert np.allclose(lhs, rhs, rtol=1e-12)
    assert plm.column_identity_residual().max() < 1e-12
    bad = privacy.PairwiseLossMatrix(plm.eps * 1.01, plm.msg_count, P, plm.self_loss)
    with pytest.raises(AccountingError):
        bad.check_column_identity()


def test_observer_subset_matches_full():
    sched = gossip.dropout_schedule(20, 0.3, 0.2, 6, seed=0)
    full, msg = privacy.observer_terms(sched)
    sub, smsg = privacy.observer_terms(sched, [3, 7])
    assert np.allclose(sub, full[[3, 7]])
    assert smsg.tolist() == msg[[3, 7]].tolist()


def test_mean_loss():
    W = gossip.hamilton_matrix(graph.gen_complete(5))
    plm = privacy.pairwise_loss_sync(W, 3, P)
    assert privacy.mean_loss(plm, 2) == pytest.approx(plm.eps[:, 2].sum() / 5)


def test_ring_losses_vanish_beyond_reach():
    g = graph.gen_ring(20)
    plm = privacy.pairwise_loss_sync(gossip.hamilton_matrix(g), 3, P)
    D = graph.all_pairs_distances(g)
    # after t steps information has travelled t hops; the last message sent at t = T-1
    assert np.all(plm.eps[D > 3] == 0.0)
    assert np.all(plm.eps[(D <= 3) & (D > 0)] > 0)


def test_random_walk_bound_dominates():
    for g in (graph.gen_path(5), graph.gen_complete(4)):
        W = gossip.hamilton_matrix(g)
        for T in (1, 4, 9):
            plm = privacy.pairwise_loss_sync(W, T, P)
            for u in range(g.n):
                for v in range(g.n):
                    if u != v:
                        assert privacy.random_walk_bound(W, T, u, v, P) >= plm.eps[u, v]


def test_er_bound_gate():
    p = privacy.PrivacyParams(2.0, 1.0, 1.0)
    near, far, q = privacy.er_bound(100, 0.05, 5, 10, p)
    assert near == pytest.approx(1.0)
    assert far == pytest.approx(2 * 10 * 5 / 95)
    assert q == 0.05
    with pytest.raises(SigmaTooSmall):
        privacy.er_bound(100, 0.05, 5, 10, privacy.PrivacyParams(3.0, 1.0, 2.9))
    privacy.er_bound(100, 0.05, 5, 10, privacy.PrivacyParams(3.0, 1.0, 3.0))
    with pytest.raises(InvalidParameter):
        privacy.er_bound(10, 0.5, 9, 1, p)


def test_collusion_counts_each_message_once():
    sched = gossip.Schedule.constant(gossip.hamilton_matrix(graph.gen_path(3)), 1)
    assert privacy.collusion_loss(sched, 1, [0, 2], P) == pytest.approx(1.0)
    # a single colluder sees what it would see alone
    plm = privacy.pairwise_loss_schedule(gossip.Schedule.constant(gossip.hamilton_matrix(graph.gen_ring(7)), 4), P)
    sched = gossip.Schedule.constant(gossip.hamilton_matrix(graph.gen_ring(7)), 4)
    assert privacy.collusion_loss(sched, 2, [5], P) == pytest.approx(plm.eps[2, 5])


def test_group_loss_single_member_matches_pairwise():
    W = gossip.hamilton_matrix(graph.gen_grid(3, 3))
    sched = gossip.Schedule.constant(W, 5)
    plm = privacy.pairwise_loss_schedule(sched, P)
    assert privacy.group_loss(sched, [4], 0, P) == pytest.approx(plm.eps[4, 0], rel=1e-12)
    both = privacy.group_loss(sched, [1, 3], 0, P)
    assert both == pytest.approx(plm.eps[1, 0] + plm.eps[3, 0], rel=1e-12)


def test_sgd_ledger_composes_rounds():
    W = gossip.hamilton_matrix(graph.gen_complete(6))
    one = privacy.sgd_privacy_loss(W, 1, 3, 2.0, 1.0, 2.0)
    ten = privacy.sgd_privacy_loss(W, 10, 3, 2.0, 1.0, 2.0)
    assert np.allclose(ten.eps, 10 * one.eps)
    sched = privacy.sgd_privacy_loss_schedule([(W, 3)] * 10, 2.0, 1.0, 2.0)
    assert np.allclose(sched.eps, ten.eps)
    part = privacy.sgd_privacy_loss_schedule([(W, 3)] * 10, 2.0, 1.0, 2.0, observers=[1])
    assert np.allclose(part.eps[:, 1], ten.eps[:, 1])


def test_rdp_to_dp():
    assert privacy.rdp_to_dp(2.0, 1.0, math.exp(-3)) == pytest.approx(4.0)
    with pytest.raises(InvalidParameter):
        privacy.rdp_to_dp(2.0, 1.0, 0.0)


def test_ledger_arithmetic_and_round_trip():
    plm = privacy.pairwise_loss_sync(gossip.hamilton_matrix(graph.gen_path(4)), 2, P)
    twice = plm + plm
    assert np.allclose(twice.eps, plm.scaled(2).eps)
    assert twice.msg_count.tolist() == (2 * plm.msg_count).tolist()
    back = privacy.PairwiseLossMatrix.from_dict(plm.to_dict())
    assert np.array_equal(back.eps, plm.eps)


def test_by_distance_on_hypercube():
    g = graph.gen_hypercube(4)
    plm = privacy.pairwise_loss_sync(gossip.lazy(gossip.hamilton_matrix(g)), 6, P)
    rows = privacy.by_distance(plm, g)
    assert [r[0] for r in rows] == [1, 2, 3, 4]
    for d, lo, mean, hi in rows:
        assert hi - lo < 1e-12
    means = [r[2] for r in rows]
    assert all(a >= b for a, b in zip(means, means[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 14), st.floats(0.2, 0.9), st.floats(0.0, 0.6), st.integers(1, 8), st.integers(0, 10_000))
def test_accountant_invariants(n, q, rate, T, seed):
    sched = gossip.dropout_schedule(n, q, rate, T, seed=seed)
    plm = privacy.pairwise_loss_schedule(sched, P)
    c = P.per_message
    assert plm.eps.min() >= 0
    # one message contributes at most c; a node observes at most msg_count messages
    assert np.all(plm.eps <= c * plm.msg_count[None, :] * (1 + 1e-12))
    assert plm.column_identity_residual().max() < 1e-9
