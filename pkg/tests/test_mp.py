import numpy as np
import pytest

from mpda import mp
from mpda.graph import from_precision
from mpda.mp import (Message, MessageStore, SingularUpdateError, Status, compute_marginals,
                     compute_outgoing_message, damped_update, early_stop, sweep)
from mpda.oracle import dense_posterior
from mpda.operator import Hyperparams, SparseOperator
from mpda.utils import relative_error
from tests.conftest import chain_graph, make_problem


def test_outgoing_message_examples():
    assert compute_outgoing_message(1, 2.0, 0.0, [], Message(0.0, 0.0), 1.0) == Message(-0.5, 0.0)
    assert compute_outgoing_message(1, 1.0, 5.0, [], Message(0.0, 0.0), 1.0).b == -5.0
    assert compute_outgoing_message(3, 2.0, 1.0, [(1.0, Message(0.2, 0.3))], Message(0.1, 0.4), 0.0) == (0.0, 0.0)


def test_outgoing_message_uses_other_neighbors():
    incoming = [(-1.0, Message(-0.25, 0.5)), (-1.0, Message(-0.5, 1.0))]
    message = compute_outgoing_message(2, 3.0, 1.0, incoming, Message(-0.1, 0.2), -1.0)
    alpha = 3.0 + 2 * (-0.75) + (-0.1)
    beta = -1.0 - 2 * 1.5 - 0.2
    assert message.a == pytest.approx(-0.25 / alpha)
    assert message.b == pytest.approx(beta * -0.5 / alpha)


def test_outgoing_message_singular():
    with pytest.raises(SingularUpdateError):
        compute_outgoing_message(1, 1.0, 0.0, [(1.0, Message(-1.0, 0.0))], Message(0.0, 0.0), 1.0)


def test_damped_update():
    assert damped_update(Message(0, 0), Message(1, 1), 0.6) == pytest.approx((0.6, 0.6))
    assert damped_update(Message(0.3, -2), Message(1.5, 4), 1.0) == Message(1.5, 4)
    assert damped_update(Message(0.3, -2), Message(0.3, -2), 0.7) == pytest.approx((0.3, -2))


def test_early_stop():
    assert early_stop(1.0, 0.0005, 1e-3)
    assert not early_stop(1.0, 0.002, 1e-3)
    assert early_stop(0.0, 5.0, 1e-3)


def test_sweep_without_edges(hyper):
    graph = from_precision(SparseOperator.from_dense(np.diag([1.0, 2.0])))
    store = MessageStore.default(graph)
    new, delta = sweep(graph, store, hyper)
    assert delta == 0.0 and len(new) == 0


def test_sweep_keeps_symmetry(hyper):
    graph = from_precision(SparseOperator.from_dense([[2.0, -1.0], [-1.0, 2.0]]), np.array([1.0, 1.0]))
    store = MessageStore.default(graph)
    for _ in range(20):
        store, _ = sweep(graph, store, hyper)
        assert store.get(graph, 0, 1) == store.get(graph, 1, 0)


def test_sweep_matches_scalar_update(three_chain):
    hyper = Hyperparams(c=2.5, eta=0.7)
    graph = three_chain
    rng = np.random.default_rng(0)
    store = MessageStore(-rng.uniform(0, 0.2, graph.num_directed), rng.normal(size=graph.num_directed))
    new, _ = sweep(graph, store, hyper)
    for i in range(graph.n):
        neighbors, weights = graph.neighbors(i)
        for j, weight in zip(neighbors, weights):
            incoming = [(w, store.get(graph, k, i)) for k, w in zip(neighbors, weights) if k != j]
            raw = compute_outgoing_message(hyper.c, graph.node_precision[i], graph.node_shift[i], incoming,
                                           store.get(graph, j, i), weight)
            expected = damped_update(store.get(graph, i, j), raw, hyper.eta)
            assert new.get(graph, i, j) == pytest.approx(expected, rel=1e-12)


def test_marginals_without_messages():
    graph = from_precision(SparseOperator.from_dense(np.diag([4.0, 2.0])), np.array([2.0, 3.0]))
    marginals = compute_marginals(graph, MessageStore.default(graph), 10)
    assert list(marginals.mean) == [0.5, 1.5]
    assert list(marginals.precision) == [4.0, 2.0]
    assert marginals.biased_variance_flag


def test_two_node_chain(two_chain):
    result = mp.run(two_chain, Hyperparams(c=1, eta=1, tau=1e-10))
    assert result.status is Status.CONVERGED
    assert result.marginals.mean == pytest.approx([2 / 3, 1 / 3], abs=1e-10)
    assert result.marginals.precision == pytest.approx([1.5, 1.5]), 'exact on a tree with c=1'


@pytest.mark.parametrize('c', [2.0, 10.0, -2.0])
def test_three_node_chain_means_are_exact(three_chain, c):
    result = mp.run(three_chain, Hyperparams(c=c, eta=0.6, tau=1e-10, T=50000))
    assert result.status is Status.CONVERGED
    expected = np.linalg.solve(*three_chain.to_dense())
    assert result.marginals.mean == pytest.approx(expected, abs=1e-8)


def test_tree_exactness():
    graph = chain_graph(64)
    result = mp.run(graph, Hyperparams(c=1, eta=1, tau=1e-12))
    assert result.status is Status.CONVERGED
    assert result.iterations <= 64
    P, h = graph.to_dense()
    assert np.max(np.abs(result.marginals.mean - np.linalg.solve(P, h))) <= 1e-8
    assert np.allclose(result.marginals.variance, np.diag(np.linalg.inv(P)), rtol=1e-8)


def test_tree_exactness_long_chain():
    graph = chain_graph(256, diagonal=2.5, seed=7)
    result = mp.run(graph, Hyperparams(c=1, eta=1, tau=1e-12))
    P, h = graph.to_dense()
    assert np.max(np.abs(result.marginals.mean - np.linalg.solve(P, h))) <= 1e-8


def test_loopy_fixed_point(problem16):
    result = mp.run(problem16.graph, problem16.hyper.with_(tau=1e-8))
    assert result.status is Status.CONVERGED
    assert result.marginals.is_valid()
    expected = dense_posterior(problem16.graph).mean
    assert relative_error(result.marginals.mean, expected) <= 1e-4


def test_default_tau_fixed_point(problem16):
    # the default threshold stops at percent-level accuracy; exactness needs a tight one
    result = mp.run(problem16.graph, problem16.hyper)
    assert result.status is Status.CONVERGED
    assert len(result.history) == result.iterations
    expected = dense_posterior(problem16.graph).mean
    loose = relative_error(result.marginals.mean, expected)
    tight = relative_error(mp.run(problem16.graph, problem16.hyper.with_(tau=1e-8)).marginals.mean, expected)
    assert loose <= 0.1
    assert tight < loose


def test_loopy_fixed_point_24():
    problem = make_problem(24, 0.05, seed=5)
    result = mp.run(problem.graph, problem.hyper.with_(tau=1e-8))
    assert result.status is Status.CONVERGED
    assert relative_error(result.marginals.mean, dense_posterior(problem.graph).mean) <= 1e-4


def test_fixed_point_does_not_depend_on_c(problem16):
    first = mp.run(problem16.graph, problem16.hyper.with_(c=10, tau=1e-9))
    second = mp.run(problem16.graph, problem16.hyper.with_(c=20, tau=1e-9))
    assert first.status is second.status is Status.CONVERGED
    assert relative_error(first.marginals.mean, second.marginals.mean) <= 1e-5


def test_serial_runs_are_bitwise_reproducible(small_problem):
    first = mp.run(small_problem.graph, small_problem.hyper)
    second = mp.run(small_problem.graph, small_problem.hyper)
    assert first.iterations == second.iterations
    assert np.array_equal(first.messages.a, second.messages.a)
    assert np.array_equal(first.marginals.mean, second.marginals.mean)


def test_max_iters(small_problem):
    result = mp.run(small_problem.graph, small_problem.hyper.with_(T=3))
    assert result.status is Status.MAX_ITERS
    assert result.iterations == 3


def test_divergence_is_reported_not_raised():
    # symmetric but indefinite
    P = SparseOperator.from_dense([[1.0, 2.0], [2.0, 1.0]])
    result = mp.run(from_precision(P, np.array([1.0, 0.0])), Hyperparams(c=1, eta=1))
    assert result.status is Status.DIVERGED
    assert result.reason


def test_slow_growth_is_reported_before_the_mean_blows_up():
    # the damped b map has an eigenvalue of about 1.03: no singular update, no overflow for hundreds of sweeps
    P = SparseOperator.from_dense([[1.0, 1.2], [1.2, 1.0]])
    result = mp.run(from_precision(P, np.array([1.0, 0.0])), Hyperparams(c=-1, eta=0.5, T=2000))
    assert result.status is Status.DIVERGED
    assert result.reason == 'messages growing'
    assert result.iterations < 2000
    assert np.all(np.abs(result.marginals.mean) < mp.DIVERGENCE_THRESHOLD)


def test_is_growing():
    assert not mp.is_growing(None, 1e9)
    assert not mp.is_growing(0.0, 1.0)
    assert not mp.is_growing(1.0, 999.0)
    assert mp.is_growing(1.0, 1001.0)


def test_init_store_must_match(two_chain, three_chain, hyper):
    with pytest.raises(ValueError):
        mp.run(two_chain, hyper, MessageStore.default(three_chain))


@pytest.mark.slow
def test_plain_propagation_diverges_on_large_grid():
    problem = make_problem(128, 0.05, seed=1)
    result = mp.run(problem.graph, problem.hyper.with_(c=1, eta=0.6))
    assert result.status is Status.DIVERGED
