"""Binary-tree mechanism and matrix-factorization strategies: dyadic
bookkeeping against brute-force oracles, noise covariance, optimizer
quality, streams, and serialization."""

import math

import numpy as np
import pytest

from dpsrgd.counting import (
    StrategyMatrix,
    TreeState,
    build_workload,
    calibrate_tree_sigma,
    ceil_log2,
    column_group_sens,
    covering_nodes,
    factorize,
    forward_substitution_rows,
    identity_strategy,
    load_strategy,
    mf_noise_stream,
    prefix_nodes,
    save_strategy,
    strategy_from_matrix,
    tree_baseline_objective,
    tree_error_bound,
    tree_ingest,
    tree_matrix_factorization,
    tree_prefix,
    tree_strategy_matrix,
)


def _interval(j, k):
    """Steps covered by dyadic node (j, k): [(j-1)*2^k + 1, j*2^k]."""
    return range((j - 1) * (1 << k) + 1, j * (1 << k) + 1)


# ---------------------------------------------------------------------------
# dyadic bookkeeping


def test_ceil_log2():
    assert [ceil_log2(t) for t in (1, 2, 3, 4, 5, 8, 9, 16)] == \
        [0, 1, 2, 2, 3, 3, 4, 4]


@pytest.mark.parametrize("horizon", [6, 16])
def test_prefix_nodes_partition_the_prefix(horizon):
    for i in range(1, horizon + 1):
        covered = []
        for j, k in prefix_nodes(i):
            covered.extend(_interval(j, k))
        assert sorted(covered) == list(range(1, i + 1))
        # dyadic decomposition size is the binary popcount of i
        assert len(prefix_nodes(i)) == bin(i).count("1")


@pytest.mark.parametrize("horizon", [6, 16])
def test_covering_nodes_are_exactly_the_ancestors(horizon):
    depth = ceil_log2(horizon)
    # brute force: all odd-j nodes within the horizon whose interval holds i
    nodes = []
    for k in range(depth + 1):
        j_max = (horizon - 1) // (1 << k) + 1
        nodes.extend((j, k) for j in range(1, j_max + 1, 2))
    for i in range(1, horizon + 1):
        expected = sorted(jk for jk in nodes if i in _interval(*jk))
        assert sorted(covering_nodes(i, depth)) == expected


def test_prefix_nodes_are_materialized_odd_nodes():
    # every node a prefix query touches must be one the stream maintains
    horizon = 16
    depth = ceil_log2(horizon)
    materialized = set()
    for i in range(1, horizon + 1):
        materialized.update(covering_nodes(i, depth))
    for i in range(1, horizon + 1):
        assert set(prefix_nodes(i)) <= materialized


# ---------------------------------------------------------------------------
# streaming tree state


def test_noiseless_tree_reproduces_exact_prefix_sums():
    rng = np.random.default_rng(0)
    T, d = 11, 3
    deltas = rng.standard_normal((T, d))
    state = TreeState(T, d, sigma=0.0, seed=0)
    for i in range(1, T + 1):
        tree_ingest(state, i, deltas[i - 1])
        estimate, noise = tree_prefix(state, i)
        np.testing.assert_allclose(estimate, deltas[:i].sum(axis=0),
                                   rtol=0, atol=1e-12)
        np.testing.assert_array_equal(noise, np.zeros(d))


def test_noisy_tree_error_is_sum_of_node_noises():
    rng = np.random.default_rng(1)
    T, d = 8, 2
    deltas = rng.standard_normal((T, d))
    state = TreeState(T, d, sigma=1.5, seed=42)
    for i in range(1, T + 1):
        tree_ingest(state, i, deltas[i - 1])
    for i in range(1, T + 1):
        estimate, noise = tree_prefix(state, i)
        np.testing.assert_allclose(estimate - noise, deltas[:i].sum(axis=0),
                                   rtol=0, atol=1e-12)
        expected_noise = sum(state._noise[state._node_index[jk]]
                             for jk in prefix_nodes(i))
        np.testing.assert_allclose(noise, expected_noise, rtol=0, atol=1e-12)


def test_node_noise_is_independent_of_ingestion_progress():
    a = TreeState(8, 2, sigma=1.0, seed=7)
    b = TreeState(8, 2, sigma=1.0, seed=7)
    tree_ingest(b, 1, np.ones(2))
    np.testing.assert_array_equal(a._noise, b._noise)
    np.testing.assert_allclose(a.node_sum(1, 0), b.node_sum(1, 0) - np.ones(2),
                               rtol=0, atol=1e-12)


def test_tree_ingest_order_and_shape_errors():
    state = TreeState(4, 2, sigma=0.0)
    with pytest.raises(ValueError):
        tree_ingest(state, 2, np.zeros(2))  # out of order
    tree_ingest(state, 1, np.zeros(2))
    with pytest.raises(ValueError):
        tree_ingest(state, 1, np.zeros(2))  # repeated step
    with pytest.raises(ValueError):
        tree_ingest(state, 2, np.zeros(3))  # wrong shape
    with pytest.raises(ValueError):
        tree_ingest(state, 2, np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        tree_prefix(state, 2)  # not ingested yet
    tree_ingest(state, 2, np.zeros(2))
    tree_ingest(state, 3, np.zeros(2))
    tree_ingest(state, 4, np.zeros(2))
    with pytest.raises(ValueError):
        tree_ingest(state, 5, np.zeros(2))  # beyond horizon
    with pytest.raises(ValueError):
        TreeState(0, 2)
    with pytest.raises(ValueError):
        TreeState(4, 2, sigma=-1.0)


def test_tree_prefix_noise_variance_matches_node_count():
    # trials live in the coordinate axis: per-coordinate prefix noise
    # variance is (number of dyadic nodes) * sigma^2
    trials, T, sigma = 20000, 8, 1.0
    state = TreeState(T, trials, sigma=sigma, seed=99)
    zero = np.zeros(trials)
    for i in range(1, T + 1):
        tree_ingest(state, i, zero)
    for i in range(1, T + 1):
        _, noise = tree_prefix(state, i)
        expected = len(prefix_nodes(i)) * sigma**2
        assert noise.var() == pytest.approx(expected, rel=0.05)


def test_tree_calibration_values():
    assert calibrate_tree_sigma(1.0, 1.0, 16) == pytest.approx(math.sqrt(5.0))
    assert calibrate_tree_sigma(2.0, 0.5, 16) == pytest.approx(4 * math.sqrt(5.0))
    expected = 4.0 * 8.0 * math.sqrt(4.0 * math.log(2 * 16 / 0.05))
    assert tree_error_bound(1.0, 1.0, 16, 4, 0.05) == pytest.approx(expected)
    with pytest.raises(ValueError):
        calibrate_tree_sigma(1.0, 0.0, 16)
    with pytest.raises(ValueError):
        tree_error_bound(1.0, 1.0, 1, 4, 0.05)
    with pytest.raises(ValueError):
        tree_error_bound(1.0, 1.0, 16, 4, 1.5)


# ---------------------------------------------------------------------------
# workload matrices


def test_ones_workload_is_prefix_sum_matrix():
    np.testing.assert_array_equal(build_workload("ones", 2, 3),
                                  np.tril(np.ones((6, 6))))


def test_momentum_workload_matches_recursion():
    gamma, n = 0.7, 9
    wl = build_workload("momentum", 3, 3, momentum=gamma)
    rng = np.random.default_rng(2)
    deltas = rng.standard_normal(n)
    v, out = 0.0, []
    for t in range(n):
        v = gamma * v + deltas[t]
        out.append((out[-1] if out else 0.0) + v)
    np.testing.assert_allclose(wl @ deltas, out, rtol=1e-12)


def test_momentum_decay_workload_matches_double_recursion():
    gamma, c, n = 0.85, 0.3, 8
    wl = build_workload("momentum_decay", 2, 4, momentum=gamma, decay=c)
    rng = np.random.default_rng(3)
    deltas = rng.standard_normal(n)
    g, v, cum, out = 0.0, 0.0, 0.0, []
    for t in range(n):
        g = c * g + deltas[t]        # decayed gradient recursion
        v = gamma * v + g            # optimizer momentum
        cum += v
        out.append(cum)
    np.testing.assert_allclose(wl @ deltas, out, rtol=1e-12)


def test_workload_validation():
    with pytest.raises(ValueError):
        build_workload("mystery", 1, 4)
    with pytest.raises(ValueError):
        build_workload("momentum", 1, 4, momentum=1.0)
    with pytest.raises(ValueError):
        build_workload("momentum_decay", 1, 4, momentum=0.5, decay=0.0)
    with pytest.raises(ValueError):
        build_workload("ones", 0, 4)


def test_column_group_sens_matches_loop():
    rng = np.random.default_rng(4)
    k, b = 3, 4
    c_mat = np.tril(rng.standard_normal((12, 12)))
    expected = 0.0
    for j in range(b):
        col = sum(c_mat[:, e * b + j] for e in range(k))
        expected = max(expected, np.linalg.norm(col))
    assert column_group_sens(c_mat, k, b) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        column_group_sens(c_mat, 2, 4)


# ---------------------------------------------------------------------------
# tree factorization as a matrix pair


@pytest.mark.parametrize("n", [6, 8, 16])
def test_tree_factorization_reconstructs_prefix_matrix(n):
    b_dec, c_node = tree_matrix_factorization(n)
    np.testing.assert_allclose(b_dec @ c_node, np.tril(np.ones((n, n))),
                               rtol=0, atol=1e-12)
    # decomposition rows select exactly the dyadic prefix nodes
    for i in range(1, n + 1):
        assert b_dec[i - 1].sum() == len(prefix_nodes(i))


def test_tree_strategy_matrix_has_tree_noise_covariance():
    n = 8
    b_dec, _ = tree_matrix_factorization(n)
    c_tree = tree_strategy_matrix(n)
    a = np.tril(np.ones((n, n)))
    mapped = a @ np.linalg.inv(c_tree)
    np.testing.assert_allclose(mapped @ mapped.T, b_dec @ b_dec.T,
                               rtol=0, atol=1e-9)


def test_tree_baseline_objective_closed_form():
    # ones workload, full horizon 2^m: error part is sqrt(sum of popcounts)
    # and sensitivity is sqrt(tree depth + 1)
    for n in (8, 16, 32):
        popcounts = sum(bin(i).count("1") for i in range(1, n + 1))
        expected = math.sqrt(popcounts) * math.sqrt(ceil_log2(n) + 1)
        assert tree_baseline_objective(build_workload("ones", 1, n), 1, n) \
            == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# strategy optimization


def _objective_oracle(workload, c_mat):
    return float(np.linalg.norm(workload @ np.linalg.inv(c_mat)))


def test_factorize_reports_its_own_objective_and_sens():
    wl = build_workload("ones", 1, 8)
    strat = factorize(wl, 1, 8)
    assert strat.objective == pytest.approx(_objective_oracle(wl, strat.C),
                                            rel=1e-9)
    assert strat.sens == pytest.approx(column_group_sens(strat.C, 1, 8),
                                       rel=1e-12)
    assert strat.sens <= 1.0 + 1e-9
    assert strat.steps == 8
    strat.check()


def test_factorize_is_deterministic():
    wl = build_workload("momentum", 2, 4, momentum=0.6)
    s1 = factorize(wl, 2, 4, momentum=0.6)
    s2 = factorize(wl, 2, 4, momentum=0.6)
    np.testing.assert_array_equal(s1.C, s2.C)
    assert s1.objective == s2.objective


def test_factorize_two_step_case_near_brute_force_optimum():
    # n=2 admits a cheap dense search over the feasible triangle entries
    wl = build_workload("ones", 1, 2)
    strat = factorize(wl, 1, 2)
    best = np.inf
    for theta in np.linspace(1e-3, math.pi / 2 - 1e-3, 400):
        a, b = math.cos(theta), math.sin(theta)
        for c in np.linspace(0.05, 1.0, 200):
            cand = np.array([[a, 0.0], [b, c]])
            best = min(best, _objective_oracle(wl, cand))
    assert strat.objective <= best + 1e-3


def test_factorize_beats_tree_baseline_on_momentum_workload():
    wl = build_workload("momentum", 2, 6, momentum=0.9)
    strat = factorize(wl, 2, 6, momentum=0.9)
    assert strat.objective <= tree_baseline_objective(wl, 2, 6)
    assert strat.sens <= 1.0 + 1e-9


def test_factorize_input_validation():
    with pytest.raises(ValueError):
        factorize(np.ones((3, 3)), 1, 3)  # not lower-triangular
    with pytest.raises(ValueError):
        factorize(np.tril(np.ones((4, 4))), 1, 3)  # shape mismatch


def test_strategy_check_rejects_violations():
    bad = strategy_from_matrix(2.0 * np.eye(3), np.tril(np.ones((3, 3))), 1, 3)
    with pytest.raises(ValueError):
        bad.check()


def test_identity_strategy():
    strat = identity_strategy(5)
    np.testing.assert_array_equal(strat.C, np.eye(5))
    assert strat.sens == 1.0
    assert strat.steps == 5
    assert strat.objective == pytest.approx(
        np.linalg.norm(np.tril(np.ones((5, 5)))))


# ---------------------------------------------------------------------------
# correlated noise streams


def test_forward_substitution_matches_solve():
    rng = np.random.default_rng(5)
    n, d = 7, 3
    c_mat = np.tril(rng.standard_normal((n, n)))
    np.fill_diagonal(c_mat, np.abs(np.diag(c_mat)) + 0.5)
    z = rng.standard_normal((n, d))
    rows = np.stack(list(forward_substitution_rows(c_mat, iter(z))))
    np.testing.assert_allclose(c_mat @ rows, z, rtol=0, atol=1e-10)


def test_forward_substitution_is_causal():
    # row t must be emitted before z row t+1 is consumed
    n = 5
    consumed = []

    def z_rows():
        for t in range(n):
            consumed.append(t)
            yield np.ones(2)

    gen = forward_substitution_rows(np.eye(n), z_rows())
    next(gen)
    assert consumed == [0]
    next(gen)
    assert consumed == [0, 1]


def test_mf_noise_stream_identity_matches_iid_gaussian():
    rho, d, seed = 0.5, 4, 21
    rows = np.stack(list(mf_noise_stream(identity_strategy(6), rho, d, seed)))
    rng = np.random.default_rng(seed)
    expected = np.stack([rng.standard_normal(d) * math.sqrt(1 / (2 * rho))
                         for _ in range(6)])
    np.testing.assert_array_equal(rows, expected)


def test_mf_noise_stream_reconstructs_z():
    wl = build_workload("ones", 1, 6)
    strat = factorize(wl, 1, 6)
    rho, d, seed = 2.0, 3, 33
    rows = np.stack(list(mf_noise_stream(strat, rho, d, seed)))
    rng = np.random.default_rng(seed)
    z = np.stack([rng.standard_normal(d) * math.sqrt(1 / (2 * rho))
                  for _ in range(6)])
    np.testing.assert_allclose(strat.C @ rows, z, rtol=0, atol=1e-10)


def test_mf_noise_stream_edge_cases():
    strat = identity_strategy(4)
    rows = list(mf_noise_stream(strat, math.inf, 3, 0))
    assert all(np.array_equal(r, np.zeros(3)) for r in rows)
    with pytest.raises(ValueError):
        next(mf_noise_stream(strat, 0.0, 3, 0))
    singular = StrategyMatrix(C=np.diag([1.0, 0.0, 1.0, 1.0]),
                              workload=np.tril(np.ones((4, 4))),
                              kind="custom", k=1, b=4, momentum=0.0,
                              decay=1.0, sens=1.0, objective=np.nan)
    with pytest.raises(np.linalg.LinAlgError):
        next(mf_noise_stream(singular, 1.0, 3, 0))


def test_tree_embedding_noise_variance_matches_tree_mechanism():
    # prefix noise through the square embedding has the same per-step
    # variance profile as the streaming tree: node count * sigma^2
    n, d, seed = 8, 40000, 11
    c_tree = tree_strategy_matrix(n)
    strat = strategy_from_matrix(c_tree, build_workload("ones", 1, n), 1, n)
    rho = 0.5  # z std = 1
    rows = np.stack(list(mf_noise_stream(strat, rho, d, seed)))
    prefix_noise = np.cumsum(rows, axis=0)
    for i in range(1, n + 1):
        expected = len(prefix_nodes(i))
        assert prefix_noise[i - 1].var() == pytest.approx(expected, rel=0.05)


# ---------------------------------------------------------------------------
# serialization


@pytest.mark.parametrize("kind,k,b,momentum,decay", [
    ("ones", 1, 6, 0.0, 1.0),
    ("momentum", 2, 3, 0.9, 1.0),
    ("momentum_decay", 2, 3, 0.9, 0.2),
])
def test_strategy_round_trip(tmp_path, kind, k, b, momentum, decay):
    wl = build_workload(kind, k, b, momentum=momentum, decay=decay)
    strat = factorize(wl, k, b, kind=kind, momentum=momentum, decay=decay)
    path = tmp_path / "strategy.bin"
    save_strategy(strat, path)
    loaded = load_strategy(path)
    np.testing.assert_array_equal(loaded.C, strat.C)
    np.testing.assert_array_equal(loaded.workload, strat.workload)
    assert (loaded.kind, loaded.k, loaded.b) == (kind, k, b)
    assert loaded.momentum == momentum and loaded.decay == decay
    assert loaded.sens == pytest.approx(strat.sens, rel=1e-12)
    assert loaded.objective == pytest.approx(strat.objective, rel=1e-9)


def test_load_strategy_rejects_corruption(tmp_path):
    wl = build_workload("ones", 1, 4)
    strat = factorize(wl, 1, 4)
    path = tmp_path / "strategy.bin"
    save_strategy(strat, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "bad_magic.bin"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ValueError):
        load_strategy(bad_magic)

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(bytes(raw[:-8]))
    with pytest.raises(ValueError):
        load_strategy(truncated)
