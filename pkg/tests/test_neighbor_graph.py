import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from neighbor_graph import (
    DataGraph, DirectionalTable, MAX_SIGMA, build_graph, directional_probability, export_graph, feature_checksum,
    fit_local_scale, fuzzy_union, import_graph, knn, symmetrize,
)


def _oracle_knn(X, k):
    n = X.shape[0]
    indices, distances = [], []
    for i in range(n):
        pairs = sorted((math.dist(X[i], X[j]), j) for j in range(n) if j != i)[:k]
        distances.append([d for d, _ in pairs])
        indices.append([j for _, j in pairs])
    return np.array(indices), np.array(distances)


def test_collinear_points():
    table = knn(np.array([[0.0], [1.0], [3.0]]), k=1)
    assert_array_equal(table.indices, [[1], [0], [1]])
    assert_array_equal(table.distances, [[1.0], [1.0], [2.0]])


def test_knn_matches_sort_oracle(rng):
    X = rng.normal(size=(50, 5))
    table = knn(X, k=7)
    indices, distances = _oracle_knn(X, 7)
    assert_array_equal(table.indices, indices)
    assert_allclose(table.distances, distances, rtol=1e-12)


def test_duplicated_points_list_each_other_first(rng):
    X = rng.normal(size=(10, 3))
    X[4] = X[8]
    table = knn(X, k=3)
    assert table.indices[4, 0] == 8 and table.indices[8, 0] == 4
    assert table.distances[4, 0] == 0.0 and table.distances[8, 0] == 0.0


def test_knn_rejects_k_not_below_n(rng):
    with pytest.raises(ValueError, match="K must be < N"):
        knn(rng.normal(size=(5, 2)), k=5)


def test_knn_rejects_non_finite_features():
    X = np.ones((6, 2))
    X[3, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        knn(X, k=2)


def test_knn_manhattan_metric():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.5]])
    table = knn(X, k=1, metric="manhattan")
    assert_array_equal(table.indices, [[2], [2], [0]])
    assert table.distances[0, 0] == 1.5


def test_unknown_metric(rng):
    with pytest.raises(ValueError, match="metric"):
        knn(rng.normal(size=(5, 2)), k=2, metric="cosine")


def test_local_scale_solves_the_sum_identity():
    scale = fit_local_scale(np.array([1.0, 2.0, 4.0]), k=3)
    assert scale.rho == 1.0
    total = np.exp(-np.maximum(0.0, np.array([1.0, 2.0, 4.0]) - 1.0) / scale.sigma).sum()
    assert abs(total - math.log2(3)) < 1e-4


def test_equal_distances_fall_to_lower_clamp():
    scale = fit_local_scale(np.array([2.0, 2.0, 2.0, 2.0]), k=4)
    assert scale.sigma == pytest.approx(1e-3 * 2.0)


def test_two_neighbors_return_lower_clamp():
    scale = fit_local_scale(np.array([1.0, 2.0]), k=2)
    assert scale.sigma == pytest.approx(1e-3 * 1.5)


@pytest.mark.parametrize(
    "d, expected",
    [(0.7, 1.0), (0.7 + 0.3, math.exp(-1.0)), (0.2, 1.0)],
    ids=["at-rho", "one-sigma", "below-rho"],
)
def test_directional_probability(d, expected):
    assert directional_probability(d, 0.7, 0.3) == pytest.approx(expected)


@pytest.mark.parametrize("a, b, expected", [(1.0, 0.0, 1.0), (0.5, 0.5, 0.75), (0.0, 0.0, 0.0), (0.3, 1.0, 1.0)])
def test_fuzzy_union(a, b, expected):
    assert fuzzy_union(a, b) == pytest.approx(expected)
    assert fuzzy_union(b, a) == pytest.approx(expected)


def test_symmetrize_combines_and_drops_zero_pairs():
    # 0 -> 1 certain, 1 -> 0 absent; 1 <-> 2 both 0.5; 2 -> 3 weight 0
    table = DirectionalTable(
        indices=np.array([[1], [2], [1], [2]]),
        probabilities=np.array([[1.0], [0.5], [0.5], [0.0]]),
    )
    graph = symmetrize(table)
    assert graph.edges == [(0, 1, 1.0), (1, 2, 0.75)]
    assert graph.lookup([2, 3], [3, 2]).tolist() == [0.0, 0.0]


@pytest.mark.parametrize("seed", range(5))
def test_graph_invariants_on_random_data(seed):
    data_rng = np.random.default_rng(seed)
    n, k = int(data_rng.integers(30, 201)), int(data_rng.integers(3, 16))
    X = data_rng.normal(size=(n, int(data_rng.integers(2, 8))))
    graph = build_graph(X, k=k)

    dense = graph.to_dense()
    assert_array_equal(dense, dense.T)
    assert np.all(graph.weights > 0.0) and np.all(graph.weights <= 1.0)
    assert np.all(graph.rows < graph.cols)
    assert graph.n_edges <= n * k
    for i in range(n):
        assert dense[i].max() == 1.0

    i, j = data_rng.integers(0, n, size=(2, 200))
    assert_array_equal(graph.lookup(i, j), dense[i, j])
    assert_array_equal(graph.lookup(i, j), graph.lookup(j, i))

    table = knn(X, k)
    target = math.log2(k)
    for p in range(n):
        rho, sigma = graph.rho[p], graph.sigma[p]
        lower = 1e-3 * table.distances[p].mean()
        if lower * (1 + 1e-9) < sigma < MAX_SIGMA:
            total = np.exp(-np.maximum(0.0, table.distances[p] - rho) / sigma).sum()
            assert abs(total - target) < 1e-4


def test_graph_construction_is_deterministic(rng):
    X = rng.normal(size=(60, 4))
    a, b = build_graph(X, k=6), build_graph(X, k=6)
    assert a.edges == b.edges
    assert_array_equal(a.sigma, b.sigma)
    assert a.source_checksum == b.source_checksum == feature_checksum(X)


def test_build_graph_needs_two_neighbors(rng):
    with pytest.raises(ValueError):
        build_graph(rng.normal(size=(10, 2)), k=1)


def test_local_scale_requires_build_metadata(tmp_path, rng):
    graph = build_graph(rng.normal(size=(20, 2)), k=4)
    assert graph.local_scale(0).rho == graph.rho[0]
    export_graph(graph, tmp_path / "g.txt")
    with pytest.raises(ValueError):
        import_graph(tmp_path / "g.txt").local_scale(0)


def test_export_import_round_trip(tmp_path, rng):
    graph = build_graph(rng.normal(size=(50, 3)), k=5)
    path = tmp_path / "graph.txt"
    export_graph(graph, path)
    loaded = import_graph(path)
    assert (loaded.n, loaded.k, loaded.metric) == (50, 5, "euclidean")
    assert loaded.edges == graph.edges
    assert_array_equal(loaded.to_dense(), graph.to_dense())
    assert loaded.n_edges <= 250


def test_export_is_byte_identical(tmp_path, rng):
    X = rng.normal(size=(40, 3))
    export_graph(build_graph(X, k=5), tmp_path / "a.txt")
    export_graph(build_graph(X, k=5), tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_import_rejects_bad_files(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("i j p\n", encoding="utf-8")
    with pytest.raises(ValueError, match="not a graph file"):
        import_graph(path)
    path.write_text("# umap-mixup graph v1\n# N=3 K=2 metric=euclidean\n2 1 0.5\n", encoding="utf-8")
    with pytest.raises(ValueError, match="invalid edge"):
        import_graph(path)


def test_empty_graph_is_representable():
    graph = DataGraph(n=3, k=2, metric="euclidean", rows=np.zeros(0, dtype=np.int64),
                      cols=np.zeros(0, dtype=np.int64), weights=np.zeros(0))
    assert graph.n_edges == 0
    assert graph.mean_weight == 0.0
    assert_array_equal(graph.to_dense(), np.zeros((3, 3)))
