import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stforecast.errors import (
    DegenerateError,
    EmptyGraphError,
    ParseError,
    ReferentialError,
)
from stforecast.graph import (
    RoadGraph,
    build_adjacency,
    kernel_sigma,
    load_graph,
    random_road_graph,
    save_graph,
)


def write(tmp_path, text, name="g.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestBuildAdjacency:
    def test_zero_distance_is_one(self):
        w = build_adjacency(np.array([[0.0, 5.0], [5.0, 0.0]]), sigma=10.0)
        assert w[0, 0] == 1.0

    def test_kernel_value_above_threshold(self):
        w = build_adjacency(np.array([[0.0, 10.0], [10.0, 0.0]]), sigma=10.0)
        np.testing.assert_allclose(w[0, 1], math.exp(-1.0), rtol=1e-15)
        np.testing.assert_allclose(w[0, 1], 0.367879, atol=1e-6)

    def test_kernel_value_below_threshold_is_zero(self):
        # exp(-4) = 0.0183 < 0.1
        w = build_adjacency(np.array([[0.0, 20.0], [20.0, 0.0]]), sigma=10.0)
        assert w[0, 1] == 0.0

    def test_sigma_is_population_std_over_finite_entries(self):
        d = np.array([[0.0, 3.0, np.inf], [4.0, 0.0, 5.0], [np.inf, 6.0, 0.0]])
        finite = [0.0, 3.0, 4.0, 0.0, 5.0, 6.0, 0.0]
        mu = sum(finite) / len(finite)
        ref = math.sqrt(sum((x - mu) ** 2 for x in finite) / len(finite))
        assert kernel_sigma(d) == pytest.approx(ref, rel=1e-15)

    def test_infinite_distance_has_no_weight(self):
        d = np.array([[0.0, np.inf], [1.0, 0.0]])
        assert build_adjacency(d, sigma=1.0)[0, 1] == 0.0

    def test_asymmetry_preserved(self):
        d = np.array([[0.0, 1.0], [3.0, 0.0]])
        w = build_adjacency(d, epsilon=0.01, sigma=2.0)
        assert w[0, 1] != w[1, 0]

    def test_all_zero_is_degenerate(self):
        with pytest.raises(DegenerateError):
            build_adjacency(np.zeros((3, 3)))

    def test_negative_distance(self):
        with pytest.raises(ValueError):
            build_adjacency(np.array([[0.0, -1.0], [1.0, 0.0]]))

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.5])
    def test_epsilon_range(self, eps):
        with pytest.raises(ValueError):
            build_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]), epsilon=eps)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000), st.floats(0.01, 0.9))
    def test_threshold_gap_and_monotone(self, n, seed, eps):
        r = np.random.default_rng(seed)
        d = r.uniform(0, 100, size=(n, n))
        np.fill_diagonal(d, 0.0)
        w = build_adjacency(d, epsilon=eps)
        assert not ((w > 0) & (w < eps)).any()
        assert (np.diag(w) == 1.0).all()
        flat_d, flat_w = d.ravel(), w.ravel()
        order = np.argsort(flat_d, kind="stable")
        assert (np.diff(flat_w[order]) <= 0).all()


class TestRoadGraph:
    def test_invariants(self):
        g = random_road_graph(12, seed=3)
        assert (np.diag(g.distances) == 0).all()
        assert (np.diag(g.adjacency) == 1).all()
        a = g.adjacency
        assert ((a == 0) | ((a >= g.epsilon) & (a <= 1))).all()

    def test_immutable(self):
        g = random_road_graph(4, seed=0)
        with pytest.raises(ValueError):
            g.adjacency[0, 0] = 2.0

    def test_nonzero_diagonal_rejected(self):
        with pytest.raises(ValueError):
            RoadGraph(("a", "b"), np.array([[1.0, 2.0], [2.0, 0.0]]))

    def test_single_vertex(self):
        g = RoadGraph(("a",), np.zeros((1, 1)))
        np.testing.assert_array_equal(g.adjacency, [[1.0]])
        assert g.edges() == []

    def test_unknown_id(self):
        with pytest.raises(ReferentialError):
            random_road_graph(3).index("zzz")

    def test_random_graph_reproducible(self):
        a, b = random_road_graph(9, seed=5), random_road_graph(9, seed=5)
        np.testing.assert_array_equal(a.distances, b.distances)


class TestLoadGraph:
    def test_two_vertices_one_edge(self, tmp_path):
        g = load_graph(write(tmp_path, "from,to,distance\na,b,100\n"))
        assert g.n_vertices == 2
        assert g.vertex_ids == ("a", "b")
        assert g.distances[0, 1] == 100.0
        assert g.distances[1, 0] == np.inf

    def test_first_appearance_order(self, tmp_path):
        g = load_graph(write(tmp_path, "from,to,distance\nz,y,1\nx,z,2\n"))
        assert g.vertex_ids == ("z", "y", "x")

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyGraphError):
            load_graph(write(tmp_path, ""))

    def test_header_only(self, tmp_path):
        with pytest.raises(EmptyGraphError):
            load_graph(write(tmp_path, "from,to,distance\n"))

    def test_malformed_row_has_line_number(self, tmp_path):
        path = write(tmp_path, "from,to,distance\na,b,1\na,c,oops\n")
        with pytest.raises(ParseError, match=r"g\.csv:3:") as info:
            load_graph(path)
        assert info.value.line == 3

    def test_wrong_field_count(self, tmp_path):
        with pytest.raises(ParseError):
            load_graph(write(tmp_path, "from,to,distance\na,b\n"))

    def test_negative_distance(self, tmp_path):
        with pytest.raises(ParseError):
            load_graph(write(tmp_path, "from,to,distance\na,b,-3\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_graph(tmp_path / "absent.csv")

    def test_sensor_count_scales(self, tmp_path):
        # a network of the size of the larger benchmark
        lines = ["from,to,distance"] + [f"s{i},s{(i + 1) % 325},{100 + i}" for i in range(325)]
        assert load_graph(write(tmp_path, "\n".join(lines))).n_vertices == 325

    def test_save_load_roundtrip(self, tmp_path):
        g = random_road_graph(8, seed=2)
        save_graph(g, tmp_path / "out.csv")
        h = load_graph(tmp_path / "out.csv")
        # first-appearance order may differ; compare through ids
        idx = [h.index(v) for v in g.vertex_ids]
        np.testing.assert_array_equal(h.distances[np.ix_(idx, idx)], g.distances)
