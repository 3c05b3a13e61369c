import sys
import os

sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/../src")
print('sys.path={}'.format(sys.path))

import itertools
import unittest

import numpy as np

from opus_vicinia.grid_core import CellRecord, FeatureTable, GridSpec, N_FEATURES
from opus_vicinia.local_graphs import (
    SLOT_ADJACENCY,
    WINDOW_SIZE,
    LocalGraph,
    LocalGraphException,
    batch_normalized_adjacency,
    build_local_graph,
    graph_to_window,
    king_adjacent,
    local_graph_to_json,
    normalized_adjacency,
    padded_window,
)
from logging_support import TestLogger, print_logger_lines

running_path = os.getcwd()
print('Current Working Path: {}'.format(running_path))


def full_table(n_rows: int, n_cols: int, skip=(), seed: int=11)->FeatureTable:
    rng = np.random.default_rng(seed)
    records = [
        CellRecord(row=row, col=col, features=tuple(rng.normal(size=N_FEATURES)))
        for row in range(n_rows) for col in range(n_cols)
        if (row, col) not in skip
    ]
    return FeatureTable.from_records(grid=GridSpec(n_rows=n_rows, n_cols=n_cols), records=records)


def brute_force_edge_count(coords)->int:
    return sum(1 for a, b in itertools.combinations(coords, 2) if max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1)


class TestBuildLocalGraph(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_interior_border_and_corner_graphs(self):
        table = full_table(n_rows=5, n_cols=5)
        for (row, col), nodes, edges in (((2, 2), 9, 20), ((0, 2), 6, 11), ((2, 0), 6, 11), ((0, 0), 4, 6), ((4, 4), 4, 6)):
            g = build_local_graph(table=table, row=row, col=col)
            self.assertEqual(g.node_count, nodes, (row, col))
            self.assertEqual(len(g.edges), edges, (row, col))
            self.assertEqual(g.central_index, 0)
            self.assertEqual(g.node_coords[0], (row, col))

    def test_node_order_and_features(self):
        table = full_table(n_rows=3, n_cols=3)
        g = build_local_graph(table=table, row=1, col=1)
        self.assertEqual(list(g.node_coords[1:]), sorted(g.node_coords[1:]))
        for i, (row, col) in enumerate(g.node_coords):
            np.testing.assert_array_equal(g.node_features[i], table.get(row, col).features)

    def test_missing_cells_match_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            skip = set(
                (int(r), int(c)) for r, c in zip(rng.integers(0, 4, size=6), rng.integers(0, 4, size=6))
                if (int(r), int(c)) != (1, 2)
            )
            table = full_table(n_rows=4, n_cols=4, skip=skip)
            g = build_local_graph(table=table, row=1, col=2)
            self.assertEqual(len(g.edges), brute_force_edge_count(g.node_coords))
            for i, j in g.edges:
                self.assertTrue(king_adjacent(g.node_coords[i], g.node_coords[j]))
            self.assertFalse(any(coord in skip for coord in g.node_coords))

    def test_missing_center_is_rejected(self):
        table = full_table(n_rows=3, n_cols=3, skip={(1, 1)})
        with self.assertRaises(LocalGraphException):
            build_local_graph(table=table, row=1, col=1)

    def test_invalid_graphs(self):
        with self.assertRaises(LocalGraphException):
            LocalGraph(node_features=np.zeros((2, N_FEATURES)), edges=((0, 0),), central_index=0, node_coords=((0, 0), (0, 1)))
        with self.assertRaises(LocalGraphException):
            LocalGraph(node_features=np.zeros((2, N_FEATURES)), edges=((0, 1), (1, 0)), central_index=0, node_coords=((0, 0), (0, 1)))
        with self.assertRaises(LocalGraphException):
            LocalGraph(node_features=np.zeros((2, 3)), edges=(), central_index=0, node_coords=((0, 0), (0, 1)))

    def test_json_view(self):
        table = full_table(n_rows=2, n_cols=2)
        data = local_graph_to_json(build_local_graph(table=table, row=0, col=0))
        self.assertEqual(len(data['nodes']), 4)
        self.assertEqual(len(data['edges']), 6)
        self.assertEqual(data['central_index'], 0)
        self.assertEqual((data['nodes'][0]['row'], data['nodes'][0]['col']), (0, 0))


class TestNormalizedAdjacency(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_single_node(self):
        table = full_table(n_rows=1, n_cols=1)
        np.testing.assert_array_equal(normalized_adjacency(build_local_graph(table=table, row=0, col=0)), [[1.0]])

    def test_two_nodes(self):
        table = full_table(n_rows=1, n_cols=2)
        np.testing.assert_allclose(normalized_adjacency(build_local_graph(table=table, row=0, col=0)), np.full((2, 2), 0.5), rtol=0, atol=1e-15)

    def test_full_graph(self):
        g = build_local_graph(table=full_table(n_rows=3, n_cols=3), row=1, col=1)
        a_norm = normalized_adjacency(g)
        degrees = g.adjacency().sum(axis=1)
        self.assertEqual(int(degrees[0]), 8)
        np.testing.assert_array_equal(a_norm, a_norm.T)
        np.testing.assert_allclose(np.diag(a_norm), 1.0 / (degrees + 1.0), rtol=1e-15)
        self.assertTrue(np.all(a_norm >= 0.0))

    def test_slot_adjacency_has_20_edges(self):
        self.assertEqual(int(SLOT_ADJACENCY.sum()), 40)
        np.testing.assert_array_equal(SLOT_ADJACENCY, SLOT_ADJACENCY.T)


class TestPaddedWindows(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_padded_window_matches_compact_graph(self):
        table = full_table(n_rows=4, n_cols=5, skip={(1, 1), (3, 4), (0, 2)})
        cells = table.cells()
        window, present = padded_window(table=table, cells=cells)
        self.assertEqual(window.shape, (len(cells), WINDOW_SIZE, N_FEATURES))
        a_batch = batch_normalized_adjacency(present)
        for index, (row, col) in enumerate(cells):
            g = build_local_graph(table=table, row=row, col=col)
            compact_window, compact_present = graph_to_window(g)
            np.testing.assert_array_equal(present[index], compact_present)
            np.testing.assert_array_equal(window[index], compact_window)
            # the central row of A_norm H must agree between both layouts
            compact = normalized_adjacency(g) @ g.node_features
            padded = a_batch[index] @ window[index]
            np.testing.assert_allclose(padded[0], compact[0], rtol=1e-12, atol=1e-12)

    def test_absent_slots_are_zero(self):
        table = full_table(n_rows=2, n_cols=2)
        window, present = padded_window(table=table, cells=[(0, 0)])
        self.assertEqual(int(present.sum()), 4)
        a_batch = batch_normalized_adjacency(present)
        absent = ~present[0]
        self.assertTrue(np.all(window[0][absent] == 0.0))
        self.assertTrue(np.all(a_batch[0][absent, :] == 0.0))
        self.assertTrue(np.all(a_batch[0][:, absent] == 0.0))


if __name__ == '__main__':
    unittest.main()
