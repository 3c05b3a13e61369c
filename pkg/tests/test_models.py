import sys
import os

sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/../src")
print('sys.path={}'.format(sys.path))

import unittest

import numpy as np

from opus_vicinia.grid_core import CellRecord, FeatureTable, GridSpec, N_FEATURES
from opus_vicinia.local_graphs import LocalGraph, build_local_graph
from opus_vicinia.models import (
    GCN,
    MLP_LOCAL,
    MLP_NEIGHBORS,
    MODEL_KINDS,
    CheckpointException,
    GCNClassifier,
    GraphBatch,
    MLPBaseline,
    UnknownModelException,
    assemble_neighbor_input,
    build_model,
    gcn_predict,
    load_checkpoint,
    mlp_predict,
    parameter_count,
    predict_labels,
    prepare_batch,
    random_gradcheck_instance,
    save_checkpoint,
)
from opus_vicinia.neural_core import DenseParams, ShapeException, SoftmaxRegression, gradcheck
from logging_support import TestLogger, WorkDir, print_logger_lines

running_path = os.getcwd()
print('Current Working Path: {}'.format(running_path))


def random_table(n_rows: int, n_cols: int, seed: int, skip=())->FeatureTable:
    rng = np.random.default_rng(seed)
    records = [
        CellRecord(row=row, col=col, features=tuple(rng.normal(size=N_FEATURES)), label=int(rng.integers(0, 2)), zone=1)
        for row in range(n_rows) for col in range(n_cols)
        if (row, col) not in skip
    ]
    return FeatureTable.from_records(grid=GridSpec(n_rows=n_rows, n_cols=n_cols), records=records)


def with_random_biases(model, rng: np.random.Generator):
    for layer in model.layers().values():
        layer.b[:] = rng.normal(scale=0.1, size=layer.b.shape)
    return model


def literal_gcn(model: GCNClassifier, g: LocalGraph)->np.ndarray:
    """Loop transcription of the two propagation steps followed by the central readout."""
    k = g.node_count
    a = np.eye(k)
    for i, j in g.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    degree = a.sum(axis=1)
    a_norm = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            a_norm[i, j] = a[i, j] / np.sqrt(degree[i] * degree[j])
    h = g.node_features
    for layer in (model.gcn1, model.gcn2):
        out = np.zeros((k, layer.out_dim))
        for i in range(k):
            aggregated = np.zeros(layer.in_dim)
            for j in range(k):
                aggregated += a_norm[i, j] * h[j]
            for o in range(layer.out_dim):
                out[i, o] = max(0.0, float(np.dot(aggregated, layer.W[:, o])) + layer.b[o])
        h = out
    center = h[g.central_index]
    return np.array([float(np.dot(center, model.head.W[:, o])) + model.head.b[o] for o in range(2)])


class TestArchitectures(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        self.rng = np.random.default_rng(77)
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_parameter_counts(self):
        self.assertEqual(parameter_count(build_model(kind=GCN, rng=self.rng)), 4930)
        self.assertEqual(parameter_count(build_model(kind=MLP_NEIGHBORS, rng=self.rng)), 5378)
        self.assertEqual(parameter_count(build_model(kind=MLP_LOCAL, rng=self.rng)), 770)

    def test_unknown_model(self):
        with self.assertRaises(UnknownModelException):
            build_model(kind='transformer', rng=self.rng)

    def test_initial_biases_are_zero(self):
        for kind in MODEL_KINDS:
            for layer in build_model(kind=kind, rng=self.rng).layers().values():
                self.assertTrue(np.all(layer.b == 0.0), kind)

    def test_zero_input_gives_even_odds(self):
        gcn = build_model(kind=GCN, rng=self.rng)
        g = LocalGraph(node_features=np.zeros((2, N_FEATURES)), edges=((0, 1),), central_index=0, node_coords=((0, 0), (0, 1)))
        logits, probs = gcn_predict(model=gcn, g=g)
        np.testing.assert_array_equal(logits, [0.0, 0.0])
        np.testing.assert_array_equal(probs, [0.5, 0.5])
        mlp = build_model(kind=MLP_LOCAL, rng=self.rng)
        _, probs = mlp_predict(model=mlp, x=np.zeros(N_FEATURES))
        np.testing.assert_array_equal(probs, [0.5, 0.5])

    def test_gcn_matches_literal_transcription(self):
        table = random_table(n_rows=4, n_cols=4, seed=1, skip={(2, 1)})
        model = with_random_biases(build_model(kind=GCN, rng=self.rng), self.rng)
        cells = table.cells()
        graphs = [build_local_graph(table=table, row=r, col=c) for r, c in cells]
        batch_logits = model.logits(prepare_batch(kind=GCN, table=table, cells=cells))
        for index, g in enumerate(graphs):
            logits, probs = gcn_predict(model=model, g=g)
            expected = literal_gcn(model=model, g=g)
            np.testing.assert_allclose(logits, expected, rtol=0, atol=1e-12)
            np.testing.assert_allclose(batch_logits[index], expected, rtol=0, atol=1e-12)
            self.assertAlmostEqual(float(probs.sum()), 1.0, places=12)

    def test_graph_batch_from_local_graphs(self):
        table = random_table(n_rows=3, n_cols=3, seed=2)
        model = with_random_biases(build_model(kind=GCN, rng=self.rng), self.rng)
        graphs = [build_local_graph(table=table, row=r, col=c) for r, c in table.cells()]
        logits = model.logits(GraphBatch.from_local_graphs(graphs=graphs))
        for index, g in enumerate(graphs):
            np.testing.assert_allclose(logits[index], gcn_predict(model=model, g=g)[0], rtol=0, atol=1e-12)

    def test_gcn_ignores_neighbor_order(self):
        table = random_table(n_rows=3, n_cols=3, seed=3)
        model = with_random_biases(build_model(kind=GCN, rng=self.rng), self.rng)
        g = build_local_graph(table=table, row=1, col=1)
        order = [0] + list(self.rng.permutation(np.arange(1, g.node_count)))
        position = {old: new for new, old in enumerate(order)}
        permuted = LocalGraph(
            node_features=g.node_features[order],
            edges=tuple((position[i], position[j]) for i, j in g.edges),
            central_index=0,
            node_coords=tuple(g.node_coords[i] for i in order),
        )
        np.testing.assert_allclose(gcn_predict(model=model, g=permuted)[0], gcn_predict(model=model, g=g)[0], rtol=0, atol=1e-12)

    def test_single_node_gcn_is_an_mlp(self):
        model = with_random_biases(build_model(kind=GCN, rng=self.rng), self.rng)
        x = self.rng.normal(size=N_FEATURES)
        g = LocalGraph(node_features=x[None, :], edges=(), central_index=0, node_coords=((5, 5),))
        h1 = np.maximum(x @ model.gcn1.W + model.gcn1.b, 0.0)
        h2 = np.maximum(h1 @ model.gcn2.W + model.gcn2.b, 0.0)
        np.testing.assert_allclose(gcn_predict(model=model, g=g)[0], h2 @ model.head.W + model.head.b, rtol=0, atol=1e-12)

    def test_gcn_rejects_wrong_feature_count(self):
        model = build_model(kind=GCN, rng=self.rng)
        g = LocalGraph.__new__(LocalGraph)
        object.__setattr__(g, 'node_features', np.zeros((1, 4)))
        object.__setattr__(g, 'edges', ())
        object.__setattr__(g, 'central_index', 0)
        object.__setattr__(g, 'node_coords', ((0, 0),))
        with self.assertRaises(ShapeException):
            gcn_predict(model=model, g=g)


class TestMLPInputs(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        self.rng = np.random.default_rng(78)
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_interior_and_corner_inputs(self):
        table = random_table(n_rows=3, n_cols=3, seed=4)
        interior = assemble_neighbor_input(table=table, row=1, col=1)
        self.assertEqual(interior.shape, (81,))
        self.assertEqual(int(np.count_nonzero(interior == 0.0)), 0)
        corner = assemble_neighbor_input(table=table, row=0, col=0)
        zero_slots = [slot for slot in range(9) if np.all(corner[slot * 9:(slot + 1) * 9] == 0.0)]
        self.assertEqual(len(zero_slots), 5)

    def test_lonely_cell(self):
        table = FeatureTable.from_records(grid=GridSpec(n_rows=3, n_cols=3), records=[CellRecord(row=1, col=1, features=tuple([7.0] * N_FEATURES))])
        x = assemble_neighbor_input(table=table, row=1, col=1)
        np.testing.assert_array_equal(x[:9], np.full(9, 7.0))
        np.testing.assert_array_equal(x[9:], np.zeros(72))

    def test_batches_match_single_inputs(self):
        table = random_table(n_rows=3, n_cols=4, seed=5, skip={(0, 3)})
        cells = table.cells()
        neighbors = prepare_batch(kind=MLP_NEIGHBORS, table=table, cells=cells)
        local = prepare_batch(kind=MLP_LOCAL, table=table, cells=cells)
        for index, (row, col) in enumerate(cells):
            np.testing.assert_array_equal(neighbors.inputs[index], assemble_neighbor_input(table=table, row=row, col=col))
            np.testing.assert_array_equal(local.inputs[index], table.get(row, col).features)

    def test_mlp_matches_dense_oracle(self):
        for kind, dim in ((MLP_LOCAL, 9), (MLP_NEIGHBORS, 81)):
            model = with_random_biases(build_model(kind=kind, rng=self.rng), self.rng)
            x = self.rng.normal(size=dim)
            hidden = [max(0.0, float(np.dot(x, model.hidden.W[:, o])) + model.hidden.b[o]) for o in range(64)]
            expected = [float(np.dot(hidden, model.head.W[:, o])) + model.head.b[o] for o in range(2)]
            logits, _ = mlp_predict(model=model, x=x)
            np.testing.assert_allclose(logits, expected, rtol=0, atol=1e-12)

    def test_mlp_rejects_wrong_length(self):
        model = build_model(kind=MLP_LOCAL, rng=self.rng)
        with self.assertRaises(ShapeException):
            mlp_predict(model=model, x=np.zeros(81))
        with self.assertRaises(UnknownModelException):
            MLPBaseline(variant='mlp-wide', hidden=DenseParams(W=np.zeros((9, 64)), b=np.zeros(64)), head=DenseParams(W=np.zeros((64, 2)), b=np.zeros(2)))

    def test_ties_go_to_non_favela(self):
        model = build_model(kind=MLP_LOCAL, rng=self.rng)
        batch = prepare_batch(kind=MLP_LOCAL, table=random_table(n_rows=2, n_cols=2, seed=6), cells=[(0, 0), (1, 1)])
        batch.inputs[:] = 0.0
        np.testing.assert_array_equal(predict_labels(model=model, batch=batch), [0, 0])


class TestCheckpointAndGradients(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        self.work_dir = WorkDir()
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        self.work_dir.cleanup()
        return super().tearDown()

    def test_checkpoint_keeps_every_weight(self):
        rng = np.random.default_rng(21)
        table = random_table(n_rows=3, n_cols=3, seed=7)
        for kind in MODEL_KINDS:
            model = with_random_biases(build_model(kind=kind, rng=rng), rng)
            path = self.work_dir.file('{}.json'.format(kind))
            save_checkpoint(model=model, path=path, seed=21, config={'epochs': 3})
            loaded, metadata = load_checkpoint(path=path)
            self.assertEqual(metadata, {'variant': kind, 'seed': 21, 'config': {'epochs': 3}})
            self.assertEqual(loaded.kind, kind)
            for name, values in model.parameters().items():
                np.testing.assert_array_equal(loaded.parameters()[name], values)
            batch = prepare_batch(kind=kind, table=table, cells=table.cells())
            np.testing.assert_array_equal(loaded.logits(batch), model.logits(batch))

    def test_bad_checkpoints(self):
        with self.assertRaises(CheckpointException):
            load_checkpoint(path=self.work_dir.write('broken.json', '{not json'))
        with self.assertRaises(CheckpointException):
            load_checkpoint(path=self.work_dir.write('old.json', '{"format": "v0", "layers": []}'))
        with self.assertRaises(CheckpointException):
            load_checkpoint(path=self.work_dir.write('partial.json', '{"format": "v1", "variant": "gcn", "layers": []}'))

    def test_backprop_matches_finite_differences(self):
        for kind in MODEL_KINDS + (SoftmaxRegression.kind,):
            for seed in range(20):
                model, batch = random_gradcheck_instance(model_kind=kind, rng=np.random.default_rng(seed))
                self.assertLessEqual(gradcheck(model=model, sample=batch), 1e-5, '{} seed {}'.format(kind, seed))

    def test_gradcheck_catches_a_scaled_gradient(self):
        model, batch = random_gradcheck_instance(model_kind=GCN, rng=np.random.default_rng(0))

        def scale(grads):
            return {name: g * 1.01 for name, g in grads.items()}

        self.assertGreater(gradcheck(model=model, sample=batch, gradient_hook=scale), 1e-5)


if __name__ == '__main__':
    unittest.main()
